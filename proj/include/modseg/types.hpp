#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Dense>

namespace modseg {

/// Row-major dense 2-D field. All spatial grids in the library use this layout
/// so that (row, col) indexing and flat row-major indexing agree.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using LabelGrid = Grid<int>;
using BinaryMask = Grid<std::uint8_t>;

/// Row-major matrix, one sample per row.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Three-channel image with channels stored as separate planes.
template <typename Scalar>
struct RgbImage {
    std::array<Grid<Scalar>, 3> channels;

    RgbImage() = default;
    RgbImage(Eigen::Index height, Eigen::Index width) {
        for (auto& c : channels) c = Grid<Scalar>::Zero(height, width);
    }

    Eigen::Index height() const { return channels[0].rows(); }
    Eigen::Index width() const { return channels[0].cols(); }

    Grid<Scalar>& operator[](int c) { return channels[c]; }
    const Grid<Scalar>& operator[](int c) const { return channels[c]; }

    bool operator==(const RgbImage& other) const {
        if (height() != other.height() || width() != other.width()) return false;
        for (int c = 0; c < 3; ++c)
            if ((channels[c] != other.channels[c]).any()) return false;
        return true;
    }
};

using Image = RgbImage<float>;

/// h x w grid of d-dimensional vectors, stored as an (h*w) x d row-major matrix
/// whose row index is the row-major cell index.
template <typename Scalar>
struct FeatureMap {
    Eigen::Index height = 0;
    Eigen::Index width = 0;
    RowMatrix<Scalar> values;

    FeatureMap() = default;
    FeatureMap(Eigen::Index h, Eigen::Index w, Eigen::Index d)
        : height(h), width(w), values(RowMatrix<Scalar>::Zero(h * w, d)) {}

    Eigen::Index dim() const { return values.cols(); }
    Eigen::Index cells() const { return height * width; }
    auto cell(Eigen::Index row, Eigen::Index col) { return values.row(row * width + col); }
    auto cell(Eigen::Index row, Eigen::Index col) const { return values.row(row * width + col); }
};

using FeatureMapf = FeatureMap<float>;

/// Partition of an h x w grid into K binary masks.
struct LowResSegmentation {
    std::vector<BinaryMask> masks;
    RowMatrix<double> centroids;  // K x d
    double inertia = 0.0;

    int size() const { return static_cast<int>(masks.size()); }
    /// Cell labels in [0, K).
    LabelGrid labels() const;
};

/// Nonnegative per-pixel response strength.
template <typename Scalar>
struct DifferenceMap {
    Grid<Scalar> values;

    Eigen::Index height() const { return values.rows(); }
    Eigen::Index width() const { return values.cols(); }
};

using DifferenceMapf = DifferenceMap<float>;

/// Image-resolution label field. provenance[label] is the index of the
/// low-resolution mask the label came from.
struct SegmentationMap {
    LabelGrid labels;
    int num_labels = 0;
    std::vector<int> provenance;

    Eigen::Index height() const { return labels.rows(); }
    Eigen::Index width() const { return labels.cols(); }
};

inline LabelGrid LowResSegmentation::labels() const {
    if (masks.empty()) return {};
    LabelGrid out = LabelGrid::Constant(masks[0].rows(), masks[0].cols(), -1);
    for (int k = 0; k < size(); ++k) out = (masks[k] != 0).select(k, out);
    return out;
}

}  // namespace modseg
