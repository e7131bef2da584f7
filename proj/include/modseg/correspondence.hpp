#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "modseg/backend.hpp"
#include "modseg/error.hpp"
#include "modseg/types.hpp"

namespace modseg {

/// Per-pixel Euclidean distance over the three channels.
template <typename Scalar>
DifferenceMap<Scalar> difference_map(const RgbImage<Scalar>& minus, const RgbImage<Scalar>& plus) {
    if (minus.height() != plus.height() || minus.width() != plus.width())
        throw Error(ErrorKind::Validation, "difference map inputs differ in size");
    Grid<Scalar> acc = Grid<Scalar>::Zero(minus.height(), minus.width());
    for (int c = 0; c < 3; ++c) acc += (minus[c] - plus[c]).square();
    return {acc.sqrt()};
}

/// Normalized sampled Gaussian with support radius ceil(4 sigma).
inline std::vector<double> gaussian_kernel(double sigma) {
    const int radius = static_cast<int>(std::ceil(4.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= total;
    return k;
}

/// Separable Gaussian filter. Each output is divided by the kernel mass that
/// falls inside the image, so constants are fixed points and borders are not darkened.
template <typename Scalar>
DifferenceMap<Scalar> gaussian_smooth(const DifferenceMap<Scalar>& map, double sigma) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) throw Error(ErrorKind::Validation, "sigma must be positive");
    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);
    const Eigen::Index h = map.height(), w = map.width();

    Grid<double> tmp(h, w);
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < w; ++j) {
            double acc = 0.0, mass = 0.0;
            const Eigen::Index lo = std::max<Eigen::Index>(0, j - radius), hi = std::min<Eigen::Index>(w - 1, j + radius);
            for (Eigen::Index q = lo; q <= hi; ++q) {
                const double k = kernel[q - j + radius];
                acc += k * double(map.values(i, q));
                mass += k;
            }
            tmp(i, j) = acc / mass;
        }
    DifferenceMap<Scalar> out{Grid<Scalar>(h, w)};
    for (Eigen::Index j = 0; j < w; ++j)
        for (Eigen::Index i = 0; i < h; ++i) {
            double acc = 0.0, mass = 0.0;
            const Eigen::Index lo = std::max<Eigen::Index>(0, i - radius), hi = std::min<Eigen::Index>(h - 1, i + radius);
            for (Eigen::Index p = lo; p <= hi; ++p) {
                const double k = kernel[p - i + radius];
                acc += k * tmp(p, j);
                mass += k;
            }
            out.values(i, j) = static_cast<Scalar>(std::max(0.0, acc / mass));
        }
    return out;
}

/// Labels every pixel with the index of its strongest difference map; ties go
/// to the lowest index.
template <typename Scalar>
SegmentationMap assign_labels(std::span<const DifferenceMap<Scalar>> maps) {
    if (maps.empty()) throw Error(ErrorKind::Validation, "assign_labels needs at least one difference map");
    const Eigen::Index h = maps[0].height(), w = maps[0].width();
    for (const auto& m : maps)
        if (m.height() != h || m.width() != w) throw Error(ErrorKind::Validation, "difference maps differ in size");

    SegmentationMap out;
    out.num_labels = static_cast<int>(maps.size());
    out.labels = LabelGrid::Zero(h, w);
    Grid<Scalar> best = maps[0].values;
    for (int k = 1; k < out.num_labels; ++k) {
        const auto wins = maps[k].values > best;
        out.labels = wins.select(k, out.labels);
        best = wins.select(maps[k].values, best);
    }
    out.provenance.resize(maps.size());
    for (int k = 0; k < out.num_labels; ++k) out.provenance[k] = k;
    return out;
}

template <typename Scalar>
SegmentationMap assign_labels(const std::vector<DifferenceMap<Scalar>>& maps) {
    return assign_labels(std::span<const DifferenceMap<Scalar>>(maps));
}

/// Bilinear upsampling of each mask's one-hot channel (half-pixel centers,
/// clamped edges) followed by a per-pixel argmax.
SegmentationMap naive_upsample(const LowResSegmentation& segmentation, Eigen::Index height, Eigen::Index width);

/// Nearest-neighbour resampling of a label grid (pixel-center convention).
LabelGrid resize_nearest(const LabelGrid& labels, Eigen::Index height, Eigen::Index width);

struct CorrespondenceConfig {
    CrossAttentionSite site{AttentionPath::Upward, 16, 3};
    int timestep = 281;
    double lambda = 10.0;
    OffsetPlacement placement = OffsetPlacement::PostProjection;
    bool inject_attention = true;
    bool single_step = false;
    /// Gaussian sigma in pixels; 0 disables smoothing.
    double sigma = 3.0;
    /// Worker threads for the per-mask fan-out; 0 picks the hardware concurrency.
    int threads = 0;
};

/// Optional store for per-mask difference maps. Implementations must be safe
/// to call from several worker threads.
class CorrespondenceCache {
public:
    virtual ~CorrespondenceCache() = default;
    virtual std::optional<DifferenceMapf> load(int mask_index, const BinaryMask& mask) = 0;
    virtual void store(int mask_index, const BinaryMask& mask, const DifferenceMapf& map) = 0;
};

struct Correspondences {
    std::vector<DifferenceMapf> maps;
    int applied_timestep = 0;
    int cache_hits = 0;
};

/// Difference map of one low-resolution mask, before smoothing.
DifferenceMapf mask_response(const Backend& backend, const LatentTrajectory& trajectory, const BinaryMask& mask,
                             const CorrespondenceConfig& config, int* applied_timestep = nullptr);

/// One smoothed difference map per low-resolution mask, in mask order.
Correspondences extract_correspondences(const Backend& backend, const LatentTrajectory& trajectory,
                                        const LowResSegmentation& segmentation, const CorrespondenceConfig& config,
                                        CorrespondenceCache* cache = nullptr);

}  // namespace modseg
