#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "modseg/lowres.hpp"
#include "modseg/types.hpp"

namespace modseg {

struct MaskEmbedding {
    Vector<double> vector;
    int mask_index = 0;
};

/// Per-pixel embeddings without H*W*d storage: pixel p carries
/// embeddings[segmentation.labels(p)].
struct PixelEmbeddingField {
    SegmentationMap segmentation;
    std::vector<MaskEmbedding> embeddings;  // one per label

    Eigen::Index dim() const { return embeddings.empty() ? 0 : embeddings.front().vector.size(); }
    /// Number of pixels carrying each label.
    std::vector<std::int64_t> label_counts() const;
};

enum class ConceptSource { KMeansDataset, ClassMean };

struct ConceptEmbeddings {
    RowMatrix<double> vectors;  // C x d
    ConceptSource source = ConceptSource::KMeansDataset;
    /// Class-mean concepts only: classes with no labeled pixel in the dataset.
    std::vector<bool> missing;

    int size() const { return static_cast<int>(vectors.rows()); }
    bool is_missing(int c) const { return !missing.empty() && missing[c]; }
};

/// Mean feature vector over the cells of a low-resolution mask.
template <typename Scalar>
MaskEmbedding mask_embedding(const FeatureMap<Scalar>& features, const BinaryMask& mask, int mask_index = 0) {
    if (mask.rows() != features.height || mask.cols() != features.width)
        throw Error(ErrorKind::Validation, "mask and feature map differ in size");
    Vector<double> sum = Vector<double>::Zero(features.dim());
    Eigen::Index count = 0;
    for (Eigen::Index cell = 0; cell < mask.size(); ++cell) {
        if (!mask(cell)) continue;
        sum += features.values.row(cell).transpose().template cast<double>();
        ++count;
    }
    if (count == 0) throw Error(ErrorKind::Validation, "mask embedding of an empty mask");
    return {sum / double(count), mask_index};
}

/// Pixel embedding field for a final segmentation: every label inherits the
/// embedding of the low-resolution mask it came from.
PixelEmbeddingField build_pixel_field(const FeatureMapf& features, const LowResSegmentation& lowres,
                                      const SegmentationMap& segmentation);

/// Concepts as centroids of a pixel-count weighted k-means over every mask
/// embedding in the dataset.
ConceptEmbeddings concept_embeddings_unsupervised(std::span<const PixelEmbeddingField> fields, int num_concepts,
                                                  std::uint64_t seed, const KMeansOptions& options = {});

/// Concepts as per-class means of pixel embeddings under ground-truth labels.
/// Labels outside [0, num_classes) (including the ignore label) are skipped.
ConceptEmbeddings concept_embeddings_modified(std::span<const PixelEmbeddingField> fields,
                                              std::span<const LabelGrid> ground_truth, int num_classes);

/// Nearest concept (Euclidean) per label, expanded to pixels. Missing concepts
/// are never chosen; ties go to the lowest class index.
SegmentationMap classify_pixels(const PixelEmbeddingField& field, const ConceptEmbeddings& concepts);

}  // namespace modseg
