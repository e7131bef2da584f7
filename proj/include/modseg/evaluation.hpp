#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "modseg/types.hpp"

namespace modseg {

inline constexpr int kIgnoreLabel = 255;

/// Pixel counts of (predicted class, ground-truth class) pairs.
struct ConfusionMatrix {
    Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> counts;  // C_pred x C_gt
    std::int64_t ignored = 0;

    ConfusionMatrix() = default;
    ConfusionMatrix(int num_pred, int num_gt)
        : counts(Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(num_pred, num_gt)) {}

    int num_pred() const { return static_cast<int>(counts.rows()); }
    int num_gt() const { return static_cast<int>(counts.cols()); }
    std::int64_t total() const { return counts.sum(); }

    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
};

/// Counts over pixels whose ground truth is in [0, num_gt); every other value
/// (the ignore label included) is counted as ignored. Warns on stderr when
/// every pixel is ignored.
ConfusionMatrix confusion(const LabelGrid& pred, int num_pred, const LabelGrid& gt, int num_gt,
                          int ignore_label = kIgnoreLabel);

/// assignment[pred] = matched ground-truth class, or -1.
using Assignment = std::vector<int>;

Assignment identity_assignment(int num_pred, int num_gt);

/// IoU of each ground-truth class under the assignment; NaN where the union is empty.
std::vector<double> per_class_iou(const ConfusionMatrix& conf, const Assignment& assignment);

/// Mean IoU over ground-truth classes with a nonempty union.
double miou(const ConfusionMatrix& conf, const Assignment& assignment);

/// Injective prediction-to-class matching that maximizes mIoU: a linear
/// assignment over pairwise IoUs, followed by parking empty predictions on
/// classes absent from the ground truth.
Assignment hungarian_match(const ConfusionMatrix& conf);

/// Maximum-weight assignment on a rectangular score matrix (Kuhn-Munkres with
/// potentials); returns row -> column or -1.
std::vector<int> max_weight_assignment(const Eigen::MatrixXd& score);

struct TextClassSpec {
    std::vector<std::string> class_names;
    std::vector<std::string> templates;

    void validate() const;
};

/// The seven prompt templates used for open-vocabulary evaluation.
std::vector<std::string> default_prompt_templates();

std::string fill_template(const std::string& tmpl, const std::string& class_name);

using TextEncoder = std::function<Vector<double>(const std::string& prompt)>;

/// Per class: mean of the unit-normalized template embeddings, renormalized.
RowMatrix<double> text_embeddings(const TextClassSpec& spec, const TextEncoder& encoder);

/// Flat H*W x d external embedding field.
struct ExternalEmbeddingField {
    Eigen::Index height = 0;
    Eigen::Index width = 0;
    RowMatrix<float> values;
};

/// Classifies each mask by the cosine-nearest class vector of its mean pixel embedding.
SegmentationMap classify_masks_openvocab(const SegmentationMap& masks, const ExternalEmbeddingField& pixels,
                                         const RowMatrix<double>& class_vectors);

/// Per-pixel cosine classification of the raw field (no masks).
SegmentationMap classify_pixels_openvocab(const ExternalEmbeddingField& pixels, const RowMatrix<double>& class_vectors);

}  // namespace modseg
