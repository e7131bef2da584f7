#include "modseg/embeddings.hpp"

#include <limits>
#include <map>

namespace modseg {

std::vector<std::int64_t> PixelEmbeddingField::label_counts() const {
    std::vector<std::int64_t> counts(segmentation.num_labels, 0);
    for (Eigen::Index p = 0; p < segmentation.labels.size(); ++p) ++counts[segmentation.labels(p)];
    return counts;
}

PixelEmbeddingField build_pixel_field(const FeatureMapf& features, const LowResSegmentation& lowres,
                                      const SegmentationMap& segmentation) {
    PixelEmbeddingField field;
    field.segmentation = segmentation;
    field.embeddings.reserve(segmentation.num_labels);
    for (int label = 0; label < segmentation.num_labels; ++label) {
        const int source = segmentation.provenance.empty() ? label : segmentation.provenance[label];
        if (source < 0 || source >= lowres.size())
            throw Error(ErrorKind::Validation, "label provenance points outside the low-resolution masks");
        field.embeddings.push_back(mask_embedding(features, lowres.masks[source], source));
    }
    return field;
}

ConceptEmbeddings concept_embeddings_unsupervised(std::span<const PixelEmbeddingField> fields, int num_concepts,
                                                  std::uint64_t seed, const KMeansOptions& options) {
    if (fields.empty()) throw Error(ErrorKind::Validation, "empty dataset");
    if (num_concepts < 1) throw Error(ErrorKind::InvalidK, "number of concepts must be positive");

    // Identical embeddings are merged so that the distinct-point count is exact.
    std::map<std::vector<double>, double> merged;
    Eigen::Index dim = -1;
    for (const auto& field : fields) {
        const auto counts = field.label_counts();
        for (int label = 0; label < field.segmentation.num_labels; ++label) {
            if (counts[label] == 0) continue;
            const auto& v = field.embeddings[label].vector;
            if (dim < 0) dim = v.size();
            if (v.size() != dim) throw Error(ErrorKind::Validation, "embedding dimensions differ across the dataset");
            merged[std::vector<double>(v.data(), v.data() + v.size())] += double(counts[label]);
        }
    }
    if (merged.empty()) throw Error(ErrorKind::Validation, "dataset has no labeled pixels");
    if (num_concepts > static_cast<int>(merged.size()))
        throw Error(ErrorKind::InvalidK, "C = " + std::to_string(num_concepts) + " exceeds the " +
                                             std::to_string(merged.size()) + " distinct embeddings");

    RowMatrix<double> points(merged.size(), dim);
    std::vector<double> weights;
    Eigen::Index row = 0;
    for (const auto& [vec, weight] : merged) {
        points.row(row++) = Eigen::Map<const Eigen::RowVectorXd>(vec.data(), dim);
        weights.push_back(weight);
    }
    const auto res = kmeans_weighted(points, weights, num_concepts, seed, options);
    return {res.centroids, ConceptSource::KMeansDataset, {}};
}

ConceptEmbeddings concept_embeddings_modified(std::span<const PixelEmbeddingField> fields,
                                              std::span<const LabelGrid> ground_truth, int num_classes) {
    if (fields.size() != ground_truth.size())
        throw Error(ErrorKind::Validation, "one ground-truth grid per pixel field required");
    if (num_classes < 1) throw Error(ErrorKind::Validation, "number of classes must be positive");
    Eigen::Index dim = -1;
    for (const auto& f : fields)
        if (f.dim() > 0) dim = f.dim();
    if (dim < 0) throw Error(ErrorKind::Validation, "dataset has no embeddings");

    RowMatrix<double> sums = RowMatrix<double>::Zero(num_classes, dim);
    std::vector<double> counts(num_classes, 0.0);
    for (std::size_t n = 0; n < fields.size(); ++n) {
        const auto& seg = fields[n].segmentation;
        const auto& gt = ground_truth[n];
        if (gt.rows() != seg.height() || gt.cols() != seg.width())
            throw Error(ErrorKind::Validation, "ground truth " + std::to_string(n) + " does not align with its pixel field");
        // Accumulate (label, class) pair counts first, then weight embeddings once.
        std::map<std::pair<int, int>, std::int64_t> pairs;
        for (Eigen::Index p = 0; p < gt.size(); ++p) {
            const int cls = gt(p);
            if (cls < 0 || cls >= num_classes) continue;
            ++pairs[{seg.labels(p), cls}];
        }
        for (const auto& [key, count] : pairs) {
            sums.row(key.second) += double(count) * fields[n].embeddings[key.first].vector.transpose();
            counts[key.second] += double(count);
        }
    }

    ConceptEmbeddings out;
    out.source = ConceptSource::ClassMean;
    out.vectors = RowMatrix<double>::Zero(num_classes, dim);
    out.missing.assign(num_classes, true);
    bool any = false;
    for (int c = 0; c < num_classes; ++c) {
        if (counts[c] == 0.0) continue;
        out.vectors.row(c) = sums.row(c) / counts[c];
        out.missing[c] = false;
        any = true;
    }
    if (!any) throw Error(ErrorKind::Validation, "no labeled pixels in the dataset");
    return out;
}

SegmentationMap classify_pixels(const PixelEmbeddingField& field, const ConceptEmbeddings& concepts) {
    if (concepts.size() < 1) throw Error(ErrorKind::Validation, "no concepts");
    if (concepts.vectors.cols() != field.dim())
        throw Error(ErrorKind::Validation, "concept and pixel embedding dimensions differ");
    std::vector<int> label_class(field.segmentation.num_labels, 0);
    for (int label = 0; label < field.segmentation.num_labels; ++label) {
        const auto& e = field.embeddings[label].vector;
        double best_d = std::numeric_limits<double>::infinity();
        for (int c = 0; c < concepts.size(); ++c) {
            if (concepts.is_missing(c)) continue;
            const double d = (concepts.vectors.row(c).transpose() - e).squaredNorm();
            if (d < best_d) best_d = d, label_class[label] = c;
        }
    }
    SegmentationMap out;
    out.num_labels = concepts.size();
    out.labels = field.segmentation.labels.unaryExpr([&](int l) { return label_class[l]; });
    return out;
}

}  // namespace modseg
