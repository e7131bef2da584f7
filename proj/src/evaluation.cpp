#include "modseg/evaluation.hpp"

#include <cmath>
#include <iostream>
#include <limits>

#include "modseg/error.hpp"

namespace modseg {

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
    if (counts.size() == 0) {
        counts = other.counts;
    } else {
        if (other.num_pred() != num_pred() || other.num_gt() != num_gt())
            throw Error(ErrorKind::Validation, "cannot merge confusion matrices of different shapes");
        counts += other.counts;
    }
    ignored += other.ignored;
    return *this;
}

ConfusionMatrix confusion(const LabelGrid& pred, int num_pred, const LabelGrid& gt, int num_gt, int ignore_label) {
    if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
        throw Error(ErrorKind::Validation, "prediction is " + std::to_string(pred.rows()) + "x" +
                                               std::to_string(pred.cols()) + " but ground truth is " +
                                               std::to_string(gt.rows()) + "x" + std::to_string(gt.cols()));
    ConfusionMatrix conf(num_pred, num_gt);
    for (Eigen::Index p = 0; p < gt.size(); ++p) {
        const int g = gt(p);
        if (g == ignore_label || g < 0 || g >= num_gt) {
            ++conf.ignored;
            continue;
        }
        const int q = pred(p);
        if (q < 0 || q >= num_pred) throw Error(ErrorKind::Validation, "predicted label " + std::to_string(q) + " out of range");
        ++conf.counts(q, g);
    }
    if (conf.total() == 0) std::cerr << "warning: every pixel carries the ignore label; confusion matrix is empty\n";
    return conf;
}

Assignment identity_assignment(int num_pred, int num_gt) {
    Assignment a(num_pred, -1);
    for (int i = 0; i < std::min(num_pred, num_gt); ++i) a[i] = i;
    return a;
}

std::vector<double> per_class_iou(const ConfusionMatrix& conf, const Assignment& assignment) {
    if (static_cast<int>(assignment.size()) != conf.num_pred())
        throw Error(ErrorKind::Validation, "assignment size differs from the number of predicted classes");
    const auto rows = conf.counts.rowwise().sum();
    const auto cols = conf.counts.colwise().sum();
    std::vector<int> owner(conf.num_gt(), -1);
    for (int i = 0; i < conf.num_pred(); ++i) {
        const int j = assignment[i];
        if (j < 0) continue;
        if (j >= conf.num_gt()) throw Error(ErrorKind::Validation, "assignment targets a nonexistent class");
        if (owner[j] >= 0) throw Error(ErrorKind::Validation, "assignment is not injective");
        owner[j] = i;
    }
    std::vector<double> iou(conf.num_gt(), std::numeric_limits<double>::quiet_NaN());
    for (int j = 0; j < conf.num_gt(); ++j) {
        const int i = owner[j];
        const std::int64_t inter = i >= 0 ? conf.counts(i, j) : 0;
        const std::int64_t uni = cols(j) + (i >= 0 ? rows(i) : 0) - inter;
        if (uni > 0) iou[j] = double(inter) / double(uni);
    }
    return iou;
}

double miou(const ConfusionMatrix& conf, const Assignment& assignment) {
    double total = 0.0;
    int counted = 0;
    for (double v : per_class_iou(conf, assignment)) {
        if (std::isnan(v)) continue;
        total += v;
        ++counted;
    }
    if (counted == 0) throw Error(ErrorKind::UndefinedMetric, "every class has an empty union");
    return total / counted;
}

std::vector<int> max_weight_assignment(const Eigen::MatrixXd& score) {
    const int rows = static_cast<int>(score.rows()), cols = static_cast<int>(score.cols());
    const int n = std::max(rows, cols);
    if (n == 0) return {};
    const double top = score.size() ? score.maxCoeff() : 0.0;
    auto cost = [&](int i, int j) { return (i < rows && j < cols) ? top - score(i, j) : top; };

    // Shortest augmenting paths with row/column potentials, 1-based with a sentinel column 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<int> match(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        match[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const int i0 = match[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) minv[j] = cur, way[j] = j0;
                if (minv[j] < delta) delta = minv[j], j1 = j;
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const int j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> out(rows, -1);
    for (int j = 1; j <= n; ++j)
        if (match[j] - 1 < rows && j - 1 < cols) out[match[j] - 1] = j - 1;
    return out;
}

Assignment hungarian_match(const ConfusionMatrix& conf) {
    const auto rows = conf.counts.rowwise().sum();
    const auto cols = conf.counts.colwise().sum();
    Eigen::MatrixXd iou(conf.num_pred(), conf.num_gt());
    for (int i = 0; i < conf.num_pred(); ++i)
        for (int j = 0; j < conf.num_gt(); ++j) {
            const std::int64_t inter = conf.counts(i, j);
            const std::int64_t uni = rows(i) + cols(j) - inter;
            iou(i, j) = uni > 0 ? double(inter) / double(uni) : 0.0;
        }
    // A nonempty prediction on a class absent from the ground truth scores 0 yet
    // enters the mean. An optimal matching only does that when forced, so the
    // penalty just breaks ties toward empty or unmatched predictions.
    for (int j = 0; j < conf.num_gt(); ++j)
        if (cols(j) == 0)
            for (int i = 0; i < conf.num_pred(); ++i)
                if (rows(i) > 0) iou(i, j) = -1.0;
    Assignment a = max_weight_assignment(iou);
    return a;
}

void TextClassSpec::validate() const {
    if (class_names.empty()) throw Error(ErrorKind::Validation, "no class names");
    if (templates.empty()) throw Error(ErrorKind::Validation, "no prompt templates");
    for (const auto& t : templates) {
        const auto first = t.find("{}");
        if (first == std::string::npos || t.find("{}", first + 2) != std::string::npos)
            throw Error(ErrorKind::Validation, "template must contain exactly one {} slot: '" + t + "'");
    }
}

std::vector<std::string> default_prompt_templates() {
    return {"itap of a {}.",           "a bad photo of a {}.", "a origami {}.",
            "a photo of the large {}.", "a {} in a video game.", "art of the {}.",
            "a photo of the small {}."};
}

std::string fill_template(const std::string& tmpl, const std::string& class_name) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) throw Error(ErrorKind::Validation, "template has no {} slot");
    return tmpl.substr(0, pos) + class_name + tmpl.substr(pos + 2);
}

RowMatrix<double> text_embeddings(const TextClassSpec& spec, const TextEncoder& encoder) {
    spec.validate();
    RowMatrix<double> out;
    for (std::size_t c = 0; c < spec.class_names.size(); ++c) {
        const auto& name = spec.class_names[c];
        Vector<double> mean;
        for (const auto& tmpl : spec.templates) {
            Vector<double> e;
            try {
                e = encoder(fill_template(tmpl, name));
            } catch (const std::exception& ex) {
                throw Error(ErrorKind::Backend, "text encoder failed for class '" + name + "': " + ex.what());
            }
            const double norm = e.norm();
            if (e.size() == 0 || !std::isfinite(norm) || norm == 0.0)
                throw Error(ErrorKind::Backend, "text encoder returned a non-normalizable vector for class '" + name + "'");
            if (mean.size() == 0) mean = Vector<double>::Zero(e.size());
            if (e.size() != mean.size())
                throw Error(ErrorKind::Backend, "text encoder changed dimension for class '" + name + "'");
            mean += e / norm;
        }
        mean /= double(spec.templates.size());
        if (mean.norm() == 0.0) throw Error(ErrorKind::Backend, "template embeddings cancel out for class '" + name + "'");
        if (out.size() == 0) out.resize(static_cast<Eigen::Index>(spec.class_names.size()), mean.size());
        out.row(static_cast<Eigen::Index>(c)) = mean.normalized().transpose();
    }
    return out;
}

namespace {

RowMatrix<double> unit_rows(const RowMatrix<double>& m) {
    RowMatrix<double> out = m;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double n = out.row(r).norm();
        if (n > 0.0) out.row(r) /= n;
    }
    return out;
}

int cosine_argmax(const Eigen::RowVectorXd& e, const RowMatrix<double>& unit_classes) {
    const Eigen::VectorXd sims = unit_classes * e.transpose();
    int best = 0;
    for (Eigen::Index c = 1; c < sims.size(); ++c)
        if (sims(c) > sims(best)) best = static_cast<int>(c);
    return best;
}

void check_field(const ExternalEmbeddingField& pixels, const RowMatrix<double>& class_vectors) {
    if (pixels.values.size() == 0 || pixels.height * pixels.width == 0)
        throw Error(ErrorKind::Validation, "external embedding field is empty");
    if (pixels.values.rows() != pixels.height * pixels.width)
        throw Error(ErrorKind::Validation, "external embedding field has the wrong number of rows");
    if (class_vectors.rows() < 1 || class_vectors.cols() != pixels.values.cols())
        throw Error(ErrorKind::Validation, "class vectors and pixel embeddings differ in dimension");
}

}  // namespace

SegmentationMap classify_masks_openvocab(const SegmentationMap& masks, const ExternalEmbeddingField& pixels,
                                         const RowMatrix<double>& class_vectors) {
    check_field(pixels, class_vectors);
    if (masks.height() != pixels.height || masks.width() != pixels.width)
        throw Error(ErrorKind::Validation, "masks and external embedding field differ in size");
    const Eigen::Index d = pixels.values.cols();
    RowMatrix<double> sums = RowMatrix<double>::Zero(masks.num_labels, d);
    std::vector<std::int64_t> counts(masks.num_labels, 0);
    for (Eigen::Index p = 0; p < masks.labels.size(); ++p) {
        sums.row(masks.labels(p)) += pixels.values.row(p).cast<double>();
        ++counts[masks.labels(p)];
    }
    const auto unit = unit_rows(class_vectors);
    std::vector<int> cls(masks.num_labels, 0);
    for (int k = 0; k < masks.num_labels; ++k)
        if (counts[k] > 0) cls[k] = cosine_argmax(sums.row(k) / double(counts[k]), unit);
    SegmentationMap out;
    out.num_labels = static_cast<int>(class_vectors.rows());
    out.labels = masks.labels.unaryExpr([&](int l) { return cls[l]; });
    return out;
}

SegmentationMap classify_pixels_openvocab(const ExternalEmbeddingField& pixels, const RowMatrix<double>& class_vectors) {
    check_field(pixels, class_vectors);
    const auto unit = unit_rows(class_vectors);
    SegmentationMap out;
    out.num_labels = static_cast<int>(class_vectors.rows());
    out.labels.resize(pixels.height, pixels.width);
    for (Eigen::Index p = 0; p < out.labels.size(); ++p)
        out.labels(p) = cosine_argmax(pixels.values.row(p).cast<double>(), unit);
    return out;
}

}  // namespace modseg
