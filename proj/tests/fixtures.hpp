#pragma once
// Shared test fixtures and brute-force oracles.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "modseg/error.hpp"
#include "modseg/evaluation.hpp"
#include "modseg/lowres.hpp"
#include "modseg/random.hpp"

namespace fixtures {

using namespace modseg;

/// Minimum SSE over all partitions of n points into exactly k nonempty groups.
inline double exhaustive_sse(const RowMatrix<double>& x, int k) {
    const int n = static_cast<int>(x.rows());
    std::vector<int> label(n, 0);
    double best = std::numeric_limits<double>::infinity();
    // Restricted growth strings enumerate each set partition once.
    std::function<void(int, int)> rec = [&](int i, int used) {
        if (used + (n - i) < k) return;
        if (i == n) {
            if (used != k) return;
            double sse = 0.0;
            for (int g = 0; g < k; ++g) {
                Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(x.cols());
                int count = 0;
                for (int p = 0; p < n; ++p)
                    if (label[p] == g) mean += x.row(p), ++count;
                mean /= count;
                for (int p = 0; p < n; ++p)
                    if (label[p] == g) sse += (x.row(p) - mean).squaredNorm();
            }
            best = std::min(best, sse);
            return;
        }
        for (int g = 0; g <= std::min(used, k - 1); ++g) {
            label[i] = g;
            rec(i + 1, std::max(used, g + 1));
        }
    };
    rec(0, 0);
    return best;
}

/// Maximum mIoU over all maximal injective maps pred -> gt, i.e. all
/// permutations of the confusion padded to square.
inline double exhaustive_best_miou(const ConfusionMatrix& conf) {
    const int p = conf.num_pred(), g = conf.num_gt(), full = std::min(p, g);
    Assignment a(p, -1);
    std::vector<bool> used(g, false);
    double best = -1.0;
    std::function<void(int, int)> rec = [&](int i, int matched) {
        if (matched + (p - i) < full) return;
        if (i == p) {
            if (matched < full) return;
            try {
                best = std::max(best, miou(conf, a));
            } catch (const Error&) {
            }
            return;
        }
        a[i] = -1;
        rec(i + 1, matched);
        for (int j = 0; j < g; ++j) {
            if (used[j]) continue;
            used[j] = true;
            a[i] = j;
            rec(i + 1, matched + 1);
            used[j] = false;
        }
        a[i] = -1;
    };
    rec(0, 0);
    return best;
}

/// Noisy embedding field over fine objects: a coarse patch-level component plus
/// per-pixel embeddings whose class is flipped for 20% of pixels inside objects.
struct OpenVocabFixture {
    LabelGrid ground_truth;
    SegmentationMap masks;
    ExternalEmbeddingField field;
    RowMatrix<double> class_vectors;
    int num_classes = 0;
};

inline OpenVocabFixture openvocab_fixture(std::uint64_t seed, double flip_rate = 0.2) {
    constexpr int kSize = 96, kBlock = 12, kClasses = 5, kDim = 16;
    Rng rng(seed);
    OpenVocabFixture f;
    f.num_classes = kClasses;

    f.class_vectors.resize(kClasses, kDim);
    for (Eigen::Index i = 0; i < f.class_vectors.size(); ++i) f.class_vectors.data()[i] = rng.gaussian();
    for (int c = 0; c < kClasses; ++c) f.class_vectors.row(c).normalize();

    // Objects are cells of a jittered Voronoi diagram; several objects may share a class.
    constexpr int kObjects = 9;
    std::vector<std::array<double, 2>> sites;
    std::vector<int> object_class;
    for (int o = 0; o < kObjects; ++o) {
        sites.push_back({(o / 3 + 0.2 + 0.6 * rng.uniform()) * kSize / 3.0, (o % 3 + 0.2 + 0.6 * rng.uniform()) * kSize / 3.0});
        object_class.push_back(o < kClasses ? o : static_cast<int>(rng.below(kClasses)));
    }
    LabelGrid objects(kSize, kSize);
    for (int i = 0; i < kSize; ++i)
        for (int j = 0; j < kSize; ++j) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int o = 0; o < kObjects; ++o) {
                const double d = std::hypot(i + 0.5 - sites[o][0], j + 0.5 - sites[o][1]);
                if (d < best_d) best_d = d, best = o;
            }
            objects(i, j) = best;
        }
    f.ground_truth = objects.unaryExpr([&](int o) { return object_class[o]; });
    f.masks.labels = objects;
    f.masks.num_labels = kObjects;
    for (int o = 0; o < kObjects; ++o) f.masks.provenance.push_back(o);

    // Coarse component: patch-level embedding of the patch's majority class.
    LabelGrid coarse(kSize / kBlock, kSize / kBlock);
    for (int bi = 0; bi < coarse.rows(); ++bi)
        for (int bj = 0; bj < coarse.cols(); ++bj) {
            std::vector<int> votes(kClasses, 0);
            for (int i = 0; i < kBlock; ++i)
                for (int j = 0; j < kBlock; ++j) ++votes[f.ground_truth(bi * kBlock + i, bj * kBlock + j)];
            coarse(bi, bj) = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
        }

    f.field.height = kSize;
    f.field.width = kSize;
    f.field.values.resize(kSize * kSize, kDim);
    for (int i = 0; i < kSize; ++i)
        for (int j = 0; j < kSize; ++j) {
            int cls = f.ground_truth(i, j);
            if (rng.uniform() < flip_rate) cls = (cls + 1 + static_cast<int>(rng.below(kClasses - 1))) % kClasses;
            Eigen::RowVectorXd e = 0.7 * f.class_vectors.row(cls) + 0.3 * f.class_vectors.row(coarse(i / kBlock, j / kBlock));
            for (int d = 0; d < kDim; ++d) e(d) += 0.15 * rng.gaussian();
            f.field.values.row(i * kSize + j) = e.cast<float>();
        }
    return f;
}

}  // namespace fixtures
