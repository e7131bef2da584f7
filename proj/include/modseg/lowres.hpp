#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "modseg/error.hpp"
#include "modseg/random.hpp"
#include "modseg/types.hpp"

namespace modseg {

struct KMeansOptions {
    int max_iterations = 300;
    // Best of several seeded runs; a single Lloyd run often stops in a local minimum.
    int restarts = 10;
    /// Single-point exchange pass (Hartigan) after Lloyd converges.
    bool refine = true;
};

struct KMeansResult {
    std::vector<int> assignment;
    RowMatrix<double> centroids;
    double inertia = 0.0;
    /// Inertia after every update step of the returned run, non-increasing.
    std::vector<double> history;
    int iterations = 0;
    bool converged = false;
};

namespace detail {

inline double sq_dist(const RowMatrix<double>& a, Eigen::Index i, const RowMatrix<double>& b, Eigen::Index k) {
    return (a.row(i) - b.row(k)).squaredNorm();
}

inline void update_centroids(const RowMatrix<double>& x, std::span<const double> w, const std::vector<int>& assign,
                             RowMatrix<double>& centroids, std::vector<double>& mass) {
    centroids.setZero();
    std::fill(mass.begin(), mass.end(), 0.0);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        centroids.row(assign[i]) += w[i] * x.row(i);
        mass[assign[i]] += w[i];
    }
    for (Eigen::Index k = 0; k < centroids.rows(); ++k)
        if (mass[k] > 0.0) centroids.row(k) /= mass[k];
}

inline double inertia(const RowMatrix<double>& x, std::span<const double> w, const std::vector<int>& assign,
                      const RowMatrix<double>& centroids) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < x.rows(); ++i) total += w[i] * sq_dist(x, i, centroids, assign[i]);
    return total;
}

/// Weighted k-means++ seeding.
inline RowMatrix<double> seed_plus_plus(const RowMatrix<double>& x, std::span<const double> w, int k, Rng& rng) {
    const Eigen::Index n = x.rows();
    RowMatrix<double> centers(k, x.cols());
    std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
    std::vector<bool> taken(n, false);

    auto pick = [&](const std::vector<double>& score) -> Eigen::Index {
        double total = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) total += taken[i] ? 0.0 : score[i];
        if (total <= 0.0) {
            // Every remaining point coincides with a center: take the first unused one.
            for (Eigen::Index i = 0; i < n; ++i)
                if (!taken[i]) return i;
            return 0;
        }
        double r = rng.uniform() * total;
        Eigen::Index last = -1;
        for (Eigen::Index i = 0; i < n; ++i) {
            if (taken[i] || score[i] <= 0.0) continue;
            last = i;
            if ((r -= score[i]) < 0.0) return i;
        }
        return last;
    };

    std::vector<double> score(w.begin(), w.end());
    for (int c = 0; c < k; ++c) {
        const Eigen::Index chosen = pick(score);
        taken[chosen] = true;
        centers.row(c) = x.row(chosen);
        for (Eigen::Index i = 0; i < n; ++i) {
            nearest[i] = std::min(nearest[i], sq_dist(x, i, centers, c));
            score[i] = w[i] * nearest[i];
        }
    }
    return centers;
}

/// Moves single points between clusters while that strictly lowers the weighted SSE.
inline bool hartigan_pass(const RowMatrix<double>& x, std::span<const double> w, std::vector<int>& assign,
                          RowMatrix<double>& centroids, std::vector<double>& mass) {
    bool moved_any = false;
    for (int sweep = 0; sweep < 100; ++sweep) {
        bool moved = false;
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            const int from = assign[i];
            if (mass[from] - w[i] <= 0.0) continue;
            const double leave = w[i] * mass[from] / (mass[from] - w[i]) * sq_dist(x, i, centroids, from);
            int best = from;
            double best_gain = 1e-12 * (1.0 + leave);
            for (Eigen::Index k = 0; k < centroids.rows(); ++k) {
                if (k == from) continue;
                const double join = w[i] * mass[k] / (mass[k] + w[i]) * sq_dist(x, i, centroids, k);
                if (leave - join > best_gain) best_gain = leave - join, best = static_cast<int>(k);
            }
            if (best == from) continue;
            centroids.row(from) = (centroids.row(from) * mass[from] - w[i] * x.row(i)) / (mass[from] - w[i]);
            mass[from] -= w[i];
            centroids.row(best) = (centroids.row(best) * mass[best] + w[i] * x.row(i)) / (mass[best] + w[i]);
            mass[best] += w[i];
            assign[i] = best;
            moved = moved_any = true;
        }
        if (!moved) break;
    }
    return moved_any;
}

inline KMeansResult lloyd(const RowMatrix<double>& x, std::span<const double> w, int k, Rng& rng,
                          const KMeansOptions& options) {
    const Eigen::Index n = x.rows();
    KMeansResult res;
    res.centroids = seed_plus_plus(x, w, k, rng);
    res.assignment.assign(n, -1);
    std::vector<double> mass(k, 0.0);

    for (res.iterations = 0; res.iterations < options.max_iterations; ++res.iterations) {
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            int best = 0;
            double best_d = sq_dist(x, i, res.centroids, 0);
            for (int c = 1; c < k; ++c) {
                const double d = sq_dist(x, i, res.centroids, c);
                if (d < best_d) best_d = d, best = c;
            }
            if (best != res.assignment[i]) changed = true, res.assignment[i] = best;
        }
        // Empty clusters take the point farthest from its centroid.
        std::vector<int> count(k, 0);
        for (int a : res.assignment) ++count[a];
        for (int c = 0; c < k; ++c) {
            if (count[c] > 0) continue;
            Eigen::Index far = -1;
            double far_d = -1.0;
            for (Eigen::Index i = 0; i < n; ++i) {
                if (count[res.assignment[i]] < 2) continue;
                const double d = sq_dist(x, i, res.centroids, res.assignment[i]);
                if (d > far_d) far_d = d, far = i;
            }
            if (far < 0) break;
            --count[res.assignment[far]];
            res.assignment[far] = c;
            count[c] = 1;
            changed = true;
        }
        update_centroids(x, w, res.assignment, res.centroids, mass);
        res.history.push_back(inertia(x, w, res.assignment, res.centroids));
        if (!changed) {
            res.converged = true;
            break;
        }
    }
    if (options.refine && hartigan_pass(x, w, res.assignment, res.centroids, mass)) {
        update_centroids(x, w, res.assignment, res.centroids, mass);
        res.history.push_back(std::min(res.history.back(), inertia(x, w, res.assignment, res.centroids)));
    }
    res.inertia = inertia(x, w, res.assignment, res.centroids);
    return res;
}

}  // namespace detail

/// Weighted k-means (k-means++ seeding, Lloyd iterations, optional Hartigan
/// refinement). Weights must be positive; ties in assignment go to the lowest
/// cluster index. Deterministic for a given seed.
inline KMeansResult kmeans_weighted(const RowMatrix<double>& points, std::span<const double> weights, int k,
                                    std::uint64_t seed, const KMeansOptions& options = {}) {
    const Eigen::Index n = points.rows();
    if (k < 1 || k > n)
        throw Error(ErrorKind::InvalidK, "K = " + std::to_string(k) + " must be in [1, " + std::to_string(n) + "]");
    if (static_cast<Eigen::Index>(weights.size()) != n)
        throw Error(ErrorKind::Validation, "one weight per point required");
    if (!points.allFinite()) throw Error(ErrorKind::Validation, "k-means input contains non-finite values");
    for (double w : weights)
        if (!(w > 0.0) || !std::isfinite(w)) throw Error(ErrorKind::Validation, "k-means weights must be positive");

    KMeansResult best;
    for (int r = 0; r < std::max(1, options.restarts); ++r) {
        Rng rng(hash_keys({seed, static_cast<std::uint64_t>(r)}));
        auto run = detail::lloyd(points, weights, k, rng, options);
        if (r == 0 || run.inertia < best.inertia) best = std::move(run);
    }
    return best;
}

/// Clusters the cells of a feature map into K low-resolution masks.
template <typename Scalar>
LowResSegmentation kmeans_cluster(const FeatureMap<Scalar>& features, int k, std::uint64_t seed,
                                  const KMeansOptions& options = {}) {
    if (features.cells() < 1 || features.dim() < 1) throw Error(ErrorKind::Validation, "empty feature map");
    if (k < 1 || k > features.cells())
        throw Error(ErrorKind::InvalidK,
                    "K = " + std::to_string(k) + " exceeds the " + std::to_string(features.cells()) + " feature cells");
    if (!features.values.allFinite()) throw Error(ErrorKind::Validation, "feature map contains non-finite values");

    const RowMatrix<double> x = features.values.template cast<double>();
    const std::vector<double> w(x.rows(), 1.0);
    const auto res = kmeans_weighted(x, w, k, seed, options);

    LowResSegmentation seg;
    seg.centroids = res.centroids;
    seg.inertia = res.inertia;
    seg.masks.assign(k, BinaryMask::Zero(features.height, features.width));
    for (Eigen::Index cell = 0; cell < x.rows(); ++cell) seg.masks[res.assignment[cell]](cell) = 1;
    return seg;
}

/// Row-major flattening of an h x w mask into an hw x 1 column.
inline Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1> mask_to_flat(const BinaryMask& mask) {
    return Eigen::Map<const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>>(mask.data(), mask.size());
}

inline BinaryMask flat_to_mask(const Eigen::Matrix<std::uint8_t, Eigen::Dynamic, 1>& flat, Eigen::Index height,
                               Eigen::Index width) {
    if (flat.size() != height * width) throw Error(ErrorKind::Validation, "flat mask length differs from h*w");
    return Eigen::Map<const BinaryMask>(flat.data(), height, width);
}

}  // namespace modseg
