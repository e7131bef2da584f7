#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <functional>
#include <limits>

#include "fixtures.hpp"
#include "modseg/error.hpp"
#include "modseg/lowres.hpp"

using namespace modseg;

namespace {

FeatureMap<double> as_features(const RowMatrix<double>& x) {
    FeatureMap<double> f(1, x.rows(), x.cols());
    f.values = x;
    return f;
}

}  // namespace

TEST_CASE("single cluster is the global mean") {
    Rng rng(3);
    FeatureMap<double> f(4, 4, 3);
    for (Eigen::Index i = 0; i < f.values.size(); ++i) f.values.data()[i] = rng.gaussian();
    const auto seg = kmeans_cluster(f, 1, 0);
    REQUIRE(seg.size() == 1);
    CHECK((seg.masks[0] == 1).all());
    CHECK(seg.centroids.row(0).isApprox(f.values.colwise().mean(), 1e-12));
}

TEST_CASE("four-point example") {
    RowMatrix<double> x(4, 2);
    x << 0, 0, 0.1, 0, 10, 0, 10.1, 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto seg = kmeans_cluster(as_features(x), 2, seed);
        const LabelGrid l = seg.labels();
        CHECK(l(0) == l(1));
        CHECK(l(2) == l(3));
        CHECK(l(0) != l(2));
        CHECK(seg.inertia == doctest::Approx(0.01).epsilon(1e-9));
    }
}

TEST_CASE("matches exhaustive partition search on small instances") {
    Rng rng(99);
    for (int trial = 0; trial < 60; ++trial) {
        const int n = 3 + static_cast<int>(rng.below(6));
        const int k = 1 + static_cast<int>(rng.below(std::min(n, 4)));
        RowMatrix<double> x(n, 2);
        for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.gaussian();
        const auto seg = kmeans_cluster(as_features(x), k, trial);
        CHECK(seg.inertia == doctest::Approx(fixtures::exhaustive_sse(x, k)).epsilon(1e-9));
    }
}

TEST_CASE("history is non-increasing and runs are deterministic") {
    Rng rng(5);
    RowMatrix<double> x(200, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.gaussian();
    const std::vector<double> w(200, 1.0);
    const auto a = kmeans_weighted(x, w, 7, 42);
    const auto b = kmeans_weighted(x, w, 7, 42);
    CHECK(a.assignment == b.assignment);
    CHECK(a.inertia == b.inertia);
    for (std::size_t i = 1; i < a.history.size(); ++i) CHECK(a.history[i] <= a.history[i - 1] + 1e-12);
    // Run r uses the same seed stream whatever the restart count, so more restarts never raise inertia.
    KMeansOptions one;
    one.restarts = 1;
    CHECK(a.inertia <= kmeans_weighted(x, w, 7, 42, one).inertia);
}

TEST_CASE("weights act as point multiplicities") {
    RowMatrix<double> x(3, 1), dup(5, 1);
    x << 0, 1, 5;
    dup << 0, 0, 0, 1, 5;
    const std::vector<double> w{3.0, 1.0, 1.0}, ones(5, 1.0);
    const auto a = kmeans_weighted(x, w, 2, 0), b = kmeans_weighted(dup, ones, 2, 0);
    CHECK(a.inertia == doctest::Approx(b.inertia));
    CHECK(a.inertia == doctest::Approx(3.0 * 0.0625 + 0.5625));  // centroid 0.25 for {0,0,0,1}
}

TEST_CASE("every mask is nonempty even with duplicate points") {
    FeatureMap<double> f(4, 4, 2);
    for (Eigen::Index c = 0; c < 16; ++c) f.cell(c / 4, c % 4) << double(c % 3), 0.0;
    const auto seg = kmeans_cluster(f, 6, 1);
    for (const auto& m : seg.masks) CHECK(m.sum() > 0);
    BinaryMask coverage = BinaryMask::Zero(4, 4);
    for (const auto& m : seg.masks) coverage += m;
    CHECK((coverage == 1).all());
}

TEST_CASE("invalid K") {
    FeatureMap<double> f(2, 2, 2);
    f.values.setRandom();
    for (int k : {0, 5}) {
        try {
            kmeans_cluster(f, k, 0);
            FAIL("expected InvalidK");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::InvalidK);
        }
    }
    f.values(0, 0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(kmeans_cluster(f, 1, 0), Error);
}

TEST_CASE("mask flattening") {
    BinaryMask m(2, 2);
    m << 1, 0, 0, 0;
    const auto flat = mask_to_flat(m);
    CHECK(flat.size() == 4);
    CHECK(flat(0) == 1);
    CHECK(flat.tail(3).sum() == 0);
    CHECK((mask_to_flat(BinaryMask::Ones(3, 5)).array() == 1).all());
    Rng rng(1);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::Index h = 1 + rng.below(9), w = 1 + rng.below(9);
        BinaryMask r(h, w);
        for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.uniform() < 0.5;
        CHECK((flat_to_mask(mask_to_flat(r), h, w) == r).all());
    }
    CHECK_THROWS_AS(flat_to_mask(flat, 3, 3), Error);
}
