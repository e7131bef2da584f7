#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>
#include <mutex>

#include "modseg/correspondence.hpp"
#include "modseg/random.hpp"
#include "modseg/synthetic.hpp"

using namespace modseg;

namespace {

Image random_image(Rng& rng, Eigen::Index h, Eigen::Index w) {
    Image img(h, w);
    for (int c = 0; c < 3; ++c)
        for (Eigen::Index i = 0; i < img[c].size(); ++i) img[c].data()[i] = static_cast<float>(rng.uniform());
    return img;
}

// Dense 2-D convolution with the outer-product kernel, renormalized by the in-bounds mass.
Grid<double> dense_smooth(const Grid<double>& m, double sigma) {
    const int r = static_cast<int>(std::ceil(4.0 * sigma));
    Grid<double> out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) {
            double acc = 0.0, mass = 0.0;
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj) {
                    const Eigen::Index p = i + di, q = j + dj;
                    if (p < 0 || q < 0 || p >= m.rows() || q >= m.cols()) continue;
                    const double k = std::exp(-0.5 * (di * di + dj * dj) / (sigma * sigma));
                    acc += k * m(p, q);
                    mass += k;
                }
            out(i, j) = acc / mass;
        }
    return out;
}

SyntheticScene scene_256(std::uint64_t seed) {
    RandomSceneOptions o;
    o.height = 256;
    o.width = 256;
    o.num_labels = 4;
    o.regions = 8;
    return make_random_scene(o, seed);
}

LowResSegmentation per_label_masks(const SyntheticScene& scene) {
    const LabelGrid cells = scene.block_majority(scene.downsample_factor);
    LowResSegmentation seg;
    for (int l = 0; l < scene.num_labels; ++l) seg.masks.push_back((cells == l).cast<std::uint8_t>());
    return seg;
}

struct MemoryCache final : CorrespondenceCache {
    std::mutex mu;
    std::map<int, DifferenceMapf> maps;
    int stores = 0;
    std::optional<DifferenceMapf> load(int i, const BinaryMask&) override {
        std::lock_guard lock(mu);
        auto it = maps.find(i);
        if (it == maps.end()) return std::nullopt;
        return it->second;
    }
    void store(int i, const BinaryMask&, const DifferenceMapf& m) override {
        std::lock_guard lock(mu);
        maps[i] = m;
        ++stores;
    }
};

}  // namespace

TEST_CASE("difference map") {
    Rng rng(1);
    const Image a = random_image(rng, 6, 7);
    CHECK((difference_map(a, a).values == 0.0f).all());

    Image b = a;
    b[0](2, 3) += 0.3f;
    b[1](2, 3) += 0.4f;
    const auto d = difference_map(a, b);
    CHECK(d.values(2, 3) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(d.values.sum() == doctest::Approx(0.5).epsilon(1e-6));

    for (int trial = 0; trial < 20; ++trial) {
        const Image p = random_image(rng, 9, 5), q = random_image(rng, 9, 5);
        const auto m = difference_map(p, q);
        for (Eigen::Index i = 0; i < 9; ++i)
            for (Eigen::Index j = 0; j < 5; ++j) {
                double s = 0.0;
                for (int c = 0; c < 3; ++c) s += std::pow(double(p[c](i, j)) - double(q[c](i, j)), 2);
                REQUIRE(m.values(i, j) == doctest::Approx(std::sqrt(s)).epsilon(1e-6));
            }
    }
    CHECK_THROWS_AS(difference_map(a, random_image(rng, 6, 6)), Error);
}

TEST_CASE("gaussian kernel and smoothing") {
    const auto k = gaussian_kernel(3.0);
    CHECK(k.size() == 25);
    double total = 0.0;
    for (double v : k) total += v;
    CHECK(total == doctest::Approx(1.0));

    DifferenceMap<double> flat{Grid<double>::Constant(20, 30, 2.5)};
    CHECK((gaussian_smooth(flat, 3.0).values - 2.5).abs().maxCoeff() < 1e-12);

    DifferenceMap<double> impulse{Grid<double>::Zero(21, 21)};
    impulse.values(10, 10) = 1.0;
    const auto bump = gaussian_smooth(impulse, 1.5).values;
    Eigen::Index r = 0, c = 0;
    bump.maxCoeff(&r, &c);
    CHECK(r == 10);
    CHECK(c == 10);
    CHECK((bump - bump.transpose()).abs().maxCoeff() < 1e-15);
    CHECK((bump - bump.rowwise().reverse()).abs().maxCoeff() < 1e-15);

    Rng rng(4);
    for (double sigma : {0.7, 1.0, 2.0, 3.0}) {
        DifferenceMap<double> m{Grid<double>(17, 23)};
        for (Eigen::Index i = 0; i < m.values.size(); ++i) m.values.data()[i] = rng.uniform();
        CHECK((gaussian_smooth(m, sigma).values - dense_smooth(m.values, sigma)).abs().maxCoeff() < 1e-6);
    }
    CHECK_THROWS_AS(gaussian_smooth(flat, 0.0), Error);
}

TEST_CASE("assign labels") {
    std::vector<DifferenceMapf> one{{Grid<float>::Random(4, 4).abs()}};
    CHECK((assign_labels(one).labels == 0).all());

    std::vector<DifferenceMapf> two{{Grid<float>::Constant(3, 3, 1.0f)}, {Grid<float>::Constant(3, 3, 2.0f)}};
    CHECK((assign_labels(two).labels == 1).all());

    std::vector<DifferenceMapf> tie{{Grid<float>::Constant(3, 3, 1.0f)}, {Grid<float>::Constant(3, 3, 1.0f)}};
    const auto t = assign_labels(tie);
    CHECK((t.labels == 0).all());
    CHECK(t.provenance == std::vector<int>{0, 1});

    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<DifferenceMapf> maps(5, DifferenceMapf{Grid<float>(6, 6)});
        for (auto& m : maps)
            for (Eigen::Index i = 0; i < 36; ++i) m.values.data()[i] = static_cast<float>(rng.below(4));
        const auto out = assign_labels(maps);
        for (Eigen::Index p = 0; p < 36; ++p) {
            int best = 0;
            for (int k = 1; k < 5; ++k)
                if (maps[k].values(p) > maps[best].values(p)) best = k;
            REQUIRE(out.labels(p) == best);
        }
    }
    tie.push_back({Grid<float>::Zero(2, 3)});
    CHECK_THROWS_AS(assign_labels(tie), Error);
}

TEST_CASE("naive upsample") {
    LowResSegmentation seg;
    BinaryMask a(2, 2), b(2, 2);
    a << 1, 0, 0, 1;
    b << 0, 1, 1, 0;
    seg.masks = {a, b};
    CHECK((naive_upsample(seg, 2, 2).labels == seg.labels()).all());

    // Closed-form bilinear weights of the 2x2 checkerboard at 4x4 (half-pixel centers).
    const auto up = naive_upsample(seg, 4, 4);
    const double pos[4] = {0.0, 0.25, 0.75, 1.0};  // clamped source coordinate of each output index
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) {
            const double fy = pos[i], fx = pos[j];
            const double w_a = (1 - fy) * (1 - fx) + fy * fx;  // mask a sits on the diagonal
            const double w_b = (1 - fy) * fx + fy * (1 - fx);
            const int expected = w_b > w_a ? 1 : 0;
            CHECK(up.labels(i, j) == expected);
        }

    LowResSegmentation single;
    single.masks = {BinaryMask::Ones(3, 3)};
    CHECK((naive_upsample(single, 64, 96).labels == 0).all());
}

TEST_CASE("nearest resize") {
    LabelGrid g(2, 3);
    g << 0, 1, 2, 3, 4, 5;
    CHECK((resize_nearest(g, 2, 3) == g).all());
    const auto up = resize_nearest(g, 4, 6);
    CHECK(up(0, 0) == 0);
    CHECK(up(1, 1) == 0);
    CHECK(up(3, 5) == 5);
    CHECK((resize_nearest(up, 2, 3) == g).all());
}

TEST_CASE("per-label masks: unsmoothed maps are maximal exactly on their label") {
    for (std::uint64_t seed : {1, 2, 3}) {
        const auto scene = scene_256(seed);
        const SyntheticBackend backend(scene);
        const auto traj = backend.invert(scene.render(), TimestepSchedule::ddpm(), seed);
        CorrespondenceConfig config;
        config.sigma = 0.0;
        const auto corr = extract_correspondences(backend, traj, per_label_masks(scene), config);
        CHECK(corr.applied_timestep == 281);
        for (int l = 0; l < scene.num_labels; ++l) {
            Grid<bool> strictly_max = Grid<bool>::Constant(256, 256, true);
            for (int o = 0; o < scene.num_labels; ++o)
                if (o != l) strictly_max = strictly_max && (corr.maps[l].values > corr.maps[o].values);
            REQUIRE((strictly_max == (scene.labels == l)).all());
            REQUIRE(((corr.maps[l].values > 0.0f) == (scene.labels == l)).all());
        }
        CHECK((assign_labels(corr.maps).labels == scene.labels).all());
    }
}

TEST_CASE("lambda zero gives zero maps") {
    const auto scene = scene_256(5);
    const SyntheticBackend backend(scene);
    const auto traj = backend.invert(scene.render(), TimestepSchedule::ddpm(), 0);
    CorrespondenceConfig config;
    config.lambda = 0.0;
    const auto corr = extract_correspondences(backend, traj, per_label_masks(scene), config);
    for (const auto& m : corr.maps) CHECK((m.values == 0.0f).all());
}

TEST_CASE("threads, cache and failures") {
    const auto scene = scene_256(6);
    const SyntheticBackend backend(scene);
    const auto traj = backend.invert(scene.render(), TimestepSchedule::ddpm(), 0);
    const auto seg = per_label_masks(scene);
    CorrespondenceConfig config;
    config.threads = 1;
    const auto serial = extract_correspondences(backend, traj, seg, config);
    config.threads = 3;
    const auto parallel = extract_correspondences(backend, traj, seg, config);
    for (int l = 0; l < seg.size(); ++l) CHECK((serial.maps[l].values == parallel.maps[l].values).all());

    MemoryCache cache;
    const auto first = extract_correspondences(backend, traj, seg, config, &cache);
    CHECK(first.cache_hits == 0);
    CHECK(cache.stores == seg.size());
    const auto second = extract_correspondences(backend, traj, seg, config, &cache);
    CHECK(second.cache_hits == seg.size());
    for (int l = 0; l < seg.size(); ++l) CHECK((second.maps[l].values == serial.maps[l].values).all());

    config.site = {AttentionPath::Upward, 32, 3};  // 16x16 grid expected, masks are 8x8
    try {
        extract_correspondences(backend, traj, seg, config);
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Backend);
        CHECK(std::string(e.what()).find("mask 0") != std::string::npos);
    }
}
