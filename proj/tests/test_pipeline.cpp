#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <set>

#include "fixtures.hpp"
#include "modseg/error.hpp"
#include "modseg/io.hpp"
#include "modseg/pipeline.hpp"

using namespace modseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("modseg_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

SceneInput scene_input(std::uint64_t seed, int labels = 4, Eigen::Index h = 512, Eigen::Index w = 512) {
    RandomSceneOptions o;
    o.height = h;
    o.width = w;
    o.num_labels = labels;
    o.regions = 10;
    o.vocabulary_seed = 77;
    return {"scene_" + std::to_string(seed), make_random_scene(o, seed)};
}

RunConfig small_config(int masks) {
    RunConfig c;
    c.masks = masks;
    c.threads = 1;
    return c;
}

// Accuracy of a label map against ground truth under the best one-to-one relabeling.
double matched_accuracy(const LabelGrid& pred, int num_pred, const LabelGrid& gt, int num_gt) {
    const auto conf = confusion(pred, num_pred, gt, num_gt);
    Eigen::MatrixXd score = conf.counts.cast<double>();
    const auto a = max_weight_assignment(score);
    double hit = 0.0;
    for (int i = 0; i < num_pred; ++i)
        if (a[i] >= 0) hit += double(conf.counts(i, a[i]));
    return hit / double(conf.total());
}

std::map<std::string, std::vector<std::uint8_t>> snapshot(const fs::path& dir) {
    std::map<std::string, std::vector<std::uint8_t>> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = io::read_bytes(e.path());
    return out;
}

}  // namespace

TEST_CASE("run config defaults and keys") {
    const RunConfig c;
    CHECK(c.masks == 30);
    CHECK(c.feature_timestep == 1);
    CHECK(c.modulation_timestep == 281);
    CHECK(c.lambda == 10.0);
    CHECK(c.modulation_site == "up-16-3");
    CHECK(c.embedding_timestep == 200);
    CHECK(c.steps == 50);
    CHECK(c.inject_attention);
    CHECK_NOTHROW(c.validate());

    RunConfig d = c;
    d.set("masks", "12");
    d.set("inject_attention", "false");
    d.set("sigma", "1.5");
    const auto back = RunConfig::from_json_text(d.to_json_text());
    CHECK(back.canonical() == d.canonical());
    CHECK(back.hash() == d.hash());
    CHECK(d.hash() != c.hash());

    RunConfig t = c;
    t.threads = 4;
    CHECK(t.hash() == c.hash());

    CHECK_THROWS_AS(d.set("nonsense", "1"), Error);
    CHECK_THROWS_AS(d.set("masks", "many"), Error);
    CHECK_THROWS_AS(d.set("inject_attention", "perhaps"), Error);
    RunConfig bad = c;
    bad.modulation_site = "up-32-3";
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = c;
    bad.masks = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    CHECK(RunConfig::keys().size() == 20);
}

TEST_CASE("resize rule") {
    CHECK(resize_rule(512, 512) == std::pair<Eigen::Index, Eigen::Index>{512, 512});
    CHECK(resize_rule(1024, 1024) == std::pair<Eigen::Index, Eigen::Index>{512, 512});
    CHECK(resize_rule(480, 640) == std::pair<Eigen::Index, Eigen::Index>{448, 640});
    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        const Eigen::Index h = 1 + rng.below(3000), w = 1 + rng.below(3000);
        const auto [rh, rw] = resize_rule(h, w);
        REQUIRE(rh % 64 == 0);
        REQUIRE(rw % 64 == 0);
        const double s = std::sqrt(512.0 * 512.0 / double(h * w));
        REQUIRE(double(rh) >= h * s - 1e-6);
        REQUIRE(double(rh) < h * s + 64.0);
    }
    CHECK_THROWS_AS(resize_rule(0, 5), Error);
}

TEST_CASE("segment recovers a noise-free scene") {
    const auto input = scene_input(1);
    std::vector<StageTiming> timing;
    const auto e = segment(input, small_config(4), nullptr, &timing);
    CHECK(e.height == 512);
    CHECK(e.applied_timestep == 281);
    CHECK(e.final_map.num_labels == 4);
    CHECK(e.embeddings.size() == 4);
    CHECK(matched_accuracy(e.final_map.labels, 4, input.scene.labels, 4) > 0.995);
    CHECK(matched_accuracy(e.naive_map.labels, 4, input.scene.labels, 4) < matched_accuracy(e.final_map.labels, 4, input.scene.labels, 4));
    std::set<std::string> stages;
    for (const auto& t : timing) stages.insert(t.stage);
    CHECK(stages.count("correspondence") == 1);
    CHECK(stages.count("kmeans") == 1);

    // Unsmoothed maps recover the hidden field exactly.
    auto exact = small_config(4);
    exact.sigma = 0.0;
    const auto ex = segment(input, exact);
    CHECK(matched_accuracy(ex.final_map.labels, 4, input.scene.labels, 4) == 1.0);
}

TEST_CASE("segment resizes to the working size and back") {
    const auto input = scene_input(2, 3, 480, 640);
    const auto e = segment(input, small_config(3));
    CHECK(e.height == 448);
    CHECK(e.width == 640);
    CHECK(e.final_map.height() == 480);
    CHECK(e.final_map.width() == 640);
    CHECK(e.naive_map.height() == 480);
    CHECK(matched_accuracy(e.final_map.labels, 3, input.scene.labels, 3) > 0.98);
}

TEST_CASE("stage-tagged errors") {
    const auto input = scene_input(3);
    auto config = small_config(300);  // more masks than the 16x16 cells
    try {
        segment(input, config);
        FAIL("expected failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == "kmeans");
        CHECK(std::string(e.what()).find("invalid-k") != std::string::npos);
    }
    config = small_config(4);
    config.backend = "sd14";
    try {
        segment(input, config);
        FAIL("expected failure");
    } catch (const StageError& e) {
        CHECK(e.stage() == "config");
    }
}

TEST_CASE("io primitives") {
    const auto dir = scratch("io");
    io::Tensor t{{2, 3, 4}, {}};
    for (int i = 0; i < 24; ++i) t.data.push_back(0.5f * i - 3.0f);
    io::write_tensor(dir / "t.f32", t);
    const auto r = io::read_tensor(dir / "t.f32");
    CHECK(r.shape == t.shape);
    CHECK(r.data == t.data);
    io::write_text(dir / "junk.f32", "not a tensor");
    CHECK_THROWS_AS(io::read_tensor(dir / "junk.f32"), Error);

    Rng rng(5);
    BinaryMask m(5, 7);
    for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = rng.uniform() < 0.5;
    const auto bits = io::pack_bits(m);
    CHECK(bits.size() == 5);
    CHECK((io::unpack_bits(bits, 5, 7) == m).all());
    BinaryMask first = BinaryMask::Zero(1, 8);
    first(0, 0) = 1;
    CHECK(io::pack_bits(first)[0] == 0x80);

    LabelGrid labels(3, 4);
    labels << 0, 1, 2, 3, 3, 2, 1, 0, 0, 0, 1, 1;
    io::write_indexed_png(dir / "l.png", labels, label_palette(4, 0));
    CHECK((io::read_label_png(dir / "l.png") == labels).all());

    Image img(2, 2);
    img[0] << 0, 1, 0.5, 0.2;
    io::write_png(dir / "i.png", img);
    const auto back = io::read_png(dir / "i.png");
    CHECK((back[0] - img[0]).abs().maxCoeff() <= 0.5f / 255.0f + 1e-6f);

    CHECK(io::fnv1a("") == 0xcbf29ce484222325ull);
    CHECK(io::fnv1a("a") == 0xaf63dc4c8601ec8cull);
}

TEST_CASE("archive round trip, determinism and cache") {
    const std::vector<SceneInput> inputs{scene_input(4), scene_input(5)};
    auto config = small_config(6);
    config.keep_difference_maps = true;
    std::vector<ArchiveEntry> entries;
    for (const auto& in : inputs) entries.push_back(segment(in, config));

    const auto a = scratch("archive_a"), b = scratch("archive_b");
    write_archive(a, config, entries);
    std::vector<ArchiveEntry> again;
    for (const auto& in : inputs) again.push_back(segment(in, config));
    write_archive(b, config, again);
    CHECK(snapshot(a) == snapshot(b));
    CHECK(fs::exists(a / "images" / "scene_4" / "diffmaps" / "mask_005.f32"));

    const auto [cfg, read] = read_archive(a);
    CHECK(cfg.hash() == config.hash());
    REQUIRE(read.size() == 2);
    CHECK((read[0].final_map.labels == entries[0].final_map.labels).all());
    CHECK((read[0].naive_map.labels == entries[0].naive_map.labels).all());
    CHECK(read[0].final_map.provenance == entries[0].final_map.provenance);
    for (int k = 0; k < 6; ++k) {
        CHECK((read[1].lowres.masks[k] == entries[1].lowres.masks[k]).all());
        CHECK((read[1].embeddings[k].vector - entries[1].embeddings[k].vector).cwiseAbs().maxCoeff() < 1e-5);
    }

    // Disk cache: identical maps, and the second run is served from cache.
    const auto cache_dir = scratch("cache");
    auto plain = small_config(6);
    DiskCache cold(cache_dir, io::hash_image(inputs[0].scene.render()), plain);
    const auto first = segment(inputs[0], plain, &cold);
    DiskCache warm(cache_dir, io::hash_image(inputs[0].scene.render()), plain);
    const auto second = segment(inputs[0], plain, &warm);
    CHECK(first.cache_hits == 0);
    CHECK(second.cache_hits == 6);
    CHECK((first.final_map.labels == second.final_map.labels).all());
    CHECK((first.final_map.labels == entries[0].final_map.labels).all());
    // A config change must not hit the old entries.
    auto other = plain;
    other.lambda = 5.0;
    DiskCache changed(cache_dir, io::hash_image(inputs[0].scene.render()), other);
    CHECK(segment(inputs[0], other, &changed).cache_hits == 0);
}

TEST_CASE("render") {
    const auto input = scene_input(6, 2);
    const auto e = segment(input, small_config(2));
    const auto dir = scratch("render");
    const auto paths = render_overlay(e, small_config(2), dir);
    REQUIRE(paths.size() == 2);
    const auto overlay = io::read_png(paths[0]);
    const auto panel = io::read_png(paths[1]);
    CHECK(panel.width() == 3 * 512);

    // Label colors of the "ours" panel: exactly two, stable across calls.
    std::set<std::array<int, 3>> colors;
    for (Eigen::Index i = 0; i < 512; i += 7)
        for (Eigen::Index j = 1024; j < 1536; j += 7)
            colors.insert({int(std::lround(panel[0](i, j) * 255)), int(std::lround(panel[1](i, j) * 255)),
                           int(std::lround(panel[2](i, j) * 255))});
    CHECK(colors.size() == 2);
    CHECK(label_palette(5, 9) == label_palette(5, 9));
    CHECK(label_palette(5, 9) != label_palette(5, 10));
    CHECK(overlay.height() == 512);
}

TEST_CASE("protocols") {
    std::vector<SceneInput> inputs{scene_input(7, 3), scene_input(8, 3)};
    auto config = small_config(3);
    config.sigma = 0.0;
    std::vector<ArchiveEntry> entries;
    ProtocolInputs gt;
    for (const auto& in : inputs) {
        entries.push_back(segment(in, config));
        gt.ground_truth[in.id] = in.scene.labels;
    }
    const auto modified = evaluate_protocol(entries, config, Protocol::Modified, gt);
    CHECK(modified.miou == 1.0);
    REQUIRE(modified.reference_miou.has_value());
    CHECK(*modified.reference_miou < 1.0);

    const auto traditional = evaluate_protocol(entries, config, Protocol::Traditional, gt);
    CHECK(traditional.miou == doctest::Approx(fixtures::exhaustive_best_miou(traditional.confusion)).epsilon(1e-12));
    CHECK(traditional.miou == 1.0);

    CHECK(modified_miou(entries[0], inputs[0].scene.labels, 3) == 1.0);

    gt.class_names = {"sky", "road", "tree"};
    const std::vector<ProtocolResult> both{traditional, modified};
    const auto text = format_report(both, gt, config);
    CHECK(text.find("traditional") != std::string::npos);
    CHECK(text.find("modified") != std::string::npos);
    CHECK(text.find("road") != std::string::npos);
    CHECK(report_json(both, gt, config).find("\"modified\"") != std::string::npos);

    ProtocolInputs missing;
    try {
        evaluate_protocol(entries, config, Protocol::Modified, missing);
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("ground truth") != std::string::npos);
    }
    try {
        evaluate_protocol(entries, config, Protocol::OpenVocab, gt);
        FAIL("expected failure");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("class vectors") != std::string::npos);
    }
    CHECK(parse_protocol("openvocab") == Protocol::OpenVocab);
    CHECK_THROWS_AS(parse_protocol("fancy"), Error);
}

TEST_CASE("open-vocabulary protocol through the pipeline") {
    const auto input = scene_input(9, 3);
    auto config = small_config(3);
    const auto e = segment(input, config);
    ProtocolInputs in;
    in.ground_truth[input.id] = input.scene.labels;
    // Per-pixel embeddings: class vector plus heavy noise.
    Rng rng(1);
    in.class_vectors = RowMatrix<double>::Identity(3, 3);
    ExternalEmbeddingField field;
    field.height = 512;
    field.width = 512;
    field.values.resize(512 * 512, 3);
    for (Eigen::Index p = 0; p < field.values.rows(); ++p)
        for (int d = 0; d < 3; ++d)
            field.values(p, d) = float((input.scene.labels(p) == d ? 1.0 : 0.0) + 0.6 * rng.gaussian());
    in.pixel_embeddings[input.id] = field;
    const auto r = evaluate_protocol({e}, config, Protocol::OpenVocab, in);
    REQUIRE(r.reference_miou.has_value());
    CHECK(r.miou > *r.reference_miou);
}
