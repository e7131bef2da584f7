#include "modseg/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>

#include "json.hpp"

#include "modseg/error.hpp"
#include "modseg/io.hpp"
#include "modseg/lowres.hpp"
#include "modseg/random.hpp"

namespace modseg {

using nlohmann::json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// RunConfig

namespace {

json config_to_json(const RunConfig& c, bool include_runtime) {
    json j;
    j["backend"] = c.backend;
    j["seed"] = c.seed;
    j["masks"] = c.masks;
    j["feature_timestep"] = c.feature_timestep;
    j["feature_site"] = c.feature_site;
    j["modulation_timestep"] = c.modulation_timestep;
    j["lambda"] = c.lambda;
    j["modulation_site"] = c.modulation_site;
    j["placement"] = c.placement;
    j["inject_attention"] = c.inject_attention;
    j["single_step"] = c.single_step;
    j["sigma"] = c.sigma;
    j["embedding_timestep"] = c.embedding_timestep;
    j["embedding_site"] = c.embedding_site;
    j["steps"] = c.steps;
    j["max_timestep"] = c.max_timestep;
    j["kmeans_restarts"] = c.kmeans_restarts;
    j["caption"] = c.caption;
    j["keep_difference_maps"] = c.keep_difference_maps;
    if (include_runtime) j["threads"] = c.threads;
    return j;
}

bool parse_bool(const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw Error(ErrorKind::Validation, "expected a boolean, got '" + v + "'");
}

}  // namespace

std::vector<std::string> RunConfig::keys() {
    std::vector<std::string> out;
    const json all = config_to_json(RunConfig{}, true);
    for (const auto& item : all.items()) out.push_back(item.key());
    return out;
}

void RunConfig::validate() const {
    const auto names = backend_names();
    if (std::find(names.begin(), names.end(), backend) == names.end())
        throw Error(ErrorKind::Validation, "unknown backend '" + backend + "'");
    if (masks < 1) throw Error(ErrorKind::InvalidK, "masks must be at least 1");
    schedule().validate();
    for (int t : {feature_timestep, modulation_timestep, embedding_timestep})
        if (t < 1 || t > max_timestep)
            throw Error(ErrorKind::Validation, "timestep " + std::to_string(t) + " outside [1, " + std::to_string(max_timestep) + "]");
    if (!std::isfinite(lambda) || lambda < 0.0) throw Error(ErrorKind::Validation, "lambda must be finite and nonnegative");
    if (!std::isfinite(sigma) || sigma < 0.0) throw Error(ErrorKind::Validation, "sigma must be nonnegative (0 disables smoothing)");
    if (kmeans_restarts < 1) throw Error(ErrorKind::Validation, "kmeans_restarts must be at least 1");
    if (threads < 0) throw Error(ErrorKind::Validation, "threads must be nonnegative");
    parse_placement(placement);
    const auto fs = parse_site(feature_site), ms = parse_site(modulation_site), es = parse_site(embedding_site);
    if (fs.resolution != ms.resolution || fs.resolution != es.resolution)
        throw Error(ErrorKind::Validation, "feature, modulation and embedding sites must share one resolution");
}

CorrespondenceConfig RunConfig::correspondence() const {
    CorrespondenceConfig c;
    c.site = parse_site(modulation_site);
    c.timestep = modulation_timestep;
    c.lambda = lambda;
    c.placement = parse_placement(placement);
    c.inject_attention = inject_attention;
    c.single_step = single_step;
    c.sigma = sigma;
    c.threads = threads;
    return c;
}

std::string RunConfig::canonical() const { return config_to_json(*this, false).dump(); }

std::uint64_t RunConfig::hash() const { return io::fnv1a(canonical()); }

std::string RunConfig::to_json_text() const { return config_to_json(*this, true).dump(2) + "\n"; }

RunConfig RunConfig::from_json_text(const std::string& text) {
    RunConfig c;
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Validation, std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw Error(ErrorKind::Validation, "config must be a JSON object");
    for (const auto& [key, value] : j.items()) c.set(key, value.is_string() ? value.get<std::string>() : value.dump());
    c.validate();
    return c;
}

RunConfig RunConfig::load(const fs::path& path) { return from_json_text(io::read_text(path)); }

void RunConfig::set(const std::string& key, const std::string& value) {
    try {
        if (key == "backend") backend = value;
        else if (key == "seed") seed = std::stoull(value);
        else if (key == "masks") masks = std::stoi(value);
        else if (key == "feature_timestep") feature_timestep = std::stoi(value);
        else if (key == "feature_site") feature_site = value;
        else if (key == "modulation_timestep") modulation_timestep = std::stoi(value);
        else if (key == "lambda") lambda = std::stod(value);
        else if (key == "modulation_site") modulation_site = value;
        else if (key == "placement") placement = value;
        else if (key == "inject_attention") inject_attention = parse_bool(value);
        else if (key == "single_step") single_step = parse_bool(value);
        else if (key == "sigma") sigma = std::stod(value);
        else if (key == "embedding_timestep") embedding_timestep = std::stoi(value);
        else if (key == "embedding_site") embedding_site = value;
        else if (key == "steps") steps = std::stoi(value);
        else if (key == "max_timestep") max_timestep = std::stoi(value);
        else if (key == "kmeans_restarts") kmeans_restarts = std::stoi(value);
        else if (key == "caption") caption = value;
        else if (key == "keep_difference_maps") keep_difference_maps = parse_bool(value);
        else if (key == "threads") threads = std::stoi(value);
        else throw Error(ErrorKind::Validation, "unknown config key '" + key + "'");
    } catch (const std::invalid_argument&) {
        throw Error(ErrorKind::Validation, "bad value '" + value + "' for config key '" + key + "'");
    } catch (const std::out_of_range&) {
        throw Error(ErrorKind::Validation, "value '" + value + "' out of range for config key '" + key + "'");
    }
}

// ---------------------------------------------------------------------------
// Sizing and backends

std::pair<Eigen::Index, Eigen::Index> resize_rule(Eigen::Index height, Eigen::Index width) {
    if (height < 1 || width < 1) throw Error(ErrorKind::Sizing, "image dimensions must be positive");
    const double scale = std::sqrt(512.0 * 512.0 / (double(height) * double(width)));
    auto round_up = [&](Eigen::Index side) {
        // Tolerance keeps exact multiples (512 * 1.0) from being bumped by rounding noise.
        const auto blocks = static_cast<Eigen::Index>(std::ceil(double(side) * scale / 64.0 - 1e-9));
        return 64 * std::max<Eigen::Index>(1, blocks);
    };
    return {round_up(height), round_up(width)};
}

std::vector<std::string> backend_names() { return {"synthetic"}; }

std::unique_ptr<Backend> make_backend(const std::string& name, const SyntheticScene& scene) {
    if (name == "synthetic") return std::make_unique<SyntheticBackend>(scene);
    throw Error(ErrorKind::Validation, "unknown backend '" + name + "' (available: synthetic)");
}

SceneInput load_input(const fs::path& path, std::uint64_t seed) {
    SceneInput in;
    in.id = path.stem().string();
    const auto ext = path.extension().string();
    if (ext == ".json")
        in.scene = load_scene(path);
    else if (ext == ".png")
        in.scene = scene_from_image(io::read_png(path), seed);
    else
        throw Error(ErrorKind::Io, "unsupported input '" + path.string() + "' (expected .json scene or .png)");
    return in;
}

// ---------------------------------------------------------------------------
// Segmentation

PixelEmbeddingField ArchiveEntry::pixel_field() const {
    PixelEmbeddingField f;
    f.segmentation = final_map;
    for (int label = 0; label < final_map.num_labels; ++label) f.embeddings.push_back(embeddings.at(final_map.provenance[label]));
    return f;
}

PixelEmbeddingField ArchiveEntry::naive_pixel_field() const {
    PixelEmbeddingField f;
    f.segmentation = naive_map;
    for (int label = 0; label < naive_map.num_labels; ++label) f.embeddings.push_back(embeddings.at(naive_map.provenance[label]));
    return f;
}

namespace {

template <typename F>
auto run_stage(const std::string& name, std::vector<StageTiming>* timing, F&& body) {
    const auto start = std::chrono::steady_clock::now();
    try {
        if constexpr (std::is_void_v<decltype(body())>) {
            body();
            if (timing)
                timing->push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
        } else {
            auto result = body();
            if (timing)
                timing->push_back({name, std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()});
            return result;
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
}

SegmentationMap resize_map(const SegmentationMap& map, Eigen::Index height, Eigen::Index width) {
    SegmentationMap out = map;
    if (map.height() != height || map.width() != width) out.labels = resize_nearest(map.labels, height, width);
    return out;
}

}  // namespace

ArchiveEntry segment(const SceneInput& input, const RunConfig& config, CorrespondenceCache* cache,
                     std::vector<StageTiming>* timing) {
    run_stage("config", timing, [&] { config.validate(); });

    ArchiveEntry entry;
    entry.id = input.id;
    entry.original_height = input.scene.height();
    entry.original_width = input.scene.width();

    const SyntheticScene scene = run_stage("resize", timing, [&] {
        const auto [h, w] = resize_rule(entry.original_height, entry.original_width);
        entry.height = h;
        entry.width = w;
        return (h == entry.original_height && w == entry.original_width) ? input.scene : resize_scene(input.scene, h, w);
    });

    const auto backend = run_stage("backend", timing, [&] {
        auto b = make_backend(config.backend, scene);
        b->set_caption(config.caption);
        return b;
    });
    entry.image = scene.render();
    entry.image_hash = io::hash_image(entry.image);

    const auto trajectory =
        run_stage("invert", timing, [&] { return backend->invert(entry.image, config.schedule(), config.seed); });

    const auto features = run_stage("extract_features", timing, [&] {
        return backend->extract_features(trajectory, parse_site(config.feature_site), config.feature_timestep);
    });

    entry.lowres = run_stage("kmeans", timing, [&] {
        KMeansOptions options;
        options.restarts = config.kmeans_restarts;
        return kmeans_cluster(features, config.masks, config.seed, options);
    });

    std::unique_ptr<DiskCache> disk_cache;
    if (!cache) {
        if (auto dir = cache_dir_from_env()) {
            disk_cache = std::make_unique<DiskCache>(*dir, entry.image_hash, config);
            cache = disk_cache.get();
        }
    }
    auto correspondences = run_stage("correspondence", timing, [&] {
        return extract_correspondences(*backend, trajectory, entry.lowres, config.correspondence(), cache);
    });
    entry.requested_timestep = config.modulation_timestep;
    entry.applied_timestep = correspondences.applied_timestep;
    entry.cache_hits = correspondences.cache_hits;

    const auto working = run_stage("assign_labels", timing, [&] { return assign_labels(correspondences.maps); });
    if (config.keep_difference_maps) entry.difference_maps = std::move(correspondences.maps);

    run_stage("embeddings", timing, [&] {
        const auto emb_features =
            backend->extract_features(trajectory, parse_site(config.embedding_site), config.embedding_timestep);
        for (int k = 0; k < entry.lowres.size(); ++k)
            entry.embeddings.push_back(mask_embedding(emb_features, entry.lowres.masks[k], k));
    });

    run_stage("resize_back", timing, [&] {
        entry.final_map = resize_map(working, entry.original_height, entry.original_width);
        entry.naive_map = resize_map(naive_upsample(entry.lowres, entry.height, entry.width), entry.original_height,
                                     entry.original_width);
    });
    return entry;
}

// ---------------------------------------------------------------------------
// Cache

std::optional<fs::path> cache_dir_from_env() {
    const char* dir = std::getenv("MODSEG_CACHE_DIR");
    if (!dir || !*dir) return std::nullopt;
    return fs::path(dir);
}

DiskCache::DiskCache(fs::path dir, std::uint64_t image_hash, const RunConfig& config) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    json key;
    key["backend"] = config.backend;
    key["seed"] = config.seed;
    key["site"] = config.modulation_site;
    key["t_m"] = config.modulation_timestep;
    key["lambda"] = config.lambda;
    key["placement"] = config.placement;
    key["inject_attention"] = config.inject_attention;
    key["single_step"] = config.single_step;
    key["sigma"] = config.sigma;
    key["steps"] = config.steps;
    key["max_timestep"] = config.max_timestep;
    key["caption"] = config.caption;
    prefix_ = io::hex64(image_hash) + "-" + io::hex64(io::fnv1a(key.dump()));
}

fs::path DiskCache::path_for(int mask_index, const BinaryMask& mask) const {
    return dir_ / (prefix_ + "-" + std::to_string(mask_index) + "-" + io::hex64(io::hash_mask(mask)) + ".f32");
}

std::optional<DifferenceMapf> DiskCache::load(int mask_index, const BinaryMask& mask) {
    const auto path = path_for(mask_index, mask);
    if (!fs::exists(path)) return std::nullopt;
    try {
        const auto t = io::read_tensor(path);
        if (t.shape.size() != 2) return std::nullopt;
        DifferenceMapf map{Eigen::Map<const Grid<float>>(t.data.data(), Eigen::Index(t.shape[0]), Eigen::Index(t.shape[1]))};
        return map;
    } catch (const Error&) {
        return std::nullopt;
    }
}

void DiskCache::store(int mask_index, const BinaryMask& mask, const DifferenceMapf& map) {
    const auto path = path_for(mask_index, mask);
    auto tmp = path;
    tmp += ".tmp";
    io::write_tensor(tmp, {{std::uint64_t(map.height()), std::uint64_t(map.width())},
                           std::vector<float>(map.values.data(), map.values.data() + map.values.size())});
    fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Archive

std::vector<std::array<std::uint8_t, 3>> label_palette(int count, std::uint64_t seed) {
    Rng rng(hash_keys({seed, 0x9A1E77Eull}));
    std::vector<std::array<std::uint8_t, 3>> out;
    for (int k = 0; k < count; ++k) {
        // Random hue at fixed saturation and value keeps neighbouring labels apart.
        const double hue = rng.uniform() * 6.0, sat = 0.55 + 0.35 * rng.uniform(), val = 0.75 + 0.25 * rng.uniform();
        const double c = val * sat, x = c * (1.0 - std::abs(std::fmod(hue, 2.0) - 1.0)), m = val - c;
        std::array<double, 3> rgb{};
        switch (static_cast<int>(hue)) {
            case 0: rgb = {c, x, 0}; break;
            case 1: rgb = {x, c, 0}; break;
            case 2: rgb = {0, c, x}; break;
            case 3: rgb = {0, x, c}; break;
            case 4: rgb = {x, 0, c}; break;
            default: rgb = {c, 0, x}; break;
        }
        out.push_back({static_cast<std::uint8_t>(std::lround((rgb[0] + m) * 255)),
                       static_cast<std::uint8_t>(std::lround((rgb[1] + m) * 255)),
                       static_cast<std::uint8_t>(std::lround((rgb[2] + m) * 255))});
    }
    return out;
}

void write_archive(const fs::path& dir, const RunConfig& config, const std::vector<ArchiveEntry>& entries) {
    fs::create_directories(dir / "images");
    json cfg = config_to_json(config, false);
    cfg["config_hash"] = io::hex64(config.hash());
    io::write_text(dir / "config.json", cfg.dump(2) + "\n");

    std::set<std::string> ids;
    for (const auto& e : entries) {
        if (!ids.insert(e.id).second) throw Error(ErrorKind::Validation, "duplicate image id '" + e.id + "'");
        const fs::path d = dir / "images" / e.id;
        fs::create_directories(d);
        const int k = e.lowres.size();
        if (k > 256) throw Error(ErrorKind::Validation, "indexed label PNGs hold at most 256 masks");
        const auto palette = label_palette(k, config.seed);

        json meta;
        meta["id"] = e.id;
        meta["original_size"] = {e.original_height, e.original_width};
        meta["working_size"] = {e.height, e.width};
        meta["grid_size"] = {e.lowres.masks.front().rows(), e.lowres.masks.front().cols()};
        meta["image_hash"] = io::hex64(e.image_hash);
        meta["config_hash"] = io::hex64(config.hash());
        meta["masks"] = k;
        meta["kmeans_inertia"] = e.lowres.inertia;
        meta["modulation_timestep"] = {{"requested", e.requested_timestep}, {"applied", e.applied_timestep}};
        meta["provenance"] = e.final_map.provenance;
        meta["embedding_dim"] = e.embeddings.empty() ? 0 : e.embeddings.front().vector.size();
        io::write_text(d / "meta.json", meta.dump(2) + "\n");

        io::write_indexed_png(d / "labels.png", e.final_map.labels, palette);
        io::write_indexed_png(d / "naive.png", e.naive_map.labels, palette);
        io::write_png(d / "image.png", e.image);

        std::vector<std::uint8_t> bits;
        for (const auto& m : e.lowres.masks) {
            const auto packed = io::pack_bits(m);
            bits.insert(bits.end(), packed.begin(), packed.end());
        }
        io::write_bytes(d / "lowres_masks.bin", bits);

        io::Tensor emb;
        const auto dim = e.embeddings.empty() ? 0 : e.embeddings.front().vector.size();
        emb.shape = {std::uint64_t(k), std::uint64_t(dim)};
        for (const auto& m : e.embeddings)
            for (Eigen::Index i = 0; i < dim; ++i) emb.data.push_back(static_cast<float>(m.vector(i)));
        io::write_tensor(d / "mask_embeddings.f32", emb);

        if (!e.difference_maps.empty()) {
            fs::create_directories(d / "diffmaps");
            for (std::size_t i = 0; i < e.difference_maps.size(); ++i) {
                const auto& v = e.difference_maps[i].values;
                std::ostringstream name;
                name << "mask_" << std::setw(3) << std::setfill('0') << i << ".f32";
                io::write_tensor(d / "diffmaps" / name.str(),
                                 {{std::uint64_t(v.rows()), std::uint64_t(v.cols())},
                                  std::vector<float>(v.data(), v.data() + v.size())});
            }
        }
    }
}

std::pair<RunConfig, std::vector<ArchiveEntry>> read_archive(const fs::path& dir) {
    json cfg = json::parse(io::read_text(dir / "config.json"));
    cfg.erase("config_hash");
    const RunConfig config = RunConfig::from_json_text(cfg.dump());

    std::vector<fs::path> image_dirs;
    for (const auto& item : fs::directory_iterator(dir / "images"))
        if (item.is_directory()) image_dirs.push_back(item.path());
    std::sort(image_dirs.begin(), image_dirs.end());

    std::vector<ArchiveEntry> entries;
    for (const auto& d : image_dirs) {
        const json meta = json::parse(io::read_text(d / "meta.json"));
        ArchiveEntry e;
        e.id = meta.at("id").get<std::string>();
        e.original_height = meta.at("original_size")[0];
        e.original_width = meta.at("original_size")[1];
        e.height = meta.at("working_size")[0];
        e.width = meta.at("working_size")[1];
        const Eigen::Index gh = meta.at("grid_size")[0], gw = meta.at("grid_size")[1];
        const int k = meta.at("masks");
        e.requested_timestep = meta.at("modulation_timestep").at("requested");
        e.applied_timestep = meta.at("modulation_timestep").at("applied");
        e.image_hash = std::stoull(meta.at("image_hash").get<std::string>(), nullptr, 16);

        e.final_map.labels = io::read_label_png(d / "labels.png");
        e.final_map.num_labels = k;
        e.final_map.provenance = meta.at("provenance").get<std::vector<int>>();
        e.naive_map.labels = io::read_label_png(d / "naive.png");
        e.naive_map.num_labels = k;
        for (int i = 0; i < k; ++i) e.naive_map.provenance.push_back(i);
        e.image = io::read_png(d / "image.png");

        const auto bits = io::read_bytes(d / "lowres_masks.bin");
        const std::size_t stride = static_cast<std::size_t>((gh * gw + 7) / 8);
        if (bits.size() != stride * static_cast<std::size_t>(k))
            throw Error(ErrorKind::Io, "lowres_masks.bin has the wrong size in " + d.string());
        for (int i = 0; i < k; ++i)
            e.lowres.masks.push_back(io::unpack_bits({bits.data() + i * stride, stride}, gh, gw));
        e.lowres.inertia = meta.value("kmeans_inertia", 0.0);

        const auto emb = io::read_tensor(d / "mask_embeddings.f32");
        if (emb.shape.size() != 2 || emb.shape[0] != std::uint64_t(k))
            throw Error(ErrorKind::Io, "mask_embeddings.f32 has the wrong shape in " + d.string());
        const auto dim = static_cast<Eigen::Index>(emb.shape[1]);
        for (int i = 0; i < k; ++i)
            e.embeddings.push_back({Eigen::Map<const Eigen::VectorXf>(emb.data.data() + i * dim, dim).cast<double>(), i});
        entries.push_back(std::move(e));
    }
    return {config, entries};
}

// ---------------------------------------------------------------------------
// Rendering

std::vector<fs::path> render_overlay(const ArchiveEntry& entry, const RunConfig& config, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    const auto palette = label_palette(std::max(1, entry.final_map.num_labels), config.seed);
    const Eigen::Index h = entry.original_height, w = entry.original_width;

    auto sample = [&](int c, Eigen::Index i, Eigen::Index j) {
        const Eigen::Index si = std::min(entry.image.height() - 1, (2 * i + 1) * entry.image.height() / (2 * h));
        const Eigen::Index sj = std::min(entry.image.width() - 1, (2 * j + 1) * entry.image.width() / (2 * w));
        return entry.image[c](si, sj);
    };
    auto color = [&](const LabelGrid& labels, int c, Eigen::Index i, Eigen::Index j) {
        return float(palette[labels(i, j)][c]) / 255.0f;
    };

    Image overlay(h, w), panel(h, 3 * w);
    for (int c = 0; c < 3; ++c)
        for (Eigen::Index i = 0; i < h; ++i)
            for (Eigen::Index j = 0; j < w; ++j) {
                const float px = sample(c, i, j);
                overlay[c](i, j) = 0.5f * px + 0.5f * color(entry.final_map.labels, c, i, j);
                panel[c](i, j) = px;
                panel[c](i, w + j) = color(entry.naive_map.labels, c, i, j);
                panel[c](i, 2 * w + j) = color(entry.final_map.labels, c, i, j);
            }
    const auto overlay_path = out_dir / (entry.id + "_overlay.png");
    const auto panel_path = out_dir / (entry.id + "_comparison.png");
    io::write_png(overlay_path, overlay);
    io::write_png(panel_path, panel);
    return {overlay_path, panel_path};
}

// ---------------------------------------------------------------------------
// Evaluation

Protocol parse_protocol(const std::string& text) {
    if (text == "traditional") return Protocol::Traditional;
    if (text == "modified") return Protocol::Modified;
    if (text == "openvocab") return Protocol::OpenVocab;
    throw Error(ErrorKind::Validation, "unknown protocol '" + text + "' (traditional, modified, openvocab)");
}

std::string to_string(Protocol protocol) {
    switch (protocol) {
        case Protocol::Traditional: return "traditional";
        case Protocol::Modified: return "modified";
        case Protocol::OpenVocab: return "openvocab";
    }
    return "unknown";
}

namespace {

int infer_classes(const ProtocolInputs& inputs) {
    if (inputs.num_classes > 0) return inputs.num_classes;
    int top = -1;
    for (const auto& [id, gt] : inputs.ground_truth)
        for (Eigen::Index p = 0; p < gt.size(); ++p)
            if (gt(p) != kIgnoreLabel) top = std::max(top, gt(p));
    if (top < 0) throw Error(ErrorKind::Validation, "ground truth has no labeled pixels");
    return top + 1;
}

const LabelGrid& ground_truth_for(const ArchiveEntry& e, const ProtocolInputs& inputs, Protocol protocol) {
    const auto it = inputs.ground_truth.find(e.id);
    if (it == inputs.ground_truth.end())
        throw Error(ErrorKind::Validation, to_string(protocol) + " protocol needs ground truth for image '" + e.id + "'");
    if (it->second.rows() != e.original_height || it->second.cols() != e.original_width)
        throw Error(ErrorKind::Validation, "ground truth for '" + e.id + "' does not match the original image size");
    return it->second;
}

ProtocolResult finish(Protocol protocol, ConfusionMatrix conf, Assignment assignment) {
    ProtocolResult r;
    r.protocol = protocol;
    r.class_iou = per_class_iou(conf, assignment);
    r.miou = miou(conf, assignment);
    r.confusion = std::move(conf);
    r.assignment = std::move(assignment);
    return r;
}

// Embedding-based protocols over a dataset of pixel fields.
std::pair<ConfusionMatrix, Assignment> embedding_protocol(const std::vector<PixelEmbeddingField>& fields,
                                                          const std::vector<LabelGrid>& gts, int classes,
                                                          Protocol protocol, std::uint64_t seed) {
    const ConceptEmbeddings concepts = protocol == Protocol::Traditional
                                           ? concept_embeddings_unsupervised(fields, classes, seed)
                                           : concept_embeddings_modified(fields, gts, classes);
    ConfusionMatrix conf(classes, classes);
    for (std::size_t n = 0; n < fields.size(); ++n)
        conf += confusion(classify_pixels(fields[n], concepts).labels, classes, gts[n], classes);
    Assignment a = protocol == Protocol::Traditional ? hungarian_match(conf) : identity_assignment(classes, classes);
    return {conf, a};
}

}  // namespace

ProtocolResult evaluate_protocol(const std::vector<ArchiveEntry>& entries, const RunConfig& config, Protocol protocol,
                                 const ProtocolInputs& inputs) {
    if (entries.empty()) throw Error(ErrorKind::Validation, "no archive entries to evaluate");
    const int classes = infer_classes(inputs);

    if (protocol == Protocol::OpenVocab) {
        if (inputs.class_vectors.rows() == 0)
            throw Error(ErrorKind::Validation, "openvocab protocol needs class vectors (--class-vectors)");
        if (inputs.class_vectors.rows() != classes)
            throw Error(ErrorKind::Validation, "class vector count differs from the number of classes");
        ConfusionMatrix conf(classes, classes), ref(classes, classes);
        for (const auto& e : entries) {
            const auto& gt = ground_truth_for(e, inputs, protocol);
            const auto it = inputs.pixel_embeddings.find(e.id);
            if (it == inputs.pixel_embeddings.end())
                throw Error(ErrorKind::Validation, "openvocab protocol needs pixel embeddings for image '" + e.id + "'");
            conf += confusion(classify_masks_openvocab(e.final_map, it->second, inputs.class_vectors).labels, classes,
                              gt, classes);
            ref += confusion(classify_pixels_openvocab(it->second, inputs.class_vectors).labels, classes, gt, classes);
        }
        auto r = finish(protocol, conf, identity_assignment(classes, classes));
        r.reference_miou = miou(ref, identity_assignment(classes, classes));
        r.reference_name = "per-pixel";
        return r;
    }

    std::vector<PixelEmbeddingField> fields, naive;
    std::vector<LabelGrid> gts;
    for (const auto& e : entries) {
        gts.push_back(ground_truth_for(e, inputs, protocol));
        fields.push_back(e.pixel_field());
        naive.push_back(e.naive_pixel_field());
    }
    auto [conf, assignment] = embedding_protocol(fields, gts, classes, protocol, config.seed);
    auto r = finish(protocol, conf, assignment);
    auto [nconf, nassign] = embedding_protocol(naive, gts, classes, protocol, config.seed);
    r.reference_miou = miou(nconf, nassign);
    r.reference_name = "naive-upsample";
    return r;
}

double modified_miou(const ArchiveEntry& entry, const LabelGrid& ground_truth, int num_classes, bool naive) {
    const std::vector<PixelEmbeddingField> fields{naive ? entry.naive_pixel_field() : entry.pixel_field()};
    const std::vector<LabelGrid> gts{ground_truth};
    auto [conf, assignment] = embedding_protocol(fields, gts, num_classes, Protocol::Modified, 0);
    return miou(conf, assignment);
}

std::string report_json(const std::vector<ProtocolResult>& results, const ProtocolInputs& inputs,
                        const RunConfig& config) {
    json j;
    j["config"] = config_to_json(config, false);
    j["config_hash"] = io::hex64(config.hash());
    for (const auto& r : results) {
        json p;
        p["miou"] = r.miou;
        json ious = json::array();
        for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
            json row;
            row["class"] = c < inputs.class_names.size() ? inputs.class_names[c] : std::to_string(c);
            row["iou"] = std::isnan(r.class_iou[c]) ? json(nullptr) : json(r.class_iou[c]);
            ious.push_back(row);
        }
        p["class_iou"] = ious;
        p["assignment"] = r.assignment;
        if (r.reference_miou) p["reference"] = {{"name", r.reference_name}, {"miou", *r.reference_miou}};
        j["protocols"][to_string(r.protocol)] = p;
    }
    return j.dump(2) + "\n";
}

std::string format_report(const std::vector<ProtocolResult>& results, const ProtocolInputs& inputs,
                          const RunConfig& config) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2);
    os << "config " << io::hex64(config.hash()) << "  " << config.canonical() << "\n\n";
    if (!results.empty()) {
        os << std::left << std::setw(16) << "protocol" << std::right << std::setw(10) << "mIoU" << std::setw(12)
           << "reference" << "\n";
        for (const auto& r : results) {
            os << std::left << std::setw(16) << to_string(r.protocol) << std::right << std::setw(10) << 100.0 * r.miou;
            if (r.reference_miou) os << std::setw(12) << 100.0 * *r.reference_miou << "  (" << r.reference_name << ")";
            os << "\n";
        }
    }
    for (const auto& r : results) {
        os << "\n[" << to_string(r.protocol) << "] per-class IoU\n";
        for (std::size_t c = 0; c < r.class_iou.size(); ++c) {
            const std::string name = c < inputs.class_names.size() ? inputs.class_names[c] : "class " + std::to_string(c);
            os << "  " << std::left << std::setw(24) << name << std::right;
            if (std::isnan(r.class_iou[c]))
                os << std::setw(8) << "-" << "\n";
            else
                os << std::setw(8) << 100.0 * r.class_iou[c] << "\n";
        }
    }
    return os.str();
}

}  // namespace modseg
