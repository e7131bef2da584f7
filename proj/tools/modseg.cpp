// modseg: segment / evaluate / render / sweep, plus make-scene for synthetic inputs.
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "modseg/error.hpp"
#include "modseg/io.hpp"
#include "modseg/pipeline.hpp"

namespace fs = std::filesystem;
using namespace modseg;

namespace {

struct ConfigFlags {
    std::string config_file;
    std::map<std::string, std::string> values;  // key -> raw flag value
    std::vector<std::string> overrides;         // --set key=value
};

// One flag per config key, named after the key with dashes.
void add_config_flags(CLI::App* cmd, ConfigFlags& flags) {
    cmd->add_option("--config", flags.config_file, "JSON config file (keys as in config.json)");
    cmd->add_option("--set", flags.overrides, "Override any config key: --set key=value");
    for (const auto& key : RunConfig::keys()) {
        std::string flag = "--" + key;
        std::replace(flag.begin(), flag.end(), '_', '-');
        cmd->add_option_function<std::string>(
            flag, [&flags, key](const std::string& v) { flags.values[key] = v; }, "config key " + key);
    }
}

RunConfig resolve_config(const ConfigFlags& flags) {
    RunConfig config = flags.config_file.empty() ? RunConfig{} : RunConfig::load(flags.config_file);
    for (const auto& [key, value] : flags.values) config.set(key, value);
    for (const auto& kv : flags.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw Error(ErrorKind::Validation, "--set expects key=value, got '" + kv + "'");
        config.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    config.validate();
    return config;
}

std::vector<ArchiveEntry> run_segment(const std::vector<std::string>& inputs, const RunConfig& config,
                                      std::vector<std::vector<StageTiming>>* timings) {
    std::vector<ArchiveEntry> entries;
    for (const auto& path : inputs) {
        SceneInput input;
        try {
            input = load_input(path, config.seed);
        } catch (const std::exception& e) {
            throw StageError("load", path + ": " + e.what());
        }
        std::vector<StageTiming> timing;
        entries.push_back(segment(input, config, nullptr, &timing));
        std::cerr << input.id << ": " << entries.back().final_map.width() << "x" << entries.back().final_map.height()
                  << ", " << config.masks << " masks, t_m " << entries.back().applied_timestep;
        if (entries.back().cache_hits) std::cerr << ", " << entries.back().cache_hits << " cached";
        std::cerr << "\n";
        if (timings) timings->push_back(std::move(timing));
    }
    return entries;
}

void write_timing(const fs::path& path, const std::vector<ArchiveEntry>& entries,
                  const std::vector<std::vector<StageTiming>>& timings) {
    nlohmann::json j;
    for (std::size_t i = 0; i < entries.size(); ++i)
        for (const auto& t : timings[i]) j[entries[i].id][t.stage] = t.seconds;
    io::write_text(path, j.dump(2) + "\n");
}

LabelGrid load_ground_truth(const fs::path& path) {
    if (path.extension() == ".json") return load_scene(path).labels;
    return io::read_label_png(path);
}

ExternalEmbeddingField load_pixel_embeddings(const fs::path& path) {
    const auto t = io::read_tensor(path);
    if (t.shape.size() != 3) throw Error(ErrorKind::Validation, path.string() + ": pixel embeddings need an (H, W, d) header");
    ExternalEmbeddingField f;
    f.height = static_cast<Eigen::Index>(t.shape[0]);
    f.width = static_cast<Eigen::Index>(t.shape[1]);
    const auto d = static_cast<Eigen::Index>(t.shape[2]);
    f.values = Eigen::Map<const RowMatrix<float>>(t.data.data(), f.height * f.width, d);
    return f;
}

RowMatrix<double> load_class_vectors(const fs::path& path) {
    const auto t = io::read_tensor(path);
    if (t.shape.size() != 2) throw Error(ErrorKind::Validation, path.string() + ": class vectors need a (C, d) header");
    return Eigen::Map<const RowMatrix<float>>(t.data.data(), Eigen::Index(t.shape[0]), Eigen::Index(t.shape[1]))
        .cast<double>();
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::vector<std::string> out;
    std::istringstream in(io::read_text(path));
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(line);
    return out;
}

std::vector<std::string> split_list(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) out.push_back(item);
    return out;
}

struct EvalFlags {
    std::vector<std::string> protocols{"traditional", "modified"};
    std::vector<std::string> ground_truth;
    int num_classes = 0;
    std::string class_names;
    std::string pixel_embeddings_dir;
    std::string class_vectors;
    std::string report;
};

void add_eval_flags(CLI::App* cmd, EvalFlags& f, bool with_protocols) {
    if (with_protocols)
        cmd->add_option("--protocol", f.protocols, "traditional, modified, openvocab (repeatable)")->capture_default_str();
    cmd->add_option("--ground-truth", f.ground_truth, "Label PNG or scene JSON per image; file stem = image id");
    cmd->add_option("--num-classes", f.num_classes, "Number of classes (default: max ground-truth label + 1)");
    cmd->add_option("--class-names", f.class_names, "Text file, one class name per line");
    cmd->add_option("--pixel-embeddings", f.pixel_embeddings_dir, "Directory of <id>.f32 (H, W, d) tensors (openvocab)");
    cmd->add_option("--class-vectors", f.class_vectors, "(C, d) float32 tensor of text embeddings (openvocab)");
    cmd->add_option("--report", f.report, "Report path prefix; writes <prefix>.txt and <prefix>.json");
}

ProtocolInputs load_protocol_inputs(const EvalFlags& f, const std::vector<ArchiveEntry>& entries) {
    ProtocolInputs in;
    in.num_classes = f.num_classes;
    for (const auto& p : f.ground_truth) in.ground_truth[fs::path(p).stem().string()] = load_ground_truth(p);
    if (!f.class_names.empty()) in.class_names = read_lines(f.class_names);
    if (!f.pixel_embeddings_dir.empty())
        for (const auto& e : entries) {
            const auto path = fs::path(f.pixel_embeddings_dir) / (e.id + ".f32");
            if (fs::exists(path)) in.pixel_embeddings[e.id] = load_pixel_embeddings(path);
        }
    if (!f.class_vectors.empty()) in.class_vectors = load_class_vectors(f.class_vectors);
    return in;
}

void emit_report(const std::vector<ProtocolResult>& results, const ProtocolInputs& inputs, const RunConfig& config,
                 const std::string& prefix) {
    const auto text = format_report(results, inputs, config);
    std::cout << text;
    if (!prefix.empty()) {
        io::write_text(prefix + ".txt", text);
        io::write_text(prefix + ".json", report_json(results, inputs, config));
    }
}

std::vector<ArchiveEntry> load_archives(const std::vector<std::string>& dirs, RunConfig& config) {
    std::vector<ArchiveEntry> all;
    for (std::size_t i = 0; i < dirs.size(); ++i) {
        auto [cfg, entries] = read_archive(dirs[i]);
        if (i == 0) config = cfg;
        else if (cfg.hash() != config.hash())
            throw Error(ErrorKind::Validation, "archives " + dirs[0] + " and " + dirs[i] + " use different configs");
        for (auto& e : entries) all.push_back(std::move(e));
    }
    return all;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Training-free semantic segmentation by modulated denoising"};
    app.require_subcommand(1);

    // segment
    auto* seg = app.add_subcommand("segment", "Segment images into an archive");
    std::vector<std::string> seg_inputs;
    std::string seg_out;
    ConfigFlags seg_flags;
    seg->add_option("inputs", seg_inputs, "Scene files (.json) or label-style PNGs")->required();
    seg->add_option("-o,--out", seg_out, "Output directory (archive/ and timing.json)")->required();
    add_config_flags(seg, seg_flags);

    // evaluate
    auto* eval = app.add_subcommand("evaluate", "Score archives under one or more protocols");
    std::vector<std::string> eval_archives;
    EvalFlags eval_flags;
    eval->add_option("archives", eval_archives, "Archive directories")->required();
    add_eval_flags(eval, eval_flags, true);

    // render
    auto* render = app.add_subcommand("render", "Write overlay and naive-vs-ours comparison images");
    std::string render_archive, render_out;
    render->add_option("archive", render_archive, "Archive directory")->required();
    render->add_option("-o,--out", render_out, "Output directory")->required();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Segment (and optionally evaluate) over values of one config key");
    std::vector<std::string> sweep_inputs;
    std::string sweep_out, sweep_key, sweep_values;
    ConfigFlags sweep_flags;
    EvalFlags sweep_eval;
    sweep->add_option("inputs", sweep_inputs, "Scene files (.json) or label-style PNGs")->required();
    sweep->add_option("-o,--out", sweep_out, "Output directory, one sub-archive per value")->required();
    sweep->add_option("--key", sweep_key, "Config key to vary, e.g. masks")->required();
    sweep->add_option("--values", sweep_values, "Comma-separated values, e.g. 10,20,30,40")->required();
    add_config_flags(sweep, sweep_flags);
    add_eval_flags(sweep, sweep_eval, false);

    // make-scene
    auto* make = app.add_subcommand("make-scene", "Generate random synthetic scene files");
    std::string make_out, make_layout = "voronoi";
    int make_count = 1, make_labels = 6, make_regions = 12, make_height = 512, make_width = 512;
    double make_noise = 0.0;
    std::uint64_t make_seed = 0;
    bool make_independent = false;
    make->add_option("-o,--out", make_out, "Output directory")->required();
    make->add_option("--count", make_count)->capture_default_str();
    make->add_option("--labels", make_labels)->capture_default_str();
    make->add_option("--regions", make_regions)->capture_default_str();
    make->add_option("--height", make_height)->capture_default_str();
    make->add_option("--width", make_width)->capture_default_str();
    make->add_option("--noise", make_noise, "Feature noise as a fraction of the min prototype gap")->capture_default_str();
    make->add_option("--layout", make_layout, "voronoi or bands")->capture_default_str();
    make->add_option("--seed", make_seed)->capture_default_str();
    make->add_flag("--independent-classes", make_independent,
                   "Draw prototypes per scene instead of sharing one class vocabulary");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*seg) {
            const RunConfig config = resolve_config(seg_flags);
            std::vector<std::vector<StageTiming>> timings;
            const auto entries = run_segment(seg_inputs, config, &timings);
            try {
                write_archive(fs::path(seg_out) / "archive", config, entries);
                write_timing(fs::path(seg_out) / "timing.json", entries, timings);
            } catch (const std::exception& e) {
                throw StageError("archive", e.what());
            }
        } else if (*eval) {
            RunConfig config;
            const auto entries = load_archives(eval_archives, config);
            const auto inputs = load_protocol_inputs(eval_flags, entries);
            std::vector<ProtocolResult> results;
            for (const auto& p : eval_flags.protocols)
                for (const auto& name : split_list(p)) results.push_back(evaluate_protocol(entries, config, parse_protocol(name), inputs));
            emit_report(results, inputs, config, eval_flags.report);
        } else if (*render) {
            auto [config, entries] = read_archive(render_archive);
            for (const auto& e : entries)
                for (const auto& path : render_overlay(e, config, render_out)) std::cout << path.string() << "\n";
        } else if (*sweep) {
            const RunConfig base = resolve_config(sweep_flags);
            nlohmann::json summary = nlohmann::json::array();
            for (const auto& value : split_list(sweep_values)) {
                RunConfig config = base;
                config.set(sweep_key, value);
                config.validate();
                std::cerr << "== " << sweep_key << " = " << value << "\n";
                std::vector<std::vector<StageTiming>> timings;
                const auto entries = run_segment(sweep_inputs, config, &timings);
                const fs::path dir = fs::path(sweep_out) / (sweep_key + "=" + value);
                write_archive(dir / "archive", config, entries);
                write_timing(dir / "timing.json", entries, timings);
                nlohmann::json row;
                row["key"] = sweep_key;
                row["value"] = value;
                row["archive"] = (dir / "archive").string();
                if (!sweep_eval.ground_truth.empty()) {
                    const auto inputs = load_protocol_inputs(sweep_eval, entries);
                    const auto r = evaluate_protocol(entries, config, Protocol::Modified, inputs);
                    row["modified_miou"] = r.miou;
                    row["naive_modified_miou"] = *r.reference_miou;
                    std::cout << sweep_key << "=" << value << "  modified mIoU " << 100.0 * r.miou << "  (naive "
                              << 100.0 * *r.reference_miou << ")\n";
                }
                summary.push_back(row);
            }
            io::write_text(fs::path(sweep_out) / "sweep.json", summary.dump(2) + "\n");
        } else if (*make) {
            RandomSceneOptions options;
            options.height = make_height;
            options.width = make_width;
            options.num_labels = make_labels;
            options.regions = make_regions;
            options.noise_fraction = make_noise;
            if (!make_independent) options.vocabulary_seed = make_seed;
            if (make_layout == "bands") options.layout = SceneLayout::Bands;
            else if (make_layout != "voronoi") throw Error(ErrorKind::Validation, "layout must be voronoi or bands");
            fs::create_directories(make_out);
            for (int i = 0; i < make_count; ++i) {
                const auto path = fs::path(make_out) / ("scene_" + std::to_string(i) + ".json");
                save_scene(make_random_scene(options, make_seed + static_cast<std::uint64_t>(i)), path);
                std::cout << path.string() << "\n";
            }
        }
    } catch (const StageError& e) {
        std::cerr << "modseg: error " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "modseg: error " << e.what() << "\n";
        return 1;
    }
    return 0;
}
