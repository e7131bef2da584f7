#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modseg/backend.hpp"
#include "modseg/correspondence.hpp"
#include "modseg/embeddings.hpp"
#include "modseg/evaluation.hpp"
#include "modseg/synthetic.hpp"

namespace modseg {

/// Every tunable of a run. Defaults reproduce the reference configuration:
/// 50-step DDPM, features at t_f = 1 from up-16-1, modulation of up-16-3 at
/// t_m = 281 with lambda = 10, attention injection on, 30 masks per image.
struct RunConfig {
    std::string backend = "synthetic";
    std::uint64_t seed = 0;
    int masks = 30;
    int feature_timestep = 1;
    std::string feature_site = "up-16-1";
    int modulation_timestep = 281;
    double lambda = 10.0;
    std::string modulation_site = "up-16-3";
    std::string placement = "post_projection";
    bool inject_attention = true;
    bool single_step = false;
    double sigma = 3.0;
    int embedding_timestep = 200;
    std::string embedding_site = "up-16-1";
    int steps = 50;
    int max_timestep = 1000;
    int kmeans_restarts = 10;
    std::string caption;
    bool keep_difference_maps = false;
    int threads = 0;  // not part of the config hash

    void validate() const;
    CorrespondenceConfig correspondence() const;
    TimestepSchedule schedule() const { return TimestepSchedule::ddpm(steps, max_timestep); }

    /// Canonical JSON text of all result-affecting keys.
    std::string canonical() const;
    std::uint64_t hash() const;

    std::string to_json_text() const;
    static RunConfig from_json_text(const std::string& text);
    static RunConfig load(const std::filesystem::path& path);
    /// Sets one key from its string form (CLI and sweep use the same keys as the JSON file).
    void set(const std::string& key, const std::string& value);
    static std::vector<std::string> keys();
};

/// Target size for an H0 x W0 image: scale to about 512^2 pixels at the same
/// aspect ratio, then round each side up to a multiple of 64.
std::pair<Eigen::Index, Eigen::Index> resize_rule(Eigen::Index height, Eigen::Index width);

/// Factory for backends by name; the synthetic backend needs a scene.
std::unique_ptr<Backend> make_backend(const std::string& name, const SyntheticScene& scene);
std::vector<std::string> backend_names();

/// Input of one segmentation: the scene drives the synthetic backend, and its
/// label field is the ground truth.
struct SceneInput {
    std::string id;
    SyntheticScene scene;
};

/// Loads a scene file (.json) or derives a scene from a label-style PNG.
SceneInput load_input(const std::filesystem::path& path, std::uint64_t seed);

/// One image's results.
struct ArchiveEntry {
    std::string id;
    Eigen::Index original_height = 0, original_width = 0;
    Eigen::Index height = 0, width = 0;  // working size after the resize rule
    std::uint64_t image_hash = 0;
    int requested_timestep = 0;
    int applied_timestep = 0;
    int cache_hits = 0;
    Image image;                    // working-size input
    LowResSegmentation lowres;
    SegmentationMap final_map;      // original size, labels index low-res masks
    SegmentationMap naive_map;      // original size
    std::vector<MaskEmbedding> embeddings;  // one per low-res mask
    std::vector<DifferenceMapf> difference_maps;  // only when keep_difference_maps

    PixelEmbeddingField pixel_field() const;
    PixelEmbeddingField naive_pixel_field() const;
};

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

/// resize -> invert -> features(t_f) -> k-means -> correspondences -> argmax ->
/// embeddings(t = 200) -> resize back. Errors are rethrown as StageError.
ArchiveEntry segment(const SceneInput& input, const RunConfig& config, CorrespondenceCache* cache = nullptr,
                     std::vector<StageTiming>* timing = nullptr);

/// Difference-map cache on disk, one float32 tensor per (image, config, mask).
class DiskCache final : public CorrespondenceCache {
public:
    DiskCache(std::filesystem::path dir, std::uint64_t image_hash, const RunConfig& config);
    std::optional<DifferenceMapf> load(int mask_index, const BinaryMask& mask) override;
    void store(int mask_index, const BinaryMask& mask, const DifferenceMapf& map) override;

private:
    std::filesystem::path path_for(int mask_index, const BinaryMask& mask) const;
    std::filesystem::path dir_;
    std::string prefix_;
};

/// Cache directory from MODSEG_CACHE_DIR, if set.
std::optional<std::filesystem::path> cache_dir_from_env();

/// Archive layout under `dir`: config.json, and per image images/<id>/ with
/// meta.json, labels.png, naive.png, image.png, lowres_masks.bin,
/// mask_embeddings.f32 and optionally diffmaps/.
void write_archive(const std::filesystem::path& dir, const RunConfig& config, const std::vector<ArchiveEntry>& entries);
std::pair<RunConfig, std::vector<ArchiveEntry>> read_archive(const std::filesystem::path& dir);

/// Deterministic label palette seeded from the run seed.
std::vector<std::array<std::uint8_t, 3>> label_palette(int count, std::uint64_t seed);

/// Writes <id>_overlay.png and <id>_comparison.png (input | naive | ours) into `out_dir`.
std::vector<std::filesystem::path> render_overlay(const ArchiveEntry& entry, const RunConfig& config,
                                                  const std::filesystem::path& out_dir);

enum class Protocol { Traditional, Modified, OpenVocab };
Protocol parse_protocol(const std::string& text);
std::string to_string(Protocol protocol);

struct ProtocolInputs {
    std::map<std::string, LabelGrid> ground_truth;  // by image id
    int num_classes = 0;                            // 0 = infer from ground truth
    std::vector<std::string> class_names;
    // Open-vocabulary inputs.
    std::map<std::string, ExternalEmbeddingField> pixel_embeddings;  // by image id
    RowMatrix<double> class_vectors;
};

struct ProtocolResult {
    Protocol protocol = Protocol::Modified;
    double miou = 0.0;
    std::vector<double> class_iou;
    ConfusionMatrix confusion;
    Assignment assignment;
    /// Same protocol applied to a reference prediction (naive upsampling, or
    /// per-pixel classification for open-vocabulary).
    std::optional<double> reference_miou;
    std::string reference_name;
};

ProtocolResult evaluate_protocol(const std::vector<ArchiveEntry>& entries, const RunConfig& config, Protocol protocol,
                                 const ProtocolInputs& inputs);

/// Human-readable table and machine-readable JSON for a set of results.
std::string format_report(const std::vector<ProtocolResult>& results, const ProtocolInputs& inputs,
                          const RunConfig& config);
std::string report_json(const std::vector<ProtocolResult>& results, const ProtocolInputs& inputs,
                        const RunConfig& config);

/// Per-image modified-protocol mIoU (class means from that image alone).
double modified_miou(const ArchiveEntry& entry, const LabelGrid& ground_truth, int num_classes, bool naive = false);

}  // namespace modseg
