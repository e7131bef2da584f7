#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "modseg/backend.hpp"
#include "modseg/types.hpp"

namespace modseg {

/// Ground-truth scene for the synthetic backend: a hidden label field, one
/// feature prototype and one base color per label.
struct SyntheticScene {
    LabelGrid labels;
    int num_labels = 0;
    RowMatrix<float> prototypes;  // num_labels x d
    RowMatrix<float> colors;      // num_labels x 3, in [0, 1]
    int downsample_factor = 32;   // pixels per cell at the 16x16 sites
    std::uint64_t seed = 0;
    double noise_amplitude = 0.0;

    Eigen::Index height() const { return labels.rows(); }
    Eigen::Index width() const { return labels.cols(); }
    Eigen::Index feature_dim() const { return prototypes.cols(); }

    void validate() const;
    double min_prototype_gap() const;
    Image render() const;
    /// Majority label of each factor x factor block; ties go to the lowest label.
    LabelGrid block_majority(int factor) const;
};

enum class SceneLayout {
    Voronoi,  // random polygonal cells, arbitrary boundary orientations
    Bands,    // parallel bands of one random orientation
};

struct RandomSceneOptions {
    Eigen::Index height = 512;
    Eigen::Index width = 512;
    int num_labels = 6;
    int regions = 12;  // Voronoi cells or bands; labels may repeat across regions
    int feature_dim = 32;
    /// Feature noise amplitude as a fraction of the minimum prototype gap.
    double noise_fraction = 0.0;
    int downsample_factor = 32;
    SceneLayout layout = SceneLayout::Voronoi;
    /// When set, prototypes and colors come from this seed instead of the scene
    /// seed, so scenes drawn with one vocabulary share class identities.
    std::optional<std::uint64_t> vocabulary_seed;
};

/// Draws a random scene in which every label owns at least one block majority
/// at the 16x16 sites, so every label is recoverable from the feature grid.
SyntheticScene make_random_scene(const RandomSceneOptions& options, std::uint64_t seed);

/// Nearest-neighbour resampling of the label field to a new size.
SyntheticScene resize_scene(const SyntheticScene& scene, Eigen::Index height, Eigen::Index width);

/// Builds a scene from an image by treating each distinct color as one label.
/// A color's prototype depends only on (seed, color), so classes stay consistent across images.
SyntheticScene scene_from_image(const Image& image, std::uint64_t seed, int feature_dim = 32,
                                double noise_fraction = 0.0);

void save_scene(const SyntheticScene& scene, const std::filesystem::path& path);
SyntheticScene load_scene(const std::filesystem::path& path);

/// Deterministic stand-in for a latent diffusion model. Its features and its
/// response to modulation are derived from the hidden scene, which makes every
/// downstream stage checkable against ground truth.
///
/// Modulating mask M with offset c changes pixel p by g(c) * dir iff the label
/// of p is the block-majority label of some cell in M, where g is odd and
/// strictly increasing (tanh(c / 10) propagated through the DDPM posterior).
class SyntheticBackend final : public Backend {
public:
    explicit SyntheticBackend(SyntheticScene scene);

    std::string name() const override { return "synthetic"; }
    std::vector<CrossAttentionSite> sites() const override;

    LatentTrajectory invert(const Image& image, const TimestepSchedule& schedule,
                            std::uint64_t seed) const override;
    FeatureMapf extract_features(const LatentTrajectory& trajectory, const CrossAttentionSite& site,
                                 int timestep) const override;
    DenoiseResult modulated_denoise(const LatentTrajectory& trajectory,
                                    const ModulationSpec& spec) const override;

    const SyntheticScene& scene() const { return scene_; }
    /// Block-majority labels at a site's grid.
    const LabelGrid& cell_labels(const CrossAttentionSite& site) const;
    int block_size(const CrossAttentionSite& site) const;

private:
    void check_site(const CrossAttentionSite& site) const;
    void check_trajectory(const LatentTrajectory& trajectory) const;
    double site_gain(const CrossAttentionSite& site) const;

    SyntheticScene scene_;
    std::map<int, LabelGrid> cell_labels_;  // keyed by resolution
    float prototype_scale_ = 1.0f;
};

}  // namespace modseg
