#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "modseg/types.hpp"

namespace modseg {

/// Discrete DDPM schedule expressed as the subset of timesteps in [1, T]
/// visited by the sampler, in increasing order.
struct TimestepSchedule {
    int total_steps = 50;
    int max_timestep = 1000;
    std::vector<int> step_timesteps;

    /// Evenly strided schedule 1, 1 + T/n, ..., matching the 50-of-1000 DDPM sampler.
    static TimestepSchedule ddpm(int steps = 50, int max_timestep = 1000);

    void validate() const;
    /// Index of the scheduled timestep closest to t (ties go to the smaller timestep).
    int nearest_index(int timestep) const;
    bool contains(int timestep) const;
};

/// Cumulative signal level alpha-bar(t) for t in [0, T]; alpha-bar(0) = 1.
/// Scaled-linear beta schedule (0.00085 .. 0.012) as used by latent diffusion.
double alpha_bar(int timestep, int max_timestep = 1000);

enum class AttentionPath { Upward, Downward };

struct CrossAttentionSite {
    AttentionPath path = AttentionPath::Upward;
    int resolution = 16;
    int layer_index = 1;

    bool operator==(const CrossAttentionSite&) const = default;
};

std::string to_string(const CrossAttentionSite& site);
/// Parses "up-16-3" / "down-32-1".
CrossAttentionSite parse_site(const std::string& text);

enum class OffsetPlacement { PostProjection, PreProjection };

std::string to_string(OffsetPlacement placement);
OffsetPlacement parse_placement(const std::string& text);

/// Where, when and how a cross-attention output is perturbed.
struct ModulationSpec {
    CrossAttentionSite site{AttentionPath::Upward, 16, 3};
    int timestep = 281;
    double offset = 0.0;
    BinaryMask mask;
    OffsetPlacement placement = OffsetPlacement::PostProjection;
    bool inject_attention = true;
    /// Apply the offset only at the modulation step instead of every step from t_m to 1.
    bool single_step = false;

    void validate(int max_timestep) const;
};

/// Recorded inversion of one image. Re-denoising with the recorded noise
/// reproduces `source` exactly.
struct LatentTrajectory {
    Image source;
    TimestepSchedule schedule;
    std::uint64_t seed = 0;
    std::string caption;

    /// Latent x_t = sqrt(abar) x0 + sqrt(1 - abar) eps_t with the recorded eps_t.
    Image latent(int timestep) const;
    /// Recorded noise eps_t for one scheduled timestep.
    Image noise(int timestep) const;
};

struct DenoiseResult {
    Image image;
    int requested_timestep = 0;
    int applied_timestep = 0;
    int denoising_steps = 0;

    bool snapped() const { return requested_timestep != applied_timestep; }
};

struct ModulatedPair {
    Image minus;
    Image plus;
    int applied_timestep = 0;
};

/// Contract every diffusion runtime implements. Instances are immutable after
/// construction and all methods may be called concurrently.
class Backend {
public:
    virtual ~Backend() = default;

    virtual std::string name() const = 0;
    virtual std::vector<CrossAttentionSite> sites() const = 0;

    virtual LatentTrajectory invert(const Image& image, const TimestepSchedule& schedule,
                                    std::uint64_t seed) const = 0;
    virtual FeatureMapf extract_features(const LatentTrajectory& trajectory,
                                         const CrossAttentionSite& site, int timestep) const = 0;
    virtual DenoiseResult modulated_denoise(const LatentTrajectory& trajectory,
                                            const ModulationSpec& spec) const = 0;

    bool supports(const CrossAttentionSite& site) const;
    /// Unmodulated re-denoising of the whole trajectory.
    Image reconstruct(const LatentTrajectory& trajectory) const;

    /// Text conditioning used for every U-Net call.
    const std::string& caption() const { return caption_; }
    void set_caption(std::string caption) { caption_ = std::move(caption); }

private:
    std::string caption_;
};

/// Runs the modulated denoising process twice with offsets -lambda and +lambda.
ModulatedPair pair_modulate(const Backend& backend, const LatentTrajectory& trajectory,
                            const ModulationSpec& spec, double lambda);

/// Throws a sizing error unless both dimensions are positive multiples of 64.
void check_image_size(Eigen::Index height, Eigen::Index width);

struct ConformanceReport {
    bool reconstruction_ok = false;
    bool zero_offset_ok = false;
    bool default_config_ok = false;
    double max_channel_error = 0.0;
    std::vector<std::string> notes;

    bool passed() const { return reconstruction_ok && zero_offset_ok && default_config_ok; }
};

/// Checklist for third-party backends: c = 0 must reproduce the reconstruction
/// within `tolerance` per channel and the default modulation config must be accepted.
ConformanceReport check_conformance(const Backend& backend, const Image& image,
                                    double tolerance = 1e-2);

}  // namespace modseg
