#include "modseg/backend.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "modseg/error.hpp"
#include "modseg/random.hpp"

namespace modseg {

TimestepSchedule TimestepSchedule::ddpm(int steps, int max_timestep) {
    if (steps < 1 || max_timestep < steps)
        throw Error(ErrorKind::Validation, "schedule needs 1 <= steps <= T");
    TimestepSchedule s;
    s.total_steps = steps;
    s.max_timestep = max_timestep;
    const int stride = max_timestep / steps;
    for (int i = 0; i < steps; ++i) s.step_timesteps.push_back(1 + i * stride);
    return s;
}

void TimestepSchedule::validate() const {
    if (static_cast<int>(step_timesteps.size()) != total_steps)
        throw Error(ErrorKind::Validation, "schedule length differs from total_steps");
    for (std::size_t i = 0; i < step_timesteps.size(); ++i) {
        const int t = step_timesteps[i];
        if (t < 1 || t > max_timestep)
            throw Error(ErrorKind::Validation, "scheduled timestep " + std::to_string(t) + " outside [1, T]");
        if (i > 0 && step_timesteps[i - 1] >= t)
            throw Error(ErrorKind::Validation, "schedule not strictly increasing");
    }
}

int TimestepSchedule::nearest_index(int timestep) const {
    int best = 0;
    for (int i = 1; i < static_cast<int>(step_timesteps.size()); ++i)
        if (std::abs(step_timesteps[i] - timestep) < std::abs(step_timesteps[best] - timestep)) best = i;
    return best;
}

bool TimestepSchedule::contains(int timestep) const {
    return std::find(step_timesteps.begin(), step_timesteps.end(), timestep) != step_timesteps.end();
}

double alpha_bar(int timestep, int max_timestep) {
    const double lo = std::sqrt(0.00085);
    const double hi = std::sqrt(0.012);
    double acc = 1.0;
    for (int t = 1; t <= timestep; ++t) {
        const double frac = max_timestep > 1 ? double(t - 1) / double(max_timestep - 1) : 0.0;
        const double root = lo + (hi - lo) * frac;
        acc *= 1.0 - root * root;
    }
    return acc;
}

std::string to_string(const CrossAttentionSite& site) {
    std::ostringstream os;
    os << (site.path == AttentionPath::Upward ? "up" : "down") << '-' << site.resolution << '-'
       << site.layer_index;
    return os.str();
}

CrossAttentionSite parse_site(const std::string& text) {
    CrossAttentionSite site;
    const auto first = text.find('-');
    const auto second = text.find('-', first == std::string::npos ? first : first + 1);
    if (first == std::string::npos || second == std::string::npos)
        throw Error(ErrorKind::Validation, "site must look like up-16-3, got '" + text + "'");
    const std::string path = text.substr(0, first);
    if (path == "up" || path == "upward")
        site.path = AttentionPath::Upward;
    else if (path == "down" || path == "downward")
        site.path = AttentionPath::Downward;
    else
        throw Error(ErrorKind::Validation, "unknown attention path '" + path + "'");
    try {
        site.resolution = std::stoi(text.substr(first + 1, second - first - 1));
        site.layer_index = std::stoi(text.substr(second + 1));
    } catch (const std::exception&) {
        throw Error(ErrorKind::Validation, "malformed site '" + text + "'");
    }
    return site;
}

std::string to_string(OffsetPlacement placement) {
    return placement == OffsetPlacement::PostProjection ? "post_projection" : "pre_projection";
}

OffsetPlacement parse_placement(const std::string& text) {
    if (text == "post_projection" || text == "post") return OffsetPlacement::PostProjection;
    if (text == "pre_projection" || text == "pre") return OffsetPlacement::PreProjection;
    throw Error(ErrorKind::Validation, "unknown offset placement '" + text + "'");
}

void ModulationSpec::validate(int max_timestep) const {
    if (timestep < 1 || timestep > max_timestep)
        throw Error(ErrorKind::Validation, "modulation timestep " + std::to_string(timestep) + " outside [1, T]");
    if (!std::isfinite(offset)) throw Error(ErrorKind::Validation, "modulation offset is not finite");
    // Grid shape depends on the image aspect ratio; backends check it against the site grid.
    if (mask.size() == 0) throw Error(ErrorKind::Validation, "modulation mask has no cells");
}

Image LatentTrajectory::noise(int timestep) const {
    Image eps(source.height(), source.width());
    const auto w = static_cast<std::uint64_t>(source.width());
    for (int c = 0; c < 3; ++c)
        for (Eigen::Index i = 0; i < source.height(); ++i)
            for (Eigen::Index j = 0; j < source.width(); ++j)
                eps[c](i, j) = static_cast<float>(hashed_gaussian(
                    {seed, static_cast<std::uint64_t>(timestep), static_cast<std::uint64_t>(c),
                     static_cast<std::uint64_t>(i) * w + static_cast<std::uint64_t>(j)}));
    return eps;
}

Image LatentTrajectory::latent(int timestep) const {
    const double ab = alpha_bar(timestep, schedule.max_timestep);
    const Image eps = noise(timestep);
    Image x(source.height(), source.width());
    for (int c = 0; c < 3; ++c)
        x[c] = (std::sqrt(ab) * source[c].cast<double>() + std::sqrt(1.0 - ab) * eps[c].cast<double>())
                   .cast<float>();
    return x;
}

bool Backend::supports(const CrossAttentionSite& site) const {
    const auto all = sites();
    return std::find(all.begin(), all.end(), site) != all.end();
}

Image Backend::reconstruct(const LatentTrajectory& trajectory) const {
    ModulationSpec spec;
    spec.site = sites().front();
    spec.timestep = trajectory.schedule.step_timesteps.back();
    spec.offset = 0.0;
    const auto grid = extract_features(trajectory, spec.site, 1);
    spec.mask = BinaryMask::Zero(grid.height, grid.width);
    return modulated_denoise(trajectory, spec).image;
}

ModulatedPair pair_modulate(const Backend& backend, const LatentTrajectory& trajectory,
                            const ModulationSpec& spec, double lambda) {
    if (!std::isfinite(lambda) || lambda < 0.0)
        throw Error(ErrorKind::Validation, "lambda must be finite and nonnegative");
    ModulationSpec minus = spec;
    ModulationSpec plus = spec;
    minus.offset = -lambda;
    plus.offset = lambda;
    auto lo = backend.modulated_denoise(trajectory, minus);
    auto hi = backend.modulated_denoise(trajectory, plus);
    return {std::move(lo.image), std::move(hi.image), hi.applied_timestep};
}

void check_image_size(Eigen::Index height, Eigen::Index width) {
    if (height <= 0 || height % 64 != 0)
        throw Error(ErrorKind::Sizing, "height " + std::to_string(height) + " is not a positive multiple of 64");
    if (width <= 0 || width % 64 != 0)
        throw Error(ErrorKind::Sizing, "width " + std::to_string(width) + " is not a positive multiple of 64");
}

ConformanceReport check_conformance(const Backend& backend, const Image& image, double tolerance) {
    ConformanceReport report;
    const auto schedule = TimestepSchedule::ddpm();
    const auto trajectory = backend.invert(image, schedule, 0);

    const Image recon = backend.reconstruct(trajectory);
    double worst = 0.0;
    for (int c = 0; c < 3; ++c) worst = std::max(worst, double((recon[c] - image[c]).abs().maxCoeff()));
    report.max_channel_error = worst;
    report.reconstruction_ok = worst <= tolerance;
    if (!report.reconstruction_ok) report.notes.push_back("reconstruction exceeds tolerance");

    ModulationSpec spec;  // default site and t_m
    if (!backend.supports(spec.site)) {
        report.notes.push_back("default site " + to_string(spec.site) + " not exposed");
        return report;
    }
    const auto features = backend.extract_features(trajectory, spec.site, 1);
    spec.mask = BinaryMask::Ones(features.height, features.width);
    spec.offset = 0.0;
    const auto zero = backend.modulated_denoise(trajectory, spec);
    double zero_err = 0.0;
    for (int c = 0; c < 3; ++c) zero_err = std::max(zero_err, double((zero.image[c] - recon[c]).abs().maxCoeff()));
    report.zero_offset_ok = zero_err <= tolerance;
    if (!report.zero_offset_ok) report.notes.push_back("c = 0 modulation changes the reconstruction");

    try {
        spec.offset = 10.0;
        const auto res = backend.modulated_denoise(trajectory, spec);
        report.default_config_ok = res.applied_timestep == 281;
        if (!report.default_config_ok) report.notes.push_back("default t_m = 281 was snapped");
    } catch (const std::exception& e) {
        report.notes.push_back(std::string("default config rejected: ") + e.what());
    }
    return report;
}

}  // namespace modseg
