#include "modseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

#include "json.hpp"

#include "modseg/error.hpp"
#include "modseg/random.hpp"

namespace modseg {

namespace {

constexpr double kStepResponse = 0.06;
constexpr int kLeakRadius = 8;

std::uint64_t site_key(const CrossAttentionSite& site) {
    return hash_keys({static_cast<std::uint64_t>(site.path), static_cast<std::uint64_t>(site.resolution),
                      static_cast<std::uint64_t>(site.layer_index)});
}

bool is_reference_site(const CrossAttentionSite& site) {
    return site == CrossAttentionSite{AttentionPath::Upward, 16, 1};
}

// Normalized box filter with clamped support; models the spatial spread of a
// modulation once attention maps are free to change.
Grid<float> box_spread(const Grid<float>& in, int radius) {
    const Eigen::Index h = in.rows(), w = in.cols();
    Grid<float> tmp(h, w), out(h, w);
    for (Eigen::Index i = 0; i < h; ++i)
        for (Eigen::Index j = 0; j < w; ++j) {
            const Eigen::Index lo = std::max<Eigen::Index>(0, j - radius), hi = std::min<Eigen::Index>(w - 1, j + radius);
            tmp(i, j) = in.row(i).segment(lo, hi - lo + 1).sum() / float(hi - lo + 1);
        }
    for (Eigen::Index j = 0; j < w; ++j)
        for (Eigen::Index i = 0; i < h; ++i) {
            const Eigen::Index lo = std::max<Eigen::Index>(0, i - radius), hi = std::min<Eigen::Index>(h - 1, i + radius);
            out(i, j) = tmp.col(j).segment(lo, hi - lo + 1).sum() / float(hi - lo + 1);
        }
    return out;
}

}  // namespace

void SyntheticScene::validate() const {
    if (labels.size() == 0) throw Error(ErrorKind::Validation, "scene has an empty label field");
    if (num_labels < 1) throw Error(ErrorKind::Validation, "scene needs at least one label");
    if (labels.minCoeff() < 0 || labels.maxCoeff() >= num_labels)
        throw Error(ErrorKind::Validation, "scene labels outside [0, num_labels)");
    if (prototypes.rows() != num_labels || prototypes.cols() < 1)
        throw Error(ErrorKind::Validation, "scene needs one prototype per label");
    if (colors.rows() != num_labels || colors.cols() != 3)
        throw Error(ErrorKind::Validation, "scene needs one RGB color per label");
    if (!prototypes.allFinite() || !colors.allFinite())
        throw Error(ErrorKind::Validation, "scene prototypes or colors are not finite");
    if (downsample_factor < 1) throw Error(ErrorKind::Validation, "downsample factor must be positive");
    if (!std::isfinite(noise_amplitude) || noise_amplitude < 0.0)
        throw Error(ErrorKind::Validation, "noise amplitude must be finite and nonnegative");
    if (num_labels > 1) {
        const double gap = min_prototype_gap();
        if (gap <= 0.0) throw Error(ErrorKind::Validation, "feature prototypes are not pairwise distinct");
        if (gap < 4.0 * noise_amplitude)
            throw Error(ErrorKind::Validation, "noise amplitude exceeds a quarter of the minimum prototype gap");
    }
}

double SyntheticScene::min_prototype_gap() const {
    double best = std::numeric_limits<double>::infinity();
    for (int a = 0; a < num_labels; ++a)
        for (int b = a + 1; b < num_labels; ++b)
            best = std::min(best, (prototypes.row(a) - prototypes.row(b)).cast<double>().norm());
    return best;
}

Image SyntheticScene::render() const {
    Image img(height(), width());
    for (int c = 0; c < 3; ++c)
        img[c] = labels.unaryExpr([&](int l) { return colors(l, c); });
    return img;
}

LabelGrid SyntheticScene::block_majority(int factor) const {
    const Eigen::Index h = height() / factor, w = width() / factor;
    LabelGrid out(h, w);
    std::vector<int> counts(num_labels);
    for (Eigen::Index u = 0; u < h; ++u)
        for (Eigen::Index v = 0; v < w; ++v) {
            std::fill(counts.begin(), counts.end(), 0);
            const auto block = labels.block(u * factor, v * factor, factor, factor);
            for (Eigen::Index i = 0; i < factor; ++i)
                for (Eigen::Index j = 0; j < factor; ++j) ++counts[block(i, j)];
            out(u, v) = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        }
    return out;
}

namespace {

LabelGrid voronoi_labels(const RandomSceneOptions& o, Rng& rng) {
    std::vector<double> ys(o.regions), xs(o.regions);
    std::vector<int> site_label(o.regions);
    for (int r = 0; r < o.regions; ++r) {
        ys[r] = rng.uniform(0.0, double(o.height));
        xs[r] = rng.uniform(0.0, double(o.width));
        site_label[r] = r < o.num_labels ? r : static_cast<int>(rng.below(o.num_labels));
    }
    LabelGrid out(o.height, o.width);
    for (Eigen::Index i = 0; i < o.height; ++i)
        for (Eigen::Index j = 0; j < o.width; ++j) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int r = 0; r < o.regions; ++r) {
                const double dy = double(i) + 0.5 - ys[r], dx = double(j) + 0.5 - xs[r];
                const double d = dy * dy + dx * dx;
                if (d < best_d) best_d = d, best = r;
            }
            out(i, j) = site_label[best];
        }
    return out;
}

LabelGrid band_labels(const RandomSceneOptions& o, Rng& rng) {
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double ny = std::cos(theta), nx = std::sin(theta);
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double y : {0.0, double(o.height)})
        for (double x : {0.0, double(o.width)}) {
            lo = std::min(lo, y * ny + x * nx);
            hi = std::max(hi, y * ny + x * nx);
        }
    // Cut points from sorted uniform draws, as an ordered partition of [lo, hi].
    std::vector<double> cuts;
    for (int r = 0; r + 1 < o.regions; ++r) cuts.push_back(rng.uniform(lo, hi));
    std::sort(cuts.begin(), cuts.end());
    std::vector<int> band_label(o.regions);
    for (int r = 0; r < o.regions; ++r) {
        int l = r < o.num_labels ? r : static_cast<int>(rng.below(o.num_labels));
        if (r > 0 && l == band_label[r - 1]) l = (l + 1) % o.num_labels;
        band_label[r] = l;
    }
    LabelGrid out(o.height, o.width);
    for (Eigen::Index i = 0; i < o.height; ++i)
        for (Eigen::Index j = 0; j < o.width; ++j) {
            const double s = (double(i) + 0.5) * ny + (double(j) + 0.5) * nx;
            const auto band = std::upper_bound(cuts.begin(), cuts.end(), s) - cuts.begin();
            out(i, j) = band_label[band];
        }
    return out;
}

}  // namespace

SyntheticScene make_random_scene(const RandomSceneOptions& options, std::uint64_t seed) {
    if (options.num_labels < 1 || options.regions < options.num_labels)
        throw Error(ErrorKind::Validation, "random scene needs 1 <= num_labels <= regions");
    if (options.height % options.downsample_factor != 0 || options.width % options.downsample_factor != 0)
        throw Error(ErrorKind::Sizing, "scene size must be divisible by the downsample factor");

    Rng rng(seed);
    SyntheticScene scene;
    scene.num_labels = options.num_labels;
    scene.downsample_factor = options.downsample_factor;
    scene.seed = seed;

    for (int attempt = 0;; ++attempt) {
        if (attempt == 200)
            throw Error(ErrorKind::Validation, "could not draw a scene where every label owns a block");
        scene.labels = options.layout == SceneLayout::Voronoi ? voronoi_labels(options, rng)
                                                              : band_labels(options, rng);
        const LabelGrid cells = scene.block_majority(options.downsample_factor);
        std::vector<bool> seen(options.num_labels, false);
        for (Eigen::Index k = 0; k < cells.size(); ++k) seen[cells(k)] = true;
        if (std::all_of(seen.begin(), seen.end(), [](bool b) { return b; })) break;
    }

    Rng vocab(options.vocabulary_seed ? hash_keys({*options.vocabulary_seed, 0x70CAB}) : hash_keys({seed, 0x5CE4E}));
    scene.prototypes.resize(options.num_labels, options.feature_dim);
    for (Eigen::Index k = 0; k < scene.prototypes.size(); ++k)
        scene.prototypes.data()[k] = static_cast<float>(vocab.gaussian());
    scene.colors.resize(options.num_labels, 3);
    for (Eigen::Index k = 0; k < scene.colors.size(); ++k)
        scene.colors.data()[k] = static_cast<float>(vocab.uniform(0.15, 0.85));
    scene.noise_amplitude = options.num_labels > 1 ? options.noise_fraction * scene.min_prototype_gap() : 0.0;
    scene.validate();
    return scene;
}

SyntheticScene resize_scene(const SyntheticScene& scene, Eigen::Index height, Eigen::Index width) {
    SyntheticScene out = scene;
    out.labels.resize(height, width);
    for (Eigen::Index i = 0; i < height; ++i) {
        const Eigen::Index si = std::min(scene.height() - 1, (2 * i + 1) * scene.height() / (2 * height));
        for (Eigen::Index j = 0; j < width; ++j) {
            const Eigen::Index sj = std::min(scene.width() - 1, (2 * j + 1) * scene.width() / (2 * width));
            out.labels(i, j) = scene.labels(si, sj);
        }
    }
    return out;
}

SyntheticScene scene_from_image(const Image& image, std::uint64_t seed, int feature_dim, double noise_fraction) {
    std::map<std::uint32_t, int> palette;
    SyntheticScene scene;
    scene.labels.resize(image.height(), image.width());
    std::vector<std::array<float, 3>> colors;
    std::vector<std::uint32_t> keys;
    for (Eigen::Index i = 0; i < image.height(); ++i)
        for (Eigen::Index j = 0; j < image.width(); ++j) {
            std::uint32_t key = 0;
            std::array<float, 3> rgb{};
            for (int c = 0; c < 3; ++c) {
                const auto q = static_cast<std::uint32_t>(std::lround(std::clamp(image[c](i, j), 0.0f, 1.0f) * 255.0f));
                key = (key << 8) | q;
                rgb[c] = float(q) / 255.0f;
            }
            auto [it, inserted] = palette.emplace(key, static_cast<int>(palette.size()));
            if (inserted) {
                if (palette.size() > 256)
                    throw Error(ErrorKind::Validation, "image has more than 256 distinct colors; expected a label-style image");
                colors.push_back(rgb);
                keys.push_back(key);
            }
            scene.labels(i, j) = it->second;
        }
    scene.num_labels = static_cast<int>(colors.size());
    scene.seed = seed;
    scene.prototypes.resize(scene.num_labels, feature_dim);
    for (int l = 0; l < scene.num_labels; ++l)
        for (int k = 0; k < feature_dim; ++k)
            scene.prototypes(l, k) = static_cast<float>(hashed_gaussian({seed, keys[l], std::uint64_t(k)}));
    scene.colors.resize(scene.num_labels, 3);
    for (int l = 0; l < scene.num_labels; ++l)
        for (int c = 0; c < 3; ++c) scene.colors(l, c) = colors[l][c];
    scene.noise_amplitude = scene.num_labels > 1 ? noise_fraction * scene.min_prototype_gap() : 0.0;
    scene.validate();
    return scene;
}

void save_scene(const SyntheticScene& scene, const std::filesystem::path& path) {
    nlohmann::json j;
    j["format"] = "modseg-scene/1";
    j["height"] = scene.height();
    j["width"] = scene.width();
    j["num_labels"] = scene.num_labels;
    j["downsample_factor"] = scene.downsample_factor;
    j["seed"] = scene.seed;
    j["noise_amplitude"] = scene.noise_amplitude;
    j["labels"] = std::vector<int>(scene.labels.data(), scene.labels.data() + scene.labels.size());
    auto rows = [](const RowMatrix<float>& m) {
        std::vector<std::vector<float>> out(m.rows());
        for (Eigen::Index r = 0; r < m.rows(); ++r) out[r].assign(m.row(r).data(), m.row(r).data() + m.cols());
        return out;
    };
    j["prototypes"] = rows(scene.prototypes);
    j["colors"] = rows(scene.colors);
    std::ofstream os(path);
    if (!os) throw Error(ErrorKind::Io, "cannot write scene file " + path.string());
    os << j.dump() << '\n';
}

SyntheticScene load_scene(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw Error(ErrorKind::Io, "cannot read scene file " + path.string());
    nlohmann::json j;
    try {
        is >> j;
        if (j.value("format", "") != "modseg-scene/1")
            throw Error(ErrorKind::Validation, "not a modseg scene file: " + path.string());
        SyntheticScene scene;
        const auto h = j.at("height").get<Eigen::Index>(), w = j.at("width").get<Eigen::Index>();
        const auto flat = j.at("labels").get<std::vector<int>>();
        if (static_cast<Eigen::Index>(flat.size()) != h * w)
            throw Error(ErrorKind::Validation, "label grid size does not match height x width");
        scene.labels = Eigen::Map<const LabelGrid>(flat.data(), h, w);
        scene.num_labels = j.at("num_labels").get<int>();
        scene.downsample_factor = j.value("downsample_factor", 32);
        scene.seed = j.value("seed", std::uint64_t{0});
        scene.noise_amplitude = j.value("noise_amplitude", 0.0);
        auto matrix = [](const nlohmann::json& rows, Eigen::Index cols_hint) {
            RowMatrix<float> m(rows.size(), rows.empty() ? cols_hint : rows[0].size());
            for (std::size_t r = 0; r < rows.size(); ++r) {
                const auto v = rows[r].get<std::vector<float>>();
                if (static_cast<Eigen::Index>(v.size()) != m.cols())
                    throw Error(ErrorKind::Validation, "ragged matrix in scene file");
                for (std::size_t c = 0; c < v.size(); ++c) m(r, c) = v[c];
            }
            return m;
        };
        scene.prototypes = matrix(j.at("prototypes"), 1);
        scene.colors = matrix(j.at("colors"), 3);
        scene.validate();
        return scene;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorKind::Validation, "malformed scene file " + path.string() + ": " + e.what());
    }
}

SyntheticBackend::SyntheticBackend(SyntheticScene scene) : scene_(std::move(scene)) {
    scene_.validate();
    if (scene_.height() % scene_.downsample_factor != 0 || scene_.width() % scene_.downsample_factor != 0)
        throw Error(ErrorKind::Sizing, "scene size is not divisible by its downsample factor");
    for (int res : {16, 32, 64}) {
        const int numer = scene_.downsample_factor * 16;
        if (numer % res != 0) continue;
        const int factor = numer / res;
        if (scene_.height() % factor != 0 || scene_.width() % factor != 0) continue;
        cell_labels_[res] = scene_.block_majority(factor);
    }
    prototype_scale_ = static_cast<float>(std::sqrt(scene_.prototypes.array().square().mean()));
}

std::vector<CrossAttentionSite> SyntheticBackend::sites() const {
    std::vector<CrossAttentionSite> out;
    // Up path: three cross-attention layers per resolution; down path: two.
    for (int res : {16, 32, 64})
        if (cell_labels_.count(res))
            for (int layer = 1; layer <= 3; ++layer) out.push_back({AttentionPath::Upward, res, layer});
    for (int res : {64, 32, 16})
        if (cell_labels_.count(res))
            for (int layer = 1; layer <= 2; ++layer) out.push_back({AttentionPath::Downward, res, layer});
    return out;
}

int SyntheticBackend::block_size(const CrossAttentionSite& site) const {
    check_site(site);
    return scene_.downsample_factor * 16 / site.resolution;
}

const LabelGrid& SyntheticBackend::cell_labels(const CrossAttentionSite& site) const {
    check_site(site);
    return cell_labels_.at(site.resolution);
}

void SyntheticBackend::check_site(const CrossAttentionSite& site) const {
    if (!supports(site)) throw Error(ErrorKind::UnsupportedSite, "site " + to_string(site) + " is not exposed by the synthetic backend");
}

void SyntheticBackend::check_trajectory(const LatentTrajectory& trajectory) const {
    if (trajectory.source.height() != scene_.height() || trajectory.source.width() != scene_.width())
        throw Error(ErrorKind::Validation, "trajectory does not belong to this backend's scene");
}

double SyntheticBackend::site_gain(const CrossAttentionSite& site) const {
    if (site.path == AttentionPath::Upward && site.resolution == 16) return 0.7 + 0.1 * site.layer_index;
    return 0.7;
}

LatentTrajectory SyntheticBackend::invert(const Image& image, const TimestepSchedule& schedule,
                                          std::uint64_t seed) const {
    check_image_size(image.height(), image.width());
    schedule.validate();
    if (image.height() != scene_.height() || image.width() != scene_.width())
        throw Error(ErrorKind::Validation, "image size differs from the backend scene");
    LatentTrajectory t;
    t.source = image;
    t.schedule = schedule;
    t.seed = seed;
    t.caption = caption();
    return t;
}

FeatureMapf SyntheticBackend::extract_features(const LatentTrajectory& trajectory, const CrossAttentionSite& site,
                                               int timestep) const {
    check_site(site);
    check_trajectory(trajectory);
    const int T = trajectory.schedule.max_timestep;
    if (timestep < 1 || timestep > T)
        throw Error(ErrorKind::Validation, "feature timestep " + std::to_string(timestep) + " outside [1, T]");

    const LabelGrid& cells = cell_labels_.at(site.resolution);
    const Eigen::Index d = scene_.feature_dim();
    FeatureMapf out(cells.rows(), cells.cols(), d);
    const std::uint64_t skey = site_key(site);
    const double amp = scene_.noise_amplitude / std::sqrt(double(d));
    const double diffusion = 0.5 * prototype_scale_ *
                             std::sqrt(std::max(0.0, 1.0 - alpha_bar(timestep, T) / alpha_bar(1, T)));

    Vector<double> reflector;
    if (!is_reference_site(site)) {
        reflector.resize(d);
        for (Eigen::Index k = 0; k < d; ++k) reflector(k) = hashed_gaussian({skey, 0xABCDull, std::uint64_t(k)});
        reflector.normalize();
    }

    for (Eigen::Index cell = 0; cell < cells.size(); ++cell) {
        Vector<double> x = scene_.prototypes.row(cells(cell)).transpose().cast<double>();
        for (Eigen::Index k = 0; k < d; ++k) {
            x(k) += amp * (2.0 * hashed_uniform({scene_.seed, skey, std::uint64_t(cell), std::uint64_t(k)}) - 1.0);
            if (diffusion > 0.0)
                x(k) += diffusion * hashed_gaussian({trajectory.seed, skey, std::uint64_t(cell), std::uint64_t(k),
                                                     std::uint64_t(timestep)});
        }
        if (reflector.size()) x -= 2.0 * reflector * reflector.dot(x);
        out.values.row(cell) = x.transpose().cast<float>();
    }
    return out;
}

DenoiseResult SyntheticBackend::modulated_denoise(const LatentTrajectory& trajectory,
                                                  const ModulationSpec& spec) const {
    check_site(spec.site);
    check_trajectory(trajectory);
    const auto& schedule = trajectory.schedule;
    spec.validate(schedule.max_timestep);
    const LabelGrid& cells = cell_labels_.at(spec.site.resolution);
    if (spec.mask.rows() != cells.rows() || spec.mask.cols() != cells.cols())
        throw Error(ErrorKind::Validation, "modulation mask is " + std::to_string(spec.mask.rows()) + "x" +
                                               std::to_string(spec.mask.cols()) + ", site grid is " +
                                               std::to_string(cells.rows()) + "x" + std::to_string(cells.cols()));

    DenoiseResult result;
    result.requested_timestep = spec.timestep;
    const int start = schedule.nearest_index(spec.timestep);
    result.applied_timestep = schedule.step_timesteps[start];
    result.denoising_steps = start + 1;

    // Labels touched by the mask, then the per-pixel response pattern.
    std::vector<bool> touched(scene_.num_labels, false);
    for (Eigen::Index k = 0; k < cells.size(); ++k)
        if (spec.mask(k)) touched[cells(k)] = true;
    Grid<float> pattern = scene_.labels.unaryExpr([&](int l) { return touched[l] ? 1.0f : 0.0f; });
    if (!spec.inject_attention) pattern = box_spread(pattern, kLeakRadius);

    Eigen::Vector3d dir(0.6, 0.48, 0.64);
    if (spec.placement == OffsetPlacement::PreProjection) {
        Eigen::Matrix3d projection;
        projection << 0.8, 0.3, 0.0, 0.0, 0.7, 0.3, 0.2, 0.0, 0.9;
        dir = projection * dir;
    }
    dir.normalize();

    const double sign = spec.offset < 0.0 ? -1.0 : 1.0;
    const double response = sign * std::tanh(std::abs(spec.offset) / 10.0) * kStepResponse * site_gain(spec.site);

    // Deviation from the recorded trajectory, propagated with the DDPM
    // posterior mean. The recorded noise is shared, so it cancels out.
    std::array<Grid<float>, 3> dev;
    for (auto& g : dev) g = Grid<float>::Zero(scene_.height(), scene_.width());
    const int T = schedule.max_timestep;
    for (int i = start; i >= 0; --i) {
        const double ab_t = alpha_bar(schedule.step_timesteps[i], T);
        const double ab_prev = i > 0 ? alpha_bar(schedule.step_timesteps[i - 1], T) : 1.0;
        const double a = std::sqrt(ab_prev) * (1.0 - ab_t / ab_prev) / (1.0 - ab_t);
        const double b = std::sqrt(ab_t / ab_prev) * (1.0 - ab_prev) / (1.0 - ab_t);
        const bool active = !spec.single_step || i == start;
        for (int c = 0; c < 3; ++c) {
            const auto keep = static_cast<float>(a / std::sqrt(ab_t) + b);
            if (active)
                dev[c] = keep * dev[c] + static_cast<float>(a * response * dir(c)) * pattern;
            else
                dev[c] = keep * dev[c];
        }
    }

    result.image = Image(scene_.height(), scene_.width());
    for (int c = 0; c < 3; ++c) result.image[c] = (trajectory.source[c] + dev[c]).cwiseMax(0.0f).cwiseMin(1.0f);
    return result;
}

}  // namespace modseg
