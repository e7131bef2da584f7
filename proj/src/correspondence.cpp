#include "modseg/correspondence.hpp"

#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

namespace modseg {

SegmentationMap naive_upsample(const LowResSegmentation& segmentation, Eigen::Index height, Eigen::Index width) {
    if (segmentation.masks.empty()) throw Error(ErrorKind::Validation, "no masks to upsample");
    const LabelGrid cells = segmentation.labels();
    const Eigen::Index h = cells.rows(), w = cells.cols();
    if (height < h || width < w) throw Error(ErrorKind::Validation, "naive_upsample cannot shrink");

    auto axis = [](Eigen::Index i, Eigen::Index out, Eigen::Index in) {
        const double src = (double(i) + 0.5) * double(in) / double(out) - 0.5;
        const double clamped = std::clamp(src, 0.0, double(in - 1));
        const auto lo = static_cast<Eigen::Index>(std::floor(clamped));
        const Eigen::Index hi = std::min(lo + 1, in - 1);
        return std::tuple{lo, hi, clamped - double(lo)};
    };

    SegmentationMap out;
    out.num_labels = segmentation.size();
    out.labels.resize(height, width);
    out.provenance.resize(out.num_labels);
    for (int k = 0; k < out.num_labels; ++k) out.provenance[k] = k;

    std::vector<double> score(out.num_labels, 0.0);
    for (Eigen::Index i = 0; i < height; ++i) {
        const auto [y0, y1, fy] = axis(i, height, h);
        for (Eigen::Index j = 0; j < width; ++j) {
            const auto [x0, x1, fx] = axis(j, width, w);
            const std::array<std::pair<int, double>, 4> taps{{{cells(y0, x0), (1 - fy) * (1 - fx)},
                                                              {cells(y0, x1), (1 - fy) * fx},
                                                              {cells(y1, x0), fy * (1 - fx)},
                                                              {cells(y1, x1), fy * fx}}};
            for (const auto& [label, weight] : taps) score[label] += weight;
            int best = -1;
            for (const auto& [label, weight] : taps)
                if (best < 0 || score[label] > score[best] || (score[label] == score[best] && label < best))
                    best = label;
            out.labels(i, j) = best;
            for (const auto& [label, weight] : taps) score[label] = 0.0;
        }
    }
    return out;
}

LabelGrid resize_nearest(const LabelGrid& labels, Eigen::Index height, Eigen::Index width) {
    LabelGrid out(height, width);
    const Eigen::Index h = labels.rows(), w = labels.cols();
    for (Eigen::Index i = 0; i < height; ++i) {
        const Eigen::Index si = std::min(h - 1, (2 * i + 1) * h / (2 * height));
        for (Eigen::Index j = 0; j < width; ++j)
            out(i, j) = labels(si, std::min(w - 1, (2 * j + 1) * w / (2 * width)));
    }
    return out;
}

DifferenceMapf mask_response(const Backend& backend, const LatentTrajectory& trajectory, const BinaryMask& mask,
                             const CorrespondenceConfig& config, int* applied_timestep) {
    ModulationSpec spec;
    spec.site = config.site;
    spec.timestep = config.timestep;
    spec.mask = mask;
    spec.placement = config.placement;
    spec.inject_attention = config.inject_attention;
    spec.single_step = config.single_step;
    const auto pair = pair_modulate(backend, trajectory, spec, config.lambda);
    if (applied_timestep) *applied_timestep = pair.applied_timestep;
    return difference_map(pair.minus, pair.plus);
}

Correspondences extract_correspondences(const Backend& backend, const LatentTrajectory& trajectory,
                                        const LowResSegmentation& segmentation, const CorrespondenceConfig& config,
                                        CorrespondenceCache* cache) {
    const int k = segmentation.size();
    if (k < 1) throw Error(ErrorKind::Validation, "no low-resolution masks");

    Correspondences out;
    out.maps.resize(k);
    out.applied_timestep = trajectory.schedule.step_timesteps[trajectory.schedule.nearest_index(config.timestep)];
    std::vector<std::exception_ptr> failures(k);
    std::atomic<int> next{0};
    std::atomic<int> hits{0};

    auto worker = [&] {
        for (int i = next++; i < k; i = next++) {
            try {
                if (cache) {
                    if (auto cached = cache->load(i, segmentation.masks[i])) {
                        out.maps[i] = std::move(*cached);
                        ++hits;
                        continue;
                    }
                }
                auto map = mask_response(backend, trajectory, segmentation.masks[i], config);
                if (config.sigma > 0.0) map = gaussian_smooth(map, config.sigma);
                if (cache) cache->store(i, segmentation.masks[i], map);
                out.maps[i] = std::move(map);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };

    int threads = config.threads > 0 ? config.threads : static_cast<int>(std::thread::hardware_concurrency());
    threads = std::clamp(threads, 1, k);
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    }

    for (int i = 0; i < k; ++i) {
        if (!failures[i]) continue;
        try {
            std::rethrow_exception(failures[i]);
        } catch (const std::exception& e) {
            throw Error(ErrorKind::Backend, "mask " + std::to_string(i) + ": " + e.what());
        }
    }
    out.cache_hits = hits;
    return out;
}

}  // namespace modseg
