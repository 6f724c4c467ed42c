// scoring.hpp - anomaly maps from branch likelihoods, image scores, AUROC
// metrics and the evaluation report.
#pragma once

#include <algorithm>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "vqflow/model.hpp"

namespace vqflow {

enum class DensityMode { dedicated, mixture };
enum class ImageScoreMode { max, mean };

inline const char* to_string(DensityMode m) {
    return m == DensityMode::dedicated ? "dedicated" : "mixture";
}
inline const char* to_string(ImageScoreMode m) { return m == ImageScoreMode::max ? "max" : "mean"; }

// Per-position anomaly scores at the finest branch resolution; higher means
// more anomalous (negative log-likelihood convention).
struct AnomalyMap {
    Tensor grid;  // [H, W]
    std::string sample_id;
};

// Bilinear resize of a [h, w] grid (half-pixel centers, clamped).
inline Tensor bilinear_upsample(const Tensor& src, int out_h, int out_w) {
    if (src.rank() != 2)
        throw DimensionError("bilinear_upsample: expected [H,W], got " + shape_str(src.shape()));
    const int h = src.dim(0), w = src.dim(1);
    if (h == out_h && w == out_w) return src;
    Tensor out(Shape{out_h, out_w});
    auto& o = out.mut();
    const float* p = src.data();
    const float sy = static_cast<float>(h) / static_cast<float>(out_h);
    const float sx = static_cast<float>(w) / static_cast<float>(out_w);
    for (int y = 0; y < out_h; ++y) {
        float fy = (y + 0.5f) * sy - 0.5f;
        fy = std::min(std::max(fy, 0.0f), static_cast<float>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const float wy = fy - static_cast<float>(y0);
        for (int x = 0; x < out_w; ++x) {
            float fx = (x + 0.5f) * sx - 0.5f;
            fx = std::min(std::max(fx, 0.0f), static_cast<float>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const float wx = fx - static_cast<float>(x0);
            const float v00 = p[y0 * w + x0], v01 = p[y0 * w + x1];
            const float v10 = p[y1 * w + x0], v11 = p[y1 * w + x1];
            o[static_cast<std::size_t>(y) * static_cast<std::size_t>(out_w) +
              static_cast<std::size_t>(x)] =
                (1.0f - wy) * ((1.0f - wx) * v00 + wx * v01) +
                wy * ((1.0f - wx) * v10 + wx * v11);
        }
    }
    return out;
}

// Per-branch negative log-likelihood fields, upsampled to the finest branch
// resolution and summed.
inline AnomalyMap anomaly_map(const VqFlowModel& model, const FeatureSample& sample,
                              DensityMode mode = DensityMode::dedicated) {
    ModelForward fwd = model.forward_sample(sample);
    const int out_h = sample.features[0].dim(0);
    const int out_w = sample.features[0].dim(1);
    Tensor acc;
    for (int i = 0; i < model.cfg.scales; ++i) {
        const BranchForward& bf = fwd.branches[static_cast<std::size_t>(i)];
        Tensor logprob = bf.logprob;
        if (mode == DensityMode::mixture && model.cfg.cadm && model.cfg.cpc)
            logprob = mixture_logprob(bf.z, model.cpc_book, model.heads);
        Tensor nll = mul_scalar(add(logprob, bf.logdet), -1.0f);
        Tensor up = bilinear_upsample(detach(nll), out_h, out_w);
        acc = acc.defined() ? add(acc, up) : up;
    }
    return {detach(acc), sample.id};
}

inline double image_score(const AnomalyMap& map, ImageScoreMode mode = ImageScoreMode::max) {
    if (map.grid.numel() == 0) throw ContractError("image_score: empty map");
    const float* p = map.grid.data();
    const std::size_t n = map.grid.numel();
    if (mode == ImageScoreMode::max) {
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) best = std::max(best, static_cast<double>(p[i]));
        return best;
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(p[i]);
    return acc / static_cast<double>(n);
}

// Exact Mann-Whitney AUROC with tie correction: the probability that a random
// positive outranks a random negative, ties counted one half.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw ContractError("auroc: scores/labels length mismatch");
    std::size_t n_pos = 0, n_neg = 0;
    for (int l : labels) (l ? n_pos : n_neg) += 1;
    if (n_pos == 0 || n_neg == 0)
        throw ContractError("auroc: both classes must be present (got " + std::to_string(n_pos) +
                            " positives, " + std::to_string(n_neg) + " negatives)");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j + 1 < idx.size() && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (std::size_t k = i; k <= j; ++k)
            if (labels[idx[k]]) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

// Nearest-neighbor resample of a binary mask to the map resolution.
inline std::vector<int> resample_mask(const std::vector<std::uint8_t>& mask, int mh, int mw,
                                      int out_h, int out_w) {
    std::vector<int> out(static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w), 0);
    for (int y = 0; y < out_h; ++y) {
        int sy = std::min(mh - 1, y * mh / out_h);
        for (int x = 0; x < out_w; ++x) {
            int sx = std::min(mw - 1, x * mw / out_w);
            out[static_cast<std::size_t>(y) * static_cast<std::size_t>(out_w) +
                static_cast<std::size_t>(x)] =
                mask[static_cast<std::size_t>(sy) * static_cast<std::size_t>(mw) +
                     static_cast<std::size_t>(sx)]
                    ? 1
                    : 0;
    }
    }
    return out;
}

// Pooled per-position AUROC across all samples; normal samples contribute
// all-negative positions.
inline double pixel_auroc(const std::vector<AnomalyMap>& maps,
                          const std::vector<std::vector<std::uint8_t>>& masks,
                          const std::vector<std::pair<int, int>>& mask_dims) {
    std::vector<double> scores;
    std::vector<int> labels;
    for (std::size_t s = 0; s < maps.size(); ++s) {
        const Tensor& g = maps[s].grid;
        const int h = g.dim(0), w = g.dim(1);
        std::vector<int> lab;
        if (masks[s].empty()) {
            lab.assign(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), 0);
        } else {
            lab = resample_mask(masks[s], mask_dims[s].first, mask_dims[s].second, h, w);
        }
        const float* p = g.data();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            scores.push_back(static_cast<double>(p[i]));
            labels.push_back(lab[i]);
        }
    }
    return auroc(scores, labels);
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct SampleScore {
    std::string id;
    int class_id = 0;
    int label = 0;  // 1 = anomalous
    double score = 0.0;
};

struct EvalReport {
    double det_auroc = 0.0;
    bool has_loc = false;
    double loc_auroc = 0.0;
    DensityMode density_mode = DensityMode::dedicated;
    ImageScoreMode score_mode = ImageScoreMode::max;
    std::vector<SampleScore> samples;
    std::vector<AnomalyMap> maps;
    std::vector<std::uint64_t> cpc_usage;
    std::vector<std::vector<std::uint64_t>> cspc_usage;
    std::string loss_trace_path;
};

inline EvalReport evaluate(const VqFlowModel& model, const std::vector<FeatureSample>& test_set,
                           DensityMode density = DensityMode::dedicated,
                           ImageScoreMode score_mode = ImageScoreMode::max) {
    if (test_set.empty()) throw ContractError("evaluate: empty test set");
    model.reset_codebook_usage();
    EvalReport rep;
    rep.density_mode = density;
    rep.score_mode = score_mode;

    std::vector<double> scores;
    std::vector<int> labels;
    std::vector<std::vector<std::uint8_t>> masks;
    std::vector<std::pair<int, int>> mask_dims;
    bool any_mask = false;
    for (const auto& s : test_set) {
        AnomalyMap map = anomaly_map(model, s, density);
        const double sc = image_score(map, score_mode);
        scores.push_back(sc);
        labels.push_back(s.anomalous ? 1 : 0);
        rep.samples.push_back({s.id, s.class_id, s.anomalous ? 1 : 0, sc});
        masks.push_back(s.mask);
        mask_dims.push_back({s.features[0].dim(0), s.features[0].dim(1)});
        any_mask |= !s.mask.empty();
        rep.maps.push_back(std::move(map));
    }
    rep.det_auroc = auroc(scores, labels);
    if (any_mask) {
        rep.has_loc = true;
        rep.loc_auroc = pixel_auroc(rep.maps, masks, mask_dims);
    }
    if (model.cfg.cpc) rep.cpc_usage = model.cpc_book.usage_counts;
    for (const auto& cb : model.cspc_books) rep.cspc_usage.push_back(cb.usage_counts);
    return rep;
}

// P5 greymap scaled to [0,255]; returns (min, max) used for the scaling.
inline std::pair<float, float> write_p5(const AnomalyMap& map, const std::string& path) {
    const Tensor& g = map.grid;
    const float* p = g.data();
    float lo = p[0], hi = p[0];
    for (std::size_t i = 0; i < g.numel(); ++i) {
        lo = std::min(lo, p[i]);
        hi = std::max(hi, p[i]);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot open for writing: " + path);
    out << "P5\n" << g.dim(1) << " " << g.dim(0) << "\n255\n";
    const float range = hi - lo;
    for (std::size_t i = 0; i < g.numel(); ++i) {
        float v = range > 0.0f ? (p[i] - lo) / range : 0.0f;
        unsigned char byte = static_cast<unsigned char>(std::lround(v * 255.0f));
        out.put(static_cast<char>(byte));
    }
    out.flush();
    if (!out) throw FormatError("write failed: " + path);
    return {lo, hi};
}

// JSON document; when maps were dumped, map_files carries per-sample file
// names and scaling bounds.
inline nlohmann::json report_json(const EvalReport& rep,
                                  const std::vector<nlohmann::json>& map_files = {}) {
    nlohmann::json j;
    j["det_auroc"] = rep.det_auroc;
    if (rep.has_loc)
        j["loc_auroc"] = rep.loc_auroc;
    else
        j["loc_auroc"] = nullptr;
    j["density_mode"] = to_string(rep.density_mode);
    j["image_score_mode"] = to_string(rep.score_mode);
    nlohmann::json samples = nlohmann::json::array();
    for (const auto& s : rep.samples)
        samples.push_back({{"id", s.id}, {"class_id", s.class_id}, {"label", s.label},
                           {"score", s.score}});
    j["samples"] = samples;
    nlohmann::json usage;
    usage["cpc"] = rep.cpc_usage;
    usage["cspc"] = rep.cspc_usage;
    j["codebook_usage"] = usage;
    if (!rep.loss_trace_path.empty()) j["loss_trace"] = rep.loss_trace_path;
    if (!map_files.empty()) j["maps"] = map_files;
    return j;
}

}  // namespace vqflow
