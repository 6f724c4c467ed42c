// codebook.hpp - vector quantization: nearest-codeword assignment with
// straight-through gradients, the prototype codebook encoder, residual
// pattern quantization with positional embedding, codebook seeding and
// dead-code revival.
#pragma once

#include <limits>

#include "vqflow/net.hpp"
#include "vqflow/tensor.hpp"

namespace vqflow {

// A K x D table of codewords plus assignment statistics. usage_counts sums
// to the number of quantized vectors since the last reset.
struct Codebook {
    Tensor codewords;  // [K, D]
    mutable std::vector<std::uint64_t> usage_counts;

    Codebook() = default;
    Codebook(int k, int d) : codewords(Shape{k, d}), usage_counts(static_cast<std::size_t>(k), 0) {}
    explicit Codebook(Tensor words)
        : codewords(std::move(words)),
          usage_counts(static_cast<std::size_t>(codewords.dim(0)), 0) {}

    int size() const { return codewords.dim(0); }
    int dim() const { return codewords.dim(1); }

    void reset_usage() const { std::fill(usage_counts.begin(), usage_counts.end(), 0); }
};

// Result of quantizing a batch of vectors (one row per trailing-dim slice of
// the input).
//   quantized:     same shape as the input; forward values are exact codeword
//                  copies, backward is straight-through into the input.
//   codeword_rows: [n, D] tape-linked gather of the selected codewords; this
//                  is the tensor the quantization loss trains.
//   sq_distance:   [n] squared distance to the selected codeword.
struct QuantResult {
    std::vector<int> indices;
    Tensor quantized;
    Tensor codeword_rows;
    Tensor sq_distance;
};

// Freeze-and-replay support for gradient checking. Straight-through and
// stopgrad make the trained gradient the exact derivative not of the raw
// loss but of its linearization: quantizer assignments held fixed, the
// straight-through output moving with its carrier plus a frozen offset, and
// stopgrad arguments pinned at their base values. A populate pass records
// those frozen quantities per call site; replay passes rebuild that smooth
// surrogate so central differences can be compared against backprop.
struct QuantFreeze {
    struct QuantSite {
        std::vector<int> indices;
        std::vector<float> st_offset;  // quantized - carrier at the base point
    };
    struct LossSite {
        std::vector<float> frozen_v;
        std::vector<float> frozen_q;
        float commit_base = 0.0f;
    };
    std::vector<QuantSite> quant_sites;
    std::vector<LossSite> loss_sites;
    std::size_t quant_cursor = 0;
    std::size_t loss_cursor = 0;
    bool replay = false;

    void rewind() {
        quant_cursor = 0;
        loss_cursor = 0;
        replay = true;
    }
};

// Nearest codeword per row under squared Euclidean distance; ties break to
// the lowest index.
inline QuantResult quantize_nearest(const Codebook& cb, const Tensor& v,
                                    QuantFreeze* freeze = nullptr) {
    const int d = cb.dim();
    if (v.rank() < 1 || v.dim(v.rank() - 1) != d)
        throw DimensionError("quantize_nearest: input " + shape_str(v.shape()) +
                             " vs codeword dim " + std::to_string(d));
    const int k = cb.size();
    const std::size_t rows = v.numel() / static_cast<std::size_t>(d);
    const float* pv = v.data();
    const float* pc = cb.codewords.data();

    if (freeze && freeze->replay) {
        if (freeze->quant_cursor >= freeze->quant_sites.size())
            throw ContractError("quantize replay ran past the recorded sites");
        const auto& site = freeze->quant_sites[freeze->quant_cursor++];
        if (site.indices.size() != rows)
            throw ContractError("quantize replay row-count mismatch");
        QuantResult res;
        res.indices = site.indices;
        res.codeword_rows = gather_rows(cb.codewords, res.indices);
        res.quantized = add(v, Tensor(v.shape(), site.st_offset));
        res.sq_distance = Tensor::zeros(Shape{static_cast<int>(rows)});
        return res;
    }

    QuantResult res;
    res.indices.resize(rows);
    std::vector<float> dists(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* x = pv + r * static_cast<std::size_t>(d);
        int best = 0;
        float best_d = std::numeric_limits<float>::infinity();
        for (int c = 0; c < k; ++c) {
            const float* w = pc + static_cast<std::size_t>(c) * static_cast<std::size_t>(d);
            float acc = 0.0f;
            for (int j = 0; j < d; ++j) {
                float diff = x[j] - w[j];
                acc += diff * diff;
            }
            if (acc < best_d) {
                best_d = acc;
                best = c;
            }
        }
        res.indices[r] = best;
        dists[r] = best_d;
        cb.usage_counts[static_cast<std::size_t>(best)] += 1;
    }
    res.codeword_rows = gather_rows(cb.codewords, res.indices);
    res.quantized = pass_through(reshape(res.codeword_rows, v.shape()), v);
    res.sq_distance = Tensor(Shape{static_cast<int>(rows)}, std::move(dists));
    if (freeze) {
        QuantFreeze::QuantSite site;
        site.indices = res.indices;
        site.st_offset.resize(v.numel());
        for (std::size_t i = 0; i < v.numel(); ++i)
            site.st_offset[i] = res.quantized[i] - v[i];
        freeze->quant_sites.push_back(std::move(site));
    }
    return res;
}

// Quantization objective. The returned scalar's value equals the plain mean
// squared error E[|v - quantized|^2]; its gradient splits stopgrad-style:
// the codeword side trains `quantized`, the commitment side (weight
// `commitment`) trains `v`.
inline Tensor vq_loss(const Tensor& v, const Tensor& quantized, float commitment = 0.25f,
                      QuantFreeze* freeze = nullptr) {
    detail::check_same_shape("vq_loss", v, quantized);
    if (freeze && freeze->replay) {
        if (freeze->loss_cursor >= freeze->loss_sites.size())
            throw ContractError("vq_loss replay ran past the recorded sites");
        const auto& site = freeze->loss_sites[freeze->loss_cursor++];
        Tensor v0(v.shape(), site.frozen_v);
        Tensor q0(quantized.shape(), site.frozen_q);
        Tensor dq = sub(v0, quantized);
        Tensor codeword_term = mean_all(mul(dq, dq));
        Tensor dv = sub(v, q0);
        Tensor commit_term = mean_all(mul(dv, dv));
        return add(codeword_term,
                   mul_scalar(add_scalar(commit_term, -site.commit_base), commitment));
    }
    Tensor dq = sub(detach(v), quantized);
    Tensor codeword_term = mean_all(mul(dq, dq));
    Tensor dv = sub(v, detach(quantized));
    Tensor commit_term = mean_all(mul(dv, dv));
    if (freeze) {
        QuantFreeze::LossSite site;
        site.frozen_v.assign(v.data(), v.data() + v.numel());
        site.frozen_q.assign(quantized.data(), quantized.data() + quantized.numel());
        site.commit_base = commit_term.value();
        freeze->loss_sites.push_back(std::move(site));
    }
    // value-neutral: commit_term - detach(commit_term) == 0 exactly
    return add(codeword_term, mul_scalar(sub(commit_term, detach(commit_term)), commitment));
}

// ---------------------------------------------------------------------------
// Positional embedding. Fixed sinusoidal table over a [H, W] grid: the first
// d_pe/2 channels encode the row index, the rest the column index. Within an
// axis block, channel c uses frequency omega_j = 10000^(-2j/q) with j = c/2
// and q = d_pe/2, giving sin(pos * omega_j) on even channels and
// cos(pos * omega_j) on odd ones.
// ---------------------------------------------------------------------------

inline Tensor positional_embedding(int h, int w, int d_pe) {
    if (d_pe <= 0 || d_pe % 2 != 0)
        throw ContractError("positional_embedding: d_pe must be positive even, got " +
                            std::to_string(d_pe));
    const int q = d_pe / 2;
    Tensor out(Shape{h, w, d_pe});
    auto& o = out.mut();
    for (int m = 0; m < h; ++m) {
        for (int n = 0; n < w; ++n) {
            float* row = o.data() + (static_cast<std::size_t>(m) * static_cast<std::size_t>(w) +
                                     static_cast<std::size_t>(n)) *
                                        static_cast<std::size_t>(d_pe);
            for (int axis = 0; axis < 2; ++axis) {
                const double pos = axis == 0 ? m : n;
                for (int c = 0; c < q; ++c) {
                    const int j = c / 2;
                    const double omega = std::pow(10000.0, -2.0 * j / q);
                    const double angle = pos * omega;
                    row[axis * q + c] =
                        static_cast<float>((c % 2 == 0) ? std::sin(angle) : std::cos(angle));
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Conceptual prototype encoding: pool the top-scale feature map, project with
// the MLP, quantize against the prototype codebook.
// ---------------------------------------------------------------------------

struct CpcResult {
    Tensor y;      // [D_cp] continuous projection
    Tensor y_hat;  // [D_cp] assigned prototype, straight-through to y
    QuantResult quant;
    int index() const { return quant.indices[0]; }
};

inline CpcResult cpc_encode(const Tensor& h_top, const TwoLayer& proj, const Codebook& cb,
                            QuantFreeze* freeze = nullptr) {
    if (proj.d_out() != cb.dim())
        throw DimensionError("cpc_encode: projection output " + std::to_string(proj.d_out()) +
                             " vs codebook dim " + std::to_string(cb.dim()));
    CpcResult res;
    res.y = proj(avg_pool_spatial(h_top));
    res.quant = quantize_nearest(cb, res.y, freeze);
    res.y_hat = res.quant.quantized;
    return res;
}

// ---------------------------------------------------------------------------
// Pattern quantization. The residual form subtracts a per-position condition
// (positional embedding channels first, then the broadcast prototype),
// quantizes the residual, and adds the condition back. With no condition it
// degrades to plain per-position (concept-agnostic) quantization.
// ---------------------------------------------------------------------------

struct PatternQuantResult {
    Tensor quantized_map;  // [H, W, D] reconstruction used as flow condition
    Tensor residual;       // [H, W, D] what was quantized
    Tensor condition;      // [H, W, D] or undefined for the agnostic path
    QuantResult quant;
};

inline PatternQuantResult cspc_quantize(const Tensor& h_prime, const Tensor& y_hat,
                                        const Tensor& pe, const Codebook& cb,
                                        QuantFreeze* freeze = nullptr) {
    if (h_prime.rank() != 3)
        throw DimensionError("cspc_quantize: expected [H,W,D], got " + shape_str(h_prime.shape()));
    const int h = h_prime.dim(0), w = h_prime.dim(1), d = h_prime.dim(2);
    const int d_cp = y_hat.defined() ? y_hat.dim(0) : 0;
    const int d_pe = pe.defined() ? pe.dim(2) : 0;
    if (y_hat.defined() || pe.defined()) {
        if (d != d_cp + d_pe)
            throw ContractError("cspc_quantize: channel alignment D_csp=" + std::to_string(d) +
                                " != D_cp=" + std::to_string(d_cp) +
                                " + D_PE=" + std::to_string(d_pe));
    }
    if (cb.dim() != d)
        throw DimensionError("cspc_quantize: codebook dim " + std::to_string(cb.dim()) +
                             " vs feature dim " + std::to_string(d));

    PatternQuantResult res;
    if (pe.defined() && y_hat.defined())
        res.condition = concat_channels(pe, tile_spatial(y_hat, h, w));
    else if (pe.defined())
        res.condition = pe;
    else if (y_hat.defined())
        res.condition = tile_spatial(y_hat, h, w);

    res.residual = res.condition.defined() ? sub(h_prime, res.condition) : h_prime;
    res.quant = quantize_nearest(cb, res.residual, freeze);
    res.quantized_map =
        res.condition.defined() ? add(res.quant.quantized, res.condition) : res.quant.quantized;
    return res;
}

inline PatternQuantResult capc_quantize(const Tensor& h_prime, const Codebook& cb) {
    return cspc_quantize(h_prime, Tensor(), Tensor(), cb);
}

// ---------------------------------------------------------------------------
// Codebook seeding (k-means++ style) and dead-code revival.
// ---------------------------------------------------------------------------

inline Tensor codebook_init(const Tensor& samples, int k, Rng& rng) {
    if (samples.rank() != 2)
        throw DimensionError("codebook_init: samples must be [N,D], got " +
                             shape_str(samples.shape()));
    const int n = samples.dim(0), d = samples.dim(1);
    if (n < k)
        throw ContractError("codebook_init: need at least K=" + std::to_string(k) +
                            " samples, got N=" + std::to_string(n));
    const float* ps = samples.data();
    auto row = [&](int i) { return ps + static_cast<std::size_t>(i) * static_cast<std::size_t>(d); };
    auto sqdist = [&](const float* a, const float* b) {
        float acc = 0.0f;
        for (int j = 0; j < d; ++j) {
            float diff = a[j] - b[j];
            acc += diff * diff;
        }
        return static_cast<double>(acc);
    };

    std::vector<int> chosen;
    chosen.reserve(static_cast<std::size_t>(k));
    chosen.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n))));

    std::vector<double> mindist(static_cast<std::size_t>(n));
    std::vector<char> taken(static_cast<std::size_t>(n), 0);
    taken[static_cast<std::size_t>(chosen[0])] = 1;
    for (int i = 0; i < n; ++i) mindist[static_cast<std::size_t>(i)] = sqdist(row(i), row(chosen[0]));

    while (static_cast<int>(chosen.size()) < k) {
        double total = 0.0;
        for (double m : mindist) total += m;
        int pick = -1;
        if (total > 0.0) {
            double u = rng.next_double() * total;
            double cum = 0.0;
            for (int i = 0; i < n; ++i) {
                cum += mindist[static_cast<std::size_t>(i)];
                if (u < cum) {
                    pick = i;
                    break;
                }
            }
            if (pick < 0) pick = n - 1;
        }
        if (pick < 0 || taken[static_cast<std::size_t>(pick)]) {
            // duplicate-heavy input: fall back to the first unused sample
            for (int i = 0; i < n; ++i)
                if (!taken[static_cast<std::size_t>(i)]) {
                    pick = i;
                    break;
                }
        }
        taken[static_cast<std::size_t>(pick)] = 1;
        chosen.push_back(pick);
        for (int i = 0; i < n; ++i) {
            double cand = sqdist(row(i), row(pick));
            if (cand < mindist[static_cast<std::size_t>(i)]) mindist[static_cast<std::size_t>(i)] = cand;
        }
    }

    Tensor words(Shape{k, d});
    auto& ow = words.mut();
    for (int c = 0; c < k; ++c)
        std::memcpy(ow.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(d),
                    row(chosen[static_cast<std::size_t>(c)]),
                    static_cast<std::size_t>(d) * sizeof(float));
    return words;
}

// Codewords whose usage fell below `threshold` since the last reset are
// reseeded from recent quantizer inputs. Returns the number revived; usage
// counters reset either way.
inline int revive_dead_codes(Codebook& cb, const Tensor& recent_inputs, std::uint64_t threshold,
                             Rng& rng) {
    if (recent_inputs.rank() != 2 || recent_inputs.dim(1) != cb.dim())
        throw DimensionError("revive_dead_codes: recent inputs " +
                             shape_str(recent_inputs.shape()) + " vs codebook dim " +
                             std::to_string(cb.dim()));
    const int n = recent_inputs.dim(0);
    if (n < 1) throw ContractError("revive_dead_codes: no recent inputs");
    const int d = cb.dim();
    int revived = 0;
    auto& words = cb.codewords.mut();
    for (int c = 0; c < cb.size(); ++c) {
        if (cb.usage_counts[static_cast<std::size_t>(c)] >= threshold) continue;
        int src = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
        std::memcpy(words.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(d),
                    recent_inputs.data() + static_cast<std::size_t>(src) * static_cast<std::size_t>(d),
                    static_cast<std::size_t>(d) * sizeof(float));
        ++revived;
    }
    cb.reset_usage();
    return revived;
}

}  // namespace vqflow
