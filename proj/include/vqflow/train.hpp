// train.hpp - unified end-to-end objective and the optimization loop
#pragma once

#include <deque>
#include <functional>

#include "vqflow/model.hpp"

namespace vqflow {

struct TrainConfig {
    float learning_rate = 1e-4f;
    int batch_size = 16;
    int epochs = 100;
    std::vector<float> alpha;  // per-branch flow loss weights; empty = all 1
    float beta = 1.0f;         // prototype codebook loss weight
    std::vector<float> gamma;  // per-scale pattern codebook weights; empty = all 1
    std::uint64_t seed = 0;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float clip_norm = 10.0f;
    int checkpoint_every = 0;  // epochs between checkpoint callbacks; 0 = final only
    std::uint64_t revival_threshold = 1;

    float alpha_for(int i) const {
        return alpha.empty() ? 1.0f : alpha[static_cast<std::size_t>(i)];
    }
    float gamma_for(int i) const {
        return gamma.empty() ? 1.0f : gamma[static_cast<std::size_t>(i)];
    }
};

struct LossBreakdown {
    std::vector<float> l_flow;  // per branch
    float l_qcp = 0.0f;
    std::vector<float> l_qcsp;  // per scale (0 when the codebook is off)
    float total = 0.0f;
};

// Aggregated objective over one batch: weighted flow negative log-likelihoods
// plus the prototype and pattern quantization losses. Disabled components
// contribute zero and build no graph. Returns the recorded values together
// with the scalar to differentiate.
inline std::pair<LossBreakdown, Tensor> unified_loss(const VqFlowModel& model,
                                                     std::span<const FeatureSample> batch,
                                                     const TrainConfig& tc,
                                                     std::vector<ModelForward>* fwd_out = nullptr,
                                                     QuantFreeze* freeze = nullptr) {
    if (batch.empty()) throw ContractError("unified_loss: empty batch");
    const int scales = model.cfg.scales;
    const float inv_b = 1.0f / static_cast<float>(batch.size());

    std::vector<Tensor> flow_acc(static_cast<std::size_t>(scales));
    std::vector<Tensor> qcsp_acc(static_cast<std::size_t>(scales));
    Tensor qcp_acc;

    for (const FeatureSample& sample : batch) {
        ModelForward fwd = model.forward_sample(sample, freeze);
        for (int i = 0; i < scales; ++i) {
            const BranchForward& bf = fwd.branches[static_cast<std::size_t>(i)];
            Tensor per_sample = mean_all(add(bf.logprob, bf.logdet));
            auto& acc = flow_acc[static_cast<std::size_t>(i)];
            acc = acc.defined() ? add(acc, per_sample) : per_sample;
            if (bf.l_qcsp.defined()) {
                auto& qacc = qcsp_acc[static_cast<std::size_t>(i)];
                qacc = qacc.defined() ? add(qacc, bf.l_qcsp) : bf.l_qcsp;
            }
        }
        if (fwd.l_qcp.defined()) qcp_acc = qcp_acc.defined() ? add(qcp_acc, fwd.l_qcp) : fwd.l_qcp;
        if (fwd_out) fwd_out->push_back(std::move(fwd));
    }

    LossBreakdown bd;
    bd.l_flow.resize(static_cast<std::size_t>(scales), 0.0f);
    bd.l_qcsp.resize(static_cast<std::size_t>(scales), 0.0f);

    Tensor total;
    auto add_term = [&](const Tensor& term, float weight) {
        Tensor weighted = weight == 1.0f ? term : mul_scalar(term, weight);
        total = total.defined() ? add(total, weighted) : weighted;
    };

    for (int i = 0; i < scales; ++i) {
        Tensor l_f = mul_scalar(flow_acc[static_cast<std::size_t>(i)], -inv_b);
        float v = l_f.value();
        if (!std::isfinite(v))
            throw NumericError("flow NLL L_f[" + std::to_string(i) + "] is non-finite");
        bd.l_flow[static_cast<std::size_t>(i)] = v;
        add_term(l_f, tc.alpha_for(i));
    }
    if (qcp_acc.defined()) {
        Tensor l_qcp = mul_scalar(qcp_acc, inv_b);
        float v = l_qcp.value();
        if (!std::isfinite(v)) throw NumericError("prototype codebook loss is non-finite");
        bd.l_qcp = v;
        add_term(l_qcp, tc.beta);
    }
    for (int i = 0; i < scales; ++i) {
        if (!qcsp_acc[static_cast<std::size_t>(i)].defined()) continue;
        Tensor l_q = mul_scalar(qcsp_acc[static_cast<std::size_t>(i)], inv_b);
        float v = l_q.value();
        if (!std::isfinite(v))
            throw NumericError("pattern codebook loss L_Qcsp[" + std::to_string(i) +
                               "] is non-finite");
        bd.l_qcsp[static_cast<std::size_t>(i)] = v;
        add_term(l_q, tc.gamma_for(i));
    }
    bd.total = total.value();
    if (!std::isfinite(bd.total)) throw NumericError("total loss is non-finite");
    return {bd, total};
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<float>> m, v;
    std::int64_t step = 0;
};

inline void adam_step(std::span<ParamRef> params, const std::vector<std::vector<float>>& grads,
                      AdamState& state, float lr, float beta1, float beta2, float eps) {
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i].tensor->numel(), 0.0f);
            state.v[i].assign(params[i].tensor->numel(), 0.0f);
        }
    }
    if (state.m.size() != params.size())
        throw ContractError("adam_step: state/parameter count mismatch");
    state.step += 1;
    const float bc1 = 1.0f - std::pow(beta1, static_cast<float>(state.step));
    const float bc2 = 1.0f - std::pow(beta2, static_cast<float>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& value = params[i].tensor->mut();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != value.size())
            throw ContractError("adam_step: state shape mismatch for " + params[i].name);
        const float* g = grads[i].empty() ? nullptr : grads[i].data();
        for (std::size_t j = 0; j < value.size(); ++j) {
            const float gj = g ? g[j] : 0.0f;
            m[j] = beta1 * m[j] + (1.0f - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0f - beta2) * gj * gj;
            const float mhat = m[j] / bc1;
            const float vhat = v[j] / bc2;
            value[j] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TraceRow {
    std::int64_t step;
    LossBreakdown loss;
};

struct TrainResult {
    std::vector<TraceRow> trace;
    bool diverged = false;
    std::string message;
    int epochs_completed = 0;
};

namespace detail {

// Bounded keep-last buffer of row vectors feeding dead-code revival.
class RecentRows {
public:
    RecentRows(int dim, std::size_t capacity) : dim_(dim), capacity_(capacity) {}

    void push(const float* row) {
        rows_.emplace_back(row, row + dim_);
        if (rows_.size() > capacity_) rows_.pop_front();
    }
    void push_tensor_rows(const Tensor& t, std::size_t max_rows) {
        const std::size_t rows = t.numel() / static_cast<std::size_t>(dim_);
        const std::size_t take = std::min(rows, max_rows);
        for (std::size_t r = 0; r < take; ++r)
            push(t.data() + r * static_cast<std::size_t>(dim_));
    }
    bool empty() const { return rows_.empty(); }
    Tensor as_tensor() const {
        Tensor out(Shape{static_cast<int>(rows_.size()), dim_});
        auto& o = out.mut();
        for (std::size_t r = 0; r < rows_.size(); ++r)
            std::memcpy(o.data() + r * static_cast<std::size_t>(dim_), rows_[r].data(),
                        static_cast<std::size_t>(dim_) * sizeof(float));
        return out;
    }

private:
    int dim_;
    std::size_t capacity_;
    std::deque<std::vector<float>> rows_;
};

}  // namespace detail

// k-means++ seeding of all codebooks from leading shuffled training samples.
// Pulls in as many samples as the largest codebook needs (the prototype book
// sees one vector per sample, the pattern books one per position).
inline void init_codebooks(VqFlowModel& model, const std::vector<FeatureSample>& train,
                           std::uint64_t seed) {
    const ModelConfig& cfg = model.cfg;
    if (model.codebooks_ready || !(cfg.cpc || cfg.cspc)) {
        model.codebooks_ready = true;
        return;
    }
    Rng order_rng = Rng(seed).fork(0x1417ULL);
    std::vector<int> order = random_permutation(static_cast<int>(train.size()), order_rng);

    int needed = 1;
    if (cfg.cpc) needed = std::max(needed, cfg.k_cp);
    if (cfg.cspc) {
        int min_positions = cfg.spatial.back() * cfg.spatial.back();
        needed = std::max(needed, (cfg.k_csp + min_positions - 1) / min_positions);
    }
    const int take = std::min<int>(static_cast<int>(train.size()), std::max(needed, 1));

    if (cfg.cpc) {
        Tensor pool(Shape{take, cfg.d_cp});
        auto& pd = pool.mut();
        for (int s = 0; s < take; ++s) {
            const FeatureSample& smp = train[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
            Tensor y = model.cpc_mlp(avg_pool_spatial(smp.features.back()));
            std::memcpy(pd.data() + static_cast<std::size_t>(s) * static_cast<std::size_t>(cfg.d_cp),
                        y.data(), static_cast<std::size_t>(cfg.d_cp) * sizeof(float));
        }
        Rng r = Rng(seed).fork(0x2718ULL);
        model.cpc_book.codewords = codebook_init(pool, cfg.k_cp, r);
        model.cpc_book.reset_usage();
    }

    if (cfg.cspc) {
        for (int i = 0; i < cfg.scales; ++i) {
            detail::RecentRows rows(cfg.d_csp(), static_cast<std::size_t>(8) *
                                                     static_cast<std::size_t>(cfg.k_csp));
            for (int s = 0; s < take; ++s) {
                const FeatureSample& smp =
                    train[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
                Tensor y_hat;
                if (cfg.cpc) {
                    CpcResult c = cpc_encode(smp.features.back(), model.cpc_mlp, model.cpc_book);
                    y_hat = detach(c.y_hat);
                }
                Tensor h_prime = linear(model.proj_w[static_cast<std::size_t>(i)],
                                        model.proj_b[static_cast<std::size_t>(i)],
                                        smp.features[static_cast<std::size_t>(i)]);
                Tensor pe = cfg.pe ? model.pe_tables[static_cast<std::size_t>(i)] : Tensor();
                Tensor cond;
                if (pe.defined() && y_hat.defined())
                    cond = concat_channels(pe, tile_spatial(y_hat, h_prime.dim(0), h_prime.dim(1)));
                else if (pe.defined())
                    cond = pe;
                else if (y_hat.defined())
                    cond = tile_spatial(y_hat, h_prime.dim(0), h_prime.dim(1));
                Tensor residual = cond.defined() ? sub(h_prime, cond) : h_prime;
                rows.push_tensor_rows(residual, residual.numel() / static_cast<std::size_t>(cfg.d_csp()));
            }
            Tensor pool = rows.as_tensor();
            Rng r = Rng(seed).fork(0x3141ULL + static_cast<std::uint64_t>(i));
            model.cspc_books[static_cast<std::size_t>(i)].codewords =
                codebook_init(pool, cfg.k_csp, r);
            model.cspc_books[static_cast<std::size_t>(i)].reset_usage();
        }
    }
    model.reset_codebook_usage();
    model.codebooks_ready = true;
}

// End-to-end optimization. Deterministic given (model seed, config, data):
// seeded shuffling, lazy codebook seeding before the first gradient step,
// dead-code revival at every epoch end, loss trace per step. On divergence
// the parameters roll back to the last completed epoch.
inline TrainResult train(VqFlowModel& model, const std::vector<FeatureSample>& train_set,
                         const TrainConfig& tc,
                         const std::function<void(int, VqFlowModel&)>& checkpoint_sink = {}) {
    for (const auto& s : train_set)
        if (s.anomalous)
            throw ContractError("train: unsupervised contract violated, anomalous sample " + s.id);

    TrainResult result;
    if (tc.epochs <= 0 || train_set.empty()) return result;

    init_codebooks(model, train_set, tc.seed);

    auto params = model.params();
    AdamState adam;
    std::int64_t step = 0;

    // rollback snapshot (copy-on-write, cheap)
    auto snapshot = [&]() {
        std::vector<Tensor> snap;
        snap.reserve(params.size());
        for (auto& p : params) snap.push_back(detach(*p.tensor));
        return snap;
    };
    auto restore = [&](const std::vector<Tensor>& snap) {
        for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = snap[i];
    };
    std::vector<Tensor> last_good = snapshot();

    const std::size_t csp_buffer_cap = static_cast<std::size_t>(4) *
                                       static_cast<std::size_t>(std::max(model.cfg.k_csp, 1));
    std::vector<detail::RecentRows> recent_csp;
    if (model.cfg.cspc)
        for (int i = 0; i < model.cfg.scales; ++i)
            recent_csp.emplace_back(model.cfg.d_csp(), csp_buffer_cap);
    detail::RecentRows recent_cpc(model.cfg.d_cp > 0 ? model.cfg.d_cp : 1,
                                  static_cast<std::size_t>(4) *
                                      static_cast<std::size_t>(std::max(model.cfg.k_cp, 1)));

    for (int epoch = 0; epoch < tc.epochs; ++epoch) {
        Rng shuffle_rng = Rng(tc.seed).fork(0x51AFULL + static_cast<std::uint64_t>(epoch));
        std::vector<int> order = random_permutation(static_cast<int>(train_set.size()), shuffle_rng);

        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(tc.batch_size)) {
            std::vector<FeatureSample> batch;
            for (std::size_t k = start;
                 k < std::min(order.size(), start + static_cast<std::size_t>(tc.batch_size)); ++k)
                batch.push_back(train_set[static_cast<std::size_t>(order[k])]);

            try {
                Tape tape;
                model.register_params(tape);
                std::vector<ModelForward> fwds;
                auto [bd, total] = unified_loss(model, batch, tc, &fwds);
                tape.backward(total);

                std::vector<std::vector<float>> grads(params.size());
                for (std::size_t i = 0; i < params.size(); ++i) {
                    auto g = tape.grad(*params[i].tensor);
                    grads[i].assign(g.begin(), g.end());
                }
                if (tc.clip_norm > 0.0f) {
                    double sq = 0.0;
                    for (const auto& g : grads)
                        for (float v : g) sq += static_cast<double>(v) * v;
                    const double norm = std::sqrt(sq);
                    if (norm > tc.clip_norm) {
                        const float scale = static_cast<float>(tc.clip_norm / norm);
                        for (auto& g : grads)
                            for (float& v : g) v *= scale;
                    }
                }
                adam_step(params, grads, adam, tc.learning_rate, tc.adam_beta1, tc.adam_beta2,
                          tc.adam_eps);

                // feed revival buffers from this batch
                for (const auto& fwd : fwds)
                    if (model.cfg.cpc && fwd.y.defined()) recent_cpc.push(fwd.y.data());
                result.trace.push_back({step, bd});
                ++step;
            } catch (const NumericError& e) {
                restore(last_good);
                result.diverged = true;
                result.message = e.what();
                result.epochs_completed = epoch;
                return result;
            }
        }

        // dead-code revival from recent quantizer inputs
        if (model.cfg.cpc && !recent_cpc.empty()) {
            Rng r = Rng(tc.seed).fork(0xDEADULL + static_cast<std::uint64_t>(epoch));
            revive_dead_codes(model.cpc_book, recent_cpc.as_tensor(), tc.revival_threshold, r);
        }
        if (model.cfg.cspc) {
            // collect residual rows from a few samples of this epoch's order
            const int probe = std::min<int>(4, static_cast<int>(train_set.size()));
            for (int i = 0; i < model.cfg.scales; ++i) {
                for (int s = 0; s < probe; ++s) {
                    const FeatureSample& smp =
                        train_set[static_cast<std::size_t>(order[static_cast<std::size_t>(s)])];
                    Tensor y_hat;
                    if (model.cfg.cpc) {
                        CpcResult c =
                            cpc_encode(smp.features.back(), model.cpc_mlp, model.cpc_book);
                        y_hat = detach(c.y_hat);
                    }
                    Tensor h_prime = linear(model.proj_w[static_cast<std::size_t>(i)],
                                            model.proj_b[static_cast<std::size_t>(i)],
                                            smp.features[static_cast<std::size_t>(i)]);
                    Tensor pe = model.cfg.pe ? model.pe_tables[static_cast<std::size_t>(i)] : Tensor();
                    Tensor cond;
                    if (pe.defined() && y_hat.defined())
                        cond = concat_channels(pe, tile_spatial(y_hat, h_prime.dim(0), h_prime.dim(1)));
                    else if (pe.defined())
                        cond = pe;
                    else if (y_hat.defined())
                        cond = tile_spatial(y_hat, h_prime.dim(0), h_prime.dim(1));
                    Tensor residual = cond.defined() ? sub(h_prime, cond) : h_prime;
                    recent_csp[static_cast<std::size_t>(i)].push_tensor_rows(
                        residual, residual.numel() / static_cast<std::size_t>(model.cfg.d_csp()));
                }
                if (!recent_csp[static_cast<std::size_t>(i)].empty()) {
                    Rng r = Rng(tc.seed).fork(0xBEEF00ULL + static_cast<std::uint64_t>(epoch) * 16 +
                                              static_cast<std::uint64_t>(i));
                    revive_dead_codes(model.cspc_books[static_cast<std::size_t>(i)],
                                      recent_csp[static_cast<std::size_t>(i)].as_tensor(),
                                      tc.revival_threshold, r);
                }
            }
        }

        last_good = snapshot();
        result.epochs_completed = epoch + 1;
        if (checkpoint_sink && tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0)
            checkpoint_sink(epoch + 1, model);
    }
    return result;
}

// Loss trace CSV: step, per-branch flow NLL, prototype loss, per-scale
// pattern losses, total. Floats printed with 9 significant digits
// (round-trip exact for float32).
inline std::string trace_csv(const std::vector<TraceRow>& trace, int scales) {
    std::string out = "step";
    for (int i = 1; i <= scales; ++i) out += ",l_f_" + std::to_string(i);
    out += ",l_qcp";
    for (int i = 1; i <= scales; ++i) out += ",l_qcsp_" + std::to_string(i);
    out += ",total\n";
    char buf[64];
    auto put = [&](float v) {
        std::snprintf(buf, sizeof(buf), ",%.9g", static_cast<double>(v));
        out += buf;
    };
    for (const auto& row : trace) {
        out += std::to_string(row.step);
        for (float v : row.loss.l_flow) put(v);
        put(row.loss.l_qcp);
        for (float v : row.loss.l_qcsp) put(v);
        put(row.loss.total);
        out += "\n";
    }
    return out;
}

}  // namespace vqflow
