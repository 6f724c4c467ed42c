// model.hpp - the full VQ-Flow model: flow branches, hierarchical codebooks,
// per-scale projections, positional tables and the Gaussian heads, assembled
// from an architecture config whose component flags select the ablation
// variants.
#pragma once

#include "vqflow/codebook.hpp"
#include "vqflow/flow.hpp"
#include "vqflow/gaussian.hpp"
#include "vqflow/types.hpp"

namespace vqflow {

struct ModelConfig {
    int scales = 3;
    std::vector<int> channels = {16, 32, 64};
    std::vector<int> spatial = {32, 16, 8};
    int blocks_per_branch = 8;
    int d_cp = 256;
    int d_pe = 32;
    int k_cp = 32;
    int k_csp = 512;
    int mlp_hidden = 64;
    int head_hidden = 64;
    bool cadm = true;
    bool cpc = true;
    bool cspc = true;
    bool pe = true;
    std::uint64_t seed = 0;
    float clamp = 2.0f;
    float sigma_eps = 1e-3f;
    float commitment = 0.25f;

    // channel width of the projected pattern maps and their codebooks
    int d_csp() const { return d_cp + (cspc && pe ? d_pe : 0); }

    // channel width of the flow condition (0 = unconditional)
    int cond_dim() const { return cspc ? d_csp() : (cpc ? d_cp : 0); }

    // width of the shared mu/sigma heads: the widest branch
    int d_z() const {
        int m = 0;
        for (int c : channels) m = std::max(m, c);
        return m;
    }

    bool uses_prototype_mlp() const { return cpc || cadm; }

    void validate() const {
        if (scales < 1) throw ConfigError("scales must be >= 1");
        if (static_cast<int>(channels.size()) != scales ||
            static_cast<int>(spatial.size()) != scales)
            throw ConfigError("channels/spatial lists must have one entry per scale (scales=" +
                              std::to_string(scales) + ", channels=" +
                              std::to_string(channels.size()) + ", spatial=" +
                              std::to_string(spatial.size()) + ")");
        for (int c : channels)
            if (c < 2) throw ConfigError("branch channels must be >= 2, got " + std::to_string(c));
        for (int s : spatial)
            if (s < 1) throw ConfigError("spatial extent must be >= 1, got " + std::to_string(s));
        if (blocks_per_branch < 1) throw ConfigError("blocks_per_branch must be >= 1");
        if (uses_prototype_mlp() && d_cp < 1) throw ConfigError("d_cp must be >= 1");
        if (cpc && k_cp < 1) throw ConfigError("k_cp must be >= 1");
        if (cspc && k_csp < 1) throw ConfigError("k_csp must be >= 1");
        if (cspc && pe && (d_pe < 2 || d_pe % 2 != 0))
            throw ConfigError("d_pe must be positive even when positional embedding is enabled, got " +
                              std::to_string(d_pe));
    }
};

// Per-sample forward results: everything the losses and the scorer need.
struct BranchForward {
    Tensor z;        // [H,W,D_i]
    Tensor logdet;   // [H,W]
    Tensor logprob;  // [H,W] under the branch's base density
    Tensor l_qcsp;   // scalar; undefined when the pattern codebook is off
};

struct ModelForward {
    Tensor y;      // [D_cp] continuous projection (defined when CPC or CADM on)
    Tensor y_hat;  // [D_cp] assigned prototype (defined when CPC on)
    int proto_index = -1;
    Tensor l_qcp;  // scalar; undefined when CPC off
    std::vector<BranchForward> branches;
};

class VqFlowModel {
public:
    ModelConfig cfg;
    std::vector<Tensor> proj_w, proj_b;  // per-scale projection D_i -> D_csp
    TwoLayer cpc_mlp;                    // pooled-feature projection to D_cp
    Codebook cpc_book;
    std::vector<Codebook> cspc_books;  // one per scale
    std::vector<Tensor> pe_tables;     // fixed, not parameters
    GaussianHeads heads;
    std::vector<FlowBranch> branches;
    bool codebooks_ready = false;  // flipped once k-means++ seeding ran

    static VqFlowModel build(const ModelConfig& cfg) {
        cfg.validate();
        VqFlowModel m;
        m.cfg = cfg;
        Rng root(cfg.seed);

        if (cfg.cspc) {
            Rng r = root.fork(1);
            for (int i = 0; i < cfg.scales; ++i) {
                Tensor w(Shape{cfg.d_csp(), cfg.channels[static_cast<std::size_t>(i)]});
                init_uniform(w, r,
                             1.0f / std::sqrt(static_cast<float>(
                                       cfg.channels[static_cast<std::size_t>(i)])));
                m.proj_w.push_back(std::move(w));
                m.proj_b.push_back(Tensor(Shape{cfg.d_csp()}));
            }
            for (int i = 0; i < cfg.scales; ++i) {
                Codebook cb(cfg.k_csp, cfg.d_csp());
                Rng cr = root.fork(100 + static_cast<std::uint64_t>(i));
                init_uniform(cb.codewords, cr, 0.5f);
                m.cspc_books.push_back(std::move(cb));
            }
            if (cfg.pe)
                for (int i = 0; i < cfg.scales; ++i)
                    m.pe_tables.push_back(positional_embedding(
                        cfg.spatial[static_cast<std::size_t>(i)],
                        cfg.spatial[static_cast<std::size_t>(i)], cfg.d_pe));
        }
        if (cfg.uses_prototype_mlp()) {
            Rng r = root.fork(2);
            m.cpc_mlp = TwoLayer::make(cfg.channels.back(), cfg.mlp_hidden, cfg.d_cp, r,
                                       /*zero_last=*/false);
        }
        if (cfg.cpc) {
            m.cpc_book = Codebook(cfg.k_cp, cfg.d_cp);
            Rng r = root.fork(3);
            init_uniform(m.cpc_book.codewords, r, 0.5f);
        }
        if (cfg.cadm) {
            Rng r = root.fork(4);
            m.heads = GaussianHeads::make(cfg.d_cp, cfg.head_hidden, cfg.d_z(), r, cfg.sigma_eps);
        }
        for (int i = 0; i < cfg.scales; ++i) {
            Rng r = root.fork(1000 + static_cast<std::uint64_t>(i));
            m.branches.push_back(FlowBranch::make(cfg.channels[static_cast<std::size_t>(i)],
                                                  cfg.cond_dim(), cfg.blocks_per_branch,
                                                  cfg.clamp, r));
        }
        return m;
    }

    // Fixed registry order; checkpoints and the optimizer both iterate this.
    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        for (std::size_t i = 0; i < proj_w.size(); ++i) {
            out.push_back({"proj." + std::to_string(i) + ".w", &proj_w[i]});
            out.push_back({"proj." + std::to_string(i) + ".b", &proj_b[i]});
        }
        if (cfg.uses_prototype_mlp()) {
            out.push_back({"cpc.mlp.w1", &cpc_mlp.w1});
            out.push_back({"cpc.mlp.b1", &cpc_mlp.b1});
            out.push_back({"cpc.mlp.w2", &cpc_mlp.w2});
            out.push_back({"cpc.mlp.b2", &cpc_mlp.b2});
        }
        if (cfg.cpc) out.push_back({"cpc.codewords", &cpc_book.codewords});
        for (std::size_t i = 0; i < cspc_books.size(); ++i)
            out.push_back({"cspc." + std::to_string(i) + ".codewords", &cspc_books[i].codewords});
        if (cfg.cadm) {
            out.push_back({"heads.mu.w1", &heads.mu_net.w1});
            out.push_back({"heads.mu.b1", &heads.mu_net.b1});
            out.push_back({"heads.mu.w2", &heads.mu_net.w2});
            out.push_back({"heads.mu.b2", &heads.mu_net.b2});
            out.push_back({"heads.sigma.w1", &heads.sigma_net.w1});
            out.push_back({"heads.sigma.b1", &heads.sigma_net.b1});
            out.push_back({"heads.sigma.w2", &heads.sigma_net.w2});
            out.push_back({"heads.sigma.b2", &heads.sigma_net.b2});
        }
        for (std::size_t i = 0; i < branches.size(); ++i)
            for (std::size_t k = 0; k < branches[i].blocks.size(); ++k) {
                auto& blk = branches[i].blocks[k];
                std::string p = "branch." + std::to_string(i) + ".block." + std::to_string(k);
                out.push_back({p + ".w1", &blk.w1});
                out.push_back({p + ".b1", &blk.b1});
                out.push_back({p + ".w2", &blk.w2});
                out.push_back({p + ".b2", &blk.b2});
            }
        return out;
    }

    void register_params(Tape& tape) {
        for (auto& p : params()) tape.watch(*p.tensor);
    }

    void check_sample_shapes(const FeatureSample& s) const {
        if (s.scales() != cfg.scales)
            throw ContractError("sample " + s.id + " has " + std::to_string(s.scales()) +
                                " scales, model expects " + std::to_string(cfg.scales));
        for (int i = 0; i < cfg.scales; ++i) {
            const Tensor& f = s.features[static_cast<std::size_t>(i)];
            if (f.rank() != 3 || f.dim(0) != cfg.spatial[static_cast<std::size_t>(i)] ||
                f.dim(1) != cfg.spatial[static_cast<std::size_t>(i)] ||
                f.dim(2) != cfg.channels[static_cast<std::size_t>(i)])
                throw ContractError("sample " + s.id + " scale " + std::to_string(i) + " shape " +
                                    shape_str(f.shape()) + " vs model config");
        }
    }

    // Full per-sample pipeline. With every flag off this is exactly the
    // unconditional flow with a standard normal target. A QuantFreeze turns
    // the quantization sites into their smooth training surrogate for
    // gradient checking.
    ModelForward forward_sample(const FeatureSample& sample, QuantFreeze* freeze = nullptr) const {
        check_sample_shapes(sample);
        ModelForward out;

        if (cfg.uses_prototype_mlp()) {
            if (cfg.cpc) {
                CpcResult cpc = cpc_encode(sample.features.back(), cpc_mlp, cpc_book, freeze);
                out.y = cpc.y;
                out.y_hat = cpc.y_hat;
                out.proto_index = cpc.index();
                out.l_qcp = vq_loss(cpc.y, reshape(cpc.quant.codeword_rows, cpc.y.shape()),
                                    cfg.commitment, freeze);
            } else {
                out.y = cpc_mlp(avg_pool_spatial(sample.features.back()));
            }
        }

        // density is conditioned on the assigned prototype when CPC is on,
        // otherwise (CADM without CPC) directly on the continuous projection
        const Tensor& proto_for_density = cfg.cpc ? out.y_hat : out.y;

        out.branches.resize(static_cast<std::size_t>(cfg.scales));
        for (int i = 0; i < cfg.scales; ++i) {
            const Tensor& h = sample.features[static_cast<std::size_t>(i)];
            BranchForward& bf = out.branches[static_cast<std::size_t>(i)];

            Tensor cond;
            if (cfg.cspc) {
                Tensor h_prime = linear(proj_w[static_cast<std::size_t>(i)],
                                        proj_b[static_cast<std::size_t>(i)], h);
                PatternQuantResult pq = cspc_quantize(
                    h_prime, cfg.cpc ? out.y_hat : Tensor(),
                    cfg.pe ? pe_tables[static_cast<std::size_t>(i)] : Tensor(),
                    cspc_books[static_cast<std::size_t>(i)], freeze);
                bf.l_qcsp = vq_loss(pq.residual,
                                    reshape(pq.quant.codeword_rows, pq.residual.shape()),
                                    cfg.commitment, freeze);
                cond = pq.quantized_map;
            } else if (cfg.cpc) {
                cond = tile_spatial(out.y_hat, h.dim(0), h.dim(1));
            }

            auto [z, logdet] = branches[static_cast<std::size_t>(i)].forward(h, cond);
            bf.z = z;
            bf.logdet = logdet;
            if (cfg.cadm) {
                bf.logprob = conditional_logprob(z, proto_for_density, heads);
            } else {
                const int d = z.dim(2);
                bf.logprob =
                    gaussian_logprob(z, Tensor::zeros(Shape{d}), Tensor::full(Shape{d}, 1.0f));
            }
        }
        return out;
    }

    void reset_codebook_usage() const {
        if (cfg.cpc) cpc_book.reset_usage();
        for (const auto& cb : cspc_books) cb.reset_usage();
    }
};

}  // namespace vqflow
