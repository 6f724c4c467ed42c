// flow.hpp - conditional affine coupling blocks and flow branches
#pragma once

#include "vqflow/net.hpp"
#include "vqflow/tensor.hpp"

namespace vqflow {

// One affine coupling step. The input is channel-permuted (a fixed,
// seed-derived bijection), split into an untransformed half h_a and a
// transformed half h_b; a two-layer per-position conditioner maps
// (h_a, condition) to per-channel log-scale s and shift t, and
// out_b = h_b * exp(s) + t. The log-scale is soft-clamped,
// s <- alpha * tanh(s / alpha), so |s| stays below alpha. The per-position
// log-determinant is the channel sum of s.
struct CouplingBlock {
    std::vector<int> perm, inv_perm;
    Tensor w1, b1, w2, b2;
    int index = 0;
    int d = 0, d_cond = 0, d_a = 0, d_b = 0;
    float clamp = 2.0f;

    static CouplingBlock make(int d, int d_cond, int index, float clamp, Rng& rng) {
        if (d < 2) throw ConfigError("coupling block needs >= 2 channels, got " + std::to_string(d));
        CouplingBlock blk;
        blk.index = index;
        blk.d = d;
        blk.d_cond = d_cond;
        blk.d_a = d / 2;
        blk.d_b = d - blk.d_a;
        blk.clamp = clamp;
        blk.perm = random_permutation(d, rng);
        blk.inv_perm = invert_permutation(blk.perm);
        const int d_in = blk.d_a + d_cond;
        const int hidden = 2 * d;
        blk.w1 = Tensor(Shape{hidden, d_in});
        blk.b1 = Tensor(Shape{hidden});
        blk.w2 = Tensor(Shape{2 * blk.d_b, hidden});
        blk.b2 = Tensor(Shape{2 * blk.d_b});
        init_uniform(blk.w1, rng, 1.0f / std::sqrt(static_cast<float>(d_in)));
        // zero-initialized output layer: every block starts as the identity
        return blk;
    }

    // (s, t) from the untransformed half and the condition features.
    std::pair<Tensor, Tensor> scale_shift(const Tensor& h_a, const Tensor& cond) const {
        Tensor cin = cond.defined() ? concat_channels(h_a, cond) : h_a;
        Tensor st = linear(w2, b2, tanh(linear(w1, b1, cin)));
        auto [s_raw, t] = split_channels(st, d_b);
        Tensor s = mul_scalar(tanh(mul_scalar(s_raw, 1.0f / clamp)), clamp);
        if (!all_finite(s.data(), s.numel()) || !all_finite(t.data(), t.numel()))
            throw NumericError("non-finite scale/shift in coupling block " + std::to_string(index));
        return {s, t};
    }

    std::pair<Tensor, Tensor> forward(const Tensor& x, const Tensor& cond) const {
        check_input(x, cond);
        Tensor xp = permute_channels(x, perm);
        auto [h_a, h_b] = split_channels(xp, d_a);
        auto [s, t] = scale_shift(h_a, cond);
        Tensor out_b = add(mul(h_b, vqflow::exp(s)), t);
        return {concat_channels(h_a, out_b), sum_channels(s)};
    }

    Tensor inverse(const Tensor& z, const Tensor& cond) const {
        check_input(z, cond);
        auto [z_a, z_b] = split_channels(z, d_a);
        auto [s, t] = scale_shift(z_a, cond);
        Tensor h_b = mul(sub(z_b, t), vqflow::exp(mul_scalar(s, -1.0f)));
        return permute_channels(concat_channels(z_a, h_b), inv_perm);
    }

private:
    void check_input(const Tensor& x, const Tensor& cond) const {
        if (x.rank() != 3 || x.dim(2) != d)
            throw DimensionError("coupling block " + std::to_string(index) + ": input " +
                                 shape_str(x.shape()) + " vs " + std::to_string(d) + " channels");
        const int dc = cond.defined() ? cond.dim(2) : 0;
        if (dc != d_cond)
            throw DimensionError("coupling block " + std::to_string(index) + ": condition " +
                                 std::to_string(dc) + " channels vs configured " +
                                 std::to_string(d_cond));
        if (cond.defined() && (cond.dim(0) != x.dim(0) || cond.dim(1) != x.dim(1)))
            throw DimensionError("coupling block " + std::to_string(index) +
                                 ": condition grid " + shape_str(cond.shape()) + " vs input " +
                                 shape_str(x.shape()));
    }
};

// A branch is a sequence of coupling blocks over one feature scale.
struct FlowBranch {
    std::vector<CouplingBlock> blocks;
    int d_in = 0, d_cond = 0;

    static FlowBranch make(int d_in, int d_cond, int n_blocks, float clamp, Rng& rng) {
        FlowBranch br;
        br.d_in = d_in;
        br.d_cond = d_cond;
        br.blocks.reserve(static_cast<std::size_t>(n_blocks));
        for (int i = 0; i < n_blocks; ++i)
            br.blocks.push_back(CouplingBlock::make(d_in, d_cond, i, clamp, rng));
        return br;
    }

    // z = f_K( ... f_1(h | cond) | cond); total log-determinant per position.
    std::pair<Tensor, Tensor> forward(const Tensor& h, const Tensor& cond) const {
        Tensor cur = h;
        Tensor logdet;
        for (const auto& blk : blocks) {
            auto [next, ld] = blk.forward(cur, cond);
            cur = next;
            logdet = logdet.defined() ? add(logdet, ld) : ld;
        }
        if (!logdet.defined()) logdet = Tensor::zeros(Shape{h.dim(0), h.dim(1)});
        return {cur, logdet};
    }

    Tensor inverse(const Tensor& z, const Tensor& cond) const {
        Tensor cur = z;
        for (std::size_t i = blocks.size(); i-- > 0;) cur = blocks[i].inverse(cur, cond);
        return cur;
    }
};

}  // namespace vqflow
