// net.hpp - small fully-connected building blocks
#pragma once

#include "vqflow/tensor.hpp"

namespace vqflow {

inline void init_uniform(Tensor& t, Rng& rng, float scale) {
    auto& v = t.mut();
    for (auto& x : v) x = rng.uniform(-scale, scale);
}

// Two linear layers with a tanh between them. Applies over the trailing
// dimension, so the same block serves vectors and [H,W,D] feature maps
// (where it acts as a pair of 1x1 convolutions).
struct TwoLayer {
    Tensor w1, b1, w2, b2;

    static TwoLayer make(int d_in, int d_hidden, int d_out, Rng& rng, bool zero_last) {
        TwoLayer net;
        net.w1 = Tensor(Shape{d_hidden, d_in});
        net.b1 = Tensor(Shape{d_hidden});
        net.w2 = Tensor(Shape{d_out, d_hidden});
        net.b2 = Tensor(Shape{d_out});
        init_uniform(net.w1, rng, 1.0f / std::sqrt(static_cast<float>(d_in)));
        if (!zero_last)
            init_uniform(net.w2, rng, 1.0f / std::sqrt(static_cast<float>(d_hidden)));
        return net;
    }

    Tensor operator()(const Tensor& x) const { return linear(w2, b2, tanh(linear(w1, b1, x))); }

    int d_in() const { return w1.dim(1); }
    int d_out() const { return w2.dim(0); }
};

}  // namespace vqflow
