// gaussian.hpp - prototype-conditioned Gaussian base density
#pragma once

#include "vqflow/codebook.hpp"
#include "vqflow/net.hpp"

namespace vqflow {

inline constexpr float kHalfLog2Pi = 0.91893853320467274f;  // 0.5 * log(2*pi)

// Paired mean / deviation networks. Both take a prototype vector and emit a
// per-channel parameter vector; the deviation is softplus(raw) + eps so it
// stays strictly positive. One instance is shared by every flow branch.
struct GaussianHeads {
    TwoLayer mu_net;
    TwoLayer sigma_net;
    float sigma_eps = 1e-3f;

    static GaussianHeads make(int d_in, int d_hidden, int d_out, Rng& rng, float sigma_eps) {
        GaussianHeads heads;
        // zero-initialized output layers: mu = 0, sigma = softplus(0) + eps at start
        heads.mu_net = TwoLayer::make(d_in, d_hidden, d_out, rng, /*zero_last=*/true);
        heads.sigma_net = TwoLayer::make(d_in, d_hidden, d_out, rng, /*zero_last=*/true);
        heads.sigma_eps = sigma_eps;
        return heads;
    }

    int d_out() const { return mu_net.d_out(); }
};

// (mu, sigma) predicted from one prototype vector.
inline std::pair<Tensor, Tensor> prototype_params(const Tensor& c, const GaussianHeads& heads) {
    Tensor mu = heads.mu_net(c);
    Tensor sigma = add_scalar(softplus(heads.sigma_net(c)), heads.sigma_eps);
    return {mu, sigma};
}

namespace detail {
inline void check_sigma_positive(const Tensor& sigma) {
    const float* p = sigma.data();
    for (std::size_t i = 0; i < sigma.numel(); ++i)
        if (!(p[i] > 0.0f))
            throw ContractError("gaussian_logprob: sigma must be positive, got " +
                                std::to_string(p[i]));
}
}  // namespace detail

// Elementwise -0.5*log(2*pi) - log(sigma) - (z - mu)^2 / (2*sigma^2), summed
// over channels. z may be [H,W,D] or a bare [D] vector; mu and sigma are [D]
// (broadcast over positions) or match z exactly.
inline Tensor gaussian_logprob(const Tensor& z, const Tensor& mu, const Tensor& sigma) {
    detail::check_sigma_positive(sigma);
    const bool vector_input = z.rank() == 1;
    Tensor zz = vector_input ? reshape(z, Shape{1, 1, z.dim(0)}) : z;
    if (zz.rank() != 3)
        throw DimensionError("gaussian_logprob: expected [H,W,D] or [D], got " +
                             shape_str(z.shape()));
    const int h = zz.dim(0), w = zz.dim(1), d = zz.dim(2);
    auto lift = [&](const Tensor& t, const char* what) {
        if (t.rank() == 1) {
            if (t.dim(0) != d)
                throw DimensionError(std::string("gaussian_logprob: ") + what + " dim " +
                                     std::to_string(t.dim(0)) + " vs channels " + std::to_string(d));
            return tile_spatial(t, h, w);
        }
        vqflow::detail::check_same_shape("gaussian_logprob", zz, t);
        return t;
    };
    Tensor mu_m = lift(mu, "mu");
    Tensor log_sigma = vqflow::log(lift(sigma, "sigma"));
    Tensor diff = sub(zz, mu_m);
    Tensor quad = mul(mul(diff, diff), exp(mul_scalar(log_sigma, -2.0f)));
    Tensor elem = add_scalar(sub(mul_scalar(quad, -0.5f), log_sigma), -kHalfLog2Pi);
    Tensor per_pos = sum_channels(elem);
    return vector_input ? reshape(per_pos, Shape{1}) : per_pos;
}

// Log-density of z under the Gaussian dedicated to one prototype. The heads
// may be wider than the branch (they are shared across branches); the leading
// `d_channels` components are used.
inline Tensor conditional_logprob(const Tensor& z, const Tensor& prototype,
                                  const GaussianHeads& heads) {
    auto [mu, sigma] = prototype_params(prototype, heads);
    const int d = z.dim(z.rank() - 1);
    if (d > heads.d_out())
        throw DimensionError("conditional_logprob: branch channels " + std::to_string(d) +
                             " exceed head width " + std::to_string(heads.d_out()));
    if (d < heads.d_out()) {
        mu = split_channels(mu, d).first;
        sigma = split_channels(sigma, d).first;
    }
    return gaussian_logprob(z, mu, sigma);
}

// Uniformly weighted mixture over all prototypes:
//   log( (1/K) * sum_k N(z; mu(c_k), sigma(c_k)^2) )
// computed per position with log-sum-exp. Scoring-time alternative; not part
// of the training graph.
inline Tensor mixture_logprob(const Tensor& z, const Codebook& cpc, const GaussianHeads& heads) {
    const int k = cpc.size();
    std::vector<Tensor> comps;
    comps.reserve(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        std::vector<int> idx{c};
        Tensor proto = detach(gather_rows(cpc.codewords, idx));
        proto = reshape(proto, Shape{proto.dim(1)});
        comps.push_back(conditional_logprob(z, proto, heads));
    }
    Tensor out(comps[0].shape());
    auto& o = out.mut();
    const double log_k = std::log(static_cast<double>(k));
    for (std::size_t p = 0; p < out.numel(); ++p) {
        double m = -std::numeric_limits<double>::infinity();
        for (const Tensor& t : comps) m = std::max(m, static_cast<double>(t[p]));
        double acc = 0.0;
        for (const Tensor& t : comps) acc += std::exp(static_cast<double>(t[p]) - m);
        o[p] = static_cast<float>(m + std::log(acc) - log_k);
    }
    return out;
}

}  // namespace vqflow
