// Vector-quantization tests. Oracles: exhaustive nearest-neighbor scan,
// per-pixel residual recomputation, cluster-membership checks for seeding,
// direct sine/cosine evaluation for the positional table.
#include <catch2/catch_amalgamated.hpp>

#include "vqflow/codebook.hpp"

using namespace vqflow;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, float lo = -2.0f, float hi = 2.0f) {
    Tensor t(std::move(shape));
    auto& v = t.mut();
    for (auto& x : v) x = rng.uniform(lo, hi);
    return t;
}

// independent exhaustive scan
int nearest_oracle(const Codebook& cb, const float* x) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int c = 0; c < cb.size(); ++c) {
        double acc = 0.0;
        for (int j = 0; j < cb.dim(); ++j) {
            float diff = x[j] - cb.codewords[static_cast<std::size_t>(c * cb.dim() + j)];
            acc += static_cast<double>(diff) * diff;
        }
        if (acc < best_d) {
            best_d = acc;
            best = c;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("quantize_nearest exact match and tie break") {
    Codebook cb(Tensor({2, 2}, {0, 0, 1, 1}));
    {
        Tensor v({2}, {1, 1});
        auto q = quantize_nearest(cb, v);
        CHECK(q.indices[0] == 1);
        CHECK(q.sq_distance[0] == 0.0f);
        CHECK(q.quantized[0] == 1.0f);
    }
    {
        Tensor v({2}, {0.5f, 0.5f});
        auto q = quantize_nearest(cb, v);
        CHECK(q.indices[0] == 0);  // tie, lowest index
        CHECK(q.sq_distance[0] == Catch::Approx(0.5).epsilon(1e-6));
    }
    CHECK_THROWS_AS(quantize_nearest(cb, Tensor({3}, {1, 2, 3})), DimensionError);
}

TEST_CASE("quantize_nearest agrees with exhaustive-scan oracle") {
    Rng rng(0);
    Codebook cb(random_tensor({16, 8}, rng));
    Tensor v = random_tensor({100, 8}, rng);
    auto q = quantize_nearest(cb, v);
    for (int r = 0; r < 100; ++r)
        CHECK(q.indices[static_cast<std::size_t>(r)] == nearest_oracle(cb, v.data() + r * 8));
    // output distance is minimal against every codeword
    for (int r = 0; r < 100; ++r) {
        for (int c = 0; c < cb.size(); ++c) {
            double acc = 0.0;
            for (int j = 0; j < 8; ++j) {
                float diff = v[static_cast<std::size_t>(r * 8 + j)] -
                             cb.codewords[static_cast<std::size_t>(c * 8 + j)];
                acc += static_cast<double>(diff) * diff;
            }
            CHECK(q.sq_distance[static_cast<std::size_t>(r)] <= acc + 1e-5);
        }
    }
}

TEST_CASE("quantize_nearest usage counting and straight-through gradient") {
    Rng rng(3);
    Codebook cb(random_tensor({4, 3}, rng));
    Tensor v = random_tensor({10, 3}, rng);
    cb.reset_usage();
    auto q = quantize_nearest(cb, v);
    std::uint64_t total = 0;
    for (auto c : cb.usage_counts) total += c;
    CHECK(total == 10);

    // straight-through: downstream gradient lands on v, not the codebook
    Tape tape;
    tape.watch(v);
    tape.watch(cb.codewords);
    auto q2 = quantize_nearest(cb, v);
    tape.backward(sum_all(q2.quantized));
    auto gv = tape.grad(v);
    REQUIRE(gv.size() == v.numel());
    for (float g : gv) CHECK(g == 1.0f);
    CHECK(tape.grad(cb.codewords).empty());
}

TEST_CASE("quantization is idempotent") {
    Rng rng(5);
    Codebook cb(random_tensor({8, 4}, rng));
    Tensor v = random_tensor({20, 4}, rng);
    Tensor once = quantize_nearest(cb, v).quantized;
    Tensor twice = quantize_nearest(cb, once).quantized;
    for (std::size_t i = 0; i < once.numel(); ++i) CHECK(once[i] == twice[i]);
}

TEST_CASE("vq_loss values and gradient split") {
    {
        Tensor v({2}, {1, 1});
        CHECK(vq_loss(v, v).value() == 0.0f);
    }
    {
        Tensor v({2}, {1, 1});
        Tensor q({2}, {0, 0});
        CHECK(vq_loss(v, q).value() == 1.0f);  // reported value is the plain MSE
    }
    {
        Rng rng(2);
        Tensor v = random_tensor({8}, rng);
        Tensor q = random_tensor({8}, rng);
        double acc = 0.0;
        for (int i = 0; i < 8; ++i) {
            double d = static_cast<double>(v[static_cast<std::size_t>(i)]) -
                       q[static_cast<std::size_t>(i)];
            acc += d * d;
        }
        CHECK(vq_loss(v, q).value() == Catch::Approx(acc / 8.0).epsilon(1e-5));
        CHECK(vq_loss(v, q).value() >= 0.0f);
    }
    {
        // gradients: codeword side gets full pull, encoder side the commitment fraction
        Tensor v({1}, {1.0f});
        Tensor q({1}, {0.0f});
        Tape tape;
        tape.watch(v);
        tape.watch(q);
        Tensor loss = vq_loss(v, q, 0.25f);
        tape.backward(loss);
        CHECK(tape.grad(q)[0] == Catch::Approx(-2.0).epsilon(1e-6));       // d/dq (q-v)^2
        CHECK(tape.grad(v)[0] == Catch::Approx(0.25 * 2.0).epsilon(1e-6));  // commitment
    }
}

TEST_CASE("cpc_encode exact-match case") {
    // identity-like MLP: w1 = I (tanh ~ identity near 0 is not exact, so use
    // a book built from the actual projection output instead)
    Rng rng(4);
    TwoLayer mlp = TwoLayer::make(3, 8, 2, rng, false);
    Tensor h = Tensor::full({4, 4, 3}, 2.0f);
    Tensor y = mlp(avg_pool_spatial(h));
    Tensor words({2, 2}, {y[0], y[1], y[0] + 5.0f, y[1] + 5.0f});
    Codebook cb(words);
    CpcResult res = cpc_encode(h, mlp, cb);
    CHECK(res.index() == 0);
    CHECK(res.quant.sq_distance[0] == 0.0f);
    CHECK(res.y_hat[0] == res.y[0]);
    CHECK(res.y_hat[1] == res.y[1]);
}

TEST_CASE("cspc reconstruction identity when the book contains every residual") {
    // one codeword, residual field equal to it everywhere
    Tensor word({1, 4}, {0.5f, -0.25f, 1.0f, 0.75f});
    Codebook cb(word);
    Tensor y_hat({2}, {0.1f, 0.2f});
    Tensor pe = positional_embedding(2, 2, 2);
    // h' = condition + codeword at every position -> reconstruction is exact
    Tensor cond = concat_channels(pe, tile_spatial(y_hat, 2, 2));
    Tensor h_prime = add(cond, tile_spatial(reshape(word, Shape{4}), 2, 2));
    auto res = cspc_quantize(h_prime, y_hat, pe, cb);
    for (std::size_t i = 0; i < h_prime.numel(); ++i)
        CHECK(res.quantized_map[i] == Catch::Approx(h_prime[i]).margin(1e-6));
}

TEST_CASE("cspc with zero prototype and zero pe equals capc bitwise") {
    Rng rng(6);
    Codebook cb(random_tensor({8, 5}, rng));
    Tensor h = random_tensor({3, 3, 5}, rng);
    Tensor zero_proto = Tensor::zeros({3});
    Tensor zero_pe = Tensor::zeros({3, 3, 2});
    auto with_zero_cond = cspc_quantize(h, zero_proto, zero_pe, cb);
    auto agnostic = capc_quantize(h, cb);
    REQUIRE(with_zero_cond.quantized_map.numel() == agnostic.quantized_map.numel());
    for (std::size_t i = 0; i < h.numel(); ++i)
        CHECK(with_zero_cond.quantized_map[i] == agnostic.quantized_map[i]);
    CHECK(with_zero_cond.quant.indices == agnostic.quant.indices);
}

TEST_CASE("cspc matches a per-pixel oracle and decomposes into condition + codeword") {
    Rng rng(7);
    Codebook cb(random_tensor({8, 6}, rng));
    Tensor y_hat = random_tensor({4}, rng);
    Tensor pe = positional_embedding(3, 3, 2);
    Tensor h = random_tensor({3, 3, 6}, rng);
    auto res = cspc_quantize(h, y_hat, pe, cb);
    for (int m = 0; m < 3; ++m)
        for (int n = 0; n < 3; ++n) {
            float cond[6], resid[6];
            for (int c = 0; c < 2; ++c)
                cond[c] = pe[static_cast<std::size_t>((m * 3 + n) * 2 + c)];
            for (int c = 0; c < 4; ++c) cond[2 + c] = y_hat[static_cast<std::size_t>(c)];
            for (int c = 0; c < 6; ++c)
                resid[c] = h[static_cast<std::size_t>((m * 3 + n) * 6 + c)] - cond[c];
            int idx = nearest_oracle(cb, resid);
            CHECK(res.quant.indices[static_cast<std::size_t>(m * 3 + n)] == idx);
            for (int c = 0; c < 6; ++c) {
                // quantized residual rows are bitwise codewords
                CHECK(res.quant.quantized[static_cast<std::size_t>((m * 3 + n) * 6 + c)] ==
                      cb.codewords[static_cast<std::size_t>(idx * 6 + c)]);
                // and the output is exactly condition (+) codeword in float arithmetic
                CHECK(res.quantized_map[static_cast<std::size_t>((m * 3 + n) * 6 + c)] ==
                      cond[c] + cb.codewords[static_cast<std::size_t>(idx * 6 + c)]);
            }
        }
}

TEST_CASE("cspc channel alignment violations name the dims") {
    Rng rng(8);
    Codebook cb(random_tensor({4, 6}, rng));
    Tensor h = random_tensor({2, 2, 6}, rng);
    Tensor bad_proto = random_tensor({3}, rng);  // 3 + 2 != 6
    Tensor pe = positional_embedding(2, 2, 2);
    try {
        cspc_quantize(h, bad_proto, pe, cb);
        FAIL("expected ContractError");
    } catch (const ContractError& e) {
        std::string msg = e.what();
        CHECK(msg.find("D_csp=6") != std::string::npos);
        CHECK(msg.find("D_cp=3") != std::string::npos);
        CHECK(msg.find("D_PE=2") != std::string::npos);
    }
}

TEST_CASE("capc single codeword collapses everything; identity book is identity") {
    Rng rng(9);
    {
        Codebook cb(random_tensor({1, 4}, rng));
        Tensor h = random_tensor({3, 3, 4}, rng);
        auto res = capc_quantize(h, cb);
        for (int p = 0; p < 9; ++p)
            for (int c = 0; c < 4; ++c)
                CHECK(res.quantized_map[static_cast<std::size_t>(p * 4 + c)] ==
                      cb.codewords[static_cast<std::size_t>(c)]);
    }
    {
        Tensor h = random_tensor({2, 2, 3}, rng);
        Tensor words(Shape{4, 3}, std::vector<float>(h.data(), h.data() + 12));
        Codebook cb(words);
        auto res = capc_quantize(h, cb);
        for (std::size_t i = 0; i < h.numel(); ++i) CHECK(res.quantized_map[i] == h[i]);
    }
}

TEST_CASE("codebook_init: N == K yields a permutation of the samples") {
    Rng data_rng(10);
    Tensor samples = random_tensor({6, 3}, data_rng);
    Rng rng(11);
    Tensor words = codebook_init(samples, 6, rng);
    std::vector<bool> used(6, false);
    for (int c = 0; c < 6; ++c) {
        bool matched = false;
        for (int s = 0; s < 6; ++s) {
            if (used[static_cast<std::size_t>(s)]) continue;
            bool eq = true;
            for (int j = 0; j < 3; ++j)
                eq &= words[static_cast<std::size_t>(c * 3 + j)] ==
                      samples[static_cast<std::size_t>(s * 3 + j)];
            if (eq) {
                used[static_cast<std::size_t>(s)] = true;
                matched = true;
                break;
            }
        }
        CHECK(matched);
    }
}

TEST_CASE("codebook_init: one codeword per well-separated cluster") {
    // 4 clusters far apart, 10 points each
    Rng rng(12);
    std::vector<float> centers = {0, 0, 20, 0, 0, 20, 20, 20};
    Tensor samples({40, 2});
    auto& sd = samples.mut();
    for (int i = 0; i < 40; ++i) {
        int c = i % 4;
        sd[static_cast<std::size_t>(i * 2)] = centers[static_cast<std::size_t>(c * 2)] + rng.normal() * 0.5f;
        sd[static_cast<std::size_t>(i * 2 + 1)] =
            centers[static_cast<std::size_t>(c * 2 + 1)] + rng.normal() * 0.5f;
    }
    Rng seed_rng(13);
    Tensor words = codebook_init(samples, 4, seed_rng);
    // membership oracle: each codeword within radius of exactly one center
    std::vector<int> hit(4, 0);
    for (int c = 0; c < 4; ++c) {
        for (int k = 0; k < 4; ++k) {
            float dx = words[static_cast<std::size_t>(c * 2)] - centers[static_cast<std::size_t>(k * 2)];
            float dy = words[static_cast<std::size_t>(c * 2 + 1)] -
                       centers[static_cast<std::size_t>(k * 2 + 1)];
            if (std::sqrt(dx * dx + dy * dy) < 3.0f) hit[static_cast<std::size_t>(k)] += 1;
        }
    }
    for (int k = 0; k < 4; ++k) CHECK(hit[static_cast<std::size_t>(k)] == 1);
}

TEST_CASE("codebook_init rejects N < K") {
    Rng rng(14);
    Tensor samples = random_tensor({3, 2}, rng);
    CHECK_THROWS_AS(codebook_init(samples, 4, rng), ContractError);
}

TEST_CASE("revive_dead_codes") {
    Rng rng(15);
    {
        Codebook cb(random_tensor({3, 2}, rng));
        Tensor recent = random_tensor({5, 2}, rng);
        for (auto& u : cb.usage_counts) u = 10;
        Tensor before = cb.codewords;
        CHECK(revive_dead_codes(cb, recent, 1, rng) == 0);
        for (std::size_t i = 0; i < before.numel(); ++i) CHECK(cb.codewords[i] == before[i]);
        for (auto u : cb.usage_counts) CHECK(u == 0);  // counters reset
    }
    {
        Codebook cb(random_tensor({3, 2}, rng));
        Tensor recent = random_tensor({5, 2}, rng);
        cb.usage_counts = {10, 0, 10};
        CHECK(revive_dead_codes(cb, recent, 1, rng) == 1);
        bool found = false;
        for (int r = 0; r < 5; ++r)
            found |= (cb.codewords[2] == recent[static_cast<std::size_t>(r * 2)] &&
                      cb.codewords[3] == recent[static_cast<std::size_t>(r * 2 + 1)]);
        CHECK(found);
    }
}

TEST_CASE("positional embedding: deterministic, position-only, matches closed form") {
    Tensor a = positional_embedding(4, 4, 4);
    Tensor b = positional_embedding(4, 4, 4);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    // equal (row, col) positions across different tables agree
    Tensor wide = positional_embedding(4, 8, 4);
    for (int c = 0; c < 4; ++c)
        CHECK(a[static_cast<std::size_t>((2 * 4 + 3) * 4 + c)] ==
              wide[static_cast<std::size_t>((2 * 8 + 3) * 4 + c)]);

    // direct sine/cosine evaluation oracle, q = d_pe/2 = 2 channels per axis
    for (int m = 0; m < 4; ++m)
        for (int n = 0; n < 4; ++n) {
            const double w0 = std::pow(10000.0, 0.0);  // j=0: exponent -2*0/2
            double expect[4] = {std::sin(m * w0), std::cos(m * w0), std::sin(n * w0),
                                std::cos(n * w0)};
            for (int c = 0; c < 4; ++c) {
                float v = a[static_cast<std::size_t>((m * 4 + n) * 4 + c)];
                CHECK(v == Catch::Approx(expect[c]).margin(1e-6));
                CHECK(v >= -1.0f);
                CHECK(v <= 1.0f);
            }
        }

    CHECK_THROWS_AS(positional_embedding(4, 4, 3), ContractError);
}
