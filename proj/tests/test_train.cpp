// Training tests: loss aggregation, Adam, the end-to-end loop and the
// full-model gradient check against central finite differences.
#include <catch2/catch_amalgamated.hpp>

#include "vqflow/synth.hpp"
#include "vqflow/train.hpp"

using namespace vqflow;

namespace {

ModelConfig toy_config() {
    ModelConfig cfg;
    cfg.scales = 2;
    cfg.channels = {2, 4};
    cfg.spatial = {4, 2};
    cfg.blocks_per_branch = 2;
    cfg.d_cp = 3;
    cfg.d_pe = 2;
    cfg.k_cp = 2;
    cfg.k_csp = 4;
    cfg.mlp_hidden = 4;
    cfg.head_hidden = 4;
    cfg.seed = 99;
    return cfg;
}

SynthSpec toy_spec() {
    SynthSpec spec;
    spec.classes = 2;
    spec.scales = 2;
    spec.channels = {2, 4};
    spec.spatial = {4, 2};
    spec.train_count = 12;
    spec.test_count = 6;
    spec.patch_min = 1;
    spec.patch_max = 2;
    return spec;
}

TrainConfig quick_train(int epochs, float lr = 1e-2f) {
    TrainConfig tc;
    tc.learning_rate = lr;
    tc.batch_size = 4;
    tc.epochs = epochs;
    tc.seed = 5;
    return tc;
}

}  // namespace

TEST_CASE("train config defaults") {
    TrainConfig tc;
    CHECK(tc.learning_rate == 1e-4f);
    CHECK(tc.batch_size == 16);
    CHECK(tc.epochs == 100);
    CHECK(tc.alpha_for(0) == 1.0f);
    CHECK(tc.beta == 1.0f);
    CHECK(tc.gamma_for(2) == 1.0f);
    CHECK(tc.adam_beta1 == 0.9f);
    CHECK(tc.adam_beta2 == 0.999f);
    CHECK(tc.adam_eps == 1e-8f);
}

TEST_CASE("loss breakdown additivity holds") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    Dataset ds = synth_dataset(toy_spec(), 7);
    init_codebooks(model, ds.train, 5);
    TrainConfig tc = quick_train(1);
    tc.alpha = {0.7f, 1.3f};
    tc.beta = 0.5f;
    tc.gamma = {2.0f, 0.25f};
    auto [bd, total] = unified_loss(model, std::span(ds.train.data(), 4), tc);
    double expect = 0.0;
    for (int i = 0; i < 2; ++i) expect += tc.alpha[static_cast<std::size_t>(i)] * bd.l_flow[static_cast<std::size_t>(i)];
    expect += tc.beta * bd.l_qcp;
    for (int i = 0; i < 2; ++i) expect += tc.gamma[static_cast<std::size_t>(i)] * bd.l_qcsp[static_cast<std::size_t>(i)];
    CHECK(bd.total == Catch::Approx(expect).margin(1e-6));
    CHECK(bd.total == total.value());
}

TEST_CASE("baseline flags reduce the total to the flow terms only") {
    ModelConfig cfg = toy_config();
    cfg.cadm = cfg.cpc = cfg.cspc = cfg.pe = false;
    VqFlowModel model = VqFlowModel::build(cfg);
    Dataset ds = synth_dataset(toy_spec(), 8);
    auto [bd, total] = unified_loss(model, std::span(ds.train.data(), 4), quick_train(1));
    CHECK(bd.l_qcp == 0.0f);
    for (float v : bd.l_qcsp) CHECK(v == 0.0f);
    CHECK(bd.total ==
          Catch::Approx(static_cast<double>(bd.l_flow[0]) + bd.l_flow[1]).margin(1e-6));
}

TEST_CASE("adam: zero gradient leaves parameters unchanged, moments decay") {
    Tensor p({2}, {1.0f, -2.0f});
    std::vector<ParamRef> params{{"p", &p}};
    AdamState state;
    std::vector<std::vector<float>> grads{{0.0f, 0.0f}};
    adam_step(params, grads, state, 0.1f, 0.9f, 0.999f, 1e-8f);
    CHECK(p[0] == 1.0f);
    CHECK(p[1] == -2.0f);
    CHECK(state.step == 1);

    // decay after a non-zero step
    grads[0] = {1.0f, 1.0f};
    adam_step(params, grads, state, 0.1f, 0.9f, 0.999f, 1e-8f);
    float m_after = state.m[0][0];
    grads[0] = {0.0f, 0.0f};
    adam_step(params, grads, state, 0.1f, 0.9f, 0.999f, 1e-8f);
    CHECK(state.m[0][0] == Catch::Approx(0.9f * m_after).epsilon(1e-6));
}

TEST_CASE("adam single-scalar hand-rolled first step") {
    Tensor p({1}, {1.0f});
    std::vector<ParamRef> params{{"p", &p}};
    AdamState state;
    std::vector<std::vector<float>> grads{{1.0f}};
    const float lr = 0.01f;
    adam_step(params, grads, state, lr, 0.9f, 0.999f, 1e-8f);
    // m_hat = v_hat = 1 after bias correction; update = -lr / (1 + eps)
    CHECK(p[0] == Catch::Approx(1.0 - 0.01 / (1.0 + 1e-8)).epsilon(1e-6));
}

TEST_CASE("full unified loss gradients match finite differences (all groups)") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    SynthSpec spec = toy_spec();
    spec.noise_sigma = 0.02f;
    spec.signature_scale = 0.5f;
    spec.pattern_amp = 0.3f;
    Dataset ds = synth_dataset(spec, 11);
    init_codebooks(model, ds.train, 3);
    TrainConfig tc = quick_train(1);
    std::span<const FeatureSample> one(ds.train.data(), 1);

    // record the frozen quantization structure at the base point
    QuantFreeze freeze;
    auto [bd0, total0] = unified_loss(model, one, tc, nullptr, &freeze);

    // the smooth surrogate reproduces the production value at the base point
    freeze.rewind();
    auto [bd1, total1] = unified_loss(model, one, tc, nullptr, &freeze);
    CHECK(total1.value() == Catch::Approx(total0.value()).margin(1e-6));

    // production backprop equals surrogate backprop
    auto params = model.params();
    std::vector<std::vector<float>> grad_prod, grad_replay;
    {
        Tape tape;
        model.register_params(tape);
        auto [bd, total] = unified_loss(model, one, tc);
        tape.backward(total);
        for (auto& p : params) {
            auto g = tape.grad(*p.tensor);
            grad_prod.emplace_back(g.begin(), g.end());
            if (grad_prod.back().empty()) grad_prod.back().assign(p.tensor->numel(), 0.0f);
        }
    }
    {
        Tape tape;
        model.register_params(tape);
        freeze.rewind();
        auto [bd, total] = unified_loss(model, one, tc, nullptr, &freeze);
        tape.backward(total);
        for (auto& p : params) {
            auto g = tape.grad(*p.tensor);
            grad_replay.emplace_back(g.begin(), g.end());
            if (grad_replay.back().empty()) grad_replay.back().assign(p.tensor->numel(), 0.0f);
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        INFO(params[i].name);
        REQUIRE(grad_prod[i].size() == grad_replay[i].size());
        for (std::size_t j = 0; j < grad_prod[i].size(); ++j)
            CHECK(grad_prod[i][j] == Catch::Approx(grad_replay[i][j]).margin(1e-6));
    }

    // central differences of the surrogate against analytic gradients
    double err = finite_difference_check(
        [&]() {
            freeze.rewind();
            auto [bd, total] = unified_loss(model, one, tc, nullptr, &freeze);
            return total;
        },
        params, 1e-3f);
    CHECK(err < 1e-3);
}

TEST_CASE("training for zero epochs is a no-op") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    std::vector<Tensor> before;
    for (auto& p : model.params()) before.push_back(detach(*p.tensor));
    Dataset ds = synth_dataset(toy_spec(), 9);
    TrainConfig tc = quick_train(0);
    TrainResult res = train(model, ds.train, tc);
    CHECK(res.trace.empty());
    CHECK_FALSE(model.codebooks_ready);
    auto params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i)
        for (std::size_t j = 0; j < params[i].tensor->numel(); ++j)
            CHECK((*params[i].tensor)[j] == before[i][j]);
}

TEST_CASE("toy training drives the loss down") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    Dataset ds = synth_dataset(toy_spec(), 10);
    TrainConfig tc = quick_train(30, 3e-3f);
    TrainResult res = train(model, ds.train, tc);
    REQUIRE_FALSE(res.diverged);
    REQUIRE(res.trace.size() >= 10);
    // average of the last epoch's steps vs the first epoch's
    auto avg = [&](std::size_t lo, std::size_t hi) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) acc += res.trace[i].loss.total;
        return acc / static_cast<double>(hi - lo);
    };
    CHECK(avg(res.trace.size() - 3, res.trace.size()) < avg(0, 3));
}

TEST_CASE("training rejects anomalous samples") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    Dataset ds = synth_dataset(toy_spec(), 12);
    ds.train[0].anomalous = true;
    CHECK_THROWS_AS(train(model, ds.train, quick_train(1)), ContractError);
}

TEST_CASE("identical seeds give bit-identical traces and parameters") {
    Dataset ds = synth_dataset(toy_spec(), 13);
    auto run = [&] {
        VqFlowModel model = VqFlowModel::build(toy_config());
        TrainConfig tc = quick_train(5, 3e-3f);
        TrainResult res = train(model, ds.train, tc);
        std::vector<float> out;
        for (const auto& row : res.trace) {
            out.push_back(row.loss.total);
            out.push_back(row.loss.l_qcp);
            for (float v : row.loss.l_flow) out.push_back(v);
        }
        for (auto& p : model.params())
            for (std::size_t j = 0; j < p.tensor->numel(); ++j) out.push_back((*p.tensor)[j]);
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("divergence rolls back to the last completed epoch") {
    VqFlowModel model = VqFlowModel::build(toy_config());
    Dataset ds = synth_dataset(toy_spec(), 14);
    TrainConfig sane = quick_train(2, 3e-3f);
    TrainResult ok = train(model, ds.train, sane);
    REQUIRE_FALSE(ok.diverged);
    std::vector<Tensor> after_two;
    for (auto& p : model.params()) after_two.push_back(detach(*p.tensor));

    TrainConfig wild = quick_train(20, 3e8f);
    TrainResult res = train(model, ds.train, wild);
    if (res.diverged) {
        CHECK_FALSE(res.message.empty());
        // parameters equal some epoch-end snapshot, never mid-step garbage
        for (auto& p : model.params())
            for (std::size_t j = 0; j < p.tensor->numel(); ++j)
                CHECK(std::isfinite((*p.tensor)[j]));
    }
}

TEST_CASE("codebook seeding pulls enough samples for large books") {
    ModelConfig cfg = toy_config();
    cfg.k_cp = 8;  // more prototypes than one batch
    VqFlowModel model = VqFlowModel::build(cfg);
    Dataset ds = synth_dataset(toy_spec(), 15);
    init_codebooks(model, ds.train, 4);
    CHECK(model.codebooks_ready);
    // prototypes seeded from data, not the uniform init
    float spread = 0.0f;
    for (std::size_t i = 0; i < model.cpc_book.codewords.numel(); ++i)
        spread = std::max(spread, std::abs(model.cpc_book.codewords[i]));
    CHECK(spread > 0.0f);
}

TEST_CASE("training on matched concept count reduces prototype quantization distance") {
    ModelConfig cfg = toy_config();
    cfg.k_cp = 2;  // equals the synthetic class count
    VqFlowModel model = VqFlowModel::build(cfg);
    Dataset ds = synth_dataset(toy_spec(), 16);

    auto mean_dist = [&] {
        double acc = 0.0;
        for (const auto& s : ds.train) {
            CpcResult r = cpc_encode(s.features.back(), model.cpc_mlp, model.cpc_book);
            acc += r.quant.sq_distance[0];
        }
        return acc / static_cast<double>(ds.train.size());
    };
    const double step0 = mean_dist();  // as built, before any training

    TrainConfig tc = quick_train(40, 2e-4f);
    TrainResult res = train(model, ds.train, tc);
    REQUIRE_FALSE(res.diverged);
    CHECK(mean_dist() < step0);
}
