// Scoring and evaluation tests. Oracles: exhaustive pairwise AUROC counting
// and Monte Carlo noise baselines.
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "vqflow/io.hpp"
#include "vqflow/scoring.hpp"
#include "vqflow/synth.hpp"
#include "vqflow/train.hpp"

using namespace vqflow;
namespace fs = std::filesystem;

namespace {

// exhaustive pairwise comparison, ties half
double auroc_oracle(std::span<const double> scores, std::span<const int> labels) {
    double wins = 0.0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!labels[i]) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j]) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

ModelConfig small_model_config() {
    ModelConfig cfg;
    cfg.scales = 2;
    cfg.channels = {4, 8};
    cfg.spatial = {8, 4};
    cfg.blocks_per_branch = 2;
    cfg.d_cp = 3;
    cfg.d_pe = 2;
    cfg.k_cp = 2;
    cfg.k_csp = 4;
    cfg.mlp_hidden = 4;
    cfg.head_hidden = 4;
    cfg.seed = 17;
    return cfg;
}

SynthSpec small_spec() {
    SynthSpec spec;
    spec.classes = 2;
    spec.scales = 2;
    spec.channels = {4, 8};
    spec.spatial = {8, 4};
    spec.train_count = 8;
    spec.test_count = 6;
    spec.patch_min = 2;
    spec.patch_max = 3;
    return spec;
}

}  // namespace

TEST_CASE("auroc trivial cases") {
    {
        std::vector<double> s{0.9, 0.8, 0.1, 0.2};
        std::vector<int> l{1, 1, 0, 0};
        CHECK(auroc(s, l) == 1.0);
    }
    {
        std::vector<double> s{0.5, 0.5, 0.5, 0.5};
        std::vector<int> l{1, 0, 1, 0};
        CHECK(auroc(s, l) == 0.5);
    }
    {
        std::vector<double> s{0.8, 0.3, 0.5, 0.1};
        std::vector<int> l{1, 1, 0, 0};
        CHECK(auroc(s, l) == 0.75);
    }
    {
        std::vector<double> s{0.8, 0.3};
        std::vector<int> l{1, 1};
        CHECK_THROWS_AS(auroc(s, l), ContractError);
    }
}

TEST_CASE("auroc matches exhaustive pairwise counting on random sets") {
    Rng rng(1);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 10 + static_cast<int>(rng.next_below(60));
        std::vector<double> scores;
        std::vector<int> labels;
        bool pos = false, neg = false;
        for (int i = 0; i < n; ++i) {
            // quantized scores so ties actually occur
            scores.push_back(std::floor(rng.next_double() * 8.0) / 8.0);
            labels.push_back(static_cast<int>(rng.next_below(2)));
            (labels.back() ? pos : neg) = true;
        }
        if (!pos || !neg) continue;
        CHECK(std::abs(auroc(scores, labels) - auroc_oracle(scores, labels)) < 1e-12);
    }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
    Rng rng(2);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        scores.push_back(rng.next_double() * 4.0 - 2.0);
        labels.push_back(static_cast<int>(rng.next_below(2)));
    }
    labels[0] = 1;
    labels[1] = 0;
    double base = auroc(scores, labels);
    std::vector<double> cubed, expd;
    for (double s : scores) {
        cubed.push_back(s * s * s);
        expd.push_back(std::exp(s));
    }
    CHECK(auroc(cubed, labels) == base);
    CHECK(auroc(expd, labels) == base);

    // complement property
    std::vector<int> flipped;
    for (int l : labels) flipped.push_back(1 - l);
    CHECK(auroc(scores, labels) + auroc(scores, flipped) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("pixel auroc: perfect, inverted and random maps") {
    // map equals mask -> 1.0; map equals 1-mask -> 0.0
    std::vector<std::uint8_t> mask(64, 0);
    for (int i = 20; i < 28; ++i) mask[static_cast<std::size_t>(i)] = 1;
    Tensor grid({8, 8});
    Tensor inv_grid({8, 8});
    {
        auto& g = grid.mut();
        auto& iv = inv_grid.mut();
        for (int i = 0; i < 64; ++i) {
            g[static_cast<std::size_t>(i)] = mask[static_cast<std::size_t>(i)];
            iv[static_cast<std::size_t>(i)] = 1.0f - mask[static_cast<std::size_t>(i)];
        }
    }
    std::vector<AnomalyMap> maps{{grid, "a"}};
    std::vector<std::vector<std::uint8_t>> masks{mask};
    std::vector<std::pair<int, int>> dims{{8, 8}};
    CHECK(pixel_auroc(maps, masks, dims) == 1.0);

    std::vector<AnomalyMap> inv_maps{{inv_grid, "a"}};
    CHECK(pixel_auroc(inv_maps, masks, dims) == 0.0);

    // independent noise -> 0.5 +/- 0.05 over 10k positions
    Rng rng(3);
    Tensor noise({100, 100});
    auto& nd = noise.mut();
    for (auto& v : nd) v = rng.next_float();
    std::vector<std::uint8_t> big_mask(10000);
    for (auto& v : big_mask) v = static_cast<std::uint8_t>(rng.next_below(2));
    std::vector<AnomalyMap> nmaps{{noise, "n"}};
    std::vector<std::vector<std::uint8_t>> nmasks{big_mask};
    std::vector<std::pair<int, int>> ndims{{100, 100}};
    CHECK(std::abs(pixel_auroc(nmaps, nmasks, ndims) - 0.5) < 0.05);

    // all-normal masks are a contract error
    std::vector<std::vector<std::uint8_t>> empty_masks{std::vector<std::uint8_t>(64, 0)};
    CHECK_THROWS_AS(pixel_auroc(maps, empty_masks, dims), ContractError);
}

TEST_CASE("image score: constant, hot spot, mean mode") {
    Tensor grid = Tensor::full({4, 4}, 2.5f);
    AnomalyMap map{grid, "s"};
    CHECK(image_score(map) == 2.5);
    auto& g = map.grid.mut();
    g[5] = 9.0f;
    CHECK(image_score(map, ImageScoreMode::max) == 9.0);
    CHECK(image_score(map, ImageScoreMode::mean) ==
          Catch::Approx((2.5 * 15 + 9.0) / 16.0).margin(1e-6));
}

TEST_CASE("bilinear upsample: constants stay constant, 2x2 case is exact") {
    Tensor c = Tensor::full({3, 3}, 1.25f);
    Tensor up = bilinear_upsample(c, 6, 6);
    for (std::size_t i = 0; i < up.numel(); ++i) CHECK(up[i] == Catch::Approx(1.25).margin(1e-6));

    Tensor q({2, 2}, {0.0f, 1.0f, 2.0f, 3.0f});
    Tensor u = bilinear_upsample(q, 4, 4);
    // corners clamp to the source corners
    CHECK(u[0] == 0.0f);
    CHECK(u[3] == 1.0f);
    CHECK(u[12] == 2.0f);
    CHECK(u[15] == 3.0f);
    // center points interpolate halfway
    CHECK(u[5] == Catch::Approx(0.75).margin(1e-6));
}

TEST_CASE("identity-flow model yields the closed-form constant map") {
    ModelConfig cfg = small_model_config();
    cfg.cadm = cfg.cpc = cfg.cspc = cfg.pe = false;
    VqFlowModel model = VqFlowModel::build(cfg);  // blocks are identities
    FeatureSample s;
    s.id = "zero";
    s.features.push_back(Tensor::zeros({8, 8, 4}));
    s.features.push_back(Tensor::zeros({4, 4, 8}));
    AnomalyMap map = anomaly_map(model, s);
    const double expect = (4.0 / 2.0 + 8.0 / 2.0) * std::log(2.0 * 3.14159265358979323846);
    for (std::size_t i = 0; i < map.grid.numel(); ++i)
        CHECK(map.grid[i] == Catch::Approx(expect).margin(1e-4));
}

TEST_CASE("single-branch model: map equals that branch's NLL field directly") {
    ModelConfig cfg = small_model_config();
    cfg.scales = 1;
    cfg.channels = {4};
    cfg.spatial = {8};
    VqFlowModel model = VqFlowModel::build(cfg);
    SynthSpec spec = small_spec();
    FeatureSample s = synth_sample(spec, 3, 0, 0);
    s.features.resize(1);
    ModelForward fwd = model.forward_sample(s);
    Tensor nll = mul_scalar(add(fwd.branches[0].logprob, fwd.branches[0].logdet), -1.0f);
    AnomalyMap map = anomaly_map(model, s);
    for (std::size_t i = 0; i < nll.numel(); ++i) CHECK(map.grid[i] == nll[i]);
}

TEST_CASE("perturbed samples score higher than their normal versions") {
    SynthSpec spec = small_spec();
    Dataset ds = synth_dataset(spec, 4);
    ModelConfig cfg = small_model_config();
    VqFlowModel model = VqFlowModel::build(cfg);
    TrainConfig tc;
    tc.learning_rate = 1e-3f;
    tc.batch_size = 4;
    tc.epochs = 20;
    tc.seed = 2;
    train(model, ds.train, tc);
    int higher = 0, total = 0;
    for (const auto& s : ds.train) {
        auto [anom, mask] = inject_anomaly(s, spec, 1000 + static_cast<std::uint64_t>(total));
        double normal_mean = image_score(anomaly_map(model, s), ImageScoreMode::mean);
        double anom_mean = image_score(anomaly_map(model, anom), ImageScoreMode::mean);
        higher += anom_mean > normal_mean;
        ++total;
    }
    CHECK(higher == total);
}

TEST_CASE("mixture-mode and dedicated-mode maps differ within the log-sum-exp bounds") {
    SynthSpec spec = small_spec();
    Dataset ds = synth_dataset(spec, 5);
    VqFlowModel model = VqFlowModel::build(small_model_config());
    init_codebooks(model, ds.train, 1);
    const FeatureSample& s = ds.test[0];
    ModelForward fwd = model.forward_sample(s);
    const double log_k = std::log(static_cast<double>(model.cfg.k_cp));
    for (int i = 0; i < model.cfg.scales; ++i) {
        const auto& bf = fwd.branches[static_cast<std::size_t>(i)];
        Tensor mix = mixture_logprob(bf.z, model.cpc_book, model.heads);
        // per-component log-probs give the log-sum-exp gap at each position
        std::vector<Tensor> comps;
        for (int k = 0; k < model.cfg.k_cp; ++k) {
            std::vector<int> idx{k};
            Tensor proto = reshape(detach(gather_rows(model.cpc_book.codewords, idx)),
                                   Shape{model.cfg.d_cp});
            comps.push_back(conditional_logprob(bf.z, proto, model.heads));
        }
        // dedicated - logK <= mixture <= dedicated + (max component - dedicated)
        for (std::size_t p = 0; p < mix.numel(); ++p) {
            double max_comp = -1e30;
            for (const auto& c : comps) max_comp = std::max(max_comp, static_cast<double>(c[p]));
            const double gap = max_comp - bf.logprob[p];
            CHECK(mix[p] >= bf.logprob[p] - log_k - 1e-4);
            CHECK(mix[p] <= bf.logprob[p] + gap + 1e-4);
        }
    }
}

TEST_CASE("evaluate assembles both metrics, scores and usage") {
    SynthSpec spec = small_spec();
    Dataset ds = synth_dataset(spec, 6);
    VqFlowModel model = VqFlowModel::build(small_model_config());
    init_codebooks(model, ds.train, 1);
    EvalReport rep = evaluate(model, ds.test);
    CHECK(rep.det_auroc >= 0.0);
    CHECK(rep.det_auroc <= 1.0);
    CHECK(rep.has_loc);
    CHECK(rep.loc_auroc >= 0.0);
    CHECK(rep.loc_auroc <= 1.0);
    CHECK(rep.samples.size() == ds.test.size());
    REQUIRE(rep.cpc_usage.size() == 2);
    std::uint64_t uses = 0;
    for (auto u : rep.cpc_usage) uses += u;
    CHECK(uses == ds.test.size());

    nlohmann::json j = report_json(rep);
    CHECK(j.contains("det_auroc"));
    CHECK(j.contains("loc_auroc"));
    CHECK(j.contains("samples"));
    CHECK(j.contains("codebook_usage"));
    CHECK(j["samples"].size() == ds.test.size());
}

TEST_CASE("anomaly map is deterministic and P5 dumps round the scaling") {
    SynthSpec spec = small_spec();
    Dataset ds = synth_dataset(spec, 7);
    VqFlowModel model = VqFlowModel::build(small_model_config());
    init_codebooks(model, ds.train, 1);
    AnomalyMap a = anomaly_map(model, ds.test[0]);
    AnomalyMap b = anomaly_map(model, ds.test[0]);
    for (std::size_t i = 0; i < a.grid.numel(); ++i) CHECK(a.grid[i] == b.grid[i]);

    fs::path dir = fs::temp_directory_path() / "vqflow_test_p5";
    fs::create_directories(dir);
    auto [lo, hi] = write_p5(a, (dir / "map.pgm").string());
    CHECK(lo <= hi);
    std::ifstream in(dir / "map.pgm", std::ios::binary);
    std::string header;
    std::getline(in, header);
    CHECK(header == "P5");
}
