// vqflow command line: generate synthetic datasets, train, evaluate, score
// single samples and inspect codebooks. Machine-readable outputs go to disk;
// stderr carries diagnostics. Exit code 0 means the run completed and every
// output passed its own read-back validation.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

#include "vqflow/config.hpp"
#include "vqflow/io.hpp"

namespace fs = std::filesystem;
using namespace vqflow;

namespace {

void ensure_dir(const std::string& dir) { fs::create_directories(dir); }

// model geometry always follows the dataset
void adopt_geometry(ModelConfig& model, const FeatureSample& sample) {
    model.scales = sample.scales();
    model.channels.clear();
    model.spatial.clear();
    for (const Tensor& f : sample.features) {
        model.spatial.push_back(f.dim(0));
        model.channels.push_back(f.dim(2));
    }
}

int cmd_synth(const RunConfig& cfg, const std::string& out) {
    cfg.synth.validate();
    Dataset ds = synth_dataset(cfg.synth, cfg.synth_seed);
    ensure_dir(out);
    save_dataset(ds, out);
    write_run_config(cfg, (fs::path(out) / "resolved.ini").string());

    Dataset back = load_dataset(out);  // read-back validation
    if (back.train.size() != ds.train.size() || back.test.size() != ds.test.size())
        throw FormatError("read-back sample count mismatch in " + out);
    std::cerr << "synth: wrote " << ds.train.size() << " train / " << ds.test.size()
              << " test samples to " << out << "\n";
    return 0;
}

int cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& out) {
    Dataset ds = load_dataset(data_dir);
    if (ds.train.empty()) throw ContractError("no training samples in " + data_dir);
    adopt_geometry(cfg.model, ds.train[0]);
    ensure_dir(out);

    VqFlowModel model = VqFlowModel::build(cfg.model);
    auto sink = [&](int epoch, VqFlowModel& m) {
        save_checkpoint(m, (fs::path(out) / ("checkpoint_epoch_" + std::to_string(epoch) + ".vqfc"))
                               .string());
    };
    TrainResult res = train(model, ds.train, cfg.train, sink);

    const std::string ckpt = (fs::path(out) / "checkpoint.vqfc").string();
    save_checkpoint(model, ckpt);
    {
        std::ofstream trace(fs::path(out) / "loss_trace.csv");
        trace << trace_csv(res.trace, cfg.model.scales);
        if (!trace) throw FormatError("loss trace write failed");
    }
    write_run_config(cfg, (fs::path(out) / "resolved.ini").string());

    // read-back validation: the stored checkpoint reproduces itself bitwise
    VqFlowModel reloaded = load_checkpoint(ckpt);
    const std::string verify = (fs::path(out) / ".verify.vqfc").string();
    save_checkpoint(reloaded, verify);
    bool ok = file_digest(ckpt) == file_digest(verify);
    fs::remove(verify);
    if (!ok) throw FormatError("checkpoint read-back mismatch for " + ckpt);

    if (res.diverged) {
        std::cerr << "train: diverged (" << res.message << ") after "
                  << res.epochs_completed << " epochs; last good checkpoint retained\n";
        return 2;
    }
    std::cerr << "train: " << res.trace.size() << " steps, final total loss "
              << (res.trace.empty() ? 0.0f : res.trace.back().loss.total) << ", checkpoint "
              << ckpt << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_dir,
             const std::string& out) {
    VqFlowModel model = load_checkpoint(checkpoint);
    Dataset ds = load_dataset(data_dir);
    if (ds.test.empty()) throw ContractError("no test samples in " + data_dir);
    EvalReport rep = evaluate(model, ds.test, cfg.density, cfg.score_mode);

    ensure_dir(out);
    std::vector<nlohmann::json> map_files;
    if (cfg.dump_maps) {
        ensure_dir((fs::path(out) / "maps").string());
        for (const auto& map : rep.maps) {
            std::string rel = "maps/" + map.sample_id + ".pgm";
            auto [lo, hi] = write_p5(map, (fs::path(out) / rel).string());
            map_files.push_back({{"id", map.sample_id}, {"file", rel}, {"min", lo}, {"max", hi}});
        }
    }
    RunConfig resolved = cfg;
    resolved.model = model.cfg;
    write_run_config(resolved, (fs::path(out) / "resolved.ini").string());
    const std::string report_path = (fs::path(out) / "report.json").string();
    {
        std::ofstream js(report_path);
        js << report_json(rep, map_files).dump(2) << "\n";
        if (!js) throw FormatError("report write failed");
    }
    {
        std::ifstream js(report_path);  // read-back validation
        nlohmann::json parsed = nlohmann::json::parse(js);
        if (!parsed.contains("det_auroc")) throw FormatError("report read-back missing det_auroc");
    }
    std::cerr << "eval: det_auroc=" << rep.det_auroc;
    if (rep.has_loc) std::cerr << " loc_auroc=" << rep.loc_auroc;
    std::cerr << " (" << to_string(rep.density_mode) << " density, " << rep.samples.size()
              << " samples) -> " << report_path << "\n";
    return 0;
}

int cmd_score(const RunConfig& cfg, const std::string& checkpoint, const std::string& input,
              const std::string& out) {
    VqFlowModel model = load_checkpoint(checkpoint);
    FeatureSample sample = read_feature_file(input);
    sample.id = fs::path(input).stem().string();
    AnomalyMap map = anomaly_map(model, sample, cfg.density);
    const double score = image_score(map, cfg.score_mode);

    ensure_dir(out);
    nlohmann::json j;
    j["id"] = sample.id;
    j["score"] = score;
    j["density_mode"] = to_string(cfg.density);
    j["image_score_mode"] = to_string(cfg.score_mode);
    if (cfg.dump_maps) {
        auto [lo, hi] = write_p5(map, (fs::path(out) / (sample.id + ".pgm")).string());
        j["map"] = {{"file", sample.id + ".pgm"}, {"min", lo}, {"max", hi}};
    }
    const std::string path = (fs::path(out) / "score.json").string();
    {
        std::ofstream js(path);
        js << j.dump(2) << "\n";
        if (!js) throw FormatError("score write failed");
    }
    {
        std::ifstream js(path);
        nlohmann::json parsed = nlohmann::json::parse(js);
        if (!parsed.contains("score")) throw FormatError("score read-back failed");
    }
    std::cerr << "score: " << sample.id << " -> " << score << " (" << path << ")\n";
    return 0;
}

void write_codebook_summary(const Codebook& cb, const std::string& path) {
    std::ofstream csv(path);
    csv << "prototype_id,usage,nearest_other_distance\n";
    const int k = cb.size(), d = cb.dim();
    for (int c = 0; c < k; ++c) {
        double nearest = std::numeric_limits<double>::infinity();
        for (int o = 0; o < k; ++o) {
            if (o == c) continue;
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                double diff = static_cast<double>(cb.codewords[static_cast<std::size_t>(c * d + j)]) -
                              cb.codewords[static_cast<std::size_t>(o * d + j)];
                acc += diff * diff;
            }
            nearest = std::min(nearest, std::sqrt(acc));
        }
        if (k == 1) nearest = 0.0;
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.9g", nearest);
        csv << c << "," << cb.usage_counts[static_cast<std::size_t>(c)] << "," << buf << "\n";
    }
    if (!csv) throw FormatError("codebook summary write failed: " + path);
}

int cmd_inspect(const std::string& checkpoint, const std::string& data_dir,
                const std::string& out) {
    VqFlowModel model = load_checkpoint(checkpoint);
    ensure_dir(out);
    if (model.cfg.cpc)
        write_codebook_summary(model.cpc_book, (fs::path(out) / "cpc_summary.csv").string());
    for (std::size_t i = 0; i < model.cspc_books.size(); ++i)
        write_codebook_summary(model.cspc_books[i],
                               (fs::path(out) / ("cspc_summary_" + std::to_string(i) + ".csv"))
                                   .string());

    if (!data_dir.empty() && model.cfg.cpc) {
        Dataset ds = load_dataset(data_dir);
        std::ofstream csv(fs::path(out) / "assignments.csv");
        csv << "sample_id,class_id,prototype_id\n";
        auto emit = [&](const std::vector<FeatureSample>& split) {
            for (const auto& s : split) {
                CpcResult r = cpc_encode(s.features.back(), model.cpc_mlp, model.cpc_book);
                csv << s.id << "," << s.class_id << "," << r.index() << "\n";
            }
        };
        emit(ds.train);
        emit(ds.test);
        if (!csv) throw FormatError("assignment table write failed");
    }
    std::cerr << "inspect: summaries written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"VQ-Flow: multi-branch conditional normalizing flows with hierarchical "
                 "vector quantization for multi-class anomaly detection"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, checkpoint, input_file;
    RunConfig cfg;

    // shared overrides; applied after an optional config file
    int classes = -1, epochs = -1, batch = -1, blocks = -1;
    int d_cp = -1, d_pe = -1, k_cp = -1, k_csp = -1;
    int train_count = -1, test_count = -1, checkpoint_every = -1;
    double lr = -1.0, magnitude = -1.0;
    std::int64_t seed = -1;
    bool no_cadm = false, no_cpc = false, no_cspc = false, no_pe = false, dump_maps = false;
    std::string density, image_score_mode;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "run configuration file (ini)");
        sub->add_option("--seed", seed, "seed for this command");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a synthetic multi-class dataset");
    add_common(synth);
    synth->add_option("--out", out_dir, "output dataset directory")->required();
    synth->add_option("--classes", classes, "number of normal classes (>= 2)");
    synth->add_option("--train-count", train_count, "training samples");
    synth->add_option("--test-count", test_count, "test samples (half anomalous)");
    synth->add_option("--magnitude", magnitude, "anomaly perturbation magnitude");

    CLI::App* train_cmd = app.add_subcommand("train", "train a model on a dataset");
    add_common(train_cmd);
    train_cmd->add_option("--data", data_dir, "dataset directory")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--epochs", epochs, "training epochs");
    train_cmd->add_option("--lr", lr, "learning rate");
    train_cmd->add_option("--batch", batch, "batch size");
    train_cmd->add_option("--blocks", blocks, "coupling blocks per branch");
    train_cmd->add_option("--d-cp", d_cp, "prototype dimension");
    train_cmd->add_option("--d-pe", d_pe, "positional embedding dimension");
    train_cmd->add_option("--k-cp", k_cp, "prototype codebook size");
    train_cmd->add_option("--k-csp", k_csp, "pattern codebook size");
    train_cmd->add_option("--checkpoint-every", checkpoint_every, "checkpoint cadence (epochs)");
    train_cmd->add_flag("--no-cadm", no_cadm, "disable concept-aware distribution modeling");
    train_cmd->add_flag("--no-cpc", no_cpc, "disable the conceptual prototype codebook");
    train_cmd->add_flag("--no-cspc", no_cspc, "disable the concept-specific pattern codebooks");
    train_cmd->add_flag("--no-pe", no_pe, "disable the positional embedding");

    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    add_common(eval_cmd);
    eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "dataset directory")->required();
    eval_cmd->add_option("--out", out_dir, "output directory")->required();
    eval_cmd->add_option("--density", density, "scoring density: dedicated | mixture");
    eval_cmd->add_option("--image-score", image_score_mode, "image score: max | mean");
    eval_cmd->add_flag("--dump-maps", dump_maps, "write anomaly maps as P5 greymaps");

    CLI::App* score_cmd = app.add_subcommand("score", "score one feature file");
    add_common(score_cmd);
    score_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    score_cmd->add_option("--input", input_file, "feature file (.vqft)")->required();
    score_cmd->add_option("--out", out_dir, "output directory")->required();
    score_cmd->add_option("--density", density, "scoring density: dedicated | mixture");
    score_cmd->add_flag("--dump-maps", dump_maps, "write the anomaly map as P5");

    CLI::App* inspect_cmd = app.add_subcommand("inspect", "summarize codebooks of a checkpoint");
    inspect_cmd->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    inspect_cmd->add_option("--out", out_dir, "output directory")->required();
    inspect_cmd->add_option("--data", data_dir, "dataset for the assignment table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (!config_path.empty()) cfg = load_run_config(config_path);

        if (classes >= 0) cfg.synth.classes = classes;
        if (train_count >= 0) cfg.synth.train_count = train_count;
        if (test_count >= 0) cfg.synth.test_count = test_count;
        if (magnitude >= 0.0) cfg.synth.anomaly_magnitude = static_cast<float>(magnitude);
        if (epochs >= 0) cfg.train.epochs = epochs;
        if (lr >= 0.0) cfg.train.learning_rate = static_cast<float>(lr);
        if (batch >= 0) cfg.train.batch_size = batch;
        if (blocks >= 0) cfg.model.blocks_per_branch = blocks;
        if (d_cp >= 0) cfg.model.d_cp = d_cp;
        if (d_pe >= 0) cfg.model.d_pe = d_pe;
        if (k_cp >= 0) cfg.model.k_cp = k_cp;
        if (k_csp >= 0) cfg.model.k_csp = k_csp;
        if (checkpoint_every >= 0) cfg.train.checkpoint_every = checkpoint_every;
        if (no_cadm) cfg.model.cadm = false;
        if (no_cpc) cfg.model.cpc = false;
        if (no_cspc) cfg.model.cspc = false;
        if (no_pe) cfg.model.pe = false;
        if (!density.empty()) {
            if (density == "dedicated") cfg.density = DensityMode::dedicated;
            else if (density == "mixture") cfg.density = DensityMode::mixture;
            else throw ConfigError("unknown density mode '" + density + "'");
        }
        if (!image_score_mode.empty()) {
            if (image_score_mode == "max") cfg.score_mode = ImageScoreMode::max;
            else if (image_score_mode == "mean") cfg.score_mode = ImageScoreMode::mean;
            else throw ConfigError("unknown image score mode '" + image_score_mode + "'");
        }
        if (dump_maps) cfg.dump_maps = true;

        if (app.got_subcommand(synth)) {
            if (seed >= 0) cfg.synth_seed = static_cast<std::uint64_t>(seed);
            return cmd_synth(cfg, out_dir);
        }
        if (app.got_subcommand(train_cmd)) {
            if (seed >= 0) {
                cfg.train.seed = static_cast<std::uint64_t>(seed);
                cfg.model.seed = static_cast<std::uint64_t>(seed);
            }
            return cmd_train(cfg, data_dir, out_dir);
        }
        if (app.got_subcommand(eval_cmd)) return cmd_eval(cfg, checkpoint, data_dir, out_dir);
        if (app.got_subcommand(score_cmd)) return cmd_score(cfg, checkpoint, input_file, out_dir);
        if (app.got_subcommand(inspect_cmd)) return cmd_inspect(checkpoint, data_dir, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
