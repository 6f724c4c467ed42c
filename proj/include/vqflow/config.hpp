// config.hpp - flat sectioned key-value run configuration. Every command
// writes its fully-resolved config next to its outputs so any run can be
// replayed from that file alone.
#pragma once

#include <fstream>
#include <map>
#include <sstream>

#include "vqflow/model.hpp"
#include "vqflow/scoring.hpp"
#include "vqflow/synth.hpp"
#include "vqflow/train.hpp"

namespace vqflow {

struct RunConfig {
    SynthSpec synth;
    std::uint64_t synth_seed = 7;
    ModelConfig model;
    TrainConfig train;
    DensityMode density = DensityMode::dedicated;
    ImageScoreMode score_mode = ImageScoreMode::max;
    bool dump_maps = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(std::stoi(item));
    }
    return out;
}

inline std::vector<float> parse_float_list(const std::string& s) {
    std::vector<float> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(std::stof(item));
    }
    return out;
}

inline std::string join(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

inline std::string join(const std::vector<float>& v) {
    std::string out;
    char buf[48];
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v[i]));
        out += (i ? "," : "") + std::string(buf);
    }
    return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ConfigError("boolean expected for '" + key + "', got '" + s + "'");
}

}  // namespace detail

// "[section]" headers, "key = value" lines, '#' comments.
inline std::map<std::string, std::string> read_ini(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::map<std::string, std::string> kv;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("malformed line " + std::to_string(lineno) + " in " + path);
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        kv[section.empty() ? key : section + "." + key] = value;
    }
    return kv;
}

inline void apply_config(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
    using detail::parse_bool;
    for (const auto& [key, value] : kv) {
        if (key == "synth.classes") cfg.synth.classes = std::stoi(value);
        else if (key == "synth.seed") cfg.synth_seed = std::stoull(value);
        else if (key == "synth.scales") cfg.synth.scales = std::stoi(value);
        else if (key == "synth.channels") cfg.synth.channels = detail::parse_int_list(value);
        else if (key == "synth.spatial") cfg.synth.spatial = detail::parse_int_list(value);
        else if (key == "synth.train_count") cfg.synth.train_count = std::stoi(value);
        else if (key == "synth.test_count") cfg.synth.test_count = std::stoi(value);
        else if (key == "synth.noise_sigma") cfg.synth.noise_sigma = std::stof(value);
        else if (key == "synth.signature_scale") cfg.synth.signature_scale = std::stof(value);
        else if (key == "synth.pattern_amp") cfg.synth.pattern_amp = std::stof(value);
        else if (key == "synth.intensity_jitter") cfg.synth.intensity_jitter = std::stof(value);
        else if (key == "synth.patch_min") cfg.synth.patch_min = std::stoi(value);
        else if (key == "synth.patch_max") cfg.synth.patch_max = std::stoi(value);
        else if (key == "synth.anomaly_magnitude") cfg.synth.anomaly_magnitude = std::stof(value);
        else if (key == "model.seed") cfg.model.seed = std::stoull(value);
        else if (key == "model.scales") cfg.model.scales = std::stoi(value);
        else if (key == "model.channels") cfg.model.channels = detail::parse_int_list(value);
        else if (key == "model.spatial") cfg.model.spatial = detail::parse_int_list(value);
        else if (key == "model.blocks") cfg.model.blocks_per_branch = std::stoi(value);
        else if (key == "model.d_cp") cfg.model.d_cp = std::stoi(value);
        else if (key == "model.d_pe") cfg.model.d_pe = std::stoi(value);
        else if (key == "model.k_cp") cfg.model.k_cp = std::stoi(value);
        else if (key == "model.k_csp") cfg.model.k_csp = std::stoi(value);
        else if (key == "model.mlp_hidden") cfg.model.mlp_hidden = std::stoi(value);
        else if (key == "model.head_hidden") cfg.model.head_hidden = std::stoi(value);
        else if (key == "model.cadm") cfg.model.cadm = parse_bool(value, key);
        else if (key == "model.cpc") cfg.model.cpc = parse_bool(value, key);
        else if (key == "model.cspc") cfg.model.cspc = parse_bool(value, key);
        else if (key == "model.pe") cfg.model.pe = parse_bool(value, key);
        else if (key == "model.clamp") cfg.model.clamp = std::stof(value);
        else if (key == "model.sigma_eps") cfg.model.sigma_eps = std::stof(value);
        else if (key == "model.commitment") cfg.model.commitment = std::stof(value);
        else if (key == "train.lr") cfg.train.learning_rate = std::stof(value);
        else if (key == "train.batch") cfg.train.batch_size = std::stoi(value);
        else if (key == "train.epochs") cfg.train.epochs = std::stoi(value);
        else if (key == "train.alpha") cfg.train.alpha = detail::parse_float_list(value);
        else if (key == "train.beta") cfg.train.beta = std::stof(value);
        else if (key == "train.gamma") cfg.train.gamma = detail::parse_float_list(value);
        else if (key == "train.seed") cfg.train.seed = std::stoull(value);
        else if (key == "train.clip_norm") cfg.train.clip_norm = std::stof(value);
        else if (key == "train.checkpoint_every") cfg.train.checkpoint_every = std::stoi(value);
        else if (key == "eval.density") {
            if (value == "dedicated") cfg.density = DensityMode::dedicated;
            else if (value == "mixture") cfg.density = DensityMode::mixture;
            else throw ConfigError("unknown density mode '" + value + "'");
        } else if (key == "eval.image_score") {
            if (value == "max") cfg.score_mode = ImageScoreMode::max;
            else if (value == "mean") cfg.score_mode = ImageScoreMode::mean;
            else throw ConfigError("unknown image score mode '" + value + "'");
        } else if (key == "eval.dump_maps") {
            cfg.dump_maps = parse_bool(value, key);
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
}

inline RunConfig load_run_config(const std::string& path) {
    RunConfig cfg;
    apply_config(cfg, read_ini(path));
    return cfg;
}

inline void write_run_config(const RunConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write config file: " + path);
    char buf[48];
    auto f = [&](float v) {
        std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
        return std::string(buf);
    };
    out << "[synth]\n";
    out << "classes = " << cfg.synth.classes << "\n";
    out << "seed = " << cfg.synth_seed << "\n";
    out << "scales = " << cfg.synth.scales << "\n";
    out << "channels = " << detail::join(cfg.synth.channels) << "\n";
    out << "spatial = " << detail::join(cfg.synth.spatial) << "\n";
    out << "train_count = " << cfg.synth.train_count << "\n";
    out << "test_count = " << cfg.synth.test_count << "\n";
    out << "noise_sigma = " << f(cfg.synth.noise_sigma) << "\n";
    out << "signature_scale = " << f(cfg.synth.signature_scale) << "\n";
    out << "pattern_amp = " << f(cfg.synth.pattern_amp) << "\n";
    out << "intensity_jitter = " << f(cfg.synth.intensity_jitter) << "\n";
    out << "patch_min = " << cfg.synth.patch_min << "\n";
    out << "patch_max = " << cfg.synth.patch_max << "\n";
    out << "anomaly_magnitude = " << f(cfg.synth.anomaly_magnitude) << "\n";
    out << "\n[model]\n";
    out << "seed = " << cfg.model.seed << "\n";
    out << "scales = " << cfg.model.scales << "\n";
    out << "channels = " << detail::join(cfg.model.channels) << "\n";
    out << "spatial = " << detail::join(cfg.model.spatial) << "\n";
    out << "blocks = " << cfg.model.blocks_per_branch << "\n";
    out << "d_cp = " << cfg.model.d_cp << "\n";
    out << "d_pe = " << cfg.model.d_pe << "\n";
    out << "k_cp = " << cfg.model.k_cp << "\n";
    out << "k_csp = " << cfg.model.k_csp << "\n";
    out << "mlp_hidden = " << cfg.model.mlp_hidden << "\n";
    out << "head_hidden = " << cfg.model.head_hidden << "\n";
    out << "cadm = " << (cfg.model.cadm ? "true" : "false") << "\n";
    out << "cpc = " << (cfg.model.cpc ? "true" : "false") << "\n";
    out << "cspc = " << (cfg.model.cspc ? "true" : "false") << "\n";
    out << "pe = " << (cfg.model.pe ? "true" : "false") << "\n";
    out << "clamp = " << f(cfg.model.clamp) << "\n";
    out << "sigma_eps = " << f(cfg.model.sigma_eps) << "\n";
    out << "commitment = " << f(cfg.model.commitment) << "\n";
    out << "\n[train]\n";
    out << "lr = " << f(cfg.train.learning_rate) << "\n";
    out << "batch = " << cfg.train.batch_size << "\n";
    out << "epochs = " << cfg.train.epochs << "\n";
    out << "alpha = " << detail::join(cfg.train.alpha) << "\n";
    out << "beta = " << f(cfg.train.beta) << "\n";
    out << "gamma = " << detail::join(cfg.train.gamma) << "\n";
    out << "seed = " << cfg.train.seed << "\n";
    out << "clip_norm = " << f(cfg.train.clip_norm) << "\n";
    out << "checkpoint_every = " << cfg.train.checkpoint_every << "\n";
    out << "\n[eval]\n";
    out << "density = " << to_string(cfg.density) << "\n";
    out << "image_score = " << to_string(cfg.score_mode) << "\n";
    out << "dump_maps = " << (cfg.dump_maps ? "true" : "false") << "\n";
    out.flush();
    if (!out) throw ConfigError("config write failed: " + path);
}

}  // namespace vqflow
