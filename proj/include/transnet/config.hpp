#pragma once

// Run configuration: a single flat key=value text file fully determines a run.
// Every artifact records the hash of the effective (defaults + file + CLI
// override) configuration so provenance cross-checks are cheap.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/losses.hpp"
#include "transnet/model.hpp"
#include "transnet/stage1.hpp"
#include "transnet/synth.hpp"
#include "transnet/tensor.hpp"

namespace transnet::config {

struct RunConfig {
    std::uint64_t seed = 0;

    // Paths (relative to the working directory unless absolute).
    std::string dataset_dir = "data";
    std::string stage1_dir = "stage1";
    std::string stage2_dir = "stage2";

    // Dataset generation.
    int patch_size = 64;
    int scenes_per_category_train = 40;
    int scenes_per_category_test = 10;
    synth::CorruptionParams corruption;

    // Generalized point cloud.
    int gpc_points = 128;
    bool ray_channel = true;
    bool normal_channel = true;

    // Stage-2 model dimensions.
    int d_emb = 32;
    int d_global = 64;
    int blocks = 1;
    int heads = 2;
    int head_hidden = 32;

    // Losses.
    losses::LossWeights weights;

    // Optimizer / schedule.
    double base_lr = 1e-3;
    int warmup_steps = 1000;
    double anneal_point = 0.72;

    // Training.
    int stage1_hidden = 12;
    double stage1_lr = 1e-3;
    int stage1_pretrain_epochs = 2;
    int stage1_joint_epochs = 2;
    bool consistency = true;
    int stage2_epochs = 8;
    bool per_category = true;

    void validate() const {
        if (dataset_dir.empty() || stage1_dir.empty() || stage2_dir.empty())
            throw ConfigError("directory keys must be non-empty");
        if (patch_size < 4) throw ConfigError("patch_size must be >= 4");
        if (scenes_per_category_train < 1 || scenes_per_category_test < 1)
            throw ConfigError("scene counts must be positive");
        if (gpc_points < 1) throw ConfigError("gpc_points must be positive");
        if (d_emb < 1 || d_global < 1 || blocks < 1 || heads < 1 || head_hidden < 1)
            throw ConfigError("model dimensions must be positive");
        if (base_lr <= 0.0 || stage1_lr <= 0.0) throw ConfigError("learning rates must be positive");
        if (warmup_steps < 0) throw ConfigError("warmup_steps must be non-negative");
        if (anneal_point <= 0.0 || anneal_point >= 1.0) throw ConfigError("anneal_point must lie in (0, 1)");
        if (stage1_pretrain_epochs < 0 || stage1_joint_epochs < 1 || stage2_epochs < 1)
            throw ConfigError("epoch counts invalid");
        corruption.validate();
        weights.validate();
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

// Single registry shared by parse, canonicalization, and documentation.
struct Field {
    std::string key;
    char kind;  // 'u' u64, 'i' int, 'd' double, 'b' bool, 's' string
    void* ptr;
};

inline std::vector<Field> fields(RunConfig& c) {
    return {
        {"seed", 'u', &c.seed},
        {"dataset_dir", 's', &c.dataset_dir},
        {"stage1_dir", 's', &c.stage1_dir},
        {"stage2_dir", 's', &c.stage2_dir},
        {"patch_size", 'i', &c.patch_size},
        {"scenes_per_category_train", 'i', &c.scenes_per_category_train},
        {"scenes_per_category_test", 'i', &c.scenes_per_category_test},
        {"corruption_dropout", 'd', &c.corruption.dropout},
        {"corruption_noise_sigma", 'd', &c.corruption.noise_sigma},
        {"corruption_bias_amplitude", 'd', &c.corruption.bias_amplitude},
        {"corruption_bias_period", 'd', &c.corruption.bias_period},
        {"gpc_points", 'i', &c.gpc_points},
        {"ray_channel", 'b', &c.ray_channel},
        {"normal_channel", 'b', &c.normal_channel},
        {"d_emb", 'i', &c.d_emb},
        {"d_global", 'i', &c.d_global},
        {"blocks", 'i', &c.blocks},
        {"heads", 'i', &c.heads},
        {"head_hidden", 'i', &c.head_hidden},
        {"w_rx", 'd', &c.weights.rx},
        {"w_rz", 'd', &c.weights.rz},
        {"w_ra", 'd', &c.weights.ra},
        {"w_t", 'd', &c.weights.t},
        {"w_s", 'd', &c.weights.s},
        {"w_conx", 'd', &c.weights.conx},
        {"w_conz", 'd', &c.weights.conz},
        {"alpha", 'd', &c.weights.alpha},
        {"base_lr", 'd', &c.base_lr},
        {"warmup_steps", 'i', &c.warmup_steps},
        {"anneal_point", 'd', &c.anneal_point},
        {"stage1_hidden", 'i', &c.stage1_hidden},
        {"stage1_lr", 'd', &c.stage1_lr},
        {"stage1_pretrain_epochs", 'i', &c.stage1_pretrain_epochs},
        {"stage1_joint_epochs", 'i', &c.stage1_joint_epochs},
        {"consistency", 'b', &c.consistency},
        {"stage2_epochs", 'i', &c.stage2_epochs},
        {"per_category", 'b', &c.per_category},
    };
}

inline void assign(const Field& f, const std::string& value) {
    try {
        std::size_t pos = 0;
        switch (f.kind) {
            case 'u': *static_cast<std::uint64_t*>(f.ptr) = std::stoull(value, &pos); break;
            case 'i': *static_cast<int*>(f.ptr) = std::stoi(value, &pos); break;
            case 'd': *static_cast<double*>(f.ptr) = std::stod(value, &pos); break;
            case 'b': {
                if (value == "true" || value == "1")
                    *static_cast<bool*>(f.ptr) = true;
                else if (value == "false" || value == "0")
                    *static_cast<bool*>(f.ptr) = false;
                else
                    throw ConfigError(f.key + ": expected boolean, got '" + value + "'");
                pos = value.size();
                break;
            }
            case 's': {
                if (value.empty()) throw ConfigError(f.key + ": empty path");
                *static_cast<std::string*>(f.ptr) = value;
                pos = value.size();
                break;
            }
        }
        if (pos != value.size()) throw ConfigError(f.key + ": trailing characters in '" + value + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception&) {
        throw ConfigError(f.key + ": cannot parse value '" + value + "'");
    }
}

inline std::string render(const Field& f) {
    switch (f.kind) {
        case 'u': return std::to_string(*static_cast<std::uint64_t*>(f.ptr));
        case 'i': return std::to_string(*static_cast<int*>(f.ptr));
        case 'd': return fmt_double(*static_cast<double*>(f.ptr));
        case 'b': return *static_cast<bool*>(f.ptr) ? "1" : "0";
        case 's': return *static_cast<std::string*>(f.ptr);
    }
    return {};
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in) {
    RunConfig cfg;
    auto reg = detail::fields(cfg);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const std::string s = detail::trim(line);
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key=value, got '" + s + "'");
        const std::string key = detail::trim(s.substr(0, eq));
        const std::string value = detail::trim(s.substr(eq + 1));
        bool found = false;
        for (auto& f : reg)
            if (f.key == key) {
                detail::assign(f, value);
                found = true;
                break;
            }
        if (!found) throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
    cfg.validate();
    return cfg;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse_config(in);
}

// Canonical text of the effective configuration: every key, registry order,
// doubles at full precision, booleans as 0/1. Hash input and artifact record.
inline std::string canonical_config(const RunConfig& cfg) {
    RunConfig copy = cfg;
    std::ostringstream os;
    for (const auto& f : detail::fields(copy)) os << f.key << "=" << detail::render(f) << "\n";
    return os.str();
}

inline std::string config_hash(const RunConfig& cfg) {
    const std::string text = canonical_config(cfg);
    const std::uint64_t h = fnv1a(text.data(), text.size());
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

inline ad::OptimConfig optim_config(const RunConfig& cfg, int total_steps) {
    ad::OptimConfig oc;
    oc.base_lr = cfg.base_lr;
    oc.warmup_steps = cfg.warmup_steps;
    oc.total_steps = total_steps;
    oc.anneal_point = cfg.anneal_point;
    return oc;
}

}  // namespace transnet::config
