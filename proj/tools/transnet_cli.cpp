// Command-line front end: generate / train / eval / ablate.
//
// Exit codes: 0 success, 1 validation error (bad config, bad arguments,
// refused overwrite), 2 runtime error. All logging goes to stderr; data is
// written to files only.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "transnet/transnet.hpp"

namespace fs = std::filesystem;
using namespace transnet;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out;
    long long seed = -1;
    bool seed_set = false;
    bool overwrite = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts, bool out_required) {
    cmd->add_option("--config", opts.config_path, "run configuration file (key=value)")->required();
    auto* s = cmd->add_option("--seed", opts.seed, "override the config seed");
    cmd->add_option("--out", opts.out, "output directory")->required(out_required);
    cmd->add_flag("--overwrite", opts.overwrite, "replace a non-empty output directory");
    cmd->parse_complete_callback([s, &opts] { opts.seed_set = s->count() > 0; });
}

config::RunConfig load(const CommonOpts& opts) {
    config::RunConfig cfg = config::load_config(opts.config_path);
    if (opts.seed_set) {
        if (opts.seed < 0) throw ConfigError("--seed must be non-negative");
        cfg.seed = static_cast<std::uint64_t>(opts.seed);
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"category-level transparent object pose estimation"};
    app.require_subcommand(1);

    CommonOpts gen_o, train_o, eval_o, ablate_o;
    int train_stage = 2;

    auto* gen = app.add_subcommand("generate", "synthesize a train/test dataset");
    add_common(gen, gen_o, true);

    auto* train = app.add_subcommand("train", "train stage 1 or stage 2");
    train->add_option("--stage", train_stage, "1 (depth/normal) or 2 (pose)")->required();
    add_common(train, train_o, true);

    auto* ev = app.add_subcommand("eval", "evaluate checkpoints on the held-out split");
    add_common(ev, eval_o, true);

    auto* ab = app.add_subcommand("ablate", "train and evaluate the channel-toggle grid");
    add_common(ab, ablate_o, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gen->parsed()) {
            const config::RunConfig cfg = load(gen_o);
            pipeline::cmd_generate(cfg, gen_o.out, gen_o.overwrite, std::cerr);
        } else if (train->parsed()) {
            const config::RunConfig cfg = load(train_o);
            if (train_stage == 1)
                pipeline::cmd_train_stage1(cfg, cfg.dataset_dir, train_o.out, train_o.overwrite, std::cerr);
            else if (train_stage == 2)
                pipeline::cmd_train_stage2(cfg, cfg.dataset_dir, cfg.stage1_dir, train_o.out, train_o.overwrite,
                                           std::cerr);
            else
                throw ConfigError("--stage must be 1 or 2");
        } else if (ev->parsed()) {
            const config::RunConfig cfg = load(eval_o);
            pipeline::cmd_eval(cfg, cfg.dataset_dir, cfg.stage1_dir, cfg.stage2_dir, eval_o.out, eval_o.overwrite,
                               std::cerr);
        } else if (ab->parsed()) {
            const config::RunConfig cfg = load(ablate_o);
            pipeline::cmd_ablate(cfg, cfg.dataset_dir, cfg.stage1_dir, ablate_o.out, ablate_o.overwrite, std::cerr);
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
