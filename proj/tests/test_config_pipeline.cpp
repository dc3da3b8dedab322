#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "transnet/pipeline.hpp"

using namespace transnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
    const fs::path p = fs::temp_directory_path() / (std::string("transnet_pipe_") + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

config::RunConfig tiny_config() {
    config::RunConfig cfg;
    cfg.seed = 7;
    cfg.patch_size = 8;
    cfg.scenes_per_category_train = 2;
    cfg.scenes_per_category_test = 1;
    cfg.gpc_points = 16;
    cfg.d_emb = 8;
    cfg.d_global = 8;
    cfg.blocks = 1;
    cfg.heads = 2;
    cfg.head_hidden = 8;
    cfg.stage1_hidden = 4;
    cfg.stage1_pretrain_epochs = 1;
    cfg.stage1_joint_epochs = 1;
    cfg.stage2_epochs = 2;
    cfg.per_category = false;
    cfg.warmup_steps = 4;
    return cfg;
}

// Dataset plus stage-1 checkpoint shared across the pipeline test cases.
struct Env {
    fs::path root;
    config::RunConfig cfg;

    Env() : root(temp_dir("env")), cfg(tiny_config()) {
        std::ostringstream log;
        pipeline::cmd_generate(cfg, root / "data", false, log);
        pipeline::cmd_train_stage1(cfg, root / "data", root / "stage1", false, log);
    }
};

const Env& env() {
    static Env e;
    return e;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p);
    REQUIRE(f.good());
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("config parsing, defaults, and errors") {
    std::istringstream empty("");
    const auto def = config::parse_config(empty);
    CHECK(def.seed == 0);
    CHECK(def.patch_size == 64);
    CHECK(def.gpc_points == 128);
    CHECK(def.ray_channel);
    CHECK(def.consistency);
    CHECK(def.weights.rx == 8e-4);

    std::istringstream good(
        "# comment line\n"
        "seed = 42\n"
        "  patch_size=16   # inline comment\n"
        "\n"
        "ray_channel = false\n"
        "normal_channel = 1\n"
        "base_lr = 5e-4\n"
        "dataset_dir = my_data\n");
    const auto cfg = config::parse_config(good);
    CHECK(cfg.seed == 42);
    CHECK(cfg.patch_size == 16);
    CHECK_FALSE(cfg.ray_channel);
    CHECK(cfg.normal_channel);
    CHECK(cfg.base_lr == 5e-4);
    CHECK(cfg.dataset_dir == "my_data");

    auto expect_error = [](const std::string& text, const std::string& needle) {
        std::istringstream in(text);
        try {
            config::parse_config(in);
            FAIL("expected ConfigError for: " << text);
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };
    expect_error("seed = 1\nbogus_key = 2\n", "line 2");
    expect_error("bogus_key = 2\n", "unknown key");
    expect_error("seed\n", "key=value");
    expect_error("patch_size = 12x\n", "trailing");
    expect_error("consistency = yes\n", "boolean");
    expect_error("patch_size = 2\n", "patch_size");
    expect_error("anneal_point = 1.5\n", "anneal_point");
    expect_error("corruption_dropout = 2.0\n", "dropout");

    CHECK_THROWS_AS(config::load_config("/nonexistent.cfg"), ConfigError);
}

TEST_CASE("canonical config and hash round trip") {
    const auto a = tiny_config();
    CHECK(config::config_hash(a) == config::config_hash(a));

    auto b = a;
    b.seed = 8;
    CHECK(config::config_hash(a) != config::config_hash(b));

    // Canonical text parses back to the same hash.
    std::istringstream in(config::canonical_config(a));
    const auto back = config::parse_config(in);
    CHECK(config::config_hash(back) == config::config_hash(a));
    CHECK(config::canonical_config(back) == config::canonical_config(a));
}

TEST_CASE("dataset generation is deterministic with disjoint split seeds") {
    const auto cfg = tiny_config();
    const fs::path d1 = temp_dir("gen1"), d2 = temp_dir("gen2");
    std::ostringstream log;
    const auto r1 = pipeline::cmd_generate(cfg, d1, true, log);
    const auto r2 = pipeline::cmd_generate(cfg, d2, true, log);
    CHECK(r1.scenes == 12);  // 4 categories x (2 train + 1 test)
    CHECK(r1.dataset_hash == r2.dataset_hash);

    // Byte-identical files across the two runs.
    for (const auto& entry : fs::recursive_directory_iterator(d1)) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), d1);
        CHECK(slurp(entry.path()) == slurp(d2 / rel));
    }

    // Seed bookkeeping: disjoint instance seeds across splits.
    std::ifstream sf(d1 / "split.json");
    nlohmann::json split;
    sf >> split;
    CHECK(split.at("dataset_hash") == r1.dataset_hash);
    CHECK(split.at("counts").at("train").at("mug") == 2);
    CHECK(split.at("counts").at("test").at("bowl") == 1);
    std::set<std::uint64_t> train_seeds, test_seeds;
    for (const auto& s : split.at("instance_seeds").at("train")) train_seeds.insert(s.get<std::uint64_t>());
    for (const auto& s : split.at("instance_seeds").at("test")) test_seeds.insert(s.get<std::uint64_t>());
    for (auto s : test_seeds) CHECK(train_seeds.count(s) == 0);

    // A different master seed produces a different dataset.
    auto cfg2 = cfg;
    cfg2.seed = 1234;
    const fs::path d3 = temp_dir("gen3");
    const auto r3 = pipeline::cmd_generate(cfg2, d3, true, log);
    CHECK(r3.dataset_hash != r1.dataset_hash);

    // Refuses to clobber without overwrite.
    CHECK_THROWS_MATCHES(pipeline::cmd_generate(cfg, d1, false, log), ConfigError,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("--overwrite")));

    // Loading: sorted ids, one object each, plausible scale prior.
    const auto train = pipeline::load_split(d1, "train");
    REQUIRE(train.size() == 8);
    CHECK(std::is_sorted(train.begin(), train.end(),
                         [](const auto& a, const auto& b) { return a.id < b.id; }));
    CHECK(train.front().id.rfind("bowl_", 0) == 0);
    const auto prior = pipeline::scale_prior_from_scenes(train);
    for (int c = 0; c < 4; ++c) {
        CHECK(prior.prior[c].x > 0.01);
        CHECK(prior.prior[c].z < 0.5);
    }
    CHECK_THROWS_AS(pipeline::load_split(d1, "nope"), LoadError);
}

TEST_CASE("stage-1 training command writes a checkpoint and loss curve") {
    const auto& e = env();
    CHECK(fs::exists(e.root / "stage1" / "manifest.json"));
    const std::string csv = slurp(e.root / "stage1" / "loss_curve.csv");
    CHECK(csv.rfind("epoch,phase,loss_d,loss_s,loss_con\n", 0) == 0);
    CHECK(csv.find("pretrain") != std::string::npos);
    CHECK(csv.find("joint") != std::string::npos);

    const auto ckpt = dataio::load_checkpoint(e.root / "stage1");
    CHECK(ckpt.meta.at("kind") == "stage1");
    CHECK(ckpt.meta.at("hidden") == 4);
    CHECK(ckpt.meta.at("consistency") == true);
    CHECK(ckpt.meta.at("config_hash") == config::config_hash(e.cfg));
    const auto m = pipeline::stage1_from_checkpoint(ckpt);
    CHECK(m.depth_net.weights.size() == 4);

    // Without the consistency term the CSV drops the loss_con column.
    auto cfg2 = e.cfg;
    cfg2.consistency = false;
    const fs::path out2 = temp_dir("s1_nocon");
    std::ostringstream log;
    pipeline::cmd_train_stage1(cfg2, e.root / "data", out2, true, log);
    CHECK(slurp(out2 / "loss_curve.csv").rfind("epoch,phase,loss_d,loss_s\n", 0) == 0);
}

TEST_CASE("stage-2 training requires stage 1, checkpoints, and resumes") {
    const auto& e = env();
    std::ostringstream log;
    CHECK_THROWS_MATCHES(
        pipeline::cmd_train_stage2(e.cfg, e.root / "data", e.root / "no_such_stage1", e.root / "s2x", false, log),
        LoadError, Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("stage-1")));

    const fs::path out = e.root / "stage2_joint";
    pipeline::cmd_train_stage2(e.cfg, e.root / "data", e.root / "stage1", out, false, log);
    REQUIRE(fs::exists(out / "joint" / "manifest.json"));
    auto ckpt = dataio::load_checkpoint(out / "joint");
    CHECK(ckpt.meta.at("kind") == "stage2");
    CHECK(ckpt.meta.at("category") == "joint");
    CHECK(ckpt.meta.at("step") == 16);  // 8 scenes x 2 epochs
    CHECK(ckpt.meta.at("adam_t") == 16);
    CHECK(ckpt.tensors.count("input_proj_w") == 1);
    CHECK(ckpt.tensors.count("input_proj_w_adam_m") == 1);

    // Resume with a larger epoch budget: picks up at the recorded step and
    // appends to the same loss curve without a second header.
    auto more = e.cfg;
    more.stage2_epochs = 4;
    pipeline::cmd_train_stage2(more, e.root / "data", e.root / "stage1", out, false, log);
    CHECK(log.str().find("resuming at step 16") != std::string::npos);
    ckpt = dataio::load_checkpoint(out / "joint");
    CHECK(ckpt.meta.at("step") == 32);

    std::istringstream csv(slurp(out / "joint" / "loss_curve.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,loss_total,loss_t,loss_rx,loss_rz,loss_ra,loss_conx,loss_conz,loss_s,lr");
    int rows = 0;
    int expected_step = 1;
    while (std::getline(csv, line)) {
        CHECK(line.rfind(std::to_string(expected_step) + ",", 0) == 0);
        ++expected_step;
        ++rows;
    }
    CHECK(rows == 32);

    // Per-category mode: one checkpoint directory per category.
    auto percat = e.cfg;
    percat.per_category = true;
    percat.stage2_epochs = 1;
    const fs::path pc = e.root / "stage2_percat";
    pipeline::cmd_train_stage2(percat, e.root / "data", e.root / "stage1", pc, true, log);
    for (const char* c : {"bowl", "water_cup", "wine_cup", "mug"})
        CHECK(fs::exists(pc / c / "manifest.json"));
}

TEST_CASE("evaluation writes deterministic reports with provenance") {
    const auto& e = env();
    std::ostringstream log;
    const fs::path s2 = e.root / "stage2_eval";
    pipeline::cmd_train_stage2(e.cfg, e.root / "data", e.root / "stage1", s2, true, log);

    const fs::path r1 = temp_dir("rep1"), r2 = temp_dir("rep2");
    pipeline::cmd_eval(e.cfg, e.root / "data", e.root / "stage1", s2, r1, true, log);
    pipeline::cmd_eval(e.cfg, e.root / "data", e.root / "stage1", s2, r2, true, log);
    CHECK(slurp(r1 / "report.csv") == slurp(r2 / "report.csv"));
    CHECK(slurp(r1 / "report.json") == slurp(r2 / "report.json"));

    const std::string csv = slurp(r1 / "report.csv");
    CHECK(csv.rfind("# symmetric_iou_alignment=true\n", 0) == 0);
    CHECK(csv.find("\nALL,") != std::string::npos);

    nlohmann::json j = nlohmann::json::parse(slurp(r1 / "report.json"));
    CHECK(j.at("config_hash") == config::config_hash(e.cfg));
    CHECK(j.at("seed") == 7);
    CHECK(j.at("aggregate").at("count") == 4);
    CHECK(j.at("warnings").empty());
    CHECK(j.contains("depth"));
    CHECK(j.contains("normal"));

    // A config drift shows up as a warning, not a failure.
    auto drifted = e.cfg;
    drifted.base_lr = 2e-3;
    const auto res = pipeline::evaluate_checkpoints(drifted, e.root / "data", e.root / "stage1", s2, log);
    CHECK_FALSE(res.warnings.empty());
    CHECK(res.warnings.front().find("config hash mismatch") != std::string::npos);
}

TEST_CASE("ablation grid covers the four channel combinations") {
    const auto& e = env();
    auto cfg = e.cfg;
    cfg.stage2_epochs = 1;
    std::ostringstream log;
    const fs::path out = e.root / "ablate";
    pipeline::cmd_ablate(cfg, e.root / "data", e.root / "stage1", out, true, log);

    std::istringstream csv(slurp(out / "ablation.csv"));
    std::string line;
    std::getline(csv, line);
    CHECK(line == "trial,ray_channel,normal_channel,gpc_width,3D_25,3D_50,3D_75,5deg5cm,10deg5cm,10deg10cm");
    std::vector<std::string> rows;
    while (std::getline(csv, line))
        if (!line.empty()) rows.push_back(line);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].rfind("trial0_ray_normal,1,1,10,", 0) == 0);
    CHECK(rows[1].rfind("trial1_ray_nonormal,1,0,7,", 0) == 0);
    CHECK(rows[2].rfind("trial2_noray_normal,0,1,7,", 0) == 0);
    CHECK(rows[3].rfind("trial3_noray_nonormal,0,0,4,", 0) == 0);
    for (int t = 0; t < 4; ++t)
        CHECK(fs::exists(out / rows[t].substr(0, rows[t].find(',')) / "joint" / "manifest.json"));
}
