#pragma once

// End-to-end commands behind the CLI: dataset generation, stage-1 and
// stage-2 training (with checkpoints and resume), evaluation reports, and
// the channel-ablation grid.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/config.hpp"
#include "transnet/dataio.hpp"
#include "transnet/geometry.hpp"
#include "transnet/gpc.hpp"
#include "transnet/losses.hpp"
#include "transnet/metrics.hpp"
#include "transnet/model.hpp"
#include "transnet/stage1.hpp"
#include "transnet/synth.hpp"
#include "transnet/tensor.hpp"

namespace transnet::pipeline {

namespace fs = std::filesystem;
using config::RunConfig;
using json = nlohmann::ordered_json;

inline const geom::CameraIntrinsics& default_intrinsics() {
    static const geom::CameraIntrinsics k{600.0, 600.0, 320.0, 240.0, 640, 480};
    return k;
}

// ---------------------------------------------------------------------------
// Dataset hashing (scene files only, sorted relative paths; split.json and
// other run artifacts are excluded so the hash is stable across re-reports).

inline std::uint64_t dataset_hash(const fs::path& root) {
    std::vector<fs::path> files;
    for (const char* split : {"train", "test"}) {
        const fs::path dir = root / split;
        if (!fs::exists(dir)) continue;
        for (const auto& entry : fs::recursive_directory_iterator(dir))
            if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::vector<std::string> rel;
    rel.reserve(files.size());
    for (const auto& p : files) rel.push_back(fs::relative(p, root).generic_string());
    std::sort(rel.begin(), rel.end());
    std::uint64_t h = fnv1a(std::string("dataset"));
    for (const auto& r : rel) {
        h = fnv1a(r, h);
        std::ifstream f(root / r, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        h = fnv1a(bytes.data(), bytes.size(), h);
    }
    return h;
}

inline std::string hash_hex(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

namespace detail {

inline void require_writable_dir(const fs::path& dir, bool overwrite) {
    if (fs::exists(dir) && !fs::is_directory(dir)) throw ConfigError(dir.string() + " exists and is not a directory");
    if (fs::exists(dir) && !fs::is_empty(dir) && !overwrite)
        throw ConfigError(dir.string() + " is not empty; pass --overwrite to replace it");
    fs::create_directories(dir);
}

inline std::string zero_pad(int v, int width) {
    std::ostringstream os;
    os << std::setw(width) << std::setfill('0') << v;
    return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scene synthesis

struct GeneratedScene {
    PatchBundle bundle;
    dataio::SceneAnnotation ann;
};

// One scene: an instance whose shape is a pure function of `instance_seed`,
// posed and rendered with per-scene randomness from `scene_seed`.
inline GeneratedScene generate_scene(const RunConfig& cfg, int category, std::uint64_t instance_seed,
                                     std::uint64_t scene_seed, std::uint64_t scene_index) {
    const auto& spec = synth::categories()[category];
    Rng shape_rng(instance_seed);
    geom::Vec3 scale{shape_rng.uniform(spec.scale_min.x, spec.scale_max.x),
                     shape_rng.uniform(spec.scale_min.y, spec.scale_max.y),
                     shape_rng.uniform(spec.scale_min.z, spec.scale_max.z)};
    if (spec.symmetric) scale.y = scale.x;  // revolution bodies stay circular

    Rng rng(scene_seed);
    const double tilt = rng.uniform(0.0, 0.6);
    const double tilt_azimuth = rng.uniform(0.0, 2.0 * geom::kPi);
    // Spin stays within +-115 degrees so the mug handle, which defines the
    // x-axis, is never fully occluded by the body; a pose whose defining
    // feature is invisible has no recoverable x-axis at any model capacity.
    const double spin = rng.uniform(-2.0, 2.0);
    const geom::Mat3 r_spin = geom::axis_angle({0, 0, 1}, spin);
    const geom::Mat3 r_tilt = geom::axis_angle({std::cos(tilt_azimuth), std::sin(tilt_azimuth), 0.0}, tilt);
    geom::Pose pose;
    pose.R = r_tilt * r_spin;
    pose.t = {rng.uniform(-0.10, 0.10), rng.uniform(-0.10, 0.10), rng.uniform(0.55, 0.85)};
    pose.s = scale;

    synth::SceneInstance inst;
    inst.category = category;
    inst.pose = pose;
    inst.mesh = synth::build_mesh(spec, scale, 48);
    inst.instance_seed = instance_seed;

    // Patch: square window around the projected box corners plus margin.
    const auto& k = default_intrinsics();
    double umin = 1e30, umax = -1e30, vmin = 1e30, vmax = -1e30;
    for (const auto& c : geom::box_corners(pose)) {
        const double u = k.fx * c.x / c.z + k.cx;
        const double v = k.fy * c.y / c.z + k.cy;
        umin = std::min(umin, u);
        umax = std::max(umax, u);
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }
    const double span = 1.2 * std::max(umax - umin, vmax - vmin);
    PatchGrid grid;
    grid.width = cfg.patch_size;
    grid.height = cfg.patch_size;
    grid.du = span / cfg.patch_size;
    grid.dv = span / cfg.patch_size;
    grid.u0 = 0.5 * (umin + umax) - 0.5 * span;
    grid.v0 = 0.5 * (vmin + vmax) - 0.5 * span;

    GeneratedScene out;
    out.bundle = synth::render_patch(inst, k, grid);
    out.bundle.depth_raw = synth::corrupt_depth(out.bundle.depth_gt, out.bundle.mask, cfg.corruption,
                                                scene_seed ^ 0x5bd1e995u);
    out.bundle.rgb = synth::synth_rgb(out.bundle, scene_seed ^ 0xc2b2ae35u);

    dataio::ObjectAnnotation obj;
    obj.category = spec.name;
    obj.R = pose.R;
    obj.t = pose.t;
    obj.s = pose.s;
    obj.symmetric = spec.symmetric;
    out.ann.intrinsics = k;
    out.ann.objects.push_back(obj);
    out.ann.grid = grid;
    out.ann.global_seed = cfg.seed;
    out.ann.scene_index = scene_index;
    out.ann.instance_seed = instance_seed;
    return out;
}

struct GenerateResult {
    int scenes = 0;
    std::string dataset_hash;
};

inline GenerateResult cmd_generate(const RunConfig& cfg, const fs::path& out, bool overwrite, std::ostream& log) {
    cfg.validate();
    detail::require_writable_dir(out, overwrite);
    for (const char* split : {"train", "test"}) fs::remove_all(out / split);

    json split_report;
    split_report["config_hash"] = config::config_hash(cfg);
    split_report["seed"] = cfg.seed;
    int total = 0;
    std::uint64_t scene_index = 0;
    std::map<std::string, std::vector<std::uint64_t>> seed_sets;
    std::map<std::string, std::map<std::string, int>> counts;
    for (const char* split : {"train", "test"}) {
        const bool is_train = std::string(split) == "train";
        const int n = is_train ? cfg.scenes_per_category_train : cfg.scenes_per_category_test;
        for (int c = 0; c < gpc::kNumCategories; ++c) {
            const auto& spec = synth::categories()[c];
            for (int i = 0; i < n; ++i) {
                // Disjoint instance index ranges per split keep held-out
                // instance shapes out of training.
                const int instance_index = is_train ? i : 1000000 + i;
                const std::uint64_t instance_seed =
                    fnv1a(spec.name + "/inst/" + std::to_string(instance_index), cfg.seed ^ 0x9E3779B97F4A7C15ull);
                const std::uint64_t scene_seed =
                    fnv1a(std::string(split) + "/" + spec.name + "/scene/" + std::to_string(i), cfg.seed);
                const GeneratedScene scene = generate_scene(cfg, c, instance_seed, scene_seed, scene_index);
                const fs::path dir = out / split / (spec.name + "_" + detail::zero_pad(i, 4));
                dataio::save_scene(dir, scene.bundle, scene.ann);
                seed_sets[split].push_back(instance_seed);
                ++counts[split][spec.name];
                ++total;
                ++scene_index;
            }
        }
        log << "generated " << split << " split: " << n * gpc::kNumCategories << " scenes\n";
    }
    for (auto tr : seed_sets["train"])
        for (auto te : seed_sets["test"])
            if (tr == te) throw GenerationError("instance seed collision across splits");

    GenerateResult res;
    res.scenes = total;
    res.dataset_hash = hash_hex(dataset_hash(out));
    split_report["dataset_hash"] = res.dataset_hash;
    split_report["counts"] = counts;
    split_report["instance_seeds"] = seed_sets;
    std::ofstream f(out / "split.json");
    f << split_report.dump(2) << "\n";
    log << "dataset hash " << res.dataset_hash << "\n";
    return res;
}

// ---------------------------------------------------------------------------
// Dataset loading

struct LoadedScene {
    std::string id;
    PatchBundle bundle;
    dataio::SceneAnnotation ann;
    int category = 0;
};

inline std::vector<LoadedScene> load_split(const fs::path& dataset, const std::string& split) {
    const fs::path dir = dataset / split;
    if (!fs::is_directory(dir)) throw LoadError("missing dataset split directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir))
        if (entry.is_directory()) names.push_back(entry.path().filename().string());
    std::sort(names.begin(), names.end());
    std::vector<LoadedScene> out;
    for (const auto& name : names) {
        LoadedScene s;
        s.id = name;
        auto [bundle, ann] = dataio::load_scene(dir / name);
        s.bundle = std::move(bundle);
        s.ann = std::move(ann);
        if (s.ann.objects.size() != 1) throw LoadError(name + ": expected exactly one object");
        s.category = synth::category_index(s.ann.objects[0].category);
        out.push_back(std::move(s));
    }
    if (out.empty()) throw LoadError("empty dataset split: " + dir.string());
    return out;
}

// Per-category mean box extents over the training annotations (scale prior).
inline model::ScalePrior scale_prior_from_scenes(const std::vector<LoadedScene>& train) {
    model::ScalePrior prior;
    std::array<geom::Vec3, gpc::kNumCategories> acc{};
    std::array<int, gpc::kNumCategories> n{};
    for (const auto& s : train) {
        acc[s.category] = acc[s.category] + s.ann.objects[0].s;
        ++n[s.category];
    }
    for (int c = 0; c < gpc::kNumCategories; ++c) {
        if (n[c] == 0) throw CategoryError("scale prior: no training scenes for category " +
                                           synth::categories()[c].name);
        prior.prior[c] = acc[c] * (1.0 / n[c]);
    }
    return prior;
}

// ---------------------------------------------------------------------------
// Stage-1 checkpoints

inline dataio::Checkpoint stage1_to_checkpoint(const stage1::Stage1Model& m) {
    dataio::Checkpoint ckpt;
    auto put = [&](const std::string& prefix, const stage1::LocalNet& net) {
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            ckpt.tensors.emplace(prefix + "_w" + std::to_string(l), net.weights[l]);
            ckpt.tensors.emplace(prefix + "_b" + std::to_string(l), net.biases[l]);
        }
    };
    put("depth", m.depth_net);
    put("normal", m.normal_net);
    return ckpt;
}

inline stage1::Stage1Model stage1_from_checkpoint(const dataio::Checkpoint& ckpt) {
    const int hidden = ckpt.meta.at("hidden");
    stage1::Stage1Model m = stage1::Stage1Model::create(0, hidden);
    auto fill = [&](const std::string& prefix, stage1::LocalNet& net) {
        for (std::size_t l = 0; l < net.weights.size(); ++l) {
            for (auto [dst, key] : {std::pair<ad::Tensor*, std::string>{&net.weights[l], prefix + "_w" + std::to_string(l)},
                                    {&net.biases[l], prefix + "_b" + std::to_string(l)}}) {
                const auto it = ckpt.tensors.find(key);
                if (it == ckpt.tensors.end()) throw LoadError("checkpoint missing tensor " + key);
                if (it->second.shape() != dst->shape()) throw LoadError("checkpoint tensor " + key + " shape mismatch");
                dst->mutable_data() = it->second.data();
            }
        }
    };
    fill("depth", m.depth_net);
    fill("normal", m.normal_net);
    return m;
}

inline void cmd_train_stage1(const RunConfig& cfg, const fs::path& dataset, const fs::path& out, bool overwrite,
                             std::ostream& log) {
    cfg.validate();
    detail::require_writable_dir(out, overwrite);
    const auto train = load_split(dataset, "train");
    std::vector<PatchBundle> bundles;
    bundles.reserve(train.size());
    for (const auto& s : train) bundles.push_back(s.bundle);

    stage1::Stage1Config scfg;
    scfg.pretrain_epochs = cfg.stage1_pretrain_epochs;
    scfg.joint_epochs = cfg.stage1_joint_epochs;
    scfg.lr = cfg.stage1_lr;
    scfg.consistency = cfg.consistency;
    scfg.hidden = cfg.stage1_hidden;
    scfg.seed = cfg.seed;
    log << "stage-1 training on " << bundles.size() << " patches (consistency "
        << (cfg.consistency ? "on" : "off") << ")\n";
    const stage1::Stage1TrainResult res = stage1::train_stage1(bundles, scfg);

    dataio::Checkpoint ckpt = stage1_to_checkpoint(res.model);
    ckpt.meta["kind"] = "stage1";
    ckpt.meta["hidden"] = cfg.stage1_hidden;
    ckpt.meta["consistency"] = cfg.consistency;
    ckpt.meta["seed"] = cfg.seed;
    ckpt.meta["config_hash"] = config::config_hash(cfg);
    ckpt.meta["dataset_hash"] = hash_hex(dataset_hash(dataset));
    dataio::save_checkpoint(out, ckpt);

    std::ofstream csv(out / "loss_curve.csv");
    csv << "epoch,phase,loss_d,loss_s" << (cfg.consistency ? ",loss_con" : "") << "\n";
    csv.precision(17);
    for (std::size_t e = 0; e < res.curve.size(); ++e) {
        const auto& row = res.curve[e];
        csv << e << "," << row.phase << "," << row.loss_d << "," << row.loss_s;
        if (cfg.consistency) csv << "," << row.loss_con;
        csv << "\n";
    }
    log << "stage-1 checkpoint written to " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// Stage-2 training

// Frozen stage-1 outputs plus the sampled point cloud for one scene.
struct PreparedScene {
    std::string id;
    int category = 0;
    gpc::GeneralizedPointCloud cloud;
    geom::CameraIntrinsics intrinsics;
    dataio::ObjectAnnotation gt;
    Image completed_depth;  // kept for depth/normal reporting
    Image normals;
};

inline PreparedScene prepare_scene(const LoadedScene& s, const stage1::Stage1Model& s1, const RunConfig& cfg) {
    PreparedScene p;
    p.id = s.id;
    p.category = s.category;
    p.intrinsics = s.ann.intrinsics;
    p.gt = s.ann.objects[0];
    p.completed_depth = stage1::complete_depth(s1, s.bundle.rgb, s.bundle.depth_raw, s.bundle.mask);
    p.normals = stage1::estimate_normals(s1, p.completed_depth, s.bundle.grid, s.ann.intrinsics);
    gpc::ChannelConfig channels;
    channels.ray = cfg.ray_channel;
    channels.normal = cfg.normal_channel;
    p.cloud = gpc::build_gpc(s.bundle, p.completed_depth, p.normals, s.category, cfg.gpc_points,
                             fnv1a("gpc/" + s.id, cfg.seed), channels);
    return p;
}

inline losses::ComponentLosses scene_losses(const model::ForwardTensors& ft, const dataio::ObjectAnnotation& gt,
                                            double alpha) {
    geom::Vec3 ax = gt.R.column(0);
    const geom::Vec3 az = gt.R.column(2);
    if (gt.symmetric) {
        // A revolution body fixes only its z-axis; any x-axis in the plane
        // orthogonal to it is equally valid. Supervise with the valid x-axis
        // closest to the prediction so the loss never chases the arbitrary
        // spin recorded in the annotation.
        const auto& av = ft.ax.data();
        geom::Vec3 pred{av[0], av[1], av[2]};
        geom::Vec3 proj = pred - az * geom::dot(pred, az);
        const double n = geom::norm(proj);
        if (n > 1e-9) ax = proj * (1.0 / n);
    }
    const ad::Tensor ax_star = ad::Tensor::from({1, 3}, {ax.x, ax.y, ax.z});
    const ad::Tensor az_star = ad::Tensor::from({1, 3}, {az.x, az.y, az.z});
    const ad::Tensor t_star = ad::Tensor::from({1, 3}, {gt.t.x, gt.t.y, gt.t.z});
    const ad::Tensor s_star = ad::Tensor::from({1, 3}, {gt.s.x, gt.s.y, gt.s.z});
    losses::ComponentLosses cl;
    cl.t = losses::loss_translation(ft.t_hat, t_star);
    cl.rx = losses::loss_axis(ft.ax, ax_star);
    cl.rz = losses::loss_axis(ft.az, az_star);
    cl.ra = losses::loss_angular(ft.ax, ft.az);
    cl.conx = losses::loss_confidence(ft.cx, ft.ax, ax_star, alpha);
    cl.conz = losses::loss_confidence(ft.cz, ft.az, az_star, alpha);
    cl.s = losses::loss_scale(ft.s_hat, s_star);
    return cl;
}

inline model::ModelConfig model_config(const RunConfig& cfg) {
    model::ModelConfig mc;
    gpc::ChannelConfig channels;
    channels.ray = cfg.ray_channel;
    channels.normal = cfg.normal_channel;
    mc.channels = channels.width();
    mc.ray_channel = cfg.ray_channel;
    mc.d_emb = cfg.d_emb;
    mc.d_global = cfg.d_global;
    mc.blocks = cfg.blocks;
    mc.heads = cfg.heads;
    mc.head_hidden = cfg.head_hidden;
    return mc;
}

namespace detail {

inline json scale_prior_json(const model::ScalePrior& prior) {
    json j = json::array();
    for (const auto& v : prior.prior) j.push_back({v.x, v.y, v.z});
    return j;
}

inline model::ScalePrior scale_prior_from_json(const json& j) {
    model::ScalePrior prior;
    for (int c = 0; c < gpc::kNumCategories; ++c) prior.prior[c] = {j[c][0], j[c][1], j[c][2]};
    return prior;
}

}  // namespace detail

// One stage-2 model plus its optimizer, checkpointable mid-run.
struct Stage2Trainer {
    model::Model net;
    ad::Optimizer opt;
    int step = 0;

    Stage2Trainer(const model::ModelConfig& mc, const ad::OptimConfig& oc, std::uint64_t seed)
        : net(model::Model::create(mc, seed)), opt(oc) {}
};

inline void save_stage2_checkpoint(const fs::path& dir, Stage2Trainer& tr, const RunConfig& cfg,
                                   const model::ScalePrior& prior, const std::string& category_name,
                                   const std::string& ds_hash) {
    dataio::Checkpoint ckpt;
    for (const auto& [name, t] : tr.net.named_params()) {
        ckpt.tensors.emplace(name, t);
        auto& st = tr.opt.state_for(t);
        if (!st.m.empty()) {
            ckpt.tensors.emplace(name + "_adam_m", ad::Tensor::from(t.shape(), st.m));
            ckpt.tensors.emplace(name + "_adam_v", ad::Tensor::from(t.shape(), st.v));
            ckpt.meta["adam_t"] = st.t;
        }
    }
    ckpt.meta["kind"] = "stage2";
    ckpt.meta["category"] = category_name;
    ckpt.meta["step"] = tr.step;
    ckpt.meta["seed"] = cfg.seed;
    ckpt.meta["config_hash"] = config::config_hash(cfg);
    ckpt.meta["dataset_hash"] = ds_hash;
    ckpt.meta["scale_prior"] = detail::scale_prior_json(prior);
    dataio::save_checkpoint(dir, ckpt);
}

inline void restore_stage2(Stage2Trainer& tr, const dataio::Checkpoint& ckpt) {
    const long adam_t = ckpt.meta.contains("adam_t") ? ckpt.meta.at("adam_t").get<long>() : 0;
    for (const auto& [name, t] : tr.net.named_params()) {
        const auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw LoadError("checkpoint missing tensor " + name);
        if (it->second.shape() != t.shape()) throw LoadError("checkpoint tensor " + name + " shape mismatch");
        const_cast<ad::Tensor&>(t).mutable_data() = it->second.data();
        const auto im = ckpt.tensors.find(name + "_adam_m");
        const auto iv = ckpt.tensors.find(name + "_adam_v");
        if (im != ckpt.tensors.end() && iv != ckpt.tensors.end()) {
            auto& st = tr.opt.state_for(t);
            st.m = im->second.data();
            st.v = iv->second.data();
            st.t = adam_t;
        }
    }
    tr.step = ckpt.meta.at("step");
}

inline model::Model stage2_model_from_checkpoint(const dataio::Checkpoint& ckpt, const RunConfig& cfg,
                                                 model::ScalePrior* prior_out) {
    Stage2Trainer tr(model_config(cfg), ad::OptimConfig{}, 0);
    restore_stage2(tr, ckpt);
    if (prior_out) *prior_out = detail::scale_prior_from_json(ckpt.meta.at("scale_prior"));
    return tr.net;
}

inline void cmd_train_stage2(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1_ckpt,
                             const fs::path& out, bool overwrite, std::ostream& log) {
    cfg.validate();
    if (!fs::exists(stage1_ckpt / "manifest.json"))
        throw LoadError("stage-2 training requires a stage-1 checkpoint at " + stage1_ckpt.string());
    const dataio::Checkpoint s1_ckpt = dataio::load_checkpoint(stage1_ckpt);
    const stage1::Stage1Model s1 = stage1_from_checkpoint(s1_ckpt);

    const bool resuming = fs::exists(out) && !fs::is_empty(out) && !overwrite;
    if (!resuming) detail::require_writable_dir(out, overwrite);

    const auto train = load_split(dataset, "train");
    const model::ScalePrior prior = scale_prior_from_scenes(train);
    const std::string ds_hash = hash_hex(dataset_hash(dataset));

    log << "preparing " << train.size() << " training scenes with frozen stage-1\n";
    std::vector<PreparedScene> prepared;
    prepared.reserve(train.size());
    for (const auto& s : train) prepared.push_back(prepare_scene(s, s1, cfg));

    // Per-category mode trains one model per category on its own subset;
    // joint mode trains a single model on everything.
    std::vector<std::pair<std::string, std::vector<const PreparedScene*>>> groups;
    if (cfg.per_category) {
        for (int c = 0; c < gpc::kNumCategories; ++c) {
            std::vector<const PreparedScene*> g;
            for (const auto& p : prepared)
                if (p.category == c) g.push_back(&p);
            if (!g.empty()) groups.emplace_back(synth::categories()[c].name, std::move(g));
        }
    } else {
        std::vector<const PreparedScene*> g;
        for (const auto& p : prepared) g.push_back(&p);
        groups.emplace_back("joint", std::move(g));
    }

    const model::ModelConfig mc = model_config(cfg);
    for (auto& [gname, scenes] : groups) {
        const int steps_per_epoch = static_cast<int>(scenes.size());
        const ad::OptimConfig oc = config::optim_config(cfg, cfg.stage2_epochs * steps_per_epoch);
        Stage2Trainer tr(mc, oc, fnv1a("stage2/" + gname, cfg.seed));
        const fs::path gdir = out / gname;
        const bool has_prev = fs::exists(gdir / "manifest.json");
        if (resuming && has_prev) {
            restore_stage2(tr, dataio::load_checkpoint(gdir));
            log << gname << ": resuming at step " << tr.step << "\n";
        }
        const auto params = tr.net.params();

        fs::create_directories(gdir);
        std::ofstream csv;
        if (tr.step == 0) {
            csv.open(gdir / "loss_curve.csv");
            csv << "step,loss_total,loss_t,loss_rx,loss_rz,loss_ra,loss_conx,loss_conz,loss_s,lr\n";
        } else {
            csv.open(gdir / "loss_curve.csv", std::ios::app);
        }
        csv.precision(17);

        const int start_epoch = steps_per_epoch > 0 ? tr.step / steps_per_epoch : 0;
        for (int epoch = start_epoch; epoch < cfg.stage2_epochs; ++epoch) {
            Rng shuffle_rng = Rng::stream(fnv1a("shuffle/" + gname, cfg.seed), static_cast<std::uint64_t>(epoch));
            const auto order = shuffle_rng.sample_without_replacement(scenes.size(), scenes.size());
            double total_acc = 0.0;
            for (std::size_t oi = 0; oi < order.size(); ++oi) {
                const PreparedScene& p = *scenes[order[oi]];
                const model::ForwardTensors ft = tr.net.forward_tensors(p.cloud, p.intrinsics, prior);
                const losses::ComponentLosses cl = scene_losses(ft, p.gt, cfg.weights.alpha);
                const ad::Tensor total = losses::loss_total(cl, cfg.weights);
                ad::backward(total);
                ++tr.step;
                tr.opt.step(params, tr.step);
                total_acc += total.item();
                csv << tr.step << "," << total.item() << "," << cl.t.item() << "," << cl.rx.item() << ","
                    << cl.rz.item() << "," << cl.ra.item() << "," << cl.conx.item() << "," << cl.conz.item() << ","
                    << cl.s.item() << "," << ad::scheduled_lr(oc, tr.step) << "\n";
            }
            save_stage2_checkpoint(gdir, tr, cfg, prior, gname, ds_hash);
            log << gname << " epoch " << epoch + 1 << "/" << cfg.stage2_epochs << " mean total loss "
                << total_acc / std::max<std::size_t>(1, order.size()) << "\n";
        }
        if (start_epoch >= cfg.stage2_epochs) save_stage2_checkpoint(gdir, tr, cfg, prior, gname, ds_hash);
    }
    log << "stage-2 checkpoints written to " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
    metrics::MetricReport report;
    std::vector<std::string> warnings;
};

inline EvalResult evaluate_checkpoints(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1_ckpt,
                                       const fs::path& stage2_ckpt, std::ostream& log) {
    const dataio::Checkpoint s1c = dataio::load_checkpoint(stage1_ckpt);
    const stage1::Stage1Model s1 = stage1_from_checkpoint(s1c);

    EvalResult res;
    const std::string cfg_hash = config::config_hash(cfg);
    const std::string ds_hash = hash_hex(dataset_hash(dataset));
    auto check_meta = [&](const dataio::Checkpoint& c, const std::string& which) {
        if (c.meta.contains("config_hash") && c.meta.at("config_hash") != cfg_hash)
            res.warnings.push_back(which + ": config hash mismatch (checkpoint " +
                                   c.meta.at("config_hash").get<std::string>() + ", run " + cfg_hash + ")");
        if (c.meta.contains("dataset_hash") && c.meta.at("dataset_hash") != ds_hash)
            res.warnings.push_back(which + ": dataset hash mismatch");
    };
    check_meta(s1c, "stage1");

    // One model per checkpoint subdirectory (category name or "joint").
    std::map<std::string, model::Model> models;
    model::ScalePrior prior;
    std::vector<std::string> groups;
    for (const auto& entry : fs::directory_iterator(stage2_ckpt))
        if (entry.is_directory() && fs::exists(entry.path() / "manifest.json"))
            groups.push_back(entry.path().filename().string());
    std::sort(groups.begin(), groups.end());
    if (groups.empty()) throw LoadError("no stage-2 checkpoints under " + stage2_ckpt.string());
    for (const auto& g : groups) {
        const dataio::Checkpoint c = dataio::load_checkpoint(stage2_ckpt / g);
        check_meta(c, "stage2/" + g);
        models.emplace(g, stage2_model_from_checkpoint(c, cfg, &prior));
    }

    const auto test = load_split(dataset, "test");
    log << "evaluating " << test.size() << " held-out scenes\n";
    std::vector<metrics::Prediction> preds;
    std::vector<metrics::GroundTruth> gts;
    std::vector<double> dep_pred, dep_gt;            // masked depth pixels
    std::vector<double> nrm_pred, nrm_gt;            // masked normal triples
    for (const auto& s : test) {
        const PreparedScene p = prepare_scene(s, s1, cfg);
        const std::string group = models.count("joint") ? "joint" : s.ann.objects[0].category;
        const auto it = models.find(group);
        if (it == models.end()) throw LoadError("no stage-2 checkpoint for category " + group);
        metrics::Prediction pr;
        pr.id = s.id;
        pr.est = it->second.forward(p.cloud, p.intrinsics, prior);
        preds.push_back(pr);
        metrics::GroundTruth gt;
        gt.id = s.id;
        gt.pose = {s.ann.objects[0].R, s.ann.objects[0].t, s.ann.objects[0].s};
        gt.symmetric = s.ann.objects[0].symmetric;
        gt.category = s.ann.objects[0].category;
        gts.push_back(gt);
        for (int i = 0; i < s.bundle.depth_gt.h; ++i)
            for (int j = 0; j < s.bundle.depth_gt.w; ++j) {
                if (!s.bundle.masked(i, j)) continue;
                dep_pred.push_back(p.completed_depth.at(i, j));
                dep_gt.push_back(s.bundle.depth_gt.at(i, j));
                for (int c = 0; c < 3; ++c) {
                    nrm_pred.push_back(p.normals.at(i, j, c));
                    nrm_gt.push_back(s.bundle.normal_gt.at(i, j, c));
                }
            }
    }
    res.report = metrics::evaluate(preds, gts);

    // Stage-1 depth/normal accuracy over all masked test pixels at once.
    const int k = static_cast<int>(dep_pred.size());
    Image dp(1, k, 1), dg(1, k, 1), np(1, k, 3), ng(1, k, 3);
    dp.v = dep_pred;
    dg.v = dep_gt;
    np.v = nrm_pred;
    ng.v = nrm_gt;
    const std::vector<std::uint8_t> all(static_cast<std::size_t>(k), 1);
    res.report.depth = metrics::depth_metrics(dp, dg, all);
    res.report.normal = metrics::normal_metrics(np, ng, all);
    return res;
}

inline void cmd_eval(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1_ckpt,
                     const fs::path& stage2_ckpt, const fs::path& out, bool overwrite, std::ostream& log) {
    cfg.validate();
    detail::require_writable_dir(out, overwrite);
    const EvalResult res = evaluate_checkpoints(cfg, dataset, stage1_ckpt, stage2_ckpt, log);
    for (const auto& w : res.warnings) log << "warning: " << w << "\n";

    std::ofstream csv(out / "report.csv");
    csv << metrics::report_to_csv(res.report);

    json j = metrics::report_to_json(res.report);
    j["config_hash"] = config::config_hash(cfg);
    j["seed"] = cfg.seed;
    j["dataset_hash"] = hash_hex(dataset_hash(dataset));
    j["warnings"] = res.warnings;
    std::ofstream jf(out / "report.json");
    jf << j.dump(2) << "\n";
    log << "reports written to " << out.string() << "\n";
}

// ---------------------------------------------------------------------------
// Ablation grid: cartesian toggles over the ray and normal channels. Each
// trial trains stage 2 against the shared stage-1 checkpoint and evaluates
// on the held-out split.

inline void cmd_ablate(const RunConfig& cfg, const fs::path& dataset, const fs::path& stage1_ckpt,
                       const fs::path& out, bool overwrite, std::ostream& log) {
    cfg.validate();
    detail::require_writable_dir(out, overwrite);
    std::ofstream csv(out / "ablation.csv");
    csv << "trial,ray_channel,normal_channel,gpc_width,3D_25,3D_50,3D_75,5deg5cm,10deg5cm,10deg10cm\n";
    csv.precision(17);
    int trial = 0;
    for (bool ray : {true, false})
        for (bool normal : {true, false}) {
            RunConfig tcfg = cfg;
            tcfg.ray_channel = ray;
            tcfg.normal_channel = normal;
            gpc::ChannelConfig channels;
            channels.ray = ray;
            channels.normal = normal;
            const std::string name = "trial" + std::to_string(trial) + (ray ? "_ray" : "_noray") +
                                     (normal ? "_normal" : "_nonormal");
            log << "ablation " << name << " (gpc width " << channels.width() << ")\n";
            const fs::path tdir = out / name;
            cmd_train_stage2(tcfg, dataset, stage1_ckpt, tdir, /*overwrite=*/true, log);
            const EvalResult res = evaluate_checkpoints(tcfg, dataset, stage1_ckpt, tdir, log);
            const auto& m = res.report.aggregate;
            csv << name << "," << (ray ? 1 : 0) << "," << (normal ? 1 : 0) << "," << channels.width() << ","
                << m.iou25 << "," << m.iou50 << "," << m.iou75 << "," << m.deg5cm5 << "," << m.deg10cm5 << ","
                << m.deg10cm10 << "\n";
            ++trial;
        }
    log << "ablation table written to " << (out / "ablation.csv").string() << "\n";
}

}  // namespace transnet::pipeline
