#pragma once

// First stage: depth completion and surface normal estimation as small
// local-filter networks, trained separately and then jointly with a
// cross-task consistency loss, plus an analytic normal-from-depth oracle.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/patch.hpp"
#include "transnet/rng.hpp"
#include "transnet/tensor.hpp"

namespace transnet::stage1 {

using ad::Tensor;

// Stack of 3x3 same-padding conv layers with ReLU between them (linear last).
struct LocalNet {
    std::vector<int> channels;  // {in, hidden..., out}
    std::vector<Tensor> weights;
    std::vector<Tensor> biases;

    static LocalNet create(std::vector<int> channels, Rng& rng, bool zero_last = false) {
        LocalNet net;
        net.channels = channels;
        for (std::size_t l = 0; l + 1 < channels.size(); ++l) {
            const int ci = channels[l], co = channels[l + 1];
            const bool last = l + 2 == channels.size();
            const double sd = (last && zero_last) ? 0.0 : std::sqrt(2.0 / (9.0 * ci));
            std::vector<double> w(static_cast<std::size_t>(co) * ci * 9);
            for (auto& x : w) x = sd * rng.normal();
            net.weights.push_back(Tensor::from({co, ci, 3, 3}, std::move(w), true));
            net.biases.push_back(Tensor::zeros({co}, true));
        }
        return net;
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            h = ad::conv3x3(h, weights[l], biases[l]);
            if (l + 1 < weights.size()) h = ad::relu(h);
        }
        return h;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            p.push_back(weights[l]);
            p.push_back(biases[l]);
        }
        return p;
    }
};

struct Stage1Model {
    LocalNet depth_net;    // rgb + raw depth + mask + valid-mean -> 1 channel
    LocalNet normal_net;   // centered depth -> 3 channels
    double depth_input_scale = 20.0;  // centered depth is amplified before the normal net

    static Stage1Model create(std::uint64_t seed, int hidden = 12) {
        Rng rng(seed);
        Stage1Model m;
        m.depth_net = LocalNet::create({6, hidden, hidden, hidden, 1}, rng, true);
        m.normal_net = LocalNet::create({1, hidden, hidden, hidden, 3}, rng, true);
        // Bias the last normal layer toward the camera so every pixel starts
        // with a well-defined unit direction.
        m.normal_net.biases.back().mutable_data()[2] = -1.0;
        return m;
    }

    std::vector<Tensor> params() const {
        auto p = depth_net.params();
        for (auto& t : normal_net.params()) p.push_back(t);
        return p;
    }
};

namespace detail {

inline double valid_mean_depth(const Image& raw, const std::vector<std::uint8_t>& mask) {
    double acc = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < raw.v.size(); ++i)
        if (raw.v[i] > 0.0) {
            acc += raw.v[i];
            ++n;
        }
    if (n == 0) {
        // All depth dropped; fall back to a nominal desk-scale distance.
        (void)mask;
        return 0.6;
    }
    return acc / n;
}

inline Tensor chw_constant(const Image& img) {
    // (H x W x C) image -> constant (C x H x W) tensor.
    ad::Shape shape{img.c, img.h, img.w};
    std::vector<double> v(img.v.size());
    for (int ch = 0; ch < img.c; ++ch)
        for (int i = 0; i < img.h; ++i)
            for (int j = 0; j < img.w; ++j) v[(ch * img.h + i) * img.w + j] = img.at(i, j, ch);
    return Tensor::from(shape, std::move(v));
}

inline Image chw_to_image(const Tensor& t) {
    const int c = t.shape()[0], h = t.shape()[1], w = t.shape()[2];
    Image img(h, w, c);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) img.at(i, j, ch) = t.at((static_cast<std::size_t>(ch) * h + i) * w + j);
    return img;
}

inline double softplus_inverse(double y) { return std::log(std::expm1(std::max(y, 1e-6))); }

}  // namespace detail

// Forward pass of the depth completion net as a recorded tensor. The result
// is the full-patch prediction; composition with raw depth happens after.
inline Tensor complete_depth_raw(const Stage1Model& model, const Image& rgb, const Image& raw,
                                 const std::vector<std::uint8_t>& mask) {
    if (rgb.h != raw.h || rgb.w != raw.w || mask.size() != raw.pixels())
        throw DimensionError("complete_depth: patch shapes disagree");
    const int h = raw.h, w = raw.w;
    const double base = detail::valid_mean_depth(raw, mask);
    std::vector<double> in(static_cast<std::size_t>(6) * h * w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const std::size_t px = static_cast<std::size_t>(i) * w + j;
            in[(0 * h + i) * w + j] = rgb.at(i, j, 0);
            in[(1 * h + i) * w + j] = rgb.at(i, j, 1);
            in[(2 * h + i) * w + j] = rgb.at(i, j, 2);
            in[(3 * h + i) * w + j] = raw.at(i, j) - (raw.at(i, j) > 0.0 ? base : 0.0);
            in[(4 * h + i) * w + j] = mask[px] ? 1.0 : 0.0;
            in[(5 * h + i) * w + j] = raw.at(i, j) > 0.0 ? 1.0 : 0.0;
        }
    const Tensor x = Tensor::from({6, h, w}, std::move(in));
    const Tensor y = model.depth_net.forward(x);
    // softplus output map keeps depth strictly positive; the offset makes a
    // freshly zero-initialized net predict the valid-depth mean.
    return ad::softplus(ad::add_scalar(y, detail::softplus_inverse(base)));
}

// Completed depth: network prediction inside the mask, raw input verbatim
// outside.
inline Image complete_depth(const Stage1Model& model, const Image& rgb, const Image& raw,
                            const std::vector<std::uint8_t>& mask) {
    const Tensor pred = complete_depth_raw(model, rgb, raw, mask);
    Image out = raw;
    for (int i = 0; i < raw.h; ++i)
        for (int j = 0; j < raw.w; ++j)
            if (mask[static_cast<std::size_t>(i) * raw.w + j])
                out.at(i, j) = pred.at(static_cast<std::size_t>(i) * raw.w + j);
    return out;
}

// Normal net forward over a depth tensor (1 x H x W); outputs unit vectors
// per pixel as a (3 x H x W) tensor.
inline Tensor estimate_normals_raw(const Stage1Model& model, const Tensor& depth_chw) {
    const int h = depth_chw.shape()[1], w = depth_chw.shape()[2];
    // Centering stays on the tape: the mean is differentiated through when
    // the depth input is itself a prediction.
    const Tensor neg_mean = ad::scale(ad::sum_all(depth_chw), -1.0 / static_cast<double>(depth_chw.size()));
    const Tensor ones = Tensor::full(depth_chw.shape(), 1.0);
    const Tensor centered = ad::scale(ad::add(depth_chw, ad::scale_by(ones, neg_mean)), model.depth_input_scale);
    const Tensor y = model.normal_net.forward(centered);
    // Per-pixel unit normalization over the channel axis.
    const Tensor flat = ad::reshape(y, {3, h * w});
    const Tensor sumsq = ad::scale(ad::mean_rows(ad::mul(flat, flat)), 3.0);
    const Tensor inv = ad::pow_scalar(ad::add_scalar(sumsq, 1e-12), -0.5);
    const Tensor unit = ad::mul(flat, ad::expand_rows(inv, 3));
    return ad::reshape(unit, {3, h, w});
}

// Public inference path: unit normals with the camera-facing sign fix.
inline Image estimate_normals(const Stage1Model& model, const Image& depth, const PatchGrid& grid,
                              const geom::CameraIntrinsics& k) {
    const Tensor t = estimate_normals_raw(model, detail::chw_constant(depth));
    Image out = detail::chw_to_image(t);
    for (int i = 0; i < out.h; ++i)
        for (int j = 0; j < out.w; ++j) {
            const geom::Vec3 n{out.at(i, j, 0), out.at(i, j, 1), out.at(i, j, 2)};
            if (geom::dot(n, geom::ray_direction(k, grid.u(j), grid.v(i))) > 0.0) {
                out.at(i, j, 0) = -n.x;
                out.at(i, j, 1) = -n.y;
                out.at(i, j, 2) = -n.z;
            }
        }
    return out;
}

// Independent oracle: normals from central differences of back-projected
// neighbors (replicated at patch edges), camera-facing.
inline Image normal_from_depth_oracle(const Image& depth, const PatchGrid& grid, const geom::CameraIntrinsics& k) {
    const int h = depth.h, w = depth.w;
    Image out(h, w, 3);
    auto point = [&](int i, int j) {
        const double d = std::max(depth.at(i, j), 1e-6);
        return geom::backproject(k, grid.u(j), grid.v(i), d);
    };
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const int jl = std::max(0, j - 1), jr = std::min(w - 1, j + 1);
            const int iu = std::max(0, i - 1), id = std::min(h - 1, i + 1);
            const geom::Vec3 tu = point(i, jr) - point(i, jl);
            const geom::Vec3 tv = point(id, j) - point(iu, j);
            geom::Vec3 n = geom::cross(tu, tv);
            if (geom::norm(n) < 1e-15) n = {0.0, 0.0, -1.0};
            n = geom::normalized(n);
            if (geom::dot(n, geom::ray_direction(k, grid.u(j), grid.v(i))) > 0.0) n = -n;
            out.at(i, j, 0) = n.x;
            out.at(i, j, 1) = n.y;
            out.at(i, j, 2) = n.z;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Masked losses (squared error means over the transparency mask).

namespace detail {

inline Tensor mask_weights(const std::vector<std::uint8_t>& mask, int h, int w, int channels) {
    std::vector<double> v(static_cast<std::size_t>(channels) * h * w, 0.0);
    for (int c = 0; c < channels; ++c)
        for (std::size_t px = 0; px < static_cast<std::size_t>(h) * w; ++px)
            if (mask[px]) v[c * static_cast<std::size_t>(h) * w + px] = 1.0;
    return Tensor::from({channels, h, w}, std::move(v));
}

inline std::size_t mask_count(const std::vector<std::uint8_t>& mask) {
    std::size_t n = 0;
    for (auto m : mask) n += m != 0;
    return n;
}

}  // namespace detail

// Mean over masked pixels of the squared residual; `pred` and `target` are
// (C x H x W) with the mask shared across channels.
inline Tensor masked_sq_loss(const Tensor& pred, const Tensor& target, const std::vector<std::uint8_t>& mask) {
    if (pred.shape() != target.shape()) throw DimensionError("masked_sq_loss: shape mismatch");
    const int c = pred.shape()[0], h = pred.shape()[1], w = pred.shape()[2];
    const std::size_t np = detail::mask_count(mask);
    if (np == 0) throw EmptyMaskError("masked_sq_loss");
    const Tensor d = ad::sub(pred, target);
    const Tensor sq = ad::mul(d, d);
    return ad::scale(ad::sum_all(ad::mul(sq, detail::mask_weights(mask, h, w, c))), 1.0 / static_cast<double>(np));
}

// ---------------------------------------------------------------------------
// Training

struct Stage1Config {
    int pretrain_epochs = 2;
    int joint_epochs = 2;
    double lr = 1e-3;
    bool consistency = true;
    double w_con = 1.0;
    int hidden = 12;
    std::uint64_t seed = 0;
};

struct Stage1TrainResult {
    Stage1Model model;
    // Per-epoch means: phase ("pretrain"/"joint"), L_d, L_s, L_con.
    struct EpochRow {
        std::string phase;
        double loss_d = 0.0, loss_s = 0.0, loss_con = 0.0;
    };
    std::vector<EpochRow> curve;
    int skipped_empty_mask = 0;
};

inline Stage1TrainResult train_stage1(const std::vector<PatchBundle>& train, const Stage1Config& cfg) {
    if (train.empty()) throw ContractError("train_stage1: empty dataset");
    Stage1TrainResult res;
    res.model = Stage1Model::create(cfg.seed, cfg.hidden);
    Stage1Model& m = res.model;

    ad::OptimConfig ocfg;
    ocfg.base_lr = cfg.lr;
    ocfg.warmup_steps = 50;
    ocfg.total_steps = static_cast<int>(train.size()) * (cfg.pretrain_epochs + cfg.joint_epochs);
    ad::Optimizer opt(ocfg);
    const auto params = m.params();
    int step = 0;

    auto run_epoch = [&](bool joint) {
        Stage1TrainResult::EpochRow row;
        row.phase = joint ? "joint" : "pretrain";
        int used = 0;
        for (const auto& b : train) {
            if (detail::mask_count(b.mask) == 0) {
                ++res.skipped_empty_mask;
                continue;
            }
            const Tensor gt_depth = detail::chw_constant(b.depth_gt);
            const Tensor gt_normal = detail::chw_constant(b.normal_gt);
            const Tensor pred_depth = complete_depth_raw(m, b.rgb, b.depth_raw, b.mask);
            const Tensor loss_d = masked_sq_loss(pred_depth, gt_depth, b.mask);
            Tensor loss_s, loss_con, total;
            if (!joint) {
                // Separate phase: the normal net sees ground-truth depth.
                const Tensor pred_n = estimate_normals_raw(m, gt_depth);
                loss_s = masked_sq_loss(pred_n, gt_normal, b.mask);
                total = ad::add(loss_d, loss_s);
            } else {
                // Composed depth: prediction inside the mask, raw outside.
                const Tensor maskw = detail::mask_weights(b.mask, b.depth_gt.h, b.depth_gt.w, 1);
                const Tensor raw = detail::chw_constant(b.depth_raw);
                const Tensor composed = ad::add(ad::mul(pred_depth, maskw),
                                                ad::mul(raw, ad::add_scalar(ad::scale(maskw, -1.0), 1.0)));
                const Tensor pred_n = estimate_normals_raw(m, composed);
                loss_s = masked_sq_loss(pred_n, gt_normal, b.mask);
                total = ad::add(loss_d, loss_s);
                if (cfg.consistency) {
                    const Tensor n_from_gt = estimate_normals_raw(m, gt_depth);
                    loss_con = masked_sq_loss(ad::sub(pred_n, n_from_gt),
                                              Tensor::zeros(pred_n.shape()), b.mask);
                    total = ad::add(total, ad::scale(loss_con, cfg.w_con));
                }
            }
            ad::backward(total);
            opt.step(params, ++step);
            row.loss_d += loss_d.item();
            row.loss_s += loss_s.item();
            if (loss_con.valid()) row.loss_con += loss_con.item();
            ++used;
        }
        if (used > 0) {
            row.loss_d /= used;
            row.loss_s /= used;
            row.loss_con /= used;
        }
        res.curve.push_back(row);
    };

    for (int e = 0; e < cfg.pretrain_epochs; ++e) run_epoch(false);
    for (int e = 0; e < cfg.joint_epochs; ++e) run_epoch(true);
    return res;
}

}  // namespace transnet::stage1
