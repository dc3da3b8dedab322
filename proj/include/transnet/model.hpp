#pragma once

// Second-stage network: per-point projection, self-attention blocks over the
// generalized point cloud, max-pool global features, and four decoders for
// translation, x-axis, z-axis, and scale.

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "transnet/common.hpp"
#include "transnet/geometry.hpp"
#include "transnet/gpc.hpp"
#include "transnet/rng.hpp"
#include "transnet/tensor.hpp"

namespace transnet::model {

using ad::Tensor;

struct Linear {
    Tensor w;  // (in x out)
    Tensor b;  // (1 x out)

    static Linear create(int in, int out, Rng& rng, bool zero_init = false) {
        Linear l;
        const double sd = zero_init ? 0.0 : std::sqrt(2.0 / (in + out));
        std::vector<double> wv(static_cast<std::size_t>(in) * out);
        for (auto& x : wv) x = sd * rng.normal();
        l.w = Tensor::from({in, out}, std::move(wv), true);
        l.b = Tensor::zeros({1, out}, true);
        return l;
    }

    Tensor forward(const Tensor& x) const {
        return ad::add(ad::matmul(x, w), ad::expand_rows(b, x.shape()[0]));
    }
};

struct AttentionBlock {
    std::vector<Tensor> wq, wk, wv;  // per head, (d_emb x d_head)
    Linear out_proj;                 // (d_emb x d_emb)
    Linear ff1, ff2;

    static AttentionBlock create(int d_emb, int heads, Rng& rng) {
        if (d_emb % heads != 0) throw ConfigError("d_emb must be divisible by head count");
        AttentionBlock blk;
        const int dk = d_emb / heads;
        const double sd = std::sqrt(2.0 / (d_emb + dk));
        auto mk = [&]() {
            std::vector<double> v(static_cast<std::size_t>(d_emb) * dk);
            for (auto& x : v) x = sd * rng.normal();
            return Tensor::from({d_emb, dk}, std::move(v), true);
        };
        for (int h = 0; h < heads; ++h) {
            blk.wq.push_back(mk());
            blk.wk.push_back(mk());
            blk.wv.push_back(mk());
        }
        blk.out_proj = Linear::create(d_emb, d_emb, rng);
        blk.ff1 = Linear::create(d_emb, 2 * d_emb, rng);
        blk.ff2 = Linear::create(2 * d_emb, d_emb, rng);
        return blk;
    }

    Tensor forward(const Tensor& x) const {
        const int dk = wq[0].shape()[1];
        std::vector<Tensor> heads;
        for (std::size_t h = 0; h < wq.size(); ++h) {
            const Tensor q = ad::matmul(x, wq[h]);
            const Tensor k = ad::matmul(x, wk[h]);
            const Tensor v = ad::matmul(x, wv[h]);
            const Tensor attn = ad::softmax_rows(ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(dk)));
            heads.push_back(ad::matmul(attn, v));
        }
        Tensor h = ad::layernorm_rows(ad::add(x, out_proj.forward(ad::concat_cols(heads))));
        return ad::layernorm_rows(ad::add(h, ff2.forward(ad::relu(ff1.forward(h)))));
    }

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        for (std::size_t h = 0; h < wq.size(); ++h) {
            out.emplace_back(prefix + "_h" + std::to_string(h) + "_wq", wq[h]);
            out.emplace_back(prefix + "_h" + std::to_string(h) + "_wk", wk[h]);
            out.emplace_back(prefix + "_h" + std::to_string(h) + "_wv", wv[h]);
        }
        out.emplace_back(prefix + "_out_w", out_proj.w);
        out.emplace_back(prefix + "_out_b", out_proj.b);
        out.emplace_back(prefix + "_ff1_w", ff1.w);
        out.emplace_back(prefix + "_ff1_b", ff1.b);
        out.emplace_back(prefix + "_ff2_w", ff2.w);
        out.emplace_back(prefix + "_ff2_b", ff2.b);
    }
};

struct ModelConfig {
    int channels = gpc::kFullChannels;
    bool ray_channel = true;  // when set, centered 3D points (ray x depth) augment the encoder input
    int d_emb = 64;
    int d_global = 128;
    int blocks = 2;
    int heads = 4;
    int head_hidden = 64;

    int concat_width() const { return d_emb + d_global + gpc::kNumCategories; }
};

struct ScalePrior {
    std::array<geom::Vec3, gpc::kNumCategories> prior;

    const geom::Vec3& for_category(int c) const {
        if (c < 0 || c >= gpc::kNumCategories) throw CategoryError("scale prior: category out of range");
        return prior[c];
    }
};

struct PoseEstimate {
    geom::AxisPair axes;
    geom::Mat3 R;
    geom::Vec3 t;
    geom::Vec3 s;
    int category = 0;
    bool degenerate_axes = false;
};

// Recorded tensors for the training losses.
struct ForwardTensors {
    Tensor t_hat;  // (1 x 3)
    Tensor ax, az; // (1 x 3), unit
    Tensor cx, cz; // scalars in (0,1)
    Tensor s_hat;  // (1 x 3), floored positive
};

class Model {
public:
    static Model create(const ModelConfig& cfg, std::uint64_t seed) {
        Model m;
        m.cfg_ = cfg;
        Rng rng(seed ^ 0xA5C3E1D2B4F69788ull);
        m.input_proj_ = Linear::create(cfg.channels + (cfg.ray_channel ? 3 : 0), cfg.d_emb, rng);
        for (int b = 0; b < cfg.blocks; ++b) m.blocks_.push_back(AttentionBlock::create(cfg.d_emb, cfg.heads, rng));
        m.pool1_ = Linear::create(cfg.d_emb, cfg.d_global, rng);
        m.pool2_ = Linear::create(cfg.d_global, cfg.d_global, rng);
        const int w = cfg.concat_width();
        m.t1_ = Linear::create(w + cfg.channels, cfg.head_hidden, rng);
        m.t2_ = Linear::create(cfg.head_hidden, 3, rng, /*zero_init=*/true);
        m.x1_ = Linear::create(w, cfg.head_hidden, rng);
        m.x2_ = Linear::create(cfg.head_hidden, 4, rng);
        m.z1_ = Linear::create(w, cfg.head_hidden, rng);
        m.z2_ = Linear::create(cfg.head_hidden, 4, rng);
        // Small axis-head output weights keep the pre-normalization vector
        // short early in training; the unit-normalization gradient scales as
        // 1/|raw|, so a short raw vector lets the direction move quickly.
        for (auto* l : {&m.x2_, &m.z2_})
            for (double& v : l->w.mutable_data()) v *= 0.1;
        m.s1_ = Linear::create(w, cfg.head_hidden, rng);
        m.s2_ = Linear::create(cfg.head_hidden, 3, rng, /*zero_init=*/true);
        return m;
    }

    const ModelConfig& config() const { return cfg_; }

    Tensor encode(const gpc::GeneralizedPointCloud& cloud) const {
        if (cloud.channels != cfg_.channels)
            throw DimensionError("encode: cloud has " + std::to_string(cloud.channels) + " channels, model expects " +
                                 std::to_string(cfg_.channels));
        Tensor p;
        if (cfg_.ray_channel) {
            if (!cloud.layout.ray)
                throw DimensionError("encode: model expects a ray channel the cloud does not carry");
            // Augment each row with its centered 3D point: the per-row product
            // ray x depth is awkward for the network to synthesize from the
            // raw channels, yet it is what the rotation heads depend on.
            const int in = cloud.channels + 3;
            std::vector<double> aug(static_cast<std::size_t>(cloud.n) * in);
            std::array<double, 3> mean{};
            for (int r = 0; r < cloud.n; ++r)
                for (int a = 0; a < 3; ++a) mean[a] += cloud.feature(r, 3 + a) * cloud.depths[r] / cloud.n;
            for (int r = 0; r < cloud.n; ++r) {
                double* dst = &aug[static_cast<std::size_t>(r) * in];
                const double* src = &cloud.features[static_cast<std::size_t>(r) * cloud.channels];
                std::copy(src, src + cloud.channels, dst);
                for (int a = 0; a < 3; ++a)
                    dst[cloud.channels + a] = cloud.feature(r, 3 + a) * cloud.depths[r] - mean[a];
            }
            p = Tensor::from({cloud.n, in}, std::move(aug));
        } else {
            p = Tensor::from({cloud.n, cloud.channels}, cloud.features);
        }
        Tensor h = ad::relu(input_proj_.forward(p));
        for (const auto& blk : blocks_) h = blk.forward(h);
        return h;
    }

    Tensor pool_concat(const Tensor& p_emb, const std::array<double, gpc::kNumCategories>& onehot) const {
        const int n = p_emb.shape()[0];
        const Tensor global = ad::max_pool_rows(pool2_.forward(ad::relu(pool1_.forward(p_emb))));
        const Tensor onehot_t =
            Tensor::from({1, gpc::kNumCategories}, std::vector<double>(onehot.begin(), onehot.end()));
        return ad::concat_cols({p_emb, ad::expand_rows(global, n), ad::expand_rows(onehot_t, n)});
    }

    Tensor decode_translation(const Tensor& p_concat, const gpc::GeneralizedPointCloud& cloud,
                              const geom::CameraIntrinsics& k) const {
        const geom::Vec3 prior = gpc::translation_prior(cloud, k);
        const Tensor p_raw = Tensor::from({cloud.n, cloud.channels}, cloud.features);
        const Tensor per_point = t2_.forward(ad::relu(t1_.forward(ad::concat_cols(p_concat, p_raw))));
        const Tensor residual = ad::mean_rows(per_point);
        return ad::add(residual, Tensor::from({1, 3}, {prior.x, prior.y, prior.z}));
    }

    struct AxisOut {
        Tensor axis;  // (1 x 3), unit
        Tensor conf;  // scalar in (0,1)
    };

    AxisOut decode_axis(const Tensor& pooled, const Linear& l1, const Linear& l2) const {
        const Tensor raw = l2.forward(ad::relu(l1.forward(pooled)));
        const Tensor a = ad::slice_cols(raw, 0, 3);
        const Tensor inv = ad::pow_scalar(ad::add_scalar(ad::sum_all(ad::mul(a, a)), 1e-12), -0.5);
        AxisOut out;
        out.axis = ad::scale_by(a, inv);
        out.conf = ad::reshape(ad::sigmoid(ad::slice_cols(raw, 3, 4)), {1});
        return out;
    }

    Tensor decode_scale(const Tensor& pooled, int category, const ScalePrior& prior) const {
        const geom::Vec3& sp = prior.for_category(category);
        const Tensor residual = s2_.forward(ad::relu(s1_.forward(pooled)));
        const Tensor raw = ad::add(residual, Tensor::from({1, 3}, {sp.x, sp.y, sp.z}));
        return ad::clamp_min(raw, 1e-4);
    }

    ForwardTensors forward_tensors(const gpc::GeneralizedPointCloud& cloud, const geom::CameraIntrinsics& k,
                                   const ScalePrior& prior) const {
        int category = 0;
        for (int c = 0; c < gpc::kNumCategories; ++c)
            if (cloud.category_onehot[c] > 0.5) category = c;
        const Tensor p_emb = encode(cloud);
        const Tensor p_concat = pool_concat(p_emb, cloud.category_onehot);
        const Tensor pooled = ad::max_pool_rows(p_concat);
        ForwardTensors out;
        out.t_hat = decode_translation(p_concat, cloud, k);
        const AxisOut ax = decode_axis(pooled, x1_, x2_);
        const AxisOut az = decode_axis(pooled, z1_, z2_);
        out.ax = ax.axis;
        out.az = az.axis;
        out.cx = ax.conf;
        out.cz = az.conf;
        out.s_hat = decode_scale(pooled, category, prior);
        return out;
    }

    PoseEstimate forward(const gpc::GeneralizedPointCloud& cloud, const geom::CameraIntrinsics& k,
                         const ScalePrior& prior) const {
        const ForwardTensors ft = forward_tensors(cloud, k, prior);
        return assemble(ft, cloud);
    }

    PoseEstimate assemble(const ForwardTensors& ft, const gpc::GeneralizedPointCloud& cloud) const {
        PoseEstimate est;
        for (int c = 0; c < gpc::kNumCategories; ++c)
            if (cloud.category_onehot[c] > 0.5) est.category = c;
        est.axes.a_x = {ft.ax.at(0), ft.ax.at(1), ft.ax.at(2)};
        est.axes.a_z = {ft.az.at(0), ft.az.at(1), ft.az.at(2)};
        est.axes.c_x = ft.cx.item();
        est.axes.c_z = ft.cz.item();
        geom::OrthogonalAxes axes;
        try {
            axes = geom::orthogonalize_axes(est.axes);
        } catch (const DegenerateAxesError&) {
            // Fallback: smallest perturbation of a_x into the plane normal to a_z.
            ++degenerate_axis_events_;
            est.degenerate_axes = true;
            geom::Vec3 proj = est.axes.a_x - est.axes.a_z * geom::dot(est.axes.a_x, est.axes.a_z);
            if (geom::norm(proj) < 1e-12) {
                const geom::Vec3 az = est.axes.a_z;
                proj = std::fabs(az.x) <= std::fabs(az.y) && std::fabs(az.x) <= std::fabs(az.z)
                           ? geom::Vec3{1, 0, 0}
                           : (std::fabs(az.y) <= std::fabs(az.z) ? geom::Vec3{0, 1, 0} : geom::Vec3{0, 0, 1});
                proj = proj - az * geom::dot(proj, az);
            }
            axes.a_x = geom::normalized(proj);
            axes.a_z = geom::normalized(est.axes.a_z);
        }
        est.R = geom::rotation_from_axes(axes.a_x, axes.a_z);
        est.t = {ft.t_hat.at(0), ft.t_hat.at(1), ft.t_hat.at(2)};
        est.s = {ft.s_hat.at(0), ft.s_hat.at(1), ft.s_hat.at(2)};
        return est;
    }

    long degenerate_axis_events() const { return degenerate_axis_events_; }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        auto lin = [&](const char* name, const Linear& l) {
            out.emplace_back(std::string(name) + "_w", l.w);
            out.emplace_back(std::string(name) + "_b", l.b);
        };
        lin("input_proj", input_proj_);
        for (std::size_t b = 0; b < blocks_.size(); ++b) blocks_[b].collect(out, "block" + std::to_string(b));
        lin("pool1", pool1_);
        lin("pool2", pool2_);
        lin("t1", t1_);
        lin("t2", t2_);
        lin("x1", x1_);
        lin("x2", x2_);
        lin("z1", z1_);
        lin("z2", z2_);
        lin("s1", s1_);
        lin("s2", s2_);
        return out;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p;
        for (auto& [name, t] : named_params()) p.push_back(t);
        return p;
    }

private:
    ModelConfig cfg_;
    Linear input_proj_;
    std::vector<AttentionBlock> blocks_;
    Linear pool1_, pool2_;
    Linear t1_, t2_;
    Linear x1_, x2_;
    Linear z1_, z2_;
    Linear s1_, s2_;
    mutable long degenerate_axis_events_ = 0;
};

}  // namespace transnet::model
