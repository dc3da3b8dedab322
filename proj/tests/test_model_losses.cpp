#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "transnet/losses.hpp"
#include "transnet/model.hpp"
#include "test_util.hpp"

using namespace transnet;
using ad::Tensor;
using geom::Vec3;

namespace {

geom::CameraIntrinsics test_k() { return {600.0, 600.0, 320.0, 240.0, 640, 480}; }

gpc::GeneralizedPointCloud random_cloud(int n, int channels, int category, std::uint64_t seed) {
    gpc::GeneralizedPointCloud c;
    c.n = n;
    c.channels = channels;
    c.category_onehot[category] = 1.0;
    Rng rng(seed);
    c.features.resize(static_cast<std::size_t>(n) * channels);
    for (auto& f : c.features) f = rng.uniform(-1.0, 1.0);
    for (int row = 0; row < n; ++row) {
        c.pixels.push_back({rng.uniform(280.0, 360.0), rng.uniform(200.0, 280.0)});
        c.depths.push_back(rng.uniform(0.4, 0.9));
    }
    return c;
}

model::ModelConfig small_cfg() {
    model::ModelConfig cfg;
    cfg.channels = 10;
    cfg.d_emb = 8;
    cfg.d_global = 8;
    cfg.blocks = 1;
    cfg.heads = 2;
    cfg.head_hidden = 8;
    return cfg;
}

model::ScalePrior test_prior() {
    model::ScalePrior p;
    p.prior = {Vec3{0.15, 0.15, 0.07}, {0.07, 0.07, 0.13}, {0.08, 0.08, 0.17}, {0.10, 0.10, 0.10}};
    return p;
}

}  // namespace

TEST_CASE("loss hand values") {
    const Tensor ex = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
    const Tensor neg_ex = Tensor::from({1, 3}, {-1.0, 0.0, 0.0});
    const Tensor ez = Tensor::from({1, 3}, {0.0, 0.0, 1.0});

    CHECK(losses::loss_axis(ex, ex).item() == Catch::Approx(0.0).margin(1e-15));
    // Antipodal: L1 term 2/3, cosine term 2.
    CHECK(losses::loss_axis(ex, neg_ex).item() == Catch::Approx(8.0 / 3.0).margin(1e-12));

    CHECK(losses::loss_angular(ex, ez).item() == Catch::Approx(0.0).margin(1e-15));
    CHECK(losses::loss_angular(ex, ex).item() == Catch::Approx(1.0).margin(1e-15));
    const Tensor tilted = Tensor::from({1, 3}, {-0.5, std::sqrt(3.0) / 2.0, 0.0});
    CHECK(losses::loss_angular(ex, tilted).item() == Catch::Approx(0.5).margin(1e-12));

    const Tensor t_hat = Tensor::from({1, 3}, {1.0, 2.0, 3.0});
    const Tensor t_star = Tensor::from({1, 3}, {1.1, 1.8, 3.0});
    CHECK(losses::loss_translation(t_hat, t_star).item() == Catch::Approx(0.1).margin(1e-12));
    CHECK(losses::loss_scale(t_hat, t_star).item() == Catch::Approx(0.1).margin(1e-12));

    // Perfect axis, confidence 0: target exp(0) = 1.
    const Tensor zero_c = Tensor::scalar(0.0);
    CHECK(losses::loss_confidence(zero_c, ex, ex, -5.0).item() == Catch::Approx(1.0).margin(1e-15));
    // ||d|| = 0.2, alpha = -5: target exp(-1).
    const Tensor off = Tensor::from({1, 3}, {1.2, 0.0, 0.0});
    CHECK(losses::loss_confidence(zero_c, off, ex, -5.0).item() == Catch::Approx(std::exp(-1.0)).margin(1e-12));
}

TEST_CASE("weighted total with unit parts equals 38e-4") {
    losses::ComponentLosses parts;
    for (Tensor* p : {&parts.rx, &parts.rz, &parts.ra, &parts.t, &parts.s, &parts.conx, &parts.conz})
        *p = Tensor::scalar(1.0);
    CHECK(losses::loss_total(parts, losses::LossWeights{}).item() == Catch::Approx(38e-4).margin(1e-15));

    losses::LossWeights bad;
    bad.t = -1.0;
    CHECK_THROWS_AS(losses::loss_total(parts, bad), ConfigError);
    losses::LossWeights bad_alpha;
    bad_alpha.alpha = 0.0;
    CHECK_THROWS_AS(losses::loss_total(parts, bad_alpha), ConfigError);
}

TEST_CASE("loss gradients agree with finite differences") {
    // Inputs chosen well away from the |.| and sqrt kinks.
    Tensor ax = Tensor::from({1, 3}, {0.8, 0.1, -0.5}, true);
    Tensor az = Tensor::from({1, 3}, {0.2, 0.9, 0.3}, true);
    Tensor t_hat = Tensor::from({1, 3}, {0.1, -0.2, 0.7}, true);
    Tensor s_hat = Tensor::from({1, 3}, {0.12, 0.11, 0.16}, true);
    Tensor cx = Tensor::from({1}, {0.4}, true);
    Tensor cz = Tensor::from({1}, {0.7}, true);
    const Tensor ax_star = Tensor::from({1, 3}, {1.0, 0.0, 0.0});
    const Tensor az_star = Tensor::from({1, 3}, {0.0, 0.0, 1.0});
    const Tensor t_star = Tensor::from({1, 3}, {0.0, 0.1, 0.6});
    const Tensor s_star = Tensor::from({1, 3}, {0.1, 0.1, 0.2});

    std::vector<Tensor> params{ax, az, t_hat, s_hat, cx, cz};
    const double err = testutil::grad_check(params, [&] {
        losses::ComponentLosses parts;
        parts.rx = losses::loss_axis(ax, ax_star);
        parts.rz = losses::loss_axis(az, az_star);
        parts.ra = losses::loss_angular(ax, az);
        parts.t = losses::loss_translation(t_hat, t_star);
        parts.s = losses::loss_scale(s_hat, s_star);
        parts.conx = losses::loss_confidence(cx, ax, ax_star, -5.0);
        parts.conz = losses::loss_confidence(cz, az, az_star, -5.0);
        return losses::loss_total(parts, losses::LossWeights{});
    });
    CHECK(err < 1e-6);
}

TEST_CASE("forward tensor shapes and ranges") {
    const auto m = model::Model::create(small_cfg(), 5);
    const auto cloud = random_cloud(8, 10, 1, 42);
    const auto ft = m.forward_tensors(cloud, test_k(), test_prior());

    CHECK(ft.t_hat.shape() == ad::Shape{1, 3});
    CHECK(ft.ax.shape() == ad::Shape{1, 3});
    CHECK(ft.az.shape() == ad::Shape{1, 3});
    CHECK(ft.s_hat.shape() == ad::Shape{1, 3});
    CHECK(ft.cx.size() == 1);
    CHECK(ft.cz.size() == 1);

    const Vec3 ax{ft.ax.at(0), ft.ax.at(1), ft.ax.at(2)};
    const Vec3 az{ft.az.at(0), ft.az.at(1), ft.az.at(2)};
    CHECK(std::fabs(geom::norm(ax) - 1.0) < 1e-9);
    CHECK(std::fabs(geom::norm(az) - 1.0) < 1e-9);
    for (double c : {ft.cx.item(), ft.cz.item()}) {
        CHECK(c > 0.0);
        CHECK(c < 1.0);
    }
    for (int i = 0; i < 3; ++i) CHECK(ft.s_hat.at(i) > 0.0);

    const auto wrong = random_cloud(8, 7, 1, 42);
    CHECK_THROWS_AS(m.encode(wrong), DimensionError);
}

TEST_CASE("fresh decoders return the priors bit-exactly") {
    const auto m = model::Model::create(small_cfg(), 17);
    const auto cloud = random_cloud(12, 10, 2, 9);
    const auto prior = test_prior();
    const auto ft = m.forward_tensors(cloud, test_k(), prior);

    const Vec3 tp = gpc::translation_prior(cloud, test_k());
    CHECK(ft.t_hat.at(0) == tp.x);
    CHECK(ft.t_hat.at(1) == tp.y);
    CHECK(ft.t_hat.at(2) == tp.z);
    CHECK(ft.s_hat.at(0) == prior.prior[2].x);
    CHECK(ft.s_hat.at(1) == prior.prior[2].y);
    CHECK(ft.s_hat.at(2) == prior.prior[2].z);

    // Scale floor: a prior component below 1e-4 is clamped to exactly 1e-4.
    model::ScalePrior tiny = prior;
    tiny.prior[2].x = 5e-5;
    const auto ft2 = m.forward_tensors(cloud, test_k(), tiny);
    CHECK(ft2.s_hat.at(0) == 1e-4);
}

TEST_CASE("assembled rotation is orthonormal; estimate carries the category") {
    Rng rng(31);
    auto m = model::Model::create(small_cfg(), 23);
    for (auto& p : m.params())
        for (std::size_t i = 0; i < p.size(); ++i) p.mutable_data()[i] += 0.2 * rng.normal();
    const auto cloud = random_cloud(16, 10, 3, 77);
    const auto est = m.forward(cloud, test_k(), test_prior());

    CHECK(est.category == 3);
    CHECK_FALSE(est.degenerate_axes);
    const geom::Mat3 should_be_i = est.R.transposed() * est.R;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(should_be_i.m[i * 3 + j] == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-9));
    CHECK(est.R.det() == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("parallel axis prediction falls back to a valid rotation") {
    const auto m = model::Model::create(small_cfg(), 3);
    const auto cloud = random_cloud(4, 10, 0, 1);
    model::ForwardTensors ft;
    ft.ax = Tensor::from({1, 3}, {0.0, 0.0, 1.0});
    ft.az = Tensor::from({1, 3}, {0.0, 0.0, 1.0});
    ft.cx = Tensor::scalar(0.5);
    ft.cz = Tensor::scalar(0.5);
    ft.t_hat = Tensor::from({1, 3}, {0.0, 0.0, 0.6});
    ft.s_hat = Tensor::from({1, 3}, {0.1, 0.1, 0.1});
    const auto est = m.assemble(ft, cloud);
    CHECK(est.degenerate_axes);
    CHECK(m.degenerate_axis_events() == 1);
    const geom::Mat3 should_be_i = est.R.transposed() * est.R;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(should_be_i.m[i * 3 + j] == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-12));
}

TEST_CASE("outputs are invariant to the point ordering") {
    Rng rng(71);
    auto m = model::Model::create(small_cfg(), 29);
    for (auto& p : m.params())
        for (std::size_t i = 0; i < p.size(); ++i) p.mutable_data()[i] += 0.2 * rng.normal();
    const auto cloud = random_cloud(10, 10, 1, 13);

    gpc::GeneralizedPointCloud shuffled = cloud;
    Rng prng(2);
    std::vector<int> perm;
    for (std::size_t idx : prng.sample_without_replacement(10, 10)) perm.push_back(static_cast<int>(idx));
    for (int row = 0; row < 10; ++row) {
        for (int ch = 0; ch < 10; ++ch)
            shuffled.features[static_cast<std::size_t>(row) * 10 + ch] = cloud.feature(perm[row], ch);
        shuffled.pixels[row] = cloud.pixels[perm[row]];
        shuffled.depths[row] = cloud.depths[perm[row]];
    }

    const auto a = m.forward_tensors(cloud, test_k(), test_prior());
    const auto b = m.forward_tensors(shuffled, test_k(), test_prior());
    for (int i = 0; i < 3; ++i) {
        CHECK(b.ax.at(i) == Catch::Approx(a.ax.at(i)).margin(1e-9));
        CHECK(b.az.at(i) == Catch::Approx(a.az.at(i)).margin(1e-9));
        CHECK(b.t_hat.at(i) == Catch::Approx(a.t_hat.at(i)).margin(1e-9));
        CHECK(b.s_hat.at(i) == Catch::Approx(a.s_hat.at(i)).margin(1e-9));
    }
    CHECK(b.cx.item() == Catch::Approx(a.cx.item()).margin(1e-9));
    CHECK(b.cz.item() == Catch::Approx(a.cz.item()).margin(1e-9));

    // Point-embedding equivariance: row i of the shuffled encoding matches
    // row perm[i] of the original.
    const Tensor ea = m.encode(cloud), eb = m.encode(shuffled);
    for (int row = 0; row < 10; ++row)
        for (int c = 0; c < 8; ++c)
            CHECK(eb.at(static_cast<std::size_t>(row) * 8 + c) ==
                  Catch::Approx(ea.at(static_cast<std::size_t>(perm[row]) * 8 + c)).margin(1e-9));
}

TEST_CASE("full model gradients agree with finite differences") {
    Rng rng(101);
    auto m = model::Model::create(small_cfg(), 41);
    for (auto& p : m.params())
        for (std::size_t i = 0; i < p.size(); ++i) p.mutable_data()[i] += 0.1 * rng.normal();
    const auto cloud = random_cloud(8, 10, 0, 55);
    const auto prior = test_prior();
    const Tensor ax_star = Tensor::from({1, 3}, {0.0, 1.0, 0.0});
    const Tensor az_star = Tensor::from({1, 3}, {0.0, 0.0, -1.0});
    const Tensor t_star = Tensor::from({1, 3}, {0.05, -0.08, 0.75});
    const Tensor s_star = Tensor::from({1, 3}, {0.2, 0.21, 0.09});

    auto params = m.params();
    const double err = testutil::grad_check(params, [&] {
        const auto ft = m.forward_tensors(cloud, test_k(), prior);
        losses::ComponentLosses parts;
        parts.rx = losses::loss_axis(ft.ax, ax_star);
        parts.rz = losses::loss_axis(ft.az, az_star);
        parts.ra = losses::loss_angular(ft.ax, ft.az);
        parts.t = losses::loss_translation(ft.t_hat, t_star);
        parts.s = losses::loss_scale(ft.s_hat, s_star);
        parts.conx = losses::loss_confidence(ft.cx, ft.ax, ax_star, -5.0);
        parts.conz = losses::loss_confidence(ft.cz, ft.az, az_star, -5.0);
        return losses::loss_total(parts, losses::LossWeights{});
    });
    CHECK(err < 1e-5);
}
