#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "transnet/tensor.hpp"

#include "test_util.hpp"

using namespace transnet;
using ad::Tensor;

TEST_CASE("matmul forward") {
    const Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    const Tensor b = Tensor::from({2, 2}, {3, 4, 5, 6});
    const Tensor c = ad::matmul(eye, b);
    CHECK(c.data() == std::vector<double>{3, 4, 5, 6});

    const Tensor r = ad::matmul(Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 1}, {3, 4}));
    CHECK(r.item() == 11.0);

    CHECK_THROWS_AS(ad::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
}

TEST_CASE("matmul gradient matches hand value") {
    Tensor a = Tensor::from({1, 2}, {1, 1}, true);
    const Tensor b = Tensor::from({2, 1}, {2, 3});
    ad::backward(ad::sum_all(ad::matmul(a, b)));
    CHECK(a.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    CHECK(a.grad()[1] == Catch::Approx(3.0).margin(1e-12));
}

TEST_CASE("elementwise forward values") {
    CHECK(ad::relu(Tensor::from({3}, {-1, 0, 2})).data() == std::vector<double>{0, 0, 2});
    CHECK(ad::sigmoid(Tensor::scalar(0.0)).item() == Catch::Approx(0.5).margin(1e-15));
    CHECK_THROWS_AS(ad::add(Tensor::zeros({2}), Tensor::zeros({3})), DimensionError);

    Tensor x = Tensor::from({2}, {1, 2}, true);
    ad::backward(ad::sum_all(ad::mul(x, x)));
    CHECK(x.grad()[0] == Catch::Approx(2.0).margin(1e-12));
    CHECK(x.grad()[1] == Catch::Approx(4.0).margin(1e-12));
}

TEST_CASE("reductions and shape ops") {
    const Tensor sm = ad::softmax_rows(Tensor::from({1, 3}, {0, 0, 0}));
    for (int i = 0; i < 3; ++i) CHECK(sm.at(i) == Catch::Approx(1.0 / 3.0).margin(1e-15));

    const Tensor mp = ad::max_pool_rows(Tensor::from({2, 2}, {1, 5, 3, 2}));
    CHECK(mp.data() == std::vector<double>{3, 5});

    const Tensor cc = ad::concat_cols(Tensor::from({1, 1}, {1}), Tensor::from({1, 1}, {2}));
    CHECK(cc.shape() == ad::Shape{1, 2});
    CHECK(cc.data() == std::vector<double>{1, 2});
}

TEST_CASE("softmax rows sum to one and layernorm standardizes") {
    Rng rng(11);
    const Tensor x = testutil::random_tensor({5, 7}, rng, false);
    const Tensor sm = ad::softmax_rows(x);
    const Tensor ln = ad::layernorm_rows(x);
    for (int i = 0; i < 5; ++i) {
        double s = 0.0, mean = 0.0, var = 0.0;
        for (int j = 0; j < 7; ++j) {
            s += sm.at(i * 7 + j);
            mean += ln.at(i * 7 + j);
        }
        mean /= 7.0;
        for (int j = 0; j < 7; ++j) var += (ln.at(i * 7 + j) - mean) * (ln.at(i * 7 + j) - mean);
        CHECK(s == Catch::Approx(1.0).margin(1e-12));
        CHECK(mean == Catch::Approx(0.0).margin(1e-9));
        CHECK(var / 7.0 == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("max-pool ties route gradient to the first maximal row") {
    Tensor x = Tensor::from({2, 1}, {4, 4}, true);
    ad::backward(ad::sum_all(ad::max_pool_rows(x)));
    CHECK(x.grad()[0] == 1.0);
    CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("backward basics") {
    Tensor w = Tensor::from({1, 2}, {1, 2}, true);
    const Tensor x = Tensor::from({2, 1}, {3, 4});
    ad::backward(ad::sum_all(ad::matmul(w, x)));
    CHECK(w.grad() == std::vector<double>{3, 4});

    Tensor v = Tensor::from({1}, {2}, true);
    const Tensor d = ad::add_scalar(v, -1.0);
    ad::backward(ad::mean_all(ad::mul(d, d)));
    CHECK(v.grad()[0] == Catch::Approx(2.0).margin(1e-12));

    CHECK_THROWS_AS(ad::backward(Tensor::zeros({2}, true)), ContractError);
}

TEST_CASE("backward accumulates across calls until reset") {
    Tensor w = Tensor::from({1}, {3}, true);
    auto loss = [&] { return ad::mul(w, w); };
    ad::backward(loss());
    ad::backward(loss());
    CHECK(w.grad()[0] == Catch::Approx(12.0).margin(1e-12));
    w.zero_grad();
    ad::backward(loss());
    CHECK(w.grad()[0] == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("fan-out sums path contributions") {
    // loss = x*x + 3x has two paths into x: d/dx = 2x + 3.
    Tensor x = Tensor::from({1}, {5}, true);
    ad::backward(ad::add(ad::mul(x, x), ad::scale(x, 3.0)));
    CHECK(x.grad()[0] == Catch::Approx(13.0).margin(1e-12));
}

TEST_CASE("finite differences for every differentiable op") {
    Rng rng(29);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor a = testutil::random_tensor({3, 4}, rng);
        Tensor b = testutil::random_tensor({3, 4}, rng);
        Tensor m = testutil::random_tensor({4, 2}, rng);
        // Keep |.| and clamp kinks away from sampled points.
        for (auto& v : a.mutable_data())
            if (std::fabs(v) < 1e-3) v = 0.5;

        const auto check = [&](const char* name, std::function<Tensor()> f) {
            INFO(name);
            CHECK(testutil::grad_check({a}, f) < 1e-5);
        };
        check("add", [&] { return ad::sum_all(ad::add(a, b)); });
        check("sub", [&] { return ad::sum_all(ad::sub(a, b)); });
        check("mul", [&] { return ad::sum_all(ad::mul(a, b)); });
        check("sigmoid", [&] { return ad::sum_all(ad::sigmoid(a)); });
        check("exp", [&] { return ad::sum_all(ad::exp_(a)); });
        check("softplus", [&] { return ad::sum_all(ad::softplus(a)); });
        check("abs", [&] { return ad::sum_all(ad::abs_(a)); });
        check("scale", [&] { return ad::sum_all(ad::scale(a, -1.7)); });
        check("matmul", [&] { return ad::sum_all(ad::matmul(a, m)); });
        check("transpose", [&] { return ad::sum_all(ad::matmul(ad::transpose(a), b)); });
        check("softmax", [&] { return ad::sum_all(ad::mul(ad::softmax_rows(a), b)); });
        check("layernorm", [&] { return ad::sum_all(ad::mul(ad::layernorm_rows(a), b)); });
        check("mean_rows", [&] { return ad::sum_all(ad::mul(ad::mean_rows(a), ad::mean_rows(b))); });
        check("expand_slice", [&] {
            return ad::sum_all(ad::mul(ad::expand_rows(ad::mean_rows(a), 3), b));
        });
        check("concat_cols", [&] { return ad::sum_all(ad::mul(ad::concat_cols(a, a), ad::concat_cols(b, b))); });
        check("pow", [&] { return ad::sum_all(ad::pow_scalar(ad::add_scalar(ad::mul(a, a), 1.0), -0.5)); });
        check("scale_by", [&] { return ad::sum_all(ad::scale_by(a, ad::mean_all(b))); });
    }
}

TEST_CASE("finite differences through a 3-layer MLP") {
    Rng rng(31);
    Tensor w1 = testutil::random_tensor({4, 8}, rng);
    Tensor w2 = testutil::random_tensor({8, 8}, rng);
    Tensor w3 = testutil::random_tensor({8, 1}, rng);
    const Tensor x = testutil::random_tensor({3, 4}, rng, false);
    auto forward = [&] {
        Tensor h = ad::relu(ad::matmul(x, w1));
        h = ad::sigmoid(ad::matmul(h, w2));
        return ad::mean_all(ad::matmul(h, w3));
    };
    CHECK(testutil::grad_check({w1, w2, w3}, forward) < 1e-5);
}

TEST_CASE("conv3x3 gradient and shape") {
    Rng rng(37);
    Tensor w = testutil::random_tensor({2, 3, 3, 3}, rng);
    Tensor b = testutil::random_tensor({2}, rng);
    const Tensor x = testutil::random_tensor({3, 5, 4}, rng, false);
    const Tensor y = ad::conv3x3(x, w, b);
    CHECK(y.shape() == ad::Shape{2, 5, 4});
    auto forward = [&] { return ad::sum_all(ad::mul(ad::conv3x3(x, w, b), ad::conv3x3(x, w, b))); };
    CHECK(testutil::grad_check({w, b}, forward) < 1e-5);
}

TEST_CASE("forward is deterministic") {
    Rng rng(41);
    const Tensor a = testutil::random_tensor({6, 6}, rng, false);
    const Tensor r1 = ad::softmax_rows(ad::matmul(a, a));
    const Tensor r2 = ad::softmax_rows(ad::matmul(a, a));
    CHECK(r1.data() == r2.data());
}

TEST_CASE("learning-rate schedule") {
    ad::OptimConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.warmup_steps = 1000;
    cfg.total_steps = 10000;
    cfg.anneal_point = 0.72;
    CHECK(ad::scheduled_lr(cfg, 1) == Catch::Approx(1e-6).margin(1e-18));
    CHECK(ad::scheduled_lr(cfg, 1000) == Catch::Approx(1e-3).margin(1e-15));
    CHECK(ad::scheduled_lr(cfg, 5000) == Catch::Approx(1e-3).margin(1e-15));  // constant plateau
    CHECK(ad::scheduled_lr(cfg, 10000) == Catch::Approx(0.0).margin(1e-15)); // cosine endpoint
    const double mid = ad::scheduled_lr(cfg, 7200 + 1400);  // halfway through the anneal
    CHECK(mid == Catch::Approx(0.5e-3).margin(1e-9));
}

TEST_CASE("plain SGD step") {
    ad::OptimConfig cfg;
    cfg.base_lr = 0.1;
    cfg.warmup_steps = 0;
    cfg.total_steps = 1000000;
    cfg.plain_sgd = true;
    ad::Optimizer opt(cfg);
    Tensor w = Tensor::from({1}, {1.0}, true);
    ad::backward(ad::sum_all(w));
    opt.step({w}, 1);
    CHECK(w.at(0) == Catch::Approx(0.9).margin(1e-15));
    CHECK(w.grad()[0] == 0.0);  // zeroed after the step
}

TEST_CASE("adaptive-moment step matches hand computation") {
    ad::OptimConfig cfg;
    cfg.base_lr = 0.1;
    cfg.warmup_steps = 0;
    cfg.total_steps = 1000000;
    ad::Optimizer opt(cfg);
    Tensor w = Tensor::from({1}, {1.0}, true);
    ad::backward(ad::scale(w, 2.0));  // grad = 2
    opt.step({w}, 1);
    // m̂ = 2, v̂ = 4; update = 0.1 * 2 / (2 + 1e-8).
    CHECK(w.at(0) == Catch::Approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8)).margin(1e-12));
}

TEST_CASE("optimizer rejects parameters without grads") {
    ad::Optimizer opt(ad::OptimConfig{});
    Tensor w = Tensor::from({1}, {1.0});
    CHECK_THROWS_AS(opt.step({w}, 1), ContractError);
}
