#pragma once

// Second-stage training losses. Vector L1 here is the mean of absolute
// components, so the lambda weights stay comparable across loss dimensions.

#include "transnet/common.hpp"
#include "transnet/tensor.hpp"

namespace transnet::losses {

using ad::Tensor;

struct LossWeights {
    double rx = 8e-4, rz = 8e-4, ra = 4e-4, t = 8e-4, s = 8e-4, conx = 1e-4, conz = 1e-4;
    double alpha = -5.0;  // confidence sharpness, negative

    void validate() const {
        if (rx < 0 || rz < 0 || ra < 0 || t < 0 || s < 0 || conx < 0 || conz < 0)
            throw ConfigError("loss weights must be non-negative");
        if (alpha >= 0.0) throw ConfigError("confidence alpha must be negative");
    }
};

// Mean absolute componentwise error.
inline Tensor loss_translation(const Tensor& t_hat, const Tensor& t_star) {
    return ad::mean_all(ad::abs_(ad::sub(t_hat, t_star)));
}

// L1 plus cosine similarity: mean|a_hat - a*| + 1 - <a_hat, a*>.
inline Tensor loss_axis(const Tensor& a_hat, const Tensor& a_star) {
    const Tensor l1 = ad::mean_all(ad::abs_(ad::sub(a_hat, a_star)));
    const Tensor cos = ad::sum_all(ad::mul(a_hat, a_star));
    return ad::add(l1, ad::add_scalar(ad::neg(cos), 1.0));
}

// |<a_x, a_z>|: zero exactly at perpendicularity, bounded, minimized there.
inline Tensor loss_angular(const Tensor& ax_hat, const Tensor& az_hat) {
    return ad::abs_(ad::sum_all(ad::mul(ax_hat, az_hat)));
}

// |c - exp(alpha * ||a_hat - a*||_2)|.
inline Tensor loss_confidence(const Tensor& c, const Tensor& a_hat, const Tensor& a_star, double alpha) {
    const Tensor d = ad::sub(a_hat, a_star);
    const Tensor dist = ad::sqrt_(ad::sum_all(ad::mul(d, d)));
    const Tensor target = ad::exp_(ad::scale(dist, alpha));
    return ad::abs_(ad::sub(c, target));
}

inline Tensor loss_scale(const Tensor& s_hat, const Tensor& s_star) {
    return ad::mean_all(ad::abs_(ad::sub(s_hat, s_star)));
}

struct ComponentLosses {
    Tensor rx, rz, ra, t, s, conx, conz;
};

// Weighted sum in fixed accumulation order (s, t, rx, rz, ra, conx, conz).
inline Tensor loss_total(const ComponentLosses& parts, const LossWeights& w) {
    w.validate();
    Tensor total = ad::scale(parts.s, w.s);
    total = ad::add(total, ad::scale(parts.t, w.t));
    total = ad::add(total, ad::scale(parts.rx, w.rx));
    total = ad::add(total, ad::scale(parts.rz, w.rz));
    total = ad::add(total, ad::scale(parts.ra, w.ra));
    total = ad::add(total, ad::scale(parts.conx, w.conx));
    total = ad::add(total, ad::scale(parts.conz, w.conz));
    return total;
}

}  // namespace transnet::losses
