#pragma once

// Reverse-mode automatic differentiation over dense row-major float64 tensors.
// Recording is define-by-run: every op that touches a grad-connected input
// appends a node carrying a backward rule; backward() replays nodes in exact
// reverse recording order and accumulates gradients additively across fan-out.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "transnet/common.hpp"

namespace transnet::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

struct Node;
using NodeRef = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;  // leaf parameter
    bool in_graph = false;       // reachable-from-parameters interior node
    std::vector<double> grad;
    std::vector<NodeRef> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
    std::uint64_t seq = 0;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline std::uint64_t& seq_counter() {
    thread_local std::uint64_t c = 0;
    return c;
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodeRef n) : node_(std::move(n)) {}

    static Tensor from(const Shape& shape, std::vector<double> data, bool requires_grad = false) {
        if (data.size() != numel(shape))
            throw DimensionError("data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = shape;
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->in_graph = requires_grad;
        if (requires_grad) n->ensure_grad();
        n->seq = ++seq_counter();
        return Tensor(n);
    }

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return from(shape, std::vector<double>(numel(shape), 0.0), requires_grad);
    }

    static Tensor full(const Shape& shape, double v, bool requires_grad = false) {
        return from(shape, std::vector<double>(numel(shape), v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }
    const std::vector<double>& grad() const {
        if (!node_->requires_grad) throw ContractError("grad requested on tensor without requires_grad");
        const_cast<Node*>(node_.get())->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
    double item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }
    double at(std::size_t i) const { return node_->value[i]; }
    NodeRef node() const { return node_; }
    bool valid() const { return node_ != nullptr; }

private:
    NodeRef node_;
};

namespace detail {

inline bool connected(const Tensor& t) { return t.node()->in_graph; }

inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> parents,
                          std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool any = false;
    for (const auto& p : parents) any = any || connected(p);
    if (any) {
        n->in_graph = true;
        for (const auto& p : parents) n->parents.push_back(p.node());
        n->backprop = std::move(backprop);
    }
    n->seq = ++seq_counter();
    return Tensor(n);
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw DimensionError("matmul: " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& av = a.data();
    const auto& bv = b.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            for (int j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result({m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
        const auto& g = self.grad;
        if (an->in_graph) {
            an->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int p = 0; p < k; ++p) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j) acc += g[i * n + j] * bn->value[p * n + j];
                    an->grad[i * k + p] += acc;
                }
        }
        if (bn->in_graph) {
            bn->ensure_grad();
            for (int p = 0; p < k; ++p)
                for (int i = 0; i < m; ++i) {
                    const double aip = an->value[i * k + p];
                    if (aip == 0.0) continue;
                    for (int j = 0; j < n; ++j) bn->grad[p * n + j] += aip * g[i * n + j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("transpose: rank-2 required, got " + shape_str(a.shape()));
    const int m = a.shape()[0], n = a.shape()[1];
    std::vector<double> out(a.size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
    auto an = a.node();
    return detail::make_result({n, m}, std::move(out), {a}, [an, m, n](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise ops

namespace detail {

inline Tensor binary_ew(const Tensor& a, const Tensor& b, const char* name,
                        double (*f)(double, double),
                        void (*df)(double x, double y, double g, double& dx, double& dy)) {
    check_same_shape(a, b, name);
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i], b.data()[i]);
    auto an = a.node();
    auto bn = b.node();
    return make_result(a.shape(), std::move(out), {a, b}, [an, bn, df](Node& self) {
        const bool ga = an->in_graph, gb = bn->in_graph;
        if (ga) an->ensure_grad();
        if (gb) bn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            double dx = 0.0, dy = 0.0;
            df(an->value[i], bn->value[i], self.grad[i], dx, dy);
            if (ga) an->grad[i] += dx;
            if (gb) bn->grad[i] += dy;
        }
    });
}

inline Tensor unary_ew(const Tensor& a, double (*f)(double), double (*df)(double x, double y)) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    auto an = a.node();
    return make_result(a.shape(), std::move(out), {a}, [an, df](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * df(an->value[i], self.value[i]);
    });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(a, b, "add", [](double x, double y) { return x + y; },
                             [](double, double, double g, double& dx, double& dy) { dx = g; dy = g; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(a, b, "sub", [](double x, double y) { return x - y; },
                             [](double, double, double g, double& dx, double& dy) { dx = g; dy = -g; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(a, b, "mul", [](double x, double y) { return x * y; },
                             [](double x, double y, double g, double& dx, double& dy) { dx = g * y; dy = g * x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::binary_ew(a, b, "div", [](double x, double y) { return x / y; },
                             [](double x, double y, double g, double& dx, double& dy) {
                                 dx = g / y;
                                 dy = -g * x / (y * y);
                             });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return x > 0.0 ? x : 0.0; },
                            [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                            [](double, double y) { return y * (1.0 - y); });
}

inline Tensor exp_(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Tensor log_(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt_(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor abs_(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return std::fabs(x); },
                            [](double x, double) { return x >= 0.0 ? 1.0 : -1.0; });
}

inline Tensor softplus(const Tensor& a) {
    return detail::unary_ew(a,
                            [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
                            [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

// Elementwise max with a constant; gradient passes through where x >= c.
inline Tensor clamp_min(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] < c ? c : a.data()[i];
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, c](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (an->value[i] >= c) an->grad[i] += self.grad[i];
    });
}

inline Tensor neg(const Tensor& a) {
    return detail::unary_ew(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

// Scale by a plain constant (the only implicit broadcast besides scalar tensors).
inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, c](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
}

inline Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

inline Tensor pow_scalar(const Tensor& a, double p) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(a.data()[i], p);
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, p](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * p * std::pow(an->value[i], p - 1.0);
    });
}

// Multiply every element of a by a scalar (shape {1}) tensor.
inline Tensor scale_by(const Tensor& a, const Tensor& s) {
    if (s.size() != 1) throw DimensionError("scale_by: scalar tensor required, got " + shape_str(s.shape()));
    const double sv = s.data()[0];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * sv;
    auto an = a.node();
    auto sn = s.node();
    return detail::make_result(a.shape(), std::move(out), {a, s}, [an, sn](Node& self) {
        const double sv = sn->value[0];
        if (an->in_graph) {
            an->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * sv;
        }
        if (sn->in_graph) {
            sn->ensure_grad();
            double acc = 0.0;
            for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * an->value[i];
            sn->grad[0] += acc;
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and shape ops

inline Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_result({1}, {acc}, {a}, [an](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        const double g = self.grad[0];
        for (auto& v : an->grad) v += g;
    });
}

inline Tensor mean_all(const Tensor& a) {
    if (a.size() == 0) throw DimensionError("mean_all: empty tensor");
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    auto an = a.node();
    return detail::make_result({1}, {acc * inv}, {a}, [an, inv](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        const double g = self.grad[0] * inv;
        for (auto& v : an->grad) v += g;
    });
}

// Mean over rows of an (n x d) matrix -> (1 x d).
inline Tensor mean_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("mean_rows: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    std::vector<double> out(d, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[j] += a.data()[i * d + j];
    const double inv = 1.0 / n;
    for (auto& v : out) v *= inv;
    auto an = a.node();
    return detail::make_result({1, d}, std::move(out), {a}, [an, n, d, inv](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) an->grad[i * d + j] += self.grad[j] * inv;
    });
}

// Columnwise max over points of an (n x d) matrix -> (1 x d).
// Gradient routes only to the argmax entry; ties go to the first index.
inline Tensor max_pool_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("max_pool_rows: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    if (n == 0) throw DimensionError("max_pool_rows: no rows");
    std::vector<double> out(d);
    auto arg = std::make_shared<std::vector<int>>(d, 0);
    for (int j = 0; j < d; ++j) {
        double best = a.data()[j];
        int bi = 0;
        for (int i = 1; i < n; ++i) {
            const double v = a.data()[i * d + j];
            if (v > best) {
                best = v;
                bi = i;
            }
        }
        out[j] = best;
        (*arg)[j] = bi;
    }
    auto an = a.node();
    return detail::make_result({1, d}, std::move(out), {a}, [an, arg, d](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int j = 0; j < d; ++j) an->grad[(*arg)[j] * d + j] += self.grad[j];
    });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const int n = parts[0].shape()[0];
    int dtot = 0;
    for (const auto& p : parts) {
        if (p.shape().size() != 2 || p.shape()[0] != n)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
        dtot += p.shape()[1];
    }
    std::vector<double> out(static_cast<std::size_t>(n) * dtot);
    int off = 0;
    for (const auto& p : parts) {
        const int d = p.shape()[1];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out[i * dtot + off + j] = p.data()[i * d + j];
        off += d;
    }
    std::vector<NodeRef> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result({n, dtot}, std::move(out), parts, [nodes, n, dtot](Node& self) {
        int off = 0;
        for (const auto& pn : nodes) {
            const int d = pn->shape[1];
            if (pn->in_graph) {
                pn->ensure_grad();
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) pn->grad[i * d + j] += self.grad[i * dtot + off + j];
            }
            off += d;
        }
    });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) { return concat_cols(std::vector<Tensor>{a, b}); }

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.shape().size() != 2) throw DimensionError("slice_rows: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    if (r0 < 0 || r1 > n || r0 >= r1) throw DimensionError("slice_rows: range out of bounds");
    std::vector<double> out(static_cast<std::size_t>(r1 - r0) * d);
    std::copy(a.data().begin() + static_cast<std::size_t>(r0) * d, a.data().begin() + static_cast<std::size_t>(r1) * d,
              out.begin());
    auto an = a.node();
    return detail::make_result({r1 - r0, d}, std::move(out), {a}, [an, r0, d](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            an->grad[static_cast<std::size_t>(r0) * d + i] += self.grad[i];
    });
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.shape().size() != 2) throw DimensionError("slice_cols: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    if (c0 < 0 || c1 > d || c0 >= c1) throw DimensionError("slice_cols: range out of bounds");
    const int w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(n) * w);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < w; ++j) out[i * w + j] = a.data()[i * d + c0 + j];
    auto an = a.node();
    return detail::make_result({n, w}, std::move(out), {a}, [an, n, d, c0, w](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < w; ++j) an->grad[i * d + c0 + j] += self.grad[i * w + j];
    });
}

// Explicit expand of a (1 x d) row to (n x d); the backward rule sums over rows.
inline Tensor expand_rows(const Tensor& a, int n) {
    if (a.shape().size() != 2 || a.shape()[0] != 1)
        throw DimensionError("expand_rows: (1 x d) required, got " + shape_str(a.shape()));
    const int d = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(n) * d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) out[i * d + j] = a.data()[j];
    auto an = a.node();
    return detail::make_result({n, d}, std::move(out), {a}, [an, n, d](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) an->grad[j] += self.grad[i * d + j];
    });
}

inline Tensor reshape(const Tensor& a, const Shape& shape) {
    if (numel(shape) != a.size())
        throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
    auto an = a.node();
    return detail::make_result(shape, std::vector<double>(a.data()), {a}, [an](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

// Softmax over the last axis of an (n x d) matrix; rows sum to 1.
inline Tensor softmax_rows(const Tensor& a) {
    if (a.shape().size() != 2) throw DimensionError("softmax_rows: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    std::vector<double> out(a.size());
    for (int i = 0; i < n; ++i) {
        double mx = a.data()[i * d];
        for (int j = 1; j < d; ++j) mx = std::max(mx, a.data()[i * d + j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            out[i * d + j] = std::exp(a.data()[i * d + j] - mx);
            s += out[i * d + j];
        }
        const double inv = 1.0 / s;
        for (int j = 0; j < d; ++j) out[i * d + j] *= inv;
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, n, d](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += self.value[i * d + j] * self.grad[i * d + j];
            for (int j = 0; j < d; ++j)
                an->grad[i * d + j] += self.value[i * d + j] * (self.grad[i * d + j] - dot);
        }
    });
}

// Layer normalization over the last axis: zero mean, unit variance per row.
inline Tensor layernorm_rows(const Tensor& a, double eps = 1e-12) {
    if (a.shape().size() != 2) throw DimensionError("layernorm_rows: rank-2 required");
    const int n = a.shape()[0], d = a.shape()[1];
    std::vector<double> out(a.size());
    auto stats = std::make_shared<std::vector<double>>(2 * n);  // mean, inv std per row
    for (int i = 0; i < n; ++i) {
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += a.data()[i * d + j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = a.data()[i * d + j] - mu;
            var += c * c;
        }
        var /= d;
        const double istd = 1.0 / std::sqrt(var + eps);
        (*stats)[2 * i] = mu;
        (*stats)[2 * i + 1] = istd;
        for (int j = 0; j < d; ++j) out[i * d + j] = (a.data()[i * d + j] - mu) * istd;
    }
    auto an = a.node();
    return detail::make_result(a.shape(), std::move(out), {a}, [an, stats, n, d](Node& self) {
        if (!an->in_graph) return;
        an->ensure_grad();
        for (int i = 0; i < n; ++i) {
            const double istd = (*stats)[2 * i + 1];
            double gsum = 0.0, gysum = 0.0;
            for (int j = 0; j < d; ++j) {
                gsum += self.grad[i * d + j];
                gysum += self.grad[i * d + j] * self.value[i * d + j];
            }
            for (int j = 0; j < d; ++j) {
                const double y = self.value[i * d + j];
                an->grad[i * d + j] += istd * (self.grad[i * d + j] - gsum / d - y * gysum / d);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// 3x3 same-padding convolution over (C x H x W) images.

inline Tensor conv3x3(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 3) throw DimensionError("conv3x3: input rank-3 (CxHxW) required");
    if (w.shape().size() != 4 || w.shape()[2] != 3 || w.shape()[3] != 3)
        throw DimensionError("conv3x3: weight (Co x Ci x 3 x 3) required");
    const int ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
    const int co = w.shape()[0];
    if (w.shape()[1] != ci) throw DimensionError("conv3x3: channel mismatch");
    if (b.shape() != Shape{co}) throw DimensionError("conv3x3: bias shape mismatch");
    std::vector<double> out(static_cast<std::size_t>(co) * h * wd, 0.0);
    const auto& xv = x.data();
    const auto& wv = w.data();
    for (int o = 0; o < co; ++o) {
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < wd; ++j) {
                double acc = b.data()[o];
                for (int c = 0; c < ci; ++c)
                    for (int di = -1; di <= 1; ++di) {
                        const int ii = i + di;
                        if (ii < 0 || ii >= h) continue;
                        for (int dj = -1; dj <= 1; ++dj) {
                            const int jj = j + dj;
                            if (jj < 0 || jj >= wd) continue;
                            acc += xv[(c * h + ii) * wd + jj] * wv[((o * ci + c) * 3 + di + 1) * 3 + dj + 1];
                        }
                    }
                out[(o * h + i) * wd + j] = acc;
            }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return detail::make_result({co, h, wd}, std::move(out), {x, w, b}, [xn, wn, bn, ci, co, h, wd](Node& self) {
        const auto& g = self.grad;
        if (bn->in_graph) {
            bn->ensure_grad();
            for (int o = 0; o < co; ++o) {
                double acc = 0.0;
                for (int i = 0; i < h; ++i)
                    for (int j = 0; j < wd; ++j) acc += g[(o * h + i) * wd + j];
                bn->grad[o] += acc;
            }
        }
        if (wn->in_graph) {
            wn->ensure_grad();
            for (int o = 0; o < co; ++o)
                for (int c = 0; c < ci; ++c)
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            double acc = 0.0;
                            for (int i = std::max(0, -di); i < std::min(h, h - di); ++i)
                                for (int j = std::max(0, -dj); j < std::min(wd, wd - dj); ++j)
                                    acc += xn->value[(c * h + i + di) * wd + j + dj] * g[(o * h + i) * wd + j];
                            wn->grad[((o * ci + c) * 3 + di + 1) * 3 + dj + 1] += acc;
                        }
        }
        if (xn->in_graph) {
            xn->ensure_grad();
            for (int o = 0; o < co; ++o)
                for (int c = 0; c < ci; ++c)
                    for (int di = -1; di <= 1; ++di)
                        for (int dj = -1; dj <= 1; ++dj) {
                            const double wv = wn->value[((o * ci + c) * 3 + di + 1) * 3 + dj + 1];
                            if (wv == 0.0) continue;
                            for (int i = std::max(0, -di); i < std::min(h, h - di); ++i)
                                for (int j = std::max(0, -dj); j < std::min(wd, wd - dj); ++j)
                                    xn->grad[(c * h + i + di) * wd + j + dj] += wv * g[(o * h + i) * wd + j];
                        }
        }
    });
}

// ---------------------------------------------------------------------------
// Backward

inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.node()->in_graph) return;  // nothing reachable requires grad

    // Collect the recorded subgraph reachable from the loss.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{loss.node().get()};
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->in_graph && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    // Interior gradients are scratch; leaf (requires_grad) gradients accumulate
    // across backward calls until explicitly reset.
    for (Node* n : order) {
        n->ensure_grad();
        if (!n->requires_grad) std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    loss.node()->grad[0] += 1.0;
    // Exact reverse recording order.
    std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
    for (Node* n : order)
        if (n->backprop) n->backprop(*n);
}

// ---------------------------------------------------------------------------
// Optimizer: adaptive-moment update with linear warm-up then cosine annealing.

struct OptimConfig {
    double base_lr = 1e-3;
    int warmup_steps = 1000;
    int total_steps = 10000;
    double anneal_point = 0.72;  // fraction of total_steps where cosine decay begins
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool plain_sgd = false;
};

// Effective learning rate at 1-based step index.
inline double scheduled_lr(const OptimConfig& cfg, int step) {
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.base_lr * static_cast<double>(step) / cfg.warmup_steps;
    const double anneal_start = std::max(static_cast<double>(cfg.warmup_steps), cfg.anneal_point * cfg.total_steps);
    if (step < anneal_start || cfg.total_steps <= anneal_start) return cfg.base_lr;
    const double t = std::min(1.0, (step - anneal_start) / (cfg.total_steps - anneal_start));
    return cfg.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

class Optimizer {
public:
    explicit Optimizer(OptimConfig cfg) : cfg_(cfg) {}

    const OptimConfig& config() const { return cfg_; }

    // Updates parameters in place at the scheduled lr, then zeros their grads.
    void step(const std::vector<Tensor>& params, int step_index) {
        const double lr = scheduled_lr(cfg_, step_index);
        for (const auto& p : params) {
            Node* n = p.node().get();
            if (!n->requires_grad) throw ContractError("optimizer_step: tensor without requires_grad");
            if (n->grad.size() != n->value.size()) throw ContractError("optimizer_step: parameter has no grad");
            auto& st = state_[n];
            if (st.m.empty()) {
                st.m.assign(n->value.size(), 0.0);
                st.v.assign(n->value.size(), 0.0);
            }
            if (cfg_.plain_sgd) {
                for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] -= lr * n->grad[i];
            } else {
                st.t += 1;
                const double bc1 = 1.0 - std::pow(cfg_.beta1, st.t);
                const double bc2 = 1.0 - std::pow(cfg_.beta2, st.t);
                for (std::size_t i = 0; i < n->value.size(); ++i) {
                    const double g = n->grad[i];
                    st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * g;
                    st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * g * g;
                    n->value[i] -= lr * (st.m[i] / bc1) / (std::sqrt(st.v[i] / bc2) + cfg_.eps);
                }
            }
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
        }
    }

    struct MomentState {
        std::vector<double> m, v;
        long t = 0;
    };

    // Exposed for checkpoint save/restore.
    MomentState& state_for(const Tensor& p) { return state_[p.node().get()]; }

private:
    OptimConfig cfg_;
    std::unordered_map<Node*, MomentState> state_;
};

}  // namespace transnet::ad
