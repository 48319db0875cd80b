#pragma once

// Reverse-mode autodiff over dense rank-1..4 double tensors.
// Graphs are built dynamically per forward pass and freed after backward.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "metabin/errors.hpp"

namespace metabin {

using Shape = std::vector<int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_shape();
        v_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), v_(std::move(values)) {
        check_shape();
        if (static_cast<int64_t>(v_.size()) != numel_of(shape_))
            throw DimensionError("Tensor: value count " + std::to_string(v_.size()) +
                                 " does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.v_.begin(), t.v_.end(), v);
        return t;
    }

    int64_t rank() const { return static_cast<int64_t>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(v_.size()); }
    int64_t size(int64_t i) const { return shape_[static_cast<size_t>(i)]; }
    const Shape& shape() const { return shape_; }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& values() { return v_; }
    const std::vector<double>& values() const { return v_; }

    double& operator[](int64_t i) { return v_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return v_[static_cast<size_t>(i)]; }

    // rank-4 accessors
    double& at4(int64_t n, int64_t c, int64_t h, int64_t w) {
        return v_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    double at4(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return v_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    // rank-2 accessors
    double& at2(int64_t i, int64_t j) { return v_[static_cast<size_t>(i * shape_[1] + j)]; }
    double at2(int64_t i, int64_t j) const { return v_[static_cast<size_t>(i * shape_[1] + j)]; }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    static int64_t numel_of(const Shape& s) {
        int64_t n = 1;
        for (int64_t d : s) n *= d;
        return n;
    }

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 4)
            throw DimensionError("Tensor rank must be 1..4, got " + shape_str(shape_));
        for (int64_t d : shape_)
            if (d < 0) throw DimensionError("negative dimension in " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> v_;
};

// Reported non-differentiable-point proximity (relu kinks, max/min ties).
// The finite-difference checker activates this to exclude degenerate points.
struct KinkMonitor {
    static bool& active() {
        thread_local bool a = false;
        return a;
    }
    static double& min_margin() {
        thread_local double m = std::numeric_limits<double>::infinity();
        return m;
    }
    static void reset() { min_margin() = std::numeric_limits<double>::infinity(); }
    static void report(double margin) {
        if (active() && margin < min_margin()) min_margin() = margin;
    }
};

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand, same shape as value
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(const Node&)> backward_fn;
    const char* op = "leaf";

    bool is_leaf() const { return parents.empty(); }

    void accumulate(const Tensor& g) {
        if (grad.numel() == 0) grad = Tensor(value.shape());
        const double* src = g.data();
        double* dst = grad.data();
        int64_t n = grad.numel();
        for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
    }
    void zero_grad() {
        if (grad.numel() != 0) std::fill(grad.values().begin(), grad.values().end(), 0.0);
    }
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor t, bool requires_grad = false) : n_(std::make_shared<Node>()) {
        n_->value = std::move(t);
        n_->requires_grad = requires_grad;
    }
    explicit Var(NodePtr n) : n_(std::move(n)) {}

    static Var param(Tensor t) { return Var(std::move(t), true); }
    static Var constant(Tensor t) { return Var(std::move(t), false); }

    bool defined() const { return n_ != nullptr; }
    const Tensor& value() const { return n_->value; }
    Tensor& mutable_value() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool has_grad() const { return n_->grad.numel() != 0; }
    void zero_grad() { n_->zero_grad(); }
    bool requires_grad() const { return n_->requires_grad; }
    const NodePtr& node() const { return n_; }

    const Shape& shape() const { return n_->value.shape(); }
    int64_t numel() const { return n_->value.numel(); }
    double scalar_value() const {
        if (numel() != 1) throw ContractError("scalar_value on non-scalar tensor");
        return n_->value[0];
    }

private:
    NodePtr n_;
};

namespace detail {

inline Var make_op(const char* name, Tensor out, std::vector<Var> inputs,
                   std::function<void(const Node&)> bw) {
    auto n = std::make_shared<Node>();
    n->value = std::move(out);
    n->op = name;
    for (const Var& v : inputs) n->requires_grad = n->requires_grad || v.requires_grad();
    if (n->requires_grad) {
        n->parents.reserve(inputs.size());
        for (const Var& v : inputs) n->parents.push_back(v.node());
        n->backward_fn = std::move(bw);
    }
    return Var(std::move(n));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

inline void check_finite(const char* op, const Tensor& t) {
    if (!t.all_finite()) throw NumericError(std::string(op) + ": produced non-finite values");
}

// Pads a shape on the left with 1s to rank 4 for generic index arithmetic.
inline std::array<int64_t, 4> dims4(const Shape& s) {
    std::array<int64_t, 4> d{1, 1, 1, 1};
    size_t off = 4 - s.size();
    for (size_t i = 0; i < s.size(); ++i) d[off + i] = s[i];
    return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

inline void backward(const Var& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be scalar");
    // topological order by iterative DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    // Intermediate grads are transient per call; leaf grads accumulate across calls.
    for (Node* n : order)
        if (!n->is_leaf()) n->zero_grad();
    Node* root = loss.node().get();
    if (root->grad.numel() == 0) root->grad = Tensor(root->value.shape());
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.numel() != 0) n->backward_fn(*n);
    }
    // A leaf loss keeps its seeded grad; intermediates were reset above.
}

// ---------------------------------------------------------------------------
// elementwise binary ops (same shape)

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += pb[i];
    return detail::make_op("add", std::move(out), {a, b}, [](const Node& n) {
        n.parents[0]->accumulate(n.grad);
        n.parents[1]->accumulate(n.grad);
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
    return detail::make_op("sub", std::move(out), {a, b}, [](const Node& n) {
        n.parents[0]->accumulate(n.grad);
        Tensor neg = n.grad;
        for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
        n.parents[1]->accumulate(neg);
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
    Tensor av = a.value(), bv = b.value();
    return detail::make_op("mul", std::move(out), {a, b},
                           [av = std::move(av), bv = std::move(bv)](const Node& n) {
                               Tensor ga = n.grad, gb = n.grad;
                               for (int64_t i = 0; i < ga.numel(); ++i) {
                                   ga[i] *= bv[i];
                                   gb[i] *= av[i];
                               }
                               n.parents[0]->accumulate(ga);
                               n.parents[1]->accumulate(gb);
                           });
}

inline Var div(const Var& a, const Var& b) {
    detail::require_same_shape("div", a.value(), b.value());
    Tensor out = a.value();
    const double* pb = b.value().data();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] /= pb[i];
    detail::check_finite("div", out);
    Tensor av = a.value(), bv = b.value();
    return detail::make_op("div", std::move(out), {a, b},
                           [av = std::move(av), bv = std::move(bv)](const Node& n) {
                               Tensor ga = n.grad, gb = n.grad;
                               for (int64_t i = 0; i < ga.numel(); ++i) {
                                   ga[i] /= bv[i];
                                   gb[i] *= -av[i] / (bv[i] * bv[i]);
                               }
                               n.parents[0]->accumulate(ga);
                               n.parents[1]->accumulate(gb);
                           });
}

// elementwise multiply by a non-differentiated constant tensor
inline Var mul_const(const Var& a, const Tensor& c) {
    detail::require_same_shape("mul_const", a.value(), c);
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c[i];
    return detail::make_op("mul_const", std::move(out), {a}, [c](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= c[i];
        n.parents[0]->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// scalar ops

inline Var add_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += s;
    return detail::make_op("add_scalar", std::move(out), {a},
                           [](const Node& n) { n.parents[0]->accumulate(n.grad); });
}

inline Var mul_scalar(const Var& a, double s) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return detail::make_op("mul_scalar", std::move(out), {a}, [s](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= s;
        n.parents[0]->accumulate(g);
    });
}

inline Var neg(const Var& a) { return mul_scalar(a, -1.0); }

// ---------------------------------------------------------------------------
// elementwise unary ops

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        KinkMonitor::report(std::abs(out[i]));
        if (out[i] < 0.0) out[i] = 0.0;
    }
    Tensor av = a.value();
    return detail::make_op("relu", std::move(out), {a}, [av = std::move(av)](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i)
            if (av[i] <= 0.0) g[i] = 0.0;
        n.parents[0]->accumulate(g);
    });
}

inline Var exp(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    Tensor saved = out;
    return detail::make_op("exp", std::move(out), {a}, [saved = std::move(saved)](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= saved[i];
        n.parents[0]->accumulate(g);
    });
}

inline Var log(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(out[i]);
    detail::check_finite("log", out);
    Tensor av = a.value();
    return detail::make_op("log", std::move(out), {a}, [av = std::move(av)](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] /= av[i];
        n.parents[0]->accumulate(g);
    });
}

inline Var sqrt(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(out[i]);
    detail::check_finite("sqrt", out);
    Tensor saved = out;
    return detail::make_op("sqrt", std::move(out), {a}, [saved = std::move(saved)](const Node& n) {
        Tensor g = n.grad;
        // derivative at 0 treated as 0 (selection-style subgradient)
        for (int64_t i = 0; i < g.numel(); ++i) g[i] = saved[i] > 0.0 ? g[i] / (2.0 * saved[i]) : 0.0;
        n.parents[0]->accumulate(g);
    });
}

inline Var softplus(const Var& a) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) {
        double x = out[i];
        out[i] = x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
    }
    Tensor av = a.value();
    return detail::make_op("softplus", std::move(out), {a}, [av = std::move(av)](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= 1.0 / (1.0 + std::exp(-av[i]));
        n.parents[0]->accumulate(g);
    });
}

inline Var pow(const Var& a, double p) {
    Tensor out = a.value();
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::pow(out[i], p);
    detail::check_finite("pow", out);
    Tensor av = a.value();
    return detail::make_op("pow", std::move(out), {a}, [av = std::move(av), p](const Node& n) {
        Tensor g = n.grad;
        for (int64_t i = 0; i < g.numel(); ++i) g[i] *= p * std::pow(av[i], p - 1.0);
        n.parents[0]->accumulate(g);
    });
}

inline Var square(const Var& a) { return mul(a, a); }

// ---------------------------------------------------------------------------
// reductions and broadcasting

inline Var sum(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.value()[i];
    return detail::make_op("sum", Tensor::scalar(s), {a}, [](const Node& n) {
        Tensor g = Tensor::full(n.parents[0]->value.shape(), n.grad[0]);
        n.parents[0]->accumulate(g);
    });
}

inline Var mean(const Var& a) { return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel())); }

// Reduce over the axis subset `axes` (indices into a's shape), keeping
// reduced dimensions with size 1.
inline Var sum_axes(const Var& a, const std::vector<int64_t>& axes) {
    const Shape& in_shape = a.shape();
    Shape out_shape = in_shape;
    for (int64_t ax : axes) {
        if (ax < 0 || ax >= a.value().rank())
            throw DimensionError("sum_axes: axis out of range for " + shape_str(in_shape));
        out_shape[static_cast<size_t>(ax)] = 1;
    }
    auto id = detail::dims4(in_shape);
    auto od = detail::dims4(out_shape);
    Tensor out(out_shape);
    const Tensor& in = a.value();
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < id[0]; ++i0)
        for (int64_t i1 = 0; i1 < id[1]; ++i1)
            for (int64_t i2 = 0; i2 < id[2]; ++i2)
                for (int64_t i3 = 0; i3 < id[3]; ++i3) {
                    int64_t o = ((std::min(i0, od[0] - 1) * od[1] + std::min(i1, od[1] - 1)) * od[2] +
                                 std::min(i2, od[2] - 1)) *
                                    od[3] +
                                std::min(i3, od[3] - 1);
                    out[o] += in[idx++];
                }
    return detail::make_op("sum_axes", std::move(out), {a}, [id, od](const Node& n) {
        Tensor g(n.parents[0]->value.shape());
        int64_t idx = 0;
        for (int64_t i0 = 0; i0 < id[0]; ++i0)
            for (int64_t i1 = 0; i1 < id[1]; ++i1)
                for (int64_t i2 = 0; i2 < id[2]; ++i2)
                    for (int64_t i3 = 0; i3 < id[3]; ++i3) {
                        int64_t o = ((std::min(i0, od[0] - 1) * od[1] + std::min(i1, od[1] - 1)) * od[2] +
                                     std::min(i2, od[2] - 1)) *
                                        od[3] +
                                    std::min(i3, od[3] - 1);
                        g[idx++] = n.grad[o];
                    }
        n.parents[0]->accumulate(g);
    });
}

inline Var mean_axes(const Var& a, const std::vector<int64_t>& axes) {
    int64_t count = 1;
    for (int64_t ax : axes) count *= a.shape()[static_cast<size_t>(ax)];
    return mul_scalar(sum_axes(a, axes), 1.0 / static_cast<double>(count));
}

// Broadcast size-1 dimensions of a up to `target` (same rank).
inline Var broadcast_to(const Var& a, const Shape& target) {
    const Shape& in_shape = a.shape();
    if (in_shape.size() != target.size())
        throw DimensionError("broadcast_to: rank mismatch " + shape_str(in_shape) + " vs " +
                             shape_str(target));
    for (size_t i = 0; i < target.size(); ++i)
        if (in_shape[i] != target[i] && in_shape[i] != 1)
            throw DimensionError("broadcast_to: incompatible " + shape_str(in_shape) + " vs " +
                                 shape_str(target));
    auto id = detail::dims4(in_shape);
    auto od = detail::dims4(target);
    Tensor out(target);
    const Tensor& in = a.value();
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
            for (int64_t i2 = 0; i2 < od[2]; ++i2)
                for (int64_t i3 = 0; i3 < od[3]; ++i3) {
                    int64_t s = ((std::min(i0, id[0] - 1) * id[1] + std::min(i1, id[1] - 1)) * id[2] +
                                 std::min(i2, id[2] - 1)) *
                                    id[3] +
                                std::min(i3, id[3] - 1);
                    out[idx++] = in[s];
                }
    return detail::make_op("broadcast_to", std::move(out), {a}, [id, od](const Node& n) {
        Tensor g(n.parents[0]->value.shape());
        int64_t idx = 0;
        for (int64_t i0 = 0; i0 < od[0]; ++i0)
            for (int64_t i1 = 0; i1 < od[1]; ++i1)
                for (int64_t i2 = 0; i2 < od[2]; ++i2)
                    for (int64_t i3 = 0; i3 < od[3]; ++i3) {
                        int64_t s = ((std::min(i0, id[0] - 1) * id[1] + std::min(i1, id[1] - 1)) * id[2] +
                                     std::min(i2, id[2] - 1)) *
                                        id[3] +
                                    std::min(i3, id[3] - 1);
                        g[s] += n.grad[idx++];
                    }
        n.parents[0]->accumulate(g);
    });
}

inline Var reshape(const Var& a, Shape target) {
    if (Tensor::numel_of(target) != a.numel())
        throw DimensionError("reshape: numel mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(target));
    Tensor out(target, a.value().values());
    return detail::make_op("reshape", std::move(out), {a}, [](const Node& n) {
        Tensor g(n.parents[0]->value.shape(), n.grad.values());
        n.parents[0]->accumulate(g);
    });
}

// ---------------------------------------------------------------------------
// linear algebra

// y = x * W^T + b  with x:(n,k), W:(m,k), b:(m) -> (n,m)
inline Var linear(const Var& x, const Var& w, const Var& b) {
    if (x.value().rank() != 2 || w.value().rank() != 2)
        throw DimensionError("linear: expects rank-2 x and W");
    int64_t n = x.shape()[0], k = x.shape()[1], m = w.shape()[0];
    if (w.shape()[1] != k)
        throw DimensionError("linear: W " + shape_str(w.shape()) + " incompatible with x " +
                             shape_str(x.shape()));
    bool has_bias = b.defined();
    if (has_bias && (b.value().rank() != 1 || b.shape()[0] != m))
        throw DimensionError("linear: bias shape mismatch");
    Tensor out({n, m});
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < m; ++j) {
            double acc = has_bias ? b.value()[j] : 0.0;
            for (int64_t t = 0; t < k; ++t) acc += xv[i * k + t] * wv[j * k + t];
            out[i * m + j] = acc;
        }
    std::vector<Var> ins = {x, w};
    if (has_bias) ins.push_back(b);
    Tensor xs = xv, ws = wv;
    return detail::make_op(
        "linear", std::move(out), std::move(ins),
        [xs = std::move(xs), ws = std::move(ws), n, k, m, has_bias](const Node& nd) {
            Tensor gx({n, k}), gw({m, k});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < m; ++j) {
                    double g = nd.grad[i * m + j];
                    for (int64_t t = 0; t < k; ++t) {
                        gx[i * k + t] += g * ws[j * k + t];
                        gw[j * k + t] += g * xs[i * k + t];
                    }
                }
            nd.parents[0]->accumulate(gx);
            nd.parents[1]->accumulate(gw);
            if (has_bias) {
                Tensor gb({m});
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < m; ++j) gb[j] += nd.grad[i * m + j];
                nd.parents[2]->accumulate(gb);
            }
        });
}

inline Var linear_no_bias(const Var& x, const Var& w) { return linear(x, w, Var()); }

inline Var dot(const Var& a, const Var& b) {
    if (a.value().rank() != 1 || b.value().rank() != 1 || a.numel() != b.numel())
        throw DimensionError("dot: expects equal-length rank-1 tensors");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) s += a.value()[i] * b.value()[i];
    Tensor av = a.value(), bv = b.value();
    return detail::make_op("dot", Tensor::scalar(s), {a, b},
                           [av = std::move(av), bv = std::move(bv)](const Node& n) {
                               double g = n.grad[0];
                               Tensor ga(av.shape()), gb(bv.shape());
                               for (int64_t i = 0; i < av.numel(); ++i) {
                                   ga[i] = g * bv[i];
                                   gb[i] = g * av[i];
                               }
                               n.parents[0]->accumulate(ga);
                               n.parents[1]->accumulate(gb);
                           });
}

inline Var l2_norm(const Var& a) { return sqrt(dot(a, a)); }

// cos(a,b); throws NumericError on zero-norm input
inline Var cosine_similarity(const Var& a, const Var& b) {
    double na = 0.0, nb = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) na += a.value()[i] * a.value()[i];
    for (int64_t i = 0; i < b.numel(); ++i) nb += b.value()[i] * b.value()[i];
    if (na == 0.0 || nb == 0.0) throw NumericError("cosine_similarity: zero-norm vector");
    return div(dot(a, b), mul(l2_norm(a), l2_norm(b)));
}

// Euclidean distance between two rank-1 vectors; subgradient 0 at coincident points.
inline Var euclidean_distance(const Var& a, const Var& b) {
    if (a.value().rank() != 1 || b.value().rank() != 1 || a.numel() != b.numel())
        throw DimensionError("euclidean_distance: expects equal-length rank-1 tensors");
    double s = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    double dist = std::sqrt(s);
    Tensor av = a.value(), bv = b.value();
    return detail::make_op("euclidean_distance", Tensor::scalar(dist), {a, b},
                           [av = std::move(av), bv = std::move(bv), dist](const Node& n) {
                               Tensor ga(av.shape()), gb(bv.shape());
                               if (dist > 0.0) {
                                   double g = n.grad[0] / dist;
                                   for (int64_t i = 0; i < av.numel(); ++i) {
                                       double d = av[i] - bv[i];
                                       ga[i] = g * d;
                                       gb[i] = -g * d;
                                   }
                               }
                               n.parents[0]->accumulate(ga);
                               n.parents[1]->accumulate(gb);
                           });
}

// Pairwise Euclidean distance matrix of row vectors: (n,d) -> (n,n).
inline Var pairwise_distances(const Var& e) {
    if (e.value().rank() != 2) throw DimensionError("pairwise_distances: expects rank-2");
    int64_t n = e.shape()[0], d = e.shape()[1];
    Tensor out({n, n});
    const Tensor& ev = e.value();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = i + 1; j < n; ++j) {
            double s = 0.0;
            for (int64_t t = 0; t < d; ++t) {
                double x = ev[i * d + t] - ev[j * d + t];
                s += x * x;
            }
            double dist = std::sqrt(s);
            out[i * n + j] = dist;
            out[j * n + i] = dist;
        }
    Tensor es = ev, dists = out;
    return detail::make_op(
        "pairwise_distances", std::move(out), {e},
        [es = std::move(es), dists = std::move(dists), n, d](const Node& nd) {
            Tensor g({n, d});
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < n; ++j) {
                    if (i == j) continue;
                    double dist = dists[i * n + j];
                    if (dist == 0.0) continue;
                    // both the (i,j) and (j,i) entries depend on e_i
                    double go = (nd.grad[i * n + j] + nd.grad[j * n + i]) / dist;
                    if (go == 0.0) continue;
                    for (int64_t t = 0; t < d; ++t)
                        g[i * d + t] += go * (es[i * d + t] - es[j * d + t]);
                }
            nd.parents[0]->accumulate(g);
        });
}

// ---------------------------------------------------------------------------
// structural ops

inline Var row(const Var& x, int64_t i) {
    if (x.value().rank() != 2) throw DimensionError("row: expects rank-2");
    int64_t n = x.shape()[0], d = x.shape()[1];
    if (i < 0 || i >= n) throw DimensionError("row: index out of range");
    Tensor out({d});
    for (int64_t t = 0; t < d; ++t) out[t] = x.value()[i * d + t];
    return detail::make_op("row", std::move(out), {x}, [i, n, d](const Node& nd) {
        Tensor g({n, d});
        for (int64_t t = 0; t < d; ++t) g[i * d + t] = nd.grad[t];
        nd.parents[0]->accumulate(g);
    });
}

// Mean of a subset of rows of a rank-2 tensor -> rank-1.
inline Var rows_mean(const Var& x, std::vector<int64_t> indices) {
    if (x.value().rank() != 2) throw DimensionError("rows_mean: expects rank-2");
    if (indices.empty()) throw ContractError("rows_mean: empty index set");
    int64_t n = x.shape()[0], d = x.shape()[1];
    Tensor out({d});
    for (int64_t i : indices) {
        if (i < 0 || i >= n) throw DimensionError("rows_mean: index out of range");
        for (int64_t t = 0; t < d; ++t) out[t] += x.value()[i * d + t];
    }
    double inv = 1.0 / static_cast<double>(indices.size());
    for (int64_t t = 0; t < d; ++t) out[t] *= inv;
    return detail::make_op("rows_mean", std::move(out), {x},
                           [indices = std::move(indices), n, d, inv](const Node& nd) {
                               Tensor g({n, d});
                               for (int64_t i : indices)
                                   for (int64_t t = 0; t < d; ++t) g[i * d + t] += inv * nd.grad[t];
                               nd.parents[0]->accumulate(g);
                           });
}

// Concatenate along axis 0 (all other dims equal).
inline Var concat0(const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError("concat0: no inputs");
    Shape s = parts[0].shape();
    int64_t total = 0;
    for (const Var& p : parts) {
        Shape ps = p.shape();
        if (ps.size() != s.size()) throw DimensionError("concat0: rank mismatch");
        for (size_t i = 1; i < s.size(); ++i)
            if (ps[i] != s[i]) throw DimensionError("concat0: trailing dim mismatch");
        total += ps[0];
    }
    Shape out_shape = s;
    out_shape[0] = total;
    Tensor out(out_shape);
    int64_t off = 0;
    std::vector<int64_t> sizes;
    for (const Var& p : parts) {
        const auto& v = p.value().values();
        std::copy(v.begin(), v.end(), out.values().begin() + off);
        off += static_cast<int64_t>(v.size());
        sizes.push_back(static_cast<int64_t>(v.size()));
    }
    return detail::make_op("concat0", std::move(out), parts, [sizes](const Node& nd) {
        int64_t off = 0;
        for (size_t p = 0; p < sizes.size(); ++p) {
            Tensor g(nd.parents[p]->value.shape());
            std::copy(nd.grad.values().begin() + off, nd.grad.values().begin() + off + sizes[p],
                      g.values().begin());
            off += sizes[p];
            nd.parents[p]->accumulate(g);
        }
    });
}

// ---------------------------------------------------------------------------
// selection ops (gradient flows through the selected element only)

struct Selected {
    Var value;    // scalar
    int64_t index;  // flat index into the input
};

inline Selected max_element(const Var& x) {
    if (x.numel() == 0) throw ContractError("max_element: empty tensor");
    int64_t best = 0;
    for (int64_t i = 1; i < x.numel(); ++i)
        if (x.value()[i] > x.value()[best]) best = i;
    // tie/selection margin against the runner-up
    double margin = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < x.numel(); ++i)
        if (i != best) margin = std::min(margin, x.value()[best] - x.value()[i]);
    if (x.numel() > 1) KinkMonitor::report(margin);
    Var v = detail::make_op("max_element", Tensor::scalar(x.value()[best]), {x},
                            [best](const Node& nd) {
                                Tensor g(nd.parents[0]->value.shape());
                                g[best] = nd.grad[0];
                                nd.parents[0]->accumulate(g);
                            });
    return {v, best};
}

inline Selected min_element(const Var& x) {
    if (x.numel() == 0) throw ContractError("min_element: empty tensor");
    int64_t best = 0;
    for (int64_t i = 1; i < x.numel(); ++i)
        if (x.value()[i] < x.value()[best]) best = i;
    double margin = std::numeric_limits<double>::infinity();
    for (int64_t i = 0; i < x.numel(); ++i)
        if (i != best) margin = std::min(margin, x.value()[i] - x.value()[best]);
    if (x.numel() > 1) KinkMonitor::report(margin);
    Var v = detail::make_op("min_element", Tensor::scalar(x.value()[best]), {x},
                            [best](const Node& nd) {
                                Tensor g(nd.parents[0]->value.shape());
                                g[best] = nd.grad[0];
                                nd.parents[0]->accumulate(g);
                            });
    return {v, best};
}

// ---------------------------------------------------------------------------
// neural-net ops

// 3x3 convolution, zero padding 1, stride 1 or 2.
// x:(N,Ci,H,W), w:(Co,Ci,3,3), b:(Co) -> (N,Co,H',W')
inline Var conv2d(const Var& x, const Var& w, const Var& b, int64_t stride) {
    if (x.value().rank() != 4 || w.value().rank() != 4)
        throw DimensionError("conv2d: expects rank-4 input and weight");
    if (stride != 1 && stride != 2) throw DimensionError("conv2d: stride must be 1 or 2");
    int64_t N = x.shape()[0], Ci = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int64_t Co = w.shape()[0];
    if (w.shape()[1] != Ci || w.shape()[2] != 3 || w.shape()[3] != 3)
        throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                             shape_str(x.shape()));
    if (b.value().rank() != 1 || b.shape()[0] != Co) throw DimensionError("conv2d: bias shape mismatch");
    int64_t Ho = (H + 2 - 3) / stride + 1;
    int64_t Wo = (W + 2 - 3) / stride + 1;
    Tensor out({N, Co, Ho, Wo});
    const double* xp = x.value().data();
    const double* wp = w.value().data();
    const double* bp = b.value().data();
    double* op = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t co = 0; co < Co; ++co) {
            double bias = bp[co];
            for (int64_t oh = 0; oh < Ho; ++oh)
                for (int64_t ow = 0; ow < Wo; ++ow) {
                    double acc = bias;
                    int64_t ih0 = oh * stride - 1, iw0 = ow * stride - 1;
                    for (int64_t ci = 0; ci < Ci; ++ci) {
                        const double* xc = xp + (n * Ci + ci) * H * W;
                        const double* wc = wp + (co * Ci + ci) * 9;
                        for (int64_t kh = 0; kh < 3; ++kh) {
                            int64_t ih = ih0 + kh;
                            if (ih < 0 || ih >= H) continue;
                            const double* xr = xc + ih * W;
                            const double* wr = wc + kh * 3;
                            for (int64_t kw = 0; kw < 3; ++kw) {
                                int64_t iw = iw0 + kw;
                                if (iw < 0 || iw >= W) continue;
                                acc += xr[iw] * wr[kw];
                            }
                        }
                    }
                    op[((n * Co + co) * Ho + oh) * Wo + ow] = acc;
                }
        }
    Tensor xs = x.value(), ws = w.value();
    return detail::make_op(
        "conv2d", std::move(out), {x, w, b},
        [xs = std::move(xs), ws = std::move(ws), N, Ci, H, W, Co, Ho, Wo, stride](const Node& nd) {
            Tensor gx({N, Ci, H, W}), gw({Co, Ci, 3, 3}), gb({Co});
            const double* gp = nd.grad.data();
            for (int64_t n = 0; n < N; ++n)
                for (int64_t co = 0; co < Co; ++co)
                    for (int64_t oh = 0; oh < Ho; ++oh)
                        for (int64_t ow = 0; ow < Wo; ++ow) {
                            double g = gp[((n * Co + co) * Ho + oh) * Wo + ow];
                            if (g == 0.0) continue;
                            gb[co] += g;
                            int64_t ih0 = oh * stride - 1, iw0 = ow * stride - 1;
                            for (int64_t ci = 0; ci < Ci; ++ci) {
                                const double* xc = xs.data() + (n * Ci + ci) * H * W;
                                double* gxc = gx.data() + (n * Ci + ci) * H * W;
                                const double* wc = ws.data() + (co * Ci + ci) * 9;
                                double* gwc = gw.data() + (co * Ci + ci) * 9;
                                for (int64_t kh = 0; kh < 3; ++kh) {
                                    int64_t ih = ih0 + kh;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int64_t kw = 0; kw < 3; ++kw) {
                                        int64_t iw = iw0 + kw;
                                        if (iw < 0 || iw >= W) continue;
                                        gxc[ih * W + iw] += g * wc[kh * 3 + kw];
                                        gwc[kh * 3 + kw] += g * xc[ih * W + iw];
                                    }
                                }
                            }
                        }
            nd.parents[0]->accumulate(gx);
            nd.parents[1]->accumulate(gw);
            nd.parents[2]->accumulate(gb);
        });
}

// (N,C,H,W) -> (N,C), mean over spatial positions
inline Var global_avg_pool(const Var& x) {
    if (x.value().rank() != 4) throw DimensionError("global_avg_pool: expects rank-4");
    int64_t N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    int64_t hw = H * W;
    Tensor out({N, C});
    const double* xp = x.value().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            const double* base = xp + (n * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) s += base[i];
            out[n * C + c] = s / static_cast<double>(hw);
        }
    return detail::make_op("global_avg_pool", std::move(out), {x}, [N, C, hw](const Node& nd) {
        Tensor g(nd.parents[0]->value.shape());
        double inv = 1.0 / static_cast<double>(hw);
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c) {
                double go = nd.grad[n * C + c] * inv;
                double* base = g.data() + (n * C + c) * hw;
                for (int64_t i = 0; i < hw; ++i) base[i] = go;
            }
        nd.parents[0]->accumulate(g);
    });
}

// Row-wise log-softmax of a rank-2 tensor (class axis = 1).
inline Var log_softmax(const Var& x) {
    if (x.value().rank() != 2) throw DimensionError("log_softmax: expects rank-2");
    int64_t n = x.shape()[0], m = x.shape()[1];
    Tensor out({n, m});
    Tensor sm({n, m});
    for (int64_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < m; ++j) mx = std::max(mx, x.value()[i * m + j]);
        double lse = 0.0;
        for (int64_t j = 0; j < m; ++j) lse += std::exp(x.value()[i * m + j] - mx);
        lse = mx + std::log(lse);
        for (int64_t j = 0; j < m; ++j) {
            out[i * m + j] = x.value()[i * m + j] - lse;
            sm[i * m + j] = std::exp(out[i * m + j]);
        }
    }
    return detail::make_op("log_softmax", std::move(out), {x},
                           [sm = std::move(sm), n, m](const Node& nd) {
                               Tensor g({n, m});
                               for (int64_t i = 0; i < n; ++i) {
                                   double rowsum = 0.0;
                                   for (int64_t j = 0; j < m; ++j) rowsum += nd.grad[i * m + j];
                                   for (int64_t j = 0; j < m; ++j)
                                       g[i * m + j] = nd.grad[i * m + j] - sm[i * m + j] * rowsum;
                               }
                               nd.parents[0]->accumulate(g);
                           });
}

// operator sugar
inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator+(const Var& a, double s) { return add_scalar(a, s); }
inline Var operator-(const Var& a, double s) { return add_scalar(a, -s); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }
inline Var operator-(const Var& a) { return neg(a); }

}  // namespace metabin
