#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dfn/rng.hpp"

namespace dfn {

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::int64_t{1},
                           std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // persistent, populated by backward()

    // Graph edges toward inputs; only parents that require grad are kept.
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void()> backward_fn;

    // Scratch gradient for the backward pass in flight.
    std::vector<double> pass_grad;

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

inline bool& autograd_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

/// Disables graph construction for the enclosing scope (evaluation paths).
class NoGradGuard {
public:
    NoGradGuard() : saved_(detail::autograd_flag()) {
        detail::autograd_flag() = false;
    }
    ~NoGradGuard() { detail::autograd_flag() = saved_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

inline bool autograd_enabled() { return detail::autograd_flag(); }

/// Dense N-d double tensor participating in a reverse-mode autodiff graph.
///
/// A Tensor is a shared handle: copies alias the same storage and graph
/// node. Gradients accumulate across backward() calls until zero_grad().
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& shape, bool requires_grad = false) {
        return from_data(shape, std::vector<double>(checked_numel(shape), 0.0),
                         requires_grad);
    }

    static Tensor full(const Shape& shape, double value,
                       bool requires_grad = false) {
        return from_data(shape, std::vector<double>(checked_numel(shape), value),
                         requires_grad);
    }

    static Tensor uniform(const Shape& shape, Rng& rng, double lo, double hi,
                          bool requires_grad = false) {
        std::vector<double> d(checked_numel(shape));
        for (auto& v : d) v = rng.uniform(lo, hi);
        return from_data(shape, std::move(d), requires_grad);
    }

    static Tensor from_data(const Shape& shape, std::vector<double> data,
                            bool requires_grad = false) {
        const auto n = checked_numel(shape);
        if (static_cast<std::int64_t>(data.size()) != n) {
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = shape;
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel(); }
    std::int64_t extent(std::size_t dim) const { return node_->shape.at(dim); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double* raw() { return node_->data.data(); }
    const double* raw() const { return node_->data.data(); }

    double item() const {
        if (numel() != 1) {
            throw ContractError("item() requires a single-element tensor, got " +
                                shape_str(shape()));
        }
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) {
            throw ContractError("gradient not populated; run backward() first");
        }
        return node_->grad;
    }
    void zero_grad() {
        node_->grad.assign(static_cast<std::size_t>(numel()), 0.0);
    }
    void clear_grad() { node_->grad.clear(); }

    /// Leaf copy of the values, detached from the graph.
    Tensor detach() const {
        return from_data(node_->shape, node_->data, false);
    }

    /// Reverse-mode pass from a scalar. Populates grad on every reachable
    /// requires_grad tensor; repeated calls accumulate.
    void backward() const;

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TensorNode> node)
        : node_(std::move(node)) {}

private:
    static std::int64_t checked_numel(const Shape& shape) {
        if (shape.empty()) throw ShapeError("tensor shape must be non-empty");
        for (auto e : shape) {
            if (e <= 0) {
                throw ShapeError("tensor extents must be positive, got " +
                                 shape_str(shape));
            }
        }
        return shape_numel(shape);
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

/// Assembles an op result node. `parents` must contain exactly the inputs
/// that require grad; `backward_fn` reads self->pass_grad and accumulates
/// into each parent's pass_grad.
inline Tensor make_op(Shape shape, std::vector<double> data,
                      std::vector<std::shared_ptr<TensorNode>> parents,
                      std::function<void(TensorNode*)> make_backward) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (autograd_flag() && !parents.empty()) {
        node->requires_grad = true;
        node->parents = std::move(parents);
        TensorNode* self = node.get();
        node->backward_fn = [self, fn = std::move(make_backward)]() { fn(self); };
    }
    return Tensor(std::move(node));
}

inline std::vector<std::shared_ptr<TensorNode>> grad_parents(
    std::initializer_list<Tensor> inputs) {
    std::vector<std::shared_ptr<TensorNode>> out;
    if (!autograd_flag()) return out;
    for (const auto& t : inputs) {
        if (t.requires_grad()) out.push_back(t.node());
    }
    return out;
}

inline void accum(const std::shared_ptr<TensorNode>& node,
                  std::size_t i, double v) {
    node->pass_grad[i] += v;
}

}  // namespace detail

inline void Tensor::backward() const {
    if (!defined()) throw ContractError("backward() on undefined tensor");
    if (numel() != 1) {
        throw ContractError("backward() requires a scalar loss, got shape " +
                            shape_str(shape()));
    }
    if (!node_->requires_grad) {
        throw ContractError("backward() on a tensor that does not require grad");
    }

    // Iterative postorder DFS over grad parents: parents precede children.
    std::vector<detail::TensorNode*> topo;
    std::unordered_set<detail::TensorNode*> visited;
    struct Frame {
        detail::TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            detail::TensorNode* p = f.node->parents[f.next_parent++].get();
            if (visited.insert(p).second) stack.push_back({p, 0});
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (auto* n : topo) {
        n->pass_grad.assign(n->data.size(), 0.0);
    }
    node_->pass_grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        if ((*it)->backward_fn) (*it)->backward_fn();
    }
    // Flush: persistent gradients accumulate across backward() calls.
    for (auto* n : topo) {
        if (n->grad.empty()) {
            n->grad = std::move(n->pass_grad);
        } else {
            for (std::size_t i = 0; i < n->grad.size(); ++i) {
                n->grad[i] += n->pass_grad[i];
            }
        }
        n->pass_grad = {};
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] + b.raw()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a, b}),
                           [an, bn](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(an, i, g[i]);
                               if (bn->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(bn, i, g[i]);
                           });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] - b.raw()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a, b}),
                           [an, bn](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(an, i, g[i]);
                               if (bn->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(bn, i, -g[i]);
                           });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] * b.raw()[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a, b}),
                           [an, bn](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               if (an->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(an, i, g[i] * bn->data[i]);
                               if (bn->requires_grad)
                                   for (std::size_t i = 0; i < g.size(); ++i)
                                       detail::accum(bn, i, g[i] * an->data[i]);
                           });
}

inline Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] + s;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a}),
                           [an](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   detail::accum(an, i, g[i]);
                           });
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.raw()[i] * s;
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a}),
                           [an, s](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               for (std::size_t i = 0; i < g.size(); ++i)
                                   detail::accum(an, i, g[i] * s);
                           });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor abs(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.raw()[i]);
    auto an = a.node();
    return detail::make_op(a.shape(), std::move(out),
                           detail::grad_parents({a}),
                           [an](detail::TensorNode* self) {
                               const auto& g = self->pass_grad;
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                   const double x = an->data[i];
                                   const double s =
                                       x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                                   detail::accum(an, i, g[i] * s);
                               }
                           });
}

/// Full reduction to a [1] scalar, accumulated in row-major order.
inline Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return detail::make_op({1}, {acc}, detail::grad_parents({a}),
                           [an](detail::TensorNode* self) {
                               const double g = self->pass_grad[0];
                               for (std::size_t i = 0; i < an->data.size(); ++i)
                                   detail::accum(an, i, g);
                           });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

}  // namespace dfn
