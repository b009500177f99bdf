#pragma once
// Reverse-mode automatic differentiation on dense tensors.
//
// A Var is a handle to a graph node. Ops record their parents and a backward
// closure only when grad mode is on and some input requires a gradient, so
// inference under NoGradGuard builds no graph at all.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "sdiff/core/tensor.hpp"

namespace sdiff {

template <class T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor<T>& ensure_grad() {
        if (grad.numel() != value.numel() || grad.shape() != value.shape())
            grad = Tensor<T>(value.shape());
        return grad;
    }
    bool has_grad() const { return grad.numel() == value.numel() && !grad.empty(); }
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <class T>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->ensure_grad(); }
    bool has_grad() const { return node_ && node_->has_grad(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t dim(int i) const { return node_->value.dim(i); }
    std::int64_t numel() const { return node_->value.numel(); }
    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

    void zero_grad() {
        if (node_) node_->grad = Tensor<T>();
    }
    /// Drop graph history; the value is kept and becomes a leaf.
    Var detach() const { return Var(node_->value, false); }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Builds a result node. `fn` receives the result node and must accumulate
/// node.grad into the parents' grads (via ensure_grad()).
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& v : inputs) any = any || v.requires_grad();
        if (any) {
            node->requires_grad = true;
            node->parents.reserve(inputs.size());
            for (const auto& v : inputs) node->parents.push_back(v.node());
            node->backward = std::move(fn);
        }
    }
    return Var<T>(std::move(node));
}

/// Accumulates d(root)/d(node) into every reachable node that requires grad.
/// `seed` defaults to ones (root is usually a scalar loss).
template <class T>
void backward(const Var<T>& root, const Tensor<T>* seed = nullptr) {
    if (!root.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node<T>* p = n->parents[i++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    Tensor<T>& g = root.node()->ensure_grad();
    if (seed) {
        if (seed->shape() != g.shape()) throw ShapeError("backward seed shape mismatch");
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += (*seed)[i];
    } else {
        for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += T(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->has_grad()) n->backward(*n);
    }
    // Interior gradients are no longer needed; leaves keep theirs.
    for (Node<T>* n : order)
        if (n->backward) n->grad = Tensor<T>();
}

}  // namespace sdiff
