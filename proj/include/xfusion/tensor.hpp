#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "xfusion/rng.hpp"

namespace xfusion {

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += "x";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

inline size_t shape_numel(const std::vector<int>& s) {
    size_t n = 1;
    for (int e : s) {
        if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
        n *= static_cast<size_t>(e);
    }
    return n;
}

// Dynamic-tape reverse-mode node. Values are shared (so parameter references
// can alias storage); gradients are per-node and lazily allocated. Frozen
// leaves never receive a gradient buffer.
template <typename T>
struct TensorNode {
    std::vector<int> shape;
    std::shared_ptr<std::vector<T>> value;
    std::vector<T> grad;
    bool is_leaf = true;
    bool frozen = false;
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    size_t numel() const { return value ? value->size() : 0; }

    void ensure_grad() {
        if (grad.size() != numel()) grad.assign(numel(), T(0));
    }
};

// Scoped autograd switch: forwards run tape-free inside a NoGradGuard.
namespace detail {
inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev; }
};

template <typename T>
class Tensor {
public:
    using Node = TensorNode<T>;

    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        return filled(std::move(shape), T(0), requires_grad);
    }

    static Tensor filled(std::vector<int> shape, T v, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::make_shared<std::vector<T>>(shape_numel(n->shape), v);
        n->requires_grad = requires_grad && grad_enabled();
        return Tensor(n);
    }

    static Tensor from_data(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw std::invalid_argument("from_data: element count " + std::to_string(data.size()) +
                                        " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->value = std::make_shared<std::vector<T>>(std::move(data));
        n->requires_grad = requires_grad && grad_enabled();
        return Tensor(n);
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
        auto t = zeros(std::move(shape), requires_grad);
        for (auto& v : t.data()) v = static_cast<T>(rng.normal()) * stddev;
        return t;
    }

    // Leaf aliasing the parameter's storage but owning its own gradient.
    // Per-sample graphs accumulate here; the trainer merges in a fixed order.
    static Tensor ref(const Tensor& param) {
        auto n = std::make_shared<Node>();
        n->shape = param.shape();
        n->value = param.n_->value;
        n->frozen = param.frozen();
        n->requires_grad = param.requires_grad() && grad_enabled();
        return Tensor(n);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    int extent(int axis) const { return n_->shape.at(axis); }
    size_t numel() const { return n_->numel(); }
    bool requires_grad() const { return n_->requires_grad; }
    bool frozen() const { return n_->frozen; }
    bool is_leaf() const { return n_->is_leaf; }

    std::vector<T>& data() { return *n_->value; }
    const std::vector<T>& data() const { return *n_->value; }
    std::vector<T>& grad() { return n_->grad; }
    const std::vector<T>& grad() const { return n_->grad; }

    T item() const {
        if (numel() != 1) throw std::logic_error("item(): tensor has " + std::to_string(numel()) + " elements");
        return (*n_->value)[0];
    }

    void set_requires_grad(bool rg) { n_->requires_grad = rg && !n_->frozen; }
    void set_frozen(bool f) {
        n_->frozen = f;
        if (f) {
            n_->requires_grad = false;
            n_->grad.clear();
        }
    }

    void zero_grad() {
        if (!n_->frozen) n_->grad.assign(numel(), T(0));
    }

    void zero_grad_if_missing() {
        if (!n_->frozen && n_->grad.size() != numel()) n_->grad.assign(numel(), T(0));
    }

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// Builds a non-leaf result node. The backprop closure sees the result node
// and pushes gradient into any non-frozen parent that wants it.
template <typename T>
Tensor<T> make_op(std::vector<int> shape,
                  std::vector<std::shared_ptr<TensorNode<T>>> parents,
                  std::function<void(TensorNode<T>&)> backprop) {
    auto n = std::make_shared<TensorNode<T>>();
    n->shape = std::move(shape);
    n->value = std::make_shared<std::vector<T>>(shape_numel(n->shape), T(0));
    n->is_leaf = false;
    bool rec = grad_enabled();
    bool need = false;
    if (rec)
        for (auto& p : parents)
            if (p->requires_grad) need = true;
    if (rec && need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(n);
}

// Reverse-mode sweep from a scalar loss. Repeated calls (on fresh graphs)
// accumulate into leaf gradients until zero_grad. The tape is released
// afterwards; values stay alive through any tensors still referenced.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
        throw std::logic_error("backward: loss must be scalar, got " + shape_str(loss.shape()));
    auto root = loss.node();
    if (!root->requires_grad) return;  // nothing reachable is trainable

    // iterative post-order topological sort
    std::vector<TensorNode<T>*> topo;
    std::vector<std::pair<TensorNode<T>*, size_t>> stack;
    stack.push_back({root.get(), 0});
    std::unordered_set<const void*> visited;
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !p->is_leaf && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (auto* n : topo) n->ensure_grad();
    root->grad.assign(1, T(1));

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode<T>* n = *it;
        if (n->backprop) n->backprop(*n);
    }

    // free the tape
    for (auto* n : topo) {
        n->parents.clear();
        n->backprop = nullptr;
        if (!n->is_leaf) n->grad.clear();
    }
}

// Gradient sink used inside backprop closures: leaves that are frozen (or
// never asked for gradient) are skipped.
template <typename T>
inline bool wants_grad(TensorNode<T>& p) {
    if (p.frozen) return false;
    if (!p.requires_grad) return false;
    p.ensure_grad();
    return true;
}

}  // namespace xfusion
