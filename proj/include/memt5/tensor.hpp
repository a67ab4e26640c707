#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "memt5/error.hpp"

namespace memt5 {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline std::vector<int64_t> row_major_strides(const Shape& s) {
    std::vector<int64_t> st(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Thread-local switch: when false, ops do not record backward closures.
inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(TensorNode<S>&)> backprop;

    int64_t numel() const { return int64_t(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

// Dense n-d float tensor participating in a reverse-mode autodiff graph.
// Value semantics on the handle; the node (data + graph edges) is shared.
template <typename S>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode<S>> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), S(0), requires_grad);
    }

    static Tensor filled(Shape shape, S v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode<S>>();
        n->value.assign(size_t(shape_numel(shape)), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != int64_t(data.size()))
            throw ShapeError("tensor: data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor scalar(S v, bool requires_grad = false) { return from_data({1}, {v}, requires_grad); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t dim(int i) const {
        int r = int(node_->shape.size());
        if (i < 0) i += r;
        return node_->shape[size_t(i)];
    }
    size_t rank() const { return node_->shape.size(); }
    int64_t numel() const { return node_->numel(); }

    std::vector<S>& data() { return node_->value; }
    const std::vector<S>& data() const { return node_->value; }
    std::vector<S>& grad() { return node_->grad; }
    const std::vector<S>& grad() const { return node_->grad; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    void zero_grad() { node_->grad.assign(node_->value.size(), S(0)); }

    S item() const {
        if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
        return node_->value[0];
    }

    // Same values, cut loose from the graph.
    Tensor detach() const {
        auto n = std::make_shared<TensorNode<S>>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(std::move(n));
    }

    std::shared_ptr<TensorNode<S>>& node() { return node_; }
    const std::shared_ptr<TensorNode<S>>& node() const { return node_; }

    // Reverse-mode sweep from a scalar loss. Visits each node once in
    // reverse topological order; gradient accumulation is additive.
    void backward() const {
        if (numel() != 1) throw Error("backward: loss must be a scalar, got shape " + shape_str(shape()));
        std::vector<TensorNode<S>*> topo;
        std::unordered_set<TensorNode<S>*> seen;
        // Iterative post-order DFS.
        std::vector<std::pair<TensorNode<S>*, size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& top = stack.back();
            if (top.second < top.first->parents.size()) {
                TensorNode<S>* p = top.first->parents[top.second++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                topo.push_back(top.first);
                stack.pop_back();
            }
        }
        node_->ensure_grad();
        node_->grad[0] = S(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            TensorNode<S>* n = *it;
            if (n->backprop && !n->grad.empty()) {
                for (auto& p : n->parents) p->ensure_grad();
                n->backprop(*n);
            }
        }
    }

  private:
    std::shared_ptr<TensorNode<S>> node_;
};

template <typename S>
inline void debug_check_finite(const char* op, const std::vector<S>& v) {
#ifndef NDEBUG
    for (S x : v) {
        if (!std::isfinite(double(x))) throw NumericError(std::string("non-finite value in output of ") + op);
    }
#else
    (void)op;
    (void)v;
#endif
}

}  // namespace memt5
