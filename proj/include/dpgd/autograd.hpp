#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dpgd/tensor.hpp"

namespace dpgd {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording on the current thread for its lifetime.
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
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents' grads.
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && !value.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a value in the dynamic autograd graph.
///
/// Copies share the underlying node. A Var built while grad mode is off, or
/// from inputs that do not require gradients, records no history.
template <class T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var constant(Tensor<T> value) { return Var(std::move(value), false); }
  static Var leaf(Tensor<T> value) { return Var(std::move(value), true); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) const { node_->requires_grad = on; }
  void zero_grad() const { node_->grad = Tensor<T>(); }
  Var detach() const { return Var(node_->value, false); }
  const NodePtr& node() const { return node_; }

  /// Reverse-mode sweep from this (scalar) value with d(self)/d(self) = 1.
  void backward() const {
    if (size() != 1) throw ShapeError("backward() without seed requires a scalar");
    backward(Tensor<T>(shape(), T(1)));
  }
  void backward(Tensor<T> seed) const;

 private:
  NodePtr node_;
};

/// Builds the result node of a differentiable op. Parents are captured only
/// when recording is on and at least one of them requires a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> parents,
                   std::function<void(Node<T>&)> backward) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.is_leaf = false;
  node.parents.reserve(parents.size());
  for (auto& p : parents) node.parents.push_back(p.node());
  node.backward = std::move(backward);
  return out;
}

template <class T>
void Var<T>::backward(Tensor<T> seed) const {
  if (!requires_grad()) return;
  require_same_shape(seed.shape(), shape(), "backward seed");

  // Iterative post-order DFS gives a topological order of the recorded graph.
  // Shared ownership keeps parents alive while children release their history.
  std::vector<NodePtr> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<NodePtr, std::size_t>> stack{{node_, 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      NodePtr p = n->parents[next++];
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  auto& g = node_->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>& n = **it;
    if (n.is_leaf) continue;
    if (n.backward && !n.grad.empty()) n.backward(n);
    n.backward = nullptr;
    n.parents.clear();
    n.grad = Tensor<T>();
    it->reset();
  }
}

}  // namespace dpgd
