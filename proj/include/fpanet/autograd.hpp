#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <vector>

#include "fpanet/tensor.hpp"

namespace fpanet {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_ref() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
  [[nodiscard]] bool has_grad() const { return !grad.empty(); }
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Handle to a value in the computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }

  /// Accumulated gradient; zero-filled if nothing has flowed here yet.
  Tensor<T>& grad() { return node_->grad_ref(); }
  [[nodiscard]] bool has_grad() const { return node_->has_grad(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

  /// Scalar value of a one-element tensor.
  [[nodiscard]] T item() const {
    if (value().size() != 1) throw ShapeError("item() on non-scalar " + shape().str());
    return value()[0];
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Creates an op result and records the backward closure when any parent needs it.
template <typename T>
Var<T> make_result(Tensor<T> value, std::initializer_list<Var<T>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& parents,
                   std::function<void(Node<T>&)> backward_fn) {
  Var<T> out(std::move(value), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents) node.parents.push_back(p.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

/// Adds `g` into the parent's gradient if it participates in differentiation.
template <typename T>
inline Tensor<T>* grad_sink(Node<T>& self, std::size_t parent_index) {
  auto& p = self.parents[parent_index];
  if (!p->requires_grad) return nullptr;
  return &p->grad_ref();
}

/// Reverse-mode sweep from `root`, seeded with ones. Intermediate nodes release
/// their closures afterwards; leaf gradients accumulate.
template <typename T>
void backward(const Var<T>& root) {
  if (!root.requires_grad()) return;
  using NodePtr = std::shared_ptr<Node<T>>;
  // Owning references: clearing parents below must not free nodes still pending.
  std::vector<NodePtr> order;
  std::unordered_set<Node<T>*> seen{root.node().get()};
  std::vector<std::pair<NodePtr, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodePtr p = node->parents[next++];
      if (p->requires_grad && seen.insert(p.get()).second) stack.emplace_back(std::move(p), 0);
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }
  Node<T>& r = *root.node();
  r.grad_ref().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = it->get();
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad = Tensor<T>();
    }
  }
}

}  // namespace fpanet
