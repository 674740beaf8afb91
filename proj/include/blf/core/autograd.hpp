#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "blf/core/error.hpp"
#include "blf/core/tensor.hpp"

namespace blf {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this->grad into the inputs' grads.
  std::function<void(Node&)> backward;
  bool requires_grad = false;
  std::string name;

  Tensor<T>& grad_ref() {
    if (grad.size() != value.size() || grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
  bool has_grad() const { return grad.size() == value.size() && !value.empty(); }
};

// Handle to a node of the dynamic computation graph. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  Tensor<T>& grad() { return node_->grad_ref(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

  // The scalar of a rank-0 or single-element tensor.
  T item() const {
    if (node_->value.size() != 1) throw UsageError("item() on non-scalar " + shape_string(shape()));
    return node_->value[0];
  }

  bool same_node(const Var& other) const { return node_ == other.node_; }

 protected:
  std::shared_ptr<Node<T>> node_;
};

// A trainable leaf. The gradient persists across backward() calls until
// zero_grad() so that several losses can contribute to one update.
template <typename T>
class Parameter : public Var<T> {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value) : Var<T>(std::move(value), true) {
    this->node_->name = std::move(name);
    this->node_->grad_ref();
  }

  const std::string& name() const { return this->node_->name; }
  Tensor<T>& value_mut() { return this->node_->value; }
  const Tensor<T>& grad_view() const { return this->node_->grad; }

  void zero_grad() { this->node_->grad_ref().fill(T{0}); }
};

template <typename T>
void zero_grads(std::span<Parameter<T>> params) {
  for (auto& p : params) p.zero_grad();
}

inline bool& grad_mode_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

// While alive, new nodes record no graph (evaluation and generation).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode_disabled()) { grad_mode_disabled() = true; }
  ~NoGradGuard() { grad_mode_disabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {

template <typename T>
Var<T> make_node(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  bool needs = false;
  if (!grad_mode_disabled()) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not need one.
template <typename T>
Tensor<T>* grad_sink(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad ? &n->grad_ref() : nullptr;
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Accumulates into every reachable
// node's grad, including Parameters.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw UsageError("backward() requires a scalar loss, got shape " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.node()->grad_ref()[0] += T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && n->has_grad()) n->backward(*n);
  }
  // Intermediate gradients are consumed; release them so a second loss on
  // the same graph starts clean.
  for (Node<T>* n : order) {
    if (n->backward) n->grad = Tensor<T>();
  }
}

}  // namespace blf
