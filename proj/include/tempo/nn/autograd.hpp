#pragma once

// Tape-free reverse-mode differentiation: every op result is a Node that
// remembers its parents and a closure mapping its output gradient onto them.
// backward() topologically sorts the reachable sub-graph and replays the
// closures in reverse order.
//
// Gradients of leaf Parameters accumulate across backward() calls until
// zero_grad(); intermediate gradients are reset at the start of each call.

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tempo/core/tensor.hpp"

namespace tempo::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first touched, except on parameter leaves
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>& grad_out)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>::zeros(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  const Tensor<T>& value() const { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Builds an op result. When no parent needs a gradient the closure and the
// parent links are dropped, so frozen inputs never retain a graph.
template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> parents,
               std::function<void(const Tensor<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->is_leaf = false;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p.requires_grad();
  if (node->requires_grad) {
    for (auto& p : parents) node->parents.push_back(p.node_ptr());
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
class Parameter {
 public:
  Parameter() = default;
  Parameter(std::string name, Tensor<T> value, bool trainable = true)
      : name_(std::move(name)), var_(std::move(value), trainable), trainable_(trainable) {
    var_.node()->grad = Tensor<T>::zeros(var_.shape());
  }

  const std::string& name() const { return name_; }
  bool trainable() const { return trainable_; }
  void set_trainable(bool trainable) {
    trainable_ = trainable;
    var_.node()->requires_grad = trainable;
  }

  Tensor<T>& value() { return var_.node()->value; }
  const Tensor<T>& value() const { return var_.node()->value; }
  Tensor<T>& grad() { return var_.node()->grad; }
  const Tensor<T>& grad() const { return var_.node()->grad; }
  const Var<T>& var() const { return var_; }
  std::int64_t numel() const { return var_.value().numel(); }

  void zero_grad() { var_.node()->grad.fill(T(0)); }

 private:
  std::string name_;
  Var<T> var_;
  bool trainable_ = true;
};

// Populates d(loss)/d(value) on every trainable leaf reachable from `loss`.
template <typename T>
void backward(const Var<T>& loss) {
  if (loss.value().numel() != 1) {
    throw ConfigError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  // Iterative post-order DFS; `order` ends up parents-before-children.
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.push_back({parent, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) {
    if (!node->is_leaf) node->grad = Tensor<T>();
  }
  loss.node()->grad_buffer().fill(T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->is_leaf || !node->backward_fn) continue;
    if (node->grad.empty()) continue;
    node->backward_fn(node->grad);
    node->grad = Tensor<T>();  // release intermediate memory early
  }
}

}  // namespace tempo::nn
