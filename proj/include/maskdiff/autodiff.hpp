// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "maskdiff/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace maskdiff {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  // Empty until a gradient flows in; an empty grad after backward means the
  // node was not reached.
  Tensor<Scalar> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<Scalar>& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor<Scalar>::zeros(value.shape());
    return grad;
  }
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<Scalar>& value() const { return node_->value; }
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Tensor<Scalar>& grad() const { return node_->grad; }
  Tensor<Scalar>& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size() && node_->value.size() > 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void zero_grad() { node_->grad = Tensor<Scalar>(); }

  const Shape& shape() const { return node_->value.shape(); }
  Index dim(int i) const { return node_->value.dim(i); }
  Index size() const { return node_->value.size(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool grad_enabled();

 private:
  bool previous_;
};

namespace detail {

/// Wraps an op result. Records `backward` only when recording is on and some
/// parent requires a gradient.
template <typename Scalar>
Var<Scalar> record(Tensor<Scalar> value, std::vector<Var<Scalar>> parents,
                   std::function<void(Node<Scalar>&)> backward) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  if (NoGradGuard::grad_enabled()) {
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node());
      node->backward_fn = std::move(backward);
    }
  }
  return Var<Scalar>(std::move(node));
}

template <typename Scalar>
bool wants_grad(const Node<Scalar>& self, std::size_t i) {
  return self.parents[i] && self.parents[i]->requires_grad;
}

}  // namespace detail

/// Back-propagates from a scalar (single element) root. Gradients accumulate
/// into every reachable leaf that requires them; intermediate buffers are
/// released as soon as they have been consumed.
template <typename Scalar>
void backward(const Var<Scalar>& root);

/// Same as backward() but seeds the root with an explicit upstream gradient.
template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed);

}  // namespace maskdiff
