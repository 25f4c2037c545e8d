// SPDX-License-Identifier: Apache-2.0
#include "maskdiff/autodiff.hpp"

#include <unordered_set>
#include <utility>

namespace maskdiff {

namespace {
thread_local bool g_grad_enabled = true;
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool NoGradGuard::grad_enabled() { return g_grad_enabled; }

template <typename Scalar>
void backward(const Var<Scalar>& root, const Tensor<Scalar>& seed) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (seed.shape() != root.shape()) {
    throw ShapeError("backward: seed shape " + shape_str(seed.shape()) + " does not match root " +
                     shape_str(root.shape()));
  }
  if (!root.requires_grad()) return;

  using NodeT = Node<Scalar>;
  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      NodeT* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer().vec() += seed.vec();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT& node = **it;
    if (!node.backward_fn) continue;  // leaf
    if (node.grad.size() == node.value.size()) node.backward_fn(node);
    node.backward_fn = nullptr;
    node.grad = Tensor<Scalar>();
  }
}

template <typename Scalar>
void backward(const Var<Scalar>& root) {
  if (root.defined() && root.size() != 1) {
    throw ShapeError("backward: root must hold a single element, got " + shape_str(root.shape()));
  }
  backward(root, Tensor<Scalar>::constant(root.shape(), Scalar(1)));
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);
template void backward<float>(const Var<float>&, const Tensor<float>&);
template void backward<double>(const Var<double>&, const Tensor<double>&);

}  // namespace maskdiff
