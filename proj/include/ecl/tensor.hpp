#pragma once

// Dense float64 tensors with a dynamically recorded reverse-mode graph.
//
// A Tensor is a cheap handle onto a shared Node. Operations producing a
// tensor from inputs that require gradients record their parents and a
// backward closure on the output node; backward() walks the recorded graph
// in reverse topological order.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ecl/error.hpp"

namespace ecl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

enum class Mode { train, eval };

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until populated by backward()
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(const Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }

  std::vector<double>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

namespace detail {
inline bool& grad_enabled_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_enabled_flag(); }

/// Disables graph recording on this thread for the guard's lifetime.
class NoGrad {
 public:
  NoGrad() : previous_(detail::grad_enabled_flag()) {
    detail::grad_enabled_flag() = false;
  }
  ~NoGrad() { detail::grad_enabled_flag() = previous_; }
  NoGrad(const NoGrad&) = delete;
  NoGrad& operator=(const NoGrad&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) +
                           " values, got " + std::to_string(data.size()));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape " + shape_str(shape) + " has a zero axis");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  /// Wraps an already-built node; used by operations.
  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable access for parameter updates and test setup; does not
  /// invalidate recorded graphs that already consumed this tensor.
  std::span<double> mutable_data() const { return node_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double at(std::size_t i) const { return node_->data.at(i); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) const { node_->requires_grad = value; }

  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const double> grad() const { return node_->grad; }
  /// Zero-filled gradient buffer (allocating it if absent).
  std::span<double> mutable_grad() const { return node_->ensure_grad(); }
  void zero_grad() const {
    if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  const char* op() const { return node_->op; }
  const NodePtr& node() const { return node_; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Independent copy of the values (no graph, no grad).
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->data, requires_grad);
  }

 private:
  NodePtr node_;
};

/// Builds an operation output. The backward closure is attached only when
/// some input requires a gradient and grad mode is on.
inline Tensor make_op_result(const char* op, Shape shape, std::vector<double> data,
                             std::vector<NodePtr> inputs,
                             std::function<void(const Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  const bool needs = grad_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr& n) { return n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->parents = std::move(inputs);
    node->backward_fn = std::move(backward_fn);
  }
  return Tensor::from_node(std::move(node));
}

/// Nodes reachable from `root` through parents that require grad, ordered so
/// that every node appears after all of its parents.
inline std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  if (!root.requires_grad()) return order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS; graphs can be deep (long op chains).
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls
/// until zeroed; interior gradients are recomputed on every call.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  const auto order = topological_order(loss);
  if (order.empty()) return;
  for (Node* node : order) {
    if (node->is_leaf()) {
      node->ensure_grad();
    } else {
      node->grad.assign(node->data.size(), 0.0);
    }
  }
  order.back()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (!node->is_leaf()) node->backward_fn(*node);
  }
}

}  // namespace ecl
