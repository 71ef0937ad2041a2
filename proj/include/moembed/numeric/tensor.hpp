#pragma once

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

#include "moembed/error.hpp"

namespace moembed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One recorded value in the computation graph. Leaves have no inputs;
// interior nodes carry the local gradient rule that pushes `grad` into the
// grads of their inputs.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

/// Dense row-major float64 array with an optional reverse-mode gradient.
///
/// Tensor is a cheap shared handle: copies alias the same storage. Results
/// of operations on tensors that require gradients remember their inputs,
/// so calling backward() on a scalar result fills grad() of every
/// contributing leaf.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("tensor shape has a zero extent: " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(data), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape.back() : 1; }

  std::span<const double> data() const { return node_->value; }
  /// Direct write access; only meaningful for leaves (parameters).
  std::span<double> mutable_data() { return node_->value; }
  std::vector<double> to_vector() const { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Fresh leaf holding a copy of the value, cut off from the graph.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  const char* op_name() const { return node_->op; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// While alive, operations on this thread record no gradient information.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(enabled()) { enabled() = false; }
  ~NoGradGuard() { enabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }

 private:
  bool previous_;
};

namespace detail {

// Builds the result node of an operation. Gradient bookkeeping is skipped
// entirely when no input requires a gradient.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward, const char* op) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool rg = NoGradGuard::enabled() && std::any_of(inputs.begin(), inputs.end(),
                        [](const Tensor& t) { return t.defined() && t.requires_grad(); });
  if (rg) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of an input, or nullptr when it does not need one.
inline double* grad_of(Node& self, std::size_t i) {
  auto& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  return in.ensure_grad().data();
}

}  // namespace detail

/// Reverse-ordered list of the operations that produced a scalar.
///
/// Recording walks the graph once; replay runs every local gradient rule
/// in reverse topological order, which is exactly the chain rule for the
/// recorded forward pass.
class ComputationTape {
 public:
  explicit ComputationTape(const Tensor& root) : root_(root.node()) {
    std::unordered_set<const detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    if (root_->requires_grad) stack.emplace_back(root_.get(), 0);
    seen.insert(root_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::size_t size() const { return order_.size(); }

  /// Seeds d(root)/d(root) = 1 and propagates to every input.
  void replay() {
    if (!root_->requires_grad) return;
    if (root_->value.size() != 1) {
      throw DimensionError("backward requires a scalar, got shape " + shape_str(root_->shape));
    }
    root_->ensure_grad()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node* n = *it;
      if (n->backward && n->grad.size() == n->value.size()) n->backward(*n);
    }
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
};

/// Accumulates d(loss)/d(leaf) into every leaf that requires a gradient.
inline void backward(const Tensor& loss) {
  ComputationTape tape(loss);
  tape.replay();
}

}  // namespace moembed
