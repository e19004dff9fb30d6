// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "msft/numerics/errors.hpp"

namespace msft {

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

inline void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

/// While alive, new op results on this thread record no graph edges.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(active()) { active() = true; }
  ~NoGradGuard() { active() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool& active() {
    thread_local bool flag = false;
    return flag;
  }

 private:
  bool prev_;
};

/// One vertex of the autodiff graph. Ids grow monotonically with creation
/// time, and every op's inputs exist before the op does, so descending id
/// order is a reverse topological order.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs that require it.
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = 0;

  static std::uint64_t next_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
  }

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    }
    node_ = std::make_shared<Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->id = Node::next_id();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor vector(std::vector<double> v, bool requires_grad = false) {
    const auto n = v.size();
    return Tensor({n}, std::move(v), requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v, bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(v), requires_grad);
  }

  static Tensor identity(std::size_t n, bool requires_grad = false) {
    std::vector<double> v(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    return matrix(n, n, std::move(v), requires_grad);
  }

  /// Result of an op. The graph edge is kept only when some input tracks
  /// gradients; otherwise the result is a plain constant.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                        std::vector<std::shared_ptr<Node>> inputs, std::function<void(Node&)> backward) {
    require_finite(values, op);
    Tensor out(std::move(shape), std::move(values));
    const bool tracked = !NoGradGuard::active() &&
        std::any_of(inputs.begin(), inputs.end(), [](const auto& n) { return n && n->requires_grad; });
    out.node_->op = op;
    if (tracked) {
      out.node_->requires_grad = true;
      out.node_->inputs = std::move(inputs);
      out.node_->backward_fn = std::move(backward);
    }
    return out;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw IndexError("axis " + std::to_string(i) + " out of range for " + shape_str(shape()));
    return node_->shape[i];
  }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return rank() == 2 ? dim(0) : 1; }
  std::size_t cols() const { return rank() == 0 ? 1 : node_->shape.back(); }

  std::span<const double> data() const { return node_->value; }
  /// Writable storage. Only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor with shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value.at(i); }
  double at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->inputs.empty()) throw ContractError("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->inputs.empty(); }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Constant copy sharing no graph.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  const std::shared_ptr<Node>& node() const { return node_; }
  const char* op() const { return node_->op; }

 private:
  std::shared_ptr<Node> node_;
};

struct BackwardReport {
  std::size_t nodes_visited = 0;
};

/// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
/// reachable tensor that requires them; leaves keep theirs until
/// zero_grad(), intermediates are released afterwards.
inline BackwardReport backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!std::isfinite(loss.item())) throw NumericError("backward on non-finite loss");
  BackwardReport report;
  if (!loss.requires_grad()) return report;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const Node* a, const Node* b) { return a->id > b->id; });

  loss.node()->grad_buffer()[0] += 1.0;
  for (Node* n : order) {
    ++report.nodes_visited;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  for (Node* n : order) {
    if (!n->inputs.empty()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
  return report;
}

}  // namespace msft
