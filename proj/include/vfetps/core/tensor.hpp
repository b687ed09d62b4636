#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vfetps/core/errors.hpp"

namespace vfetps {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Receives this node's output gradient and accumulates into parents.
  std::function<void(const std::vector<T>&)> backward;
  const char* op = "leaf";
  // Number of ops that consumed this node (parameter-access instrumentation).
  std::uint64_t reads = 0;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Recording is on by default; inside a guard no backward closures are built.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Dense row-major array with value semantics on the handle: copies share the
// underlying node, which is what the gradient graph needs.
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("tensor data length " + std::to_string(data.size()) +
                           " does not match shape " + shape_str(shape));
    }
    for (auto d : shape) {
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  static Tensor from_node(NodePtr n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_scalar() const { return numel() == 1; }

  std::span<const T> data() const { return node_->value; }
  /// Writable view. Only meant for leaves (parameters, inputs): mutating an
  /// interior node invalidates values saved by downstream backward closures.
  std::span<T> mutable_data() { return node_->value; }
  const std::vector<T>& values() const { return node_->value; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->shape.back() + c]; }

  std::uint64_t reads() const { return node_->reads; }
  void reset_reads() { node_->reads = 0; }
  const char* op_name() const { return node_->op; }

  /// Same values, cut from the graph.
  Tensor detach() const { return Tensor(shape(), values()); }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    for (std::size_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(node_->value[i]);
    return Tensor<U>(shape(), std::move(out));
  }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Builds the result node of an op. The backward closure is only kept when
/// recording is enabled and some input needs a gradient.
template <class T, class Backward>
Tensor<T> make_result(Shape shape, std::vector<T> value, std::initializer_list<Tensor<T>> inputs,
                      const char* op, Backward&& backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& in : inputs) {
    in.node()->reads++;
    needs = needs || in.requires_grad();
  }
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <class T>
Tensor<T> make_result_list(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                           const char* op, std::function<void(const std::vector<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  for (const auto& in : inputs) {
    in.node()->reads++;
    needs = needs || in.requires_grad();
  }
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

/// Accumulation target for an input's gradient, or nullptr if it needs none.
template <class T>
std::vector<T>* grad_target(const Tensor<T>& t) {
  return t.requires_grad() ? &t.node()->grad_buffer() : nullptr;
}

/// Topologically ordered record of the recorded subgraph reachable from a
/// scalar loss. Replaying it runs every backward closure exactly once.
template <class T>
class GradientTape {
 public:
  explicit GradientTape(const Tensor<T>& loss) : loss_(loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
    }
    record();
  }

  std::size_t size() const { return order_.size(); }

  /// Returns the number of nodes whose backward closure ran.
  std::size_t replay() {
    if (!loss_.requires_grad()) return 0;
    auto& g = loss_.node()->grad_buffer();
    g[0] += T(1);
    std::size_t visited = 0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      auto* n = *it;
      if (n->backward && !n->grad.empty()) {
        n->backward(n->grad);
        ++visited;
      }
    }
    return visited;
  }

 private:
  void record() {
    if (!loss_.requires_grad()) return;
    std::unordered_set<const detail::Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(loss_.node().get(), 0);
    seen.insert(loss_.node().get());
    while (!stack.empty()) {
      auto& [n, next_parent] = stack.back();
      if (next_parent < n->parents.size()) {
        auto* p = n->parents[next_parent++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order_.push_back(n);
        stack.pop_back();
      }
    }
  }

  Tensor<T> loss_;
  std::vector<detail::Node<T>*> order_;
};

/// Accumulates dLoss/dX into every reachable tensor with requires_grad.
template <class T>
std::size_t backward(const Tensor<T>& loss) {
  GradientTape<T> tape(loss);
  return tape.replay();
}

}  // namespace vfetps
