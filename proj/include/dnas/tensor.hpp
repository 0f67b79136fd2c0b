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
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dnas/errors.hpp"

namespace dnas {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

struct Node;
using BackwardFn = std::function<void(Node&)>;

/// One recorded value in the autodiff graph. Leaves have no inputs and no
/// backward function.
struct Node {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // non-empty iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  const char* op = "leaf";
  uint64_t seq = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
  }
};

namespace detail {
inline uint64_t next_seq() {
  static std::atomic<uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the enclosing scope.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense float32 array with reverse-mode autodiff. Copies share storage, the
/// way a handle does; use clone() for an independent copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, float fill = 0.0f, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    validate_shape(shape);
    node_->data.assign(static_cast<size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
    node_->seq = detail::next_seq();
    set_requires_grad(requires_grad);
  }

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    validate_shape(shape);
    if (static_cast<int64_t>(values.size()) != shape_numel(shape)) {
      throw ConfigError("tensor data length " + std::to_string(values.size()) +
                        " does not match shape " + shape_str(shape));
    }
    node_->data = std::move(values);
    node_->shape = std::move(shape);
    node_->seq = detail::next_seq();
    set_requires_grad(requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0f, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 1.0f, requires_grad);
  }
  static Tensor scalar(float v, bool requires_grad = false) {
    return Tensor(Shape{1}, v, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  int64_t dim(size_t i) const { return node_->shape.at(i); }
  size_t rank() const { return node_->shape.size(); }
  int64_t numel() const { return static_cast<int64_t>(node_->data.size()); }

  std::span<float> data() { return node_->data; }
  std::span<const float> data() const { return node_->data; }
  std::span<float> grad() { return node_->grad; }
  std::span<const float> grad() const { return node_->grad; }
  std::vector<float>& values() { return node_->data; }
  const std::vector<float>& values() const { return node_->data; }

  float item() const {
    if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (on) {
      node_->ensure_grad();
    } else {
      node_->grad.clear();
      node_->grad.shrink_to_fit();
    }
  }
  void zero_grad() {
    if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
  }

  const char* op() const { return node_->op; }
  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  /// Deep copy detached from the graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, node_->data, requires_grad);
  }

  /// Back-propagates from this scalar through the recorded graph.
  void backward() const;

  static Tensor from_node(std::shared_ptr<Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  static void validate_shape(const Shape& shape) {
    for (auto e : shape) {
      if (e < 0) throw ConfigError("negative extent in shape " + shape_str(shape));
    }
  }

  std::shared_ptr<Node> node_;
};

/// Topologically ordered view of the nodes reachable from a root. Creation
/// order is a valid topological order because inputs always exist before the
/// ops that consume them.
class Graph {
 public:
  static Graph trace(const Tensor& root) {
    Graph g;
    std::vector<Node*> stack{root.node()};
    std::unordered_set<Node*> seen{root.node()};
    while (!stack.empty()) {
      Node* n = stack.back();
      stack.pop_back();
      g.nodes_.push_back(n);
      for (auto& in : n->inputs) {
        if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
      }
    }
    std::sort(g.nodes_.begin(), g.nodes_.end(),
              [](const Node* a, const Node* b) { return a->seq < b->seq; });
    return g;
  }

  const std::vector<Node*>& nodes() const { return nodes_; }

  /// Runs every recorded backward function in reverse topological order, then
  /// releases the recorded edges so intermediate buffers can be freed.
  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = *it;
      if (n->backward) n->backward(*n);
    }
    for (Node* n : nodes_) {
      if (!n->inputs.empty()) {
        n->backward = nullptr;
        n->inputs.clear();
      }
    }
  }

 private:
  std::vector<Node*> nodes_;
};

inline void Tensor::backward() const {
  if (numel() != 1) throw ConfigError("backward() requires a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) throw ConfigError("backward() on a tensor that does not require grad");
  node_->ensure_grad();
  node_->grad[0] += 1.0f;
  Graph::trace(*this).backward();
}

/// Builds an op result. The backward function is recorded only when grad mode
/// is on and at least one input requires grad.
inline Tensor make_result(Shape shape, std::vector<float> data, std::vector<Tensor> inputs,
                          const char* op, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data));
  Node* n = out.node();
  n->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->ensure_grad();
    for (auto& t : inputs) n->inputs.push_back(t.node_ptr());
    n->backward = std::move(backward);
  }
  return out;
}

inline bool all_finite(std::span<const float> v) {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

/// Throws NumericError when any element is NaN or infinite.
inline void check_finite(const Tensor& t, std::string_view what) {
  const auto v = t.data();
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      std::ostringstream os;
      os << "non-finite value " << v[i] << " in " << what << " at flat index " << i << " (shape "
         << shape_str(t.shape()) << ")";
      throw NumericError(os.str());
    }
  }
}

}  // namespace dnas
