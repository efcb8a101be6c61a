#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cfsl/errors.hpp"

namespace cfsl {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

// One vertex of the define-by-run graph. Inputs and the backward closure are
// only populated when the node participates in gradient computation; both are
// released once backward() has replayed the node.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) {
    detail::grad_mode_flag() = false;
  }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Dense row-major float64 array. Copies share the underlying node, so a
// Tensor behaves like a handle; ops always produce new nodes.
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (cfsl::numel(shape) != data.size()) {
      throw DimensionError("tensor data of length " +
                           std::to_string(data.size()) +
                           " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = cfsl::numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value),
                  requires_grad);
  }
  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 0.0, requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), 1.0, requires_grad);
  }
  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({}, {value}, requires_grad);
  }
  static Tensor from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t dim(std::ptrdiff_t axis) const {
    auto r = static_cast<std::ptrdiff_t>(rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r) {
      throw DimensionError("axis out of range for shape " + to_string(shape()));
    }
    return node_->shape[static_cast<std::size_t>(axis)];
  }

  std::span<const double> data() const { return node_->data; }
  // Mutable access is for leaves (parameters, buffers) only: mutating an
  // interior node would silently invalidate saved activations.
  std::span<double> mutable_data() {
    if (!node_->leaf) throw Error("mutable_data() on a non-leaf tensor");
    return node_->data;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (!node_->leaf) throw Error("requires_grad can only be set on leaves");
    node_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  double item() const {
    if (numel() != 1) {
      throw DimensionError("item() on tensor of shape " + to_string(shape()));
    }
    return node_->data[0];
  }

  double at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) throw DimensionError("at(): rank mismatch");
    std::size_t offset = 0;
    std::size_t axis = 0;
    for (auto i : index) {
      if (i >= node_->shape[axis]) throw DimensionError("at(): index out of range");
      offset = offset * node_->shape[axis] + i;
      ++axis;
    }
    return node_->data[offset];
  }

  // Fresh leaf holding a copy of the values.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Creates the output node of an op. The backward closure is stored only when
// grad mode is on and at least one input requires a gradient.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, const char* op,
                   Backward&& backward) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  node->leaf = false;
  bool needs_grad = false;
  if (grad_mode_flag()) {
    for (const auto& t : inputs) {
      if (t.defined() && t.requires_grad()) needs_grad = true;
    }
  }
  if (needs_grad) {
    node->requires_grad = true;
    for (const auto& t : inputs) node->inputs.push_back(t.node_ptr());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor::from_node(std::move(node));
}

template <class Backward>
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, const char* op,
                   Backward&& backward) {
  return make_result(std::move(shape), std::move(data),
                     std::vector<Tensor>(inputs), op,
                     std::forward<Backward>(backward));
}

// Input slot `i` wants a gradient (it may be undefined, e.g. an absent bias).
inline bool wants_grad(const Node& self, std::size_t i) {
  return i < self.inputs.size() && self.inputs[i] &&
         self.inputs[i]->requires_grad;
}

}  // namespace detail

// Topologically ordered record of the ops reachable from a scalar root.
// Entries are ordered so that every op's inputs precede it; backward()
// replays them in reverse and then releases the graph.
class Tape {
 public:
  struct Entry {
    const detail::Node* node;
    const char* op;
    std::vector<const detail::Node*> inputs;
  };

  explicit Tape(const Tensor& root) : root_(root.node_ptr()) {
    if (!root_) throw Error("backward on undefined tensor");
    if (root_->data.size() != 1) {
      throw DimensionError("backward root must be a scalar, got shape " +
                           to_string(root_->shape));
    }
    if (!root_->requires_grad) return;
    // Iterative post-order DFS.
    std::unordered_set<const detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root_.get(), 0);
    visited.insert(root_.get());
    std::vector<detail::Node*> post;
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child && child->requires_grad && visited.insert(child).second) {
          stack.emplace_back(child, 0);
        }
      } else {
        post.push_back(node);
        stack.pop_back();
      }
    }
    order_ = std::move(post);
    for (auto* n : order_) {
      Entry e{n, n->op, {}};
      for (const auto& in : n->inputs) {
        if (in && in->requires_grad) e.inputs.push_back(in.get());
      }
      entries_.push_back(std::move(e));
    }
  }

  const std::vector<Entry>& entries() const { return entries_; }

  void backward() {
    if (!root_->requires_grad) {
      throw Error("backward root does not require grad");
    }
    root_->grad.assign(1, 1.0);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      for (double g : n.grad) {
        if (!std::isfinite(g)) {
          throw NumericError(std::string("non-finite gradient flowing into op '") +
                             n.op + "'");
        }
      }
      n.backward(n);
      // Interior gradients are dead once propagated; freeing them early lets
      // the allocator recycle memory instead of faulting in fresh pages.
      if (!n.leaf && &n != root_.get()) std::vector<double>().swap(n.grad);
    }
    for (auto* n : order_) {
      if (!n->leaf) {
        n->inputs.clear();
        n->backward = nullptr;
      }
    }
    order_.clear();
  }

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<detail::Node*> order_;
  std::vector<Entry> entries_;
};

// Accumulates d(root)/d(leaf) into every reachable leaf requiring a gradient.
inline void backward(const Tensor& root) { Tape(root).backward(); }

}  // namespace cfsl
