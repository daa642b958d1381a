#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mtasr/common.hpp"

namespace mtasr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

class Tensor;

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first backward touch
  bool requires_grad = false;
  std::vector<Tensor> inputs;
  std::function<void(TensorNode&)> backward_fn;
  int visit_mark = 0;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantic handle to a shared node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
  Tensor(Shape shape, bool requires_grad = false)
      : node_(std::make_shared<TensorNode>()) {
    node_->shape = std::move(shape);
    node_->data.assign(shape_numel(node_->shape), 0.0);
    node_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("Tensor::from: data length " +
                       std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    Tensor t(std::move(shape), requires_grad);
    t.node_->data = std::move(data);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), v);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.data()) v = dist(rng);
    return t;
  }

  bool defined() const { return node_ != nullptr; }
  TensorNode* operator->() const { return node_.get(); }
  TensorNode& ref() const { return *node_; }
  std::shared_ptr<TensorNode> ptr() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }
  std::vector<double>& data() const { return node_->data; }
  std::vector<double>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  bool requires_grad() const { return node_->requires_grad; }

  double item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor");
    return node_->data[0];
  }
  double& at(std::size_t i) const { return node_->data.at(i); }
  double& at(std::size_t r, std::size_t c) const {
    return node_->data.at(r * cols() + c);
  }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// Thread-local switch: when off, ops record no tape nodes (inference mode).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
};

inline bool tape_active(const std::vector<Tensor>& inputs) {
  if (!grad_mode()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad() || t->backward_fn) return true;
  return false;
}

// Attach tape info to an op output.
inline void record(Tensor& out, std::vector<Tensor> inputs,
                   std::function<void(TensorNode&)> backward) {
  if (!tape_active(inputs)) return;
  out->inputs = std::move(inputs);
  out->backward_fn = std::move(backward);
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate additively;
// call zero_grad on parameters between steps.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  // Iterative topological order over nodes that carry a backward_fn or
  // require grad.
  std::vector<TensorNode*> order;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  std::unordered_set<TensorNode*> seen;
  stack.push_back({loss.ptr().get(), 0});
  seen.insert(loss.ptr().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->inputs.size()) {
      TensorNode* child = node->inputs[idx].ptr().get();
      ++idx;
      if (seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.ptr()->ensure_grad();
  loss.ptr()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

inline void zero_grad(const std::vector<Tensor>& params) {
  for (const auto& p : params) {
    p->grad.assign(p->data.size(), 0.0);
  }
}

// Drop tape edges so intermediate graphs can be freed between steps.
inline void detach(Tensor& t) {
  t->inputs.clear();
  t->backward_fn = nullptr;
}

}  // namespace mtasr
