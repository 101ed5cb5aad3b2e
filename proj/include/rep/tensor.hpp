#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "rep/errors.hpp"
#include "rep/profiler.hpp"

namespace rep {

using Shape = std::vector<std::size_t>;

inline std::size_t numel_of(const Shape& s) {
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

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local bool grad_enabled = true;

}  // namespace detail

/// Disables graph recording on this thread for the lifetime of the scope.
class NoGradGuard {
 public:
  NoGradGuard() noexcept : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_mode() noexcept { return detail::grad_enabled; }

/// Dense row-major float64 array with an optional gradient slot.
///
/// Tensor is a shared handle: copies alias the same storage, which is what
/// lets the tape hold references to its operands. Use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    node_->data.assign(numel_of(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> data) : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != data.size()) {
      throw ConfigError("tensor data length " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<double> data() { return node_->data; }
  std::span<const double> data() const { return node_->data; }
  double& operator[](std::size_t i) { return node_->data[i]; }
  double operator[](std::size_t i) const { return node_->data[i]; }
  double item() const {
    if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> grad_mut() { return node_->grad_buffer(); }
  void zero_grad() { std::vector<double>().swap(node_->grad); }

  /// Copy of the values with no tape history.
  Tensor clone() const { return Tensor(shape(), node_->data); }
  /// Shares storage, drops history and requires_grad.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate.
  void backward() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }

  /// Creates a graph node for an op output. Records a backward closure only
  /// when grad mode is on and some parent requires a gradient.
  static Tensor make_result(Shape shape, std::vector<double> data, std::string_view op,
                            std::vector<Tensor> parents, std::function<void(detail::Node&)> backward,
                            std::size_t extra_retained_bytes = 0);

 private:
  std::shared_ptr<detail::Node> node_;
};

inline Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::string_view op,
                                  std::vector<Tensor> parents,
                                  std::function<void(detail::Node&)> backward,
                                  std::size_t extra_retained_bytes) {
  for (double v : data) {
    if (!std::isfinite(v)) {
      throw NumericError("non-finite value produced by " + std::string(op) + " " +
                         shape_str(shape));
    }
  }
  Tensor out(std::move(shape), std::move(data));
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward = std::move(backward);
    record_retained(out.numel() * sizeof(double) + extra_retained_bytes);
  }
  return out;
}

inline void Tensor::backward() const {
  if (numel() != 1) throw ConfigError("backward() requires a scalar, got " + shape_str(shape()));
  if (!requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the graph.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) {
      n->backward(*n);
      for (double g : n->grad) {
        if (!std::isfinite(g)) throw NumericError("non-finite gradient during backward");
      }
    }
  }
}

/// A named tensor with a trainable flag. Frozen parameters never get
/// requires_grad and are skipped by optimizers.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = false;

  Parameter() = default;
  Parameter(std::string n, Tensor t, bool train)
      : name(std::move(n)), tensor(std::move(t)), trainable(train) {
    tensor.set_requires_grad(trainable);
  }
  void set_trainable(bool on) {
    trainable = on;
    tensor.set_requires_grad(on);
    if (!on) tensor.zero_grad();
  }
};

}  // namespace rep
