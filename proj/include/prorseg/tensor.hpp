#pragma once

// Dense float64 tensors with a per-thread reverse-mode tape.
//
// A Tensor is a cheap handle onto shared storage. Values are immutable once an
// op has produced them; the only mutable state is the gradient buffer (written
// during backward) and the data of leaf tensors (written by the optimizer
// between steps).

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace prorseg {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Raised when an op produces NaN/Inf or a loss diverges.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first touched by backward
  bool requires_grad = false;
  bool leaf = true;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  Index dim(std::size_t axis) const { return node_->shape.at(axis); }
  Index numel() const { return static_cast<Index>(node_->data.size()); }

  std::span<const double> data() const { return node_->data; }
  // Writable view; only leaves may be mutated.
  std::span<double> mutable_data();
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  void set_requires_grad(bool on);

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; all zeros when backward never reached this tensor.
  std::vector<double> grad() const;
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no history.
  Tensor detach() const;

  const detail::NodePtr& node() const { return node_; }
  static Tensor from_node(detail::NodePtr node);

 private:
  detail::NodePtr node_;
};

// Ordered record of differentiable ops executed on the current thread.
class Tape {
 public:
  using BackwardFn = std::function<void(const detail::Node& out)>;

  static Tape& current();

  void record(detail::NodePtr out, BackwardFn fn, const char* op = "op");
  std::size_t size() const noexcept { return entries_.size(); }
  void clear() noexcept { entries_.clear(); }

  // Accumulates d(root)/d(leaf) into every reachable leaf, then clears.
  void backward(const Tensor& root);

 private:
  struct Entry {
    detail::NodePtr out;
    BackwardFn fn;
    const char* op;
  };
  std::vector<Entry> entries_;
};

void backward(const Tensor& root);

struct OpTiming {
  long calls = 0;
  double forward_seconds = 0.0;
  double backward_seconds = 0.0;
};

// Per-op timings of this thread, collected only when PRORSEG_PROFILE is set.
std::map<std::string, OpTiming> op_profile();

bool grad_enabled() noexcept;

// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace prorseg
