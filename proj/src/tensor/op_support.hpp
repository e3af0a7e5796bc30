#pragma once

// Shared plumbing for op implementations. Not installed.

#include <cmath>
#include <string>
#include <utility>

#include "prorseg/tensor.hpp"

namespace prorseg::detail {

struct Dims5 {
  Index n, c, d, h, w;
  Index spatial() const { return d * h * w; }
};

inline Dims5 dims5(const Tensor& t, const char* op) {
  if (t.rank() != 5) {
    throw ShapeError(std::string(op) + ": expected NCDHW tensor, got shape " + shape_str(t.shape()));
  }
  const Shape& s = t.shape();
  return {s[0], s[1], s[2], s[3], s[4]};
}

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// x * 0 is NaN exactly when x is not finite; the lane-parallel sum keeps the
// scan vectorizable.
inline void check_finite(const std::vector<double>& v, const char* op) {
  double lanes[8] = {};
  const std::size_t n = v.size(), body = n - n % 8;
  for (std::size_t i = 0; i < body; i += 8)
    for (std::size_t j = 0; j < 8; ++j) lanes[j] += v[i + j] * 0.0;
  double acc = 0.0;
  for (std::size_t i = body; i < n; ++i) acc += v[i] * 0.0;
  for (double l : lanes) acc += l;
  if (acc != 0.0) throw NumericError(std::string(op) + ": non-finite value in output");
}

// Builds the output node; records `fn` on the tape when grad is required.
inline Tensor finish(const char* op, Shape shape, std::vector<double> data, bool grad,
                     Tape::BackwardFn fn) {
  check_finite(data, op);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->requires_grad = grad;
  node->leaf = !grad;
  if (grad) Tape::current().record(node, std::move(fn), op);
  return Tensor::from_node(std::move(node));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace prorseg::detail
