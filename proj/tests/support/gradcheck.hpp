#pragma once

// Central finite-difference oracle for gradient tests. Independent of the tape:
// it only re-evaluates the forward function on perturbed copies of the inputs.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "prorseg/tensor.hpp"

namespace prorseg::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
  for (double& e : v) e = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
};

// Relative error per element is |a - n| / max(|a|, |n|, floor); the floor
// keeps near-zero derivatives from dominating.
inline GradCheckResult gradcheck(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                 double h = 1e-5, double floor = 1e-3,
                                 std::size_t max_probes_per_leaf = 0) {
  for (auto& t : leaves) t.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  GradCheckResult r;
  for (auto& t : leaves) {
    const std::vector<double> analytic = t.grad();
    auto data = t.mutable_data();
    const std::size_t n = data.size();
    const std::size_t stride =
        (max_probes_per_leaf == 0 || n <= max_probes_per_leaf) ? 1 : (n + max_probes_per_leaf - 1) / max_probes_per_leaf;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = orig + h;
        plus = loss_fn().item();
        data[i] = orig - h;
        minus = loss_fn().item();
        data[i] = orig;
      }
      const double numeric = (plus - minus) / (2.0 * h);
      const double err = std::abs(numeric - analytic[i]);
      const double denom = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
      r.max_abs_error = std::max(r.max_abs_error, err);
      r.max_rel_error = std::max(r.max_rel_error, err / denom);
    }
  }
  Tape::current().clear();
  return r;
}

}  // namespace prorseg::testing
