#include <algorithm>
#include <cmath>

#include "op_support.hpp"
#include "prorseg/ops.hpp"

namespace prorseg {

using detail::finish;
using detail::needs_grad;
using detail::Node;
using detail::require_same_shape;

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return finish("add", a.shape(), std::move(out), needs_grad({&a, &b}),
                [an = a.node(), bn = b.node()](const Node& o) {
                  for (auto* in : {an.get(), bn.get()}) {
                    if (!in->requires_grad) continue;
                    auto& g = in->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                  }
                });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return finish("sub", a.shape(), std::move(out), needs_grad({&a, &b}),
                [an = a.node(), bn = b.node()](const Node& o) {
                  if (an->requires_grad) {
                    auto& g = an->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                  }
                  if (bn->requires_grad) {
                    auto& g = bn->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= o.grad[i];
                  }
                });
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "hadamard");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return finish("hadamard", a.shape(), std::move(out), needs_grad({&a, &b}),
                [an = a.node(), bn = b.node()](const Node& o) {
                  if (an->requires_grad) {
                    auto& g = an->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->data[i];
                  }
                  if (bn->requires_grad) {
                    auto& g = bn->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->data[i];
                  }
                });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / y[i];
  return finish("div", a.shape(), std::move(out), needs_grad({&a, &b}),
                [an = a.node(), bn = b.node()](const Node& o) {
                  if (an->requires_grad) {
                    auto& g = an->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / bn->data[i];
                  }
                  if (bn->requires_grad) {
                    auto& g = bn->grad_buffer();
                    for (std::size_t i = 0; i < g.size(); ++i) {
                      const double q = bn->data[i];
                      g[i] -= o.grad[i] * an->data[i] / (q * q);
                    }
                  }
                });
}

Tensor scale(const Tensor& x, double factor) {
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * factor;
  return finish("scale", x.shape(), std::move(out), needs_grad({&x}),
                [xn = x.node(), factor](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * factor;
                });
}

Tensor add_scalar(const Tensor& x, double value) {
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + value;
  return finish("add_scalar", x.shape(), std::move(out), needs_grad({&x}),
                [xn = x.node()](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                });
}

Tensor square(const Tensor& x) {
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * v[i];
  return finish("square", x.shape(), std::move(out), needs_grad({&x}),
                [xn = x.node()](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += 2.0 * o.grad[i] * xn->data[i];
                });
}

Tensor log_eps(const Tensor& x, double eps) {
  const auto v = x.data();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(v[i] + eps);
  return finish("log_eps", x.shape(), std::move(out), needs_grad({&x}),
                [xn = x.node(), eps](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] / (xn->data[i] + eps);
                });
}

Tensor activation(const Tensor& x, Activation kind) {
  const auto v = x.data();
  for (double e : v) {
    if (!std::isfinite(e)) throw NumericError("activation: non-finite input");
  }
  std::vector<double> out(v.size());
  switch (kind) {
    case Activation::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-v[i]));
      return finish("sigmoid", x.shape(), std::move(out), needs_grad({&x}),
                    [xn = x.node()](const Node& o) {
                      auto& g = xn->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const double s = o.data[i];
                        g[i] += o.grad[i] * s * (1.0 - s);
                      }
                    });
    case Activation::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(v[i]);
      return finish("tanh", x.shape(), std::move(out), needs_grad({&x}),
                    [xn = x.node()](const Node& o) {
                      auto& g = xn->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) {
                        const double t = o.data[i];
                        g[i] += o.grad[i] * (1.0 - t * t);
                      }
                    });
    case Activation::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
      return finish("relu", x.shape(), std::move(out), needs_grad({&x}),
                    [xn = x.node()](const Node& o) {
                      auto& g = xn->grad_buffer();
                      for (std::size_t i = 0; i < g.size(); ++i) g[i] += xn->data[i] > 0.0 ? o.grad[i] : 0.0;
                    });
    case Activation::softmax_channels: {
      if (x.rank() < 2) {
        throw ShapeError("softmax_channels: needs a channel axis, got " + shape_str(x.shape()));
      }
      const Index n = x.dim(0), c = x.dim(1);
      const Index inner = x.numel() / (n * c);
      for (Index b = 0; b < n; ++b) {
        const Index base = b * c * inner;
        for (Index p = 0; p < inner; ++p) {
          double m = v[base + p];
          for (Index k = 1; k < c; ++k) m = std::max(m, v[base + k * inner + p]);
          double z = 0.0;
          for (Index k = 0; k < c; ++k) {
            const double e = std::exp(v[base + k * inner + p] - m);
            out[base + k * inner + p] = e;
            z += e;
          }
          for (Index k = 0; k < c; ++k) out[base + k * inner + p] /= z;
        }
      }
      return finish("softmax_channels", x.shape(), std::move(out), needs_grad({&x}),
                    [xn = x.node(), n, c, inner](const Node& o) {
                      auto& g = xn->grad_buffer();
                      for (Index b = 0; b < n; ++b) {
                        const Index base = b * c * inner;
                        for (Index p = 0; p < inner; ++p) {
                          double dot = 0.0;
                          for (Index k = 0; k < c; ++k) {
                            const Index i = base + k * inner + p;
                            dot += o.grad[i] * o.data[i];
                          }
                          for (Index k = 0; k < c; ++k) {
                            const Index i = base + k * inner + p;
                            g[i] += o.data[i] * (o.grad[i] - dot);
                          }
                        }
                      }
                    });
    }
  }
  throw std::logic_error("activation: unknown kind");
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double e : x.data()) s += e;
  return finish("sum", {1}, {s}, needs_grad({&x}), [xn = x.node()](const Node& o) {
    auto& g = xn->grad_buffer();
    const double go = o.grad[0];
    for (double& e : g) e += go;
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_spatial(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("sum_spatial: needs [N,C,...], got " + shape_str(x.shape()));
  const Index n = x.dim(0), c = x.dim(1);
  const Index inner = x.numel() / (n * c);
  const auto v = x.data();
  std::vector<double> out(static_cast<std::size_t>(n * c), 0.0);
  for (Index bc = 0; bc < n * c; ++bc) {
    double s = 0.0;
    const double* p = v.data() + bc * inner;
    for (Index i = 0; i < inner; ++i) s += p[i];
    out[bc] = s;
  }
  return finish("sum_spatial", {n, c}, std::move(out), needs_grad({&x}),
                [xn = x.node(), n, c, inner](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (Index bc = 0; bc < n * c; ++bc) {
                    const double go = o.grad[bc];
                    double* p = g.data() + bc * inner;
                    for (Index i = 0; i < inner; ++i) p[i] += go;
                  }
                });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return finish("reshape", std::move(shape), std::move(out), needs_grad({&x}),
                [xn = x.node()](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
                });
}

}  // namespace prorseg
