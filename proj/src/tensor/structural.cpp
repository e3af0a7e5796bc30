#include <algorithm>
#include <cmath>

#include "op_support.hpp"
#include "prorseg/ops.hpp"

namespace prorseg {

using detail::Dims5;
using detail::finish;
using detail::needs_grad;
using detail::Node;

namespace {

struct AxisSplit {
  Index outer, axis, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

// Separable 1D interpolation weights for half-pixel-centred resampling.
struct Lerp1d {
  std::vector<Index> lo, hi;
  std::vector<double> t;
};

Lerp1d upsample_weights(Index in, Index factor) {
  const Index out = in * factor;
  Lerp1d r;
  r.lo.resize(out);
  r.hi.resize(out);
  r.t.resize(out);
  for (Index o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const Index i0 = static_cast<Index>(std::floor(src));
    r.lo[o] = i0;
    r.hi[o] = std::min(i0 + 1, in - 1);
    r.t[o] = src - static_cast<double>(i0);
  }
  return r;
}

// Zero-padded running window sum along one axis of a [outer, n, inner] array.
void box_pass(const std::vector<double>& src, std::vector<double>& dst, const AxisSplit& s,
              Index radius) {
  dst.assign(src.size(), 0.0);
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i < s.axis; ++i) {
      const Index lo = std::max<Index>(0, i - radius);
      const Index hi = std::min<Index>(s.axis - 1, i + radius);
      double* d = dst.data() + (o * s.axis + i) * s.inner;
      for (Index j = lo; j <= hi; ++j) {
        const double* p = src.data() + (o * s.axis + j) * s.inner;
        for (Index q = 0; q < s.inner; ++q) d[q] += p[q];
      }
    }
}

std::vector<double> box_sum_raw(const std::vector<double>& v, const Shape& shape, Index radius) {
  const std::size_t r = shape.size();
  std::vector<double> a = v, b;
  for (std::size_t axis = r - 3; axis < r; ++axis) {
    box_pass(a, b, split_at(shape, axis), radius);
    std::swap(a, b);
  }
  return a;
}

}  // namespace

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const Tensor& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
    if (!ok) {
      throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref) +
                       " along axis " + std::to_string(axis));
    }
    out_shape[axis] += s[axis];
  }
  const AxisSplit os = split_at(out_shape, axis);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::vector<Index> offsets;
  Index offset = 0;
  for (const Tensor& p : parts) {
    offsets.push_back(offset);
    const Index block = p.dim(axis) * os.inner;
    for (Index o = 0; o < os.outer; ++o)
      std::copy_n(p.data().data() + o * block, block, out.data() + (o * os.axis * os.inner) + offset * os.inner);
    offset += p.dim(axis);
  }
  bool grad = false;
  for (const Tensor& p : parts) grad = grad || needs_grad({&p});
  std::vector<detail::NodePtr> nodes;
  for (const Tensor& p : parts) nodes.push_back(p.node());
  return finish("concat", std::move(out_shape), std::move(out), grad,
                [nodes, offsets, os](const Node& o) {
                  for (std::size_t k = 0; k < nodes.size(); ++k) {
                    Node& n = *nodes[k];
                    if (!n.requires_grad) continue;
                    auto& g = n.grad_buffer();
                    const Index block = static_cast<Index>(g.size()) / os.outer;
                    for (Index b = 0; b < os.outer; ++b) {
                      const double* src = o.grad.data() + b * os.axis * os.inner + offsets[k] * os.inner;
                      double* dst = g.data() + b * block;
                      for (Index i = 0; i < block; ++i) dst[i] += src[i];
                    }
                  }
                });
}

Tensor slice(const Tensor& x, std::size_t axis, Index begin, Index end) {
  if (axis >= x.rank() || begin < 0 || end > x.dim(axis) || begin >= end) {
    throw ShapeError("slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = end - begin;
  const Index block = (end - begin) * s.inner;
  std::vector<double> out(static_cast<std::size_t>(s.outer * block));
  for (Index o = 0; o < s.outer; ++o)
    std::copy_n(x.data().data() + (o * s.axis + begin) * s.inner, block, out.data() + o * block);
  return finish("slice", std::move(out_shape), std::move(out), needs_grad({&x}),
                [xn = x.node(), s, begin, block](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (Index b = 0; b < s.outer; ++b) {
                    double* dst = g.data() + (b * s.axis + begin) * s.inner;
                    const double* src = o.grad.data() + b * block;
                    for (Index i = 0; i < block; ++i) dst[i] += src[i];
                  }
                });
}

Tensor maxpool3d(const Tensor& x, Index k) {
  const Dims5 in = detail::dims5(x, "maxpool3d");
  if (k < 1 || in.d % k || in.h % k || in.w % k) {
    throw ShapeError("maxpool3d: spatial dims of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(k));
  }
  const Index od = in.d / k, oh = in.h / k, ow = in.w / k;
  const Index planes = in.n * in.c;
  const auto v = x.data();
  std::vector<double> out(static_cast<std::size_t>(planes * od * oh * ow));
  std::vector<Index> argmax(out.size());
  for (Index p = 0; p < planes; ++p)
    for (Index z = 0; z < od; ++z)
      for (Index y = 0; y < oh; ++y)
        for (Index xo = 0; xo < ow; ++xo) {
          Index best = -1;
          for (Index a = 0; a < k; ++a)
            for (Index b = 0; b < k; ++b)
              for (Index c = 0; c < k; ++c) {
                const Index i = ((p * in.d + z * k + a) * in.h + y * k + b) * in.w + xo * k + c;
                if (best < 0 || v[i] > v[best]) best = i;
              }
          const Index oi = ((p * od + z) * oh + y) * ow + xo;
          out[oi] = v[best];
          argmax[oi] = best;
        }
  return finish("maxpool3d", {in.n, in.c, od, oh, ow}, std::move(out), needs_grad({&x}),
                [xn = x.node(), argmax = std::move(argmax)](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += o.grad[i];
                });
}

Tensor avgpool3d(const Tensor& x, Index k) {
  const Dims5 in = detail::dims5(x, "avgpool3d");
  if (k < 1 || in.d % k || in.h % k || in.w % k) {
    throw ShapeError("avgpool3d: spatial dims of " + shape_str(x.shape()) + " not divisible by " +
                     std::to_string(k));
  }
  const Index od = in.d / k, oh = in.h / k, ow = in.w / k;
  const Index planes = in.n * in.c;
  const double inv = 1.0 / static_cast<double>(k * k * k);
  const auto v = x.data();
  std::vector<double> out(static_cast<std::size_t>(planes * od * oh * ow), 0.0);
  auto visit = [=](auto&& fn) {
    for (Index p = 0; p < planes; ++p)
      for (Index z = 0; z < in.d; ++z)
        for (Index y = 0; y < in.h; ++y)
          for (Index xi = 0; xi < in.w; ++xi)
            fn(((p * od + z / k) * oh + y / k) * ow + xi / k, ((p * in.d + z) * in.h + y) * in.w + xi);
  };
  visit([&](Index oi, Index ii) { out[oi] += v[ii] * inv; });
  return finish("avgpool3d", {in.n, in.c, od, oh, ow}, std::move(out), needs_grad({&x}),
                [xn = x.node(), visit, inv](const Node& o) {
                  auto& g = xn->grad_buffer();
                  visit([&](Index oi, Index ii) { g[ii] += o.grad[oi] * inv; });
                });
}

Tensor upsample_trilinear(const Tensor& x, Index factor) {
  const Dims5 in = detail::dims5(x, "upsample_trilinear");
  if (factor < 1) throw ShapeError("upsample_trilinear: factor must be >= 1");
  const Index od = in.d * factor, oh = in.h * factor, ow = in.w * factor;
  const Lerp1d wz = upsample_weights(in.d, factor);
  const Lerp1d wy = upsample_weights(in.h, factor);
  const Lerp1d wx = upsample_weights(in.w, factor);
  const Index planes = in.n * in.c;

  auto visit = [=](auto&& fn) {
    for (Index p = 0; p < planes; ++p)
      for (Index z = 0; z < od; ++z)
        for (Index y = 0; y < oh; ++y)
          for (Index xo = 0; xo < ow; ++xo) {
            const Index oi = ((p * od + z) * oh + y) * ow + xo;
            const Index zs[2] = {wz.lo[z], wz.hi[z]};
            const Index ys[2] = {wy.lo[y], wy.hi[y]};
            const Index xs[2] = {wx.lo[xo], wx.hi[xo]};
            const double tz[2] = {1.0 - wz.t[z], wz.t[z]};
            const double ty[2] = {1.0 - wy.t[y], wy.t[y]};
            const double tx[2] = {1.0 - wx.t[xo], wx.t[xo]};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int c = 0; c < 2; ++c)
                  fn(oi, ((p * in.d + zs[a]) * in.h + ys[b]) * in.w + xs[c], tz[a] * ty[b] * tx[c]);
          }
  };
  const auto v = x.data();
  std::vector<double> out(static_cast<std::size_t>(planes * od * oh * ow), 0.0);
  visit([&](Index oi, Index ii, double w) { out[oi] += w * v[ii]; });
  return finish("upsample_trilinear", {in.n, in.c, od, oh, ow}, std::move(out), needs_grad({&x}),
                [xn = x.node(), visit](const Node& o) {
                  auto& g = xn->grad_buffer();
                  visit([&](Index oi, Index ii, double w) { g[ii] += w * o.grad[oi]; });
                });
}

Tensor box_sum3d(const Tensor& x, Index radius) {
  if (x.rank() < 3) throw ShapeError("box_sum3d: needs >= 3 axes, got " + shape_str(x.shape()));
  if (radius < 0) throw ShapeError("box_sum3d: radius must be >= 0");
  std::vector<double> in(x.data().begin(), x.data().end());
  std::vector<double> out = box_sum_raw(in, x.shape(), radius);
  // The zero-padded symmetric window is self-adjoint.
  return finish("box_sum3d", x.shape(), std::move(out), needs_grad({&x}),
                [xn = x.node(), radius](const Node& o) {
                  const std::vector<double> g = box_sum_raw(o.grad, o.shape, radius);
                  auto& gx = xn->grad_buffer();
                  for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

Tensor forward_diff(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank() || x.dim(axis) < 2) {
    throw ShapeError("forward_diff: axis " + std::to_string(axis) + " too short in " + shape_str(x.shape()));
  }
  const AxisSplit s = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] -= 1;
  const auto v = x.data();
  std::vector<double> out(static_cast<std::size_t>(shape_numel(out_shape)));
  for (Index o = 0; o < s.outer; ++o)
    for (Index i = 0; i + 1 < s.axis; ++i) {
      const double* a = v.data() + (o * s.axis + i) * s.inner;
      const double* b = a + s.inner;
      double* d = out.data() + (o * (s.axis - 1) + i) * s.inner;
      for (Index q = 0; q < s.inner; ++q) d[q] = b[q] - a[q];
    }
  return finish("forward_diff", std::move(out_shape), std::move(out), needs_grad({&x}),
                [xn = x.node(), s](const Node& o) {
                  auto& g = xn->grad_buffer();
                  for (Index b = 0; b < s.outer; ++b)
                    for (Index i = 0; i + 1 < s.axis; ++i) {
                      const double* d = o.grad.data() + (b * (s.axis - 1) + i) * s.inner;
                      double* ga = g.data() + (b * s.axis + i) * s.inner;
                      double* gb = ga + s.inner;
                      for (Index q = 0; q < s.inner; ++q) {
                        ga[q] -= d[q];
                        gb[q] += d[q];
                      }
                    }
                });
}

}  // namespace prorseg
