#include "prorseg/flow_field.hpp"

#include <algorithm>
#include <cmath>

#include "prorseg/ops.hpp"
#include "tensor/op_support.hpp"

namespace prorseg {

using detail::Node;

namespace {

// Trilinear stencil of a clamped sample point. d* are the derivatives of each
// corner weight w.r.t. the unclamped coordinate (zero where clamping is active).
struct Stencil {
  Index idx[8];
  double w[8];
  double dx[8], dy[8], dz[8];
};

struct Axis1d {
  Index i0, i1;
  double t;
  bool inside;  // derivative passes through
};

inline Axis1d axis_sample(double coord, Index n) {
  Axis1d a;
  const double hi = static_cast<double>(n - 1);
  a.inside = coord > 0.0 && coord < hi;
  const double c = std::clamp(coord, 0.0, hi);
  const double f = std::floor(c);
  a.i0 = static_cast<Index>(f);
  a.i1 = std::min(a.i0 + 1, n - 1);
  a.t = c - f;
  return a;
}

inline void make_stencil(double cx, double cy, double cz, Index W, Index H, Index D, Stencil& s) {
  const Axis1d ax = axis_sample(cx, W), ay = axis_sample(cy, H), az = axis_sample(cz, D);
  const Index xs[2] = {ax.i0, ax.i1}, ys[2] = {ay.i0, ay.i1}, zs[2] = {az.i0, az.i1};
  const double wx[2] = {1.0 - ax.t, ax.t}, wy[2] = {1.0 - ay.t, ay.t}, wz[2] = {1.0 - az.t, az.t};
  const double gx[2] = {ax.inside ? -1.0 : 0.0, ax.inside ? 1.0 : 0.0};
  const double gy[2] = {ay.inside ? -1.0 : 0.0, ay.inside ? 1.0 : 0.0};
  const double gz[2] = {az.inside ? -1.0 : 0.0, az.inside ? 1.0 : 0.0};
  int k = 0;
  for (int c = 0; c < 2; ++c)
    for (int b = 0; b < 2; ++b)
      for (int a = 0; a < 2; ++a, ++k) {
        s.idx[k] = (zs[c] * H + ys[b]) * W + xs[a];
        s.w[k] = wz[c] * wy[b] * wx[a];
        s.dx[k] = wz[c] * wy[b] * gx[a];
        s.dy[k] = wz[c] * gy[b] * wx[a];
        s.dz[k] = gz[c] * wy[b] * wx[a];
      }
}

void check_field(const Tensor& u, const char* op) {
  if (u.rank() != 5 || u.dim(0) != 1 || u.dim(1) != 3) {
    throw ShapeError(std::string(op) + ": field must be [1,3,D,H,W], got " + shape_str(u.shape()));
  }
}

}  // namespace

DeformationField DeformationField::identity(const GridDims& dims) {
  return {Tensor::zeros({1, 3, dims.z, dims.y, dims.x})};
}

GridDims DeformationField::dims() const { return {u.dim(4), u.dim(3), u.dim(2)}; }

Tensor warp_trilinear(const Tensor& img, const DeformationField& phi) {
  check_field(phi.u, "warp_trilinear");
  const Tensor& u = phi.u;
  if (img.rank() != 5 || img.dim(0) != 1 || img.dim(2) != u.dim(2) || img.dim(3) != u.dim(3) ||
      img.dim(4) != u.dim(4)) {
    throw ShapeError("warp_trilinear: image " + shape_str(img.shape()) + " does not match field " +
                     shape_str(u.shape()));
  }
  const Index C = img.dim(1), D = u.dim(2), H = u.dim(3), W = u.dim(4);
  const Index n = D * H * W;
  const auto src = img.data();
  const auto disp = u.data();
  std::vector<double> out(static_cast<std::size_t>(C * n));
  Stencil s;
  for (Index z = 0, p = 0; z < D; ++z)
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x, ++p) {
        make_stencil(x + disp[p], y + disp[n + p], z + disp[2 * n + p], W, H, D, s);
        for (Index c = 0; c < C; ++c) {
          const double* plane = src.data() + c * n;
          double v = 0.0;
          for (int k = 0; k < 8; ++k) v += s.w[k] * plane[s.idx[k]];
          out[c * n + p] = v;
        }
      }
  const bool grad = detail::needs_grad({&img, &u});
  return detail::finish(
      "warp_trilinear", img.shape(), std::move(out), grad,
      [in = img.node(), un = u.node(), C, D, H, W](const Node& o) {
        const Index n = D * H * W;
        const auto& disp = un->data;
        double* gi = in->requires_grad ? in->grad_buffer().data() : nullptr;
        double* gu = un->requires_grad ? un->grad_buffer().data() : nullptr;
        Stencil s;
        for (Index z = 0, p = 0; z < D; ++z)
          for (Index y = 0; y < H; ++y)
            for (Index x = 0; x < W; ++x, ++p) {
              make_stencil(x + disp[p], y + disp[n + p], z + disp[2 * n + p], W, H, D, s);
              double sx = 0.0, sy = 0.0, sz = 0.0;
              for (Index c = 0; c < C; ++c) {
                const double g = o.grad[c * n + p];
                if (g == 0.0) continue;
                if (gi) {
                  double* plane = gi + c * n;
                  for (int k = 0; k < 8; ++k) plane[s.idx[k]] += s.w[k] * g;
                }
                if (gu) {
                  const double* plane = in->data.data() + c * n;
                  for (int k = 0; k < 8; ++k) {
                    const double v = plane[s.idx[k]] * g;
                    sx += s.dx[k] * v;
                    sy += s.dy[k] * v;
                    sz += s.dz[k] * v;
                  }
                }
              }
              if (gu) {
                gu[p] += sx;
                gu[n + p] += sy;
                gu[2 * n + p] += sz;
              }
            }
      });
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
  check_field(outer.u, "compose");
  check_field(inner.u, "compose");
  if (outer.u.shape() != inner.u.shape()) {
    throw ShapeError("compose: grids differ " + shape_str(outer.u.shape()) + " vs " + shape_str(inner.u.shape()));
  }
  return {add(inner.u, warp_trilinear(outer.u, inner))};
}

DeformationField integrate_svf(const VelocityField& v, int squaring_steps) {
  check_field(v.v, "integrate_svf");
  if (squaring_steps < 1) throw std::invalid_argument("integrate_svf: squaring_steps must be >= 1");
  DeformationField phi{scale(v.v, 1.0 / std::ldexp(1.0, squaring_steps))};
  for (int i = 0; i < squaring_steps; ++i) phi = compose(phi, phi);
  return phi;
}

LabelMap warp_labels(const LabelMap& labels, const DeformationField& phi, int n_classes) {
  NoGradGuard guard;
  const Tensor warped = warp_trilinear(one_hot(labels, n_classes), phi);
  return argmax_labels(warped, labels.dims, labels.spacing);
}

std::vector<double> jacobian_determinants(const DeformationField& phi) {
  check_field(phi.u, "jacobian_stats");
  const Index D = phi.u.dim(2), H = phi.u.dim(3), W = phi.u.dim(4);
  if (D < 3 || H < 3 || W < 3) {
    throw ShapeError("jacobian_stats: grid must be >= 3 per axis, got " + shape_str(phi.u.shape()));
  }
  const Index n = D * H * W;
  const auto u = phi.u.data();
  auto at = [&](Index c, Index z, Index y, Index x) { return u[c * n + (z * H + y) * W + x]; };
  std::vector<double> dets;
  dets.reserve(static_cast<std::size_t>((D - 2) * (H - 2) * (W - 2)));
  for (Index z = 1; z + 1 < D; ++z)
    for (Index y = 1; y + 1 < H; ++y)
      for (Index x = 1; x + 1 < W; ++x) {
        // j[r][c] = d(phi_r)/d(coord_c), coords ordered (x, y, z).
        double j[3][3];
        for (Index r = 0; r < 3; ++r) {
          j[r][0] = 0.5 * (at(r, z, y, x + 1) - at(r, z, y, x - 1));
          j[r][1] = 0.5 * (at(r, z, y + 1, x) - at(r, z, y - 1, x));
          j[r][2] = 0.5 * (at(r, z + 1, y, x) - at(r, z - 1, y, x));
          j[r][r] += 1.0;
        }
        dets.push_back(j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) -
                       j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0]) +
                       j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]));
      }
  return dets;
}

JacobianStats jacobian_stats(const DeformationField& phi) {
  const std::vector<double> dets = jacobian_determinants(phi);
  JacobianStats s;
  double sum = 0.0;
  Index folded = 0;
  s.min_det = dets.front();
  for (double d : dets) {
    sum += d;
    if (d <= 0.0) ++folded;
    s.min_det = std::min(s.min_det, d);
  }
  const double count = static_cast<double>(dets.size());
  s.mean_det = sum / count;
  double ss = 0.0;
  for (double d : dets) ss += (d - s.mean_det) * (d - s.mean_det);
  s.j_sd = std::sqrt(ss / count);
  s.folding_percent = 100.0 * static_cast<double>(folded) / count;
  return s;
}

Tensor gaussian_smooth(const Tensor& x, double sigma) {
  if (x.rank() != 5) throw ShapeError("gaussian_smooth: expected rank 5, got " + shape_str(x.shape()));
  if (!(sigma > 0.0)) return x.detach();
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double norm = 0.0;
  for (int i = -r; i <= r; ++i) norm += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& e : k) e /= norm;

  const Index C = x.dim(0) * x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  std::vector<double> a(x.data().begin(), x.data().end()), b(a.size());
  const Index dims[3] = {W, H, D};
  const Index strides[3] = {1, W, W * H};
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = dims[axis], st = strides[axis];
    for (Index c = 0; c < C; ++c)
      for (Index z = 0; z < D; ++z)
        for (Index y = 0; y < H; ++y)
          for (Index xx = 0; xx < W; ++xx) {
            const Index coord[3] = {xx, y, z};
            const Index p = c * D * H * W + (z * H + y) * W + xx;
            const Index base = p - coord[axis] * st;
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
              const Index q = std::clamp<Index>(coord[axis] + i, 0, n - 1);
              acc += k[static_cast<std::size_t>(i + r)] * a[static_cast<std::size_t>(base + q * st)];
            }
            b[static_cast<std::size_t>(p)] = acc;
          }
    std::swap(a, b);
  }
  return Tensor(x.shape(), std::move(a));
}

VelocityField random_smooth_velocity(const GridDims& dims, double sigma, double max_magnitude,
                                     std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, 1.0);
  const Index n = dims.count();
  // Noise is drawn on a grid padded by the kernel radius and cropped after
  // smoothing, so the field statistics do not change near the border.
  const auto pad = static_cast<Index>(std::ceil(3.0 * sigma));
  const GridDims pd{dims.x + 2 * pad, dims.y + 2 * pad, dims.z + 2 * pad};
  std::vector<double> v(static_cast<std::size_t>(3 * pd.count()));
  for (double& e : v) e = noise(rng);
  const Tensor padded = gaussian_smooth(Tensor({1, 3, pd.z, pd.y, pd.x}, std::move(v)), sigma);
  const auto src = padded.data();
  std::vector<double> cropped(static_cast<std::size_t>(3 * n));
  for (Index c = 0; c < 3; ++c)
    for (Index z = 0; z < dims.z; ++z)
      for (Index y = 0; y < dims.y; ++y)
        for (Index x = 0; x < dims.x; ++x)
          cropped[static_cast<std::size_t>(c * n + dims.index(x, y, z))] =
              src[static_cast<std::size_t>(c * pd.count() + pd.index(x + pad, y + pad, z + pad))];
  Tensor smooth({1, 3, dims.z, dims.y, dims.x}, std::move(cropped));
  auto d = smooth.mutable_data();
  double peak = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double m = std::sqrt(d[i] * d[i] + d[n + i] * d[n + i] + d[2 * n + i] * d[2 * n + i]);
    peak = std::max(peak, m);
  }
  const double s = peak > 0.0 ? max_magnitude / peak : 0.0;
  for (double& e : d) e *= s;
  return {smooth};
}

}  // namespace prorseg
