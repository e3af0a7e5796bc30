#include <algorithm>
#include <array>

#include "op_support.hpp"
#include "prorseg/ops.hpp"

namespace prorseg {

using detail::Dims5;
using detail::Node;

namespace {

// Geometry of a zero-padded volume flattened so that every kernel tap is a
// constant offset. Output voxel (d,h,w) lives at flat index d*PH*PW + h*PW + w;
// positions with h >= H or w >= W are scratch.
struct PaddedGeometry {
  Index d, h, w, pad;
  Index pd() const { return d + 2 * pad; }
  Index ph() const { return h + 2 * pad; }
  Index pw() const { return w + 2 * pad; }
  Index plane() const { return pd() * ph() * pw(); }
  Index span() const { return (d - 1) * ph() * pw() + (h - 1) * pw() + w; }
  Index flat(Index z, Index y, Index x) const { return (z * ph() + y) * pw() + x; }
};

void pad_into(const double* src, Index channels, const PaddedGeometry& g, std::vector<double>& dst) {
  dst.assign(static_cast<std::size_t>(channels * g.plane()), 0.0);
  for (Index c = 0; c < channels; ++c) {
    const double* s = src + c * g.d * g.h * g.w;
    double* t = dst.data() + c * g.plane();
    for (Index z = 0; z < g.d; ++z)
      for (Index y = 0; y < g.h; ++y)
        std::copy_n(s + (z * g.h + y) * g.w, g.w, t + g.flat(z + g.pad, y + g.pad, g.pad));
  }
}

// out[oc][q] = sum_ic sum_tap wt[oc][ic][tap] * in[ic][q + off(tap)], q in [0, span).
// Output channels are processed in blocks of four over chunks of q so the
// accumulators stay in L1.
void correlate_flat(const double* in, const double* wt, double* out, Index ic_count,
                    Index oc_count, const PaddedGeometry& g, Index k) {
  constexpr Index kBlock = 4;
  constexpr Index kChunk = 256;
  const Index span = g.span();
  const Index taps = k * k * k;
  std::vector<Index> offsets(static_cast<std::size_t>(taps));
  for (Index kd = 0, t = 0; kd < k; ++kd)
    for (Index kh = 0; kh < k; ++kh)
      for (Index kw = 0; kw < k; ++kw, ++t) offsets[t] = g.flat(kd, kh, kw);

  alignas(64) double acc[kBlock][kChunk];
  for (Index oc0 = 0; oc0 < oc_count; oc0 += kBlock) {
    const Index nb = std::min(kBlock, oc_count - oc0);
    for (Index q0 = 0; q0 < span; q0 += kChunk) {
      const Index n = std::min(kChunk, span - q0);
      for (Index j = 0; j < kBlock; ++j) std::fill_n(acc[j], n, 0.0);
      for (Index ic = 0; ic < ic_count; ++ic) {
        const double* src = in + ic * g.plane() + q0;
        for (Index t = 0; t < taps; ++t) {
          const double* s = src + offsets[t];
          if (nb == kBlock) {
            const double w0 = wt[((oc0 + 0) * ic_count + ic) * taps + t];
            const double w1 = wt[((oc0 + 1) * ic_count + ic) * taps + t];
            const double w2 = wt[((oc0 + 2) * ic_count + ic) * taps + t];
            const double w3 = wt[((oc0 + 3) * ic_count + ic) * taps + t];
            for (Index i = 0; i < n; ++i) {
              const double v = s[i];
              acc[0][i] += w0 * v;
              acc[1][i] += w1 * v;
              acc[2][i] += w2 * v;
              acc[3][i] += w3 * v;
            }
          } else {
            for (Index j = 0; j < nb; ++j) {
              const double wj = wt[((oc0 + j) * ic_count + ic) * taps + t];
              for (Index i = 0; i < n; ++i) acc[j][i] += wj * s[i];
            }
          }
        }
      }
      for (Index j = 0; j < nb; ++j) std::copy_n(acc[j], n, out + (oc0 + j) * span + q0);
    }
  }
}

// Fixed-order dot product: eight interleaved partial sums, combined pairwise.
double dot8(const double* a, const double* b, Index n) {
  std::array<double, 8> p{};
  Index i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) p[j] += a[i + j] * b[i + j];
  double tail = 0.0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((p[0] + p[1]) + (p[2] + p[3])) + ((p[4] + p[5]) + (p[6] + p[7])) + tail;
}

// gw[oc][ic][tap] += sum_q g[oc][q] * in[ic][q + off(tap)] over q in [0, span).
// Register block: four output channels times one kernel row (K consecutive
// offsets), eight lanes each. Partial sums are reduced in a fixed order.
template <Index K>
void weight_grad_rows(const double* g, const double* in, double* gw, Index ic_count, Index oc_count,
                      const PaddedGeometry& geo) {
  constexpr Index kB = 4, kL = 8;
  constexpr Index taps = K * K * K;
  const Index span = geo.span();
  const Index body = span - span % kL;
  for (Index oc0 = 0; oc0 < oc_count; oc0 += kB) {
    const Index nb = std::min(kB, oc_count - oc0);
    const double* gr[kB];
    for (Index j = 0; j < kB; ++j) gr[j] = g + (oc0 + std::min(j, nb - 1)) * span;
    for (Index ic = 0; ic < ic_count; ++ic)
      for (Index kd = 0; kd < K; ++kd)
        for (Index kh = 0; kh < K; ++kh) {
          const double* s = in + ic * geo.plane() + geo.flat(kd, kh, 0);
          alignas(64) double acc[kB][K][kL] = {};
          for (Index q = 0; q < body; q += kL)
            for (Index j = 0; j < kB; ++j)
              for (Index r = 0; r < K; ++r)
                for (Index l = 0; l < kL; ++l) acc[j][r][l] += gr[j][q + l] * s[q + r + l];
          for (Index j = 0; j < nb; ++j)
            for (Index r = 0; r < K; ++r) {
              double tail = 0.0;
              for (Index q = body; q < span; ++q) tail += gr[j][q] * s[q + r];
              const double* a = acc[j][r];
              const double total = ((a[0] + a[1]) + (a[2] + a[3])) + ((a[4] + a[5]) + (a[6] + a[7])) + tail;
              gw[((oc0 + j) * ic_count + ic) * taps + (kd * K + kh) * K + r] += total;
            }
        }
  }
}

void weight_grad_flat(const double* g, const double* in, double* gw, Index ic_count, Index oc_count,
                      const PaddedGeometry& geo, Index k) {
  if (k == 1) return weight_grad_rows<1>(g, in, gw, ic_count, oc_count, geo);
  if (k == 3) return weight_grad_rows<3>(g, in, gw, ic_count, oc_count, geo);
  const Index taps = k * k * k;
  const Index span = geo.span();
  for (Index oc = 0; oc < oc_count; ++oc)
    for (Index ic = 0; ic < ic_count; ++ic)
      for (Index kd = 0, t = 0; kd < k; ++kd)
        for (Index kh = 0; kh < k; ++kh)
          for (Index kw = 0; kw < k; ++kw, ++t)
            gw[(oc * ic_count + ic) * taps + t] +=
                dot8(g + oc * span, in + ic * geo.plane() + geo.flat(kd, kh, kw), span);
}

Tensor conv3d_same(const Tensor& input, const Tensor& weight, const Tensor& bias, Index k) {
  const Dims5 in = detail::dims5(input, "conv3d");
  const Index oc_count = weight.dim(0);
  const Index pad = (k - 1) / 2;
  const PaddedGeometry geo{in.d, in.h, in.w, pad};
  const Index spatial = in.spatial();
  const Index span = geo.span();

  std::vector<double> out(static_cast<std::size_t>(in.n * oc_count * spatial));
  std::vector<double> padded, flat(static_cast<std::size_t>(oc_count * span));
  const auto x = input.data();
  const auto w = weight.data();
  for (Index b = 0; b < in.n; ++b) {
    pad_into(x.data() + b * in.c * spatial, in.c, geo, padded);
    correlate_flat(padded.data(), w.data(), flat.data(), in.c, oc_count, geo, k);
    for (Index oc = 0; oc < oc_count; ++oc) {
      const double bv = bias.defined() ? bias.data()[oc] : 0.0;
      double* dst = out.data() + (b * oc_count + oc) * spatial;
      const double* src = flat.data() + oc * span;
      for (Index z = 0; z < in.d; ++z)
        for (Index y = 0; y < in.h; ++y) {
          const double* s = src + geo.flat(z, y, 0);
          double* t = dst + (z * in.h + y) * in.w;
          for (Index xx = 0; xx < in.w; ++xx) t[xx] = s[xx] + bv;
        }
    }
  }

  const bool grad = detail::needs_grad({&input, &weight, &bias});
  Shape out_shape{in.n, oc_count, in.d, in.h, in.w};
  return detail::finish(
      "conv3d", std::move(out_shape), std::move(out), grad,
      [xn = input.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr, in,
       oc_count, k, geo](const Node& o) {
        const Index spatial = in.spatial();
        const Index span = geo.span();
        const Index taps = k * k * k;
        std::vector<double> padded, gflat(static_cast<std::size_t>(oc_count * span));

        if (bn && bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          for (Index b = 0; b < in.n; ++b)
            for (Index oc = 0; oc < oc_count; ++oc) {
              double s = 0.0;
              const double* g = o.grad.data() + (b * oc_count + oc) * spatial;
              for (Index i = 0; i < spatial; ++i) s += g[i];
              gb[oc] += s;
            }
        }

        if (xn->requires_grad) {
          // Input gradient: correlate the zero-padded output gradient with the
          // spatially flipped, channel-transposed kernel.
          std::vector<double> wt_flip(wn->data.size());
          for (Index oc = 0; oc < oc_count; ++oc)
            for (Index ic = 0; ic < in.c; ++ic)
              for (Index t = 0; t < taps; ++t)
                wt_flip[(ic * oc_count + oc) * taps + (taps - 1 - t)] =
                    wn->data[(oc * in.c + ic) * taps + t];
          std::vector<double> gin_flat(static_cast<std::size_t>(in.c * span));
          auto& gx = xn->grad_buffer();
          for (Index b = 0; b < in.n; ++b) {
            pad_into(o.grad.data() + b * oc_count * spatial, oc_count, geo, padded);
            correlate_flat(padded.data(), wt_flip.data(), gin_flat.data(), oc_count, in.c, geo, k);
            for (Index ic = 0; ic < in.c; ++ic) {
              double* dst = gx.data() + (b * in.c + ic) * spatial;
              const double* src = gin_flat.data() + ic * span;
              for (Index z = 0; z < in.d; ++z)
                for (Index y = 0; y < in.h; ++y) {
                  const double* s = src + geo.flat(z, y, 0);
                  double* t = dst + (z * in.h + y) * in.w;
                  for (Index xx = 0; xx < in.w; ++xx) t[xx] += s[xx];
                }
            }
          }
        }

        if (wn->requires_grad) {
          auto& gw = wn->grad_buffer();
          for (Index b = 0; b < in.n; ++b) {
            pad_into(xn->data.data() + b * in.c * spatial, in.c, geo, padded);
            // Output gradient in the flat layout, zero on scratch positions.
            std::fill(gflat.begin(), gflat.end(), 0.0);
            for (Index oc = 0; oc < oc_count; ++oc) {
              const double* src = o.grad.data() + (b * oc_count + oc) * spatial;
              double* dst = gflat.data() + oc * span;
              for (Index z = 0; z < in.d; ++z)
                for (Index y = 0; y < in.h; ++y)
                  std::copy_n(src + (z * in.h + y) * in.w, in.w, dst + geo.flat(z, y, 0));
            }
            weight_grad_flat(gflat.data(), padded.data(), gw.data(), in.c, oc_count, geo, k);
          }
        }
      });
}

Tensor conv3d_generic(const Tensor& input, const Tensor& weight, const Tensor& bias, Index k,
                      Index stride, Index pad) {
  const Dims5 in = detail::dims5(input, "conv3d");
  const Index oc_count = weight.dim(0);
  const Index od = (in.d + 2 * pad - k) / stride + 1;
  const Index oh = (in.h + 2 * pad - k) / stride + 1;
  const Index ow = (in.w + 2 * pad - k) / stride + 1;
  if (od <= 0 || oh <= 0 || ow <= 0) {
    throw ShapeError("conv3d: kernel larger than padded input " + shape_str(input.shape()));
  }
  const Dims5 out_dims{in.n, oc_count, od, oh, ow};
  const auto x = input.data();
  const auto w = weight.data();

  // Visits every (output, input, weight) index triple in a fixed order.
  auto for_each_tap = [in, out_dims, k, stride, pad](auto&& fn) {
    for (Index b = 0; b < in.n; ++b)
      for (Index oc = 0; oc < out_dims.c; ++oc)
        for (Index z = 0; z < out_dims.d; ++z)
          for (Index y = 0; y < out_dims.h; ++y)
            for (Index xo = 0; xo < out_dims.w; ++xo) {
              const Index oi = (((b * out_dims.c + oc) * out_dims.d + z) * out_dims.h + y) * out_dims.w + xo;
              for (Index ic = 0; ic < in.c; ++ic)
                for (Index kd = 0; kd < k; ++kd) {
                  const Index iz = z * stride + kd - pad;
                  if (iz < 0 || iz >= in.d) continue;
                  for (Index kh = 0; kh < k; ++kh) {
                    const Index iy = y * stride + kh - pad;
                    if (iy < 0 || iy >= in.h) continue;
                    for (Index kw = 0; kw < k; ++kw) {
                      const Index ix = xo * stride + kw - pad;
                      if (ix < 0 || ix >= in.w) continue;
                      const Index ii = (((b * in.c + ic) * in.d + iz) * in.h + iy) * in.w + ix;
                      const Index wi = (((oc * in.c + ic) * k + kd) * k + kh) * k + kw;
                      fn(oi, ii, wi, oc);
                    }
                  }
                }
            }
  };

  std::vector<double> out(static_cast<std::size_t>(in.n * oc_count * od * oh * ow), 0.0);
  for_each_tap([&](Index oi, Index ii, Index wi, Index) { out[oi] += w[wi] * x[ii]; });
  if (bias.defined()) {
    const Index per = od * oh * ow;
    for (Index b = 0; b < in.n; ++b)
      for (Index oc = 0; oc < oc_count; ++oc)
        for (Index i = 0; i < per; ++i) out[(b * oc_count + oc) * per + i] += bias.data()[oc];
  }
  const bool grad = detail::needs_grad({&input, &weight, &bias});
  return detail::finish(
      "conv3d", {in.n, oc_count, od, oh, ow}, std::move(out), grad,
      [xn = input.node(), wn = weight.node(), bn = bias.defined() ? bias.node() : nullptr,
       for_each_tap](const Node& o) {
        if (xn->requires_grad) {
          auto& gx = xn->grad_buffer();
          for_each_tap([&](Index oi, Index ii, Index wi, Index) { gx[ii] += wn->data[wi] * o.grad[oi]; });
        }
        if (wn->requires_grad) {
          auto& gw = wn->grad_buffer();
          for_each_tap([&](Index oi, Index ii, Index wi, Index) { gw[wi] += xn->data[ii] * o.grad[oi]; });
        }
        if (bn && bn->requires_grad) {
          auto& gb = bn->grad_buffer();
          const Index oc_count = static_cast<Index>(gb.size());
          const Index n = o.shape[0];
          const Index per = static_cast<Index>(o.grad.size()) / (n * oc_count);
          for (Index b = 0; b < n; ++b)
            for (Index oc = 0; oc < oc_count; ++oc)
              for (Index i = 0; i < per; ++i) gb[oc] += o.grad[(b * oc_count + oc) * per + i];
        }
      });
}

}  // namespace

Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index stride, Index pad) {
  const Dims5 in = detail::dims5(input, "conv3d");
  if (weight.rank() != 5 || weight.dim(2) != weight.dim(3) || weight.dim(2) != weight.dim(4)) {
    throw ShapeError("conv3d: weight must be [OC,IC,k,k,k], got " + shape_str(weight.shape()));
  }
  if (weight.dim(1) != in.c) {
    throw ShapeError("conv3d: input " + shape_str(input.shape()) + " has " + std::to_string(in.c) +
                     " channels but weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.dim(1)));
  }
  const Index k = weight.dim(2);
  if (k % 2 == 0) throw ShapeError("conv3d: kernel size must be odd, got " + std::to_string(k));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != weight.dim(0))) {
    throw ShapeError("conv3d: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv3d: stride must be >= 1 and pad >= 0");
  if (stride == 1 && 2 * pad == k - 1) return conv3d_same(input, weight, bias, k);
  return conv3d_generic(input, weight, bias, k, stride, pad);
}

}  // namespace prorseg
