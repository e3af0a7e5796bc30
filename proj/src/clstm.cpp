#include "prorseg/clstm.hpp"

#include <cmath>

#include "prorseg/ops.hpp"

namespace prorseg {

namespace {

constexpr Index kKernel = 3;

Tensor uniform_kernel(Index out, Index in, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  std::vector<double> v(static_cast<std::size_t>(out * in * kKernel * kKernel * kKernel));
  for (double& e : v) e = u(rng);
  return Tensor({out, in, kKernel, kKernel, kKernel}, std::move(v), true);
}

}  // namespace

ClstmCell ClstmCell::create(Index in_channels, Index hidden_channels, std::mt19937_64& rng) {
  ClstmCell cell;
  cell.in_channels = in_channels;
  cell.hidden_channels = hidden_channels;
  const double bound =
      1.0 / std::sqrt(static_cast<double>((in_channels + hidden_channels) * kKernel * kKernel * kKernel));
  for (Tensor* w : {&cell.w_xf, &cell.w_xi, &cell.w_xc, &cell.w_xo})
    *w = uniform_kernel(hidden_channels, in_channels, bound, rng);
  for (Tensor* w : {&cell.w_hf, &cell.w_hi, &cell.w_hc, &cell.w_ho})
    *w = uniform_kernel(hidden_channels, hidden_channels, bound, rng);
  cell.b_f = Tensor::full({hidden_channels}, 1.0, true);
  for (Tensor* b : {&cell.b_i, &cell.b_c, &cell.b_o}) *b = Tensor::zeros({hidden_channels}, true);
  return cell;
}

ClstmCell ClstmCell::zeros(Index in_channels, Index hidden_channels) {
  ClstmCell cell;
  cell.in_channels = in_channels;
  cell.hidden_channels = hidden_channels;
  for (Tensor* w : {&cell.w_xf, &cell.w_xi, &cell.w_xc, &cell.w_xo})
    *w = Tensor::zeros({hidden_channels, in_channels, kKernel, kKernel, kKernel}, true);
  for (Tensor* w : {&cell.w_hf, &cell.w_hi, &cell.w_hc, &cell.w_ho})
    *w = Tensor::zeros({hidden_channels, hidden_channels, kKernel, kKernel, kKernel}, true);
  for (Tensor* b : {&cell.b_f, &cell.b_i, &cell.b_c, &cell.b_o}) *b = Tensor::zeros({hidden_channels}, true);
  return cell;
}

ParameterList ClstmCell::parameters() const {
  return {{"w_xf", w_xf}, {"w_hf", w_hf}, {"w_xi", w_xi}, {"w_hi", w_hi},
          {"w_xc", w_xc}, {"w_hc", w_hc}, {"w_xo", w_xo}, {"w_ho", w_ho},
          {"b_f", b_f},   {"b_i", b_i},   {"b_c", b_c},   {"b_o", b_o}};
}

ClstmState init_state(Index hidden_channels, const Shape& spatial) {
  if (hidden_channels <= 0 || spatial.size() != 3) {
    throw ShapeError("init_state: need positive hidden channels and 3 spatial dims, got " +
                     shape_str(spatial));
  }
  Shape s{1, hidden_channels, spatial[0], spatial[1], spatial[2]};
  return {Tensor::zeros(s), Tensor::zeros(s)};
}

std::pair<Tensor, ClstmState> clstm_step(const ClstmCell& cell, const Tensor& x, const ClstmState& state,
                                         ClstmGates* gates) {
  if (x.rank() != 5 || x.dim(1) != cell.in_channels) {
    throw ShapeError("clstm_step: input " + shape_str(x.shape()) + " does not have " +
                     std::to_string(cell.in_channels) + " channels");
  }
  const Shape& hs = state.h.shape();
  if (hs.size() != 5 || hs[1] != cell.hidden_channels || hs[2] != x.dim(2) || hs[3] != x.dim(3) ||
      hs[4] != x.dim(4) || state.c.shape() != hs) {
    throw ShapeError("clstm_step: state " + shape_str(hs) + " incompatible with input " + shape_str(x.shape()));
  }
  const Index hid = cell.hidden_channels;
  // One convolution over [x, h] with the stacked kernels equals the paired
  // x- and h-convolutions of each gate.
  const Tensor w = concat({concat({cell.w_xf, cell.w_xi, cell.w_xc, cell.w_xo}, 0),
                           concat({cell.w_hf, cell.w_hi, cell.w_hc, cell.w_ho}, 0)},
                          1);
  const Tensor b = concat({cell.b_f, cell.b_i, cell.b_c, cell.b_o}, 0);
  const Tensor pre = conv3d(concat_channels({x, state.h}), w, b, 1, 1);

  const Tensor f = sigmoid(slice(pre, 1, 0, hid));
  const Tensor i = sigmoid(slice(pre, 1, hid, 2 * hid));
  const Tensor g = prorseg::tanh(slice(pre, 1, 2 * hid, 3 * hid));
  const Tensor o = sigmoid(slice(pre, 1, 3 * hid, 4 * hid));
  const Tensor c = add(hadamard(f, state.c), hadamard(i, g));
  const Tensor h = hadamard(o, prorseg::tanh(c));
  if (gates) *gates = {f, i, g, o};
  return {h, ClstmState{h, c}};
}

ClstmState detach(const ClstmState& state) { return {state.h.detach(), state.c.detach()}; }

ClstmState truncate_state(const ClstmState& state, int completed_steps, int window) {
  if (window > 0 && completed_steps > 0 && completed_steps % window == 0) return detach(state);
  return state;
}

}  // namespace prorseg
