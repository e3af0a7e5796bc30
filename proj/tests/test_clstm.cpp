#include <cmath>
#include <random>

#include "doctest.h"
#include "prorseg/clstm.hpp"
#include "prorseg/ops.hpp"
#include "support/gradcheck.hpp"

using namespace prorseg;
using prorseg::testing::gradcheck;
using prorseg::testing::random_tensor;

namespace {

double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Scalar reference for one gate pre-activation at voxel (z, y, x): direct
// correlation of x and h with their kernels, zero padding.
double gate_pre(const Tensor& wx, const Tensor& wh, const Tensor& b, const Tensor& x, const Tensor& h,
                Index oc, Index z, Index y, Index xx) {
  const Index D = x.dim(2), H = x.dim(3), W = x.dim(4);
  double acc = b.data()[oc];
  auto corr = [&](const Tensor& w, const Tensor& in) {
    const Index cin = in.dim(1);
    for (Index ic = 0; ic < cin; ++ic)
      for (Index a = 0; a < 3; ++a)
        for (Index bb = 0; bb < 3; ++bb)
          for (Index c = 0; c < 3; ++c) {
            const Index zz = z + a - 1, yy = y + bb - 1, x2 = xx + c - 1;
            if (zz < 0 || yy < 0 || x2 < 0 || zz >= D || yy >= H || x2 >= W) continue;
            acc += w.data()[(((oc * cin + ic) * 3 + a) * 3 + bb) * 3 + c] *
                   in.data()[((ic * D + zz) * H + yy) * W + x2];
          }
  };
  corr(wx, x);
  corr(wh, h);
  return acc;
}

ClstmState random_state(Index hid, Shape spatial, std::mt19937_64& rng) {
  Shape s{1, hid, spatial[0], spatial[1], spatial[2]};
  return {random_tensor(s, rng, -0.9, 0.9, false), random_tensor(s, rng, -2, 2, false)};
}

}  // namespace

TEST_CASE("init_state gives zero tensors of the requested shape") {
  ClstmState s = init_state(4, {8, 8, 8});
  CHECK(s.h.shape() == Shape{1, 4, 8, 8, 8});
  CHECK(s.c.shape() == Shape{1, 4, 8, 8, 8});
  for (double v : s.h.data()) CHECK(v == 0.0);
  for (double v : s.c.data()) CHECK(v == 0.0);
  ClstmState odd = init_state(2, {3, 5, 7});
  CHECK(odd.h.shape() == Shape{1, 2, 3, 5, 7});
  CHECK_THROWS_AS(init_state(0, {2, 2, 2}), ShapeError);
}

TEST_CASE("zero cell keeps a zero state at zero") {
  std::mt19937_64 rng(1);
  ClstmCell cell = ClstmCell::zeros(2, 3);
  Tensor x = random_tensor({1, 2, 4, 4, 4}, rng, -5, 5, false);
  ClstmGates g;
  auto [h, st] = clstm_step(cell, x, init_state(3, {4, 4, 4}), &g);
  for (double v : g.forget.data()) CHECK(v == 0.5);
  for (double v : g.input.data()) CHECK(v == 0.5);
  for (double v : g.output.data()) CHECK(v == 0.5);
  for (double v : g.candidate.data()) CHECK(v == 0.0);
  for (double v : st.c.data()) CHECK(v == 0.0);
  for (double v : h.data()) CHECK(v == 0.0);
  CHECK(h.node() == st.h.node());
}

TEST_CASE("saturated forget gate carries memory forward") {
  std::mt19937_64 rng(2);
  ClstmCell cell = ClstmCell::zeros(1, 2);
  cell.b_f.mutable_data()[0] = cell.b_f.mutable_data()[1] = 30.0;
  cell.b_i.mutable_data()[0] = 0.7;
  cell.b_i.mutable_data()[1] = -1.2;
  cell.b_c.mutable_data()[0] = 0.3;
  cell.b_c.mutable_data()[1] = -0.4;
  Tensor x = random_tensor({1, 1, 3, 3, 3}, rng, -1, 1, false);
  ClstmState prev = random_state(2, {3, 3, 3}, rng);
  auto [h, st] = clstm_step(cell, x, prev);
  const Index n = 27;
  for (Index c = 0; c < 2; ++c)
    for (Index i = 0; i < n; ++i) {
      const double expect = prev.c.data()[c * n + i] + sig(cell.b_i.data()[c]) * std::tanh(cell.b_c.data()[c]);
      CHECK(std::abs(st.c.data()[c * n + i] - expect) < 1e-12);
    }
}

TEST_CASE("clstm_step matches a scalar reference") {
  std::mt19937_64 rng(3);
  ClstmCell cell = ClstmCell::create(2, 3, rng);
  for (Tensor* b : {&cell.b_i, &cell.b_c, &cell.b_o})
    for (double& v : b->mutable_data()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  Tensor x = random_tensor({1, 2, 3, 4, 5}, rng, -1, 1, false);
  ClstmState prev = random_state(3, {3, 4, 5}, rng);
  auto [h, st] = clstm_step(cell, x, prev);
  const Index D = 3, H = 4, W = 5, n = D * H * W;
  double worst = 0.0;
  for (Index oc = 0; oc < 3; ++oc)
    for (Index z = 0; z < D; ++z)
      for (Index y = 0; y < H; ++y)
        for (Index xx = 0; xx < W; ++xx) {
          const double f = sig(gate_pre(cell.w_xf, cell.w_hf, cell.b_f, x, prev.h, oc, z, y, xx));
          const double i = sig(gate_pre(cell.w_xi, cell.w_hi, cell.b_i, x, prev.h, oc, z, y, xx));
          const double g = std::tanh(gate_pre(cell.w_xc, cell.w_hc, cell.b_c, x, prev.h, oc, z, y, xx));
          const double o = sig(gate_pre(cell.w_xo, cell.w_ho, cell.b_o, x, prev.h, oc, z, y, xx));
          const Index p = oc * n + (z * H + y) * W + xx;
          const double c = f * prev.c.data()[p] + i * g;
          worst = std::max(worst, std::abs(c - st.c.data()[p]));
          worst = std::max(worst, std::abs(o * std::tanh(c) - h.data()[p]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("channel and spatial mismatches are rejected") {
  std::mt19937_64 rng(4);
  ClstmCell cell = ClstmCell::create(2, 3, rng);
  CHECK_THROWS_AS(clstm_step(cell, Tensor::zeros({1, 3, 4, 4, 4}), init_state(3, {4, 4, 4})), ShapeError);
  CHECK_THROWS_AS(clstm_step(cell, Tensor::zeros({1, 2, 4, 4, 4}), init_state(3, {4, 4, 5})), ShapeError);
  CHECK_THROWS_AS(clstm_step(cell, Tensor::zeros({1, 2, 4, 4, 4}), init_state(2, {4, 4, 4})), ShapeError);
}

TEST_CASE("two chained steps: parameter gradients match finite differences") {
  std::mt19937_64 rng(5);
  ClstmCell cell = ClstmCell::create(2, 2, rng);
  Tensor x1 = random_tensor({1, 2, 3, 3, 3}, rng, -1, 1, false);
  Tensor x2 = random_tensor({1, 2, 3, 3, 3}, rng, -1, 1, false);
  auto loss = [&] {
    ClstmState s = init_state(2, {3, 3, 3});
    s = clstm_step(cell, x1, s).second;
    Tensor h = clstm_step(cell, x2, s).first;
    return sum(square(h));
  };
  std::vector<Tensor> leaves;
  for (auto& p : cell.parameters()) leaves.push_back(p.tensor);
  auto r = gradcheck(loss, leaves, 1e-5, 1e-3);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("three-step unrolled gradient w.r.t. inputs matches finite differences") {
  std::mt19937_64 rng(6);
  ClstmCell cell = ClstmCell::create(1, 2, rng);
  std::vector<Tensor> xs;
  for (int t = 0; t < 3; ++t) xs.push_back(random_tensor({1, 1, 3, 3, 3}, rng, -1, 1, true));
  Tensor target = random_tensor({1, 2, 3, 3, 3}, rng, -0.5, 0.5, false);
  auto loss = [&] {
    ClstmState s = init_state(2, {3, 3, 3});
    Tensor h;
    for (auto& x : xs) std::tie(h, s) = clstm_step(cell, x, s);
    return sum(square(sub(h, target)));
  };
  auto r = gradcheck(loss, xs, 1e-5, 1e-3);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("gates and state stay in range for random cells") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 5; ++trial) {
    ClstmCell cell = ClstmCell::create(2, 3, rng);
    ClstmState s = random_state(3, {4, 4, 4}, rng);
    for (int t = 0; t < 4; ++t) {
      Tensor x = random_tensor({1, 2, 4, 4, 4}, rng, -3, 3, false);
      ClstmGates g;
      ClstmState next = clstm_step(cell, x, s, &g).second;
      for (double v : g.forget.data()) CHECK((v > 0.0 && v < 1.0));
      for (double v : g.input.data()) CHECK((v > 0.0 && v < 1.0));
      for (double v : g.output.data()) CHECK((v > 0.0 && v < 1.0));
      for (double v : g.candidate.data()) CHECK((v > -1.0 && v < 1.0));
      for (double v : next.h.data()) CHECK(std::abs(v) < 1.0);
      for (std::size_t i = 0; i < next.c.data().size(); ++i)
        CHECK(std::abs(next.c.data()[i]) <= std::abs(s.c.data()[i]) + 1.0);
      s = next;
    }
  }
}

TEST_CASE("truncation zeroes gradients of inputs older than the window") {
  std::mt19937_64 rng(8);
  ClstmCell cell = ClstmCell::create(1, 2, rng);
  std::vector<Tensor> xs;
  for (int t = 0; t < 5; ++t) xs.push_back(random_tensor({1, 1, 3, 3, 3}, rng, -1, 1, true));
  ClstmState s = init_state(2, {3, 3, 3});
  Tensor h;
  for (int t = 0; t < 5; ++t) {
    std::tie(h, s) = clstm_step(cell, xs[t], s);
    s = truncate_state(s, t + 1, 2);
  }
  backward(sum(h));
  // Detached after steps 2 and 4: only the fifth input reaches the output.
  for (int t = 0; t < 4; ++t)
    for (double g : xs[t].grad()) CHECK(g == 0.0);
  double mag = 0.0;
  for (double g : xs[4].grad()) mag += std::abs(g);
  CHECK(mag > 0.0);
  CHECK(truncate_state(s, 3, 0).h.node() == s.h.node());
}
