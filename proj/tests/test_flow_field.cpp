#include <cmath>
#include <random>

#include "doctest.h"
#include "prorseg/flow_field.hpp"
#include "prorseg/ops.hpp"
#include "support/gradcheck.hpp"

using namespace prorseg;
using prorseg::testing::gradcheck;
using prorseg::testing::random_tensor;

namespace {

DeformationField constant_field(const GridDims& d, double ux, double uy, double uz) {
  const Index n = d.count();
  std::vector<double> v(static_cast<std::size_t>(3 * n));
  for (Index i = 0; i < n; ++i) {
    v[i] = ux;
    v[n + i] = uy;
    v[2 * n + i] = uz;
  }
  return {Tensor({1, 3, d.z, d.y, d.x}, std::move(v))};
}

// Max |u - (ux,uy,uz)| over voxels at least `margin` from every face.
double interior_dev(const DeformationField& f, Index margin, double ux, double uy, double uz) {
  const GridDims d = f.dims();
  const Index n = d.count();
  const auto u = f.u.data();
  double worst = 0.0;
  for (Index z = margin; z < d.z - margin; ++z)
    for (Index y = margin; y < d.y - margin; ++y)
      for (Index x = margin; x < d.x - margin; ++x) {
        const Index p = d.index(x, y, z);
        worst = std::max({worst, std::abs(u[p] - ux), std::abs(u[n + p] - uy), std::abs(u[2 * n + p] - uz)});
      }
  return worst;
}

double interior_mean_norm(const DeformationField& f, Index margin) {
  const GridDims d = f.dims();
  const Index n = d.count();
  const auto u = f.u.data();
  double s = 0.0;
  Index count = 0;
  for (Index z = margin; z < d.z - margin; ++z)
    for (Index y = margin; y < d.y - margin; ++y)
      for (Index x = margin; x < d.x - margin; ++x, ++count) {
        const Index p = d.index(x, y, z);
        s += std::sqrt(u[p] * u[p] + u[n + p] * u[n + p] + u[2 * n + p] * u[2 * n + p]);
      }
  return s / static_cast<double>(count);
}

std::array<double, 3> centroid(const LabelMap& m, std::uint8_t label) {
  std::array<double, 3> c{0, 0, 0};
  double n = 0;
  for (Index z = 0; z < m.dims.z; ++z)
    for (Index y = 0; y < m.dims.y; ++y)
      for (Index x = 0; x < m.dims.x; ++x)
        if (m.labels[static_cast<std::size_t>(m.dims.index(x, y, z))] == label) {
          c[0] += x;
          c[1] += y;
          c[2] += z;
          n += 1;
        }
  for (double& e : c) e /= n;
  return c;
}

}  // namespace

TEST_CASE("zero velocity integrates to the identity") {
  const GridDims d{6, 5, 4};
  DeformationField phi = integrate_svf({Tensor::zeros({1, 3, 4, 5, 6})});
  for (double v : phi.u.data()) CHECK(v == 0.0);
  CHECK(phi.dims() == d);
  CHECK_THROWS_AS(integrate_svf({Tensor::zeros({1, 3, 4, 5, 6})}, 0), std::invalid_argument);
}

TEST_CASE("constant velocity integrates to a translation") {
  const GridDims d{16, 12, 12};
  DeformationField phi = integrate_svf({constant_field(d, 2, 0, 0).u});
  CHECK(interior_dev(phi, 3, 2, 0, 0) < 1e-9);
}

TEST_CASE("scaling and squaring converges in the step count") {
  std::mt19937_64 rng(11);
  const GridDims d{16, 16, 16};
  VelocityField v = random_smooth_velocity(d, 2.0, 2.0, rng);
  const DeformationField ref = integrate_svf(v, 12);
  const Index n = d.count();
  auto gap = [&](int steps) {
    const DeformationField a = integrate_svf(v, steps);
    double worst = 0.0;
    for (Index z = 1; z < d.z - 1; ++z)
      for (Index y = 1; y < d.y - 1; ++y)
        for (Index x = 1; x < d.x - 1; ++x)
          for (Index c = 0; c < 3; ++c) {
            const Index p = c * n + d.index(x, y, z);
            worst = std::max(worst, std::abs(a.u.data()[p] - ref.u.data()[p]));
          }
    return worst;
  };
  const double g3 = gap(3), g5 = gap(5), g7 = gap(7);
  CHECK(g5 < g3);
  CHECK(g7 < g5);
  CHECK(g7 < 5e-3);
}

TEST_CASE("compose with the identity is a no-op") {
  std::mt19937_64 rng(12);
  const GridDims d{8, 7, 6};
  DeformationField phi{random_tensor({1, 3, 6, 7, 8}, rng, -1.5, 1.5, false)};
  DeformationField id = DeformationField::identity(d);
  DeformationField a = compose(id, phi), b = compose(phi, id);
  for (std::size_t i = 0; i < phi.u.data().size(); ++i) {
    CHECK(a.u.data()[i] == phi.u.data()[i]);
    CHECK(b.u.data()[i] == phi.u.data()[i]);
  }
}

TEST_CASE("translations compose additively") {
  const GridDims d{10, 10, 10};
  DeformationField c = compose(constant_field(d, 1, 0, 0), constant_field(d, 0, 2, 0));
  CHECK(interior_dev(c, 3, 1, 2, 0) < 1e-12);
  // associativity for translations
  DeformationField t3 = constant_field(d, 0, 0, -1);
  DeformationField left = compose(compose(constant_field(d, 1, 0, 0), constant_field(d, 0, 2, 0)), t3);
  DeformationField right = compose(constant_field(d, 1, 0, 0), compose(constant_field(d, 0, 2, 0), t3));
  double worst = 0.0;
  for (std::size_t i = 0; i < left.u.data().size(); ++i)
    worst = std::max(worst, std::abs(left.u.data()[i] - right.u.data()[i]));
  CHECK(worst < 1e-6);
}

TEST_CASE("integrate(v) composed with integrate(-v) is near the identity") {
  std::mt19937_64 rng(13);
  const GridDims d{24, 24, 24};
  for (int trial = 0; trial < 3; ++trial) {
    VelocityField v = random_smooth_velocity(d, 2.0, 3.0, rng);
    DeformationField fwd = integrate_svf(v), inv = integrate_svf({scale(v.v, -1.0)});
    CHECK(interior_mean_norm(compose(fwd, inv), 3) < 0.1);
  }
}

TEST_CASE("warp with the identity returns the image exactly") {
  std::mt19937_64 rng(14);
  Tensor img = random_tensor({1, 2, 5, 6, 7}, rng, -3, 3, false);
  Tensor out = warp_trilinear(img, DeformationField::identity({7, 6, 5}));
  for (std::size_t i = 0; i < img.data().size(); ++i) CHECK(out.data()[i] == img.data()[i]);
}

TEST_CASE("integer translation shifts a ramp") {
  const GridDims d{8, 4, 4};
  std::vector<double> ramp(static_cast<std::size_t>(d.count()));
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) ramp[static_cast<std::size_t>(d.index(x, y, z))] = 10.0 * x + y;
  Tensor out = warp_trilinear(Tensor({1, 1, 4, 4, 8}, ramp), constant_field(d, 1, 0, 0));
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y) {
      for (Index x = 0; x + 1 < d.x; ++x) CHECK(out.data()[d.index(x, y, z)] == 10.0 * (x + 1) + y);
      CHECK(out.data()[d.index(d.x - 1, y, z)] == 10.0 * (d.x - 1) + y);  // clamped
    }
}

TEST_CASE("warp is linear in the image") {
  std::mt19937_64 rng(15);
  Tensor a = random_tensor({1, 1, 5, 5, 5}, rng, -1, 1, false);
  Tensor b = random_tensor({1, 1, 5, 5, 5}, rng, -1, 1, false);
  DeformationField phi{random_tensor({1, 3, 5, 5, 5}, rng, -2, 2, false)};
  Tensor lhs = warp_trilinear(add(scale(a, 2.0), scale(b, -3.0)), phi);
  Tensor rhs = add(scale(warp_trilinear(a, phi), 2.0), scale(warp_trilinear(b, phi), -3.0));
  for (std::size_t i = 0; i < lhs.data().size(); ++i) CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-12);
}

TEST_CASE("warp gradients match finite differences") {
  std::mt19937_64 rng(16);
  Tensor img = random_tensor({1, 2, 4, 5, 6}, rng, -1, 1, true);
  // Displacements kept away from integer sample positions and the border,
  // where the trilinear map is not differentiable.
  Tensor u = random_tensor({1, 3, 4, 5, 6}, rng, 0.2, 0.8, true);
  {
    auto d = u.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= (i % 2 == 0) ? 1.0 : -1.0;
  }
  Tensor w = random_tensor({1, 2, 4, 5, 6}, rng, -1, 1, false);
  auto loss = [&] { return sum(hadamard(warp_trilinear(img, {u}), w)); };
  auto r = gradcheck(loss, {img, u}, 1e-6, 1e-3);
  CHECK(r.max_rel_error < 1e-5);
}

TEST_CASE("integrate_svf gradient matches finite differences") {
  std::mt19937_64 rng(17);
  Tensor v = gaussian_smooth(random_tensor({1, 3, 6, 6, 6}, rng, -3, 3, false), 1.0);
  Tensor vg(v.shape(), std::vector<double>(v.data().begin(), v.data().end()), true);
  Tensor img = random_tensor({1, 1, 6, 6, 6}, rng, -1, 1, false);
  auto loss = [&] { return sum(square(warp_trilinear(img, integrate_svf({vg}, 4)))); };
  auto r = gradcheck(loss, {vg}, 1e-6, 1e-3, 120);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("warp rejects mismatched grids") {
  CHECK_THROWS_AS(warp_trilinear(Tensor::zeros({1, 1, 4, 4, 4}), DeformationField::identity({4, 4, 5})),
                  ShapeError);
  CHECK_THROWS_AS(warp_trilinear(Tensor::zeros({1, 1, 4, 4, 4}), {Tensor::zeros({1, 2, 4, 4, 4})}), ShapeError);
}

TEST_CASE("warp_labels: identity, translation, checkerboard, bad labels") {
  const GridDims d{12, 12, 12};
  LabelMap cube{d, {}, std::vector<std::uint8_t>(static_cast<std::size_t>(d.count()), 0)};
  for (Index z = 4; z < 8; ++z)
    for (Index y = 4; y < 8; ++y)
      for (Index x = 3; x < 7; ++x) cube.labels[static_cast<std::size_t>(d.index(x, y, z))] = 2;
  CHECK(warp_labels(cube, DeformationField::identity(d), 3).labels == cube.labels);

  // Sampling at p + 2 moves content towards -x.
  LabelMap moved = warp_labels(cube, constant_field(d, -2, 0, 0), 3);
  auto c0 = centroid(cube, 2), c1 = centroid(moved, 2);
  CHECK(std::abs(c1[0] - c0[0] - 2.0) <= 0.5);
  CHECK(std::abs(c1[1] - c0[1]) <= 0.5);

  LabelMap checker{{4, 4, 4}, {}, std::vector<std::uint8_t>(64)};
  for (Index i = 0; i < 64; ++i) checker.labels[static_cast<std::size_t>(i)] = ((i % 4) + (i / 4 % 4) + i / 16) % 2;
  CHECK(warp_labels(checker, DeformationField::identity({4, 4, 4}), 2).labels == checker.labels);
  CHECK_THROWS_AS(warp_labels(checker, DeformationField::identity({4, 4, 4}), 1), ShapeError);
}

TEST_CASE("jacobian stats of identity and uniform scaling") {
  const GridDims d{6, 5, 7};
  JacobianStats id = jacobian_stats(DeformationField::identity(d));
  CHECK(id.j_sd == 0.0);
  CHECK(id.folding_percent == 0.0);
  CHECK(id.mean_det == 1.0);

  const Index n = d.count();
  std::vector<double> u(static_cast<std::size_t>(3 * n));
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        const Index p = d.index(x, y, z);
        u[p] = 0.1 * x;
        u[n + p] = 0.1 * y;
        u[2 * n + p] = 0.1 * z;
      }
  DeformationField scaled{Tensor({1, 3, d.z, d.y, d.x}, u)};
  for (double det : jacobian_determinants(scaled)) CHECK(std::abs(det - 1.331) < 1e-9);
  CHECK(jacobian_stats(scaled).j_sd < 1e-9);

  // A reflection along x folds every interior voxel.
  for (Index i = 0; i < n; ++i) u[i] = -2.2 * (i % d.x);
  CHECK(jacobian_stats({Tensor({1, 3, d.z, d.y, d.x}, u)}).folding_percent == 100.0);
  CHECK_THROWS_AS(jacobian_stats(DeformationField::identity({2, 5, 5})), ShapeError);
}

TEST_CASE("smooth random velocities integrate without folding") {
  std::mt19937_64 rng(18);
  const GridDims d{20, 20, 20};
  for (int trial = 0; trial < 3; ++trial) {
    VelocityField v = random_smooth_velocity(d, 2.0, 3.0, rng);
    double peak = 0.0;
    const Index n = d.count();
    for (Index i = 0; i < n; ++i) {
      const auto x = v.v.data();
      peak = std::max(peak, std::sqrt(x[i] * x[i] + x[n + i] * x[n + i] + x[2 * n + i] * x[2 * n + i]));
    }
    CHECK(std::abs(peak - 3.0) < 1e-12);
    CHECK(jacobian_stats(integrate_svf(v)).folding_percent == 0.0);
  }
}

TEST_CASE("gaussian smoothing preserves constants and is deterministic") {
  Tensor c = Tensor::full({1, 2, 5, 6, 7}, 3.5);
  Tensor s = gaussian_smooth(c, 1.5);
  for (double v : s.data()) CHECK(std::abs(v - 3.5) < 1e-12);
  std::mt19937_64 a(5), b(5);
  CHECK(random_smooth_velocity({8, 8, 8}, 2, 1, a).v.data()[17] ==
        random_smooth_velocity({8, 8, 8}, 2, 1, b).v.data()[17]);
}
