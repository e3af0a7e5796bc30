#include <cmath>
#include <random>
#include <sstream>

#include "doctest.h"
#include "prorseg/metrics.hpp"
#include "support/oracles.hpp"

using namespace prorseg;
using namespace prorseg::testing;

namespace {

OrganMask to_mask(const RawMask& r) {
  return {GridDims{r.nx, r.ny, r.nz}, Spacing{r.sx, r.sy, r.sz}, r.m};
}

OrganMask mask_from(const GridDims& d, const Spacing& s, const std::vector<Index>& on) {
  OrganMask m{d, s, std::vector<std::uint8_t>(static_cast<std::size_t>(d.count()), 0)};
  for (Index i : on) m.mask[static_cast<std::size_t>(i)] = 1;
  return m;
}

DeformationField field_from(const GridDims& d, const std::vector<double>& v) {
  return {Tensor({1, 3, d.z, d.y, d.x}, v)};
}

}  // namespace

TEST_CASE("dsc basic cases") {
  const GridDims d{4, 4, 1};
  const auto a = mask_from(d, {}, {0, 1, 2, 3});
  const auto b = mask_from(d, {}, {2, 3, 4, 5});
  const auto c = mask_from(d, {}, {8, 9});
  const auto e = mask_from(d, {}, {});
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, c) == 0.0);
  CHECK(dsc(a, b) == 0.5);
  CHECK(dsc(e, e) == 1.0);
  CHECK(dsc(a, e) == 0.0);
  CHECK_THROWS_AS(dsc(a, mask_from(GridDims{4, 4, 2}, {}, {})), ShapeError);
}

TEST_CASE("dsc and hd95 match brute force on random masks") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(2, 8);
  std::uniform_real_distribution<double> sp(0.5, 3.0);
  int checked = 0;
  for (int trial = 0; trial < 30; ++trial) {
    const int nx = dim(rng), ny = dim(rng), nz = dim(rng);
    const double sx = sp(rng), sy = sp(rng), sz = sp(rng);
    const RawMask a = random_mask(rng, nx, ny, nz, sx, sy, sz);
    const RawMask b = random_mask(rng, nx, ny, nz, sx, sy, sz);
    const auto ma = to_mask(a), mb = to_mask(b);
    CHECK(dsc(ma, mb) == doctest::Approx(oracle_dsc(a, b)).epsilon(1e-15));
    CHECK(dsc(ma, mb) == dsc(mb, ma));
    if (ma.count() == 0 || mb.count() == 0) continue;
    CHECK(std::abs(hd95(ma, mb) - oracle_hd95(a, b)) < 1e-9);
    CHECK(hd95(ma, mb) == hd95(mb, ma));
    CHECK(boundary_voxels(ma).size() == oracle_boundary(a).size());
    ++checked;
  }
  CHECK(checked >= 10);
}

TEST_CASE("hd95 conventions") {
  const GridDims d{8, 8, 8};
  const auto a = mask_from(d, {1, 1, 1}, {d.index(1, 1, 1)});
  const auto b = mask_from(d, {1, 1, 1}, {d.index(4, 1, 1)});
  CHECK(hd95(a, a) == 0.0);
  CHECK(hd95(a, b) == doctest::Approx(3.0));
  const auto az = mask_from(d, {1, 1, 2}, {d.index(1, 1, 1)});
  const auto bz = mask_from(d, {1, 1, 2}, {d.index(1, 1, 4)});
  CHECK(hd95(az, bz) == doctest::Approx(6.0));
  // isotropic spacing scales linearly
  const auto a2 = mask_from(d, {2, 2, 2}, {d.index(1, 1, 1)});
  const auto b2 = mask_from(d, {2, 2, 2}, {d.index(4, 1, 1)});
  CHECK(hd95(a2, b2) == doctest::Approx(2.0 * hd95(a, b)));
  CHECK_THROWS_WITH_AS(hd95(a, mask_from(d, {}, {})), doctest::Contains("undefined HD95"), std::invalid_argument);
}

TEST_CASE("cv_dsc") {
  CHECK(cv_dsc({0.5, 0.5, 0.5}, 0.5) == 0.0);
  CHECK(std::abs(cv_dsc({0.7, 0.7, 0.7}, 0.7)) < 1e-12);
  CHECK(cv_dsc({0.8, 0.9}, 0.85) == doctest::Approx(8.3189).epsilon(1e-4));
  CHECK_THROWS(cv_dsc({0.8, 0.9}, 0.0));
  CHECK_THROWS(cv_dsc({0.8}, 0.8));
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.3, 1.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> v(2 + t);
    for (auto& x : v) x = u(rng);
    const double mu = u(rng);
    CHECK(std::abs(cv_dsc(v, mu) - 100.0 * oracle_sample_std(v) / mu) < 1e-9);
  }
}

TEST_CASE("organ_displacement") {
  const GridDims d{4, 3, 2};
  const Index n = d.count();
  const auto all = [&] {
    std::vector<Index> v;
    for (Index i = 0; i < n; ++i) v.push_back(i);
    return mask_from(d, {1, 1, 1}, v);
  }();
  const auto zero = organ_displacement(DeformationField::identity(d), all);
  CHECK(zero == std::array<double, 3>{0, 0, 0});

  std::vector<double> c(static_cast<std::size_t>(3 * n), 0.0);
  for (Index i = 0; i < n; ++i) c[i] = 4.92;
  CHECK(organ_displacement(field_from(d, c), all)[0] == doctest::Approx(4.92));

  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 2.0);
  for (int t = 0; t < 10; ++t) {
    std::vector<double> u(static_cast<std::size_t>(3 * n));
    for (auto& x : u) x = g(rng);
    RawMask r = random_mask(rng, 4, 3, 2, 1.5, 2.0, 2.5);
    auto m = to_mask(r);
    if (m.count() == 0) continue;
    const auto got = organ_displacement(field_from(d, u), m);
    const double sp[3] = {1.5, 2.0, 2.5};
    for (int ax = 0; ax < 3; ++ax) {
      std::vector<double> vals;
      for (Index i = 0; i < n; ++i)
        if (r.m[static_cast<std::size_t>(i)]) vals.push_back(std::abs(u[ax * n + i]) * sp[ax]);
      CHECK(got[ax] == oracle_median(vals));
    }
  }
  CHECK_THROWS(organ_displacement(DeformationField::identity(d), mask_from(d, {}, {})));
}

TEST_CASE("displacement_cv") {
  const auto same = displacement_cv({{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}});
  CHECK(same.mean == std::array<double, 3>{0, 0, 0});
  const auto r = displacement_cv({{{2, 2, 2}, {4, 4, 4}}, {{3, 3, 3}, {3, 3, 3}}});
  CHECK(r.per_patient[0][0] == doctest::Approx(47.1405).epsilon(1e-5));
  CHECK(r.per_patient[1][0] == 0.0);
  CHECK(r.mean[0] == doctest::Approx(47.1405 / 2).epsilon(1e-5));
  CHECK(r.std[0] == doctest::Approx(oracle_sample_std({r.per_patient[0][0], 0.0})));
  CHECK_THROWS(displacement_cv({{{1, 1, 1}}}));
  CHECK_THROWS(displacement_cv({{{0, 1, 1}, {0, 1, 1}}}));
}

TEST_CASE("majority vote") {
  const GridDims d{3, 1, 1};
  const LabelMap a{d, {}, {1, 1, 0}}, b{d, {}, {1, 2, 3}}, c{d, {}, {2, 2, 4}};
  const auto v = majority_vote({a, b, c});
  CHECK(v.labels == std::vector<std::uint8_t>{1, 2, 0});
  CHECK(majority_vote({a, a, a}).labels == a.labels);
  CHECK_THROWS_WITH(majority_vote({a, b}), doctest::Contains("requires >=3"));

  std::mt19937_64 rng(9);
  std::uniform_int_distribution<int> lab(0, 4);
  for (int t = 0; t < 10; ++t) {
    const GridDims g{5, 4, 3};
    std::vector<LabelMap> maps(3 + t % 3, LabelMap{g, {}, std::vector<std::uint8_t>(60)});
    for (auto& m : maps)
      for (auto& l : m.labels) l = static_cast<std::uint8_t>(lab(rng));
    const auto got = majority_vote(maps);
    for (std::size_t i = 0; i < 60; ++i) {
      std::vector<std::uint8_t> at;
      for (const auto& m : maps) at.push_back(m.labels[i]);
      CHECK(got.labels[i] == oracle_vote(at));
    }
    std::reverse(maps.begin(), maps.end());
    CHECK(majority_vote(maps).labels == got.labels);
  }
}

TEST_CASE("jsonl round trip") {
  std::vector<MetricRecord> recs{{"p01", 2, "liver", "dsc", 0.9375}, {"p02", 0, "small_bowel", "hd95", 4.5}};
  std::stringstream ss;
  write_jsonl(ss, recs);
  const std::string text = ss.str();
  CHECK(text.find("{\"patient\":\"p01\",\"fraction\":2,\"organ\":\"liver\",\"metric\":\"dsc\",\"value\":0.9375}") == 0);
  const auto back = read_jsonl(ss);
  REQUIRE(back.size() == 2);
  CHECK(back[1].organ == "small_bowel");
  CHECK(back[0].value == 0.9375);
}
