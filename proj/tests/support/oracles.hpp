#pragma once

// Independent scalar-loop reference implementations used to check the metric
// and dose modules. They deliberately avoid the library's helpers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include "prorseg/volume.hpp"

namespace prorseg::testing {

struct RawMask {
  int nx, ny, nz;
  double sx, sy, sz;
  std::vector<std::uint8_t> m;  // x fastest

  int at(int x, int y, int z) const {
    if (x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz) return 0;
    return m[static_cast<std::size_t>(x + nx * (y + ny * z))];
  }
};

inline double oracle_dsc(const RawMask& a, const RawMask& b) {
  long inter = 0, na = 0, nb = 0;
  for (int z = 0; z < a.nz; ++z)
    for (int y = 0; y < a.ny; ++y)
      for (int x = 0; x < a.nx; ++x) {
        na += a.at(x, y, z);
        nb += b.at(x, y, z);
        inter += a.at(x, y, z) * b.at(x, y, z);
      }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline std::vector<std::array<int, 3>> oracle_boundary(const RawMask& a) {
  std::vector<std::array<int, 3>> out;
  const int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  for (int z = 0; z < a.nz; ++z)
    for (int y = 0; y < a.ny; ++y)
      for (int x = 0; x < a.nx; ++x) {
        if (!a.at(x, y, z)) continue;
        int inside = 0;
        for (const auto& o : off) inside += a.at(x + o[0], y + o[1], z + o[2]);
        if (inside < 6) out.push_back({x, y, z});
      }
  return out;
}

inline double oracle_p95(const std::vector<std::array<int, 3>>& from, const std::vector<std::array<int, 3>>& to,
                         const RawMask& g) {
  std::vector<double> d;
  for (const auto& p : from) {
    double best = 1e300;
    for (const auto& q : to) {
      const double dx = (q[0] - p[0]) * g.sx, dy = (q[1] - p[1]) * g.sy, dz = (q[2] - p[2]) * g.sz;
      best = std::min(best, std::sqrt(dx * dx + dy * dy + dz * dz));
    }
    d.push_back(best);
  }
  std::sort(d.begin(), d.end());
  // smallest value with at least 95% of samples <= it
  for (std::size_t i = 0; i < d.size(); ++i)
    if (100.0 * static_cast<double>(i + 1) >= 95.0 * static_cast<double>(d.size())) return d[i];
  return d.back();
}

inline double oracle_hd95(const RawMask& a, const RawMask& b) {
  const auto ba = oracle_boundary(a), bb = oracle_boundary(b);
  return std::max(oracle_p95(ba, bb, a), oracle_p95(bb, ba, a));
}

inline double oracle_median(std::vector<double> v) {
  // selection by counting, no sort
  const std::size_t n = v.size();
  auto kth = [&](std::size_t k) {
    for (double c : v) {
      std::size_t less = 0, eq = 0;
      for (double o : v) {
        less += o < c;
        eq += o == c;
      }
      if (less <= k && k < less + eq) return c;
    }
    return v.front();
  };
  return n % 2 ? kth(n / 2) : (kth(n / 2 - 1) + kth(n / 2)) / 2.0;
}

inline double oracle_sample_std(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  const double m = s / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline std::uint8_t oracle_vote(const std::vector<std::uint8_t>& labels) {
  std::map<int, int> count;
  for (auto l : labels) ++count[l];
  int best = -1, best_n = -1;
  for (const auto& [l, n] : count)  // ascending label order
    if (n > best_n) {
      best = l;
      best_n = n;
    }
  return static_cast<std::uint8_t>(best);
}

// D_V with doses sorted descending, voxel k covering ((k-1)v, kv].
inline double oracle_dvh(std::vector<double> doses, double voxel_cc, double v_cc) {
  std::sort(doses.begin(), doses.end(), [](double a, double b) { return a > b; });
  if (v_cc <= voxel_cc) return doses[0];
  for (std::size_t k = 2; k <= doses.size(); ++k) {
    const double lo = static_cast<double>(k - 1) * voxel_cc, hi = static_cast<double>(k) * voxel_cc;
    if (v_cc <= hi + 1e-12 * hi) {
      const double t = std::min(1.0, (v_cc - lo) / voxel_cc);
      return doses[k - 2] + t * (doses[k - 1] - doses[k - 2]);
    }
  }
  return doses.back();
}

// Random blobby mask: union of a few random boxes, sometimes empty-ish.
inline RawMask random_mask(std::mt19937_64& rng, int nx, int ny, int nz, double sx, double sy, double sz) {
  RawMask r{nx, ny, nz, sx, sy, sz, std::vector<std::uint8_t>(static_cast<std::size_t>(nx * ny * nz), 0)};
  std::uniform_int_distribution<int> nb(1, 3);
  const int boxes = nb(rng);
  for (int b = 0; b < boxes; ++b) {
    std::uniform_int_distribution<int> ux(0, nx - 1), uy(0, ny - 1), uz(0, nz - 1);
    int x0 = ux(rng), x1 = ux(rng), y0 = uy(rng), y1 = uy(rng), z0 = uz(rng), z1 = uz(rng);
    if (x0 > x1) std::swap(x0, x1);
    if (y0 > y1) std::swap(y0, y1);
    if (z0 > z1) std::swap(z0, z1);
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) r.m[static_cast<std::size_t>(x + nx * (y + ny * z))] = 1;
  }
  // salt noise
  std::bernoulli_distribution flip(0.05);
  for (auto& v : r.m)
    if (flip(rng)) v = static_cast<std::uint8_t>(1 - v);
  return r;
}

}  // namespace prorseg::testing
