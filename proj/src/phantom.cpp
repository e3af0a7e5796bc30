#include "prorseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <numbers>
#include <stdexcept>

#include "prorseg/ops.hpp"

namespace prorseg {

namespace {

struct P3 {
  double x, y, z;
};

// Normalized voxel-centre coordinates in [0, 1].
P3 unit_coord(const GridDims& d, Index x, Index y, Index z) {
  return {(static_cast<double>(x) + 0.5) / static_cast<double>(d.x),
          (static_cast<double>(y) + 0.5) / static_cast<double>(d.y),
          (static_cast<double>(z) + 0.5) / static_cast<double>(d.z)};
}

double ellipsoid(const P3& p, const P3& c, const P3& r) {
  const double dx = (p.x - c.x) / r.x, dy = (p.y - c.y) / r.y, dz = (p.z - c.z) / r.z;
  return dx * dx + dy * dy + dz * dz;
}

// Tube around a polyline whose radius varies linearly from r0 to r1; the z
// extent is stretched so the cross-section is an ellipse of aspect z_stretch.
struct Tube {
  std::vector<P3> pts;
  double r0, r1, z_stretch;

  bool contains(const P3& p) const {
    double total = 0.0;
    std::vector<double> len;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const double l = std::hypot(pts[i].x - pts[i - 1].x, pts[i].y - pts[i - 1].y, pts[i].z - pts[i - 1].z);
      len.push_back(l);
      total += l;
    }
    double walked = 0.0;
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const P3 a = pts[i - 1], b = pts[i];
      const double ax = b.x - a.x, ay = b.y - a.y, az = (b.z - a.z) / z_stretch;
      const double px = p.x - a.x, py = p.y - a.y, pz = (p.z - a.z) / z_stretch;
      const double ll = ax * ax + ay * ay + az * az;
      const double t = ll > 0.0 ? std::clamp((px * ax + py * ay + pz * az) / ll, 0.0, 1.0) : 0.0;
      const double dx = px - t * ax, dy = py - t * ay, dz = pz - t * az;
      const double s = (walked + t * len[i - 1]) / total;
      const double r = r0 + (r1 - r0) * s;
      if (dx * dx + dy * dy + dz * dz <= r * r) return true;
      walked += len[i - 1];
    }
    return false;
  }
};

// Bounds below are [0.5, 1.6] times analytic volume estimates (ellipsoid
// volume, or tube length times elliptic cross-section), as grid fractions.
constexpr double kLiver = 4.0 / 3.0 * std::numbers::pi * 0.15 * 0.13 * 0.20;
constexpr double kLargeBowel = 0.90 * std::numbers::pi * 0.05 * 0.15;
constexpr double kSmallBowel = 0.88 * std::numbers::pi * 0.035 * 0.105;
constexpr double kStomach = 0.30 * std::numbers::pi * 0.0625 * 0.1875;

double jittered(std::mt19937_64& rng, double base, double amount) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return base + u(rng);
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::array<double, 2> organ_volume_bounds(std::uint8_t label) {
  double est = 0.0;
  switch (label) {
    case organ::liver: est = kLiver; break;
    case organ::large_bowel: est = kLargeBowel; break;
    case organ::small_bowel: est = kSmallBowel; break;
    case organ::stomach_duodenum: est = kStomach; break;
    default: throw std::invalid_argument("organ_volume_bounds: not an organ label");
  }
  return {0.5 * est, 1.6 * est};
}

PhantomImage generate_phantom(std::uint64_t seed, const GridDims& dims, int n_organs, const PhantomOptions& opt) {
  if (dims.x < 16 || dims.y < 16 || dims.z < 16) {
    throw std::invalid_argument("generate_phantom: dims must be >= 16 per axis, got " + dims_str(dims));
  }
  if (n_organs < 1 || n_organs > 4) throw std::invalid_argument("generate_phantom: n_organs must be in 1..4");
  std::mt19937_64 rng(seed);
  const double j = opt.jitter;
  std::uniform_real_distribution<double> scale_u(0.92, 1.08);

  const P3 body_c{0.5, 0.5, 0.5}, body_r{0.44, 0.38, 0.44};

  const double ls = scale_u(rng);
  const P3 liver_c{jittered(rng, 0.30, j), jittered(rng, 0.36, j), jittered(rng, 0.5, j)};
  const P3 liver_r{0.15 * ls, 0.13 * ls, 0.20 * ls};

  Tube large;
  {
    const double cx = jittered(rng, 0.52, j), cy = jittered(rng, 0.58, j), cz = jittered(rng, 0.5, j);
    const double s = scale_u(rng);
    for (int k = 0; k <= 16; ++k) {
      const double th = (-15.0 + 210.0 * k / 16.0) * std::numbers::pi / 180.0;
      large.pts.push_back({cx + 0.27 * s * std::cos(th), cy + 0.22 * s * std::sin(th), cz + 0.05 * std::sin(2 * th)});
    }
    large.r0 = large.r1 = 0.05;
    large.z_stretch = 3.0;
  }

  Tube small;
  {
    const double ox = jittered(rng, 0.0, j), oy = jittered(rng, 0.0, j), cz = jittered(rng, 0.5, j);
    const double rows[3] = {0.50, 0.58, 0.66};
    for (int r = 0; r < 3; ++r) {
      const double xa = r % 2 ? 0.64 : 0.40, xb = r % 2 ? 0.40 : 0.64;
      const double z = cz + (r % 2 ? 0.04 : -0.04);
      small.pts.push_back({xa + ox, rows[r] + oy, z});
      small.pts.push_back({xb + ox, rows[r] + oy, z});
    }
    small.r0 = small.r1 = 0.035;
    small.z_stretch = 3.0;
  }

  Tube stomach;
  {
    const double ox = jittered(rng, 0.0, j), oy = jittered(rng, 0.0, j), cz = jittered(rng, 0.5, j);
    stomach.pts = {{0.72 + ox, 0.22 + oy, cz}, {0.72 + ox, 0.32 + oy, cz}, {0.66 + ox, 0.40 + oy, cz},
                   {0.56 + ox, 0.40 + oy, cz}};
    stomach.r0 = 0.075;
    stomach.r1 = 0.05;
    stomach.z_stretch = 2.5;
  }

  const Index n = dims.count();
  PhantomImage out;
  out.image = Volume{dims, opt.spacing, std::vector<double>(static_cast<std::size_t>(n), 0.0), Modality::mr};
  out.labels = LabelMap{dims, opt.spacing, std::vector<std::uint8_t>(static_cast<std::size_t>(n), 0)};
  std::vector<std::uint8_t> body(static_cast<std::size_t>(n), 0);

  const double level[5] = {1.0, 1.8, 0.6, 0.6, 1.3};
  for (Index z = 0; z < dims.z; ++z)
    for (Index y = 0; y < dims.y; ++y)
      for (Index x = 0; x < dims.x; ++x) {
        const P3 p = unit_coord(dims, x, y, z);
        const auto i = static_cast<std::size_t>(dims.index(x, y, z));
        if (ellipsoid(p, body_c, body_r) > 1.0) continue;
        body[i] = 1;
        // paint order decides ownership; later organs only take free voxels
        std::uint8_t l = 0;
        if (ellipsoid(p, liver_c, liver_r) <= 1.0) l = organ::liver;
        else if (n_organs >= 2 && large.contains(p)) l = organ::large_bowel;
        else if (n_organs >= 3 && small.contains(p)) l = organ::small_bowel;
        else if (n_organs >= 4 && stomach.contains(p)) l = organ::stomach_duodenum;
        out.labels.labels[i] = l;
        out.image.values[i] = level[l];
      }

  if (opt.texture_amplitude > 0.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> noise(static_cast<std::size_t>(n));
    for (auto& v : noise) v = g(rng);
    const Tensor smooth = gaussian_smooth(Tensor({1, 1, dims.z, dims.y, dims.x}, std::move(noise)), opt.texture_sigma);
    const auto t = smooth.data();
    double ss = 0.0;
    for (double v : t) ss += v * v;
    const double norm = opt.texture_amplitude / std::sqrt(ss / static_cast<double>(n));
    for (Index i = 0; i < n; ++i)
      if (body[static_cast<std::size_t>(i)]) out.image.values[static_cast<std::size_t>(i)] += norm * t[i];
  }
  return out;
}

PhantomFraction deform_phantom(const PhantomImage& base, std::uint64_t seed, const DeformOptions& opt) {
  const GridDims dims = base.image.dims;
  std::mt19937_64 rng(seed);
  VelocityField v = random_smooth_velocity(dims, opt.sigma, opt.max_disp, rng);
  if (opt.rigid_offset != std::array<double, 3>{0.0, 0.0, 0.0}) {
    auto d = v.v.mutable_data();
    const Index n = dims.count();
    for (int c = 0; c < 3; ++c)
      for (Index i = 0; i < n; ++i) d[c * n + i] += opt.rigid_offset[static_cast<std::size_t>(c)];
  }
  NoGradGuard ng;
  const DeformationField phi = integrate_svf(v);
  PhantomFraction f;
  f.gt_velocity = v;
  f.image = volume_from_tensor(warp_trilinear(to_tensor(base.image), phi), dims, base.image.spacing,
                               base.image.modality);
  f.labels = warp_labels(base.labels, phi, organ::count);
  if (opt.noise_std > 0.0) {
    std::normal_distribution<double> g(0.0, opt.noise_std);
    for (auto& x : f.image.values) x += g(rng);
  }
  return f;
}

std::vector<PhantomPatient> generate_dataset(std::uint64_t seed, const DatasetOptions& opt) {
  if (opt.n_patients < 1 || opt.n_fractions < 1) throw std::invalid_argument("generate_dataset: empty dataset");
  std::vector<PhantomPatient> out;
  for (int p = 0; p < opt.n_patients; ++p) {
    PhantomPatient pat;
    char id[16];
    std::snprintf(id, sizeof id, "p%02d", p);
    pat.id = id;
    pat.base = generate_phantom(mix_seed(seed, static_cast<std::uint64_t>(p)), opt.dims, 4, opt.phantom);
    for (int f = 0; f < opt.n_fractions; ++f) {
      auto fr = deform_phantom(pat.base, mix_seed(seed, static_cast<std::uint64_t>(p), static_cast<std::uint64_t>(f) + 1),
                               opt.deform);
      fr.fraction = f;
      pat.fractions.push_back(std::move(fr));
    }
    out.push_back(std::move(pat));
  }
  return out;
}

DeformationField ground_truth_pair_field(const PhantomFraction& moving, const PhantomFraction& fixed,
                                         int squaring_steps) {
  NoGradGuard ng;
  const DeformationField inv_m = integrate_svf({scale(moving.gt_velocity.v, -1.0)}, squaring_steps);
  const DeformationField fwd_f = integrate_svf(fixed.gt_velocity, squaring_steps);
  return compose(inv_m, fwd_f);
}

namespace {

template <class Visit>
void flood6(const GridDims& d, std::deque<Index>& queue, Visit&& visit) {
  while (!queue.empty()) {
    const Index p = queue.front();
    queue.pop_front();
    const Index x = p % d.x, y = (p / d.x) % d.y, z = p / (d.x * d.y);
    if (x > 0) visit(p - 1, queue);
    if (x + 1 < d.x) visit(p + 1, queue);
    if (y > 0) visit(p - d.x, queue);
    if (y + 1 < d.y) visit(p + d.x, queue);
    if (z > 0) visit(p - d.x * d.y, queue);
    if (z + 1 < d.z) visit(p + d.x * d.y, queue);
  }
}

template <class T>
std::vector<T> crop_values(const std::vector<T>& src, const GridDims& d, const CropBox& b) {
  for (int a = 0; a < 3; ++a) {
    const Index lim = a == 0 ? d.x : a == 1 ? d.y : d.z;
    if (b.lo[a] < 0 || b.hi[a] > lim || b.lo[a] >= b.hi[a]) throw std::invalid_argument("crop: box outside the grid");
  }
  const GridDims o = b.dims();
  std::vector<T> out;
  out.reserve(static_cast<std::size_t>(o.count()));
  for (Index z = b.lo[2]; z < b.hi[2]; ++z)
    for (Index y = b.lo[1]; y < b.hi[1]; ++y)
      for (Index x = b.lo[0]; x < b.hi[0]; ++x) out.push_back(src[static_cast<std::size_t>(d.index(x, y, z))]);
  return out;
}

}  // namespace

CroppedVolume preprocess_crop_body(const Volume& vol, double threshold) {
  const GridDims d = vol.dims;
  const Index n = d.count();
  std::vector<std::uint8_t> fg(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) fg[static_cast<std::size_t>(i)] = vol.values[static_cast<std::size_t>(i)] > threshold;

  // background reachable from the border; everything else is body (holes filled)
  std::vector<std::uint8_t> outside(static_cast<std::size_t>(n), 0);
  std::deque<Index> q;
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        if (x != 0 && y != 0 && z != 0 && x + 1 != d.x && y + 1 != d.y && z + 1 != d.z) continue;
        const Index p = d.index(x, y, z);
        if (!fg[static_cast<std::size_t>(p)] && !outside[static_cast<std::size_t>(p)]) {
          outside[static_cast<std::size_t>(p)] = 1;
          q.push_back(p);
        }
      }
  flood6(d, q, [&](Index p, std::deque<Index>& qq) {
    if (!fg[static_cast<std::size_t>(p)] && !outside[static_cast<std::size_t>(p)]) {
      outside[static_cast<std::size_t>(p)] = 1;
      qq.push_back(p);
    }
  });
  for (Index i = 0; i < n; ++i) fg[static_cast<std::size_t>(i)] = !outside[static_cast<std::size_t>(i)];

  // largest 6-connected component
  std::vector<int> comp(static_cast<std::size_t>(n), -1);
  int best = -1;
  Index best_size = 0;
  int next = 0;
  for (Index s = 0; s < n; ++s) {
    if (!fg[static_cast<std::size_t>(s)] || comp[static_cast<std::size_t>(s)] >= 0) continue;
    const int id = next++;
    Index size = 1;
    comp[static_cast<std::size_t>(s)] = id;
    q.push_back(s);
    flood6(d, q, [&](Index p, std::deque<Index>& qq) {
      if (fg[static_cast<std::size_t>(p)] && comp[static_cast<std::size_t>(p)] < 0) {
        comp[static_cast<std::size_t>(p)] = id;
        ++size;
        qq.push_back(p);
      }
    });
    if (size > best_size) {
      best_size = size;
      best = id;
    }
  }
  if (best < 0) throw std::invalid_argument("preprocess_crop_body: empty foreground at threshold " + std::to_string(threshold));

  CropBox b;
  b.lo = {d.x, d.y, d.z};
  b.hi = {0, 0, 0};
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        if (comp[static_cast<std::size_t>(d.index(x, y, z))] != best) continue;
        const Index c[3] = {x, y, z};
        for (int a = 0; a < 3; ++a) {
          b.lo[a] = std::min(b.lo[a], c[a]);
          b.hi[a] = std::max(b.hi[a], c[a] + 1);
        }
      }
  const Index lim[3] = {d.x, d.y, d.z};
  for (int a = 0; a < 3; ++a) {
    b.lo[a] = std::max<Index>(0, b.lo[a] - 2);
    b.hi[a] = std::min<Index>(lim[a], b.hi[a] + 2);
  }
  return {crop(vol, b), b};
}

Volume crop(const Volume& vol, const CropBox& box) {
  return {box.dims(), vol.spacing, crop_values(vol.values, vol.dims, box), vol.modality};
}

LabelMap crop(const LabelMap& labels, const CropBox& box) {
  return {box.dims(), labels.spacing, crop_values(labels.labels, labels.dims, box)};
}

Volume standardize_intensity(const Volume& vol, const std::optional<std::vector<std::uint8_t>>& mask) {
  if (mask && mask->size() != vol.values.size()) throw ShapeError("standardize_intensity: mask size mismatch");
  double s = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < vol.values.size(); ++i)
    if (!mask || (*mask)[i]) {
      s += vol.values[i];
      ++cnt;
    }
  if (cnt == 0) throw std::invalid_argument("standardize_intensity: empty mask");
  const double m = s / static_cast<double>(cnt);
  double ss = 0.0;
  for (std::size_t i = 0; i < vol.values.size(); ++i)
    if (!mask || (*mask)[i]) ss += (vol.values[i] - m) * (vol.values[i] - m);
  const double sd = std::sqrt(ss / static_cast<double>(cnt));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(m)))) throw std::invalid_argument("standardize_intensity: constant intensities");
  Volume out = vol;
  for (auto& v : out.values) v = (v - m) / sd;
  return out;
}

}  // namespace prorseg
