#include "prorseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "json.hpp"

namespace prorseg {

namespace {

void require_same_grid(const OrganMask& a, const OrganMask& b, const char* op) {
  if (!(a.dims == b.dims)) {
    throw ShapeError(std::string(op) + ": grids differ " + dims_str(a.dims) + " vs " + dims_str(b.dims));
  }
}

// Nearest-rank percentile of an ascending list.
double nearest_rank(const std::vector<double>& sorted, double pct) {
  const auto n = static_cast<double>(sorted.size());
  auto rank = static_cast<std::size_t>(std::ceil(pct / 100.0 * n));
  rank = std::clamp<std::size_t>(rank, 1, sorted.size());
  return sorted[rank - 1];
}

std::vector<double> directed_distances(const OrganMask& from, const std::vector<Index>& fb,
                                       const std::vector<Index>& tb) {
  const GridDims& d = from.dims;
  const Spacing& s = from.spacing;
  std::vector<double> out;
  out.reserve(fb.size());
  for (Index p : fb) {
    const Index px = p % d.x, py = (p / d.x) % d.y, pz = p / (d.x * d.y);
    double best = std::numeric_limits<double>::infinity();
    for (Index q : tb) {
      const double dx = static_cast<double>(q % d.x - px) * s.x;
      const double dy = static_cast<double>((q / d.x) % d.y - py) * s.y;
      const double dz = static_cast<double>(q / (d.x * d.y) - pz) * s.z;
      best = std::min(best, dx * dx + dy * dy + dz * dz);
    }
    out.push_back(std::sqrt(best));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

Index OrganMask::count() const {
  Index n = 0;
  for (auto v : mask) n += v ? 1 : 0;
  return n;
}

OrganMask organ_mask(const LabelMap& labels, std::uint8_t label) {
  OrganMask m{labels.dims, labels.spacing, std::vector<std::uint8_t>(labels.labels.size())};
  for (std::size_t i = 0; i < labels.labels.size(); ++i) m.mask[i] = labels.labels[i] == label ? 1 : 0;
  return m;
}

double dsc(const OrganMask& a, const OrganMask& b) {
  require_same_grid(a, b, "dsc");
  Index inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.mask.size(); ++i) {
    const bool x = a.mask[i] != 0, y = b.mask[i] != 0;
    sa += x;
    sb += y;
    inter += x && y;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

std::vector<Index> boundary_voxels(const OrganMask& m) {
  const GridDims& d = m.dims;
  auto inside = [&](Index x, Index y, Index z) {
    return x >= 0 && y >= 0 && z >= 0 && x < d.x && y < d.y && z < d.z && m.mask[d.index(x, y, z)] != 0;
  };
  std::vector<Index> out;
  for (Index z = 0; z < d.z; ++z)
    for (Index y = 0; y < d.y; ++y)
      for (Index x = 0; x < d.x; ++x) {
        if (!inside(x, y, z)) continue;
        if (!inside(x - 1, y, z) || !inside(x + 1, y, z) || !inside(x, y - 1, z) || !inside(x, y + 1, z) ||
            !inside(x, y, z - 1) || !inside(x, y, z + 1))
          out.push_back(d.index(x, y, z));
      }
  return out;
}

double hd95(const OrganMask& a, const OrganMask& b) {
  require_same_grid(a, b, "hd95");
  const auto ba = boundary_voxels(a), bb = boundary_voxels(b);
  if (ba.empty() || bb.empty()) throw std::invalid_argument("undefined HD95: empty mask");
  const double ab = nearest_rank(directed_distances(a, ba, bb), 95.0);
  const double ba_d = nearest_rank(directed_distances(b, bb, ba), 95.0);
  return std::max(ab, ba_d);
}

double cv_dsc(const std::vector<double>& v, double population_mean) {
  if (v.size() < 2) throw std::invalid_argument("cv_dsc: need at least two values");
  if (population_mean == 0.0) throw std::invalid_argument("cv_dsc: zero population mean");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return 100.0 * std::sqrt(ss / static_cast<double>(v.size() - 1)) / population_mean;
}

double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of an empty list");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::array<double, 3> organ_displacement(const DeformationField& phi, const OrganMask& mask) {
  const GridDims d = phi.dims();
  if (!(d == mask.dims)) {
    throw ShapeError("organ_displacement: field grid " + dims_str(d) + " vs mask " + dims_str(mask.dims));
  }
  const Index n = d.count();
  const auto u = phi.u.data();
  const double sp[3] = {mask.spacing.x, mask.spacing.y, mask.spacing.z};
  std::array<std::vector<double>, 3> axis;
  for (Index i = 0; i < n; ++i) {
    if (!mask.mask[static_cast<std::size_t>(i)]) continue;
    for (int c = 0; c < 3; ++c) axis[c].push_back(std::abs(u[c * n + i]) * sp[c]);
  }
  if (axis[0].empty()) throw std::invalid_argument("organ_displacement: empty mask");
  return {median(axis[0]), median(axis[1]), median(axis[2])};
}

DisplacementCv displacement_cv(const std::vector<std::vector<std::array<double, 3>>>& per_patient) {
  if (per_patient.empty()) throw std::invalid_argument("displacement_cv: no patients");
  DisplacementCv r;
  for (const auto& sources : per_patient) {
    if (sources.size() < 2) throw std::invalid_argument("displacement_cv: need >= 2 source alignments per patient");
    std::array<double, 3> cv{};
    for (int c = 0; c < 3; ++c) {
      double m = 0.0;
      for (const auto& s : sources) m += s[c];
      m /= static_cast<double>(sources.size());
      if (m == 0.0) throw std::invalid_argument("displacement_cv: zero mean displacement");
      double ss = 0.0;
      for (const auto& s : sources) ss += (s[c] - m) * (s[c] - m);
      cv[c] = 100.0 * std::sqrt(ss / static_cast<double>(sources.size() - 1)) / m;
    }
    r.per_patient.push_back(cv);
  }
  const auto np = static_cast<double>(r.per_patient.size());
  for (int c = 0; c < 3; ++c) {
    double m = 0.0;
    for (const auto& cv : r.per_patient) m += cv[c];
    m /= np;
    double ss = 0.0;
    for (const auto& cv : r.per_patient) ss += (cv[c] - m) * (cv[c] - m);
    r.mean[c] = m;
    r.std[c] = r.per_patient.size() > 1 ? std::sqrt(ss / (np - 1.0)) : 0.0;
  }
  return r;
}

LabelMap majority_vote(const std::vector<LabelMap>& maps) {
  if (maps.size() < 3) {
    throw std::invalid_argument("majority vote requires >=3 label maps, got " + std::to_string(maps.size()));
  }
  for (const auto& m : maps)
    if (!(m.dims == maps.front().dims)) throw ShapeError("majority_vote: label maps have different grids");
  LabelMap out{maps.front().dims, maps.front().spacing, std::vector<std::uint8_t>(maps.front().labels.size())};
  std::array<int, 256> counts{};
  for (std::size_t i = 0; i < out.labels.size(); ++i) {
    for (const auto& m : maps) ++counts[m.labels[i]];
    int best = 0;
    for (int l = 1; l < 256; ++l)
      if (counts[l] > counts[best]) best = l;
    out.labels[i] = static_cast<std::uint8_t>(best);
    for (const auto& m : maps) counts[m.labels[i]] = 0;
  }
  return out;
}

void write_jsonl(std::ostream& out, const std::vector<MetricRecord>& records) {
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["patient"] = r.patient;
    j["fraction"] = r.fraction;
    j["organ"] = r.organ;
    j["metric"] = r.metric;
    j["value"] = r.value;
    out << j.dump() << '\n';
  }
}

std::vector<MetricRecord> read_jsonl(std::istream& in) {
  std::vector<MetricRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("patient").get<std::string>(), j.at("fraction").get<int>(), j.at("organ").get<std::string>(),
                   j.at("metric").get<std::string>(), j.at("value").get<double>()});
  }
  return out;
}

}  // namespace prorseg
