#include "prorseg/dose.hpp"

#include <algorithm>
#include <functional>
#include <stdexcept>

#include "prorseg/ops.hpp"

namespace prorseg {

DeformationField chain_to_reference(const std::vector<DeformationField>& dvfs, int reference_index, int from,
                                    const GridDims& dims) {
  NoGradGuard ng;
  DeformationField psi = DeformationField::identity(dims);
  if (from > reference_index) {
    for (int k = reference_index; k < from; ++k) psi = compose(dvfs[static_cast<std::size_t>(k)], psi);
  } else {
    for (int k = reference_index - 1; k >= from; --k) psi = compose(dvfs[static_cast<std::size_t>(k)], psi);
  }
  return psi;
}

DoseGrid accumulate(const std::vector<DoseGrid>& doses, const std::vector<DeformationField>& dvfs,
                    int reference_index) {
  if (doses.empty()) throw std::invalid_argument("accumulate: no doses");
  if (dvfs.size() + 1 != doses.size()) {
    throw std::invalid_argument("accumulate: need " + std::to_string(doses.size() - 1) + " DVFs, got " +
                                std::to_string(dvfs.size()));
  }
  if (reference_index < 0 || reference_index >= static_cast<int>(doses.size())) {
    throw std::invalid_argument("accumulate: reference index out of range");
  }
  const GridDims dims = doses.front().dims;
  for (const auto& d : doses)
    if (!(d.dims == dims)) throw ShapeError("accumulate: dose grids differ " + dims_str(d.dims) + " vs " + dims_str(dims));
  for (const auto& f : dvfs)
    if (!(f.dims() == dims)) throw ShapeError("accumulate: DVF grid " + dims_str(f.dims()) + " vs dose " + dims_str(dims));

  NoGradGuard ng;
  DoseGrid out{dims, doses.front().spacing, std::vector<double>(static_cast<std::size_t>(dims.count()), 0.0)};
  for (int j = 0; j < static_cast<int>(doses.size()); ++j) {
    const Tensor warped = warp_trilinear(to_tensor(doses[static_cast<std::size_t>(j)]),
                                         chain_to_reference(dvfs, reference_index, j, dims));
    const auto w = warped.data();
    for (std::size_t i = 0; i < out.gy.size(); ++i) out.gy[i] += w[i];
  }
  return out;
}

double dvh_point(const DoseGrid& dose, const OrganMask& mask, double volume_cc) {
  if (!(dose.dims == mask.dims)) {
    throw ShapeError("dose_metrics: dose grid " + dims_str(dose.dims) + " vs mask " + dims_str(mask.dims));
  }
  std::vector<double> d;
  for (std::size_t i = 0; i < mask.mask.size(); ++i)
    if (mask.mask[i]) d.push_back(dose.gy[i]);
  if (d.empty()) throw std::invalid_argument("dose_metrics: empty organ mask");
  std::sort(d.begin(), d.end(), std::greater<>());
  const double vv = mask.spacing.voxel_volume_mm3() / 1000.0;  // cm^3
  const double total = vv * static_cast<double>(d.size());
  if (volume_cc > total * (1.0 + 1e-12)) {
    throw std::invalid_argument("volume smaller than DVH point: organ " + std::to_string(total) + " cc < " +
                                std::to_string(volume_cc) + " cc");
  }
  if (volume_cc <= vv) return d.front();
  // first k with k * vv >= V
  auto k = static_cast<std::size_t>(std::ceil(volume_cc / vv - 1e-12));
  k = std::clamp<std::size_t>(k, 2, d.size());
  const double t = (volume_cc - static_cast<double>(k - 1) * vv) / vv;
  return d[k - 2] + (d[k - 1] - d[k - 2]) * std::clamp(t, 0.0, 1.0);
}

DvhPoints dose_metrics(const DoseGrid& dose, const OrganMask& mask) {
  return {dvh_point(dose, mask, 0.0), dvh_point(dose, mask, 0.035), dvh_point(dose, mask, 5.0)};
}

std::vector<Violation> check_constraints(const DvhPoints& m, std::uint8_t organ, const ConstraintSet& c) {
  std::vector<Violation> out;
  if (organ != organ::large_bowel && organ != organ::small_bowel && organ != organ::stomach_duodenum) return out;
  const std::string name = organ::name(organ);
  if (m.d0035cc > c.d0035cc_max) out.push_back({name, "D0.035cc", m.d0035cc, c.d0035cc_max});
  const double limit = organ == organ::large_bowel ? c.d5cc_max_large_bowel : c.d5cc_max;
  if (m.d5cc > limit) out.push_back({name, "D5cc", m.d5cc, limit});
  return out;
}

}  // namespace prorseg
