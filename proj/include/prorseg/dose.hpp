#pragma once

// Dose accumulation over DVF chains, DVH points and OAR constraint checks.

#include <cstdint>
#include <string>
#include <vector>

#include "prorseg/flow_field.hpp"
#include "prorseg/metrics.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

// dvfs[k] links fractions k and k+1 and points toward the reference frame:
// for k >= reference it is the field of the pair (fixed k, moving k+1), for
// k < reference the pair (fixed k+1, moving k). Every dose is pulled into the
// reference frame through the composed chain and the results are summed in
// fraction order.
DoseGrid accumulate(const std::vector<DoseGrid>& doses, const std::vector<DeformationField>& dvfs,
                    int reference_index);

// Field that samples fraction `from` at reference-frame positions.
DeformationField chain_to_reference(const std::vector<DeformationField>& dvfs, int reference_index, int from,
                                    const GridDims& dims);

struct DvhPoints {
  double dmax = 0.0;
  double d0035cc = 0.0;
  double d5cc = 0.0;
};

// Organ doses sorted descending; voxel k (1-based) ends at cumulative volume
// k*v. D_V is linear between (k-1)*v and k*v on the doses of voxels k-1 and k,
// and equals Dmax for V <= v. Throws when the organ is smaller than V.
double dvh_point(const DoseGrid& dose, const OrganMask& mask, double volume_cc);
DvhPoints dose_metrics(const DoseGrid& dose, const OrganMask& mask);

struct ConstraintSet {
  double d0035cc_max = 33.0;
  double d5cc_max = 25.0;
  double d5cc_max_large_bowel = 30.0;
};

struct Violation {
  std::string organ;
  std::string metric;
  double value = 0.0;
  double limit = 0.0;
};

// Constraints apply to the GI organs (large bowel, small bowel,
// stomach-duodenum); other labels never violate.
std::vector<Violation> check_constraints(const DvhPoints& metrics, std::uint8_t organ,
                                         const ConstraintSet& constraints = {});

}  // namespace prorseg
