#pragma once

// Segmentation, registration and consistency metrics, plus majority voting.

#include <array>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "prorseg/flow_field.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

struct OrganMask {
  GridDims dims;
  Spacing spacing;
  std::vector<std::uint8_t> mask;  // 0 or 1, x fastest

  Index count() const;
};

OrganMask organ_mask(const LabelMap& labels, std::uint8_t label);

// 2|A n B| / (|A| + |B|); 1 when both are empty.
double dsc(const OrganMask& a, const OrganMask& b);

// Mask voxels with at least one 6-neighbour outside the mask (the grid border
// counts as outside).
std::vector<Index> boundary_voxels(const OrganMask& m);

// max of the two directed nearest-rank 95th percentiles of boundary-to-boundary
// nearest distances, in mm.
double hd95(const OrganMask& a, const OrganMask& b);

// 100 * sample std / population_mean.
double cv_dsc(const std::vector<double>& per_case_dsc, double population_mean);

double median(std::vector<double> values);

// Per-axis median |u| over mask voxels, in mm.
std::array<double, 3> organ_displacement(const DeformationField& phi, const OrganMask& mask);

struct DisplacementCv {
  std::vector<std::array<double, 3>> per_patient;  // percent
  std::array<double, 3> mean{};
  std::array<double, 3> std{};  // sample std across patients (0 for one patient)
};

// per_patient[p] holds one displacement triple per source alignment (>= 2).
DisplacementCv displacement_cv(const std::vector<std::vector<std::array<double, 3>>>& per_patient);

// Per-voxel mode of >= 3 label maps; ties go to the lowest label.
LabelMap majority_vote(const std::vector<LabelMap>& maps);

struct MetricRecord {
  std::string patient;
  int fraction = 0;
  std::string organ;
  std::string metric;
  double value = 0.0;
};

// One JSON object per line: {"patient","fraction","organ","metric","value"}.
void write_jsonl(std::ostream& out, const std::vector<MetricRecord>& records);
std::vector<MetricRecord> read_jsonl(std::istream& in);

}  // namespace prorseg
