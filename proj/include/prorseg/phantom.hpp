#pragma once

// Synthetic abdominal phantoms with ground-truth labels and deformations, plus
// the preprocessing used on every scan.

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "prorseg/flow_field.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

struct PhantomOptions {
  Spacing spacing{3.0, 3.0, 3.0};
  double texture_sigma = 2.0;      // voxels
  double texture_amplitude = 0.3;  // std of the texture inside the body
  double jitter = 0.03;            // organ placement jitter, fraction of the grid
};

struct PhantomImage {
  Volume image;
  LabelMap labels;
};

// Body ellipsoid with a liver-like ellipsoid, a C-shaped large-bowel tube, a
// folded small-bowel tube and a J-shaped stomach-duodenum. n_organs (1..4)
// keeps the first n of that list. Organs never overlap. Needs >= 16 voxels
// per axis.
PhantomImage generate_phantom(std::uint64_t seed, const GridDims& dims, int n_organs = 4,
                              const PhantomOptions& options = {});

// Fraction of grid voxels each organ label may occupy on a default phantom.
std::array<double, 2> organ_volume_bounds(std::uint8_t label);

struct DeformOptions {
  double max_disp = 3.0;  // voxels, peak |v|
  double sigma = 2.0;     // smoothing of the velocity noise, voxels
  std::array<double, 3> rigid_offset{0.0, 0.0, 0.0};  // residual rigid error, voxels
  double noise_std = 0.0;  // additive intensity noise
};

struct PhantomFraction {
  int fraction = 0;
  Volume image;
  LabelMap labels;
  VelocityField gt_velocity;  // base -> fraction: image = base o exp(v)
};

PhantomFraction deform_phantom(const PhantomImage& base, std::uint64_t seed, const DeformOptions& options = {});

struct PhantomPatient {
  std::string id;
  PhantomImage base;
  std::vector<PhantomFraction> fractions;
};

struct DatasetOptions {
  int n_patients = 20;
  int n_fractions = 3;
  GridDims dims{32, 32, 32};
  PhantomOptions phantom;
  DeformOptions deform;
};

std::vector<PhantomPatient> generate_dataset(std::uint64_t seed, const DatasetOptions& options);

// Field that samples the moving fraction at fixed-fraction positions:
// exp(-v_moving) o exp(v_fixed).
DeformationField ground_truth_pair_field(const PhantomFraction& moving, const PhantomFraction& fixed,
                                         int squaring_steps = 7);

// Per-case seed derivation shared by the generators.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct CropBox {
  std::array<Index, 3> lo{};  // inclusive x, y, z
  std::array<Index, 3> hi{};  // exclusive
  GridDims dims() const { return {hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}; }
};

struct CroppedVolume {
  Volume volume;
  CropBox box;
};

// Binarize at threshold, fill holes by a 6-connected flood from the border,
// keep the largest 6-connected component, crop to its bounding box plus a
// 2-voxel margin.
CroppedVolume preprocess_crop_body(const Volume& vol, double threshold);
Volume crop(const Volume& vol, const CropBox& box);
LabelMap crop(const LabelMap& labels, const CropBox& box);

// Zero mean, unit population variance over the mask (all voxels without one).
Volume standardize_intensity(const Volume& vol, const std::optional<std::vector<std::uint8_t>>& mask = std::nullopt);

}  // namespace prorseg
