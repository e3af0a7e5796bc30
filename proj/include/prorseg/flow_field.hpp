#pragma once

// Dense displacement fields on a voxel grid.
//
// Fields are [1, 3, D, H, W] tensors in voxel units. Channel 0 displaces along
// x (the W axis), channel 1 along y (H), channel 2 along z (D). A
// DeformationField u represents phi(p) = p + u(p); warping samples the source
// at phi(p).

#include <random>

#include "prorseg/tensor.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

struct VelocityField {
  Tensor v;
};

struct DeformationField {
  Tensor u;

  static DeformationField identity(const GridDims& dims);
  GridDims dims() const;
};

// phi = exp(v) by scaling and squaring: u0 = v / 2^steps, then `steps`
// self-compositions. Differentiable in v.
DeformationField integrate_svf(const VelocityField& v, int squaring_steps = 7);

// (outer o inner)(p) = outer(inner(p)); u = u_inner + outer.u sampled at p + u_inner.
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

// out(p) = img sampled trilinearly at p + u(p); coordinates are clamped to the
// grid border. img is [1, C, D, H, W]. Differentiable in img and u.
Tensor warp_trilinear(const Tensor& img, const DeformationField& phi);

// One-hot encode, warp every channel trilinearly, argmax (ties -> lowest label).
LabelMap warp_labels(const LabelMap& labels, const DeformationField& phi, int n_classes);

struct JacobianStats {
  double j_sd = 0.0;            // population std of det(J) over interior voxels
  double folding_percent = 0.0;  // % of interior voxels with det(J) <= 0
  double mean_det = 0.0;
  double min_det = 0.0;
};

// det of the 3x3 Jacobian of p + u(p) via central differences on interior
// voxels (boundary layer excluded). Needs >= 3 voxels per axis.
JacobianStats jacobian_stats(const DeformationField& phi);
std::vector<double> jacobian_determinants(const DeformationField& phi);

// Separable Gaussian blur of every channel of [1, C, D, H, W]; kernel radius
// ceil(3 sigma), border samples clamped. Not differentiable.
Tensor gaussian_smooth(const Tensor& x, double sigma);

// Gaussian-smoothed white noise, rescaled so the largest per-voxel vector
// magnitude equals max_magnitude.
VelocityField random_smooth_velocity(const GridDims& dims, double sigma, double max_magnitude,
                                     std::mt19937_64& rng);

}  // namespace prorseg
