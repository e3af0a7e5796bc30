#pragma once

// Recurrent segmentation network. Runs N+1 CLSTM steps over the fixed image,
// using the registration trajectory's warped image and contour as spatially
// aligned priors; every step emits a per-voxel class distribution.

#include <optional>
#include <random>
#include <vector>

#include "prorseg/network.hpp"
#include "prorseg/rrn.hpp"

namespace prorseg {

struct RsnConfig {
  int n_classes = 5;
  // in_channels must equal n_classes + 2 (moving image, one-hot contour, fixed image)
  UNetConfig unet{7, {4, 8, 8}, {8, 8}, 2};
  int n_steps = 9;
};

struct RsnModel {
  RsnConfig config;
  RecurrentUNet net;
  // logits = upsample(trunk_head(features)) + input_skip(step input), then
  // softmax. The 1x1x1 skip sees the full-resolution prior and fixed image
  // so boundaries are not limited by the trunk resolution.
  ConvLayer trunk_head, input_skip;

  static RsnModel create(const RsnConfig& config, std::mt19937_64& rng);
  ParameterList parameters() const;
};

struct RsnOptions {
  bool spatial_prior = true;  // false: feed the undeformed x_m, y_m at every step
  bool detach_priors = false;  // stop segmentation gradients reaching the registration network
  int bptt_window = 0;
};

// Returns n_steps probability maps [1, n_classes, Z, Y, X]; the last is the
// prediction. Requires traj.steps() + 1 == n_steps.
std::vector<Tensor> rsn_forward(const RsnModel& model, const Tensor& x_m, const Tensor& y_m, const Tensor& x_f,
                                const RegistrationTrajectory& traj, const RsnOptions& options = {});

// Sum over steps of the voxel-mean cross-entropy -w_c log(p_c + 1e-12) of the
// true class c.
Tensor loss_seg_deep_supervision(const std::vector<Tensor>& step_probs, const LabelMap& y_f,
                                 const std::optional<std::vector<double>>& class_weights = std::nullopt);

}  // namespace prorseg
