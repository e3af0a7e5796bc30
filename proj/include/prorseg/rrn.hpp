#pragma once

// Recurrent registration network: N CLSTM steps, each predicting a stationary
// velocity field that is integrated into an incremental deformation and used
// to warp the previous step's moving image and contour.

#include <random>
#include <vector>

#include "prorseg/flow_field.hpp"
#include "prorseg/network.hpp"

namespace prorseg {

struct RrnConfig {
  UNetConfig unet{2, {4, 8, 8}, {8, 8}, 2};
  int n_steps = 8;
  int squaring_steps = 7;
  double flow_init_std = 1e-5;
};

struct RrnModel {
  RrnConfig config;
  RecurrentUNet net;
  ConvLayer flow_head;  // features -> 3-channel velocity

  static RrnModel create(const RrnConfig& config, std::mt19937_64& rng);
  ParameterList parameters() const;
};

struct RrnOptions {
  bool compose = true;  // build the composed field (skip during training)
  int bptt_window = 0;  // <= 0: full backpropagation through time
};

struct RegistrationTrajectory {
  std::vector<VelocityField> velocity;  // at trunk resolution
  std::vector<DeformationField> phi;    // incremental, full resolution
  std::vector<Tensor> x_m;              // x_m^1 .. x_m^N
  std::vector<Tensor> y_m;              // one-hot probabilities, same indexing
  DeformationField composed;            // phi^1 o ... o phi^N (undefined when not requested)

  std::size_t steps() const { return phi.size(); }
};

// x_m, x_f: [1,1,Z,Y,X]; y_m: [1,C,Z,Y,X] one-hot. y_m is warped alongside but
// never fed to the network.
RegistrationTrajectory rrn_forward(const RrnModel& model, const Tensor& x_m, const Tensor& x_f,
                                   const Tensor& y_m, const RrnOptions& options = {});

enum class SimilarityMode { mse, lncc };

// Sum over steps of MSE(x_m^i, x_f), or of -mean local squared NCC over
// window^3 neighbourhoods.
Tensor loss_sim(const RegistrationTrajectory& traj, const Tensor& x_f, SimilarityMode mode, int window = 5);

// Local squared NCC map between two images, cross^2 / (var_a var_b + 1e-5).
Tensor local_ncc(const Tensor& a, const Tensor& b, int window = 5);

enum class Reduction { sum, mean };

// Squared forward differences of each incremental displacement, averaged over
// steps. sum: summed over voxels, components and axes. mean: per-axis means
// averaged over the three axes.
Tensor loss_smooth(const RegistrationTrajectory& traj, Reduction reduction = Reduction::sum);

// Soft multi-class Dice over foreground classes (epsilon 1e-5).
Tensor soft_dice(const Tensor& a, const Tensor& b);

// 1 - mean over steps of soft_dice(y_m^i, y_f); final_only uses step N alone.
Tensor loss_cons(const RegistrationTrajectory& traj, const Tensor& y_f, bool final_only = false);

struct RegistrationLossConfig {
  SimilarityMode sim_mode = SimilarityMode::mse;
  int ncc_window = 5;
  double lambda_smooth = 30.0;
  double lambda_cons = 1.0;
  Reduction smooth_reduction = Reduction::sum;
  bool cons_final_only = false;
};

struct RegistrationLoss {
  Tensor total, sim, smooth, cons;
};

RegistrationLoss loss_registration_total(const RegistrationTrajectory& traj, const Tensor& x_f, const Tensor& y_f,
                                         const RegistrationLossConfig& config = {});

}  // namespace prorseg
