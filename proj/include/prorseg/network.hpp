#pragma once

// Recurrent U-Net trunk shared by the registration and segmentation networks.
//
// Every encoder stage is a ClstmCell whose hidden state persists across the
// recurrent steps; stages are separated by 2x max pooling. The decoder
// upsamples, concatenates the matching encoder state and applies a 3x3x3
// conv + ReLU. With input_pool = p > 1 the whole trunk runs at 1/p resolution
// (the input is average pooled first) and callers upsample their heads.

#include <random>
#include <vector>

#include "prorseg/clstm.hpp"
#include "prorseg/parameters.hpp"
#include "prorseg/volume.hpp"

namespace prorseg {

struct UNetConfig {
  Index in_channels = 2;
  std::vector<Index> hidden{4, 8, 8};  // one CLSTM per stage, finest first
  std::vector<Index> decoder{8, 8};    // hidden.size() - 1 widths, finest first
  Index input_pool = 2;                // 1, 2 or 4

  void validate() const;
  Index feature_channels() const { return decoder.empty() ? hidden.front() : decoder.front(); }
};

struct ConvLayer {
  Tensor weight, bias;

  // He-uniform weights, zero bias.
  static ConvLayer create(Index out, Index in, Index kernel, std::mt19937_64& rng);
  Tensor operator()(const Tensor& x) const;
};

struct RecurrentUNet {
  UNetConfig config;
  std::vector<ClstmCell> encoder;
  std::vector<ConvLayer> decoder;

  static RecurrentUNet create(const UNetConfig& config, std::mt19937_64& rng);
  ParameterList parameters() const;
};

struct UNetState {
  std::vector<ClstmState> stages;
};

// Zero state for a full-resolution grid (pooling applied internally).
UNetState init_unet_state(const RecurrentUNet& net, const GridDims& full);

// One recurrent step. x is [1, in_channels, Z, Y, X] at full resolution; the
// result is [1, feature_channels, Z/p, Y/p, X/p] with p = input_pool.
Tensor unet_step(const RecurrentUNet& net, const Tensor& x, UNetState& state);

// Detach every stage state after `completed_steps` when it is a multiple of
// window (window <= 0 never truncates).
void truncate_unet_state(UNetState& state, int completed_steps, int window);

}  // namespace prorseg
