#pragma once

// 3D convolutional LSTM cell.
//
//   f = sigmoid(W_xf * x + W_hf * h + b_f)
//   i = sigmoid(W_xi * x + W_hi * h + b_i)
//   g = tanh   (W_xc * x + W_hc * h + b_c)     (candidate memory)
//   o = sigmoid(W_xo * x + W_ho * h + b_o)
//   c' = f . c + i . g
//   h' = o . tanh(c')
//
// All eight kernels are k=3, pad=1, stride=1 so spatial dims are preserved.

#include <random>
#include <utility>

#include "prorseg/parameters.hpp"
#include "prorseg/tensor.hpp"

namespace prorseg {

struct ClstmCell {
  Index in_channels = 0;
  Index hidden_channels = 0;

  Tensor w_xf, w_hf, w_xi, w_hi, w_xc, w_hc, w_xo, w_ho;
  Tensor b_f, b_i, b_c, b_o;

  // Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) kernels; forget bias starts at 1.
  static ClstmCell create(Index in_channels, Index hidden_channels, std::mt19937_64& rng);
  // All parameters zero.
  static ClstmCell zeros(Index in_channels, Index hidden_channels);

  ParameterList parameters() const;
};

struct ClstmState {
  Tensor h;
  Tensor c;
};

struct ClstmGates {
  Tensor forget, input, candidate, output;
};

// h = c = 0 with shape [1, hidden, D, H, W].
ClstmState init_state(Index hidden_channels, const Shape& spatial);

// x: [1, in_channels, D, H, W]. Returns the new hidden state and the full
// state; the two h tensors are the same object.
std::pair<Tensor, ClstmState> clstm_step(const ClstmCell& cell, const Tensor& x,
                                         const ClstmState& state, ClstmGates* gates = nullptr);

ClstmState detach(const ClstmState& state);

// Truncated backpropagation through time: detach after every `window`
// completed steps. window <= 0 never truncates.
ClstmState truncate_state(const ClstmState& state, int completed_steps, int window);

}  // namespace prorseg
