#pragma once

// Differentiable tensor ops. Volumetric ops use NCDHW layout (rank 5),
// last axis fastest. Every op checks its output for NaN/Inf.

#include <initializer_list>
#include <vector>

#include "prorseg/tensor.hpp"

namespace prorseg {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double factor);
Tensor add_scalar(const Tensor& x, double value);
Tensor square(const Tensor& x);
// log(x + eps)
Tensor log_eps(const Tensor& x, double eps);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

enum class Activation { sigmoid, tanh, relu, softmax_channels };

// softmax_channels normalizes over axis 1.
Tensor activation(const Tensor& x, Activation kind);
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }
inline Tensor tanh(const Tensor& x) { return activation(x, Activation::tanh); }
inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor softmax_channels(const Tensor& x) { return activation(x, Activation::softmax_channels); }

// Cross-correlation. input [N,IC,D,H,W], weight [OC,IC,k,k,k], bias [OC] (may be
// undefined). Odd k only.
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias, Index stride = 1,
              Index pad = 0);

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
inline Tensor concat_channels(const std::vector<Tensor>& parts) { return concat(parts, 1); }
Tensor slice(const Tensor& x, std::size_t axis, Index begin, Index end);
Tensor reshape(const Tensor& x, Shape shape);

Tensor maxpool3d(const Tensor& x, Index k = 2);
Tensor avgpool3d(const Tensor& x, Index k = 2);
// Half-pixel-centred trilinear upsampling with edge clamping.
Tensor upsample_trilinear(const Tensor& x, Index factor = 2);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// [N,C,...] -> [N,C]
Tensor sum_spatial(const Tensor& x);

// Sum over a (2r+1)^3 window of the last three axes with zero padding.
Tensor box_sum3d(const Tensor& x, Index radius);
// x[i+1] - x[i] along one axis; that axis shrinks by one.
Tensor forward_diff(const Tensor& x, std::size_t axis);

}  // namespace prorseg
