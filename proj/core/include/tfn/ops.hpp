#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "tfn/random.hpp"
#include "tfn/tensor.hpp"

namespace tfn {

using Extent3 = std::array<std::int64_t, 3>;  // (t, h, w)

struct ConvSpec {
  Extent3 kernel{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
  std::int64_t out_channels = 1;
};

enum class ConvAlgorithm { im2col, direct };

// floor((in + 2*pad - kernel) / stride) + 1, or a non-positive value when the
// window does not fit.
std::int64_t conv_output_size(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                              std::int64_t pad);

// Output shape of a convolution on an [N,C,T,H,W] input; throws naming the axis
// on mismatch or non-positive output.
Shape conv3d_output_shape(const Shape& input, const ConvSpec& spec);

/// 3D convolution on [N,C,T,H,W] with weights [Cout,Cin,kt,kh,kw] and an
/// optional bias [Cout] (pass an undefined tensor for none).
Tensor conv3d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec, ConvAlgorithm algorithm = ConvAlgorithm::im2col);

/// 2D convolution on [N,C,H,W] with weights [Cout,Cin,kh,kw]; the temporal
/// components of spec must be kernel 1, stride 1, padding 0.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              const ConvSpec& spec, ConvAlgorithm algorithm = ConvAlgorithm::im2col);

enum class PoolMode { max, mean };

struct PoolSpec {
  PoolMode mode = PoolMode::max;
  Extent3 extent{1, 1, 1};
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
};

// Windowed max/mean over [N,C,T,H,W]. Padded positions never contribute: max
// ignores them and mean divides by the number of in-bounds elements.
Tensor pool3d(const Tensor& input, const PoolSpec& spec);

enum class NormMode { train, infer };

struct BatchNormOptions {
  Real eps = Real(1e-5);
  Real momentum = Real(0.1);
  NormMode mode = NormMode::train;
};

/// Per-channel normalization over every axis except axis 1. In train mode the
/// batch moments are used and the running statistics (plain leaves, updated in
/// place) move towards them; infer mode reads the running statistics.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor& running_mean, Tensor& running_var, const BatchNormOptions& options);

Tensor relu(const Tensor& input);
Tensor concat_channels(std::span<const Tensor> parts);
Tensor concat_channels(const Tensor& a, const Tensor& b);
// [N,C,1,H,W] -> [N,C,H,W]
Tensor squeeze_time(const Tensor& input);
// [N,C,H,W] -> [N,C,1,H,W]
Tensor expand_time(const Tensor& input);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& input, Real factor);
Tensor sum(const Tensor& input);

// Weighted sum of elements, sum(input * weights) with constant weights.
Tensor dot(const Tensor& input, std::span<const Real> weights);

// He (fan-in) normal initialization for a convolution weight of the given shape.
Tensor he_normal(const Shape& weight_shape, Rng& rng);

}  // namespace tfn
