#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tfn/ops.hpp"
#include "tfn/random.hpp"
#include "tfn/tensor.hpp"

namespace tfn {

struct ConvParams {
  Tensor weight;
  Tensor bias;
};

struct NormParams {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
};

struct ForwardContext {
  NormMode mode = NormMode::train;
  ConvAlgorithm algorithm = ConvAlgorithm::im2col;
};

// Shape of one convolution inside a block; parameter counting, initialization
// and the forward pass all derive from the same list.
struct ConvLayout {
  std::int64_t in_channels = 0;
  ConvSpec spec;
  Shape weight_shape() const {
    return {spec.out_channels, in_channels, spec.kernel[0], spec.kernel[1], spec.kernel[2]};
  }
  std::int64_t weight_count() const { return shape_numel(weight_shape()); }
  std::int64_t param_count() const { return weight_count() + spec.out_channels; }
};

ConvParams init_conv(const ConvLayout& layout, Rng& rng);
NormParams init_norm(std::int64_t channels);
Tensor apply_norm(const Tensor& x, NormParams& p, const ForwardContext& ctx);
Tensor apply_conv(const Tensor& x, const ConvParams& p, const ConvSpec& spec, const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Stem: three 3x3 conv-BN-ReLU stages (stride 2, 1, 1) and a 2x2 max pool,
// applied to every frame with one shared parameter set.

struct StemSpec {
  std::array<std::int64_t, 3> widths{64, 64, 128};
};

struct StemParams {
  std::array<ConvParams, 3> conv;
  std::array<NormParams, 3> norm;
};

inline constexpr std::int64_t kStemStride = 4;

std::vector<ConvLayout> stem_layers(std::int64_t in_channels, const StemSpec& spec);
StemParams init_stem(std::int64_t in_channels, const StemSpec& spec, Rng& rng);
Shape stem_output_shape(const Shape& input, const StemSpec& spec);
Tensor stem_forward(const Tensor& images, const StemSpec& spec, StemParams& params, const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Dense block: each layer is BN-ReLU-Conv(3x3, or 3x3x3 with temporal padding)
// producing `growth` channels that are concatenated onto its input.

struct DenseBlockSpec {
  std::int64_t num_layers = 1;
  std::int64_t growth = 48;
  bool temporal_kernels = false;
};

struct DenseBlockParams {
  std::vector<NormParams> norm;
  std::vector<ConvParams> conv;
};

std::vector<ConvLayout> dense_block_layers(std::int64_t in_channels, const DenseBlockSpec& spec);
DenseBlockParams init_dense_block(std::int64_t in_channels, const DenseBlockSpec& spec, Rng& rng);
Shape dense_block_output_shape(const Shape& input, const DenseBlockSpec& spec);
Tensor dense_block_forward(const Tensor& input, const DenseBlockSpec& spec, DenseBlockParams& params,
                           const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Transition: BN-ReLU-Conv 1x1x1 bottleneck, optionally followed by a 1x2x2
// max pool that halves H and W. T is never touched.

struct TransitionSpec {
  std::int64_t bottleneck_channels = 1;
  bool reduce_spatial = true;
};

struct TransitionParams {
  NormParams norm;
  ConvParams conv;
};

std::vector<ConvLayout> transition_layers(std::int64_t in_channels, const TransitionSpec& spec);
TransitionParams init_transition(std::int64_t in_channels, const TransitionSpec& spec, Rng& rng);
Shape transition_output_shape(const Shape& input, const TransitionSpec& spec);
Tensor transition_forward(const Tensor& input, const TransitionSpec& spec, TransitionParams& params,
                          const ForwardContext& ctx);

// ---------------------------------------------------------------------------
// Temporal fusion blocks. All of them shrink T without temporal padding and
// keep H and W through spatial padding.

enum class FusionKind { conv_t11, conv_t33, conv_t55, inception_v1, inception_v2, maxpool, meanpool };

inline constexpr std::array<FusionKind, 7> kAllFusionKinds = {
    FusionKind::conv_t11,     FusionKind::conv_t33, FusionKind::conv_t55, FusionKind::inception_v1,
    FusionKind::inception_v2, FusionKind::maxpool,  FusionKind::meanpool};

std::string to_string(FusionKind kind);
FusionKind parse_fusion_kind(const std::string& text);

struct FusionBlockSpec {
  FusionKind kind = FusionKind::conv_t11;
  std::int64_t temporal_extent = 2;
  std::int64_t temporal_stride = 2;
  std::int64_t pool_spatial_extent = 3;  // pooling kinds and inception pool branches
  std::int64_t out_channels = 0;         // conv and inception kinds
};

struct FusionParams {
  std::vector<ConvParams> conv;
};

struct ParamCount {
  std::int64_t weights = 0;
  std::int64_t biases = 0;
  std::int64_t norm = 0;
  std::int64_t total() const { return weights + biases + norm; }
};

bool is_pooling(FusionKind kind);

// Convolutions of a fusion block in forward order. Inception branches split
// out_channels equally with the remainder going to the 1x1 branch.
std::vector<ConvLayout> fusion_layers(std::int64_t in_channels, const FusionBlockSpec& spec);
std::vector<std::int64_t> inception_branch_widths(std::int64_t out_channels);
ParamCount fusion_param_count(const FusionBlockSpec& spec, std::int64_t in_channels);
FusionParams init_fusion(std::int64_t in_channels, const FusionBlockSpec& spec, Rng& rng);
Shape fusion_output_shape(const Shape& input, const FusionBlockSpec& spec);
Tensor fusion_forward(const Tensor& input, const FusionBlockSpec& spec, FusionParams& params,
                      const ForwardContext& ctx);

ParamCount count_layers(const std::vector<ConvLayout>& layers);

// Multiply-accumulate count of a convolution layer producing `out_shape`.
std::int64_t conv_macs(const ConvLayout& layer, const Shape& out_shape);

}  // namespace tfn
