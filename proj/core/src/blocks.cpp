#include "tfn/blocks.hpp"

#include <stdexcept>

namespace tfn {
namespace {

ConvLayout layout(std::int64_t in, std::int64_t out, Extent3 kernel, Extent3 stride = {1, 1, 1}) {
  ConvLayout l;
  l.in_channels = in;
  l.spec.kernel = kernel;
  l.spec.stride = stride;
  // Temporal padding only where asked for via the kernel's t-extent being odd
  // and greater than one; callers that must not pad T use t-extent reduction.
  l.spec.padding = {0, (kernel[1] - 1) / 2, (kernel[2] - 1) / 2};
  l.spec.out_channels = out;
  return l;
}

void require_rank5(const Shape& s, const char* block) {
  if (s.size() != 5) throw ShapeError(std::string(block) + " expects [N,C,T,H,W], got " + to_string(s));
}

PoolSpec fusion_pool(const FusionBlockSpec& spec, PoolMode mode) {
  const std::int64_t p = spec.pool_spatial_extent;
  return PoolSpec{mode, {spec.temporal_extent, p, p}, {spec.temporal_stride, 1, 1}, {0, (p - 1) / 2, (p - 1) / 2}};
}

}  // namespace

ConvParams init_conv(const ConvLayout& layout, Rng& rng) {
  return {he_normal(layout.weight_shape(), rng), Tensor::zeros({layout.spec.out_channels}, true)};
}

NormParams init_norm(std::int64_t channels) {
  return {Tensor::full({channels}, 1.0, true), Tensor::zeros({channels}, true), Tensor::zeros({channels}),
          Tensor::full({channels}, 1.0)};
}

Tensor apply_norm(const Tensor& x, NormParams& p, const ForwardContext& ctx) {
  BatchNormOptions opts;
  opts.mode = ctx.mode;
  return batchnorm(x, p.gamma, p.beta, p.running_mean, p.running_var, opts);
}

Tensor apply_conv(const Tensor& x, const ConvParams& p, const ConvSpec& spec, const ForwardContext& ctx) {
  return conv3d(x, p.weight, p.bias, spec, ctx.algorithm);
}

ParamCount count_layers(const std::vector<ConvLayout>& layers) {
  ParamCount c;
  for (const auto& l : layers) {
    c.weights += l.weight_count();
    c.biases += l.spec.out_channels;
  }
  return c;
}

std::int64_t conv_macs(const ConvLayout& layer, const Shape& out_shape) {
  std::int64_t positions = 1;
  for (std::size_t a = 2; a < out_shape.size(); ++a) positions *= out_shape[a];
  return out_shape[0] * layer.weight_count() * positions;
}

// ---------------------------------------------------------------------------

std::vector<ConvLayout> stem_layers(std::int64_t in_channels, const StemSpec& spec) {
  return {layout(in_channels, spec.widths[0], {1, 3, 3}, {1, 2, 2}), layout(spec.widths[0], spec.widths[1], {1, 3, 3}),
          layout(spec.widths[1], spec.widths[2], {1, 3, 3})};
}

StemParams init_stem(std::int64_t in_channels, const StemSpec& spec, Rng& rng) {
  StemParams p;
  const auto layers = stem_layers(in_channels, spec);
  for (std::size_t i = 0; i < 3; ++i) {
    p.conv[i] = init_conv(layers[i], rng);
    p.norm[i] = init_norm(layers[i].spec.out_channels);
  }
  return p;
}

Shape stem_output_shape(const Shape& input, const StemSpec& spec) {
  require_rank5(input, "stem");
  Shape s = input;
  for (const auto& l : stem_layers(input[1], spec)) s = conv3d_output_shape(s, l.spec);
  s[3] /= 2;
  s[4] /= 2;
  if (s[3] < 1 || s[4] < 1) throw ShapeError("stem input too small: " + to_string(input));
  return s;
}

Tensor stem_forward(const Tensor& images, const StemSpec& spec, StemParams& params, const ForwardContext& ctx) {
  require_rank5(images.shape(), "stem");
  const auto layers = stem_layers(images.dim(1), spec);
  Tensor x = images;
  for (std::size_t i = 0; i < 3; ++i) {
    x = relu(apply_norm(apply_conv(x, params.conv[i], layers[i].spec, ctx), params.norm[i], ctx));
  }
  return pool3d(x, PoolSpec{PoolMode::max, {1, 2, 2}, {1, 2, 2}, {0, 0, 0}});
}

// ---------------------------------------------------------------------------

std::vector<ConvLayout> dense_block_layers(std::int64_t in_channels, const DenseBlockSpec& spec) {
  if (spec.num_layers <= 0 || spec.growth <= 0) throw std::invalid_argument("dense block needs positive layers and growth");
  std::vector<ConvLayout> layers;
  for (std::int64_t i = 0; i < spec.num_layers; ++i) {
    auto l = layout(in_channels + i * spec.growth, spec.growth, {spec.temporal_kernels ? 3 : 1, 3, 3});
    if (spec.temporal_kernels) l.spec.padding[0] = 1;
    layers.push_back(l);
  }
  return layers;
}

DenseBlockParams init_dense_block(std::int64_t in_channels, const DenseBlockSpec& spec, Rng& rng) {
  DenseBlockParams p;
  for (const auto& l : dense_block_layers(in_channels, spec)) {
    p.norm.push_back(init_norm(l.in_channels));
    p.conv.push_back(init_conv(l, rng));
  }
  return p;
}

Shape dense_block_output_shape(const Shape& input, const DenseBlockSpec& spec) {
  require_rank5(input, "dense block");
  Shape s = input;
  for (const auto& l : dense_block_layers(input[1], spec)) {
    const Shape conv_out = conv3d_output_shape(s, l.spec);
    s[1] += conv_out[1];
  }
  return s;
}

Tensor dense_block_forward(const Tensor& input, const DenseBlockSpec& spec, DenseBlockParams& params,
                           const ForwardContext& ctx) {
  require_rank5(input.shape(), "dense block");
  const auto layers = dense_block_layers(input.dim(1), spec);
  if (params.conv.size() != layers.size()) throw ShapeError("dense block parameter count mismatch");
  Tensor x = input;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    Tensor fresh = apply_conv(relu(apply_norm(x, params.norm[i], ctx)), params.conv[i], layers[i].spec, ctx);
    x = concat_channels(x, fresh);
  }
  return x;
}

// ---------------------------------------------------------------------------

std::vector<ConvLayout> transition_layers(std::int64_t in_channels, const TransitionSpec& spec) {
  if (spec.bottleneck_channels <= 0) throw std::invalid_argument("transition bottleneck must be positive");
  return {layout(in_channels, spec.bottleneck_channels, {1, 1, 1})};
}

TransitionParams init_transition(std::int64_t in_channels, const TransitionSpec& spec, Rng& rng) {
  return {init_norm(in_channels), init_conv(transition_layers(in_channels, spec)[0], rng)};
}

Shape transition_output_shape(const Shape& input, const TransitionSpec& spec) {
  require_rank5(input, "transition");
  Shape s = input;
  s[1] = spec.bottleneck_channels;
  if (spec.reduce_spatial) {
    s[3] /= 2;
    s[4] /= 2;
    if (s[3] < 1 || s[4] < 1) throw ShapeError("transition cannot halve spatial size of " + to_string(input));
  }
  return s;
}

Tensor transition_forward(const Tensor& input, const TransitionSpec& spec, TransitionParams& params,
                          const ForwardContext& ctx) {
  require_rank5(input.shape(), "transition");
  const auto layer = transition_layers(input.dim(1), spec)[0];
  Tensor x = apply_conv(relu(apply_norm(input, params.norm, ctx)), params.conv, layer.spec, ctx);
  if (spec.reduce_spatial) x = pool3d(x, PoolSpec{PoolMode::max, {1, 2, 2}, {1, 2, 2}, {0, 0, 0}});
  return x;
}

// ---------------------------------------------------------------------------

std::string to_string(FusionKind kind) {
  switch (kind) {
    case FusionKind::conv_t11: return "t11";
    case FusionKind::conv_t33: return "t33";
    case FusionKind::conv_t55: return "t55";
    case FusionKind::inception_v1: return "incv1";
    case FusionKind::inception_v2: return "incv2";
    case FusionKind::maxpool: return "maxpool";
    case FusionKind::meanpool: return "meanpool";
  }
  return "?";
}

FusionKind parse_fusion_kind(const std::string& text) {
  for (auto k : kAllFusionKinds) {
    if (to_string(k) == text) return k;
  }
  if (text == "conv_t11") return FusionKind::conv_t11;
  if (text == "conv_t33") return FusionKind::conv_t33;
  if (text == "conv_t55") return FusionKind::conv_t55;
  if (text == "inception_v1") return FusionKind::inception_v1;
  if (text == "inception_v2") return FusionKind::inception_v2;
  throw std::invalid_argument("unknown fusion kind '" + text + "'");
}

bool is_pooling(FusionKind kind) { return kind == FusionKind::maxpool || kind == FusionKind::meanpool; }

std::vector<std::int64_t> inception_branch_widths(std::int64_t out_channels) {
  const std::int64_t b = out_channels / 4;
  if (b < 1) throw std::invalid_argument("inception blocks need at least 4 output channels");
  return {out_channels - 3 * b, b, b, b};
}

std::vector<ConvLayout> fusion_layers(std::int64_t in_channels, const FusionBlockSpec& spec) {
  if (spec.temporal_extent <= 0 || spec.temporal_stride <= 0) {
    throw std::invalid_argument("fusion temporal extent and stride must be positive");
  }
  const std::int64_t te = spec.temporal_extent;
  const Extent3 reduce{spec.temporal_stride, 1, 1};
  const std::int64_t out = spec.out_channels > 0 ? spec.out_channels : in_channels;
  switch (spec.kind) {
    case FusionKind::conv_t11: return {layout(in_channels, out, {te, 1, 1}, reduce)};
    case FusionKind::conv_t33: return {layout(in_channels, out, {te, 3, 3}, reduce)};
    case FusionKind::conv_t55: return {layout(in_channels, out, {te, 5, 5}, reduce)};
    case FusionKind::inception_v1: {
      const auto w = inception_branch_widths(out);
      return {layout(in_channels, w[0], {te, 1, 1}, reduce), layout(in_channels, w[1], {te, 3, 3}, reduce),
              layout(in_channels, w[2], {te, 5, 5}, reduce), layout(in_channels, w[3], {1, 1, 1})};
    }
    case FusionKind::inception_v2: {
      const auto w = inception_branch_widths(out);
      return {layout(in_channels, w[0], {te, 1, 1}, reduce),
              layout(in_channels, w[1], {te, 1, 3}, reduce),
              layout(w[1], w[1], {1, 3, 1}),
              layout(in_channels, w[2], {te, 3, 3}, reduce),
              layout(w[2], w[2], {1, 3, 3}),
              layout(in_channels, w[3], {1, 1, 1})};
    }
    case FusionKind::maxpool:
    case FusionKind::meanpool: return {};
  }
  return {};
}

ParamCount fusion_param_count(const FusionBlockSpec& spec, std::int64_t in_channels) {
  return count_layers(fusion_layers(in_channels, spec));
}

FusionParams init_fusion(std::int64_t in_channels, const FusionBlockSpec& spec, Rng& rng) {
  FusionParams p;
  for (const auto& l : fusion_layers(in_channels, spec)) p.conv.push_back(init_conv(l, rng));
  return p;
}

Shape fusion_output_shape(const Shape& input, const FusionBlockSpec& spec) {
  require_rank5(input, "fusion block");
  const std::int64_t T = input[2];
  if (spec.temporal_extent > T) {
    throw ShapeError("fusion temporal extent " + std::to_string(spec.temporal_extent) + " exceeds input T = " +
                     std::to_string(T));
  }
  if (spec.pool_spatial_extent <= 0 || spec.pool_spatial_extent % 2 == 0) {
    throw ShapeError("fusion pool spatial extent must be odd and positive");
  }
  Shape s = input;
  s[2] = conv_output_size(T, spec.temporal_extent, spec.temporal_stride, 0);
  if (T > 1 && s[2] >= T) {
    throw ShapeError("fusion block must reduce T (input T = " + std::to_string(T) + ")");
  }
  if (!is_pooling(spec.kind)) s[1] = spec.out_channels > 0 ? spec.out_channels : input[1];
  return s;
}

Tensor fusion_forward(const Tensor& input, const FusionBlockSpec& spec, FusionParams& params,
                      const ForwardContext& ctx) {
  (void)fusion_output_shape(input.shape(), spec);
  const auto layers = fusion_layers(input.dim(1), spec);
  if (params.conv.size() != layers.size()) throw ShapeError("fusion block parameter count mismatch");
  auto conv = [&](const Tensor& x, std::size_t i) { return relu(apply_conv(x, params.conv[i], layers[i].spec, ctx)); };
  switch (spec.kind) {
    case FusionKind::maxpool: return pool3d(input, fusion_pool(spec, PoolMode::max));
    case FusionKind::meanpool: return pool3d(input, fusion_pool(spec, PoolMode::mean));
    case FusionKind::conv_t11:
    case FusionKind::conv_t33:
    case FusionKind::conv_t55: return conv(input, 0);
    case FusionKind::inception_v1: {
      const Tensor parts[4] = {conv(input, 0), conv(input, 1), conv(input, 2),
                               conv(pool3d(input, fusion_pool(spec, PoolMode::max)), 3)};
      return concat_channels(parts);
    }
    case FusionKind::inception_v2: {
      const Tensor parts[4] = {conv(input, 0), conv(conv(input, 1), 2), conv(conv(input, 3), 4),
                               conv(pool3d(input, fusion_pool(spec, PoolMode::max)), 5)};
      return concat_channels(parts);
    }
  }
  throw std::logic_error("unhandled fusion kind");
}

}  // namespace tfn
