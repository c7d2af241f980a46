#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "tfn/anchors.hpp"
#include "tfn/blocks.hpp"
#include "tfn/config.hpp"

namespace tfn {

// esf / lsf place temporal reductions early / late in the encoder; single is
// the non-temporal baseline (one frame, no fusion blocks, 2D dense blocks).
enum class Arch { esf, lsf, single };

std::string to_string(Arch arch);
Arch parse_arch(const std::string& text);

// Position 0 is directly after the stem; position i >= 1 is after dense
// block i and its transition.
struct FusionPlacement {
  int position = 0;
  std::int64_t extent = 2;
  std::int64_t stride = 2;
  friend bool operator==(const FusionPlacement&, const FusionPlacement&) = default;
};

std::vector<FusionPlacement> fusion_schedule(Arch arch, int sequence_length, int num_stages = 4);

// Per-anchor channel layout of the head: t_x, t_y, t_w, t_h, t_conf, class
// logits, then `per_anchor - 5 - classes` unused channels (only when the head
// width is forced, e.g. to 72).
struct HeadLayout {
  std::int64_t anchors = 8;
  std::int64_t classes = 2;
  std::int64_t per_anchor = 7;
  std::int64_t channels() const { return anchors * per_anchor; }
};

struct ModelConfig {
  Arch arch = Arch::lsf;
  int sequence_length = 4;
  FusionKind fusion_kind = FusionKind::maxpool;
  bool temporal_padding = true;
  std::int64_t input_height = 288;
  std::int64_t input_width = 512;
  std::int64_t input_channels = 3;
  AnchorSet anchors = AnchorSet::placeholder(8);
  std::int64_t num_classes = 2;
  StemSpec stem;
  std::int64_t growth = 48;
  std::vector<std::int64_t> dense_depths{6, 8, 8, 8};
  double depth_multiplier = 0.5;
  std::vector<std::int64_t> transition_widths{176, 176, 176, 176};
  std::int64_t reducing_transitions = 2;  // leading transitions that halve H and W
  std::int64_t fusion_channels = 0;       // 0: keep the incoming width
  std::int64_t pool_spatial_extent = 3;
  std::int64_t head_filters = 0;          // 0: anchors * (5 + classes)

  std::vector<std::int64_t> scaled_depths() const;
  std::int64_t total_stride() const;
  HeadLayout head_layout() const;
  // Throws ConfigError naming the offending key.
  void validate() const;

  friend bool operator==(const ModelConfig& a, const ModelConfig& b);
};

std::vector<std::string> model_config_keys();
void write_model_config(const ModelConfig& config, KeyValues& out);
// Reads the model keys of `kv` over the defaults; other keys are ignored.
ModelConfig read_model_config(const KeyValues& kv);

std::string format_anchors(const AnchorSet& anchors);
AnchorSet parse_anchors(const std::string& text);

enum class BlockKind { stem, dense, transition, fusion, squeeze, head };
std::string to_string(BlockKind kind);

struct BlockInfo {
  BlockKind kind = BlockKind::stem;
  std::string name;
  int stage = 0;
  Shape input_shape;
  Shape output_shape;
  std::vector<ConvLayout> convs;
  std::vector<Shape> conv_outputs;  // output shape of each entry of convs
  std::int64_t norm_channels = 0;   // channels normalized (gamma + beta each)
  std::int64_t peak_elements = 0;
  DenseBlockSpec dense;
  TransitionSpec transition;
  FusionBlockSpec fusion;

  std::int64_t params() const;
  std::int64_t macs() const;
};

struct ModelGraph {
  ModelConfig config;
  std::vector<BlockInfo> blocks;
  std::vector<std::size_t> fusion_indices;
  std::int64_t grid_h = 0;
  std::int64_t grid_w = 0;
  HeadLayout head;

  std::int64_t box_count() const { return grid_h * grid_w * head.anchors; }
  Shape input_shape(std::int64_t batch) const;
};

/// Validates the config and annotates every block with its shapes for a
/// batch of `batch` sequences. Throws ShapeError naming the offending block.
ModelGraph build_model(const ModelConfig& config, std::int64_t batch = 1);

struct ModelParams {
  StemParams stem;
  std::vector<DenseBlockParams> dense;
  std::vector<TransitionParams> transition;
  std::vector<FusionParams> fusion;
  ConvParams head;

  // Every tensor of the model state (running statistics included) under a
  // stable name; the handles alias the model's storage.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  std::vector<Tensor> trainable() const;
};

ModelParams init_params(const ModelGraph& graph, std::uint64_t seed);

/// [N,C,T,H,W] sequences -> raw head map [N, head.channels(), grid_h, grid_w].
Tensor forward(const ModelGraph& graph, ModelParams& params, const Tensor& input, const ForwardContext& ctx);

Tensor head_forward(const Tensor& features, const ConvParams& head, const HeadLayout& layout,
                    ConvAlgorithm algorithm = ConvAlgorithm::im2col);

struct ProfileRow {
  std::string block;
  std::int64_t params = 0;
  std::int64_t macs = 0;
  std::int64_t peak_elements = 0;
};

struct ProfileReport {
  std::vector<ProfileRow> rows;
  std::int64_t params_total = 0;
  std::int64_t macs_total = 0;
  std::int64_t peak_feature_map_elements = 0;
};

// MACs of convolutions only; peak memory as the largest input + output pair
// live at any step of sequential execution.
ProfileReport profile(const ModelGraph& graph);
std::string profile_csv(const ProfileReport& report);

}  // namespace tfn
