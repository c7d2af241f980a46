#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tfn/config.hpp"
#include "tfn/data.hpp"
#include "tfn/detection.hpp"
#include "tfn/eval.hpp"
#include "tfn/model.hpp"

namespace tfn {

// Continuous step decay: lr0 * factor^(epoch / decay_epochs).
double lr_at(double epoch, double lr0 = 0.001, double decay_epochs = 50, double factor = 0.25);

// ---------------------------------------------------------------------------
// Targets

/// Per (image, anchor, cell) training targets, laid out [N][A][Hg][Wg].
/// tx/ty are the in-cell offsets compared against sigmoid(t_x), sigmoid(t_y);
/// tw/th are log ratios to the anchor.
struct TargetMap {
  HeadLayout layout;
  std::int64_t batch = 0, grid_h = 0, grid_w = 0;
  std::vector<std::uint8_t> positive;
  std::vector<std::uint8_t> ignore;
  std::vector<double> tx, ty, tw, th;
  std::vector<int> cls;
  int collisions = 0;  // GTs that lost their first-choice anchor
  int dropped = 0;     // GTs with no free anchor left in their cell
  int skipped = 0;     // GTs whose center lies outside the image

  TargetMap() = default;
  TargetMap(std::int64_t batch, const HeadLayout& layout, std::int64_t grid_h, std::int64_t grid_w);
  std::size_t index(std::int64_t n, std::int64_t a, std::int64_t gy, std::int64_t gx) const {
    return static_cast<std::size_t>(((n * layout.anchors + a) * grid_h + gy) * grid_w + gx);
  }
  std::int64_t positives() const;
};

struct AssignOptions {
  double stride_px = 16;
  double ignore_iou = 0.6;
  double image_width = 0;   // centers outside [0, W) x [0, H) are skipped
  double image_height = 0;
};

/// Fills image `n` of `map`. GTs are taken by descending area (ties by input
/// order); each goes to the cell holding its center and the free anchor of
/// highest shape IoU. Other anchors of that cell with shape IoU above
/// `ignore_iou` are masked from the objectness penalty. DontCare regions are
/// not assigned.
void assign_targets(const std::vector<GroundTruthObject>& gts, const AnchorSet& anchors, const AssignOptions& options,
                    TargetMap& map, std::int64_t n = 0);

// ---------------------------------------------------------------------------
// Loss

struct LossWeights {
  double coord = 5.0;
  double obj = 1.0;
  double noobj = 0.5;
  double cls = 1.0;
};

struct LossBreakdown {
  double coord = 0, obj = 0, noobj = 0, cls = 0;
  double total() const { return coord + obj + noobj + cls; }
};

/// Sum over the batch of: squared error on sigmoid(t_x), sigmoid(t_y), t_w, t_h
/// at positives (weight coord); objectness BCE at positives (obj) and at
/// non-ignored negatives (noobj); softmax cross-entropy at positives (cls).
/// Scalar result with an analytic gradient into `head`.
Tensor detection_loss(const Tensor& head, const TargetMap& targets, const LossWeights& weights = {},
                      LossBreakdown* breakdown = nullptr);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 0;  // global gradient norm cap; 0 disables
};

struct OptimizerState {
  std::vector<std::vector<Real>> m, v;
  std::int64_t step = 0;
  std::int64_t rejected = 0;
};

/// One bias-corrected Adam update from the gradients held by `params`.
/// A non-finite gradient rejects the whole step: nothing changes except the
/// `rejected` counter, and false is returned.
bool adam_step(const std::vector<Tensor>& params, OptimizerState& state, double lr, const AdamOptions& options = {});

// ---------------------------------------------------------------------------
// Run configuration

struct TrainConfig {
  int epochs = 150;
  int batch = 8;
  double lr0 = 0.001;
  double lr_decay_epochs = 50;
  double lr_decay_factor = 0.25;
  AdamOptions adam;
  LossWeights loss;
  double ignore_iou = 0.6;
  std::size_t shuffle_buffer = 50;
  double train_ratio = 0.8;
  std::uint64_t seed = 0;
  std::int64_t max_iterations = 0;  // 0: run all epochs
  int eval_every = 1;               // epochs between evaluations; 0 disables
  std::int64_t eval_every_iterations = 0;
  bool eval_on_train = false;
  bool stop_at_perfect = false;     // end once every class reaches AP(easy) = 1
  AugmentConfig augment;
};

struct DataConfig {
  std::filesystem::path root;
  std::vector<std::string> classes = kDefaultClasses;
  double delta_t_ms = 400;
};

struct InferenceConfig {
  double conf_threshold = 0.01;
  double nms_iou = 0.45;
  bool sigmoid_classes = false;
  std::vector<double> eval_iou{0.7, 0.5};
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  InferenceConfig inference;
  void validate() const;
};

std::vector<std::string> run_config_keys();
// Unknown keys raise ConfigError.
RunConfig read_run_config(const KeyValues& kv);
KeyValues write_run_config(const RunConfig& config);

// ---------------------------------------------------------------------------
// Inference

// Frames resized to the model input, boxes scaled along.
SequenceSample model_sample(const Dataset& data, std::size_t index, const RunConfig& config);

/// Decoded, suppressed detections for every image of a batch, in model-input
/// pixels.
std::vector<std::vector<Detection>> detect(const ModelGraph& graph, ModelParams& params, const Tensor& input,
                                           const InferenceConfig& options);

EvalResult evaluate_samples(const ModelGraph& graph, ModelParams& params, const Dataset& data,
                            const std::vector<std::size_t>& indices, const RunConfig& config);

// Mean AP over classes for one bucket.
double mean_ap(const EvalResult& result, Difficulty bucket);

// ---------------------------------------------------------------------------
// Training loop

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  RunConfig config;
  std::int64_t epoch = 0;           // epoch in progress
  std::int64_t batch_in_epoch = 0;  // batches of that epoch already done
  std::int64_t iteration = 0;
  std::vector<std::pair<std::string, Tensor>> tensors;
  OptimizerState optimizer;
};

// "TFNC" binary; written to a temporary file and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into `params` by name; shapes must match.
void restore_params(const Checkpoint& checkpoint, ModelParams& params);

struct MetricsRow {
  std::int64_t iteration = 0;
  double epoch = 0;
  double lr = 0;
  LossBreakdown loss;
  bool evaluated = false;
  double ap[3] = {0, 0, 0};  // mean over classes, easy / moderate / hard
};

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRow& row);

struct TrainResult {
  std::int64_t iterations = 0;
  std::int64_t epochs_done = 0;
  std::vector<MetricsRow> metrics;
  EvalResult last_eval;
  bool evaluated = false;
  std::int64_t rejected_steps = 0;
  std::int64_t collisions = 0;
  ModelParams params;  // final state
};

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoint.tfnc and metrics.csv; empty: keep in memory
  std::filesystem::path resume;   // checkpoint to continue from
  std::function<void(const MetricsRow&)> on_row;
};

/// Shuffle-buffer order per epoch, one augmentation draw per sample derived
/// from (seed, epoch, position), Adam with the decayed learning rate.
/// Deterministic for a fixed seed and thread count, also across resumes.
TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options = {});

// Train / validation sample indices of `data` under the configured split.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const Dataset& data,
                                                                            const TrainConfig& config);

}  // namespace tfn
