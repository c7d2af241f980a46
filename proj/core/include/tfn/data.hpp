#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tfn/eval.hpp"
#include "tfn/random.hpp"
#include "tfn/tensor.hpp"

namespace tfn {

// ---------------------------------------------------------------------------
// Labels

class LabelParseError : public std::invalid_argument {
 public:
  LabelParseError(int field, const std::string& message)
      : std::invalid_argument("field " + std::to_string(field) + ": " + message), field_(field) {}
  int field() const { return field_; }  // 1-based

 private:
  int field_;
};

inline const std::vector<std::string> kDefaultClasses{"Car", "Pedestrian"};

struct ParsedLabel {
  enum class Kind { object, dont_care, dropped };
  Kind kind = Kind::dropped;
  std::string type;
  GroundTruthObject object;  // valid for object and dont_care
  std::optional<double> score;  // 16th field, present in detection files
};

/// One KITTI label line (15 fields, optional trailing score). Types listed in
/// `classes` map to their index, DontCare to an ignore region, the rest are
/// dropped.
ParsedLabel parse_kitti_label(const std::string& line, const std::vector<std::string>& classes = kDefaultClasses);

// Objects and ignore regions of a whole label file; blank lines skipped.
std::vector<GroundTruthObject> parse_kitti_labels(const std::string& text,
                                                  const std::vector<std::string>& classes = kDefaultClasses);

std::string to_kitti_label(const GroundTruthObject& gt, const std::vector<std::string>& classes = kDefaultClasses);

// Result files: label lines plus a trailing score (1 when absent). Truncation
// and occlusion may be -1.
std::vector<Detection> parse_kitti_detections(const std::string& text,
                                              const std::vector<std::string>& classes = kDefaultClasses);
std::string to_kitti_detection(const Detection& detection, const std::vector<std::string>& classes = kDefaultClasses);

// ---------------------------------------------------------------------------
// Images: planar float RGB in [0, 1].

struct Image {
  std::int64_t channels = 3;
  std::int64_t height = 0;
  std::int64_t width = 0;
  std::vector<float> data;  // [C][H][W]

  float& at(std::int64_t c, std::int64_t y, std::int64_t x) { return data[(c * height + y) * width + x]; }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const { return data[(c * height + y) * width + x]; }
  static Image blank(std::int64_t height, std::int64_t width, float value = 0.0f);
};

Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
Image resize_bilinear(const Image& image, std::int64_t height, std::int64_t width);

// ---------------------------------------------------------------------------
// Sequences

struct SequenceSample {
  std::vector<Image> frames;       // oldest -> newest
  std::vector<double> timestamps;  // seconds
  std::vector<GroundTruthObject> labels;  // of the newest frame
  std::vector<std::string> source_ids;
  std::vector<std::uint64_t> transforms;  // per frame, fingerprint of the applied augmentation
};

/// Frame indices (oldest first, `anchor` last) whose timestamps are closest to
/// t(anchor) - k * delta_t for k = length-1 .. 0, searching frames at or before
/// the anchor; ties go to the newer frame. Targets before the stream start
/// clamp to frame 0, which then repeats.
std::vector<std::size_t> select_sequence(std::size_t anchor, const std::vector<double>& timestamps,
                                         double delta_t_ms, int length);

// One float-seconds or ISO-8601 ("YYYY-MM-DD HH:MM:SS.fff") entry per line.
std::vector<double> parse_timestamps(const std::string& text);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  bool enabled = true;
  double flip_prob = 0.5;
  double max_translate_px = 16;
  double brightness = 0.2;  // factors drawn from [1 - x, 1 + x]
  double contrast = 0.2;
  double saturation = 0.2;
  double hue = 0.05;        // hue rotation in turns, drawn from [-x, x]
  void validate() const;
};

struct AugmentParams {
  bool flip = false;
  double tx = 0, ty = 0;
  double brightness = 1, contrast = 1, saturation = 1, hue = 0;
  std::uint64_t fingerprint() const;
};

AugmentParams draw_augment(const AugmentConfig& cfg, Rng& rng);
// Applies one parameter draw identically to every frame; boxes follow the
// geometric part and objects whose centers leave the image are dropped.
SequenceSample apply_augment(SequenceSample sample, const AugmentParams& params);
SequenceSample augment(SequenceSample sample, const AugmentConfig& cfg, Rng& rng);

// Bilinear resize of every frame with boxes scaled to match.
SequenceSample resize_sample(SequenceSample sample, std::int64_t height, std::int64_t width);

// [N, C, T, H, W] tensor of the samples' frames.
Tensor to_tensor(const std::vector<const SequenceSample*>& batch);

// ---------------------------------------------------------------------------
// Ordering

/// Streaming shuffle: fill a buffer, emit a uniformly chosen element and put
/// the next input in its place. Every input is emitted exactly once.
class ShuffleStream {
 public:
  ShuffleStream(std::vector<std::size_t> items, std::size_t buffer_size, std::uint64_t seed);
  std::optional<std::size_t> next();
  std::vector<std::size_t> drain();

 private:
  std::vector<std::size_t> items_;
  std::vector<std::size_t> buffer_;
  std::size_t pos_ = 0;
  Rng rng_;
};

std::vector<std::size_t> shuffle_stream(const std::vector<std::size_t>& items, std::size_t buffer_size,
                                        std::uint64_t seed);

struct Split {
  std::vector<std::string> train;
  std::vector<std::string> val;
};

/// Seeded permutation split. Validation gets floor(n * (1 - ratio)) ids, the
/// remainder goes to training; 7481 ids at 0.8 give the 6000 / 1481 split.
Split split_dataset(const std::vector<std::string>& ids, double train_ratio, std::uint64_t seed);

// ---------------------------------------------------------------------------
// On-disk dataset
//
//   root/manifest.txt              one sequence directory per line
//   root/<seq>/timestamps.txt      one entry per frame
//   root/<seq>/image/NNNNNN.png
//   root/<seq>/label/NNNNNN.txt    KITTI labels; frames without a file are unlabeled

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SampleRef {
  std::size_t sequence = 0;
  std::size_t frame = 0;
  std::string id;  // "<seq>/<frame>"
};

class Dataset {
 public:
  // With `include_unlabeled`, frames lacking a label file become samples with
  // no objects (for inference); training datasets leave them out.
  static Dataset load(const std::filesystem::path& root, const std::vector<std::string>& classes = kDefaultClasses,
                      bool include_unlabeled = false);

  std::size_t size() const { return samples_.size(); }
  const std::vector<SampleRef>& samples() const { return samples_; }
  const std::vector<GroundTruthObject>& labels(std::size_t sample) const;
  std::vector<std::string> ids() const;
  std::size_t index_of(const std::string& id) const;

  // Frames at the temporal distance, newest = the labeled frame.
  SequenceSample sample(std::size_t index, double delta_t_ms, int length) const;

 private:
  struct Sequence {
    std::string name;
    std::filesystem::path dir;
    std::vector<double> timestamps;
    std::vector<std::filesystem::path> images;
  };
  const Image& frame(std::size_t sequence, std::size_t frame) const;

  std::vector<Sequence> sequences_;
  std::vector<SampleRef> samples_;
  std::vector<std::vector<GroundTruthObject>> labels_;
  mutable std::map<std::pair<std::size_t, std::size_t>, Image> cache_;
};

struct SynthOptions {
  int sequences = 10;
  int frames = 12;
  std::int64_t height = 80;
  std::int64_t width = 128;
  double fps = 10;
  int max_objects = 2;
  std::uint64_t seed = 1;
};

/// Writes a dataset of moving cars (wide boxes) and pedestrians (tall boxes)
/// over textured backgrounds. Objects never overlap and stay inside the frame;
/// every frame is labeled.
void generate_synthetic_dataset(const std::filesystem::path& root, const SynthOptions& options);

}  // namespace tfn
