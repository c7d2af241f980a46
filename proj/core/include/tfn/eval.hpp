#pragma once

#include <span>
#include <string>
#include <vector>

#include "tfn/anchors.hpp"
#include "tfn/detection.hpp"

namespace tfn {

struct GroundTruthObject {
  Box2D box;
  int class_id = -1;
  int occlusion = 0;        // 0 visible .. 3 unknown
  double truncation = 0.0;  // [0, 1]
  bool dont_care = false;   // ignore region: absorbs detections, never counted
  double height_px() const { return box.h; }
};

enum class Difficulty { easy = 0, moderate = 1, hard = 2, ignored = 3 };
inline constexpr Difficulty kBuckets[] = {Difficulty::easy, Difficulty::moderate, Difficulty::hard};

std::string to_string(Difficulty d);

// Strictest bucket the object qualifies for (easy < moderate < hard), or
// ignored when it meets none.
Difficulty difficulty_of(const GroundTruthObject& gt);

// Buckets are cumulative: an easy object also counts in moderate and hard.
bool in_bucket(const GroundTruthObject& gt, Difficulty bucket);

enum class MatchFlag { tp, fp, discarded };

struct MatchResult {
  std::vector<MatchFlag> flags;  // per detection, input order
  int tp = 0;
  int fp = 0;
  int fn = 0;  // unmatched ground truth inside the bucket
};

/// Greedy matching for one image, one class and one difficulty bucket.
/// `ranked` must be sorted by confidence descending; detections of other
/// classes are reported as discarded.
///
/// Each detection takes the highest-IoU unmatched GT of the class inside the
/// bucket with IoU > threshold (TP). Failing that, an unmatched GT of the class
/// outside the bucket with IoU > threshold absorbs it, as does any DontCare
/// region covering more than half of it (discarded). Everything else is FP.
MatchResult match(std::span<const Detection> ranked, std::span<const GroundTruthObject> gts, int class_id,
                  Difficulty bucket, double iou_threshold);

/// Mean over r in {0, 0.01, ..., 1} of the best precision at recall >= r.
/// `ranked` holds true for TP and false for FP; 0 when total_gt == 0.
double average_precision_101(const std::vector<bool>& ranked, int total_gt);

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

struct ImageGroundTruth {
  std::string image_id;
  std::vector<GroundTruthObject> objects;
};

struct EvalEntry {
  int class_id = 0;
  Difficulty bucket = Difficulty::easy;
  double ap = 0;
  int tp = 0, fp = 0, fn = 0, num_gt = 0;
  std::vector<double> precision;  // after each ranked, non-discarded detection
  std::vector<double> recall;
};

struct EvalResult {
  std::vector<EvalEntry> entries;  // class-major, buckets easy/moderate/hard
  const EvalEntry& at(int class_id, Difficulty bucket) const;
};

struct EvalOptions {
  std::vector<double> iou_thresholds{0.7, 0.5};  // per class id
};

/// Pools detections of all images per class, ranks them globally by
/// (confidence desc, image order, cell, anchor) and scores each bucket.
/// Image ids must line up one to one.
EvalResult evaluate(const std::vector<ImageDetections>& detections, const std::vector<ImageGroundTruth>& truth,
                    const EvalOptions& options);

std::string eval_csv(const EvalResult& result, const std::vector<std::string>& class_names);

}  // namespace tfn
