#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tfn/anchors.hpp"
#include "tfn/model.hpp"
#include "tfn/tensor.hpp"

namespace tfn {

struct Detection {
  Box2D box;  // box.class_id and box.score mirror class_id / confidence
  int class_id = 0;
  double confidence = 0;
  std::int64_t gx = 0, gy = 0;
  std::int64_t anchor = 0;
};

struct DecodeOptions {
  double stride_px = 16;
  double conf_threshold = 0.01;
  bool sigmoid_classes = false;  // per-class sigmoid instead of softmax
};

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Decodes one image (batch index `n`) of a raw head map [N, A*P, Hg, Wg].
/// Detections are returned in (gy, gx, anchor) order; those with confidence
/// below the threshold are dropped.
std::vector<Detection> decode(const Tensor& head, const HeadLayout& layout, const AnchorSet& anchors,
                              const DecodeOptions& options, std::int64_t n = 0);

/// Greedy per-class suppression in (confidence desc, cell asc, anchor asc)
/// order; a box is dropped when its IoU with a kept box of its class exceeds
/// the threshold. Output keeps that order.
std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold);

// Deterministic ranking used by nms and evaluation.
bool ranks_before(const Detection& a, const Detection& b);

Box2D clip_box(const Box2D& box, double width, double height);

// `type trunc occ alpha left top right bottom h w l x y z ry score`
std::string to_kitti_line(const Detection& det, const std::vector<std::string>& class_names);

}  // namespace tfn
