#include "tfn/detection.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace tfn {

std::vector<Detection> decode(const Tensor& head, const HeadLayout& layout, const AnchorSet& anchors,
                              const DecodeOptions& options, std::int64_t n) {
  if (head.rank() != 4) throw ShapeError("decode expects [N, A*P, Hg, Wg], got " + to_string(head.shape()));
  if (head.dim(1) != layout.channels() || layout.per_anchor < 5 + layout.classes) {
    throw ShapeError("head has " + std::to_string(head.dim(1)) + " channels, layout expects " +
                     std::to_string(layout.channels()));
  }
  if (static_cast<std::int64_t>(anchors.size()) != layout.anchors) {
    throw ShapeError("anchor count " + std::to_string(anchors.size()) + " does not match the head layout");
  }
  if (n < 0 || n >= head.dim(0)) throw std::out_of_range("batch index out of range");
  const std::int64_t H = head.dim(2), W = head.dim(3), plane = H * W;
  const Real* base = head.data().data() + n * head.dim(1) * plane;
  std::vector<Detection> out;
  std::vector<double> probs(static_cast<std::size_t>(layout.classes));
  for (std::int64_t gy = 0; gy < H; ++gy) {
    for (std::int64_t gx = 0; gx < W; ++gx) {
      for (std::int64_t a = 0; a < layout.anchors; ++a) {
        auto at = [&](std::int64_t k) { return static_cast<double>(base[(a * layout.per_anchor + k) * plane + gy * W + gx]); };
        if (options.sigmoid_classes) {
          for (std::int64_t c = 0; c < layout.classes; ++c) probs[c] = sigmoid(at(5 + c));
        } else {
          double mx = at(5);
          for (std::int64_t c = 1; c < layout.classes; ++c) mx = std::max(mx, at(5 + c));
          double total = 0;
          for (std::int64_t c = 0; c < layout.classes; ++c) total += probs[c] = std::exp(at(5 + c) - mx);
          for (auto& p : probs) p /= total;
        }
        const auto best = std::max_element(probs.begin(), probs.end()) - probs.begin();
        const double confidence = sigmoid(at(4)) * probs[best];
        if (confidence < options.conf_threshold) continue;
        Detection d;
        d.class_id = static_cast<int>(best);
        d.confidence = confidence;
        d.gx = gx;
        d.gy = gy;
        d.anchor = a;
        d.box.cx = (sigmoid(at(0)) + static_cast<double>(gx)) * options.stride_px;
        d.box.cy = (sigmoid(at(1)) + static_cast<double>(gy)) * options.stride_px;
        d.box.w = anchors[a].w * std::exp(at(2));
        d.box.h = anchors[a].h * std::exp(at(3));
        d.box.class_id = d.class_id;
        d.box.score = confidence;
        out.push_back(d);
      }
    }
  }
  return out;
}

bool ranks_before(const Detection& a, const Detection& b) {
  if (a.confidence != b.confidence) return a.confidence > b.confidence;
  if (a.gy != b.gy) return a.gy < b.gy;
  if (a.gx != b.gx) return a.gx < b.gx;
  return a.anchor < b.anchor;
}

std::vector<Detection> nms(std::vector<Detection> detections, double iou_threshold) {
  std::stable_sort(detections.begin(), detections.end(), ranks_before);
  std::vector<Detection> kept;
  for (const auto& d : detections) {
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.class_id == d.class_id && iou(k.box, d.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

Box2D clip_box(const Box2D& box, double width, double height) {
  const double l = std::clamp(box.left(), 0.0, width), r = std::clamp(box.right(), 0.0, width);
  const double t = std::clamp(box.top(), 0.0, height), b = std::clamp(box.bottom(), 0.0, height);
  Box2D out = Box2D::from_corners(l, t, r, b, box.class_id);
  out.score = box.score;
  return out;
}

std::string to_kitti_line(const Detection& det, const std::vector<std::string>& class_names) {
  const std::string name =
      det.class_id >= 0 && det.class_id < static_cast<int>(class_names.size()) ? class_names[det.class_id] : "Unknown";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s -1 -1 -10 %.2f %.2f %.2f %.2f -1 -1 -1 -1000 -1000 -1000 -10 %.6f",
                name.c_str(), det.box.left(), det.box.top(), det.box.right(), det.box.bottom(), det.confidence);
  return buf;
}

}  // namespace tfn
