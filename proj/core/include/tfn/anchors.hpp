#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace tfn {

// Axis-aligned box in pixels, center format.
struct Box2D {
  double cx = 0, cy = 0, w = 0, h = 0;
  int class_id = -1;
  double score = 1.0;

  double left() const { return cx - w / 2; }
  double right() const { return cx + w / 2; }
  double top() const { return cy - h / 2; }
  double bottom() const { return cy + h / 2; }
  double area() const { return w * h; }

  static Box2D from_corners(double left, double top, double right, double bottom, int class_id = -1);
};

struct AnchorShape {
  double w = 0, h = 0;
  double area() const { return w * h; }
  friend bool operator==(const AnchorShape&, const AnchorShape&) = default;
};

/// K prior box shapes, always positive and sorted by area ascending.
class AnchorSet {
 public:
  AnchorSet() = default;
  explicit AnchorSet(std::vector<AnchorShape> shapes);

  std::size_t size() const { return shapes_.size(); }
  const AnchorShape& operator[](std::size_t i) const { return shapes_[i]; }
  const std::vector<AnchorShape>& shapes() const { return shapes_; }

  // Anchors spread geometrically between two extremes; used where only the
  // anchor count matters (profiling, shape tests).
  static AnchorSet placeholder(std::size_t count);

 private:
  std::vector<AnchorShape> shapes_;
};

double iou(const Box2D& a, const Box2D& b);

// IoU of two co-centered boxes.
double shape_iou(const AnchorShape& a, const AnchorShape& b);

struct KMeansOptions {
  std::size_t k = 8;
  std::uint64_t seed = 0;
  int max_iter = 100;
};

struct KMeansResult {
  AnchorSet anchors;
  std::vector<std::size_t> assignment;    // index into anchors, per input shape
  std::vector<double> objective_history;  // mean (1 - IoU) after each assignment step
  int iterations = 0;
  bool converged = false;
  int reseeded_clusters = 0;
};

/// k-means over box shapes under the distance 1 - shape_iou.
///
/// Seeding is k-means++ style under that distance. Each cluster moves to the
/// per-dimension median of its members when that does not raise the cluster's
/// total distance; an empty cluster is re-seeded at the point farthest from its
/// centroid. Either way the objective never increases between iterations.
/// Throws std::invalid_argument when k exceeds the number of distinct shapes.
KMeansResult kmeans_iou(std::span<const AnchorShape> shapes, const KMeansOptions& options);

std::string anchors_to_csv(const AnchorSet& anchors);
AnchorSet anchors_from_csv(const std::string& text);
std::string anchors_to_svg(const AnchorSet& anchors);

}  // namespace tfn
