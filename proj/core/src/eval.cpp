#include "tfn/eval.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tfn {

std::string to_string(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::moderate: return "moderate";
    case Difficulty::hard: return "hard";
    case Difficulty::ignored: return "ignored";
  }
  return "?";
}

namespace {

struct BucketRule {
  double min_height;
  int max_occlusion;
  double max_truncation;
};

// KITTI benchmark thresholds.
constexpr BucketRule kRules[] = {{40, 0, 0.15}, {25, 1, 0.30}, {25, 2, 0.50}};

bool meets(const GroundTruthObject& gt, const BucketRule& r) {
  return gt.height_px() >= r.min_height && gt.occlusion <= r.max_occlusion && gt.truncation <= r.max_truncation;
}

// Intersection area over the detection's own area.
double covered_fraction(const Box2D& det, const Box2D& region) {
  const double iw = std::min(det.right(), region.right()) - std::max(det.left(), region.left());
  const double ih = std::min(det.bottom(), region.bottom()) - std::max(det.top(), region.top());
  if (iw <= 0 || ih <= 0 || det.area() <= 0) return 0.0;
  return iw * ih / det.area();
}

class ImageMatcher {
 public:
  ImageMatcher(std::span<const GroundTruthObject> gts, int class_id, Difficulty bucket, double threshold)
      : gts_(gts), class_id_(class_id), bucket_(bucket), threshold_(threshold), used_(gts.size(), false) {}

  MatchFlag step(const Detection& d) {
    if (d.class_id != class_id_) return MatchFlag::discarded;
    if (take(d, true)) return MatchFlag::tp;
    if (take(d, false)) return MatchFlag::discarded;
    for (const auto& g : gts_) {
      if (g.dont_care && covered_fraction(d.box, g.box) > 0.5) return MatchFlag::discarded;
    }
    return MatchFlag::fp;
  }

  int care_count() const {
    int n = 0;
    for (const auto& g : gts_) n += care(g);
    return n;
  }

  int unmatched_care() const {
    int n = 0;
    for (std::size_t i = 0; i < gts_.size(); ++i) n += care(gts_[i]) && !used_[i];
    return n;
  }

 private:
  bool care(const GroundTruthObject& g) const {
    return !g.dont_care && g.class_id == class_id_ && in_bucket(g, bucket_);
  }

  // Claims the highest-IoU unused GT of the requested kind above threshold.
  bool take(const Detection& d, bool want_care) {
    std::size_t best = gts_.size();
    double best_iou = threshold_;
    for (std::size_t i = 0; i < gts_.size(); ++i) {
      const auto& g = gts_[i];
      if (used_[i] || g.dont_care || g.class_id != class_id_ || care(g) != want_care) continue;
      const double v = iou(d.box, g.box);
      if (v > best_iou) {
        best_iou = v;
        best = i;
      }
    }
    if (best == gts_.size()) return false;
    used_[best] = true;
    return true;
  }

  std::span<const GroundTruthObject> gts_;
  int class_id_;
  Difficulty bucket_;
  double threshold_;
  std::vector<bool> used_;
};

}  // namespace

Difficulty difficulty_of(const GroundTruthObject& gt) {
  if (gt.dont_care) return Difficulty::ignored;
  for (int b = 0; b < 3; ++b) {
    if (meets(gt, kRules[b])) return static_cast<Difficulty>(b);
  }
  return Difficulty::ignored;
}

bool in_bucket(const GroundTruthObject& gt, Difficulty bucket) {
  if (bucket == Difficulty::ignored) return false;
  const auto d = difficulty_of(gt);
  return d != Difficulty::ignored && static_cast<int>(d) <= static_cast<int>(bucket);
}

MatchResult match(std::span<const Detection> ranked, std::span<const GroundTruthObject> gts, int class_id,
                  Difficulty bucket, double iou_threshold) {
  ImageMatcher m(gts, class_id, bucket, iou_threshold);
  MatchResult r;
  for (const auto& d : ranked) {
    r.flags.push_back(m.step(d));
    r.tp += r.flags.back() == MatchFlag::tp;
    r.fp += r.flags.back() == MatchFlag::fp;
  }
  r.fn = m.unmatched_care();
  return r;
}

double average_precision_101(const std::vector<bool>& ranked, int total_gt) {
  if (total_gt <= 0) return 0.0;
  // best[r]: highest precision among prefixes whose recall reaches r/100,
  // compared in integers as 100 * tp >= r * total_gt.
  std::vector<double> best(101, 0.0);
  std::int64_t tp = 0;
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    tp += ranked[i];
    const double precision = static_cast<double>(tp) / static_cast<double>(i + 1);
    const std::int64_t reached = std::min<std::int64_t>(100, (100 * tp) / total_gt);
    // All r <= reached qualify for this prefix.
    for (std::int64_t r = reached; r >= 0 && best[r] < precision; --r) best[r] = precision;
  }
  double sum = 0;
  for (double v : best) sum += v;
  return sum / 101.0;
}

const EvalEntry& EvalResult::at(int class_id, Difficulty bucket) const {
  for (const auto& e : entries) {
    if (e.class_id == class_id && e.bucket == bucket) return e;
  }
  throw std::out_of_range("no evaluation entry for class " + std::to_string(class_id) + " / " + to_string(bucket));
}

EvalResult evaluate(const std::vector<ImageDetections>& detections, const std::vector<ImageGroundTruth>& truth,
                    const EvalOptions& options) {
  if (detections.size() != truth.size()) {
    throw std::invalid_argument("detections cover " + std::to_string(detections.size()) + " images, ground truth " +
                                std::to_string(truth.size()));
  }
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (detections[i].image_id != truth[i].image_id) {
      throw std::invalid_argument("image id mismatch at position " + std::to_string(i) + ": '" +
                                  detections[i].image_id + "' vs '" + truth[i].image_id + "'");
    }
  }
  EvalResult result;
  for (int c = 0; c < static_cast<int>(options.iou_thresholds.size()); ++c) {
    struct Ranked {
      std::size_t image;
      const Detection* det;
    };
    std::vector<Ranked> pool;
    for (std::size_t i = 0; i < detections.size(); ++i) {
      for (const auto& d : detections[i].detections) {
        if (d.class_id == c) pool.push_back({i, &d});
      }
    }
    std::stable_sort(pool.begin(), pool.end(), [](const Ranked& a, const Ranked& b) {
      if (a.det->confidence != b.det->confidence) return a.det->confidence > b.det->confidence;
      if (a.image != b.image) return a.image < b.image;
      return ranks_before(*a.det, *b.det);
    });

    for (auto bucket : kBuckets) {
      std::vector<ImageMatcher> matchers;
      EvalEntry e;
      e.class_id = c;
      e.bucket = bucket;
      for (const auto& t : truth) {
        matchers.emplace_back(t.objects, c, bucket, options.iou_thresholds[c]);
        e.num_gt += matchers.back().care_count();
      }
      std::vector<bool> flags;
      for (const auto& r : pool) {
        const auto f = matchers[r.image].step(*r.det);
        if (f == MatchFlag::discarded) continue;
        flags.push_back(f == MatchFlag::tp);
        e.tp += f == MatchFlag::tp;
        e.fp += f == MatchFlag::fp;
        e.precision.push_back(static_cast<double>(e.tp) / static_cast<double>(flags.size()));
        e.recall.push_back(e.num_gt > 0 ? static_cast<double>(e.tp) / e.num_gt : 0.0);
      }
      for (const auto& m : matchers) e.fn += m.unmatched_care();
      e.ap = average_precision_101(flags, e.num_gt);
      result.entries.push_back(std::move(e));
    }
  }
  return result;
}

std::string eval_csv(const EvalResult& result, const std::vector<std::string>& class_names) {
  std::ostringstream os;
  os << "class,difficulty,ap,tp,fp,fn,num_gt\n";
  char ap[32];
  for (const auto& e : result.entries) {
    const std::string name =
        e.class_id < static_cast<int>(class_names.size()) ? class_names[e.class_id] : std::to_string(e.class_id);
    std::snprintf(ap, sizeof ap, "%.6f", e.ap);
    os << name << ',' << to_string(e.bucket) << ',' << ap << ',' << e.tp << ',' << e.fp << ',' << e.fn << ','
       << e.num_gt << '\n';
  }
  return os.str();
}

}  // namespace tfn
