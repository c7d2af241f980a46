#pragma once

// Test-only reference implementations for suppression and ranking metrics,
// shared by the unit tests and the acceptance checks.

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>
#include <vector>

#include "tfn/detection.hpp"
#include "tfn/eval.hpp"

namespace tfn::testing {

// Repeatedly pick the best remaining box and delete everything it suppresses.
inline std::vector<Detection> brute_force_nms(std::vector<Detection> rest, double thr) {
  std::vector<Detection> kept;
  while (!rest.empty()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < rest.size(); ++i) {
      const auto& a = rest[i];
      const auto& b = rest[best];
      const auto ka = std::make_tuple(-a.confidence, a.gy * 1000 + a.gx, a.anchor);
      const auto kb = std::make_tuple(-b.confidence, b.gy * 1000 + b.gx, b.anchor);
      if (ka < kb) best = i;
    }
    const Detection top = rest[best];
    kept.push_back(top);
    std::vector<Detection> next;
    for (std::size_t i = 0; i < rest.size(); ++i) {
      if (i == best) continue;
      if (rest[i].class_id == top.class_id && iou(rest[i].box, top.box) > thr) continue;
      next.push_back(rest[i]);
    }
    rest = std::move(next);
  }
  return kept;
}

// Interpolated-precision envelope over every recall point, then sampled at
// the 101 recall levels by locating the first prefix that reaches each.
inline double reference_ap101(const std::vector<bool>& flags, int total) {
  if (total == 0) return 0;
  const std::size_t n = flags.size();
  std::vector<double> prec(n);
  std::vector<std::int64_t> tps(n);
  std::int64_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += flags[i];
    tps[i] = tp;
    prec[i] = double(tp) / double(i + 1);
  }
  std::vector<double> env(n + 1, 0.0);
  for (std::size_t i = n; i-- > 0;) env[i] = std::max(env[i + 1], prec[i]);
  double sum = 0;
  for (int r = 0; r <= 100; ++r) {
    for (std::size_t i = 0; i < n; ++i) {
      if (100 * tps[i] >= r * total) {
        sum += env[i];
        break;
      }
    }
  }
  return sum / 101;
}

inline Detection det_at(double cx, double cy, double w, double h, double conf, int cls = 0) {
  Detection d;
  d.box = {cx, cy, w, h, cls, conf};
  d.class_id = cls;
  d.confidence = conf;
  return d;
}

inline GroundTruthObject gt_at(double cx, double cy, double w, double h, int cls = 0, int occ = 0, double trunc = 0) {
  GroundTruthObject g;
  g.box = {cx, cy, w, h, cls};
  g.class_id = cls;
  g.occlusion = occ;
  g.truncation = trunc;
  return g;
}

inline std::vector<Detection> random_scene(std::mt19937_64& rng, int n, int grid = 8) {
  std::uniform_real_distribution<double> pos(0, 100), size(5, 40), conf(0, 1);
  std::uniform_int_distribution<int> cell(0, grid - 1), anchor(0, 3), cls(0, 1);
  std::vector<Detection> out;
  for (int i = 0; i < n; ++i) {
    auto d = det_at(pos(rng), pos(rng), size(rng), size(rng), std::round(conf(rng) * 20) / 20, cls(rng));
    d.gx = cell(rng);
    d.gy = cell(rng);
    d.anchor = anchor(rng);
    out.push_back(d);
  }
  return out;
}

inline bool same(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].box.cx != b[i].box.cx || a[i].box.cy != b[i].box.cy || a[i].confidence != b[i].confidence ||
        a[i].class_id != b[i].class_id || a[i].anchor != b[i].anchor)
      return false;
  }
  return true;
}

}  // namespace tfn::testing
