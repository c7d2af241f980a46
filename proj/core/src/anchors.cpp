#include "tfn/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>
#include <stdexcept>

#include "tfn/random.hpp"

namespace tfn {

Box2D Box2D::from_corners(double left, double top, double right, double bottom, int class_id) {
  Box2D b;
  b.cx = (left + right) / 2;
  b.cy = (top + bottom) / 2;
  b.w = right - left;
  b.h = bottom - top;
  b.class_id = class_id;
  return b;
}

AnchorSet::AnchorSet(std::vector<AnchorShape> shapes) : shapes_(std::move(shapes)) {
  for (const auto& s : shapes_) {
    if (!(s.w > 0) || !(s.h > 0)) throw std::invalid_argument("anchor dimensions must be positive");
  }
  std::stable_sort(shapes_.begin(), shapes_.end(),
                   [](const AnchorShape& a, const AnchorShape& b) { return a.area() < b.area(); });
}

AnchorSet AnchorSet::placeholder(std::size_t count) {
  std::vector<AnchorShape> shapes;
  for (std::size_t i = 0; i < count; ++i) {
    const double scale = 16.0 * std::pow(2.0, static_cast<double>(i) / 2.0);
    const double aspect = (i % 2 == 0) ? 0.5 : 2.0;
    shapes.push_back({scale * std::sqrt(aspect), scale / std::sqrt(aspect)});
  }
  return AnchorSet(std::move(shapes));
}

double iou(const Box2D& a, const Box2D& b) {
  const double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
  const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double shape_iou(const AnchorShape& a, const AnchorShape& b) {
  const double overlap = std::min(a.w, b.w) * std::min(a.h, b.h);
  return overlap / (a.area() + b.area() - overlap);
}

namespace {

double distance(const AnchorShape& a, const AnchorShape& b) { return 1.0 - shape_iou(a, b); }

double median(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::size_t nearest(const AnchorShape& s, const std::vector<AnchorShape>& centroids) {
  std::size_t best = 0;
  double best_d = distance(s, centroids[0]);
  for (std::size_t c = 1; c < centroids.size(); ++c) {
    const double d = distance(s, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

}  // namespace

KMeansResult kmeans_iou(std::span<const AnchorShape> shapes, const KMeansOptions& options) {
  if (options.k == 0) throw std::invalid_argument("k must be positive");
  if (shapes.empty()) throw std::invalid_argument("no shapes to cluster");
  std::set<std::pair<double, double>> distinct;
  for (const auto& s : shapes) {
    if (!(s.w > 0) || !(s.h > 0)) throw std::invalid_argument("shape dimensions must be positive");
    distinct.insert({s.w, s.h});
  }
  if (options.k > distinct.size()) {
    throw std::invalid_argument("k = " + std::to_string(options.k) + " exceeds the " +
                                std::to_string(distinct.size()) + " distinct shapes");
  }

  Rng rng(options.seed);
  const std::size_t n = shapes.size();
  std::vector<AnchorShape> centroids;
  centroids.push_back(shapes[rng.below(n)]);
  std::vector<double> nearest_d(n);
  while (centroids.size() < options.k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double d = distance(shapes[i], centroids[0]);
      for (std::size_t c = 1; c < centroids.size(); ++c) d = std::min(d, distance(shapes[i], centroids[c]));
      nearest_d[i] = d * d;
      total += nearest_d[i];
    }
    // Duplicates of chosen centroids have weight zero, so a fresh shape is picked.
    double target = rng.uniform() * total;
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (nearest_d[i] <= 0) continue;
      pick = i;
      target -= nearest_d[i];
      if (target < 0) break;
    }
    centroids.push_back(shapes[pick]);
  }

  KMeansResult result;
  std::vector<std::size_t> assignment(n, options.k);
  for (int iter = 0; iter < options.max_iter; ++iter) {
    std::vector<std::size_t> next(n);
    double objective = 0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] = nearest(shapes[i], centroids);
      objective += distance(shapes[i], centroids[next[i]]);
    }
    result.objective_history.push_back(objective / static_cast<double>(n));
    result.iterations = iter + 1;
    const bool unchanged = next == assignment;
    assignment = std::move(next);
    if (unchanged) {
      result.converged = true;
      break;
    }

    std::vector<bool> taken(n, false);
    for (std::size_t c = 0; c < centroids.size(); ++c) {
      std::vector<double> ws, hs;
      double current = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assignment[i] != c) continue;
        ws.push_back(shapes[i].w);
        hs.push_back(shapes[i].h);
        current += distance(shapes[i], centroids[c]);
      }
      if (ws.empty()) {
        std::size_t far = n;
        double far_d = -1;
        for (std::size_t i = 0; i < n; ++i) {
          const double d = distance(shapes[i], centroids[assignment[i]]);
          if (!taken[i] && d > far_d) {
            far_d = d;
            far = i;
          }
        }
        if (far < n && far_d > 0) {
          taken[far] = true;
          centroids[c] = shapes[far];
          ++result.reseeded_clusters;
        }
        continue;
      }
      const AnchorShape candidate{median(ws), median(hs)};
      double moved = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assignment[i] == c) moved += distance(shapes[i], candidate);
      }
      if (moved <= current) centroids[c] = candidate;
    }
  }

  // Canonical order: by area; remap the assignment accordingly.
  std::vector<std::size_t> order(centroids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return centroids[a].area() < centroids[b].area(); });
  std::vector<std::size_t> rank(order.size());
  std::vector<AnchorShape> sorted;
  for (std::size_t r = 0; r < order.size(); ++r) {
    rank[order[r]] = r;
    sorted.push_back(centroids[order[r]]);
  }
  for (auto& a : assignment) a = rank[a];
  result.anchors = AnchorSet(std::move(sorted));
  result.assignment = std::move(assignment);
  return result;
}

std::string anchors_to_csv(const AnchorSet& anchors) {
  std::ostringstream os;
  os << "w,h\n" << std::setprecision(10);
  for (const auto& a : anchors.shapes()) os << a.w << ',' << a.h << '\n';
  return os.str();
}

AnchorSet anchors_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<AnchorShape> shapes;
  while (std::getline(is, line)) {
    if (line.empty() || line == "w,h") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw std::invalid_argument("bad anchor row: " + line);
    shapes.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return AnchorSet(std::move(shapes));
}

std::string anchors_to_svg(const AnchorSet& anchors) {
  double max_w = 1, max_h = 1;
  for (const auto& a : anchors.shapes()) {
    max_w = std::max(max_w, a.w);
    max_h = std::max(max_h, a.h);
  }
  const double margin = 20;
  const double width = max_w + 2 * margin, height = max_h + 2 * margin;
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
     << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                                  "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  const double cx = width / 2, cy = height / 2;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    const auto& a = anchors[i];
    os << "<rect x=\"" << cx - a.w / 2 << "\" y=\"" << cy - a.h / 2 << "\" width=\"" << a.w << "\" height=\""
       << a.h << "\" fill=\"none\" stroke=\"" << palette[i % 8] << "\" stroke-width=\"1.5\"><title>anchor " << i
       << ": " << a.w << " x " << a.h << "</title></rect>\n";
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace tfn
