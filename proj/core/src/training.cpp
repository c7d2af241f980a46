#include "tfn/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "autograd.hpp"
#include "tfn/ops.hpp"

namespace tfn {

double lr_at(double epoch, double lr0, double decay_epochs, double factor) {
  if (epoch < 0) throw std::invalid_argument("epoch must be non-negative");
  return lr0 * std::pow(factor, epoch / decay_epochs);
}

// ---------------------------------------------------------------------------

TargetMap::TargetMap(std::int64_t n, const HeadLayout& l, std::int64_t gh, std::int64_t gw)
    : layout(l), batch(n), grid_h(gh), grid_w(gw) {
  const auto size = static_cast<std::size_t>(n * l.anchors * gh * gw);
  positive.assign(size, 0);
  ignore.assign(size, 0);
  tx.assign(size, 0);
  ty.assign(size, 0);
  tw.assign(size, 0);
  th.assign(size, 0);
  cls.assign(size, -1);
}

std::int64_t TargetMap::positives() const {
  return std::count(positive.begin(), positive.end(), std::uint8_t{1});
}

void assign_targets(const std::vector<GroundTruthObject>& gts, const AnchorSet& anchors, const AssignOptions& o,
                    TargetMap& map, std::int64_t n) {
  if (static_cast<std::int64_t>(anchors.size()) != map.layout.anchors) {
    throw ShapeError("anchor count does not match the target layout");
  }
  if (n < 0 || n >= map.batch) throw std::out_of_range("target batch index out of range");
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!gts[i].dont_care && gts[i].class_id >= 0 && gts[i].class_id < map.layout.classes) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return gts[a].box.area() > gts[b].box.area(); });

  const double W = o.image_width > 0 ? o.image_width : static_cast<double>(map.grid_w) * o.stride_px;
  const double H = o.image_height > 0 ? o.image_height : static_cast<double>(map.grid_h) * o.stride_px;
  const auto A = static_cast<std::int64_t>(anchors.size());
  for (auto i : order) {
    const auto& b = gts[i].box;
    if (!(b.cx >= 0 && b.cx < W && b.cy >= 0 && b.cy < H) || b.w <= 0 || b.h <= 0) {
      ++map.skipped;
      continue;
    }
    const auto gx = std::min(map.grid_w - 1, static_cast<std::int64_t>(std::floor(b.cx / o.stride_px)));
    const auto gy = std::min(map.grid_h - 1, static_cast<std::int64_t>(std::floor(b.cy / o.stride_px)));
    std::vector<double> s(static_cast<std::size_t>(A));
    for (std::int64_t a = 0; a < A; ++a) s[a] = shape_iou({b.w, b.h}, anchors[a]);
    std::vector<std::int64_t> rank(static_cast<std::size_t>(A));
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](auto x, auto y) { return s[x] > s[y]; });

    std::int64_t chosen = -1;
    for (auto a : rank) {
      if (!map.positive[map.index(n, a, gy, gx)]) {
        chosen = a;
        break;
      }
    }
    if (chosen != rank[0]) ++map.collisions;
    if (chosen < 0) {
      ++map.dropped;
      continue;
    }
    for (std::int64_t a = 0; a < A; ++a) {
      if (a != chosen && s[a] > o.ignore_iou) map.ignore[map.index(n, a, gy, gx)] = 1;
    }
    const auto k = map.index(n, chosen, gy, gx);
    map.positive[k] = 1;
    map.ignore[k] = 0;
    map.tx[k] = b.cx / o.stride_px - static_cast<double>(gx);
    map.ty[k] = b.cy / o.stride_px - static_cast<double>(gy);
    map.tw[k] = std::log(b.w / anchors[chosen].w);
    map.th[k] = std::log(b.h / anchors[chosen].h);
    map.cls[k] = gts[i].class_id;
  }
}

// ---------------------------------------------------------------------------

namespace {

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

}  // namespace

Tensor detection_loss(const Tensor& head, const TargetMap& t, const LossWeights& w, LossBreakdown* breakdown) {
  const auto& L = t.layout;
  if (head.rank() != 4 || head.dim(0) != t.batch || head.dim(1) != L.channels() || head.dim(2) != t.grid_h ||
      head.dim(3) != t.grid_w) {
    throw ShapeError("loss: head " + to_string(head.shape()) + " does not match targets [" + std::to_string(t.batch) +
                     ", " + std::to_string(L.channels()) + ", " + std::to_string(t.grid_h) + ", " +
                     std::to_string(t.grid_w) + "]");
  }
  const std::int64_t plane = t.grid_h * t.grid_w;
  const auto x = head.data();
  auto grad = std::make_shared<std::vector<Real>>(x.size(), Real(0));
  LossBreakdown acc;
  std::vector<double> p(static_cast<std::size_t>(L.classes));
  for (std::int64_t n = 0; n < t.batch; ++n) {
    for (std::int64_t a = 0; a < L.anchors; ++a) {
      for (std::int64_t cell = 0; cell < plane; ++cell) {
        const auto k = static_cast<std::size_t>((n * L.anchors + a) * plane + cell);
        auto idx = [&](std::int64_t c) {
          return static_cast<std::size_t>((n * L.channels() + a * L.per_anchor + c) * plane + cell);
        };
        const double conf = x[idx(4)];
        if (!t.positive[k]) {
          if (t.ignore[k]) continue;
          acc.noobj += w.noobj * softplus(conf);
          (*grad)[idx(4)] = static_cast<Real>(w.noobj * sigmoid(conf));
          continue;
        }
        const double sx = sigmoid(x[idx(0)]), sy = sigmoid(x[idx(1)]);
        const double dx = sx - t.tx[k], dy = sy - t.ty[k];
        const double dw = x[idx(2)] - t.tw[k], dh = x[idx(3)] - t.th[k];
        acc.coord += w.coord * (dx * dx + dy * dy + dw * dw + dh * dh);
        (*grad)[idx(0)] = static_cast<Real>(w.coord * 2 * dx * sx * (1 - sx));
        (*grad)[idx(1)] = static_cast<Real>(w.coord * 2 * dy * sy * (1 - sy));
        (*grad)[idx(2)] = static_cast<Real>(w.coord * 2 * dw);
        (*grad)[idx(3)] = static_cast<Real>(w.coord * 2 * dh);

        acc.obj += w.obj * softplus(-conf);
        (*grad)[idx(4)] = static_cast<Real>(w.obj * (sigmoid(conf) - 1));

        double mx = x[idx(5)];
        for (std::int64_t c = 1; c < L.classes; ++c) mx = std::max(mx, double(x[idx(5 + c)]));
        double total = 0;
        for (std::int64_t c = 0; c < L.classes; ++c) total += p[c] = std::exp(x[idx(5 + c)] - mx);
        const int target = t.cls[k];
        acc.cls += w.cls * (std::log(total) + mx - x[idx(5 + target)]);
        for (std::int64_t c = 0; c < L.classes; ++c) {
          (*grad)[idx(5 + c)] = static_cast<Real>(w.cls * (p[c] / total - (c == target ? 1.0 : 0.0)));
        }
      }
    }
  }
  if (breakdown) *breakdown = acc;
  return detail::make_result({}, {static_cast<Real>(acc.total())}, {head}, [grad](detail::Node& self) {
    const Real g = self.grad[0];
    auto& in = self.inputs[0];
    if (!detail::wants_grad(in)) return;
    auto dst = in->ensure_grad();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g * (*grad)[i];
  });
}

// ---------------------------------------------------------------------------

bool adam_step(const std::vector<Tensor>& params, OptimizerState& s, double lr, const AdamOptions& o) {
  if (s.m.size() != params.size()) {
    if (s.step != 0 || !s.m.empty()) throw std::invalid_argument("optimizer state does not match the parameters");
    for (const auto& p : params) {
      s.m.emplace_back(p.numel(), Real(0));
      s.v.emplace_back(p.numel(), Real(0));
    }
  }
  double sq = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.m[i].size() != params[i].numel()) throw ShapeError("optimizer moments do not match parameter " + std::to_string(i));
    if (!params[i].has_grad()) continue;
    for (Real g : params[i].grad()) {
      if (!std::isfinite(g)) {
        ++s.rejected;
        return false;
      }
      sq += double(g) * g;
    }
  }
  const double scale = o.clip_norm > 0 && std::sqrt(sq) > o.clip_norm ? o.clip_norm / std::sqrt(sq) : 1.0;
  ++s.step;
  const double c1 = 1 - std::pow(o.beta1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(o.beta2, static_cast<double>(s.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i];
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<const Real>{};
    auto val = p.mutable_data();
    auto& m = s.m[i];
    auto& v = s.v[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      const double gj = has ? double(g[j]) * scale : 0.0;
      m[j] = static_cast<Real>(o.beta1 * m[j] + (1 - o.beta1) * gj);
      v[j] = static_cast<Real>(o.beta2 * v[j] + (1 - o.beta2) * gj * gj);
      const double mh = m[j] / c1, vh = v[j] / c2;
      val[j] = static_cast<Real>(val[j] - lr * mh / (std::sqrt(vh) + o.eps));
    }
  }
  return true;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    out.push_back(item.substr(b, item.find_last_not_of(" \t") - b + 1));
  }
  return out;
}

std::string join(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

const std::vector<std::string> kRunKeys = {
    "epochs", "batch", "lr", "lr_decay_epochs", "lr_decay_factor", "adam_beta1", "adam_beta2", "adam_eps",
    "clip_norm", "lambda_coord", "lambda_obj", "lambda_noobj", "lambda_class", "ignore_iou", "shuffle_buffer",
    "train_ratio", "seed", "max_iterations", "eval_every", "eval_every_iterations", "eval_on", "stop_at_perfect",
    "augment", "flip_prob", "max_translate_px", "brightness", "contrast", "saturation", "hue", "data", "classes",
    "delta_t_ms", "conf_threshold", "nms_iou", "sigmoid_classes", "eval_iou"};

}  // namespace

void RunConfig::validate() const {
  model.validate();
  const auto& t = train;
  if (t.epochs < 1) throw ConfigError("epochs", "must be at least 1");
  if (t.batch < 1) throw ConfigError("batch", "must be at least 1");
  if (!(t.lr0 >= 0)) throw ConfigError("lr", "must be non-negative");
  if (!(t.lr_decay_epochs > 0)) throw ConfigError("lr_decay_epochs", "must be positive");
  if (!(t.lr_decay_factor > 0 && t.lr_decay_factor <= 1)) throw ConfigError("lr_decay_factor", "must lie in (0, 1]");
  if (!(t.adam.beta1 >= 0 && t.adam.beta1 < 1)) throw ConfigError("adam_beta1", "must lie in [0, 1)");
  if (!(t.adam.beta2 >= 0 && t.adam.beta2 < 1)) throw ConfigError("adam_beta2", "must lie in [0, 1)");
  if (!(t.adam.eps > 0)) throw ConfigError("adam_eps", "must be positive");
  if (t.adam.clip_norm < 0) throw ConfigError("clip_norm", "must be non-negative");
  if (!(t.ignore_iou > 0 && t.ignore_iou <= 1)) throw ConfigError("ignore_iou", "must lie in (0, 1]");
  if (t.shuffle_buffer < 1) throw ConfigError("shuffle_buffer", "must be at least 1");
  if (!(t.train_ratio > 0 && t.train_ratio <= 1)) throw ConfigError("train_ratio", "must lie in (0, 1]");
  if (t.max_iterations < 0) throw ConfigError("max_iterations", "must be non-negative");
  if (t.eval_every < 0) throw ConfigError("eval_every", "must be non-negative");
  if (t.eval_every_iterations < 0) throw ConfigError("eval_every_iterations", "must be non-negative");
  try {
    t.augment.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError("augment", e.what());
  }
  if (static_cast<std::int64_t>(data.classes.size()) != model.num_classes) {
    throw ConfigError("classes", "lists " + std::to_string(data.classes.size()) + " names for " +
                                     std::to_string(model.num_classes) + " classes");
  }
  if (!(data.delta_t_ms >= 0)) throw ConfigError("delta_t_ms", "must be non-negative");
  if (!(inference.conf_threshold >= 0 && inference.conf_threshold < 1)) {
    throw ConfigError("conf_threshold", "must lie in [0, 1)");
  }
  if (!(inference.nms_iou > 0 && inference.nms_iou <= 1)) throw ConfigError("nms_iou", "must lie in (0, 1]");
  if (static_cast<std::int64_t>(inference.eval_iou.size()) != model.num_classes) {
    throw ConfigError("eval_iou", "needs one threshold per class");
  }
}

std::vector<std::string> run_config_keys() {
  auto keys = model_config_keys();
  keys.insert(keys.end(), kRunKeys.begin(), kRunKeys.end());
  return keys;
}

RunConfig read_run_config(const KeyValues& kv) {
  kv.require_known(run_config_keys());
  RunConfig c;
  c.model = read_model_config(kv);
  auto& t = c.train;
  t.epochs = static_cast<int>(kv.get_int("epochs", t.epochs));
  t.batch = static_cast<int>(kv.get_int("batch", t.batch));
  t.lr0 = kv.get_double("lr", t.lr0);
  t.lr_decay_epochs = kv.get_double("lr_decay_epochs", t.lr_decay_epochs);
  t.lr_decay_factor = kv.get_double("lr_decay_factor", t.lr_decay_factor);
  t.adam.beta1 = kv.get_double("adam_beta1", t.adam.beta1);
  t.adam.beta2 = kv.get_double("adam_beta2", t.adam.beta2);
  t.adam.eps = kv.get_double("adam_eps", t.adam.eps);
  t.adam.clip_norm = kv.get_double("clip_norm", t.adam.clip_norm);
  t.loss.coord = kv.get_double("lambda_coord", t.loss.coord);
  t.loss.obj = kv.get_double("lambda_obj", t.loss.obj);
  t.loss.noobj = kv.get_double("lambda_noobj", t.loss.noobj);
  t.loss.cls = kv.get_double("lambda_class", t.loss.cls);
  t.ignore_iou = kv.get_double("ignore_iou", t.ignore_iou);
  const auto buffer = kv.get_int("shuffle_buffer", static_cast<long long>(t.shuffle_buffer));
  if (buffer < 1) throw ConfigError("shuffle_buffer", "must be at least 1");
  t.shuffle_buffer = static_cast<std::size_t>(buffer);
  t.train_ratio = kv.get_double("train_ratio", t.train_ratio);
  const auto seed = kv.get_int("seed", 0);
  if (seed < 0) throw ConfigError("seed", "must be non-negative");
  t.seed = static_cast<std::uint64_t>(seed);
  t.max_iterations = kv.get_int("max_iterations", t.max_iterations);
  t.eval_every = static_cast<int>(kv.get_int("eval_every", t.eval_every));
  t.eval_every_iterations = kv.get_int("eval_every_iterations", t.eval_every_iterations);
  const auto on = kv.get_string("eval_on", "val");
  if (on != "val" && on != "train") throw ConfigError("eval_on", "expected val or train, got '" + on + "'");
  t.eval_on_train = on == "train";
  t.stop_at_perfect = kv.get_bool("stop_at_perfect", t.stop_at_perfect);
  auto& a = t.augment;
  a.enabled = kv.get_bool("augment", a.enabled);
  a.flip_prob = kv.get_double("flip_prob", a.flip_prob);
  a.max_translate_px = kv.get_double("max_translate_px", a.max_translate_px);
  a.brightness = kv.get_double("brightness", a.brightness);
  a.contrast = kv.get_double("contrast", a.contrast);
  a.saturation = kv.get_double("saturation", a.saturation);
  a.hue = kv.get_double("hue", a.hue);
  c.data.root = kv.get_string("data", "");
  if (auto cl = kv.get("classes")) c.data.classes = split_list(*cl);
  c.data.delta_t_ms = kv.get_double("delta_t_ms", c.data.delta_t_ms);
  c.inference.conf_threshold = kv.get_double("conf_threshold", c.inference.conf_threshold);
  c.inference.nms_iou = kv.get_double("nms_iou", c.inference.nms_iou);
  c.inference.sigmoid_classes = kv.get_bool("sigmoid_classes", c.inference.sigmoid_classes);
  if (auto e = kv.get("eval_iou")) {
    c.inference.eval_iou.clear();
    for (const auto& s : split_list(*e)) {
      KeyValues one;
      one.set("eval_iou", s);
      c.inference.eval_iou.push_back(one.get_double("eval_iou", 0));
    }
  }
  c.validate();
  return c;
}

KeyValues write_run_config(const RunConfig& c) {
  KeyValues kv;
  write_model_config(c.model, kv);
  const auto& t = c.train;
  kv.set("epochs", std::to_string(t.epochs));
  kv.set("batch", std::to_string(t.batch));
  kv.set("lr", format_double(t.lr0));
  kv.set("lr_decay_epochs", format_double(t.lr_decay_epochs));
  kv.set("lr_decay_factor", format_double(t.lr_decay_factor));
  kv.set("adam_beta1", format_double(t.adam.beta1));
  kv.set("adam_beta2", format_double(t.adam.beta2));
  kv.set("adam_eps", format_double(t.adam.eps));
  kv.set("clip_norm", format_double(t.adam.clip_norm));
  kv.set("lambda_coord", format_double(t.loss.coord));
  kv.set("lambda_obj", format_double(t.loss.obj));
  kv.set("lambda_noobj", format_double(t.loss.noobj));
  kv.set("lambda_class", format_double(t.loss.cls));
  kv.set("ignore_iou", format_double(t.ignore_iou));
  kv.set("shuffle_buffer", std::to_string(t.shuffle_buffer));
  kv.set("train_ratio", format_double(t.train_ratio));
  kv.set("seed", std::to_string(t.seed));
  kv.set("max_iterations", std::to_string(t.max_iterations));
  kv.set("eval_every", std::to_string(t.eval_every));
  kv.set("eval_every_iterations", std::to_string(t.eval_every_iterations));
  kv.set("eval_on", t.eval_on_train ? "train" : "val");
  kv.set("stop_at_perfect", t.stop_at_perfect ? "on" : "off");
  kv.set("augment", t.augment.enabled ? "on" : "off");
  kv.set("flip_prob", format_double(t.augment.flip_prob));
  kv.set("max_translate_px", format_double(t.augment.max_translate_px));
  kv.set("brightness", format_double(t.augment.brightness));
  kv.set("contrast", format_double(t.augment.contrast));
  kv.set("saturation", format_double(t.augment.saturation));
  kv.set("hue", format_double(t.augment.hue));
  kv.set("data", c.data.root.string());
  kv.set("classes", join(c.data.classes));
  kv.set("delta_t_ms", format_double(c.data.delta_t_ms));
  kv.set("conf_threshold", format_double(c.inference.conf_threshold));
  kv.set("nms_iou", format_double(c.inference.nms_iou));
  kv.set("sigmoid_classes", c.inference.sigmoid_classes ? "on" : "off");
  std::vector<std::string> ious;
  for (double v : c.inference.eval_iou) ious.push_back(format_double(v));
  kv.set("eval_iou", join(ious));
  return kv;
}

// ---------------------------------------------------------------------------

SequenceSample model_sample(const Dataset& data, std::size_t index, const RunConfig& config) {
  return resize_sample(data.sample(index, config.data.delta_t_ms, config.model.sequence_length),
                       config.model.input_height, config.model.input_width);
}

std::vector<std::vector<Detection>> detect(const ModelGraph& graph, ModelParams& params, const Tensor& input,
                                           const InferenceConfig& options) {
  NoGradGuard guard;
  const Tensor head = forward(graph, params, input, {NormMode::infer, ConvAlgorithm::im2col});
  DecodeOptions d;
  d.stride_px = static_cast<double>(graph.config.total_stride());
  d.conf_threshold = options.conf_threshold;
  d.sigmoid_classes = options.sigmoid_classes;
  std::vector<std::vector<Detection>> out;
  for (std::int64_t n = 0; n < head.dim(0); ++n) {
    out.push_back(nms(decode(head, graph.head, graph.config.anchors, d, n), options.nms_iou));
  }
  return out;
}

namespace {

// Graphs keyed by batch size; shapes depend on it.
class GraphCache {
 public:
  explicit GraphCache(const ModelConfig& config) : config_(config) {}
  const ModelGraph& get(std::int64_t batch) {
    auto it = graphs_.find(batch);
    if (it == graphs_.end()) it = graphs_.emplace(batch, build_model(config_, batch)).first;
    return it->second;
  }

 private:
  ModelConfig config_;
  std::map<std::int64_t, ModelGraph> graphs_;
};

constexpr std::int64_t kEvalBatch = 8;

}  // namespace

EvalResult evaluate_samples(const ModelGraph& graph, ModelParams& params, const Dataset& data,
                            const std::vector<std::size_t>& indices, const RunConfig& config) {
  GraphCache graphs(graph.config);
  std::vector<ImageDetections> dets;
  std::vector<ImageGroundTruth> gts;
  for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
    const auto end = std::min(indices.size(), start + kEvalBatch);
    std::vector<SequenceSample> samples;
    for (auto i = start; i < end; ++i) samples.push_back(model_sample(data, indices[i], config));
    std::vector<const SequenceSample*> ptrs;
    for (const auto& s : samples) ptrs.push_back(&s);
    const auto found = detect(graphs.get(static_cast<std::int64_t>(ptrs.size())), params, to_tensor(ptrs),
                              config.inference);
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const auto& id = data.samples()[indices[start + k]].id;
      dets.push_back({id, found[k]});
      gts.push_back({id, samples[k].labels});
    }
  }
  EvalOptions eo;
  eo.iou_thresholds = config.inference.eval_iou;
  return evaluate(dets, gts, eo);
}

double mean_ap(const EvalResult& result, Difficulty bucket) {
  double sum = 0;
  int n = 0;
  for (const auto& e : result.entries) {
    if (e.bucket != bucket) continue;
    sum += e.ap;
    ++n;
  }
  return n ? sum / n : 0.0;
}

// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'T', 'F', 'N', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw DataError("truncated checkpoint");
  return v;
}

void put_string(std::ostream& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string take_string(std::istream& in) {
  const auto n = take<std::uint64_t>(in);
  if (n > (1u << 28)) throw DataError("corrupt checkpoint string");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw DataError("truncated checkpoint");
  return s;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(kCheckpointMagic, 4);
    put<std::uint32_t>(out, kCheckpointVersion);
    put_string(out, write_run_config(c.config).to_text());
    put<std::int64_t>(out, c.epoch);
    put<std::int64_t>(out, c.batch_in_epoch);
    put<std::int64_t>(out, c.iteration);
    put<std::uint64_t>(out, c.tensors.size());
    for (const auto& [name, t] : c.tensors) {
      put_string(out, name);
      write_tensor(out, t);
    }
    put<std::int64_t>(out, c.optimizer.step);
    put<std::int64_t>(out, c.optimizer.rejected);
    put<std::uint64_t>(out, c.optimizer.m.size());
    for (std::size_t i = 0; i < c.optimizer.m.size(); ++i) {
      const auto n = static_cast<std::int64_t>(c.optimizer.m[i].size());
      write_tensor(out, Tensor::from_data({n}, c.optimizer.m[i]));
      write_tensor(out, Tensor::from_data({n}, c.optimizer.v[i]));
    }
    out.flush();
    if (!out) throw DataError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw DataError(path.string() + " is not a checkpoint");
  if (take<std::uint32_t>(in) != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  Checkpoint c;
  c.config = read_run_config(KeyValues::parse(take_string(in)));
  c.epoch = take<std::int64_t>(in);
  c.batch_in_epoch = take<std::int64_t>(in);
  c.iteration = take<std::int64_t>(in);
  const auto nt = take<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < nt; ++i) {
    auto name = take_string(in);
    c.tensors.emplace_back(std::move(name), read_tensor(in));
  }
  c.optimizer.step = take<std::int64_t>(in);
  c.optimizer.rejected = take<std::int64_t>(in);
  const auto nm = take<std::uint64_t>(in);
  for (std::uint64_t i = 0; i < nm; ++i) {
    const auto m = read_tensor(in), v = read_tensor(in);
    c.optimizer.m.emplace_back(m.data().begin(), m.data().end());
    c.optimizer.v.emplace_back(v.data().begin(), v.data().end());
  }
  return c;
}

void restore_params(const Checkpoint& c, ModelParams& params) {
  std::map<std::string, const Tensor*> saved;
  for (const auto& [name, t] : c.tensors) saved[name] = &t;
  for (auto& [name, t] : params.named_tensors()) {
    const auto it = saved.find(name);
    if (it == saved.end()) throw DataError("checkpoint lacks tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw ShapeError("checkpoint tensor " + name + " has shape " + to_string(it->second->shape()) + ", model expects " +
                       to_string(t.shape()));
    }
    Tensor dst = t;
    std::copy(it->second->data().begin(), it->second->data().end(), dst.mutable_data().begin());
  }
}

std::string metrics_csv_header() {
  return "iteration,epoch,lr,loss,coord,obj,noobj,class,ap_easy,ap_moderate,ap_hard\n";
}

std::string metrics_csv_row(const MetricsRow& r) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%lld,%.6f,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g", static_cast<long long>(r.iteration),
                r.epoch, r.lr, r.loss.total(), r.loss.coord, r.loss.obj, r.loss.noobj, r.loss.cls);
  std::string s = buf;
  if (r.evaluated) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f", r.ap[0], r.ap[1], r.ap[2]);
    s += buf;
  } else {
    s += ",,,";
  }
  return s + "\n";
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const Dataset& data,
                                                                            const TrainConfig& config) {
  const auto parts = split_dataset(data.ids(), config.train_ratio, config.seed);
  std::vector<std::size_t> train, val;
  for (const auto& id : parts.train) train.push_back(data.index_of(id));
  for (const auto& id : parts.val) val.push_back(data.index_of(id));
  std::sort(train.begin(), train.end());
  std::sort(val.begin(), val.end());
  return {train, val};
}

TrainResult train(const RunConfig& config, const Dataset& data, const TrainOptions& options) {
  config.validate();
  const auto& tc = config.train;
  if (data.size() == 0) throw DataError("dataset has no labeled samples");
  GraphCache graphs(config.model);
  const ModelGraph& full = graphs.get(tc.batch);
  ModelParams params = init_params(full, tc.seed);
  auto trainable = params.trainable();
  OptimizerState opt;
  std::int64_t start_epoch = 0, start_batch = 0, iteration = 0;
  if (!options.resume.empty()) {
    const auto ck = load_checkpoint(options.resume);
    if (!(ck.config.model == config.model)) throw ConfigError("resume", "checkpoint was trained with another model");
    restore_params(ck, params);
    opt = ck.optimizer;
    start_epoch = ck.epoch;
    start_batch = ck.batch_in_epoch;
    iteration = ck.iteration;
  }

  const auto [train_idx, val_idx] = split_indices(data, tc);
  const auto& eval_idx = tc.eval_on_train ? train_idx : val_idx;
  const auto batches = static_cast<std::int64_t>((train_idx.size() + tc.batch - 1) / tc.batch);

  std::ofstream metrics;
  const auto ckpt_path = options.out_dir / "checkpoint.tfnc";
  if (!options.out_dir.empty()) {
    std::filesystem::create_directories(options.out_dir);
    const auto mpath = options.out_dir / "metrics.csv";
    // On resume keep only the rows up to the checkpoint.
    std::vector<std::string> kept;
    if (iteration > 0 && std::filesystem::exists(mpath)) {
      std::ifstream old(mpath);
      std::string line;
      std::getline(old, line);
      while (std::getline(old, line)) {
        if (std::stoll(line.substr(0, line.find(','))) <= iteration) kept.push_back(line);
      }
    }
    metrics.open(mpath, std::ios::trunc);
    metrics << metrics_csv_header();
    for (const auto& l : kept) metrics << l << '\n';
  }

  TrainResult result;
  result.iterations = iteration;
  auto checkpoint = [&](std::int64_t epoch, std::int64_t batch_done) {
    if (options.out_dir.empty()) return;
    Checkpoint c;
    c.config = config;
    c.epoch = epoch;
    c.batch_in_epoch = batch_done;
    c.iteration = iteration;
    for (auto& [name, t] : params.named_tensors()) c.tensors.emplace_back(name, t);
    c.optimizer = opt;
    save_checkpoint(ckpt_path, c);
  };
  auto run_eval = [&](MetricsRow& row) {
    if (eval_idx.empty()) return false;
    result.last_eval = evaluate_samples(full, params, data, eval_idx, config);
    result.evaluated = true;
    row.evaluated = true;
    for (int b = 0; b < 3; ++b) row.ap[b] = mean_ap(result.last_eval, kBuckets[b]);
    return true;
  };

  bool stop = false;
  for (std::int64_t epoch = start_epoch; epoch < tc.epochs && !stop; ++epoch) {
    const auto order = shuffle_stream(train_idx, tc.shuffle_buffer, Rng::derive(tc.seed, 0x5348, epoch).next());
    for (std::int64_t b = epoch == start_epoch ? start_batch : 0; b < batches; ++b) {
      if (tc.max_iterations > 0 && iteration >= tc.max_iterations) {
        checkpoint(epoch, b);
        stop = true;
        break;
      }
      const auto first = static_cast<std::size_t>(b * tc.batch);
      const auto last = std::min(order.size(), first + static_cast<std::size_t>(tc.batch));
      std::vector<SequenceSample> samples;
      for (auto j = first; j < last; ++j) {
        auto s = data.sample(order[j], config.data.delta_t_ms, config.model.sequence_length);
        if (tc.augment.enabled) {
          Rng rng = Rng::derive(tc.seed, static_cast<std::uint64_t>(epoch) + 1, j);
          s = augment(std::move(s), tc.augment, rng);
        }
        samples.push_back(resize_sample(std::move(s), config.model.input_height, config.model.input_width));
      }
      std::vector<const SequenceSample*> ptrs;
      for (const auto& s : samples) ptrs.push_back(&s);
      const auto n = static_cast<std::int64_t>(ptrs.size());
      const ModelGraph& graph = graphs.get(n);

      TargetMap targets(n, graph.head, graph.grid_h, graph.grid_w);
      AssignOptions ao;
      ao.stride_px = static_cast<double>(config.model.total_stride());
      ao.ignore_iou = tc.ignore_iou;
      ao.image_width = static_cast<double>(config.model.input_width);
      ao.image_height = static_cast<double>(config.model.input_height);
      for (std::int64_t k = 0; k < n; ++k) assign_targets(samples[k].labels, config.model.anchors, ao, targets, k);
      result.collisions += targets.collisions;

      for (auto& p : trainable) p.zero_grad();
      const Tensor head = forward(graph, params, to_tensor(ptrs), {NormMode::train, ConvAlgorithm::im2col});
      LossBreakdown parts;
      const Tensor loss = detection_loss(head, targets, tc.loss, &parts);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss at iteration " + std::to_string(iteration) +
                           "; last good checkpoint kept");
      }
      backward(loss);
      const double epoch_pos = static_cast<double>(iteration) * tc.batch / static_cast<double>(train_idx.size());
      const double lr = lr_at(epoch_pos, tc.lr0, tc.lr_decay_epochs, tc.lr_decay_factor);
      adam_step(trainable, opt, lr, tc.adam);
      ++iteration;

      MetricsRow row;
      row.iteration = iteration;
      row.epoch = epoch_pos;
      row.lr = lr;
      row.loss = parts;
      const bool epoch_end = b + 1 == batches;
      if ((tc.eval_every_iterations > 0 && iteration % tc.eval_every_iterations == 0) ||
          (epoch_end && tc.eval_every > 0 && (epoch + 1) % tc.eval_every == 0)) {
        run_eval(row);
      }
      if (metrics.is_open()) {
        metrics << metrics_csv_row(row);
        metrics.flush();
      }
      if (options.on_row) options.on_row(row);
      result.metrics.push_back(row);
      if (tc.stop_at_perfect && row.evaluated) {
        bool perfect = true;
        for (const auto& e : result.last_eval.entries) {
          if (e.bucket == Difficulty::easy && e.num_gt > 0 && e.ap != 1.0) perfect = false;
        }
        if (perfect) {
          checkpoint(epoch + (epoch_end ? 1 : 0), epoch_end ? 0 : b + 1);
          stop = true;
          break;
        }
      }
    }
    if (!stop) {
      checkpoint(epoch + 1, 0);
      result.epochs_done = epoch + 1;
    } else {
      result.epochs_done = epoch;
    }
  }
  result.iterations = iteration;
  result.rejected_steps = opt.rejected;
  result.params = params;
  return result;
}

}  // namespace tfn
