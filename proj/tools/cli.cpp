#include "cli.hpp"

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <map>
#include <sstream>

#include "plot.hpp"
#include "tfn/anchors.hpp"
#include "tfn/data.hpp"
#include "tfn/eval.hpp"
#include "tfn/model.hpp"
#include "tfn/training.hpp"

#ifndef TFN_BUILD_ID
#define TFN_BUILD_ID "unknown"
#endif

extern char** environ;

namespace tfn::cli {

namespace {

namespace fs = std::filesystem;

// Bad invocation: missing inputs, conflicting flags.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm g{};
  gmtime_r(&t, &g);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &g);
  return buf;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::string fmt(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

struct Invocation {
  std::string command;
  std::vector<std::string> args;
};

// Written before anything else lands in the output location.
void write_manifest(const fs::path& path, const Invocation& inv, const std::string& config_path, std::uint64_t seed,
                    const fs::path& output) {
  nlohmann::ordered_json j;
  j["command"] = inv.command;
  j["args"] = inv.args;
  j["config"] = config_path;
  j["seed"] = seed;
  j["build_id"] = TFN_BUILD_ID;
  j["started_at"] = utc_now();
  j["output"] = output.string();
  write_text(path, j.dump(2) + "\n");
}

// KITTI text files below `root`, keyed by their path relative to root with
// any "label" directory component and the extension removed, so that
// root/seq0000/label/000003.txt and det/seq0000/000003.txt share one id.
std::map<std::string, fs::path> label_files(const fs::path& root) {
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".txt") continue;
    const auto name = entry.path().filename().string();
    if (name == "manifest.txt" || name == "timestamps.txt") continue;
    fs::path id, rel = fs::relative(entry.path(), root);
    for (const auto& part : rel.replace_extension()) {
      if (part != "label") id /= part;
    }
    out.emplace(id.generic_string(), entry.path());
  }
  return out;
}

void require_dir(const fs::path& dir, const std::string& what) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw UsageError("cannot read " + what + " directory '" + dir.string() + "'");
}

std::vector<GroundTruthObject> read_labels(const fs::path& path, const std::vector<std::string>& classes) {
  try {
    return parse_kitti_labels(read_text(path), classes);
  } catch (const LabelParseError& e) {
    throw LabelParseError(e.field(), path.string() + ": " + e.what());
  }
}

std::vector<Detection> read_detections(const fs::path& path, const std::vector<std::string>& classes) {
  try {
    return parse_kitti_detections(read_text(path), classes);
  } catch (const LabelParseError& e) {
    throw LabelParseError(e.field(), path.string() + ": " + e.what());
  }
}

std::vector<std::string> parse_classes(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& c : split(text, ',')) {
    if (!trim(c).empty()) out.push_back(trim(c));
  }
  if (out.empty()) throw UsageError("--classes needs at least one name");
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration from --config plus flag overrides

struct RunFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string data;
  double delta_t_ms = 0;
  int seq_len = 0;
  std::string arch, fusion, temporal_padding;
  std::vector<std::string> sets;
  CLI::Option *seed_opt = nullptr, *dt_opt = nullptr, *len_opt = nullptr;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run config file (key = value)");
    seed_opt = app->add_option("--seed", seed, "Random seed");
    app->add_option("--data", data, "Dataset root");
    dt_opt = app->add_option("--delta-t-ms", delta_t_ms, "Temporal distance between input frames");
    len_opt = app->add_option("--seq-len", seq_len, "Frames per input sequence");
    app->add_option("--arch", arch, "esf, lsf or single");
    app->add_option("--fusion", fusion, "t11, t33, t55, incv1, incv2, maxpool or meanpool");
    app->add_option("--temporal-padding", temporal_padding, "on or off");
    app->add_option("--set", sets, "Extra override, key=value (repeatable)");
  }

  void apply(KeyValues& kv) const {
    if (*seed_opt) kv.set("seed", std::to_string(seed));
    if (!data.empty()) kv.set("data", data);
    if (*dt_opt) kv.set("delta_t_ms", format_double(delta_t_ms));
    if (*len_opt) kv.set("seq_len", std::to_string(seq_len));
    if (!arch.empty()) kv.set("arch", arch);
    if (!fusion.empty()) kv.set("fusion", fusion);
    if (!temporal_padding.empty()) kv.set("temporal_padding", temporal_padding);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
  }

  KeyValues base() const {
    if (config.empty()) return {};
    std::error_code ec;
    if (!fs::is_regular_file(config, ec)) throw UsageError("cannot read config '" + config + "'");
    return KeyValues::load(config);
  }
};

RunConfig to_run_config(const KeyValues& kv) {
  try {
    auto c = read_run_config(kv);
    c.validate();
    return c;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// anchors

struct AnchorsArgs {
  std::string labels, out, classes = "Car,Pedestrian";
  std::size_t k = 8;
  std::uint64_t seed = 0;
  double scale_x = 1, scale_y = 1;
};

int cmd_anchors(const AnchorsArgs& a, const Invocation& inv, std::ostream& out) {
  require_dir(a.labels, "label");
  if (a.k == 0) throw UsageError("--k must be positive");
  const auto classes = parse_classes(a.classes);
  std::vector<AnchorShape> shapes;
  for (const auto& [id, path] : label_files(a.labels)) {
    for (const auto& gt : read_labels(path, classes)) {
      if (!gt.dont_care) shapes.push_back({gt.box.w * a.scale_x, gt.box.h * a.scale_y});
    }
  }
  if (shapes.size() < a.k) {
    throw DataError("found " + std::to_string(shapes.size()) + " labeled boxes, need at least k = " +
                    std::to_string(a.k));
  }
  const fs::path dir = a.out;
  write_manifest(dir / "manifest.json", inv, "", a.seed, dir);
  const auto result = kmeans_iou(shapes, {a.k, a.seed, 100});
  write_text(dir / "anchors.csv", anchors_to_csv(result.anchors));
  write_text(dir / "anchors.svg", anchors_to_svg(result.anchors));
  out << "anchors = " << format_anchors(result.anchors) << "\n";
  out << "boxes " << shapes.size() << ", mean 1-IoU " << fmt(result.objective_history.back()) << ", iterations "
      << result.iterations << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// profile

int cmd_profile(const RunFlags& flags, const std::string& out_dir, const Invocation& inv, std::ostream& out) {
  auto kv = flags.base();
  flags.apply(kv);
  const auto config = to_run_config(kv);
  const auto report = profile(build_model(config.model, 1));
  const auto csv = profile_csv(report);
  if (out_dir.empty()) {
    out << csv;
    return kOk;
  }
  write_manifest(fs::path(out_dir) / "manifest.json", inv, flags.config, config.train.seed, out_dir);
  write_text(fs::path(out_dir) / "profile.csv", csv);
  out << "params " << report.params_total << ", MACs " << report.macs_total << ", peak feature map "
      << report.peak_feature_map_elements << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

// Mean AP over classes per bucket, read back from an eval.csv.
std::array<double, 3> mean_ap_from_csv(const std::string& csv) {
  std::array<double, 3> sum{0, 0, 0};
  std::array<int, 3> count{0, 0, 0};
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto f = split(line, ',');
    if (f.size() < 3) continue;
    const int b = f[1] == "easy" ? 0 : f[1] == "moderate" ? 1 : 2;
    sum[b] += std::stod(f[2]);
    ++count[b];
  }
  for (int b = 0; b < 3; ++b) sum[b] = count[b] ? sum[b] / count[b] : std::nan("");
  return sum;
}

void train_one(const RunConfig& config, const fs::path& dir, bool resume, std::ostream& out, std::ostream& err) {
  if (config.data.root.empty()) throw UsageError("no dataset: pass --data or set 'data' in the config");
  require_dir(config.data.root, "dataset");
  write_text(dir / "config.cfg", write_run_config(config).to_text());
  const auto data = Dataset::load(config.data.root, config.data.classes);
  if (data.size() == 0) throw DataError("dataset '" + config.data.root.string() + "' has no labeled frames");

  TrainOptions options;
  options.out_dir = dir;
  if (resume) {
    options.resume = dir / "checkpoint.tfnc";
    if (!fs::exists(options.resume)) throw UsageError("nothing to resume: " + options.resume.string() + " missing");
  }
  options.on_row = [&](const MetricsRow& r) {
    if (r.iteration % 50 == 0 || r.evaluated) {
      err << "iter " << r.iteration << " epoch " << fmt(r.epoch, 2) << " loss " << fmt(r.loss.total(), 4);
      if (r.evaluated) err << " AP " << fmt(r.ap[0], 3) << "/" << fmt(r.ap[1], 3) << "/" << fmt(r.ap[2], 3);
      err << "\n";
    }
  };
  auto result = train(config, data, options);

  // eval.csv always scores the final weights.
  EvalResult eval = result.last_eval;
  bool have_eval = result.evaluated && !result.metrics.empty() && result.metrics.back().evaluated;
  if (!have_eval) {
    const auto [train_idx, val_idx] = split_indices(data, config.train);
    const auto& idx = config.train.eval_on_train ? train_idx : val_idx;
    if (!idx.empty()) {
      eval = evaluate_samples(build_model(config.model, 1), result.params, data, idx, config);
      have_eval = true;
    }
  }
  out << "iterations " << result.iterations << ", rejected steps " << result.rejected_steps << "\n";
  if (have_eval) {
    write_text(dir / "eval.csv", eval_csv(eval, config.data.classes));
    out << "AP easy " << fmt(mean_ap(eval, Difficulty::easy)) << " moderate "
        << fmt(mean_ap(eval, Difficulty::moderate)) << " hard " << fmt(mean_ap(eval, Difficulty::hard)) << "\n";
  }
}

struct SweepArgs {
  bool enabled = false;
  std::string arch, seq_len, fusion, delta_t;
  int jobs = 1;
};

fs::path self_exe() {
  if (const char* env = std::getenv("TFN_EXE")) return env;
  return fs::read_symlink("/proc/self/exe");
}

// Child `tfn train` writing its console output to <dir>/log.txt.
pid_t spawn_train(const fs::path& cfg, const fs::path& dir) {
  const auto exe = self_exe().string();
  const auto log = (dir / "log.txt").string();
  std::vector<std::string> args{exe, "train", "--config", cfg.string(), "--out", dir.string()};
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  argv.push_back(nullptr);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  posix_spawn_file_actions_adddup2(&fa, 1, 2);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, exe.c_str(), &fa, nullptr, argv.data(), environ);
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) throw std::runtime_error("cannot start " + exe);
  return pid;
}

int cmd_sweep(const KeyValues& base, const SweepArgs& s, const fs::path& dir, const std::string& config_path,
              const Invocation& inv, std::ostream& out, std::ostream& err) {
  const auto base_cfg = to_run_config(base);
  auto grid = [](const std::string& text, std::string fallback) {
    std::vector<std::string> v;
    for (const auto& x : split(text.empty() ? fallback : text, ',')) {
      if (!trim(x).empty()) v.push_back(trim(x));
    }
    return v;
  };
  struct Point {
    std::string arch, fusion;
    int len = 0;
    double dt = 0;
    KeyValues kv;
    std::string name;
  };
  std::vector<Point> points;
  for (const auto& arch : grid(s.arch, to_string(base_cfg.model.arch))) {
    for (const auto& len : grid(s.seq_len, std::to_string(base_cfg.model.sequence_length))) {
      for (const auto& fusion : grid(s.fusion, to_string(base_cfg.model.fusion_kind))) {
        for (const auto& dt : grid(s.delta_t, format_double(base_cfg.data.delta_t_ms))) {
          Point p{arch, fusion, 0, 0, base, ""};
          p.kv.set("arch", arch);
          p.kv.set("seq_len", len);
          p.kv.set("fusion", fusion);
          p.kv.set("delta_t_ms", dt);
          const auto c = to_run_config(p.kv);  // reject bad grid values before any run starts
          p.arch = to_string(c.model.arch);
          p.fusion = to_string(c.model.fusion_kind);
          p.len = c.model.sequence_length;
          p.dt = c.data.delta_t_ms;
          p.name = p.arch + "_t" + std::to_string(p.len) + "_" + p.fusion + "_dt" + format_double(p.dt);
          points.push_back(std::move(p));
        }
      }
    }
  }
  if (s.jobs < 1) throw UsageError("--jobs must be at least 1");
  write_manifest(dir / "manifest.json", inv, config_path, base_cfg.train.seed, dir);

  int status_all = kOk;
  if (s.jobs == 1) {
    for (const auto& p : points) {
      err << "sweep run " << p.name << "\n";
      const auto run_dir = dir / p.name;
      write_text(run_dir / "sweep_point.cfg", p.kv.to_text());
      Invocation child{"train", {"--config", (run_dir / "sweep_point.cfg").string(), "--out", run_dir.string()}};
      write_manifest(run_dir / "manifest.json", child, (run_dir / "sweep_point.cfg").string(), base_cfg.train.seed,
                     run_dir);
      std::ostringstream log;
      train_one(to_run_config(p.kv), run_dir, false, log, log);
      write_text(run_dir / "log.txt", log.str());
    }
  } else {
    std::map<pid_t, std::string> running;
    auto reap = [&] {
      int status = 0;
      const pid_t pid = wait(&status);
      if (pid <= 0) return;
      const int code = WIFEXITED(status) ? WEXITSTATUS(status) : kFailure;
      if (code != kOk) {
        err << "sweep run " << running[pid] << " failed with exit code " << code << "\n";
        status_all = std::max(status_all, code);
      }
      running.erase(pid);
    };
    for (const auto& p : points) {
      while (static_cast<int>(running.size()) >= s.jobs) reap();
      const auto run_dir = dir / p.name;
      write_text(run_dir / "sweep_point.cfg", p.kv.to_text());
      err << "sweep run " << p.name << " started\n";
      running[spawn_train(run_dir / "sweep_point.cfg", run_dir)] = p.name;
    }
    while (!running.empty()) reap();
  }

  std::string csv = "arch,images,fusion,delta_t_ms,ap_easy,ap_moderate,ap_hard\n";
  for (const auto& p : points) {
    csv += p.arch + "," + std::to_string(p.len) + "," + p.fusion + "," + format_double(p.dt);
    const auto eval_path = dir / p.name / "eval.csv";
    if (fs::exists(eval_path)) {
      for (double ap : mean_ap_from_csv(read_text(eval_path))) csv += "," + fmt(ap);
    } else {
      csv += ",,,";
    }
    csv += "\n";
  }
  write_text(dir / "sweep.csv", csv);
  out << csv;
  return status_all;
}

int cmd_train(const RunFlags& flags, const std::string& out_dir, bool resume, const SweepArgs& sweep,
              const Invocation& inv, std::ostream& out, std::ostream& err) {
  const fs::path dir = out_dir;
  KeyValues kv;
  if (resume && flags.config.empty()) {
    const auto ck_path = dir / "checkpoint.tfnc";
    if (!fs::exists(ck_path)) throw UsageError("nothing to resume: " + ck_path.string() + " missing");
    kv = write_run_config(load_checkpoint(ck_path).config);
  } else {
    kv = flags.base();
  }
  flags.apply(kv);
  if (sweep.enabled) {
    if (resume) throw UsageError("--resume does not combine with --sweep");
    return cmd_sweep(kv, sweep, dir, flags.config, inv, out, err);
  }
  const auto config = to_run_config(kv);
  write_manifest(dir / "manifest.json", inv, flags.config, config.train.seed, dir);
  train_one(config, dir, resume, out, err);
  return kOk;
}

// ---------------------------------------------------------------------------
// predict

struct PredictArgs {
  std::string checkpoint, data, sequence, out;
  double conf = 0.5;
  double nms_iou = -1;
};

int cmd_predict(const PredictArgs& a, const Invocation& inv, std::ostream& out) {
  if (!fs::is_regular_file(a.checkpoint)) throw UsageError("cannot read checkpoint '" + a.checkpoint + "'");
  const auto ck = load_checkpoint(a.checkpoint);
  const auto& config = ck.config;
  const fs::path root = a.data.empty() ? config.data.root : fs::path(a.data);
  if (root.empty()) throw UsageError("no dataset: pass --data");
  require_dir(root, "dataset");

  const fs::path dir = a.out;
  write_manifest(dir / "manifest.json", inv, a.checkpoint, config.train.seed, dir);

  const auto data = Dataset::load(root, config.data.classes, true);
  std::vector<std::size_t> selected;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& id = data.samples()[i].id;
    if (a.sequence.empty() || id.substr(0, id.find('/')) == a.sequence) selected.push_back(i);
  }
  if (selected.empty()) throw UsageError("no frames to predict" + (a.sequence.empty() ? "" : " in '" + a.sequence + "'"));

  const auto graph = build_model(config.model, 1);
  auto params = init_params(graph, 0);
  restore_params(ck, params);
  InferenceConfig inf = config.inference;
  inf.conf_threshold = a.conf;
  if (a.nms_iou > 0) inf.nms_iou = a.nms_iou;

  const double in_w = static_cast<double>(config.model.input_width);
  const double in_h = static_cast<double>(config.model.input_height);
  std::size_t total = 0;
  for (std::size_t i : selected) {
    auto s = data.sample(i, config.data.delta_t_ms, config.model.sequence_length);
    const double w = static_cast<double>(s.frames.back().width), h = static_cast<double>(s.frames.back().height);
    const auto rs = resize_sample(std::move(s), config.model.input_height, config.model.input_width);
    const auto dets = detect(graph, params, to_tensor({&rs}), inf)[0];
    std::string text;
    for (const auto& d : dets) {
      if (!std::isfinite(d.confidence) || !std::isfinite(d.box.cx) || !std::isfinite(d.box.w)) {
        throw NumericError("non-finite detection in " + data.samples()[i].id);
      }
      // Back to image pixels, clipped for display.
      const double l = std::clamp(d.box.left() * w / in_w, 0.0, w), r = std::clamp(d.box.right() * w / in_w, 0.0, w);
      const double t = std::clamp(d.box.top() * h / in_h, 0.0, h), b = std::clamp(d.box.bottom() * h / in_h, 0.0, h);
      if (r <= l || b <= t) continue;
      Detection c = d;
      c.box = Box2D::from_corners(l, t, r, b, d.class_id);
      text += to_kitti_detection(c, config.data.classes) + "\n";
      ++total;
    }
    write_text(dir / (data.samples()[i].id + ".txt"), text);
  }
  out << "frames " << selected.size() << ", detections " << total << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string gt, det, out, classes = "Car,Pedestrian", iou = "0.7,0.5";
};

int cmd_eval(const EvalArgs& a, const Invocation& inv, std::ostream& out) {
  require_dir(a.gt, "ground-truth");
  require_dir(a.det, "detection");
  const auto classes = parse_classes(a.classes);
  EvalOptions options;
  options.iou_thresholds.clear();
  for (const auto& x : split(a.iou, ',')) {
    try {
      options.iou_thresholds.push_back(std::stod(x));
    } catch (const std::exception&) {
      throw UsageError("--iou expects numbers, got '" + x + "'");
    }
  }
  if (options.iou_thresholds.size() != classes.size()) throw UsageError("--iou needs one threshold per class");

  const auto gt_files = label_files(a.gt);
  if (gt_files.empty()) throw DataError("no label files below '" + a.gt + "'");
  const auto det_files = label_files(a.det);
  const fs::path dir = a.out;
  write_manifest(dir / "manifest.json", inv, "", 0, dir);

  std::vector<ImageGroundTruth> truth;
  std::vector<ImageDetections> dets;
  for (const auto& [id, path] : gt_files) {
    truth.push_back({id, read_labels(path, classes)});
    const auto it = det_files.find(id);
    dets.push_back({id, it == det_files.end() ? std::vector<Detection>{}
                                              : read_detections(it->second, classes)});
  }
  const auto result = evaluate(dets, truth, options);
  write_text(dir / "eval.csv", eval_csv(result, classes));

  std::string pr = "class,difficulty,rank,precision,recall\n";
  std::vector<plot::Series> series;
  for (const auto& e : result.entries) {
    const auto name = classes[static_cast<std::size_t>(e.class_id)];
    plot::Series s{name + " " + to_string(e.bucket), {}, {}};
    for (std::size_t r = 0; r < e.precision.size(); ++r) {
      pr += name + "," + to_string(e.bucket) + "," + std::to_string(r + 1) + "," + fmt(e.precision[r]) + "," +
            fmt(e.recall[r]) + "\n";
      s.x.push_back(e.recall[r]);
      s.y.push_back(e.precision[r]);
    }
    series.push_back(std::move(s));
    out << name << " " << to_string(e.bucket) << " AP " << fmt(e.ap) << " (gt " << e.num_gt << ")\n";
  }
  write_text(dir / "pr.csv", pr);
  plot::ChartOptions co{"Precision / recall", "recall", "precision"};
  co.x_lo = 0, co.x_hi = 1, co.y_lo = 0, co.y_hi = 1;
  write_text(dir / "pr.svg", plot::line_chart(series, co));
  return kOk;
}

// ---------------------------------------------------------------------------
// plot

struct Csv {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int col(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  }
};

Csv parse_csv(const std::string& text) {
  Csv csv;
  std::istringstream is(text);
  std::string line;
  if (std::getline(is, line)) csv.header = split(trim(line), ',');
  while (std::getline(is, line)) {
    if (!trim(line).empty()) csv.rows.push_back(split(trim(line), ','));
  }
  return csv;
}

double cell(const std::vector<std::string>& row, int c) {
  if (c < 0 || c >= static_cast<int>(row.size()) || row[c].empty()) return std::nan("");
  try {
    return std::stod(row[c]);
  } catch (const std::exception&) {
    throw DataError("bad number '" + row[c] + "'");
  }
}

int cmd_plot(const std::string& input, const std::string& output, bool ap, const Invocation& inv, std::ostream& out) {
  if (!fs::is_regular_file(input)) throw UsageError("cannot read '" + input + "'");
  const auto csv = parse_csv(read_text(input));
  std::vector<plot::Series> series;
  plot::ChartOptions co;
  if (csv.col("iteration") >= 0 && csv.col("loss") >= 0) {
    const int it = csv.col("iteration");
    const std::vector<std::string> cols = ap ? std::vector<std::string>{"ap_easy", "ap_moderate", "ap_hard"}
                                             : std::vector<std::string>{"loss", "coord", "obj", "noobj", "class"};
    for (const auto& name : cols) {
      plot::Series s{name, {}, {}};
      const int c = csv.col(name);
      for (const auto& row : csv.rows) {
        const double y = cell(row, c);
        if (std::isnan(y)) continue;
        s.x.push_back(cell(row, it));
        s.y.push_back(y);
      }
      series.push_back(std::move(s));
    }
    co = ap ? plot::ChartOptions{"Average precision", "iteration", "AP"}
            : plot::ChartOptions{"Training loss", "iteration", "loss"};
    if (ap) co.y_lo = 0, co.y_hi = 1;
    co.log_y = !ap;
  } else if (csv.col("precision") >= 0 && csv.col("recall") >= 0) {
    const int c_cls = csv.col("class"), c_b = csv.col("difficulty");
    const int c_p = csv.col("precision"), c_r = csv.col("recall");
    std::map<std::string, std::size_t> index;
    for (const auto& row : csv.rows) {
      if (c_cls < 0 || c_b < 0 || std::max(c_cls, c_b) >= static_cast<int>(row.size())) continue;
      const auto key = row[c_cls] + " " + row[c_b];
      auto [pos, fresh] = index.emplace(key, series.size());
      if (fresh) series.push_back({key, {}, {}});
      series[pos->second].x.push_back(cell(row, c_r));
      series[pos->second].y.push_back(cell(row, c_p));
    }
    co = {"Precision / recall", "recall", "precision"};
    co.x_lo = 0, co.x_hi = 1, co.y_lo = 0, co.y_hi = 1;
  } else {
    throw DataError("'" + input + "' is neither a metrics.csv nor a pr.csv");
  }
  write_manifest(output + ".manifest.json", inv, "", 0, output);
  write_text(output, plot::line_chart(series, co));
  out << "wrote " << output << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// synth

int cmd_synth(const SynthOptions& o, const std::string& out_dir, const Invocation& inv, std::ostream& out) {
  if (o.sequences < 1 || o.frames < 1 || o.width < 16 || o.height < 16 || !(o.fps > 0)) {
    throw UsageError("synth needs positive counts, fps and at least 16x16 frames");
  }
  write_manifest(fs::path(out_dir) / "manifest.json", inv, "", o.seed, out_dir);
  generate_synthetic_dataset(out_dir, o);
  out << "wrote " << o.sequences << " sequences of " << o.frames << " frames to " << out_dir << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Temporal feature network detector toolkit"};
  app.require_subcommand(1);

  auto* anchors = app.add_subcommand("anchors", "Cluster label boxes into anchor shapes");
  AnchorsArgs aa;
  anchors->add_option("--labels", aa.labels, "KITTI label directory (searched recursively)")->required();
  anchors->add_option("--k", aa.k, "Number of anchors");
  anchors->add_option("--seed", aa.seed, "Random seed");
  anchors->add_option("--classes", aa.classes, "Comma-separated class names");
  anchors->add_option("--scale-x", aa.scale_x, "Width factor from label to model pixels");
  anchors->add_option("--scale-y", aa.scale_y, "Height factor from label to model pixels");
  anchors->add_option("--out", aa.out, "Output directory")->required();

  auto* prof = app.add_subcommand("profile", "Per-block parameters, MACs and peak feature-map size");
  RunFlags prof_flags;
  std::string prof_out;
  prof_flags.add(prof);
  prof->add_option("--out", prof_out, "Output directory (default: CSV to stdout)");

  auto* tr = app.add_subcommand("train", "Train a detector, or a grid of them with --sweep");
  RunFlags tr_flags;
  std::string tr_out;
  bool resume = false;
  SweepArgs sweep;
  tr_flags.add(tr);
  tr->add_option("--out", tr_out, "Output directory")->required();
  tr->add_flag("--resume", resume, "Continue from <out>/checkpoint.tfnc");
  tr->add_flag("--sweep", sweep.enabled, "Train every combination of the --sweep-* grids");
  tr->add_option("--sweep-arch", sweep.arch, "Comma-separated architectures");
  tr->add_option("--sweep-seq-len", sweep.seq_len, "Comma-separated sequence lengths");
  tr->add_option("--sweep-fusion", sweep.fusion, "Comma-separated fusion kinds");
  tr->add_option("--sweep-delta-t", sweep.delta_t, "Comma-separated temporal distances in ms");
  tr->add_option("--jobs", sweep.jobs, "Sweep runs in parallel, as separate processes");

  auto* pred = app.add_subcommand("predict", "Write KITTI result files for every frame");
  PredictArgs pa;
  pred->add_option("--checkpoint", pa.checkpoint, "Trained checkpoint")->required();
  pred->add_option("--data", pa.data, "Dataset root (default: the one in the checkpoint config)");
  pred->add_option("--sequence", pa.sequence, "Only this sequence");
  pred->add_option("--conf", pa.conf, "Confidence threshold");
  pred->add_option("--nms-iou", pa.nms_iou, "NMS IoU threshold (default: from the config)");
  pred->add_option("--out", pa.out, "Output directory")->required();

  auto* ev = app.add_subcommand("eval", "Average precision of result files against labels");
  EvalArgs ea;
  ev->add_option("--gt", ea.gt, "Ground-truth label directory")->required();
  ev->add_option("--det", ea.det, "Detection result directory")->required();
  ev->add_option("--classes", ea.classes, "Comma-separated class names");
  ev->add_option("--iou", ea.iou, "Comma-separated match IoU per class");
  ev->add_option("--out", ea.out, "Output directory")->required();

  auto* pl = app.add_subcommand("plot", "Render metrics.csv or pr.csv as SVG");
  std::string pl_in, pl_out;
  bool pl_ap = false;
  pl->add_option("--input", pl_in, "metrics.csv or pr.csv")->required();
  pl->add_option("--out", pl_out, "SVG file")->required();
  pl->add_flag("--ap", pl_ap, "Plot AP instead of loss from metrics.csv");

  auto* sy = app.add_subcommand("synth", "Generate a synthetic labeled sequence dataset");
  SynthOptions so;
  std::string sy_out;
  sy->add_option("--out", sy_out, "Dataset root")->required();
  sy->add_option("--sequences", so.sequences, "Number of sequences");
  sy->add_option("--frames", so.frames, "Frames per sequence");
  sy->add_option("--width", so.width, "Frame width");
  sy->add_option("--height", so.height, "Frame height");
  sy->add_option("--fps", so.fps, "Frame rate");
  sy->add_option("--max-objects", so.max_objects, "Objects per sequence at most");
  sy->add_option("--seed", so.seed, "Random seed");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
    Invocation inv{app.get_subcommands().front()->get_name(), args};
    if (anchors->parsed()) return cmd_anchors(aa, inv, out);
    if (prof->parsed()) return cmd_profile(prof_flags, prof_out, inv, out);
    if (tr->parsed()) return cmd_train(tr_flags, tr_out, resume, sweep, inv, out, err);
    if (pred->parsed()) return cmd_predict(pa, inv, out);
    if (ev->parsed()) return cmd_eval(ea, inv, out);
    if (pl->parsed()) return cmd_plot(pl_in, pl_out, pl_ap, inv, out);
    if (sy->parsed()) return cmd_synth(so, sy_out, inv, out);
    return kUsage;
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kOk : kUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const LabelParseError& e) {
    err << "label error: " << e.what() << "\n";
    return kData;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace tfn::cli
