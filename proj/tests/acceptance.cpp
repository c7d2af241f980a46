// Acceptance checks: one PASS/FAIL line per criterion. Tolerances and budgets
// are pinned below; `--only 3,5` runs a subset.

#include <fcntl.h>
#include <spawn.h>
#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "oracles.hpp"
#include "test_support.hpp"
#include "tfn/anchors.hpp"
#include "tfn/model.hpp"
#include "tfn/training.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace tfn;
using namespace tfn::testing;

namespace {

constexpr int kGradInstances = 20;
constexpr double kGradTolerance = 1e-4;
constexpr double kGradBudgetSeconds = 120;
constexpr std::int64_t kExpectedBoxes = 32 * 18 * 8;
constexpr std::int64_t kParamsLow = 4'500'000;
constexpr std::int64_t kParamsHigh = 5'500'000;
constexpr double kShapeBudgetSeconds = 300;
constexpr int kNmsScenes = 1000;
constexpr int kApLists = 200;
constexpr double kApTolerance = 1e-12;
constexpr int kKMeansRuns = 100;
constexpr double kClusterTolerancePx = 1.0;
constexpr double kLoopOracleTolerance = 1e-10;
constexpr std::int64_t kOverfitIterations = 2000;
constexpr double kOverfitBudgetSeconds = 30 * 60;

const fs::path kSourceDir = TFN_SOURCE_DIR;
const fs::path kTfnExe = TFN_EXE_PATH;

struct Outcome {
  bool pass = true;
  std::string detail;
};

class Clock {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("tfn_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ConvSpec make_spec(Extent3 k, Extent3 s, Extent3 p, std::int64_t out) {
  ConvSpec spec;
  spec.kernel = k;
  spec.stride = s;
  spec.padding = p;
  spec.out_channels = out;
  return spec;
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

// Distinct values at least 0.01 apart, so max-pool winners and relu signs do
// not flip within a finite-difference step.
Tensor spaced_tensor(const Shape& shape, std::mt19937_64& rng) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  std::vector<Real> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<Real>(-1.0 + 0.01 * (static_cast<double>(i) + 0.5));
  std::shuffle(v.begin(), v.end(), rng);
  return Tensor::from_data(shape, std::move(v), true);
}

Outcome criterion_gradients() {
  Clock clock;
  std::map<std::string, double> worst;
  std::map<std::string, int> count;
  auto record = [&](const std::string& op, const GradCheckResult& r) {
    worst[op] = std::max(worst[op], r.worst_relative_error);
    ++count[op];
  };
  for (int i = 0; i < kGradInstances; ++i) {
    std::mt19937_64 rng(1000 + i);
    std::uniform_int_distribution<int> pick(0, 1);
    const std::int64_t n = 1 + pick(rng), c = 1 + pick(rng) + pick(rng), t = 2 + pick(rng);
    const std::int64_t h = 3 + pick(rng) + pick(rng), w = 3 + pick(rng) + pick(rng);
    const std::int64_t co = 1 + pick(rng) + pick(rng);
    const std::int64_t kt = 1 + pick(rng), kh = pick(rng) ? 3 : 1, kw = pick(rng) ? 3 : 1;
    const std::int64_t st = 1 + pick(rng), sh = 1 + pick(rng);

    auto x = random_tensor({n, c, t, h, w}, rng);
    auto wt = random_tensor({co, c, kt, kh, kw}, rng);
    auto b = random_tensor({co}, rng);
    const auto spec = make_spec({kt, kh, kw}, {st, sh, 1}, {kt / 2, kh / 2, kw / 2}, co);
    record("conv3d", gradcheck([&] { return project(conv3d(x, wt, b, spec)); }, {x, wt, b}));
    record("conv3d_direct",
           gradcheck([&] { return project(conv3d(x, wt, b, spec, ConvAlgorithm::direct)); }, {x, wt, b}));

    auto x4 = random_tensor({n, c, h, w}, rng);
    auto w4 = random_tensor({co, c, kh, kw}, rng);
    const auto spec2 = make_spec({1, kh, kw}, {1, sh, 1}, {0, kh / 2, kw / 2}, co);
    record("conv2d", gradcheck([&] { return project(conv2d(x4, w4, b, spec2)); }, {x4, w4, b}));

    auto xs = spaced_tensor({n, c, t, h, w}, rng);
    const PoolSpec mx{PoolMode::max, {kt, 3, 3}, {st, 2, 2}, {0, 1, 1}};
    const PoolSpec mn{PoolMode::mean, {kt, 3, 3}, {st, 2, 2}, {0, 1, 1}};
    record("pool3d_max", gradcheck([&] { return project(pool3d(xs, mx)); }, {xs}));
    record("pool3d_mean", gradcheck([&] { return project(pool3d(x, mn)); }, {x}));
    record("relu", gradcheck([&] { return project(relu(xs)); }, {xs}));

    auto gamma = random_tensor({c}, rng, 0.5, 1.5);
    auto beta = random_tensor({c}, rng);
    auto rm = random_tensor({c}, rng, -0.5, 0.5, false);
    auto rv = random_tensor({c}, rng, 0.5, 1.5, false);
    BatchNormOptions train_mode, infer_mode;
    infer_mode.mode = NormMode::infer;
    record("batchnorm_train",
           gradcheck([&] { return project(batchnorm(x, gamma, beta, rm, rv, train_mode)); }, {x, gamma, beta}));
    record("batchnorm_infer",
           gradcheck([&] { return project(batchnorm(x, gamma, beta, rm, rv, infer_mode)); }, {x, gamma, beta}));

    auto y = random_tensor({n, 1 + pick(rng), t, h, w}, rng);
    record("concat_channels", gradcheck([&] { return project(concat_channels(x, y)); }, {x, y}));
    auto z = random_tensor({n, c, 1, h, w}, rng);
    record("squeeze_time", gradcheck([&] { return project(squeeze_time(z)); }, {z}));
    record("expand_time", gradcheck([&] { return project(expand_time(x4)); }, {x4}));
    auto u = random_tensor({n, c, t, h, w}, rng);
    record("add", gradcheck([&] { return project(add(x, u)); }, {x, u}));
    record("mul", gradcheck([&] { return project(mul(x, u)); }, {x, u}));
    record("scale", gradcheck([&] { return project(scale(x, 0.37)); }, {x}));
    record("sum", gradcheck([&] { return sum(mul(x, u)); }, {x, u}));
    std::vector<Real> wd(static_cast<std::size_t>(shape_numel(x.shape())));
    for (auto& v : wd) v = std::uniform_real_distribution<Real>(-1, 1)(rng);
    record("dot", gradcheck([&] { return dot(x, wd); }, {x}));

    // Detection loss on a random head with random targets.
    const AnchorSet anchors({{10, 30}, {24, 24}, {60, 45}});
    const HeadLayout layout{3, 2, 7 + pick(rng)};
    TargetMap targets(2, layout, 3, 4);
    Rng r(static_cast<std::uint64_t>(i) + 77);
    for (std::int64_t img = 0; img < 2; ++img) {
      std::vector<GroundTruthObject> gts(1 + r.below(4));
      for (auto& g : gts) {
        g.class_id = static_cast<int>(r.below(2));
        g.box = {r.uniform(0, 64), r.uniform(0, 48), r.uniform(8, 60), r.uniform(8, 50), g.class_id};
      }
      assign_targets(gts, anchors, {}, targets, img);
    }
    const LossWeights lw{r.uniform(1, 6), r.uniform(0.5, 2), r.uniform(0.1, 1), r.uniform(0.5, 2)};
    auto head = random_tensor({2, layout.channels(), 3, 4}, rng, -2.5, 2.5);
    record("detection_loss", gradcheck([&] { return detection_loss(head, targets, lw); }, {head}));
  }

  Outcome o;
  double overall = 0;
  std::string failing;
  for (const auto& [op, err] : worst) {
    overall = std::max(overall, err);
    if (!(err < kGradTolerance) || count[op] < kGradInstances) failing += " " + op;
  }
  const double s = clock.seconds();
  o.pass = failing.empty() && s < kGradBudgetSeconds;
  o.detail = fmt("%zu ops x %d instances, worst relative error %.2e (limit %.0e), %.1f s (limit %.0f s)",
                 worst.size(), kGradInstances, overall, kGradTolerance, s, kGradBudgetSeconds);
  if (!failing.empty()) o.detail += "; failing:" + failing;
  return o;
}

// ---------------------------------------------------------------------------
// 2. Head contract

Outcome criterion_head() {
  const ModelConfig config;
  const auto graph = build_model(config, 1);
  auto params = init_params(graph, 1);
  std::mt19937_64 rng(2);
  Tensor head;
  {
    NoGradGuard guard;
    head = forward(graph, params, random_tensor(graph.input_shape(1), rng, 0, 1, false), {NormMode::infer});
  }
  DecodeOptions all;
  all.stride_px = static_cast<double>(config.total_stride());
  all.conf_threshold = 0;
  const auto boxes = decode(head, graph.head, config.anchors, all, 0);
  Outcome o;
  o.pass = config.input_width == 512 && config.input_height == 288 && graph.grid_w == 32 && graph.grid_h == 18 &&
           head.shape() == Shape{1, graph.head.channels(), 18, 32} &&
           static_cast<std::int64_t>(boxes.size()) == kExpectedBoxes && graph.box_count() == kExpectedBoxes;
  o.detail = fmt("%s-%d at %lldx%lld: grid %lldx%lld, %zu decoded boxes (expected %lld)",
                 to_string(config.arch).c_str(), config.sequence_length, (long long)config.input_width,
                 (long long)config.input_height, (long long)graph.grid_w, (long long)graph.grid_h, boxes.size(),
                 (long long)kExpectedBoxes);
  return o;
}

// ---------------------------------------------------------------------------
// 3. Parameter budget

Outcome criterion_params() {
  const ModelConfig config;
  const auto total = profile(build_model(config)).params_total;

  // Parameter shapes do not depend on the input size, so the gradient count
  // runs at 64x32.
  auto small = config;
  small.input_width = 64;
  small.input_height = 32;
  const auto graph = build_model(small, 1);
  auto params = init_params(graph, 3);
  std::mt19937_64 rng(3);
  const auto head = forward(graph, params, random_tensor(graph.input_shape(1), rng, 0, 1, false), {});
  TargetMap targets(1, graph.head, graph.grid_h, graph.grid_w);
  GroundTruthObject car;
  car.class_id = 0;
  car.box = {30, 14, 40, 20, 0};
  AssignOptions ao;
  ao.image_width = 64;
  ao.image_height = 32;
  assign_targets({car}, small.anchors, ao, targets, 0);
  backward(detection_loss(head, targets));
  std::int64_t entries = 0;
  for (const auto& t : params.trainable()) {
    if (t.has_grad()) entries += static_cast<std::int64_t>(t.grad().size());
  }
  Outcome o;
  o.pass = total >= kParamsLow && total <= kParamsHigh && entries == total &&
           profile(graph).params_total == total;
  o.detail = fmt("profile total %lld in [%lld, %lld]; gradient entries after one backward pass %lld",
                 (long long)total, (long long)kParamsLow, (long long)kParamsHigh, (long long)entries);
  return o;
}

// ---------------------------------------------------------------------------
// 4. Shape and schedule invariants

Outcome criterion_shapes() {
  Clock clock;
  int combos = 0, forwards = 0;
  std::vector<std::string> problems;
  for (auto arch : {Arch::esf, Arch::lsf}) {
    for (int length : {2, 4, 6}) {
      for (auto kind : kAllFusionKinds) {
        for (bool padding : {false, true}) {
          ++combos;
          ModelConfig c;
          c.arch = arch;
          c.sequence_length = length;
          c.fusion_kind = kind;
          c.temporal_padding = padding;
          c.input_width = 64;  // default widths, reduced resolution
          c.input_height = 32;
          const auto name = to_string(arch) + "-" + std::to_string(length) + "-" + to_string(kind) +
                            (padding ? "-pad" : "-nopad");
          try {
            const auto g = build_model(c, 1);
            auto params = init_params(g, 4);
            std::mt19937_64 rng(length);
            NoGradGuard guard;
            const auto y = forward(g, params, random_tensor(g.input_shape(1), rng, 0, 1, false), {});
            ++forwards;
            if (y.shape() != g.blocks.back().output_shape) problems.push_back(name + ": forward shape");
            std::int64_t t_before_head = -1;
            for (std::size_t i = 0; i < g.blocks.size(); ++i) {
              const auto& b = g.blocks[i];
              if (b.kind == BlockKind::transition) {
                const std::int64_t f = b.transition.reduce_spatial ? 2 : 1;
                const auto& in = b.input_shape;
                const auto& out = b.output_shape;
                const auto r = in.size();
                bool kept = out.size() == r && out[0] == in[0];
                for (std::size_t a = 2; kept && a + 2 < r; ++a) kept = out[a] == in[a];
                if (!kept || out[r - 2] * f != in[r - 2] || out[r - 1] * f != in[r - 1]) {
                  problems.push_back(name + ": transition " + b.name);
                }
              }
              if (i + 1 < g.blocks.size() && g.blocks[i + 1].kind == BlockKind::head) {
                t_before_head = b.output_shape.size() == 5 ? b.output_shape[2] : 1;
              }
              if (b.kind == BlockKind::squeeze && b.input_shape[2] != 1) problems.push_back(name + ": squeeze T");
            }
            if (t_before_head != 1) problems.push_back(name + ": T before head");
          } catch (const std::exception& e) {
            problems.push_back(name + ": " + e.what());
          }
        }
      }
    }
  }
  // Equal length: every ESF fusion block precedes every LSF one.
  for (int length : {2, 4, 6}) {
    for (auto kind : kAllFusionKinds) {
      ModelConfig e, l;
      e.arch = Arch::esf;
      l.arch = Arch::lsf;
      e.sequence_length = l.sequence_length = length;
      e.fusion_kind = l.fusion_kind = kind;
      const auto ge = build_model(e), gl = build_model(l);
      for (auto i : ge.fusion_indices) {
        for (auto j : gl.fusion_indices) {
          if (!(i < j)) problems.push_back("ESF/LSF order at length " + std::to_string(length));
        }
      }
    }
  }
  const double s = clock.seconds();
  Outcome o;
  o.pass = problems.empty() && combos == 84 && forwards == 84 && s < kShapeBudgetSeconds;
  o.detail = fmt("%d combinations built, %d forwards, %zu violations, %.1f s (limit %.0f s)", combos, forwards,
                 problems.size(), s, kShapeBudgetSeconds);
  if (!problems.empty()) o.detail += "; first: " + problems.front();
  return o;
}

// ---------------------------------------------------------------------------
// 5. Oracle equivalence

Outcome criterion_oracles() {
  std::mt19937_64 rng(5);
  int nms_mismatch = 0;
  for (int s = 0; s < kNmsScenes; ++s) {
    std::uniform_int_distribution<int> count(0, 60);
    const double thr = std::array{0.3, 0.45, 0.5, 0.7}[s % 4];
    const auto scene = random_scene(rng, count(rng));
    if (!same(nms(scene, thr), brute_force_nms(scene, thr))) ++nms_mismatch;
  }

  double ap_err = 0;
  for (int l = 0; l < kApLists; ++l) {
    std::uniform_int_distribution<int> len(0, 80);
    std::bernoulli_distribution hit(0.1 + 0.8 * (l % 10) / 9.0);
    std::vector<bool> flags(static_cast<std::size_t>(len(rng)));
    int tp = 0;
    for (std::size_t i = 0; i < flags.size(); ++i) tp += (flags[i] = hit(rng));
    const int total = tp + static_cast<int>(rng() % 5);
    ap_err = std::max(ap_err, std::abs(average_precision_101(flags, total) - reference_ap101(flags, total)));
  }

  bool monotone = true;
  std::lognormal_distribution<double> dim(3.0, 0.7);
  for (int run = 0; run < kKMeansRuns; ++run) {
    std::vector<AnchorShape> shapes;
    for (int i = 0; i < 40 + run; ++i) shapes.push_back({dim(rng), dim(rng)});
    const auto r = kmeans_iou(shapes, {static_cast<std::size_t>(2 + run % 8), static_cast<std::uint64_t>(run), 100});
    for (std::size_t i = 1; i < r.objective_history.size(); ++i) {
      if (r.objective_history[i] > r.objective_history[i - 1]) monotone = false;
    }
  }
  double cluster_err = 0;
  std::uniform_real_distribution<double> jitter(-0.8, 0.8);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<AnchorShape> shapes;
    for (int i = 0; i < 8; ++i) shapes.push_back({12 + jitter(rng), 34 + jitter(rng)});
    for (int i = 0; i < 8; ++i) shapes.push_back({70 + jitter(rng), 40 + jitter(rng)});
    const auto r = kmeans_iou(shapes, {2, static_cast<std::uint64_t>(trial), 100});
    cluster_err = std::max({cluster_err, std::abs(r.anchors[0].w - 12), std::abs(r.anchors[0].h - 34),
                            std::abs(r.anchors[1].w - 70), std::abs(r.anchors[1].h - 40)});
  }

  double loop_err = 0;
  for (int i = 0; i < 50; ++i) {
    std::uniform_int_distribution<int> small(1, 3);
    const Shape in{small(rng), small(rng), 1 + small(rng), 3 + small(rng), 3 + small(rng)};
    const std::int64_t co = small(rng), kt = std::min<std::int64_t>(small(rng), in[2]);
    const auto spec = make_spec({kt, 3, 1 + 2 * (i % 2)}, {1, 1 + i % 2, 1}, {i % 2, 1, i % 2}, co);
    auto x = random_tensor(in, rng, -1, 1, false);
    auto w = random_tensor({co, in[1], kt, 3, 1 + 2 * (i % 2)}, rng, -1, 1, false);
    auto b = random_tensor({co}, rng, -1, 1, false);
    Shape out;
    const auto ref = naive_conv3d(in, to_vector(x.data()), w.shape(), to_vector(w.data()), to_vector(b.data()),
                                  spec, out);
    for (auto algo : {ConvAlgorithm::im2col, ConvAlgorithm::direct}) {
      const auto y = conv3d(x, w, b, spec, algo);
      if (y.shape() != out) loop_err = INFINITY;
      loop_err = std::max(loop_err, max_abs_diff(y.data(), ref));
    }
    for (auto mode : {PoolMode::max, PoolMode::mean}) {
      const PoolSpec ps{mode, {std::min<std::int64_t>(2, in[2]), 3, 2}, {1, 2, 2}, {0, 1, 0}};
      const auto pref = naive_pool3d(in, to_vector(x.data()), ps, out);
      const auto y = pool3d(x, ps);
      if (y.shape() != out) loop_err = INFINITY;
      loop_err = std::max(loop_err, max_abs_diff(y.data(), pref));
    }
  }

  Outcome o;
  o.pass = nms_mismatch == 0 && ap_err <= kApTolerance && monotone && cluster_err <= kClusterTolerancePx &&
           loop_err <= kLoopOracleTolerance;
  o.detail = fmt("NMS %d/%d scenes differ; AP-101 max error %.1e; k-means %s over %d runs, 2-cluster error %.2f px; "
                 "conv/pool loop error %.1e",
                 nms_mismatch, kNmsScenes, ap_err, monotone ? "monotone" : "NOT monotone", kKMeansRuns, cluster_err,
                 loop_err);
  return o;
}

// ---------------------------------------------------------------------------
// 6. Fixed arithmetic

const fs::path& synth_data() {
  static const fs::path root = [] {
    auto p = scratch("synth");
    std::ostringstream out, err;
    if (cli::run({"synth", "--out", p.string()}, out, err) != 0) throw std::runtime_error(err.str());
    return p;
  }();
  return root;
}

Outcome criterion_arithmetic() {
  bool ratios = true;
  for (std::int64_t te : {2, 3, 4}) {
    for (std::int64_t c : {64, 176, 256}) {
      const auto t11 = fusion_param_count({FusionKind::conv_t11, te, te, 3, c}, c).weights;
      const auto t33 = fusion_param_count({FusionKind::conv_t33, te, te, 3, c}, c).weights;
      const auto t55 = fusion_param_count({FusionKind::conv_t55, te, te, 3, c}, c).weights;
      ratios = ratios && t33 == 9 * t11 && t55 == 25 * t11;
    }
  }
  const bool schedule = lr_at(0) == 0.001 && lr_at(50) == 0.00025 && lr_at(100) == 0.0000625;

  const auto dir = scratch("anchors8");
  std::ostringstream out, err;
  const int code = cli::run({"anchors", "--labels", synth_data().string(), "--k", "8", "--out", dir.string()}, out, err);
  std::size_t rows = 0;
  if (code == 0) rows = anchors_from_csv(slurp(dir / "anchors.csv")).size();

  Outcome o;
  o.pass = ratios && schedule && rows == 8;
  o.detail = fmt("fusion weight ratios 9x/25x %s; lr at epochs 0/50/100 = %.7g/%.7g/%.7g; anchors k=8 -> %zu boxes",
                 ratios ? "exact" : "WRONG", lr_at(0), lr_at(50), lr_at(100), rows);
  return o;
}

// ---------------------------------------------------------------------------
// 7. Overfit capability

struct OverfitRun {
  bool perfect = false;
  std::int64_t iterations = 0;
  double seconds = 0;
  double ap_easy = 0;
};

OverfitRun overfit(const std::string& arch, int length) {
  auto kv = KeyValues::load(kSourceDir / "configs" / "overfit.cfg");
  kv.set("data", synth_data().string());
  kv.set("arch", arch);
  kv.set("seq_len", std::to_string(length));
  kv.set("max_iterations", std::to_string(kOverfitIterations));
  const auto config = read_run_config(kv);
  config.validate();
  const auto data = Dataset::load(config.data.root, config.data.classes);
  TrainOptions options;
  options.out_dir = scratch("overfit_" + arch);
  Clock clock;
  const auto result = train(config, data, options);
  OverfitRun r;
  r.seconds = clock.seconds();
  r.iterations = result.iterations;
  // Final weights on the whole (training) set.
  const auto [train_idx, val_idx] = split_indices(data, config.train);
  const auto eval = evaluate_samples(build_model(config.model, 1), const_cast<ModelParams&>(result.params), data,
                                     train_idx, config);
  r.perfect = !eval.entries.empty();
  for (const auto& e : eval.entries) {
    if (e.bucket == Difficulty::easy && e.num_gt > 0 && e.ap != 1.0) r.perfect = false;
  }
  r.ap_easy = mean_ap(eval, Difficulty::easy);
  return r;
}

Outcome criterion_overfit() {
  const auto lsf = overfit("lsf", 4);
  const auto single = overfit("single", 1);
  auto ok = [](const OverfitRun& r) {
    return r.perfect && r.iterations <= kOverfitIterations && r.seconds < kOverfitBudgetSeconds;
  };
  Outcome o;
  o.pass = ok(lsf) && ok(single);
  o.detail = fmt("LSF-4: AP(easy) %.4f after %lld iterations, %.0f s; 2D: AP(easy) %.4f after %lld iterations, "
                 "%.0f s (limits %lld iterations, %.0f s each)",
                 lsf.ap_easy, (long long)lsf.iterations, lsf.seconds, single.ap_easy, (long long)single.iterations,
                 single.seconds, (long long)kOverfitIterations, kOverfitBudgetSeconds);
  return o;
}

// ---------------------------------------------------------------------------
// 8. Determinism

// Runs the tfn executable with TFN_THREADS=1; output goes to `log`.
int run_tfn(const std::vector<std::string>& args, const fs::path& log) {
  std::vector<std::string> argv_s{kTfnExe.string()};
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_s) argv.push_back(a.data());
  argv.push_back(nullptr);
  std::vector<std::string> env_s{"TFN_THREADS=1"};
  for (char** e = environ; *e; ++e) {
    if (std::string(*e).rfind("TFN_THREADS=", 0) != 0) env_s.emplace_back(*e);
  }
  std::vector<char*> env;
  for (auto& e : env_s) env.push_back(e.data());
  env.push_back(nullptr);
  posix_spawn_file_actions_t fa;
  posix_spawn_file_actions_init(&fa);
  posix_spawn_file_actions_addopen(&fa, 1, log.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  posix_spawn_file_actions_adddup2(&fa, 1, 2);
  pid_t pid = 0;
  const int rc = posix_spawn(&pid, argv[0], &fa, nullptr, argv.data(), env.data());
  posix_spawn_file_actions_destroy(&fa);
  if (rc != 0) return -1;
  int status = 0;
  waitpid(pid, &status, 0);
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto bytes = slurp(e.path());
    if (e.path().filename() == "manifest.json") {
      std::istringstream is(bytes);
      std::string line, kept;
      while (std::getline(is, line)) {
        if (line.find("\"started_at\"") == std::string::npos) kept += line + "\n";
      }
      bytes = kept;
    }
    out[fs::relative(e.path(), dir).generic_string()] = bytes;
  }
  return out;
}

Outcome criterion_determinism() {
  const auto root = scratch("determinism");
  const auto log = root / "log.txt";
  const auto data = synth_data().string();
  const std::vector<std::pair<std::string, std::vector<std::string>>> commands{
      {"train",
       {"train", "--config", (kSourceDir / "configs" / "overfit.cfg").string(), "--data", data, "--out",
        (root / "train").string(), "--set", "max_iterations=20", "--set", "eval_every_iterations=10"}},
      {"anchors", {"anchors", "--labels", data, "--k", "8", "--seed", "7", "--out", (root / "anchors").string()}},
      {"predict",
       {"predict", "--checkpoint", (root / "train" / "checkpoint.tfnc").string(), "--data", data, "--conf", "0.05",
        "--out", (root / "predict").string()}},
      {"eval", {"eval", "--gt", data, "--det", (root / "predict").string(), "--out", (root / "eval").string()}},
  };
  std::vector<std::string> differing;
  std::size_t files = 0;
  for (const auto& [name, args] : commands) {
    std::map<std::string, std::string> first;
    for (int rep = 0; rep < 2; ++rep) {
      const fs::path out = root / name;
      if (rep == 1) fs::rename(out, root / (name + "_first"));
      if (run_tfn(args, log) != 0) {
        differing.push_back(name + " failed (see " + log.string() + ")");
        break;
      }
      if (rep == 0) continue;
      const auto a = snapshot(root / (name + "_first")), b = snapshot(out);
      if (a != b) differing.push_back(name);
      files += b.size();
    }
  }
  Outcome o;
  o.pass = differing.empty();
  o.detail = fmt("train/anchors/predict/eval each run twice with TFN_THREADS=1: %zu artifacts compared", files);
  for (const auto& d : differing) o.detail += "; differs: " + d;
  return o;
}

// ---------------------------------------------------------------------------
// 9. Temporal padding keeps every shape

Outcome criterion_padding() {
  int configs = 0, compared = 0, toggled = 0;
  std::vector<std::string> problems;
  for (auto arch : {Arch::esf, Arch::lsf}) {
    for (int length : {2, 4, 6}) {
      for (auto kind : kAllFusionKinds) {
        ++configs;
        ModelConfig off;
        off.arch = arch;
        off.sequence_length = length;
        off.fusion_kind = kind;
        off.temporal_padding = false;
        ModelConfig on = off;
        on.temporal_padding = true;
        const auto a = build_model(off), b = build_model(on);
        const auto name = to_string(arch) + "-" + std::to_string(length) + "-" + to_string(kind);
        if (a.blocks.size() != b.blocks.size()) {
          problems.push_back(name + ": block count");
          continue;
        }
        bool any_3d = false, temporal_dense = false;
        for (std::size_t i = 0; i < a.blocks.size(); ++i) {
          ++compared;
          const auto &x = a.blocks[i], &y = b.blocks[i];
          if (x.input_shape != y.input_shape || x.output_shape != y.output_shape ||
              x.conv_outputs != y.conv_outputs) {
            problems.push_back(name + ": " + x.name);
          }
          temporal_dense = temporal_dense || (x.kind == BlockKind::dense && x.input_shape[2] > 1);
          for (const auto& l : y.convs) any_3d = any_3d || (y.kind == BlockKind::dense && l.spec.kernel[0] == 3);
          for (const auto& l : x.convs) {
            if (x.kind == BlockKind::dense && l.spec.kernel[0] != 1) problems.push_back(name + ": 3D kernel when off");
          }
        }
        // The toggle must switch to 3D kernels exactly where a dense block
        // still sees more than one frame.
        if (any_3d != temporal_dense) problems.push_back(name + ": toggle mismatch");
        toggled += any_3d;
      }
    }
  }
  Outcome o;
  o.pass = problems.empty() && toggled > 0;
  o.detail = fmt("%d default configurations, %d block shapes compared, %d with 3D dense kernels when on, %zu "
                 "differences",
                 configs, compared, toggled, problems.size());
  if (!problems.empty()) o.detail += "; first: " + problems.front();
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient correctness", criterion_gradients},  {"head contract", criterion_head},
      {"parameter budget", criterion_params},          {"shape and schedule invariants", criterion_shapes},
      {"oracle equivalence", criterion_oracles},       {"fixed arithmetic", criterion_arithmetic},
      {"overfit capability", criterion_overfit},       {"determinism", criterion_determinism},
      {"temporal padding shapes", criterion_padding},
  };
  std::set<int> only;
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      std::string part;
      while (std::getline(ss, part, ',')) only.insert(std::stoi(part));
    }
  }
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s -- %s\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
