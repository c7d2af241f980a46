#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "test_support.hpp"
#include "tfn/model.hpp"

using namespace tfn;
using namespace tfn::testing;

namespace {

// Narrow model that runs a forward pass in milliseconds.
ModelConfig small_config(Arch arch, int length, FusionKind kind, bool padding) {
  ModelConfig c;
  c.arch = arch;
  c.sequence_length = length;
  c.fusion_kind = kind;
  c.temporal_padding = padding;
  c.input_height = 32;
  c.input_width = 48;
  c.stem.widths = {4, 4, 8};
  c.growth = 4;
  c.dense_depths = {1, 2, 1, 1};
  c.depth_multiplier = 1.0;
  c.transition_widths = {8, 8, 8, 8};
  c.anchors = AnchorSet::placeholder(3);
  return c;
}

std::int64_t fusion_stage(const ModelGraph& g, std::size_t i) { return g.blocks[g.fusion_indices[i]].stage; }

}  // namespace

TEST_CASE("fusion schedules") {
  CHECK(fusion_schedule(Arch::lsf, 2) == std::vector<FusionPlacement>{{4, 2, 2}});
  CHECK(fusion_schedule(Arch::lsf, 4) == std::vector<FusionPlacement>{{3, 2, 2}, {4, 2, 2}});
  CHECK(fusion_schedule(Arch::esf, 6) == std::vector<FusionPlacement>{{0, 2, 2}, {1, 3, 3}});
  CHECK_THROWS_AS(fusion_schedule(Arch::lsf, 3), std::invalid_argument);
  CHECK(fusion_schedule(Arch::single, 1).empty());
  for (int length : {2, 4, 6}) {
    for (auto arch : {Arch::esf, Arch::lsf}) {
      std::int64_t t = length;
      for (const auto& p : fusion_schedule(arch, length)) t = (t - p.extent) / p.stride + 1;
      CHECK(t == 1);
    }
    for (const auto& e : fusion_schedule(Arch::esf, length)) {
      for (const auto& l : fusion_schedule(Arch::lsf, length)) CHECK(e.position < l.position);
    }
  }
}

TEST_CASE("default model: 32x18 grid, 4608 boxes, ~5M parameters") {
  const ModelConfig c;
  const auto g = build_model(c);
  CHECK(g.grid_w == 32);
  CHECK(g.grid_h == 18);
  CHECK(g.box_count() == 4608);
  CHECK(g.head.channels() == 56);
  CHECK(g.blocks.back().kind == BlockKind::head);
  CHECK(g.blocks.back().output_shape == Shape{1, 56, 18, 32});
  const auto report = profile(g);
  CHECK(report.params_total >= 4'500'000);
  CHECK(report.params_total <= 5'500'000);

  // The last transition keeps the resolution.
  const BlockInfo* last_transition = nullptr;
  for (const auto& b : g.blocks) {
    if (b.kind == BlockKind::transition) last_transition = &b;
  }
  REQUIRE(last_transition);
  CHECK_FALSE(last_transition->transition.reduce_spatial);

  auto forced = c;
  forced.head_filters = 72;
  CHECK(build_model(forced).head.channels() == 72);
  CHECK(build_model(forced).head.per_anchor == 9);
}

TEST_CASE("graph invariants over every arch, length, fusion kind and padding") {
  for (auto arch : {Arch::esf, Arch::lsf}) {
    for (int length : {2, 4, 6}) {
      for (auto kind : kAllFusionKinds) {
        Shape reference_shapes;
        for (bool padding : {false, true}) {
          ModelConfig c;
          c.arch = arch;
          c.sequence_length = length;
          c.fusion_kind = kind;
          c.temporal_padding = padding;
          const auto g = build_model(c);
          std::int64_t t = length;
          int heads = 0;
          for (const auto& b : g.blocks) {
            CHECK(b.output_shape.size() >= 4);
            if (b.kind != BlockKind::head && b.kind != BlockKind::squeeze) {
              CHECK(b.output_shape[2] <= t);
              t = b.output_shape[2];
            }
            if (b.kind == BlockKind::squeeze) CHECK(b.input_shape[2] == 1);
            if (b.kind == BlockKind::transition) {
              CHECK(b.output_shape[2] == b.input_shape[2]);
              const std::int64_t f = b.transition.reduce_spatial ? 2 : 1;
              CHECK(b.output_shape[3] == b.input_shape[3] / f);
              CHECK(b.output_shape[4] == b.input_shape[4] / f);
            }
            heads += b.kind == BlockKind::head;
          }
          CHECK(heads == 1);
          CHECK(g.box_count() == 4608);
        }
      }
    }
  }
}

TEST_CASE("temporal padding changes no shape anywhere") {
  for (auto arch : {Arch::esf, Arch::lsf}) {
    for (int length : {2, 4, 6}) {
      ModelConfig a;
      a.arch = arch;
      a.sequence_length = length;
      a.temporal_padding = false;
      ModelConfig b = a;
      b.temporal_padding = true;
      const auto ga = build_model(a), gb = build_model(b);
      REQUIRE(ga.blocks.size() == gb.blocks.size());
      for (std::size_t i = 0; i < ga.blocks.size(); ++i) {
        CHECK(ga.blocks[i].input_shape == gb.blocks[i].input_shape);
        CHECK(ga.blocks[i].output_shape == gb.blocks[i].output_shape);
      }
    }
  }
}

TEST_CASE("forward produces the annotated shapes") {
  for (auto arch : {Arch::esf, Arch::lsf}) {
    for (int length : {2, 4, 6}) {
      for (auto kind : kAllFusionKinds) {
        for (bool padding : {false, true}) {
          const auto c = small_config(arch, length, kind, padding);
          const auto g = build_model(c, 2);
          auto params = init_params(g, 1);
          std::mt19937_64 rng(length);
          NoGradGuard no_grad;
          auto y = forward(g, params, random_tensor(g.input_shape(2), rng, 0, 1, false), {});
          CHECK(y.shape() == g.blocks.back().output_shape);
          CHECK(y.shape() == Shape{2, 3 * 7, 2, 3});
        }
      }
    }
  }
  const auto c = small_config(Arch::single, 1, FusionKind::maxpool, true);
  const auto g = build_model(c);
  CHECK(g.fusion_indices.empty());
  auto params = init_params(g, 1);
  std::mt19937_64 rng(1);
  CHECK(forward(g, params, random_tensor(g.input_shape(1), rng), {}).shape() == Shape{1, 21, 2, 3});
}

TEST_CASE("ESF fusion blocks precede LSF fusion blocks") {
  for (int length : {2, 4, 6}) {
    const auto e = build_model(small_config(Arch::esf, length, FusionKind::conv_t11, true));
    const auto l = build_model(small_config(Arch::lsf, length, FusionKind::conv_t11, true));
    for (std::size_t i = 0; i < e.fusion_indices.size(); ++i) {
      for (std::size_t j = 0; j < l.fusion_indices.size(); ++j) {
        CHECK(e.fusion_indices[i] < l.fusion_indices[j]);
        CHECK(fusion_stage(e, i) < fusion_stage(l, j));
      }
    }
  }
}

TEST_CASE("profile arithmetic") {
  // A lone convolution: params = Cout * (Cin*t*h*w + 1).
  ConvLayout l;
  l.in_channels = 7;
  l.spec.kernel = {3, 5, 3};
  l.spec.out_channels = 11;
  CHECK(count_layers({l}).total() == 11 * (7 * 3 * 5 * 3 + 1));

  ModelConfig c;
  auto more = c;
  more.growth = 96;
  CHECK(profile(build_model(more)).params_total > profile(build_model(c)).params_total);

  // Shared stem and parameter-free fusion: sequence length does not change params.
  auto two = c, six = c;
  two.sequence_length = 2;
  six.sequence_length = 6;
  CHECK(profile(build_model(two)).params_total == profile(build_model(six)).params_total);
  CHECK(profile(build_model(two)).rows[0].params == profile(build_model(six)).rows[0].params);

  const auto report = profile(build_model(c));
  const auto csv = profile_csv(report);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == static_cast<long>(build_model(c).blocks.size()) + 2);
  CHECK(csv.rfind("block,params,flops,peak_elements\n", 0) == 0);
}

TEST_CASE("profile total equals populated gradient entries") {
  for (auto kind : {FusionKind::inception_v2, FusionKind::conv_t33, FusionKind::meanpool}) {
    for (auto arch : {Arch::esf, Arch::lsf}) {
      auto c = small_config(arch, 4, kind, true);
      c.head_filters = 27;
      const auto g = build_model(c);
      auto params = init_params(g, 3);
      std::mt19937_64 rng(5);
      auto y = forward(g, params, random_tensor(g.input_shape(1), rng, 0, 1, false), {});
      backward(project(y));
      std::int64_t entries = 0;
      for (const auto& t : params.trainable()) {
        if (t.has_grad()) entries += static_cast<std::int64_t>(t.grad().size());
      }
      CHECK(entries == profile(g).params_total);
    }
  }
}

TEST_CASE("head contract") {
  HeadLayout layout{8, 2, 7};
  ConvParams head{Tensor::zeros({56, 16, 1, 1}, true), Tensor::zeros({56}, true)};
  std::mt19937_64 rng(1);
  auto y = head_forward(random_tensor({1, 16, 18, 32}, rng), head, layout);
  CHECK(y.shape() == Shape{1, 56, 18, 32});
  for (Real v : y.data()) CHECK(v == 0);
  CHECK_THROWS_AS(head_forward(random_tensor({1, 15, 18, 32}, rng), head, layout), ShapeError);
  CHECK_THROWS_AS(head_forward(random_tensor({1, 16, 18, 32}, rng), head, HeadLayout{8, 3, 8}), ShapeError);
}

TEST_CASE("config round trip, include and errors") {
  ModelConfig c;
  c.arch = Arch::esf;
  c.sequence_length = 6;
  c.fusion_kind = FusionKind::inception_v1;
  c.anchors = AnchorSet({{10.125, 30.3}, {61.0 / 3.0, 20.7}});
  c.depth_multiplier = 0.3;
  KeyValues kv;
  write_model_config(c, kv);
  const auto back = read_model_config(KeyValues::parse(kv.to_text()));
  CHECK(back == c);
  KeyValues again;
  write_model_config(back, again);
  CHECK(again.to_text() == kv.to_text());

  const auto dir = std::filesystem::temp_directory_path() / "tfn_test_config";
  std::filesystem::create_directories(dir / "sub");
  std::ofstream(dir / "sub" / "base.cfg") << "arch = esf\nseq_len = 2  # comment\ngrowth = 12\n";
  std::ofstream(dir / "top.cfg") << "include = sub/base.cfg\ngrowth = 24\n";
  const auto loaded = read_model_config(KeyValues::load(dir / "top.cfg"));
  CHECK(loaded.arch == Arch::esf);
  CHECK(loaded.sequence_length == 2);
  CHECK(loaded.growth == 24);

  try {
    (void)read_model_config(KeyValues::parse("seq_len = 5\n"));
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "seq_len");
  }
  try {
    KeyValues::parse("bogus = 1\n").require_known(model_config_keys());
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "bogus");
  }
  CHECK_THROWS_AS(read_model_config(KeyValues::parse("growth = many\n")), ConfigError);
}

TEST_CASE("shape conflicts name the block") {
  auto c = small_config(Arch::lsf, 4, FusionKind::inception_v1, true);
  c.fusion_channels = 3;
  try {
    (void)build_model(c);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("fusion1") != std::string::npos);
  }
}
