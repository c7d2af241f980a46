#include <doctest.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "tfn/data.hpp"

using namespace tfn;

namespace {

const char* kCarLine = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("tfn_test_data_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

SequenceSample make_sample(int frames, std::int64_t h, std::int64_t w, std::uint64_t seed) {
  Rng rng(seed);
  SequenceSample s;
  for (int t = 0; t < frames; ++t) {
    Image im = Image::blank(h, w);
    for (auto& v : im.data) v = static_cast<float>(rng.uniform());
    s.frames.push_back(im);
    s.timestamps.push_back(0.1 * t);
  }
  for (int k = 0; k < 4; ++k) {
    GroundTruthObject g;
    g.class_id = k % 2;
    g.box = Box2D::from_corners(rng.uniform(0, w / 2.0), rng.uniform(0, h / 2.0), rng.uniform(w / 2.0, w),
                                rng.uniform(h / 2.0, h), g.class_id);
    s.labels.push_back(g);
  }
  return s;
}

bool same_bits(const GroundTruthObject& a, const GroundTruthObject& b) {
  return std::memcmp(&a.box, &b.box, sizeof a.box) == 0 && a.class_id == b.class_id && a.occlusion == b.occlusion &&
         a.truncation == b.truncation && a.dont_care == b.dont_care;
}

// Brute-force frame selection: every candidate at or before the anchor,
// smallest distance, newer frame on ties.
std::vector<std::size_t> reference_select(std::size_t anchor, const std::vector<double>& ts, double dt_ms, int len) {
  std::vector<std::size_t> out;
  for (int k = len - 1; k >= 0; --k) {
    const double target = ts[anchor] - k * dt_ms / 1000.0;
    std::size_t best = anchor;
    for (std::size_t i = 0; i <= anchor; ++i) {
      const double d = std::abs(ts[i] - target), bd = std::abs(ts[best] - target);
      if (d < bd || (d == bd && i > best)) best = i;
    }
    out.push_back(best);
  }
  return out;
}

}  // namespace

TEST_CASE("label parsing: car line converts corners to center format") {
  const auto p = parse_kitti_label(kCarLine);
  REQUIRE(p.kind == ParsedLabel::Kind::object);
  CHECK(p.object.class_id == 0);
  CHECK(p.object.box.cx == doctest::Approx((587.01 + 614.12) / 2).epsilon(1e-12));
  CHECK(p.object.box.cy == doctest::Approx((173.33 + 200.12) / 2).epsilon(1e-12));
  CHECK(p.object.box.w == doctest::Approx(614.12 - 587.01).epsilon(1e-12));
  CHECK(p.object.box.h == doctest::Approx(200.12 - 173.33).epsilon(1e-12));
  CHECK(p.object.occlusion == 0);
  CHECK(p.object.truncation == 0.0);
}

TEST_CASE("label parsing: DontCare, dropped types, scores and errors") {
  const auto dc = parse_kitti_label("DontCare -1 -1 -10 500 150 600 200 -1 -1 -1 -1000 -1000 -1000 -10");
  CHECK(dc.kind == ParsedLabel::Kind::dont_care);
  CHECK(dc.object.dont_care);
  CHECK(dc.object.box.cx == 550);

  CHECK(parse_kitti_label("Cyclist 0 0 0 1 1 20 20 0 0 0 0 0 0 0").kind == ParsedLabel::Kind::dropped);
  CHECK(parse_kitti_label("Cyclist 0 0 0 1 1 20 20 0 0 0 0 0 0 0", {"Car", "Cyclist"}).object.class_id == 1);
  CHECK(parse_kitti_label(std::string(kCarLine) + " 0.93").kind == ParsedLabel::Kind::object);

  auto field_of = [](const std::string& line) {
    try {
      parse_kitti_label(line);
    } catch (const LabelParseError& e) {
      return e.field();
    }
    return 0;
  };
  CHECK(field_of("Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70") == 15);
  CHECK(field_of("Car 0.00 0 -1.58 587.01 abc 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59") == 6);
  CHECK(field_of("Car 0.00 0 -1.58 614.12 173.33 587.01 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59") == 7);
  CHECK(field_of("Car 1.50 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59") == 2);
  CHECK(field_of("") == 1);
}

TEST_CASE("label parsing: file round trip through the writer") {
  const std::string text = std::string(kCarLine) + "\n\nPedestrian 0.10 1 0 10 20 30 90 0 0 0 0 0 0 0\n"
                           "Van 0 0 0 1 1 5 5 0 0 0 0 0 0 0\nDontCare -1 -1 -10 1 2 3 4 -1 -1 -1 -1000 -1000 -1000 -10\n";
  const auto objs = parse_kitti_labels(text);
  REQUIRE(objs.size() == 3);
  std::string back;
  for (const auto& g : objs) back += to_kitti_label(g) + "\n";
  const auto again = parse_kitti_labels(back);
  REQUIRE(again.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(again[i].class_id == objs[i].class_id);
    CHECK(again[i].dont_care == objs[i].dont_care);
    CHECK(again[i].occlusion == objs[i].occlusion);
    CHECK(again[i].box.cx == doctest::Approx(objs[i].box.cx).epsilon(1e-9));
    CHECK(again[i].box.h == doctest::Approx(objs[i].box.h).epsilon(1e-9));
  }
  CHECK_THROWS_AS(parse_kitti_labels("Car 1 2\n"), LabelParseError);
}

TEST_CASE("select_sequence: 10 Hz examples and clamping") {
  std::vector<double> ts(60);
  for (std::size_t i = 0; i < ts.size(); ++i) ts[i] = 0.1 * static_cast<double>(i);
  CHECK(select_sequence(30, ts, 400, 4) == std::vector<std::size_t>{18, 22, 26, 30});
  CHECK(select_sequence(30, ts, 100, 2) == std::vector<std::size_t>{29, 30});
  CHECK(select_sequence(30, ts, 200, 6) == std::vector<std::size_t>{20, 22, 24, 26, 28, 30});
  CHECK(select_sequence(0, ts, 400, 4) == std::vector<std::size_t>{0, 0, 0, 0});
  CHECK(select_sequence(5, ts, 400, 4) == std::vector<std::size_t>{0, 0, 1, 5});
  CHECK(select_sequence(3, ts, 800, 1) == std::vector<std::size_t>{3});
  CHECK_THROWS(select_sequence(0, {}, 400, 4));
}

TEST_CASE("select_sequence: matches brute force on jittered streams and is shift invariant") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> ts;
    double t = rng.uniform(0, 5);
    for (int i = 0; i < 40; ++i) {
      ts.push_back(t);
      t += rng.uniform(0.05, 0.2);
    }
    const double dt = std::array{200.0, 400.0, 800.0}[rng.below(3)];
    const int len = std::array{2, 4, 6}[rng.below(3)];
    const auto anchor = static_cast<std::size_t>(rng.below(ts.size()));
    const auto got = select_sequence(anchor, ts, dt, len);
    CHECK(got == reference_select(anchor, ts, dt, len));
    CHECK(got.back() == anchor);
    CHECK(std::is_sorted(got.begin(), got.end()));

    // Shifting every timestamp by a constant must not change the selection.
    std::vector<double> shifted = ts;
    for (auto& v : shifted) v += 1024.0;
    CHECK(select_sequence(anchor, shifted, dt, len) == reference_select(anchor, shifted, dt, len));
    CHECK(select_sequence(anchor, shifted, dt, len) == got);
  }
}

TEST_CASE("timestamps: float seconds and ISO-8601") {
  const auto a = parse_timestamps("0.0\n0.1\n 0.25 \n");
  CHECK(a == std::vector<double>{0.0, 0.1, 0.25});
  const auto b = parse_timestamps("2011-09-26 13:02:25.500\n2011-09-26 13:02:25.600\n2011-09-27 00:00:00.000\n");
  REQUIRE(b.size() == 3);
  CHECK(b[1] - b[0] == doctest::Approx(0.1).epsilon(1e-6));
  CHECK(b[2] - b[0] == doctest::Approx(10 * 3600 + 57 * 60 + 34.5).epsilon(1e-9));
  // 1970-01-01T00:00:00 is the epoch.
  CHECK(parse_timestamps("1970-01-01T00:00:10")[0] == 10.0);
  CHECK_THROWS_AS(parse_timestamps("0.2\n0.1\n"), DataError);
  CHECK_THROWS_AS(parse_timestamps("zero\n"), DataError);
}

TEST_CASE("augment: flip is an involution and translation shifts boxes") {
  const auto s = make_sample(4, 40, 64, 1);
  AugmentParams flip;
  flip.flip = true;
  const auto twice = apply_augment(apply_augment(s, flip), flip);
  REQUIRE(twice.labels.size() == s.labels.size());
  for (std::size_t i = 0; i < s.labels.size(); ++i) CHECK(twice.labels[i].box.cx == s.labels[i].box.cx);
  for (std::size_t t = 0; t < s.frames.size(); ++t) CHECK(twice.frames[t].data == s.frames[t].data);

  AugmentParams shift;
  shift.tx = 10;
  const auto moved = apply_augment(s, shift);
  std::size_t j = 0;
  for (const auto& g : s.labels) {
    if (g.box.cx + 10 >= 64) continue;
    REQUIRE(j < moved.labels.size());
    CHECK(moved.labels[j].box.cx == g.box.cx + 10);
    CHECK(moved.labels[j].box.cy == g.box.cy);
    ++j;
  }
  CHECK(j == moved.labels.size());
  // Pixels move with the boxes, vacated columns are zero.
  CHECK(moved.frames[2].at(1, 5, 30) == s.frames[2].at(1, 5, 20));
  CHECK(moved.frames[2].at(0, 5, 3) == 0.0f);

  AugmentParams out;
  out.tx = 1000;
  CHECK(apply_augment(s, out).labels.empty());
}

TEST_CASE("augment: photometric ops leave labels bit-identical") {
  const auto s = make_sample(2, 24, 32, 2);
  for (int k = 0; k < 4; ++k) {
    AugmentParams p;
    (k == 0 ? p.brightness : k == 1 ? p.contrast : k == 2 ? p.saturation : p.hue) = k == 3 ? 0.04 : 1.15;
    const auto a = apply_augment(s, p);
    REQUIRE(a.labels.size() == s.labels.size());
    for (std::size_t i = 0; i < s.labels.size(); ++i) CHECK(same_bits(a.labels[i], s.labels[i]));
    CHECK(a.frames[0].data != s.frames[0].data);
    for (float v : a.frames[1].data) CHECK((v >= 0.0f && v <= 1.0f));
  }
  // Zero hue rotation with unit factors is the identity.
  const auto id = apply_augment(s, AugmentParams{});
  CHECK(id.frames[0].data == s.frames[0].data);
}

TEST_CASE("augment: one draw per sequence, identical across frames") {
  Rng rng(9);
  AugmentConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = make_sample(6, 20, 28, 100 + trial);
    // Identical frames stay identical under a shared transform.
    auto same = s;
    for (auto& f : same.frames) f = s.frames[0];
    Rng r2 = rng;
    const auto a = augment(s, cfg, rng);
    const auto b = augment(same, cfg, r2);
    REQUIRE(a.frames.size() == 6);
    REQUIRE(a.transforms.size() == 6);
    CHECK(std::all_of(a.transforms.begin(), a.transforms.end(), [&](auto f) { return f == a.transforms[0]; }));
    CHECK(a.transforms == b.transforms);
    for (std::size_t t = 1; t < b.frames.size(); ++t) CHECK(b.frames[t].data == b.frames[0].data);
    CHECK(a.timestamps == s.timestamps);
  }
  Rng x(5), y(5);
  CHECK(draw_augment(cfg, x).fingerprint() == draw_augment(cfg, y).fingerprint());
  AugmentConfig bad;
  bad.flip_prob = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("resize and batching") {
  auto s = make_sample(4, 40, 64, 4);
  const auto r = resize_sample(s, 20, 32);
  CHECK(r.frames[0].height == 20);
  CHECK(r.frames[0].width == 32);
  CHECK(r.labels[0].box.cx == doctest::Approx(s.labels[0].box.cx / 2));
  CHECK(r.labels[0].box.h == doctest::Approx(s.labels[0].box.h / 2));
  // A constant image stays constant.
  const auto c = resize_bilinear(Image::blank(7, 9, 0.25f), 13, 4);
  CHECK(std::all_of(c.data.begin(), c.data.end(), [](float v) { return v == 0.25f; }));

  const auto s2 = make_sample(4, 20, 32, 5);
  const Tensor t = to_tensor({&r, &s2});
  CHECK(t.shape() == Shape{2, 3, 4, 20, 32});
  CHECK(t.data()[(((1 * 3 + 2) * 4 + 3) * 20 + 7) * 32 + 11] == doctest::Approx(s2.frames[3].at(2, 7, 11)));
  CHECK_THROWS(to_tensor({&s, &s2}));
}

TEST_CASE("shuffle stream: identity at buffer 1, permutation, determinism") {
  std::vector<std::size_t> items(500);
  std::iota(items.begin(), items.end(), 0);
  CHECK(shuffle_stream(items, 1, 7) == items);

  std::vector<std::size_t> dup;
  for (std::size_t i = 0; i < 500; ++i) dup.push_back(i % 37);
  const auto out = shuffle_stream(dup, 50, 11);
  std::map<std::size_t, int> a, b;
  for (auto v : dup) ++a[v];
  for (auto v : out) ++b[v];
  CHECK(a == b);
  CHECK(out != dup);
  CHECK(shuffle_stream(items, 50, 11) == shuffle_stream(items, 50, 11));
  CHECK(shuffle_stream(items, 50, 11) != shuffle_stream(items, 50, 12));
  // Streaming bound: element i can leave no earlier than position i - 49.
  const auto perm = shuffle_stream(items, 50, 3);
  for (std::size_t pos = 0; pos < perm.size(); ++pos) CHECK(perm[pos] <= pos + 49);
  CHECK_THROWS(ShuffleStream(items, 0, 1));
}

TEST_CASE("split: fixed counts, ratios, determinism") {
  auto ids = [](std::size_t n) {
    std::vector<std::string> v;
    for (std::size_t i = 0; i < n; ++i) v.push_back("id" + std::to_string(i));
    return v;
  };
  const auto big = split_dataset(ids(7481), 0.8, 1);
  CHECK(big.train.size() == 6000);
  CHECK(big.val.size() == 1481);
  std::set<std::string> all(big.train.begin(), big.train.end());
  for (const auto& v : big.val) CHECK(all.insert(v).second);
  CHECK(all.size() == 7481);

  const auto small = split_dataset(ids(10), 0.8, 1);
  CHECK(small.train.size() == 8);
  CHECK(small.val.size() == 2);
  CHECK(split_dataset(ids(11), 0.8, 1).train.size() == 9);
  CHECK(split_dataset(ids(100), 0.8, 4).val == split_dataset(ids(100), 0.8, 4).val);
  CHECK(split_dataset(ids(100), 0.8, 4).val != split_dataset(ids(100), 0.8, 5).val);
  CHECK_THROWS(split_dataset({}, 0.8, 1));
}

TEST_CASE("png round trip is exact on 8-bit values") {
  const auto dir = scratch_dir("png");
  Image im = Image::blank(5, 7);
  for (std::size_t i = 0; i < im.data.size(); ++i) im.data[i] = static_cast<float>(i % 256) / 255.0f;
  write_png(dir / "a.png", im);
  const auto back = read_png(dir / "a.png");
  REQUIRE(back.height == 5);
  REQUIRE(back.width == 7);
  for (std::size_t i = 0; i < im.data.size(); ++i) CHECK(back.data[i] == im.data[i]);
  CHECK_THROWS_AS(read_png(dir / "missing.png"), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("synthetic dataset loads and assembles sequences") {
  const auto dir = scratch_dir("synth");
  SynthOptions o;
  o.sequences = 3;
  o.frames = 8;
  generate_synthetic_dataset(dir, o);
  const auto ds = Dataset::load(dir);
  CHECK(ds.size() == 24);
  CHECK(ds.ids()[9] == "seq0001/000001");
  CHECK(ds.index_of("seq0002/000007") == 23);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    CHECK(!ds.labels(i).empty());
    for (const auto& g : ds.labels(i)) {
      CHECK(g.box.h >= 40);
      CHECK(g.box.left() >= 0);
      CHECK(g.box.right() <= 128);
      CHECK(g.truncation == 0);
    }
  }
  const auto s = ds.sample(ds.index_of("seq0001/000007"), 200, 4);
  REQUIRE(s.frames.size() == 4);
  CHECK(s.source_ids == std::vector<std::string>{"seq0001/000001", "seq0001/000003", "seq0001/000005",
                                                 "seq0001/000007"});
  CHECK(std::is_sorted(s.timestamps.begin(), s.timestamps.end()));
  CHECK(s.frames[0].height == 80);
  CHECK(s.labels.size() == ds.labels(ds.index_of("seq0001/000007")).size());
  // Frames change over time.
  CHECK(s.frames[0].data != s.frames[3].data);

  // Same seed, same bytes.
  const auto dir2 = scratch_dir("synth2");
  generate_synthetic_dataset(dir2, o);
  const auto ds2 = Dataset::load(dir2);
  CHECK(ds2.sample(5, 400, 2).frames[1].data == ds.sample(5, 400, 2).frames[1].data);

  std::ofstream(dir / "seq0000" / "timestamps.txt") << "0.0\n0.1\n";
  CHECK_THROWS_AS(Dataset::load(dir), DataError);
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}
