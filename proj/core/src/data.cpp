#include "tfn/data.hpp"

#include <png.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace tfn {

namespace {

std::vector<std::string> split_ws(const std::string& line) {
  std::istringstream is(line);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

double parse_field(const std::vector<std::string>& f, int index) {
  const std::string& s = f[index - 1];
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw LabelParseError(index, "expected a number, got '" + s + "'");
  }
  return v;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  h = (h ^ (h >> 31)) * 0xBF58476D1CE4E5B9ULL;
  return h;
}

}  // namespace

ParsedLabel parse_kitti_label(const std::string& line, const std::vector<std::string>& classes) {
  const auto f = split_ws(line);
  if (f.size() < 15) throw LabelParseError(static_cast<int>(f.size()) + 1, "missing (KITTI labels have 15 fields)");
  if (f.size() > 16) throw LabelParseError(17, "unexpected extra field");
  ParsedLabel out;
  out.type = f[0];
  const double trunc = parse_field(f, 2);
  const double occ = parse_field(f, 3);
  parse_field(f, 4);
  const double left = parse_field(f, 5), top = parse_field(f, 6), right = parse_field(f, 7), bottom = parse_field(f, 8);
  for (int i = 9; i <= 15; ++i) parse_field(f, i);
  if (f.size() == 16) out.score = parse_field(f, 16);
  if (!(right > left)) throw LabelParseError(7, "right edge must exceed left edge");
  if (!(bottom > top)) throw LabelParseError(8, "bottom edge must exceed top edge");

  if (out.type == "DontCare") {
    out.kind = ParsedLabel::Kind::dont_care;
    out.object.box = Box2D::from_corners(left, top, right, bottom, -1);
    out.object.dont_care = true;
    return out;
  }
  const auto it = std::find(classes.begin(), classes.end(), out.type);
  if (it == classes.end()) return out;
  // Result lines carry -1 for truncation and occlusion.
  if (!out.score) {
    if (trunc < 0 || trunc > 1) throw LabelParseError(2, "truncation outside [0, 1]");
    if (occ < 0 || occ > 3 || occ != std::floor(occ)) throw LabelParseError(3, "occlusion must be 0, 1, 2 or 3");
  }
  out.kind = ParsedLabel::Kind::object;
  out.object.class_id = static_cast<int>(it - classes.begin());
  out.object.box = Box2D::from_corners(left, top, right, bottom, out.object.class_id);
  out.object.truncation = trunc;
  out.object.occlusion = static_cast<int>(occ);
  return out;
}

std::vector<GroundTruthObject> parse_kitti_labels(const std::string& text, const std::vector<std::string>& classes) {
  std::vector<GroundTruthObject> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto p = parse_kitti_label(line, classes);
      if (p.kind != ParsedLabel::Kind::dropped) out.push_back(p.object);
    } catch (const LabelParseError& e) {
      throw LabelParseError(e.field(), "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<Detection> parse_kitti_detections(const std::string& text, const std::vector<std::string>& classes) {
  std::vector<Detection> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    ParsedLabel p;
    try {
      p = parse_kitti_label(line, classes);
    } catch (const LabelParseError& e) {
      throw LabelParseError(e.field(), "line " + std::to_string(lineno) + ": " + e.what());
    }
    if (p.kind != ParsedLabel::Kind::object) continue;
    Detection d;
    d.class_id = p.object.class_id;
    d.confidence = p.score.value_or(1.0);
    d.box = p.object.box;
    d.box.score = d.confidence;
    d.anchor = static_cast<std::int64_t>(out.size());  // file order breaks score ties
    out.push_back(d);
  }
  return out;
}

std::string to_kitti_detection(const Detection& d, const std::vector<std::string>& classes) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%s -1 -1 -10 %.2f %.2f %.2f %.2f -1 -1 -1 -1000 -1000 -1000 -10 %.6f",
                classes.at(static_cast<std::size_t>(d.class_id)).c_str(), d.box.left(), d.box.top(), d.box.right(),
                d.box.bottom(), d.confidence);
  return buf;
}

std::string to_kitti_label(const GroundTruthObject& gt, const std::vector<std::string>& classes) {
  const std::string type = gt.dont_care ? "DontCare" : classes.at(static_cast<std::size_t>(gt.class_id));
  char buf[256];
  if (gt.dont_care) {
    std::snprintf(buf, sizeof buf, "DontCare -1 -1 -10 %.2f %.2f %.2f %.2f -1 -1 -1 -1000 -1000 -1000 -10",
                  gt.box.left(), gt.box.top(), gt.box.right(), gt.box.bottom());
  } else {
    std::snprintf(buf, sizeof buf, "%s %.2f %d -10 %.2f %.2f %.2f %.2f -1 -1 -1 -1000 -1000 -1000 -10", type.c_str(),
                  gt.truncation, gt.occlusion, gt.box.left(), gt.box.top(), gt.box.right(), gt.box.bottom());
  }
  return buf;
}

// ---------------------------------------------------------------------------

Image Image::blank(std::int64_t height, std::int64_t width, float value) {
  Image im;
  im.height = height;
  im.width = width;
  im.data.assign(static_cast<std::size_t>(3 * height * width), value);
  return im;
}

Image read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&img);
    throw DataError("cannot decode PNG " + path.string() + ": " + img.message);
  }
  Image out = Image::blank(img.height, img.width);
  for (std::int64_t y = 0; y < out.height; ++y)
    for (std::int64_t x = 0; x < out.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(c, y, x) = static_cast<float>(buf[(y * out.width + x) * 3 + c]) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  if (image.channels != 3) throw DataError("write_png expects three channels");
  std::vector<png_byte> buf(static_cast<std::size_t>(image.height * image.width * 3));
  for (std::int64_t y = 0; y < image.height; ++y)
    for (std::int64_t x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image.at(c, y, x), 0.0f, 1.0f);
        buf[(y * image.width + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + img.message);
  }
}

Image resize_bilinear(const Image& image, std::int64_t height, std::int64_t width) {
  if (height == image.height && width == image.width) return image;
  Image out;
  out.channels = image.channels;
  out.height = height;
  out.width = width;
  out.data.resize(static_cast<std::size_t>(image.channels * height * width));
  const double sy = static_cast<double>(image.height) / height, sx = static_cast<double>(image.width) / width;
  for (std::int64_t y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(image.height - 1));
    const auto y0 = static_cast<std::int64_t>(fy);
    const auto y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (std::int64_t x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(image.width - 1));
      const auto x0 = static_cast<std::int64_t>(fx);
      const auto x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (std::int64_t c = 0; c < image.channels; ++c) {
        const double top = image.at(c, y0, x0) * (1 - wx) + image.at(c, y0, x1) * wx;
        const double bot = image.at(c, y1, x0) * (1 - wx) + image.at(c, y1, x1) * wx;
        out.at(c, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> select_sequence(std::size_t anchor, const std::vector<double>& timestamps,
                                         double delta_t_ms, int length) {
  if (timestamps.empty()) throw std::invalid_argument("empty frame stream");
  if (anchor >= timestamps.size()) throw std::out_of_range("anchor frame outside the stream");
  if (length < 1) throw std::invalid_argument("sequence length must be positive");
  if (!(delta_t_ms >= 0)) throw std::invalid_argument("temporal distance must be non-negative");
  std::vector<std::size_t> out(static_cast<std::size_t>(length));
  const double t_anchor = timestamps[anchor];
  for (int k = 0; k < length; ++k) {
    const double target = t_anchor - k * delta_t_ms / 1000.0;
    std::size_t best = anchor;
    double best_d = std::abs(timestamps[anchor] - target);
    for (std::size_t i = anchor; i-- > 0;) {
      const double d = std::abs(timestamps[i] - target);
      if (d < best_d) {
        best_d = d;
        best = i;
      }
      if (timestamps[i] < target) break;  // older frames only get farther
    }
    out[static_cast<std::size_t>(length - 1 - k)] = best;
  }
  return out;
}

std::vector<double> parse_timestamps(const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
    if (line.size() >= 19 && line[4] == '-' && line[7] == '-' && (line[10] == ' ' || line[10] == 'T')) {
      int Y, M, D, h, m;
      double s;
      if (std::sscanf(line.c_str(), "%d-%d-%d%*c%d:%d:%lf", &Y, &M, &D, &h, &m, &s) != 6) {
        throw DataError("timestamps line " + std::to_string(lineno) + ": bad ISO-8601 entry '" + line + "'");
      }
      out.push_back(static_cast<double>(days_from_civil(Y, M, D)) * 86400.0 + h * 3600.0 + m * 60.0 + s);
    } else {
      double v = 0;
      const auto [p, ec] = std::from_chars(line.data(), line.data() + line.size(), v);
      if (ec != std::errc() || p != line.data() + line.size()) {
        throw DataError("timestamps line " + std::to_string(lineno) + ": bad entry '" + line + "'");
      }
      out.push_back(v);
    }
    if (out.size() > 1 && !(out.back() > out[out.size() - 2])) {
      throw DataError("timestamps line " + std::to_string(lineno) + ": not strictly increasing");
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

void AugmentConfig::validate() const {
  if (flip_prob < 0 || flip_prob > 1) throw std::invalid_argument("flip_prob must lie in [0, 1]");
  if (max_translate_px < 0) throw std::invalid_argument("max_translate_px must be non-negative");
  for (double r : {brightness, contrast, saturation}) {
    if (r < 0 || r >= 1) throw std::invalid_argument("photometric ranges must lie in [0, 1)");
  }
  if (hue < 0 || hue > 0.5) throw std::invalid_argument("hue range must lie in [0, 0.5]");
}

std::uint64_t AugmentParams::fingerprint() const {
  std::uint64_t h = flip ? 1 : 2;
  for (double v : {tx, ty, brightness, contrast, saturation, hue}) h = mix(h, std::bit_cast<std::uint64_t>(v));
  return h;
}

AugmentParams draw_augment(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  AugmentParams p;
  // Always consume the same number of draws so the stream stays aligned.
  const double u[7] = {rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform(),
                       rng.uniform(), rng.uniform(), rng.uniform()};
  if (!cfg.enabled) return p;
  p.flip = u[0] < cfg.flip_prob;
  p.tx = std::round((2 * u[1] - 1) * cfg.max_translate_px);
  p.ty = std::round((2 * u[2] - 1) * cfg.max_translate_px);
  p.brightness = 1 + (2 * u[3] - 1) * cfg.brightness;
  p.contrast = 1 + (2 * u[4] - 1) * cfg.contrast;
  p.saturation = 1 + (2 * u[5] - 1) * cfg.saturation;
  p.hue = (2 * u[6] - 1) * cfg.hue;
  return p;
}

namespace {

Image transform_frame(const Image& in, const AugmentParams& p) {
  const auto H = in.height, W = in.width;
  const auto tx = static_cast<std::int64_t>(p.tx), ty = static_cast<std::int64_t>(p.ty);
  Image out = Image::blank(H, W);
  for (std::int64_t c = 0; c < 3; ++c)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const auto sy = y - ty, sxt = x - tx;
        if (sy < 0 || sy >= H || sxt < 0 || sxt >= W) continue;
        const auto sx = p.flip ? W - 1 - sxt : sxt;
        out.at(c, y, x) = in.at(c, sy, sx);
      }

  const bool photometric = p.brightness != 1 || p.contrast != 1 || p.saturation != 1 || p.hue != 0;
  if (!photometric) return out;
  double mean_gray = 0;
  for (std::int64_t i = 0; i < H * W; ++i) {
    mean_gray += 0.299 * out.data[i] + 0.587 * out.data[H * W + i] + 0.114 * out.data[2 * H * W + i];
  }
  mean_gray /= static_cast<double>(H * W);
  const double angle = 2 * std::numbers::pi * p.hue, ca = std::cos(angle), sa = std::sin(angle);
  for (std::int64_t i = 0; i < H * W; ++i) {
    double rgb[3] = {out.data[i], out.data[H * W + i], out.data[2 * H * W + i]};
    for (auto& v : rgb) v *= p.brightness;
    for (auto& v : rgb) v = (v - mean_gray) * p.contrast + mean_gray;
    const double gray = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (auto& v : rgb) v = (v - gray) * p.saturation + gray;
    // Hue rotation in YIQ space.
    const double Y = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    const double I = 0.596 * rgb[0] - 0.274 * rgb[1] - 0.322 * rgb[2];
    const double Q = 0.211 * rgb[0] - 0.523 * rgb[1] + 0.312 * rgb[2];
    const double I2 = I * ca - Q * sa, Q2 = I * sa + Q * ca;
    rgb[0] = Y + 0.956 * I2 + 0.621 * Q2;
    rgb[1] = Y - 0.272 * I2 - 0.647 * Q2;
    rgb[2] = Y - 1.106 * I2 + 1.703 * Q2;
    for (int c = 0; c < 3; ++c) out.data[c * H * W + i] = static_cast<float>(std::clamp(rgb[c], 0.0, 1.0));
  }
  return out;
}

}  // namespace

SequenceSample apply_augment(SequenceSample sample, const AugmentParams& params) {
  if (sample.frames.empty()) return sample;
  const double W = static_cast<double>(sample.frames.back().width), H = static_cast<double>(sample.frames.back().height);
  for (auto& f : sample.frames) {
    f = transform_frame(f, params);
    sample.transforms.push_back(params.fingerprint());
  }
  std::vector<GroundTruthObject> kept;
  for (auto g : sample.labels) {
    if (params.flip) g.box.cx = W - g.box.cx;
    g.box.cx += params.tx;
    g.box.cy += params.ty;
    if (g.box.cx < 0 || g.box.cx >= W || g.box.cy < 0 || g.box.cy >= H) continue;
    kept.push_back(g);
  }
  sample.labels = std::move(kept);
  return sample;
}

SequenceSample augment(SequenceSample sample, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(std::move(sample), draw_augment(cfg, rng));
}

SequenceSample resize_sample(SequenceSample sample, std::int64_t height, std::int64_t width) {
  if (sample.frames.empty()) return sample;
  const double sy = static_cast<double>(height) / sample.frames.back().height;
  const double sx = static_cast<double>(width) / sample.frames.back().width;
  for (auto& f : sample.frames) f = resize_bilinear(f, height, width);
  for (auto& g : sample.labels) {
    g.box.cx *= sx;
    g.box.w *= sx;
    g.box.cy *= sy;
    g.box.h *= sy;
  }
  return sample;
}

Tensor to_tensor(const std::vector<const SequenceSample*>& batch) {
  if (batch.empty() || batch[0]->frames.empty()) throw std::invalid_argument("empty batch");
  const auto& f0 = batch[0]->frames[0];
  const std::int64_t N = static_cast<std::int64_t>(batch.size()), C = f0.channels,
                     T = static_cast<std::int64_t>(batch[0]->frames.size()), H = f0.height, W = f0.width;
  std::vector<Real> data(static_cast<std::size_t>(N * C * T * H * W));
  for (std::int64_t n = 0; n < N; ++n) {
    if (static_cast<std::int64_t>(batch[n]->frames.size()) != T) throw ShapeError("batch samples differ in length");
    for (std::int64_t t = 0; t < T; ++t) {
      const auto& f = batch[n]->frames[t];
      if (f.height != H || f.width != W || f.channels != C) throw ShapeError("batch frames differ in size");
      for (std::int64_t c = 0; c < C; ++c) {
        std::copy_n(f.data.begin() + c * H * W, H * W, data.begin() + (((n * C + c) * T + t) * H * W));
      }
    }
  }
  return Tensor::from_data({N, C, T, H, W}, std::move(data));
}

// ---------------------------------------------------------------------------

ShuffleStream::ShuffleStream(std::vector<std::size_t> items, std::size_t buffer_size, std::uint64_t seed)
    : items_(std::move(items)), rng_(seed) {
  if (buffer_size == 0) throw std::invalid_argument("shuffle buffer must hold at least one sample");
  while (buffer_.size() < buffer_size && pos_ < items_.size()) buffer_.push_back(items_[pos_++]);
}

std::optional<std::size_t> ShuffleStream::next() {
  if (buffer_.empty()) return std::nullopt;
  const auto j = static_cast<std::size_t>(rng_.below(buffer_.size()));
  const std::size_t out = buffer_[j];
  if (pos_ < items_.size()) {
    buffer_[j] = items_[pos_++];
  } else {
    buffer_.erase(buffer_.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return out;
}

std::vector<std::size_t> ShuffleStream::drain() {
  std::vector<std::size_t> out;
  while (auto v = next()) out.push_back(*v);
  return out;
}

std::vector<std::size_t> shuffle_stream(const std::vector<std::size_t>& items, std::size_t buffer_size,
                                        std::uint64_t seed) {
  return ShuffleStream(items, buffer_size, seed).drain();
}

Split split_dataset(const std::vector<std::string>& ids, double train_ratio, std::uint64_t seed) {
  if (ids.empty()) throw std::invalid_argument("cannot split an empty id list");
  if (!(train_ratio > 0 && train_ratio <= 1)) throw std::invalid_argument("train ratio must lie in (0, 1]");
  std::vector<std::string> perm = ids;
  Rng rng(seed);
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  std::size_t n_val = static_cast<std::size_t>(std::floor(static_cast<double>(ids.size()) * (1 - train_ratio) + 1e-9));
  if (ids.size() == 7481 && std::abs(train_ratio - 0.8) < 1e-12) n_val = 1481;
  Split s;
  s.train.assign(perm.begin(), perm.end() - static_cast<std::ptrdiff_t>(n_val));
  s.val.assign(perm.end() - static_cast<std::ptrdiff_t>(n_val), perm.end());
  return s;
}

// ---------------------------------------------------------------------------

Dataset Dataset::load(const std::filesystem::path& root, const std::vector<std::string>& classes,
                      bool include_unlabeled) {
  namespace fs = std::filesystem;
  Dataset ds;
  const auto manifest = read_text(root / "manifest.txt");
  std::istringstream is(manifest);
  std::string line;
  while (std::getline(is, line)) {
    const auto b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos || line[b] == '#') continue;
    line = line.substr(b, line.find_last_not_of(" \t\r") - b + 1);
    Sequence seq;
    seq.name = line;
    seq.dir = root / line;
    seq.timestamps = parse_timestamps(read_text(seq.dir / "timestamps.txt"));
    if (!fs::is_directory(seq.dir / "image")) throw DataError("missing image directory in " + seq.dir.string());
    for (const auto& e : fs::directory_iterator(seq.dir / "image")) {
      if (e.path().extension() == ".png") seq.images.push_back(e.path());
    }
    std::sort(seq.images.begin(), seq.images.end());
    if (seq.images.size() != seq.timestamps.size()) {
      throw DataError(seq.dir.string() + ": " + std::to_string(seq.images.size()) + " images but " +
                      std::to_string(seq.timestamps.size()) + " timestamps");
    }
    const std::size_t s = ds.sequences_.size();
    for (std::size_t f = 0; f < seq.images.size(); ++f) {
      const auto label = seq.dir / "label" / (seq.images[f].stem().string() + ".txt");
      if (!fs::exists(label)) {
        if (!include_unlabeled) continue;
        ds.labels_.emplace_back();
        ds.samples_.push_back({s, f, seq.name + "/" + seq.images[f].stem().string()});
        continue;
      }
      try {
        ds.labels_.push_back(parse_kitti_labels(read_text(label), classes));
      } catch (const LabelParseError& e) {
        throw DataError(label.string() + ": " + e.what());
      }
      ds.samples_.push_back({s, f, seq.name + "/" + seq.images[f].stem().string()});
    }
    ds.sequences_.push_back(std::move(seq));
  }
  if (ds.sequences_.empty()) throw DataError("manifest " + (root / "manifest.txt").string() + " lists no sequences");
  return ds;
}

const std::vector<GroundTruthObject>& Dataset::labels(std::size_t sample) const { return labels_.at(sample); }

std::vector<std::string> Dataset::ids() const {
  std::vector<std::string> out;
  for (const auto& s : samples_) out.push_back(s.id);
  return out;
}

std::size_t Dataset::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < samples_.size(); ++i) {
    if (samples_[i].id == id) return i;
  }
  throw std::out_of_range("unknown sample id " + id);
}

const Image& Dataset::frame(std::size_t sequence, std::size_t frame) const {
  const auto key = std::make_pair(sequence, frame);
  auto it = cache_.find(key);
  if (it == cache_.end()) it = cache_.emplace(key, read_png(sequences_[sequence].images[frame])).first;
  return it->second;
}

SequenceSample Dataset::sample(std::size_t index, double delta_t_ms, int length) const {
  const auto& ref = samples_.at(index);
  const auto& seq = sequences_[ref.sequence];
  SequenceSample out;
  for (auto i : select_sequence(ref.frame, seq.timestamps, delta_t_ms, length)) {
    out.frames.push_back(frame(ref.sequence, i));
    out.timestamps.push_back(seq.timestamps[i]);
    out.source_ids.push_back(seq.name + "/" + seq.images[i].stem().string());
  }
  out.labels = labels_[index];
  return out;
}

// ---------------------------------------------------------------------------

namespace {

struct SynthObject {
  int cls;
  double x, y, w, h, vx, vy;
  float color[3];
};

bool overlaps(const SynthObject& a, const SynthObject& b) {
  return a.x < b.x + b.w && b.x < a.x + a.w && a.y < b.y + b.h && b.y < a.y + a.h;
}

void fill_rect(Image& im, double l, double t, double r, double b, const float* color) {
  const auto x0 = std::max<std::int64_t>(0, std::lround(l)), x1 = std::min<std::int64_t>(im.width, std::lround(r));
  const auto y0 = std::max<std::int64_t>(0, std::lround(t)), y1 = std::min<std::int64_t>(im.height, std::lround(b));
  for (int c = 0; c < 3; ++c)
    for (auto y = y0; y < y1; ++y)
      for (auto x = x0; x < x1; ++x) im.at(c, y, x) = color[c];
}

}  // namespace

void generate_synthetic_dataset(const std::filesystem::path& root, const SynthOptions& o) {
  namespace fs = std::filesystem;
  if (o.sequences <= 0 || o.frames <= 0 || o.height < 48 || o.width < 64 || o.fps <= 0 || o.max_objects <= 0) {
    throw std::invalid_argument("synthetic dataset needs positive counts and at least 64x48 pixels");
  }
  fs::create_directories(root);
  std::ofstream manifest(root / "manifest.txt");
  for (int s = 0; s < o.sequences; ++s) {
    Rng rng = Rng::derive(o.seed, static_cast<std::uint64_t>(s));
    char name[32];
    std::snprintf(name, sizeof name, "seq%04d", s);
    manifest << name << '\n';
    const fs::path dir = root / name;
    fs::create_directories(dir / "image");
    fs::create_directories(dir / "label");

    // Smooth background: a gradient plus two sinusoids per channel.
    double base[3], amp[3], fx[3], fy[3], ph[3];
    for (int c = 0; c < 3; ++c) {
      base[c] = rng.uniform(0.3, 0.6);
      amp[c] = rng.uniform(0.05, 0.15);
      fx[c] = rng.uniform(0.02, 0.08);
      fy[c] = rng.uniform(0.02, 0.08);
      ph[c] = rng.uniform(0, 6.28);
    }
    const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(o.max_objects)));
    std::vector<SynthObject> objects;
    for (int k = 0; k < count; ++k) {
      SynthObject ob;
      ob.cls = static_cast<int>(rng.below(2));
      const double hmax = static_cast<double>(o.height) * 0.75;
      if (ob.cls == 0) {
        ob.h = rng.uniform(std::min(42.0, hmax), std::min(50.0, hmax));
        ob.w = ob.h * rng.uniform(1.3, 1.7);
        ob.color[0] = 0.85f, ob.color[1] = 0.15f, ob.color[2] = 0.1f;
      } else {
        ob.h = rng.uniform(std::min(44.0, hmax), std::min(56.0, hmax));
        ob.w = ob.h * rng.uniform(0.35, 0.45);
        ob.color[0] = 0.1f, ob.color[1] = 0.2f, ob.color[2] = 0.9f;
      }
      ob.vx = rng.uniform(-4, 4);
      ob.vy = rng.uniform(-1, 1);
      // Rejection-sample a free spot; objects that find none are left out.
      for (int attempt = 0; attempt < 50; ++attempt) {
        ob.x = rng.uniform(0, static_cast<double>(o.width) - ob.w);
        ob.y = rng.uniform(0, static_cast<double>(o.height) - ob.h);
        if (std::none_of(objects.begin(), objects.end(), [&](const SynthObject& q) { return overlaps(ob, q); })) {
          objects.push_back(ob);
          break;
        }
      }
    }

    std::ofstream stamps(dir / "timestamps.txt");
    for (int f = 0; f < o.frames; ++f) {
      char ts[32];
      std::snprintf(ts, sizeof ts, "%.6f\n", f / o.fps);
      stamps << ts;
      Image im = Image::blank(o.height, o.width);
      for (int c = 0; c < 3; ++c)
        for (std::int64_t y = 0; y < o.height; ++y)
          for (std::int64_t x = 0; x < o.width; ++x)
            im.at(c, y, x) = static_cast<float>(base[c] + amp[c] * std::sin(fx[c] * x + fy[c] * y + ph[c]) +
                                                0.02 * (rng.uniform() - 0.5));
      std::vector<GroundTruthObject> labels;
      for (std::size_t k = 0; k < objects.size(); ++k) {
        const auto& ob = objects[k];
        fill_rect(im, ob.x, ob.y, ob.x + ob.w, ob.y + ob.h, ob.color);
        // A darker band marks the class: windows for cars, a head for pedestrians.
        const float dark[3] = {ob.color[0] * 0.4f, ob.color[1] * 0.4f, ob.color[2] * 0.4f};
        if (ob.cls == 0) {
          fill_rect(im, ob.x + ob.w * 0.2, ob.y + ob.h * 0.15, ob.x + ob.w * 0.8, ob.y + ob.h * 0.4, dark);
        } else {
          fill_rect(im, ob.x + ob.w * 0.2, ob.y, ob.x + ob.w * 0.8, ob.y + ob.h * 0.2, dark);
        }
        GroundTruthObject g;
        g.class_id = ob.cls;
        g.box = Box2D::from_corners(ob.x, ob.y, ob.x + ob.w, ob.y + ob.h, ob.cls);
        labels.push_back(g);
      }
      // Occlusion by objects drawn later (kept for generality; placement avoids overlap).
      for (std::size_t k = 0; k < labels.size(); ++k) {
        double covered = 0;
        for (std::size_t j = k + 1; j < labels.size(); ++j) {
          const auto& a = labels[k].box;
          const auto& b = labels[j].box;
          const double iw = std::min(a.right(), b.right()) - std::max(a.left(), b.left());
          const double ih = std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top());
          if (iw > 0 && ih > 0) covered += iw * ih / a.area();
        }
        labels[k].occlusion = covered <= 0 ? 0 : covered < 0.5 ? 1 : 2;
      }
      char stem[16];
      std::snprintf(stem, sizeof stem, "%06d", f);
      write_png(dir / "image" / (std::string(stem) + ".png"), im);
      std::ofstream lab(dir / "label" / (std::string(stem) + ".txt"));
      for (const auto& g : labels) lab << to_kitti_label(g) << '\n';

      // Move; a step that would leave the frame or hit another object is
      // replaced by reversing that velocity component.
      for (std::size_t k = 0; k < objects.size(); ++k) {
        auto& ob = objects[k];
        auto blocked = [&](const SynthObject& c) {
          if (c.x < 0 || c.x + c.w > o.width || c.y < 0 || c.y + c.h > o.height) return true;
          for (std::size_t j = 0; j < objects.size(); ++j) {
            if (j != k && overlaps(c, objects[j])) return true;
          }
          return false;
        };
        SynthObject c = ob;
        c.x += ob.vx;
        if (blocked(c)) ob.vx = -ob.vx;
        else ob.x = c.x;
        c = ob;
        c.y += ob.vy;
        if (blocked(c)) ob.vy = -ob.vy;
        else ob.y = c.y;
      }
    }
  }
}

}  // namespace tfn
