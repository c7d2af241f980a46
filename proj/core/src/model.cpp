#include "tfn/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace tfn {

std::string to_string(Arch arch) {
  switch (arch) {
    case Arch::esf: return "esf";
    case Arch::lsf: return "lsf";
    case Arch::single: return "single";
  }
  return "?";
}

Arch parse_arch(const std::string& text) {
  if (text == "esf" || text == "ESF") return Arch::esf;
  if (text == "lsf" || text == "LSF") return Arch::lsf;
  if (text == "single" || text == "2d") return Arch::single;
  throw std::invalid_argument("unknown arch '" + text + "' (expected esf, lsf or single)");
}

std::vector<FusionPlacement> fusion_schedule(Arch arch, int sequence_length, int num_stages) {
  if (num_stages < 2) throw std::invalid_argument("need at least two dense stages");
  const int last = num_stages;
  if (arch == Arch::single) {
    if (sequence_length != 1) throw std::invalid_argument("single-frame arch needs sequence length 1");
    return {};
  }
  const bool early = arch == Arch::esf;
  switch (sequence_length) {
    case 2: return {{early ? 0 : last, 2, 2}};
    case 4: return early ? std::vector<FusionPlacement>{{0, 2, 2}, {1, 2, 2}}
                         : std::vector<FusionPlacement>{{last - 1, 2, 2}, {last, 2, 2}};
    case 6: return early ? std::vector<FusionPlacement>{{0, 2, 2}, {1, 3, 3}}
                         : std::vector<FusionPlacement>{{last - 1, 2, 2}, {last, 3, 3}};
    default:
      throw std::invalid_argument("unsupported sequence length " + std::to_string(sequence_length) +
                                  " (expected 2, 4 or 6)");
  }
}

// ---------------------------------------------------------------------------

std::vector<std::int64_t> ModelConfig::scaled_depths() const {
  std::vector<std::int64_t> out;
  for (auto d : dense_depths) {
    out.push_back(std::max<std::int64_t>(1, std::llround(static_cast<double>(d) * depth_multiplier)));
  }
  return out;
}

std::int64_t ModelConfig::total_stride() const { return kStemStride << reducing_transitions; }

HeadLayout ModelConfig::head_layout() const {
  HeadLayout h;
  h.anchors = static_cast<std::int64_t>(anchors.size());
  h.classes = num_classes;
  h.per_anchor = head_filters > 0 ? head_filters / h.anchors : 5 + num_classes;
  return h;
}

void ModelConfig::validate() const {
  if (arch == Arch::single) {
    if (sequence_length != 1) throw ConfigError("seq_len", "the single arch takes exactly one frame");
  } else if (sequence_length != 2 && sequence_length != 4 && sequence_length != 6) {
    throw ConfigError("seq_len", "must be 2, 4 or 6, got " + std::to_string(sequence_length));
  }
  if (input_height <= 0 || input_width <= 0) throw ConfigError("input_height", "resolution must be positive");
  if (input_channels <= 0) throw ConfigError("input_channels", "must be positive");
  if (anchors.size() == 0) throw ConfigError("anchors", "need at least one anchor");
  if (num_classes <= 0) throw ConfigError("num_classes", "must be positive");
  for (auto w : stem.widths) {
    if (w <= 0) throw ConfigError("stem_widths", "widths must be positive");
  }
  if (growth <= 0) throw ConfigError("growth", "must be positive");
  if (dense_depths.size() < 2) throw ConfigError("dense_depths", "need at least two dense blocks");
  for (auto d : dense_depths) {
    if (d <= 0) throw ConfigError("dense_depths", "depths must be positive");
  }
  if (!(depth_multiplier > 0)) throw ConfigError("depth_multiplier", "must be positive");
  if (transition_widths.size() != dense_depths.size()) {
    throw ConfigError("transition_widths", "needs one width per dense block");
  }
  for (auto w : transition_widths) {
    if (w <= 0) throw ConfigError("transition_widths", "widths must be positive");
  }
  if (reducing_transitions < 0 || reducing_transitions >= static_cast<std::int64_t>(dense_depths.size())) {
    throw ConfigError("reducing_transitions", "the last transition never reduces; must be below the block count");
  }
  if (fusion_channels < 0) throw ConfigError("fusion_channels", "must be non-negative");
  if (pool_spatial_extent <= 0 || pool_spatial_extent % 2 == 0) {
    throw ConfigError("pool_extent", "must be odd and positive");
  }
  if (head_filters < 0) throw ConfigError("head_filters", "must be non-negative");
  if (head_filters > 0) {
    const auto a = static_cast<std::int64_t>(anchors.size());
    if (head_filters % a != 0 || head_filters / a < 5 + num_classes) {
      throw ConfigError("head_filters", "must be a multiple of the anchor count with at least 5 + classes per anchor");
    }
  }
  if (input_height / total_stride() < 1 || input_width / total_stride() < 1) {
    throw ConfigError("input_height", "resolution below the total stride " + std::to_string(total_stride()));
  }
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.arch == b.arch && a.sequence_length == b.sequence_length && a.fusion_kind == b.fusion_kind &&
         a.temporal_padding == b.temporal_padding && a.input_height == b.input_height &&
         a.input_width == b.input_width && a.input_channels == b.input_channels &&
         a.anchors.shapes() == b.anchors.shapes() && a.num_classes == b.num_classes &&
         a.stem.widths == b.stem.widths && a.growth == b.growth && a.dense_depths == b.dense_depths &&
         a.depth_multiplier == b.depth_multiplier && a.transition_widths == b.transition_widths &&
         a.reducing_transitions == b.reducing_transitions && a.fusion_channels == b.fusion_channels &&
         a.pool_spatial_extent == b.pool_spatial_extent && a.head_filters == b.head_filters;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

std::vector<std::int64_t> to_i64(const std::vector<long long>& v) { return {v.begin(), v.end()}; }
std::vector<long long> to_ll(const std::vector<std::int64_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

std::vector<std::string> model_config_keys() {
  return {"arch",        "seq_len",          "fusion",          "temporal_padding",   "input_height",
          "input_width", "input_channels",   "anchors",         "num_classes",        "stem_widths",
          "growth",      "dense_depths",     "depth_multiplier", "transition_widths", "reducing_transitions",
          "fusion_channels", "pool_extent",  "head_filters"};
}

std::string format_anchors(const AnchorSet& anchors) {
  std::string out;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (i) out += ",";
    out += format_double(anchors[i].w) + "x" + format_double(anchors[i].h);
  }
  return out;
}

AnchorSet parse_anchors(const std::string& text) {
  if (text.rfind("placeholder:", 0) == 0) return AnchorSet::placeholder(std::stoul(text.substr(12)));
  std::vector<AnchorShape> shapes;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto x = item.find('x');
    if (x == std::string::npos) throw ConfigError("anchors", "expected WxH entries, got '" + item + "'");
    try {
      shapes.push_back({std::stod(item.substr(0, x)), std::stod(item.substr(x + 1))});
    } catch (const std::logic_error&) {
      throw ConfigError("anchors", "bad anchor '" + item + "'");
    }
  }
  try {
    return AnchorSet(std::move(shapes));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("anchors", e.what());
  }
}

void write_model_config(const ModelConfig& c, KeyValues& out) {
  out.set("arch", to_string(c.arch));
  out.set("seq_len", std::to_string(c.sequence_length));
  out.set("fusion", to_string(c.fusion_kind));
  out.set("temporal_padding", c.temporal_padding ? "on" : "off");
  out.set("input_height", std::to_string(c.input_height));
  out.set("input_width", std::to_string(c.input_width));
  out.set("input_channels", std::to_string(c.input_channels));
  out.set("anchors", format_anchors(c.anchors));
  out.set("num_classes", std::to_string(c.num_classes));
  out.set("stem_widths", join(std::vector<std::int64_t>(c.stem.widths.begin(), c.stem.widths.end())));
  out.set("growth", std::to_string(c.growth));
  out.set("dense_depths", join(c.dense_depths));
  out.set("depth_multiplier", format_double(c.depth_multiplier));
  out.set("transition_widths", join(c.transition_widths));
  out.set("reducing_transitions", std::to_string(c.reducing_transitions));
  out.set("fusion_channels", std::to_string(c.fusion_channels));
  out.set("pool_extent", std::to_string(c.pool_spatial_extent));
  out.set("head_filters", std::to_string(c.head_filters));
}

ModelConfig read_model_config(const KeyValues& kv) {
  ModelConfig c;
  try {
    c.arch = parse_arch(kv.get_string("arch", to_string(c.arch)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("arch", e.what());
  }
  c.sequence_length = static_cast<int>(kv.get_int("seq_len", c.arch == Arch::single ? 1 : c.sequence_length));
  try {
    c.fusion_kind = parse_fusion_kind(kv.get_string("fusion", to_string(c.fusion_kind)));
  } catch (const std::invalid_argument& e) {
    throw ConfigError("fusion", e.what());
  }
  c.temporal_padding = kv.get_bool("temporal_padding", c.temporal_padding);
  c.input_height = kv.get_int("input_height", c.input_height);
  c.input_width = kv.get_int("input_width", c.input_width);
  c.input_channels = kv.get_int("input_channels", c.input_channels);
  if (auto a = kv.get("anchors")) c.anchors = parse_anchors(*a);
  c.num_classes = kv.get_int("num_classes", c.num_classes);
  const auto stem = kv.get_int_list("stem_widths", to_ll({c.stem.widths.begin(), c.stem.widths.end()}));
  if (stem.size() != 3) throw ConfigError("stem_widths", "expected three widths");
  for (int i = 0; i < 3; ++i) c.stem.widths[i] = stem[i];
  c.growth = kv.get_int("growth", c.growth);
  c.dense_depths = to_i64(kv.get_int_list("dense_depths", to_ll(c.dense_depths)));
  c.depth_multiplier = kv.get_double("depth_multiplier", c.depth_multiplier);
  c.transition_widths = to_i64(kv.get_int_list("transition_widths", to_ll(c.transition_widths)));
  c.reducing_transitions = kv.get_int("reducing_transitions", c.reducing_transitions);
  c.fusion_channels = kv.get_int("fusion_channels", c.fusion_channels);
  c.pool_spatial_extent = kv.get_int("pool_extent", c.pool_spatial_extent);
  c.head_filters = kv.get_int("head_filters", c.head_filters);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

std::string to_string(BlockKind kind) {
  switch (kind) {
    case BlockKind::stem: return "stem";
    case BlockKind::dense: return "dense";
    case BlockKind::transition: return "transition";
    case BlockKind::fusion: return "fusion";
    case BlockKind::squeeze: return "squeeze";
    case BlockKind::head: return "head";
  }
  return "?";
}

std::int64_t BlockInfo::params() const { return count_layers(convs).total() + 2 * norm_channels; }

std::int64_t BlockInfo::macs() const {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < convs.size(); ++i) total += conv_macs(convs[i], conv_outputs[i]);
  return total;
}

Shape ModelGraph::input_shape(std::int64_t batch) const {
  return {batch, config.input_channels, config.sequence_length, config.input_height, config.input_width};
}

namespace {

Shape with_channels(Shape s, std::int64_t c) {
  s[1] = c;
  return s;
}

void annotate_stem(BlockInfo& b, const ModelConfig& c) {
  b.convs = stem_layers(c.input_channels, c.stem);
  Shape s = b.input_shape;
  std::int64_t peak = 0;
  for (const auto& l : b.convs) {
    const Shape out = conv3d_output_shape(s, l.spec);
    b.conv_outputs.push_back(out);
    b.norm_channels += l.spec.out_channels;
    peak = std::max(peak, shape_numel(s) + shape_numel(out));
    s = out;
  }
  b.output_shape = stem_output_shape(b.input_shape, c.stem);
  b.peak_elements = std::max(peak, shape_numel(s) + shape_numel(b.output_shape));
}

void annotate_dense(BlockInfo& b) {
  b.convs = dense_block_layers(b.input_shape[1], b.dense);
  for (const auto& l : b.convs) {
    b.conv_outputs.push_back(with_channels(b.input_shape, l.spec.out_channels));
    b.norm_channels += l.in_channels;
  }
  b.output_shape = dense_block_output_shape(b.input_shape, b.dense);
  // The growing concatenation plus the newest layer output.
  b.peak_elements = shape_numel(b.input_shape) + shape_numel(b.output_shape);
}

void annotate_transition(BlockInfo& b) {
  b.convs = transition_layers(b.input_shape[1], b.transition);
  const Shape conv_out = with_channels(b.input_shape, b.transition.bottleneck_channels);
  b.conv_outputs.push_back(conv_out);
  b.norm_channels = b.input_shape[1];
  b.output_shape = transition_output_shape(b.input_shape, b.transition);
  b.peak_elements = shape_numel(b.input_shape) + shape_numel(conv_out);
}

void annotate_fusion(BlockInfo& b) {
  b.output_shape = fusion_output_shape(b.input_shape, b.fusion);
  b.convs = fusion_layers(b.input_shape[1], b.fusion);
  for (const auto& l : b.convs) b.conv_outputs.push_back(with_channels(b.output_shape, l.spec.out_channels));
  // Inception branches are alive together until the concatenation.
  b.peak_elements = shape_numel(b.input_shape) + shape_numel(b.output_shape);
}

}  // namespace

ModelGraph build_model(const ModelConfig& config, std::int64_t batch) {
  config.validate();
  if (batch <= 0) throw std::invalid_argument("batch must be positive");
  ModelGraph g;
  g.config = config;
  g.head = config.head_layout();
  const auto depths = config.scaled_depths();
  const int stages = static_cast<int>(depths.size());
  const auto schedule = fusion_schedule(config.arch, config.sequence_length, stages);

  Shape current = g.input_shape(batch);
  int fusion_ordinal = 0;
  auto push = [&](BlockInfo b, auto&& annotate) {
    b.input_shape = current;
    try {
      annotate(b);
    } catch (const std::invalid_argument& e) {
      throw ShapeError("block " + b.name + ": " + e.what());
    }
    current = b.output_shape;
    if (b.kind == BlockKind::fusion) g.fusion_indices.push_back(g.blocks.size());
    g.blocks.push_back(std::move(b));
  };
  auto add_fusions = [&](int position) {
    for (const auto& p : schedule) {
      if (p.position != position) continue;
      BlockInfo b;
      b.kind = BlockKind::fusion;
      b.name = "fusion" + std::to_string(++fusion_ordinal);
      b.stage = position;
      b.fusion = {config.fusion_kind, p.extent, p.stride, config.pool_spatial_extent, config.fusion_channels};
      push(std::move(b), annotate_fusion);
    }
  };

  BlockInfo stem;
  stem.kind = BlockKind::stem;
  stem.name = "stem";
  push(std::move(stem), [&](BlockInfo& b) { annotate_stem(b, config); });
  add_fusions(0);

  for (int i = 0; i < stages; ++i) {
    BlockInfo d;
    d.kind = BlockKind::dense;
    d.name = "dense" + std::to_string(i + 1);
    d.stage = i + 1;
    // Temporal kernels only where there is a temporal axis left to pad.
    d.dense = {depths[i], config.growth, config.temporal_padding && current[2] > 1};
    push(std::move(d), annotate_dense);

    BlockInfo t;
    t.kind = BlockKind::transition;
    t.name = "transition" + std::to_string(i + 1);
    t.stage = i + 1;
    t.transition = {config.transition_widths[i], i < config.reducing_transitions};
    push(std::move(t), annotate_transition);
    add_fusions(i + 1);
  }

  BlockInfo sq;
  sq.kind = BlockKind::squeeze;
  sq.name = "squeeze";
  sq.stage = stages;
  push(std::move(sq), [](BlockInfo& b) {
    if (b.input_shape[2] != 1) {
      throw ShapeError("temporal axis is " + std::to_string(b.input_shape[2]) + ", expected 1 before the head");
    }
    b.output_shape = {b.input_shape[0], b.input_shape[1], b.input_shape[3], b.input_shape[4]};
    b.peak_elements = shape_numel(b.input_shape);
  });

  BlockInfo head;
  head.kind = BlockKind::head;
  head.name = "head";
  head.stage = stages;
  push(std::move(head), [&](BlockInfo& b) {
    ConvLayout l;
    l.in_channels = b.input_shape[1];
    l.spec.out_channels = g.head.channels();
    b.convs = {l};
    b.output_shape = {b.input_shape[0], g.head.channels(), b.input_shape[2], b.input_shape[3]};
    b.conv_outputs = {{b.input_shape[0], g.head.channels(), 1, b.input_shape[2], b.input_shape[3]}};
    b.peak_elements = shape_numel(b.input_shape) + shape_numel(b.output_shape);
  });

  g.grid_h = current[2];
  g.grid_w = current[3];
  return g;
}

// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto conv = [&](const std::string& prefix, const ConvParams& p) {
    out.emplace_back(prefix + ".weight", p.weight);
    out.emplace_back(prefix + ".bias", p.bias);
  };
  auto norm = [&](const std::string& prefix, const NormParams& p) {
    out.emplace_back(prefix + ".gamma", p.gamma);
    out.emplace_back(prefix + ".beta", p.beta);
    out.emplace_back(prefix + ".running_mean", p.running_mean);
    out.emplace_back(prefix + ".running_var", p.running_var);
  };
  for (std::size_t i = 0; i < 3; ++i) {
    conv("stem.conv" + std::to_string(i), stem.conv[i]);
    norm("stem.norm" + std::to_string(i), stem.norm[i]);
  }
  for (std::size_t b = 0; b < dense.size(); ++b) {
    for (std::size_t l = 0; l < dense[b].conv.size(); ++l) {
      const std::string prefix = "dense" + std::to_string(b + 1) + ".layer" + std::to_string(l);
      norm(prefix + ".norm", dense[b].norm[l]);
      conv(prefix + ".conv", dense[b].conv[l]);
    }
  }
  for (std::size_t b = 0; b < transition.size(); ++b) {
    norm("transition" + std::to_string(b + 1) + ".norm", transition[b].norm);
    conv("transition" + std::to_string(b + 1) + ".conv", transition[b].conv);
  }
  for (std::size_t b = 0; b < fusion.size(); ++b) {
    for (std::size_t l = 0; l < fusion[b].conv.size(); ++l) {
      conv("fusion" + std::to_string(b + 1) + ".conv" + std::to_string(l), fusion[b].conv[l]);
    }
  }
  conv("head", head);
  return out;
}

std::vector<Tensor> ModelParams::trainable() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) {
    if (t.requires_grad()) out.push_back(t);
  }
  return out;
}

ModelParams init_params(const ModelGraph& graph, std::uint64_t seed) {
  Rng rng(seed);
  ModelParams p;
  const auto& c = graph.config;
  for (const auto& b : graph.blocks) {
    switch (b.kind) {
      case BlockKind::stem: p.stem = init_stem(c.input_channels, c.stem, rng); break;
      case BlockKind::dense: p.dense.push_back(init_dense_block(b.input_shape[1], b.dense, rng)); break;
      case BlockKind::transition: p.transition.push_back(init_transition(b.input_shape[1], b.transition, rng)); break;
      case BlockKind::fusion: p.fusion.push_back(init_fusion(b.input_shape[1], b.fusion, rng)); break;
      case BlockKind::squeeze: break;
      case BlockKind::head:
        p.head = {he_normal({graph.head.channels(), b.input_shape[1], 1, 1}, rng),
                  Tensor::zeros({graph.head.channels()}, true)};
        break;
    }
  }
  return p;
}

Tensor head_forward(const Tensor& features, const ConvParams& head, const HeadLayout& layout,
                    ConvAlgorithm algorithm) {
  if (features.rank() != 4) throw ShapeError("head expects [N,C,H,W], got " + to_string(features.shape()));
  if (head.weight.rank() != 4 || head.weight.dim(0) != layout.channels()) {
    throw ShapeError("head weight " + to_string(head.weight.shape()) + " does not produce " +
                     std::to_string(layout.channels()) + " channels");
  }
  if (head.weight.dim(1) != features.dim(1)) {
    throw ShapeError("channel mismatch on axis C: head expects " + std::to_string(head.weight.dim(1)) +
                     ", features have " + std::to_string(features.dim(1)));
  }
  ConvSpec spec;
  spec.out_channels = layout.channels();
  return conv2d(features, head.weight, head.bias, spec, algorithm);
}

Tensor forward(const ModelGraph& graph, ModelParams& params, const Tensor& input, const ForwardContext& ctx) {
  const Shape expected = graph.input_shape(input.rank() == 5 ? input.dim(0) : 1);
  if (input.shape() != expected) {
    throw ShapeError("model input " + to_string(input.shape()) + " does not match " + to_string(expected));
  }
  Tensor x = input;
  std::size_t d = 0, t = 0, f = 0;
  for (const auto& b : graph.blocks) {
    switch (b.kind) {
      case BlockKind::stem: x = stem_forward(x, graph.config.stem, params.stem, ctx); break;
      case BlockKind::dense: x = dense_block_forward(x, b.dense, params.dense.at(d++), ctx); break;
      case BlockKind::transition: x = transition_forward(x, b.transition, params.transition.at(t++), ctx); break;
      case BlockKind::fusion: x = fusion_forward(x, b.fusion, params.fusion.at(f++), ctx); break;
      case BlockKind::squeeze: x = squeeze_time(x); break;
      case BlockKind::head: x = head_forward(x, params.head, graph.head, ctx.algorithm); break;
    }
  }
  return x;
}

// ---------------------------------------------------------------------------

ProfileReport profile(const ModelGraph& graph) {
  ProfileReport r;
  for (const auto& b : graph.blocks) {
    ProfileRow row{b.name, b.params(), b.macs(), b.peak_elements};
    r.params_total += row.params;
    r.macs_total += row.macs;
    r.peak_feature_map_elements = std::max(r.peak_feature_map_elements, row.peak_elements);
    r.rows.push_back(std::move(row));
  }
  return r;
}

std::string profile_csv(const ProfileReport& report) {
  std::ostringstream os;
  os << "block,params,flops,peak_elements\n";
  for (const auto& r : report.rows) os << r.block << ',' << r.params << ',' << r.macs << ',' << r.peak_elements << '\n';
  os << "total," << report.params_total << ',' << report.macs_total << ',' << report.peak_feature_map_elements
     << '\n';
  return os.str();
}

}  // namespace tfn
