#include "stlt/stlt_model.hpp"

#include "json.hpp"
#include "stlt/errors.hpp"
#include "stlt/ops.hpp"

namespace stlt {

namespace {

Rng& context_rng(const ForwardContext& ctx, Rng& fallback) {
  if (ctx.rng) return *ctx.rng;
  if (ctx.training) throw ConfigError("training forward needs a random stream");
  return fallback;
}

Tensor boxes_tensor(std::span<const double> flat) {
  return Tensor({flat.size() / 4, 4}, std::vector<double>(flat.begin(), flat.end()));
}

}  // namespace

std::string variant_name(StltVariant v) { return v == StltVariant::stlt ? "stlt" : "joint"; }

StltVariant parse_variant(const std::string& name) {
  if (name == "stlt") return StltVariant::stlt;
  if (name == "joint") return StltVariant::joint;
  throw ConfigError("unknown model variant '" + name + "'");
}

void StltConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  need(width > 0, "width must be positive");
  need(spatial_heads > 0 && width % spatial_heads == 0, "width must be divisible by spatial_heads");
  need(temporal_heads > 0 && width % temporal_heads == 0, "width must be divisible by temporal_heads");
  need(spatial_layers > 0 && temporal_layers > 0, "layer counts must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(max_objects > 0, "max_objects must be positive");
  need(frames > 0, "frames must be positive");
  need(vocabulary_size > Vocabulary::kPaddingIndex, "vocabulary must hold the class and padding categories");
  need(num_classes > 0, "num_classes must be positive");
  need(ff_multiplier > 0, "ff_multiplier must be positive");
}

std::string StltConfig::to_json() const {
  nlohmann::json j{{"variant", variant_name(variant)},
                   {"width", width},
                   {"spatial_layers", spatial_layers},
                   {"spatial_heads", spatial_heads},
                   {"temporal_layers", temporal_layers},
                   {"temporal_heads", temporal_heads},
                   {"dropout", dropout},
                   {"max_objects", max_objects},
                   {"frames", frames},
                   {"vocabulary_size", vocabulary_size},
                   {"num_classes", num_classes},
                   {"ff_multiplier", ff_multiplier}};
  return j.dump();
}

StltConfig StltConfig::from_json(const std::string& text) {
  StltConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.width = j.at("width").get<std::size_t>();
    c.spatial_layers = j.at("spatial_layers").get<std::size_t>();
    c.spatial_heads = j.at("spatial_heads").get<std::size_t>();
    c.temporal_layers = j.at("temporal_layers").get<std::size_t>();
    c.temporal_heads = j.at("temporal_heads").get<std::size_t>();
    c.dropout = j.at("dropout").get<double>();
    c.max_objects = j.at("max_objects").get<std::size_t>();
    c.frames = j.at("frames").get<std::size_t>();
    c.vocabulary_size = j.at("vocabulary_size").get<std::size_t>();
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.ff_multiplier = j.at("ff_multiplier").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model metadata: ") + e.what());
  }
  c.validate();
  return c;
}

StltWeights StltWeights::init(const StltConfig& config, Rng& rng) {
  config.validate();
  const std::size_t d = config.width;
  StltWeights w;
  w.variant = config.variant;
  w.category = Embedding::init(config.vocabulary_size, d, rng);
  w.box = Linear::init(4, d, rng);
  w.object_norm = LayerNormParams::init(d);
  w.position = Embedding::init(config.frames + 2, d, rng);
  if (config.variant == StltVariant::stlt) {
    for (std::size_t i = 0; i < config.spatial_layers; ++i) {
      w.spatial.push_back(TransformerBlock::init(d, config.ff_multiplier, rng));
    }
    w.temporal_norm = LayerNormParams::init(d);
    for (std::size_t i = 0; i < config.temporal_layers; ++i) {
      w.temporal.push_back(TransformerBlock::init(d, config.ff_multiplier, rng));
    }
    w.temporal_class = normal_tensor({1, d}, 0.02, rng, true);
  } else {
    for (std::size_t i = 0; i < config.spatial_layers + config.temporal_layers; ++i) {
      w.joint.push_back(TransformerBlock::init(d, config.ff_multiplier, rng));
    }
  }
  w.classifier = Linear::init(d, config.num_classes, rng);
  return w;
}

void StltWeights::collect(NamedTensors& out) const {
  category.collect("category", out);
  box.collect("box", out);
  object_norm.collect("object_norm", out);
  for (std::size_t i = 0; i < spatial.size(); ++i) spatial[i].collect("spatial." + std::to_string(i), out);
  position.collect("position", out);
  if (variant == StltVariant::stlt) {
    temporal_norm.collect("temporal_norm", out);
    out.emplace_back("temporal_class", temporal_class);
  }
  for (std::size_t i = 0; i < temporal.size(); ++i) temporal[i].collect("temporal." + std::to_string(i), out);
  for (std::size_t i = 0; i < joint.size(); ++i) joint[i].collect("joint." + std::to_string(i), out);
  classifier.collect("classifier", out);
}

NamedTensors StltWeights::parameters() const {
  NamedTensors out;
  collect(out);
  return out;
}

LayoutInput prepare_layout(const VideoLayout& video, std::size_t frames, std::size_t max_objects, SamplingMode mode,
                           Rng& rng) {
  const auto sampled = sample_frames(video, frames, mode, rng);
  LayoutInput in;
  in.frames.reserve(frames);
  for (const auto& f : sampled.frames) in.frames.push_back(pad_objects(f, max_objects));
  return in;
}

PackedLayout pack_layouts(std::span<const LayoutInput> inputs, const StltConfig& config) {
  if (inputs.empty()) throw ConfigError("empty batch");
  PackedLayout p;
  p.videos = inputs.size();
  p.frames = inputs[0].frames.size();
  if (p.frames == 0 || p.frames > config.frames) {
    throw ConfigError("videos must hold between 1 and " + std::to_string(config.frames) + " frames");
  }
  for (const auto& in : inputs) {
    if (in.frames.size() != p.frames) throw ConfigError("all videos in a batch need the same frame count");
    for (const auto& f : in.frames) {
      if (f.categories.size() > config.max_objects) throw ConfigError("frame exceeds max_objects");
      p.class_rows.push_back(p.categories.size());
      p.categories.push_back(Vocabulary::kClassIndex);
      p.boxes.insert(p.boxes.end(), {0.0, 0.0, 1.0, 1.0});
      p.slots.push_back(PackedLayout::kClassSlot);
      std::size_t length = 1;
      for (std::size_t j = 0; j < f.categories.size(); ++j) {
        if (!f.valid[j]) continue;
        if (f.categories[j] >= config.vocabulary_size) throw DataError("category index outside the vocabulary");
        const auto& b = f.boxes[j];
        p.categories.push_back(f.categories[j]);
        p.boxes.insert(p.boxes.end(), {b.x1, b.y1, b.x2, b.y2});
        p.slots.push_back(j);
        ++length;
      }
      p.lengths.push_back(length);
    }
  }
  return p;
}

Tensor embed_objects(const StltWeights& w, const StltConfig& config, std::span<const std::size_t> categories,
                     const Tensor& boxes, const Tensor& addend, const ForwardContext& ctx) {
  Rng fallback(0);
  Rng& rng = context_rng(ctx, fallback);
  Tensor s = add(w.category.lookup(categories), w.box(boxes));
  if (addend.defined()) s = add(s, addend);
  return dropout(w.object_norm(s), config.dropout, ctx.training, rng);
}

Tensor embed_object(const StltWeights& w, const StltConfig& config, std::size_t category, const BoundingBox& box,
                    const ForwardContext& ctx) {
  const std::size_t cat[1] = {category};
  const Tensor b({1, 4}, {box.x1, box.y1, box.x2, box.y2});
  return reshape(embed_objects(w, config, cat, b, Tensor(), ctx), {config.width});
}

Tensor spatial_forward(const StltWeights& w, const StltConfig& config, const PackedLayout& packed,
                       const Tensor& addend, const ForwardContext& ctx) {
  Rng fallback(0);
  Rng& rng = context_rng(ctx, fallback);
  Tensor x = embed_objects(w, config, packed.categories, boxes_tensor(packed.boxes), addend, ctx);
  const auto segments = self_segments(packed.lengths, AttentionMask::Kind::bidirectional);
  const TransformerSettings settings{config.spatial_heads, config.dropout, ctx.training};
  for (const auto& block : w.spatial) x = block.forward(x, segments, settings, rng);
  return gather_rows(x, packed.class_rows);
}

TemporalOutput temporal_forward(const StltWeights& w, const StltConfig& config, const Tensor& frames,
                                std::size_t videos, const Tensor& prefix, const ForwardContext& ctx) {
  Rng fallback(0);
  Rng& rng = context_rng(ctx, fallback);
  if (videos == 0 || frames.rows() % videos != 0) throw ShapeError("temporal_forward: rows not divisible by videos");
  const std::size_t n = frames.rows() / videos;
  const bool has_prefix = prefix.defined();
  if (has_prefix && prefix.rows() != videos) throw ShapeError("temporal_forward: one prefix row per video");
  const std::size_t length = n + 1 + (has_prefix ? 1 : 0);
  if (length > config.frames + 2) throw ConfigError("temporal sequence longer than the position table");

  std::vector<Tensor> parts{frames, w.temporal_class};
  if (has_prefix) parts.push_back(prefix);
  const Tensor pool = concat_rows(parts);
  const std::size_t class_row = videos * n;
  std::vector<std::size_t> rows, positions;
  rows.reserve(videos * length);
  for (std::size_t b = 0; b < videos; ++b) {
    if (has_prefix) rows.push_back(class_row + 1 + b);
    for (std::size_t i = 0; i < n; ++i) rows.push_back(b * n + i);
    rows.push_back(class_row);
    for (std::size_t i = 0; i < length; ++i) positions.push_back(i);
  }
  Tensor x = add(gather_rows(pool, rows), w.position.lookup(positions));
  x = dropout(w.temporal_norm(x), config.dropout, ctx.training, rng);

  const std::vector<std::size_t> lengths(videos, length);
  const auto segments = self_segments(lengths, AttentionMask::Kind::causal);
  const TransformerSettings settings{config.temporal_heads, config.dropout, ctx.training};
  for (const auto& block : w.temporal) x = block.forward(x, segments, settings, rng);

  TemporalOutput out;
  out.hidden = x;
  out.sequence = length;
  for (std::size_t b = 0; b < videos; ++b) out.class_rows.push_back(b * length + length - 1);
  out.class_hidden = gather_rows(x, out.class_rows);
  return out;
}

Tensor joint_encode(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                    const ForwardContext& ctx) {
  Rng fallback(0);
  Rng& rng = context_rng(ctx, fallback);
  if (inputs.empty()) throw ConfigError("empty batch");
  const std::size_t n = inputs[0].frames.size();
  if (n == 0 || n > config.frames) throw ConfigError("joint variant: bad frame count");
  const std::size_t m = config.max_objects;
  const std::size_t length = n * m + 1;
  const std::size_t zero_row = config.frames + 2;

  std::vector<std::size_t> categories, positions;
  std::vector<double> boxes;
  std::vector<AttentionSegment> segments;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const auto& in = inputs[b];
    if (in.frames.size() != n) throw ConfigError("all videos in a batch need the same frame count");
    std::vector<bool> valid;
    valid.reserve(length);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& f = in.frames[i];
      if (f.categories.size() != m) throw ConfigError("joint variant needs frames padded to max_objects");
      for (std::size_t j = 0; j < m; ++j) {
        if (f.categories[j] >= config.vocabulary_size) throw DataError("category index outside the vocabulary");
        categories.push_back(f.categories[j]);
        const auto& bx = f.boxes[j];
        boxes.insert(boxes.end(), {bx.x1, bx.y1, bx.x2, bx.y2});
        positions.push_back(i);
        valid.push_back(f.valid[j]);
      }
    }
    categories.push_back(Vocabulary::kClassIndex);
    boxes.insert(boxes.end(), {0.0, 0.0, 1.0, 1.0});
    positions.push_back(zero_row);
    valid.push_back(true);
    segments.push_back({b * length, length, b * length, length, AttentionMask::padding(std::move(valid))});
  }
  const Tensor zero = Tensor::zeros({1, config.width});
  const Tensor table[2] = {w.position.table, zero};
  const Tensor addend = gather_rows(concat_rows(table), positions);
  Tensor x = embed_objects(w, config, categories, boxes_tensor(boxes), addend, ctx);
  const TransformerSettings settings{config.spatial_heads, config.dropout, ctx.training};
  for (const auto& block : w.joint) x = block.forward(x, segments, settings, rng);
  return x;
}

Tensor stlt_features(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                     const ForwardContext& ctx) {
  if (config.variant == StltVariant::joint) {
    const Tensor hidden = joint_encode(w, config, inputs, ctx);
    const std::size_t length = hidden.rows() / inputs.size();
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < inputs.size(); ++b) rows.push_back(b * length + length - 1);
    return gather_rows(hidden, rows);
  }
  const PackedLayout packed = pack_layouts(inputs, config);
  const Tensor frames = spatial_forward(w, config, packed, Tensor(), ctx);
  return temporal_forward(w, config, frames, packed.videos, Tensor(), ctx).class_hidden;
}

Tensor stlt_forward(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                    const ForwardContext& ctx) {
  return w.classifier(stlt_features(w, config, inputs, ctx));
}

Tensor stlt_joint_forward(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                          const ForwardContext& ctx) {
  if (config.variant != StltVariant::joint) throw ConfigError("stlt_joint_forward needs the joint variant");
  return stlt_forward(w, config, inputs, ctx);
}

Container to_container(const StltConfig& config, const StltWeights& w) {
  Container c;
  c.texts.push_back({"__meta__", config.to_json()});
  c.tensors = snapshot(w.parameters());
  return c;
}

void save_stlt(const std::filesystem::path& path, const StltConfig& config, const StltWeights& w) {
  save_container(path, to_container(config, w));
}

LoadedStlt from_container(const Container& c) {
  const TextEntry* meta = c.find_text("__meta__");
  if (!meta) throw DataError("checkpoint has no model metadata");
  LoadedStlt out;
  out.config = StltConfig::from_json(meta->text);
  Rng rng(0);
  out.weights = StltWeights::init(out.config, rng);
  restore(out.weights.parameters(), c.tensors);
  return out;
}

LoadedStlt load_stlt(const std::filesystem::path& path) { return from_container(load_container(path)); }

namespace {

StltConfig tiny_config(StltVariant variant) {
  StltConfig c;
  c.variant = variant;
  c.width = 8;
  c.spatial_layers = 1;
  c.temporal_layers = 1;
  c.spatial_heads = 2;
  c.temporal_heads = 2;
  c.dropout = 0.2;
  c.max_objects = 3;
  c.frames = 3;
  c.vocabulary_size = 4;
  c.num_classes = 3;
  c.ff_multiplier = 2;
  return c;
}

std::vector<LayoutInput> random_inputs(const StltConfig& c, std::size_t videos, Rng& rng) {
  std::vector<LayoutInput> out(videos);
  for (auto& in : out) {
    for (std::size_t i = 0; i < c.frames; ++i) {
      FrameLayout f;
      const std::size_t count = rng.below(c.max_objects + 1);
      for (std::size_t j = 0; j < count; ++j) {
        const double x1 = rng.uniform(0.0, 0.5), y1 = rng.uniform(0.0, 0.5);
        f.objects.push_back({2 + rng.below(c.vocabulary_size - 2),
                             {x1, y1, x1 + rng.uniform(0.1, 0.5), y1 + rng.uniform(0.1, 0.5)},
                             std::nullopt});
      }
      in.frames.push_back(pad_objects(f, c.max_objects));
    }
  }
  return out;
}

GradCheckCase model_case(const std::string& name, StltVariant variant) {
  return {name, [variant](Rng& rng) {
            const StltConfig config = tiny_config(variant);
            const StltWeights weights = StltWeights::init(config, rng);
            const auto inputs = random_inputs(config, 2, rng);
            const std::uint64_t seed = rng.next_u64();
            const TransformerBlock& first = variant == StltVariant::stlt ? weights.spatial[0] : weights.joint[0];
            std::vector<Tensor> params{weights.category.table, weights.box.weight, weights.position.table,
                                       first.attention.query.weight, weights.classifier.weight};
            if (variant == StltVariant::stlt) {
              params.push_back(weights.temporal_class);
              params.push_back(weights.temporal[0].feed_forward_out.weight);
            }
            return GradCheckInstance{params, [=](const std::vector<Tensor>& in) {
                                       StltWeights w = weights;
                                       w.category.table = in[0];
                                       w.box.weight = in[1];
                                       w.position.table = in[2];
                                       auto& block = variant == StltVariant::stlt ? w.spatial[0] : w.joint[0];
                                       block.attention.query.weight = in[3];
                                       w.classifier.weight = in[4];
                                       if (variant == StltVariant::stlt) {
                                         w.temporal_class = in[5];
                                         w.temporal[0].feed_forward_out.weight = in[6];
                                       }
                                       Rng stream(seed);
                                       return stlt_forward(w, config, inputs, {true, &stream});
                                     }};
          }};
}

}  // namespace

std::vector<GradCheckCase> model_gradcheck_cases() {
  return {model_case("stlt_forward", StltVariant::stlt), model_case("stlt_joint_forward", StltVariant::joint)};
}

}  // namespace stlt
