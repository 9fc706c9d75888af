#include "stlt/fusion.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "stlt/checkpoint.hpp"
#include "stlt/errors.hpp"
#include "stlt/ops.hpp"

namespace stlt {

namespace {

const char* const kSchemeNames[] = {"none", "appearance", "pff", "pbf", "ef", "vatf", "lcf", "caf", "cacnf"};

Rng& context_rng(const ForwardContext& ctx, Rng& fallback) {
  if (ctx.rng) return *ctx.rng;
  if (ctx.training) throw ConfigError("training forward needs a random stream");
  return fallback;
}

void add_prefixed(const std::string& prefix, const NamedTensors& in, NamedTensors& out, bool with_classifier) {
  for (const auto& [name, t] : in) {
    if (!with_classifier && name.rfind("classifier.", 0) == 0) continue;
    out.emplace_back(prefix + name, t);
  }
}

bool layout_classifier_used(FusionScheme s) {
  return s == FusionScheme::none || s == FusionScheme::pff || s == FusionScheme::pbf || s == FusionScheme::ef ||
         s == FusionScheme::cacnf;
}

AppearanceConfig effective_appearance(const FusionModelConfig& c) {
  AppearanceConfig a = c.appearance;
  a.per_frame = uses_frame_images(c.fusion.scheme);
  return a;
}

Tensor video_vector(const FusionWeights& w, const FusionModelConfig& config, const FusionBatch& batch,
                    const ForwardContext& ctx) {
  if (batch.precomputed_video.defined()) return batch.precomputed_video;
  return appearance_forward(w.appearance, effective_appearance(config), batch.clip, false, ctx).video;
}

}  // namespace

std::string scheme_name(FusionScheme s) { return kSchemeNames[static_cast<std::size_t>(s)]; }

FusionScheme parse_scheme(const std::string& name) {
  for (std::size_t i = 0; i < std::size(kSchemeNames); ++i) {
    if (name == kSchemeNames[i]) return static_cast<FusionScheme>(i);
  }
  throw ConfigError("unknown fusion scheme '" + name + "'");
}

bool uses_frame_images(FusionScheme s) { return s == FusionScheme::pff || s == FusionScheme::pbf; }
bool uses_layout(FusionScheme s) { return s != FusionScheme::appearance; }
bool uses_appearance(FusionScheme s) { return s != FusionScheme::none; }

void FusionConfig::validate() const {
  if (lambda_layout < 0.0 || lambda_appearance < 0.0) throw ConfigError("branch loss weights must be non-negative");
  if (caf_layers == 0) throw ConfigError("caf_layers must be positive");
  if (caf_heads == 0 || vatf_heads == 0) throw ConfigError("head counts must be positive");
}

void FusionModelConfig::validate() const {
  layout.validate();
  effective_appearance(*this).validate();
  fusion.validate();
  if (layout.num_classes != appearance.num_classes) throw ConfigError("branches disagree on the class count");
  if (layout.width % fusion.caf_heads != 0) throw ConfigError("layout width must be divisible by caf_heads");
  if (appearance.width % fusion.vatf_heads != 0) throw ConfigError("appearance width must be divisible by vatf_heads");
  if (layout.variant == StltVariant::joint && fusion.scheme != FusionScheme::none &&
      fusion.scheme != FusionScheme::appearance) {
    throw ConfigError("fusion schemes need the two-stage layout variant");
  }
}

std::string FusionModelConfig::to_json() const {
  const auto& a = appearance;
  nlohmann::json j{{"layout", nlohmann::json::parse(layout.to_json())},
                   {"appearance",
                    {{"resolution", a.resolution},
                     {"frames", a.frames},
                     {"channels", a.channels},
                     {"width", a.width},
                     {"token_grid", a.token_grid},
                     {"heads", a.heads},
                     {"encoder_layers", a.encoder_layers},
                     {"dropout", a.dropout},
                     {"num_classes", a.num_classes}}},
                   {"fusion",
                    {{"scheme", scheme_name(fusion.scheme)},
                     {"caf_layers", fusion.caf_layers},
                     {"caf_heads", fusion.caf_heads},
                     {"vatf_heads", fusion.vatf_heads},
                     {"lambda_layout", fusion.lambda_layout},
                     {"lambda_appearance", fusion.lambda_appearance}}}};
  return j.dump();
}

FusionModelConfig FusionModelConfig::from_json(const std::string& text) {
  FusionModelConfig c;
  try {
    const auto j = nlohmann::json::parse(text);
    c.layout = StltConfig::from_json(j.at("layout").dump());
    const auto& a = j.at("appearance");
    c.appearance.resolution = a.at("resolution").get<std::size_t>();
    c.appearance.frames = a.at("frames").get<std::size_t>();
    c.appearance.channels = a.at("channels").get<std::array<std::size_t, 3>>();
    c.appearance.width = a.at("width").get<std::size_t>();
    c.appearance.token_grid = a.at("token_grid").get<Triple>();
    c.appearance.heads = a.at("heads").get<std::size_t>();
    c.appearance.encoder_layers = a.at("encoder_layers").get<std::size_t>();
    c.appearance.dropout = a.at("dropout").get<double>();
    c.appearance.num_classes = a.at("num_classes").get<std::size_t>();
    const auto& f = j.at("fusion");
    c.fusion.scheme = parse_scheme(f.at("scheme").get<std::string>());
    c.fusion.caf_layers = f.at("caf_layers").get<std::size_t>();
    c.fusion.caf_heads = f.at("caf_heads").get<std::size_t>();
    c.fusion.vatf_heads = f.at("vatf_heads").get<std::size_t>();
    c.fusion.lambda_layout = f.at("lambda_layout").get<double>();
    c.fusion.lambda_appearance = f.at("lambda_appearance").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("fusion model metadata: ") + e.what());
  }
  c.validate();
  return c;
}

FusionWeights FusionWeights::init(const FusionModelConfig& config, Rng& rng) {
  config.validate();
  FusionWeights w;
  w.scheme = config.fusion.scheme;
  Rng layout_rng = rng.split("layout");
  Rng appearance_rng = rng.split("appearance");
  Rng fusion_rng = rng.split("fusion");
  w.layout = StltWeights::init(config.layout, layout_rng);
  w.appearance = AppearanceWeights::init(effective_appearance(config), appearance_rng);
  const std::size_t d = config.layout.width, da = config.appearance.width, c = config.appearance.trunk_channels();
  const std::size_t classes = config.layout.num_classes;
  w.pff_proj = Linear::init(da, d, fusion_rng, false);
  w.pbf_proj = Linear::init(c, d, fusion_rng, false);
  w.ef_proj = Linear::init(da, d, fusion_rng);
  w.vatf_query = Linear::init(c, da, fusion_rng);
  w.vatf_memory = Linear::init(c, da, fusion_rng);
  w.vatf_attention = MultiHeadAttentionWeights::init(da, fusion_rng);
  w.vatf_classifier = Linear::init(da, classes, fusion_rng);
  w.lcf_classifier = Linear::init(d + da, classes, fusion_rng);
  w.caf_appearance_proj = Linear::init(da, d, fusion_rng);
  for (std::size_t i = 0; i < config.fusion.caf_layers; ++i) {
    w.caf_layout_blocks.push_back(CrossAttentionBlock::init(d, config.layout.ff_multiplier, fusion_rng));
    w.caf_appearance_blocks.push_back(CrossAttentionBlock::init(d, config.layout.ff_multiplier, fusion_rng));
  }
  w.caf_classifier = Linear::init(2 * d, classes, fusion_rng);
  return w;
}

NamedTensors FusionWeights::parameters() const {
  NamedTensors out;
  if (uses_layout(scheme) && scheme != FusionScheme::vatf) {
    add_prefixed("layout.", layout.parameters(), out, layout_classifier_used(scheme));
  }
  switch (scheme) {
    case FusionScheme::none: break;
    case FusionScheme::appearance: appearance.collect("appearance", out, {true, false, true}); break;
    case FusionScheme::pff:
      appearance.collect("appearance", out, {true, false, false});
      pff_proj.collect("pff_proj", out);
      break;
    case FusionScheme::pbf:
      appearance.collect("appearance", out, {false, false, false});
      pbf_proj.collect("pbf_proj", out);
      break;
    case FusionScheme::ef:
      appearance.collect("appearance", out, {true, false, false});
      ef_proj.collect("ef_proj", out);
      break;
    case FusionScheme::vatf:
      appearance.collect("appearance", out, {false, false, false});
      vatf_query.collect("vatf_query", out);
      vatf_memory.collect("vatf_memory", out);
      vatf_attention.collect("vatf_attention", out);
      vatf_classifier.collect("vatf_classifier", out);
      break;
    case FusionScheme::lcf:
      appearance.collect("appearance", out, {true, false, false});
      lcf_classifier.collect("lcf_classifier", out);
      break;
    case FusionScheme::caf:
    case FusionScheme::cacnf:
      appearance.collect("appearance", out, {true, true, scheme == FusionScheme::cacnf});
      caf_appearance_proj.collect("caf_appearance_proj", out);
      for (std::size_t i = 0; i < caf_layout_blocks.size(); ++i) {
        caf_layout_blocks[i].collect("caf_layout." + std::to_string(i), out);
        caf_appearance_blocks[i].collect("caf_appearance." + std::to_string(i), out);
      }
      caf_classifier.collect("caf_classifier", out);
      break;
  }
  return out;
}

NamedTensors FusionWeights::classifier_parameters() const {
  NamedTensors out;
  switch (scheme) {
    case FusionScheme::none:
    case FusionScheme::pff:
    case FusionScheme::pbf:
    case FusionScheme::ef: layout.classifier.collect("layout.classifier", out); break;
    case FusionScheme::appearance: appearance.classifier.collect("appearance.classifier", out); break;
    case FusionScheme::vatf: vatf_classifier.collect("vatf_classifier", out); break;
    case FusionScheme::lcf: lcf_classifier.collect("lcf_classifier", out); break;
    case FusionScheme::caf: caf_classifier.collect("caf_classifier", out); break;
    case FusionScheme::cacnf:
      layout.classifier.collect("layout.classifier", out);
      appearance.classifier.collect("appearance.classifier", out);
      caf_classifier.collect("caf_classifier", out);
      break;
  }
  return out;
}

NamedTensors FusionWeights::backbone_parameters() const {
  std::set<std::string> heads;
  for (const auto& [name, t] : classifier_parameters()) heads.insert(name);
  NamedTensors out;
  for (auto& entry : parameters()) {
    if (!heads.count(entry.first)) out.push_back(entry);
  }
  return out;
}

void FusionWeights::reset_classifier(const FusionModelConfig& config, std::size_t classes, Rng& rng) {
  const std::size_t d = config.layout.width, da = config.appearance.width;
  switch (scheme) {
    case FusionScheme::none:
    case FusionScheme::pff:
    case FusionScheme::pbf:
    case FusionScheme::ef: layout.classifier = Linear::init(d, classes, rng); break;
    case FusionScheme::appearance: appearance.classifier = Linear::init(da, classes, rng); break;
    case FusionScheme::vatf: vatf_classifier = Linear::init(da, classes, rng); break;
    case FusionScheme::lcf: lcf_classifier = Linear::init(d + da, classes, rng); break;
    case FusionScheme::caf: caf_classifier = Linear::init(2 * d, classes, rng); break;
    case FusionScheme::cacnf:
      layout.classifier = Linear::init(d, classes, rng);
      appearance.classifier = Linear::init(da, classes, rng);
      caf_classifier = Linear::init(2 * d, classes, rng);
      break;
  }
}

Tensor fuse_pff(const Linear& projection, const Tensor& frame_appearance, const Tensor& frame_embeddings) {
  if (frame_appearance.rows() != frame_embeddings.rows()) throw ShapeError("fuse_pff: one appearance row per frame");
  return add(frame_embeddings, projection(frame_appearance));
}

Tensor fuse_pbf(const Linear& projection, const Tensor& roi_features) { return projection(roi_features); }

Tensor packed_roi_features(const Tensor& frame_maps, const PackedLayout& packed) {
  if (frame_maps.rank() != 4 || frame_maps.dim(0) != packed.lengths.size()) {
    throw ShapeError("packed_roi_features: one feature map per packed frame");
  }
  std::vector<RoiBox> boxes;
  boxes.reserve(packed.categories.size());
  std::size_t row = 0;
  constexpr double kMinExtent = 1e-6;
  for (std::size_t f = 0; f < packed.lengths.size(); ++f) {
    for (std::size_t k = 0; k < packed.lengths[f]; ++k, ++row) {
      const double* b = packed.boxes.data() + 4 * row;
      RoiBox r{f, b[0], b[1], b[2], b[3]};
      // Degenerate annotation boxes get a sliver of area instead of an error.
      if (r.x2 - r.x1 < kMinExtent) r.x2 = std::min(1.0, r.x1 + kMinExtent), r.x1 = r.x2 - kMinExtent;
      if (r.y2 - r.y1 < kMinExtent) r.y2 = std::min(1.0, r.y1 + kMinExtent), r.y1 = r.y2 - kMinExtent;
      boxes.push_back(r);
    }
  }
  return roi_align(frame_maps, boxes);
}

Tensor fuse_ef(const FusionWeights& w, const FusionModelConfig& config, const Tensor& video, const Tensor& frames,
               std::size_t videos, const ForwardContext& ctx) {
  const Tensor prefix = w.ef_proj(video);
  return w.layout.classifier(temporal_forward(w.layout, config.layout, frames, videos, prefix, ctx).class_hidden);
}

Tensor fuse_vatf(const FusionWeights& w, const FusionModelConfig& config, const Tensor& queries,
                 std::span<const std::size_t> query_counts, const Tensor& memory, std::size_t memory_per_video) {
  const std::size_t videos = query_counts.size();
  if (memory.rows() != videos * memory_per_video) throw ShapeError("fuse_vatf: memory rows mismatch");
  std::vector<AttentionSegment> segments;
  std::vector<std::size_t> offsets{0};
  for (std::size_t b = 0; b < videos; ++b) {
    if (query_counts[b] == 0) throw DataError("fuse_vatf: a video has no box queries");
    segments.push_back({offsets.back(), query_counts[b], b * memory_per_video, memory_per_video,
                        AttentionMask::bidirectional()});
    offsets.push_back(offsets.back() + query_counts[b]);
  }
  if (queries.rows() != offsets.back()) throw ShapeError("fuse_vatf: query rows mismatch");
  const Tensor attended = multi_head_attention(w.vatf_query(queries), w.vatf_memory(memory), w.vatf_attention,
                                               segments, config.fusion.vatf_heads);
  return segment_mean(w.vatf_classifier(attended), offsets);
}

Tensor fuse_lcf(const Linear& classifier, const Tensor& layout, const Tensor& appearance) {
  const Tensor parts[2] = {layout, appearance};
  return classifier(concat_cols(parts));
}

CafResult fuse_caf(const FusionWeights& w, const FusionModelConfig& config, const Tensor& layout_sequence,
                   std::size_t layout_length, const Tensor& appearance_sequence, std::size_t appearance_length,
                   const std::vector<bool>& appearance_valid, const ForwardContext& ctx) {
  Rng fallback(0);
  Rng& rng = context_rng(ctx, fallback);
  if (layout_length == 0 || appearance_length == 0) throw ShapeError("fuse_caf: empty sequence");
  const std::size_t videos = layout_sequence.rows() / layout_length;
  if (videos * layout_length != layout_sequence.rows() || appearance_sequence.rows() != videos * appearance_length) {
    throw ShapeError("fuse_caf: sequence rows do not match the lengths");
  }
  if (!appearance_valid.empty() && appearance_valid.size() != appearance_sequence.rows()) {
    throw ShapeError("fuse_caf: one validity flag per appearance token");
  }
  std::vector<AttentionSegment> layout_queries, appearance_queries;
  for (std::size_t b = 0; b < videos; ++b) {
    AttentionMask mask = AttentionMask::bidirectional();
    if (!appearance_valid.empty()) {
      mask = AttentionMask::padding(std::vector<bool>(appearance_valid.begin() + b * appearance_length,
                                                      appearance_valid.begin() + (b + 1) * appearance_length));
    }
    layout_queries.push_back({b * layout_length, layout_length, b * appearance_length, appearance_length, mask});
    appearance_queries.push_back(
        {b * appearance_length, appearance_length, b * layout_length, layout_length, AttentionMask::bidirectional()});
  }
  const TransformerSettings settings{config.fusion.caf_heads, config.layout.dropout, ctx.training};
  Tensor l = layout_sequence, a = appearance_sequence;
  for (std::size_t i = 0; i < w.caf_layout_blocks.size(); ++i) {
    Tensor nl = w.caf_layout_blocks[i].forward(l, a, layout_queries, settings, rng);
    Tensor na = w.caf_appearance_blocks[i].forward(a, l, appearance_queries, settings, rng);
    l = nl;
    a = na;
  }
  std::vector<std::size_t> lrows, arows;
  for (std::size_t b = 0; b < videos; ++b) {
    lrows.push_back(b * layout_length + layout_length - 1);
    arows.push_back(b * appearance_length);
  }
  const Tensor pooled[2] = {gather_rows(l, lrows), gather_rows(a, arows)};
  return {w.caf_classifier(concat_cols(pooled)), l, a};
}

FusionOutput fusion_forward(const FusionWeights& w, const FusionModelConfig& config, const FusionBatch& batch,
                            const ForwardContext& ctx) {
  const FusionScheme scheme = config.fusion.scheme;
  if (scheme != w.scheme) throw ConfigError("weights were built for a different fusion scheme");
  const AppearanceConfig app_config = effective_appearance(config);
  const std::size_t videos = scheme == FusionScheme::appearance ? batch.clip.dim(0) : batch.layouts.size();
  FusionOutput out;
  switch (scheme) {
    case FusionScheme::none:
      out.logits = stlt_forward(w.layout, config.layout, batch.layouts, ctx);
      break;
    case FusionScheme::appearance:
      out.logits = w.appearance.classifier(video_vector(w, config, batch, ctx));
      break;
    case FusionScheme::pff: {
      const PackedLayout packed = pack_layouts(batch.layouts, config.layout);
      const Tensor frames = spatial_forward(w.layout, config.layout, packed, Tensor(), ctx);
      const Tensor app = appearance_forward(w.appearance, app_config, batch.frame_images, false, ctx).video;
      const Tensor fused = fuse_pff(w.pff_proj, app, frames);
      out.logits = w.layout.classifier(
          temporal_forward(w.layout, config.layout, fused, videos, Tensor(), ctx).class_hidden);
      break;
    }
    case FusionScheme::pbf: {
      const PackedLayout packed = pack_layouts(batch.layouts, config.layout);
      const Tensor trunk = appearance_forward(w.appearance, app_config, batch.frame_images, false, ctx).trunk;
      const Tensor maps = reshape(trunk, {trunk.dim(0), trunk.dim(1), trunk.dim(3), trunk.dim(4)});
      const Tensor addend = fuse_pbf(w.pbf_proj, packed_roi_features(maps, packed));
      const Tensor frames = spatial_forward(w.layout, config.layout, packed, addend, ctx);
      out.logits = w.layout.classifier(
          temporal_forward(w.layout, config.layout, frames, videos, Tensor(), ctx).class_hidden);
      break;
    }
    case FusionScheme::ef: {
      const PackedLayout packed = pack_layouts(batch.layouts, config.layout);
      const Tensor frames = spatial_forward(w.layout, config.layout, packed, Tensor(), ctx);
      out.logits = fuse_ef(w, config, video_vector(w, config, batch, ctx), frames, videos, ctx);
      break;
    }
    case FusionScheme::vatf: {
      const Tensor trunk = appearance_forward(w.appearance, app_config, batch.clip, false, ctx).trunk;
      const Tensor central = time_slice(trunk, trunk.dim(2) / 2);
      if (batch.central_boxes.size() != videos) throw ShapeError("vatf: central boxes for every video");
      std::vector<RoiBox> rois;
      std::vector<std::size_t> counts;
      for (std::size_t b = 0; b < videos; ++b) {
        std::size_t n = 0;
        for (const auto& box : batch.central_boxes[b]) {
          if (box.width() <= 0.0 || box.height() <= 0.0) continue;
          rois.push_back({b, box.x1, box.y1, box.x2, box.y2});
          ++n;
        }
        if (n == 0) rois.push_back({b, 0.0, 0.0, 1.0, 1.0}), n = 1;
        counts.push_back(n);
      }
      const Triple grid = app_config.pooled_grid(trunk.dim(2));
      const Tensor memory = channels_to_tokens(adaptive_avg_pool3d(trunk, grid));
      out.logits = fuse_vatf(w, config, roi_align(central, rois), counts, memory, grid[0] * grid[1] * grid[2]);
      break;
    }
    case FusionScheme::lcf: {
      const Tensor h = stlt_features(w.layout, config.layout, batch.layouts, ctx);
      out.logits = fuse_lcf(w.lcf_classifier, h, video_vector(w, config, batch, ctx));
      break;
    }
    case FusionScheme::caf:
    case FusionScheme::cacnf: {
      const PackedLayout packed = pack_layouts(batch.layouts, config.layout);
      const Tensor frames = spatial_forward(w.layout, config.layout, packed, Tensor(), ctx);
      const TemporalOutput temporal = temporal_forward(w.layout, config.layout, frames, videos, Tensor(), ctx);
      const AppearanceOutput app = appearance_forward(w.appearance, app_config, batch.clip, true, ctx);
      const Tensor app_tokens = w.caf_appearance_proj(app.tokens);
      out.logits = fuse_caf(w, config, temporal.hidden, temporal.sequence, app_tokens, app.sequence, {}, ctx).logits;
      if (scheme == FusionScheme::cacnf) {
        out.layout_logits = w.layout.classifier(temporal.class_hidden);
        out.appearance_logits = w.appearance.classifier(app.video);
      }
      break;
    }
  }
  return out;
}

Tensor task_loss(const Tensor& logits, const Targets& targets) {
  if (targets.multi_label) return binary_cross_entropy(logits, targets.multi_hot);
  return cross_entropy(logits, targets.classes);
}

Tensor cacnf_loss(const Tensor& fused, const Tensor& layout, const Tensor& appearance, const Targets& targets,
                  double lambda_layout, double lambda_appearance) {
  if (lambda_layout < 0.0 || lambda_appearance < 0.0) throw ConfigError("branch loss weights must be non-negative");
  Tensor loss = task_loss(fused, targets);
  if (lambda_layout > 0.0) loss = add(loss, scale(task_loss(layout, targets), lambda_layout));
  if (lambda_appearance > 0.0) loss = add(loss, scale(task_loss(appearance, targets), lambda_appearance));
  return loss;
}

Tensor fusion_loss(const FusionOutput& out, const FusionConfig& config, const Targets& targets) {
  if (config.scheme == FusionScheme::cacnf) {
    return cacnf_loss(out.logits, out.layout_logits, out.appearance_logits, targets, config.lambda_layout,
                      config.lambda_appearance);
  }
  return task_loss(out.logits, targets);
}

std::unordered_map<std::string, std::vector<double>> load_appearance_features(const std::filesystem::path& path) {
  const Container c = load_container(path);
  std::unordered_map<std::string, std::vector<double>> out;
  std::size_t width = 0;
  for (const auto& t : c.tensors) {
    if (t.shape.size() != 1) throw DataError("appearance feature '" + t.name + "' must be a vector");
    if (width == 0) width = t.shape[0];
    if (t.shape[0] != width) throw DataError("appearance features disagree on width");
    out.emplace(t.name, t.values);
  }
  return out;
}

Tensor gather_appearance_features(const std::unordered_map<std::string, std::vector<double>>& store,
                                  std::span<const std::string> ids, std::size_t width) {
  std::vector<double> values;
  values.reserve(ids.size() * width);
  for (const auto& id : ids) {
    auto it = store.find(id);
    if (it == store.end()) throw DataError("no precomputed appearance features for '" + id + "'");
    if (it->second.size() != width) throw DataError("precomputed features for '" + id + "' have the wrong width");
    values.insert(values.end(), it->second.begin(), it->second.end());
  }
  return Tensor({ids.size(), width}, std::move(values));
}

namespace {

FusionModelConfig tiny_fusion(FusionScheme scheme) {
  FusionModelConfig c;
  c.layout.width = 8;
  c.layout.spatial_layers = 1;
  c.layout.temporal_layers = 1;
  c.layout.spatial_heads = 2;
  c.layout.temporal_heads = 2;
  c.layout.dropout = 0.0;
  c.layout.max_objects = 2;
  c.layout.frames = 4;
  c.layout.vocabulary_size = 3;
  c.layout.num_classes = 3;
  c.layout.ff_multiplier = 1;
  c.appearance.resolution = 8;
  c.appearance.frames = 4;
  c.appearance.channels = {2, 2, 3};
  c.appearance.width = 4;
  c.appearance.token_grid = {2, 1, 1};
  c.appearance.heads = 2;
  c.appearance.dropout = 0.0;
  c.appearance.num_classes = 3;
  c.fusion.scheme = scheme;
  c.fusion.caf_layers = 1;
  c.fusion.caf_heads = 2;
  c.fusion.vatf_heads = 2;
  return c;
}

FusionBatch tiny_batch(const FusionModelConfig& c, Rng& rng) {
  FusionBatch b;
  const std::size_t videos = 2, n = 2;
  for (std::size_t v = 0; v < videos; ++v) {
    LayoutInput in;
    for (std::size_t i = 0; i < n; ++i) {
      FrameLayout f;
      const double x = rng.uniform(0.0, 0.5), y = rng.uniform(0.0, 0.5);
      f.objects.push_back({2, {x, y, x + 0.4, y + 0.3}, std::nullopt});
      in.frames.push_back(pad_objects(f, c.layout.max_objects));
    }
    b.layouts.push_back(in);
    b.central_boxes.push_back({in.frames[0].boxes[0]});
  }
  const std::size_t r = c.appearance.resolution;
  b.clip = uniform_tensor({videos, 3, c.appearance.frames, r, r}, 0.0, 1.0, rng);
  b.frame_images = uniform_tensor({videos * n, 3, 1, r, r}, 0.0, 1.0, rng);
  return b;
}

GradCheckCase fusion_case(FusionScheme scheme) {
  return {"fusion_" + scheme_name(scheme), [scheme](Rng& rng) {
            const FusionModelConfig config = tiny_fusion(scheme);
            const FusionWeights weights = FusionWeights::init(config, rng);
            const FusionBatch batch = tiny_batch(config, rng);
            // Check the fused-logit classifier and one appearance stage; the
            // rest of the graph is covered by the lower-level cases.
            NamedTensors params = weights.classifier_parameters();
            std::vector<Tensor> inputs;
            for (auto& p : params) inputs.push_back(p.second);
            inputs.push_back(weights.appearance.conv_weight[2]);
            const std::size_t heads = params.size();
            return GradCheckInstance{inputs, [=](const std::vector<Tensor>& in) {
                                       FusionWeights w = weights;
                                       // Rebind by position in the same order classifier_parameters lists them.
                                       std::size_t k = 0;
                                       auto rebind = [&](Linear& l) {
                                         l.weight = in[k++];
                                         l.bias = in[k++];
                                       };
                                       switch (scheme) {
                                         case FusionScheme::vatf: rebind(w.vatf_classifier); break;
                                         case FusionScheme::lcf: rebind(w.lcf_classifier); break;
                                         case FusionScheme::caf: rebind(w.caf_classifier); break;
                                         case FusionScheme::cacnf:
                                           rebind(w.layout.classifier);
                                           rebind(w.appearance.classifier);
                                           rebind(w.caf_classifier);
                                           break;
                                         case FusionScheme::appearance: rebind(w.appearance.classifier); break;
                                         default: rebind(w.layout.classifier); break;
                                       }
                                       (void)heads;
                                       w.appearance.conv_weight[2] = in[k];
                                       const FusionOutput out = fusion_forward(w, config, batch, {});
                                       if (scheme != FusionScheme::cacnf) return out.logits;
                                       const Tensor all[3] = {out.logits, out.layout_logits, out.appearance_logits};
                                       return concat_cols(all);
                                     }};
          }};
}

}  // namespace

std::vector<GradCheckCase> fusion_gradcheck_cases() {
  std::vector<GradCheckCase> out;
  for (auto s : {FusionScheme::appearance, FusionScheme::pff, FusionScheme::pbf, FusionScheme::ef, FusionScheme::vatf,
                 FusionScheme::lcf, FusionScheme::caf, FusionScheme::cacnf}) {
    out.push_back(fusion_case(s));
  }
  return out;
}

}  // namespace stlt
