#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stlt/appearance.hpp"
#include "stlt/attention.hpp"
#include "stlt/layout.hpp"
#include "stlt/stlt_model.hpp"

namespace stlt {

// `none` is the layout branch alone and `appearance` the appearance branch
// alone; the rest combine both.
enum class FusionScheme { none, appearance, pff, pbf, ef, vatf, lcf, caf, cacnf };

std::string scheme_name(FusionScheme s);
FusionScheme parse_scheme(const std::string& name);
// PFF and PBF consume one image per sampled layout frame; the others a clip.
bool uses_frame_images(FusionScheme s);
bool uses_layout(FusionScheme s);
bool uses_appearance(FusionScheme s);

struct FusionConfig {
  FusionScheme scheme = FusionScheme::none;
  std::size_t caf_layers = 2;
  std::size_t caf_heads = 4;
  std::size_t vatf_heads = 4;
  double lambda_layout = 0.5;
  double lambda_appearance = 0.5;

  void validate() const;
};

struct FusionModelConfig {
  StltConfig layout;
  AppearanceConfig appearance;
  FusionConfig fusion;

  // Also checks that the branches agree on the class count.
  void validate() const;
  std::string to_json() const;
  static FusionModelConfig from_json(const std::string& text);
};

struct FusionWeights {
  FusionScheme scheme = FusionScheme::none;
  StltWeights layout;
  AppearanceWeights appearance;
  Linear pff_proj;  // bias-free: zero appearance leaves the layout path exact
  Linear pbf_proj;  // bias-free, RoI feature -> object embedding
  Linear ef_proj;
  Linear vatf_query, vatf_memory;
  MultiHeadAttentionWeights vatf_attention;
  Linear vatf_classifier;
  Linear lcf_classifier;
  Linear caf_appearance_proj;
  std::vector<CrossAttentionBlock> caf_layout_blocks, caf_appearance_blocks;
  Linear caf_classifier;

  static FusionWeights init(const FusionModelConfig& config, Rng& rng);
  // Only the parameters the scheme's forward pass touches.
  NamedTensors parameters() const;
  // Every parameter of the scheme except its output classifiers.
  NamedTensors backbone_parameters() const;
  // The classifier(s) that produce the scheme's fused logits.
  NamedTensors classifier_parameters() const;
  // Replaces the fused-logit classifier with a fresh one for `classes`.
  void reset_classifier(const FusionModelConfig& config, std::size_t classes, Rng& rng);
};

struct FusionBatch {
  std::vector<LayoutInput> layouts;
  Tensor clip;          // [B, 3, T', res, res]
  Tensor frame_images;  // [B * n, 3, 1, res, res]
  // Boxes of the clip's central frame floor(T'/2), per video.
  std::vector<std::vector<BoundingBox>> central_boxes;
  // Optional [B, d_a] video vectors that replace the encoder's.
  Tensor precomputed_video;
};

struct FusionOutput {
  Tensor logits;
  Tensor layout_logits;      // CACNF branch heads
  Tensor appearance_logits;
};

FusionOutput fusion_forward(const FusionWeights& w, const FusionModelConfig& config, const FusionBatch& batch,
                            const ForwardContext& ctx);

// ---- the individual fusion operations ----

// Temporal-transformer input: frame embeddings plus projected appearance.
Tensor fuse_pff(const Linear& projection, const Tensor& frame_appearance, const Tensor& frame_embeddings);

// Addend for the object embeddings: projected RoI features, one row per
// packed token (class tokens carry full-frame RoIs).
Tensor fuse_pbf(const Linear& projection, const Tensor& roi_features);

// RoI features for every packed token from per-frame feature maps
// [frames, C, h, w], one map per packed frame.
Tensor packed_roi_features(const Tensor& frame_maps, const PackedLayout& packed);

// Video token prepended to the temporal sequence; returns the layout logits.
Tensor fuse_ef(const FusionWeights& w, const FusionModelConfig& config, const Tensor& video, const Tensor& frames,
               std::size_t videos, const ForwardContext& ctx);

// Box queries attend over memory tokens; per-query logits are averaged per
// video. queries [Q, C] split by query_counts, memory [B * S, C].
Tensor fuse_vatf(const FusionWeights& w, const FusionModelConfig& config, const Tensor& queries,
                 std::span<const std::size_t> query_counts, const Tensor& memory, std::size_t memory_per_video);

// Classifier over [layout | appearance].
Tensor fuse_lcf(const Linear& classifier, const Tensor& layout, const Tensor& appearance);

struct CafResult {
  Tensor logits;
  Tensor layout_sequence;      // after the cross-attention stack
  Tensor appearance_sequence;
};

// Bidirectional cross-attention stack. Layout sequences (class position last)
// and appearance sequences (class position first) have fixed lengths per
// video. `appearance_valid`, when non-empty, masks appearance tokens per
// video (B * La flags); a layout query with nothing to attend to raises
// NumericalError.
CafResult fuse_caf(const FusionWeights& w, const FusionModelConfig& config, const Tensor& layout_sequence,
                   std::size_t layout_length, const Tensor& appearance_sequence, std::size_t appearance_length,
                   const std::vector<bool>& appearance_valid, const ForwardContext& ctx);

// Targets of one batch: class indices or a row-major multi-hot matrix.
struct Targets {
  bool multi_label = false;
  std::vector<std::size_t> classes;
  std::vector<double> multi_hot;
};

Tensor task_loss(const Tensor& logits, const Targets& targets);

// L(fused) + lambda_layout L(layout) + lambda_appearance L(appearance).
// Negative weights raise ConfigError.
Tensor cacnf_loss(const Tensor& fused, const Tensor& layout, const Tensor& appearance, const Targets& targets,
                  double lambda_layout, double lambda_appearance);

// Training loss of any scheme (CACNF adds its branch terms).
Tensor fusion_loss(const FusionOutput& out, const FusionConfig& config, const Targets& targets);

// Precomputed appearance vectors from a tensor container, one rank-1 entry
// per video id.
std::unordered_map<std::string, std::vector<double>> load_appearance_features(const std::filesystem::path& path);
Tensor gather_appearance_features(const std::unordered_map<std::string, std::vector<double>>& store,
                                  std::span<const std::string> ids, std::size_t width);

std::vector<GradCheckCase> fusion_gradcheck_cases();

}  // namespace stlt
