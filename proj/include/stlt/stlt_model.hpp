#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stlt/attention.hpp"
#include "stlt/checkpoint.hpp"
#include "stlt/gradcheck.hpp"
#include "stlt/layout.hpp"
#include "stlt/nn.hpp"
#include "stlt/rng.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

enum class StltVariant { stlt, joint };

struct StltConfig {
  StltVariant variant = StltVariant::stlt;
  std::size_t width = 128;
  std::size_t spatial_layers = 2;
  std::size_t spatial_heads = 4;
  std::size_t temporal_layers = 2;
  std::size_t temporal_heads = 4;
  double dropout = 0.1;
  // Scene objects per frame; the spatial sequence adds the class token.
  std::size_t max_objects = 6;
  std::size_t frames = 16;
  std::size_t vocabulary_size = 3;
  std::size_t num_classes = 12;
  std::size_t ff_multiplier = 4;

  // Throws ConfigError on any violated invariant.
  void validate() const;
  std::string to_json() const;
  static StltConfig from_json(const std::string& text);
};

std::string variant_name(StltVariant v);
StltVariant parse_variant(const std::string& name);

struct StltWeights {
  StltVariant variant = StltVariant::stlt;
  Embedding category;       // category embedding
  Linear box;               // box coordinates -> width
  LayerNormParams object_norm;
  std::vector<TransformerBlock> spatial;
  Embedding position;       // frames + 2 rows: one extra for a prefix token
  LayerNormParams temporal_norm;
  std::vector<TransformerBlock> temporal;
  Tensor temporal_class;    // [1, width]
  Linear classifier;
  std::vector<TransformerBlock> joint;  // joint variant only

  static StltWeights init(const StltConfig& config, Rng& rng);
  // Classifier parameters are named "classifier.*".
  void collect(NamedTensors& out) const;
  NamedTensors parameters() const;
};

// One video ready for the model: exactly the sampled frames, each padded to
// max_objects slots.
struct LayoutInput {
  std::vector<PaddedFrame> frames;
};

LayoutInput prepare_layout(const VideoLayout& video, std::size_t frames, std::size_t max_objects, SamplingMode mode,
                           Rng& rng);

// Spatial tokens of a batch, one row per class token or real object. Padded
// slots are left out, which is what masking them would achieve.
struct PackedLayout {
  std::size_t videos = 0;
  std::size_t frames = 0;                 // per video
  std::vector<std::size_t> categories;    // per token
  std::vector<double> boxes;              // per token, x1 y1 x2 y2
  std::vector<std::size_t> lengths;       // tokens per frame, class token first
  std::vector<std::size_t> class_rows;    // row of each frame's class token
  // Slot index within the padded frame; kClassSlot for class tokens.
  std::vector<std::size_t> slots;
  static constexpr std::size_t kClassSlot = static_cast<std::size_t>(-1);
};

// Throws ConfigError if the videos disagree on frame count or exceed the
// configured frames/objects.
PackedLayout pack_layouts(std::span<const LayoutInput> inputs, const StltConfig& config);

struct ForwardContext {
  bool training = false;
  Rng* rng = nullptr;  // required when training
};

// Dropout(LayerNorm(c + l [+ addend])) for each row. `addend` may be undefined.
Tensor embed_objects(const StltWeights& w, const StltConfig& config, std::span<const std::size_t> categories,
                     const Tensor& boxes, const Tensor& addend, const ForwardContext& ctx);
// Single-object convenience form, returns [width].
Tensor embed_object(const StltWeights& w, const StltConfig& config, std::size_t category, const BoundingBox& box,
                    const ForwardContext& ctx);

// Frame embeddings [videos * frames, width] from the class positions. The
// optional `addend` has one row per packed token.
Tensor spatial_forward(const StltWeights& w, const StltConfig& config, const PackedLayout& packed,
                       const Tensor& addend, const ForwardContext& ctx);

struct TemporalOutput {
  Tensor hidden;                       // [videos * sequence, width]
  std::size_t sequence = 0;            // per video
  std::vector<std::size_t> class_rows; // per video
  Tensor class_hidden;                 // [videos, width]
};

// Causal temporal transformer. Each video's sequence is
// [prefix?] frame_0 .. frame_{n-1} class, with position indices 0.. in order.
// `frames` is [videos * n, width]; `prefix`, when defined, is [videos, width].
TemporalOutput temporal_forward(const StltWeights& w, const StltConfig& config, const Tensor& frames,
                                std::size_t videos, const Tensor& prefix, const ForwardContext& ctx);

// Class hidden state of the configured variant, [videos, width].
Tensor stlt_features(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                     const ForwardContext& ctx);
// Logits [videos, num_classes].
Tensor stlt_forward(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                    const ForwardContext& ctx);

// Joint variant: one bidirectional transformer over every padded slot of every
// frame plus a class token; padded slots are masked as keys. Returns hidden
// states [videos * (frames * max_objects + 1), width], class token last.
Tensor joint_encode(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                    const ForwardContext& ctx);
Tensor stlt_joint_forward(const StltWeights& w, const StltConfig& config, std::span<const LayoutInput> inputs,
                          const ForwardContext& ctx);

// Checkpoint with the config as JSON in the "__meta__" text entry.
Container to_container(const StltConfig& config, const StltWeights& w);
void save_stlt(const std::filesystem::path& path, const StltConfig& config, const StltWeights& w);
struct LoadedStlt {
  StltConfig config;
  StltWeights weights;
};
LoadedStlt load_stlt(const std::filesystem::path& path);
LoadedStlt from_container(const Container& c);

std::vector<GradCheckCase> model_gradcheck_cases();

}  // namespace stlt
