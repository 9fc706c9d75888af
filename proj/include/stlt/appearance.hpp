#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "stlt/attention.hpp"
#include "stlt/conv.hpp"
#include "stlt/nn.hpp"
#include "stlt/stlt_model.hpp"

namespace stlt {

struct AppearanceConfig {
  std::size_t resolution = 112;
  std::size_t frames = 32;  // T'
  std::array<std::size_t, 3> channels{16, 32, 64};
  std::size_t width = 128;  // d_a
  // Upper bound of the pooled token grid (time, height, width).
  Triple token_grid{4, 4, 4};
  std::size_t heads = 4;
  std::size_t encoder_layers = 1;
  double dropout = 0.1;
  std::size_t num_classes = 12;
  // Per-frame variant: 1x3x3 kernels so frames never mix.
  bool per_frame = false;

  void validate() const;
  // Spatial size of the last stage's feature map.
  std::size_t trunk_size() const;
  std::size_t trunk_channels() const { return channels[2]; }
  // Pooled grid actually used for a clip of `frames` frames.
  Triple pooled_grid(std::size_t frames) const;
};

// Parameter groups beyond the convolution stages, for collect().
struct AppearanceParts {
  bool head = true;
  bool tokens = true;
  bool classifier = true;
};

struct AppearanceWeights {
  std::array<Tensor, 3> conv_weight;
  std::array<Tensor, 3> conv_bias;
  Linear head;          // pooled trunk -> video vector
  Linear token_proj;    // trunk patch -> token
  Embedding token_position;
  std::vector<TransformerBlock> encoder;
  Linear classifier;    // appearance-only logits

  static AppearanceWeights init(const AppearanceConfig& config, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out, AppearanceParts parts = {}) const;
};

struct AppearanceOutput {
  Tensor trunk;       // [B, C, T, h, w]
  Tensor video;       // [B, d_a]
  Tensor patches;     // [B * S, C] pooled trunk patches, before projection
  Tensor tokens;      // [B * (S + 1), d_a], encoded; class position first
  std::size_t sequence = 0;  // S + 1, when tokens were requested
};

// frames: [B, 3, T', res, res] with values in [0, 1]. Throws ShapeError on a
// shape that disagrees with the config or T' < 4 (per-frame clips may hold
// any number of frames).
AppearanceOutput appearance_forward(const AppearanceWeights& w, const AppearanceConfig& config, const Tensor& frames,
                                    bool with_tokens, const ForwardContext& ctx);

}  // namespace stlt
