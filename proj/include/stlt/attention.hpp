#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stlt/nn.hpp"
#include "stlt/rng.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

class AttentionMask {
 public:
  enum class Kind { bidirectional, causal, padding, combined };

  static AttentionMask bidirectional();
  // Target i may attend to sources j <= i.
  static AttentionMask causal();
  // Sources with key_valid[j] == false receive zero weight.
  static AttentionMask padding(std::vector<bool> key_valid);
  // Causal and padding together.
  static AttentionMask combined(std::vector<bool> key_valid);

  Kind kind() const { return kind_; }
  const std::vector<bool>& key_valid() const { return key_valid_; }
  bool allows(std::size_t target, std::size_t source) const;

 private:
  Kind kind_ = Kind::bidirectional;
  std::vector<bool> key_valid_;
};

// One independent attention problem inside a batched call: query rows
// [query_offset, query_offset + query_length) attend over key/value rows
// [key_offset, key_offset + key_length) under `mask` (indices local to the
// segment).
struct AttentionSegment {
  std::size_t query_offset = 0;
  std::size_t query_length = 0;
  std::size_t key_offset = 0;
  std::size_t key_length = 0;
  AttentionMask mask = AttentionMask::bidirectional();
};

// Segments for self-attention over consecutive sequences of the given
// lengths.
std::vector<AttentionSegment> self_segments(std::span<const std::size_t> lengths,
                                            AttentionMask::Kind kind);

// Batched multi-head scaled dot-product attention. q, k are [N x d_k*heads],
// v is [N_k x d_v*heads]; each head uses its own column block. Query rows not
// covered by a segment are zero. A query row with no admissible source throws
// NumericalError.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads);

// Softmax(Q K^T / sqrt(d_k)) V for a single sequence pair.
Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionMask& mask);

struct MultiHeadAttentionWeights {
  Linear query;
  Linear key;
  Linear value;
  Linear output;

  static MultiHeadAttentionWeights init(std::size_t width, Rng& rng);
  std::size_t width() const { return query.in_features(); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Self-attention when target and source are the same tensor, cross-attention
// otherwise. Width must be divisible by `heads`.
Tensor multi_head_attention(const Tensor& target, const Tensor& source,
                            const MultiHeadAttentionWeights& weights, const AttentionMask& mask,
                            std::size_t heads);
Tensor multi_head_attention(const Tensor& target, const Tensor& source,
                            const MultiHeadAttentionWeights& weights,
                            std::span<const AttentionSegment> segments, std::size_t heads);

struct TransformerSettings {
  std::size_t heads = 4;
  double dropout = 0.1;
  bool training = false;
};

// Pre-normalization block:
//   x = x + Dropout(MHA(LN1(x)))
//   x = x + Dropout(W2 GELU(W1 LN2(x)))
struct TransformerBlock {
  LayerNormParams attention_norm;
  MultiHeadAttentionWeights attention;
  LayerNormParams feed_forward_norm;
  Linear feed_forward_in;
  Linear feed_forward_out;

  static TransformerBlock init(std::size_t width, std::size_t ff_multiplier, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
  Tensor forward(const Tensor& x, std::span<const AttentionSegment> segments,
                 const TransformerSettings& settings, Rng& rng) const;
};

// Pre-normalization cross-attention block: targets attend over a separately
// normalized source, followed by the feed-forward sublayer.
struct CrossAttentionBlock {
  LayerNormParams target_norm;
  LayerNormParams source_norm;
  MultiHeadAttentionWeights attention;
  LayerNormParams feed_forward_norm;
  Linear feed_forward_in;
  Linear feed_forward_out;

  static CrossAttentionBlock init(std::size_t width, std::size_t ff_multiplier, Rng& rng);
  void collect(const std::string& prefix, NamedTensors& out) const;
  Tensor forward(const Tensor& target, const Tensor& source,
                 std::span<const AttentionSegment> segments, const TransformerSettings& settings,
                 Rng& rng) const;
};

}  // namespace stlt
