#include "stlt/attention.hpp"

#include <cmath>
#include <limits>

#include "stlt/errors.hpp"
#include "stlt/ops.hpp"

namespace stlt {

AttentionMask AttentionMask::bidirectional() { return {}; }

AttentionMask AttentionMask::causal() {
  AttentionMask m;
  m.kind_ = Kind::causal;
  return m;
}

AttentionMask AttentionMask::padding(std::vector<bool> key_valid) {
  AttentionMask m;
  m.kind_ = Kind::padding;
  m.key_valid_ = std::move(key_valid);
  return m;
}

AttentionMask AttentionMask::combined(std::vector<bool> key_valid) {
  AttentionMask m;
  m.kind_ = Kind::combined;
  m.key_valid_ = std::move(key_valid);
  return m;
}

bool AttentionMask::allows(std::size_t target, std::size_t source) const {
  switch (kind_) {
    case Kind::bidirectional:
      return true;
    case Kind::causal:
      return source <= target;
    case Kind::padding:
      return source < key_valid_.size() && key_valid_[source];
    case Kind::combined:
      return source <= target && source < key_valid_.size() && key_valid_[source];
  }
  return false;
}

std::vector<AttentionSegment> self_segments(std::span<const std::size_t> lengths,
                                            AttentionMask::Kind kind) {
  std::vector<AttentionSegment> out;
  out.reserve(lengths.size());
  std::size_t offset = 0;
  const AttentionMask mask =
      kind == AttentionMask::Kind::causal ? AttentionMask::causal() : AttentionMask::bidirectional();
  for (std::size_t len : lengths) {
    out.push_back({offset, len, offset, len, mask});
    offset += len;
  }
  return out;
}

namespace {

struct SegmentProbs {
  // probs[h][i * key_length + j]
  std::vector<std::vector<double>> probs;
};

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 std::span<const AttentionSegment> segments, std::size_t heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("attention: matrices expected");
  const std::size_t nq = q.dim(0), nk = k.dim(0), dqk = q.dim(1), dv = v.dim(1);
  if (k.dim(1) != dqk) throw ShapeError("attention: query and key widths differ");
  if (v.dim(0) != nk) throw ShapeError("attention: key and value row counts differ");
  if (heads == 0 || dqk % heads != 0 || dv % heads != 0) {
    throw ConfigError("attention: width not divisible by head count");
  }
  const std::size_t hk = dqk / heads, hv = dv / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hk));

  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();
  std::vector<double> out(nq * dv, 0.0);
  std::vector<SegmentProbs> saved(segments.size());
  std::vector<double> scores;

  for (std::size_t s = 0; s < segments.size(); ++s) {
    const AttentionSegment& seg = segments[s];
    if (seg.query_offset + seg.query_length > nq || seg.key_offset + seg.key_length > nk) {
      throw ShapeError("attention: segment exceeds tensor extents");
    }
    const std::size_t t = seg.query_length, len = seg.key_length;
    saved[s].probs.assign(heads, std::vector<double>(t * len, 0.0));
    scores.resize(len);
    for (std::size_t h = 0; h < heads; ++h) {
      std::vector<double>& p = saved[s].probs[h];
      for (std::size_t i = 0; i < t; ++i) {
        const double* qi = qv.data() + (seg.query_offset + i) * dqk + h * hk;
        double mx = -std::numeric_limits<double>::infinity();
        bool any = false;
        for (std::size_t j = 0; j < len; ++j) {
          if (!seg.mask.allows(i, j)) continue;
          const double* kj = kv.data() + (seg.key_offset + j) * dqk + h * hk;
          double dot = 0.0;
          for (std::size_t c = 0; c < hk; ++c) dot += qi[c] * kj[c];
          scores[j] = dot * inv_scale;
          if (!std::isfinite(scores[j])) throw NumericalError("attention: non-finite score");
          if (scores[j] > mx) mx = scores[j];
          any = true;
        }
        if (!any) throw NumericalError("attention: fully masked query row");
        double total = 0.0;
        for (std::size_t j = 0; j < len; ++j) {
          if (!seg.mask.allows(i, j)) continue;
          total += (p[i * len + j] = std::exp(scores[j] - mx));
        }
        double* oi = out.data() + (seg.query_offset + i) * dv + h * hv;
        for (std::size_t j = 0; j < len; ++j) {
          if (!seg.mask.allows(i, j)) continue;
          const double w = (p[i * len + j] /= total);
          const double* vj = vv.data() + (seg.key_offset + j) * dv + h * hv;
          for (std::size_t c = 0; c < hv; ++c) oi[c] += w * vj[c];
        }
      }
    }
  }

  std::vector<AttentionSegment> segs(segments.begin(), segments.end());
  return Tensor::make_result(
      {nq, dv}, std::move(out), {q, k, v},
      [segs = std::move(segs), saved = std::move(saved), heads, dqk, dv, hk, hv,
       inv_scale](detail::Node& self) {
        auto grad_of = [&](std::size_t i) -> double* {
          auto& p = *self.parents[i];
          return p.requires_grad ? p.grad_buffer().data() : nullptr;
        };
        double* gq = grad_of(0);
        double* gk = grad_of(1);
        double* gv = grad_of(2);
        const double* qv = self.parents[0]->value.data();
        const double* kv = self.parents[1]->value.data();
        const double* vv = self.parents[2]->value.data();
        const double* go = self.grad.data();
        std::vector<double> dp;
        for (std::size_t s = 0; s < segs.size(); ++s) {
          const AttentionSegment& seg = segs[s];
          const std::size_t t = seg.query_length, len = seg.key_length;
          dp.resize(len);
          for (std::size_t h = 0; h < heads; ++h) {
            const std::vector<double>& p = saved[s].probs[h];
            for (std::size_t i = 0; i < t; ++i) {
              const double* goi = go + (seg.query_offset + i) * dv + h * hv;
              double weighted = 0.0;
              for (std::size_t j = 0; j < len; ++j) {
                const double pij = p[i * len + j];
                if (pij == 0.0) {
                  dp[j] = 0.0;
                  continue;
                }
                const double* vj = vv + (seg.key_offset + j) * dv + h * hv;
                double d = 0.0;
                for (std::size_t c = 0; c < hv; ++c) d += goi[c] * vj[c];
                dp[j] = d;
                weighted += pij * d;
                if (gv) {
                  double* gvj = gv + (seg.key_offset + j) * dv + h * hv;
                  for (std::size_t c = 0; c < hv; ++c) gvj[c] += pij * goi[c];
                }
              }
              const double* qi = qv + (seg.query_offset + i) * dqk + h * hk;
              double* gqi = gq ? gq + (seg.query_offset + i) * dqk + h * hk : nullptr;
              for (std::size_t j = 0; j < len; ++j) {
                const double pij = p[i * len + j];
                if (pij == 0.0) continue;
                const double ds = pij * (dp[j] - weighted) * inv_scale;
                const double* kj = kv + (seg.key_offset + j) * dqk + h * hk;
                if (gqi) {
                  for (std::size_t c = 0; c < hk; ++c) gqi[c] += ds * kj[c];
                }
                if (gk) {
                  double* gkj = gk + (seg.key_offset + j) * dqk + h * hk;
                  for (std::size_t c = 0; c < hk; ++c) gkj[c] += ds * qi[c];
                }
              }
            }
          }
        }
      });
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const AttentionMask& mask) {
  if (q.rank() != 2 || k.rank() != 2) throw ShapeError("scaled_dot_product_attention: matrices expected");
  const AttentionSegment seg{0, q.dim(0), 0, k.dim(0), mask};
  return attention(q, k, v, std::span<const AttentionSegment>(&seg, 1), 1);
}

MultiHeadAttentionWeights MultiHeadAttentionWeights::init(std::size_t width, Rng& rng) {
  return {Linear::init(width, width, rng), Linear::init(width, width, rng),
          Linear::init(width, width, rng), Linear::init(width, width, rng)};
}

void MultiHeadAttentionWeights::collect(const std::string& prefix, NamedTensors& out) const {
  query.collect(prefix + ".query", out);
  key.collect(prefix + ".key", out);
  value.collect(prefix + ".value", out);
  output.collect(prefix + ".output", out);
}

Tensor multi_head_attention(const Tensor& target, const Tensor& source,
                            const MultiHeadAttentionWeights& weights,
                            std::span<const AttentionSegment> segments, std::size_t heads) {
  const std::size_t width = weights.width();
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("multi_head_attention: width " + std::to_string(width) +
                      " not divisible by " + std::to_string(heads) + " heads");
  }
  const Tensor q = weights.query(target);
  const Tensor k = weights.key(source);
  const Tensor v = weights.value(source);
  return weights.output(attention(q, k, v, segments, heads));
}

Tensor multi_head_attention(const Tensor& target, const Tensor& source,
                            const MultiHeadAttentionWeights& weights, const AttentionMask& mask,
                            std::size_t heads) {
  const AttentionSegment seg{0, target.rows(), 0, source.rows(), mask};
  return multi_head_attention(target, source, weights, std::span<const AttentionSegment>(&seg, 1),
                              heads);
}

TransformerBlock TransformerBlock::init(std::size_t width, std::size_t ff_multiplier, Rng& rng) {
  TransformerBlock b;
  b.attention_norm = LayerNormParams::init(width);
  b.attention = MultiHeadAttentionWeights::init(width, rng);
  b.feed_forward_norm = LayerNormParams::init(width);
  b.feed_forward_in = Linear::init(width, width * ff_multiplier, rng);
  b.feed_forward_out = Linear::init(width * ff_multiplier, width, rng);
  return b;
}

void TransformerBlock::collect(const std::string& prefix, NamedTensors& out) const {
  attention_norm.collect(prefix + ".attention_norm", out);
  attention.collect(prefix + ".attention", out);
  feed_forward_norm.collect(prefix + ".feed_forward_norm", out);
  feed_forward_in.collect(prefix + ".feed_forward_in", out);
  feed_forward_out.collect(prefix + ".feed_forward_out", out);
}

Tensor TransformerBlock::forward(const Tensor& x, std::span<const AttentionSegment> segments,
                                 const TransformerSettings& settings, Rng& rng) const {
  const Tensor normed = attention_norm(x);
  Tensor h = multi_head_attention(normed, normed, attention, segments, settings.heads);
  Tensor y = add(x, dropout(h, settings.dropout, settings.training, rng));
  Tensor f = feed_forward_out(gelu(feed_forward_in(feed_forward_norm(y))));
  return add(y, dropout(f, settings.dropout, settings.training, rng));
}

CrossAttentionBlock CrossAttentionBlock::init(std::size_t width, std::size_t ff_multiplier,
                                              Rng& rng) {
  CrossAttentionBlock b;
  b.target_norm = LayerNormParams::init(width);
  b.source_norm = LayerNormParams::init(width);
  b.attention = MultiHeadAttentionWeights::init(width, rng);
  b.feed_forward_norm = LayerNormParams::init(width);
  b.feed_forward_in = Linear::init(width, width * ff_multiplier, rng);
  b.feed_forward_out = Linear::init(width * ff_multiplier, width, rng);
  return b;
}

void CrossAttentionBlock::collect(const std::string& prefix, NamedTensors& out) const {
  target_norm.collect(prefix + ".target_norm", out);
  source_norm.collect(prefix + ".source_norm", out);
  attention.collect(prefix + ".attention", out);
  feed_forward_norm.collect(prefix + ".feed_forward_norm", out);
  feed_forward_in.collect(prefix + ".feed_forward_in", out);
  feed_forward_out.collect(prefix + ".feed_forward_out", out);
}

Tensor CrossAttentionBlock::forward(const Tensor& target, const Tensor& source,
                                    std::span<const AttentionSegment> segments,
                                    const TransformerSettings& settings, Rng& rng) const {
  Tensor h = multi_head_attention(target_norm(target), source_norm(source), attention, segments,
                                  settings.heads);
  Tensor y = add(target, dropout(h, settings.dropout, settings.training, rng));
  Tensor f = feed_forward_out(gelu(feed_forward_in(feed_forward_norm(y))));
  return add(y, dropout(f, settings.dropout, settings.training, rng));
}

}  // namespace stlt
