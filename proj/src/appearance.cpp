#include "stlt/appearance.hpp"

#include <cmath>

#include "stlt/errors.hpp"
#include "stlt/ops.hpp"

namespace stlt {

namespace {

std::size_t halve(std::size_t n) { return (n + 1) / 2; }

std::size_t kernel_time(const AppearanceConfig& c) { return c.per_frame ? 1 : 3; }

}  // namespace

void AppearanceConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("appearance config: " + what);
  };
  need(resolution >= 8, "resolution must be at least 8");
  need(per_frame || frames >= 4, "clips need at least 4 frames");
  need(channels[0] > 0 && channels[1] > 0 && channels[2] > 0, "channel widths must be positive");
  need(width > 0 && heads > 0 && width % heads == 0, "width must be divisible by heads");
  need(token_grid[0] > 0 && token_grid[1] > 0 && token_grid[2] > 0, "token grid must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  need(num_classes > 0, "num_classes must be positive");
}

std::size_t AppearanceConfig::trunk_size() const { return halve(halve(halve(resolution))); }

Triple AppearanceConfig::pooled_grid(std::size_t clip_frames) const {
  const std::size_t s = trunk_size();
  return {std::min(token_grid[0], clip_frames), std::min(token_grid[1], s), std::min(token_grid[2], s)};
}

AppearanceWeights AppearanceWeights::init(const AppearanceConfig& config, Rng& rng) {
  config.validate();
  AppearanceWeights w;
  std::size_t in = 3;
  const std::size_t kt = kernel_time(config);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::size_t out = config.channels[s];
    const double fan_in = static_cast<double>(in * kt * 9);
    const double bound = std::sqrt(6.0 / fan_in);
    w.conv_weight[s] = uniform_tensor({out, in, kt, 3, 3}, -bound, bound, rng, true);
    w.conv_bias[s] = Tensor::zeros({out}, true);
    in = out;
  }
  const std::size_t c = config.trunk_channels();
  w.head = Linear::init(c, config.width, rng);
  w.token_proj = Linear::init(c, config.width, rng);
  w.token_position =
      Embedding::init(config.token_grid[0] * config.token_grid[1] * config.token_grid[2], config.width, rng);
  for (std::size_t i = 0; i < config.encoder_layers; ++i) {
    w.encoder.push_back(TransformerBlock::init(config.width, 2, rng));
  }
  w.classifier = Linear::init(config.width, config.num_classes, rng);
  return w;
}

void AppearanceWeights::collect(const std::string& prefix, NamedTensors& out, AppearanceParts parts) const {
  for (std::size_t s = 0; s < 3; ++s) {
    out.emplace_back(prefix + ".conv" + std::to_string(s) + ".weight", conv_weight[s]);
    out.emplace_back(prefix + ".conv" + std::to_string(s) + ".bias", conv_bias[s]);
  }
  if (parts.head) head.collect(prefix + ".head", out);
  if (parts.tokens) {
    token_proj.collect(prefix + ".token_proj", out);
    token_position.collect(prefix + ".token_position", out);
    for (std::size_t i = 0; i < encoder.size(); ++i) encoder[i].collect(prefix + ".encoder." + std::to_string(i), out);
  }
  if (parts.classifier) classifier.collect(prefix + ".classifier", out);
}

AppearanceOutput appearance_forward(const AppearanceWeights& w, const AppearanceConfig& config, const Tensor& frames,
                                    bool with_tokens, const ForwardContext& ctx) {
  if (frames.rank() != 5 || frames.dim(1) != 3 || frames.dim(3) != config.resolution ||
      frames.dim(4) != config.resolution) {
    throw ShapeError("appearance_forward: expected [B, 3, T, " + std::to_string(config.resolution) + ", " +
                     std::to_string(config.resolution) + "], got " + shape_string(frames.shape()));
  }
  if (!config.per_frame && frames.dim(2) < 4) throw ShapeError("appearance_forward: clips need at least 4 frames");
  Rng fallback(0);
  Rng* rng = ctx.rng ? ctx.rng : &fallback;
  if (ctx.training && !ctx.rng) throw ConfigError("training forward needs a random stream");

  const Triple stride{1, 2, 2};
  const Triple padding{config.per_frame ? 0u : 1u, 1, 1};
  Tensor x = frames;
  for (std::size_t s = 0; s < 3; ++s) x = relu(conv3d(x, w.conv_weight[s], w.conv_bias[s], stride, padding));

  AppearanceOutput out;
  out.trunk = x;
  const std::size_t batch = x.dim(0), channels = x.dim(1);
  out.video = w.head(reshape(adaptive_avg_pool3d(x, {1, 1, 1}), {batch, channels}));
  if (!with_tokens) return out;

  const Triple grid = config.pooled_grid(x.dim(2));
  const std::size_t patches = grid[0] * grid[1] * grid[2];
  out.patches = channels_to_tokens(adaptive_avg_pool3d(x, grid));
  std::vector<std::size_t> pos;
  pos.reserve(batch * patches);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t p = 0; p < patches; ++p) pos.push_back(p);
  }
  const Tensor tokens = add(w.token_proj(out.patches), w.token_position.lookup(pos));
  const std::size_t length = patches + 1;
  std::vector<std::size_t> rows;
  rows.reserve(batch * length);
  for (std::size_t b = 0; b < batch; ++b) {
    rows.push_back(b);
    for (std::size_t p = 0; p < patches; ++p) rows.push_back(batch + b * patches + p);
  }
  const Tensor pool[2] = {out.video, tokens};
  Tensor seq = gather_rows(concat_rows(pool), rows);
  const std::vector<std::size_t> lengths(batch, length);
  const auto segments = self_segments(lengths, AttentionMask::Kind::bidirectional);
  const TransformerSettings settings{config.heads, config.dropout, ctx.training};
  for (const auto& block : w.encoder) seq = block.forward(seq, segments, settings, *rng);
  out.tokens = seq;
  out.sequence = length;
  return out;
}

}  // namespace stlt
