#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "stlt/checkpoint.hpp"
#include "stlt/errors.hpp"
#include "stlt/fusion.hpp"
#include "stlt/ops.hpp"

using namespace stlt;

namespace {

using Rows = std::vector<std::vector<double>>;

FusionModelConfig small_config(FusionScheme scheme) {
  FusionModelConfig c;
  c.layout.width = 8;
  c.layout.spatial_layers = 1;
  c.layout.temporal_layers = 1;
  c.layout.spatial_heads = 2;
  c.layout.temporal_heads = 2;
  c.layout.max_objects = 3;
  c.layout.frames = 4;
  c.layout.vocabulary_size = 4;
  c.layout.num_classes = 5;
  c.layout.ff_multiplier = 2;
  c.appearance.resolution = 16;
  c.appearance.frames = 4;
  c.appearance.channels = {3, 4, 6};
  c.appearance.width = 8;
  c.appearance.token_grid = {2, 2, 2};
  c.appearance.heads = 2;
  c.appearance.num_classes = 5;
  c.fusion.scheme = scheme;
  c.fusion.caf_layers = 1;
  c.fusion.caf_heads = 2;
  c.fusion.vatf_heads = 2;
  return c;
}

FrameLayout random_frame(const FusionModelConfig& c, Rng& rng, std::size_t count) {
  FrameLayout f;
  for (std::size_t j = 0; j < count; ++j) {
    const double x1 = rng.uniform(0.0, 0.6), y1 = rng.uniform(0.0, 0.6);
    f.objects.push_back({2 + rng.below(c.layout.vocabulary_size - 2),
                         {x1, y1, x1 + rng.uniform(0.1, 0.4), y1 + rng.uniform(0.1, 0.4)},
                         std::nullopt});
  }
  return f;
}

FusionBatch random_batch(const FusionModelConfig& c, Rng& rng, std::size_t videos) {
  FusionBatch b;
  const std::size_t n = c.layout.frames, r = c.appearance.resolution;
  for (std::size_t v = 0; v < videos; ++v) {
    LayoutInput in;
    for (std::size_t i = 0; i < n; ++i) {
      in.frames.push_back(pad_objects(random_frame(c, rng, 1 + rng.below(c.layout.max_objects)), c.layout.max_objects));
    }
    std::vector<BoundingBox> central;
    const auto& mid = in.frames[n / 2];
    for (std::size_t k = 0; k < mid.boxes.size(); ++k) {
      if (mid.valid[k]) central.push_back(mid.boxes[k]);
    }
    b.layouts.push_back(in);
    b.central_boxes.push_back(central);
  }
  b.clip = uniform_tensor({videos, 3, c.appearance.frames, r, r}, 0.0, 1.0, rng);
  b.frame_images = uniform_tensor({videos * n, 3, 1, r, r}, 0.0, 1.0, rng);
  return b;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.size() == b.size() && std::memcmp(a.values().data(), b.values().data(), a.size() * sizeof(double)) == 0;
}

Rows to_rows(const Tensor& t) {
  Rows out(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) out[i][j] = t.at(i * t.cols() + j);
  }
  return out;
}

Tensor from_rows(const Rows& r) {
  std::vector<double> v;
  for (const auto& row : r) v.insert(v.end(), row.begin(), row.end());
  return Tensor({r.size(), r.empty() ? 0 : r[0].size()}, v);
}

// Plain loops over the stored [in x out] weight.
Rows apply_linear(const Rows& x, const Linear& l) {
  const std::size_t in = l.in_features(), out = l.out_features();
  Rows y(x.size(), std::vector<double>(out, 0.0));
  for (std::size_t i = 0; i < x.size(); ++i) {
    for (std::size_t o = 0; o < out; ++o) {
      double s = l.bias.defined() ? l.bias.at(o) : 0.0;
      for (std::size_t k = 0; k < in; ++k) s += x[i][k] * l.weight.at(k * out + o);
      y[i][o] = s;
    }
  }
  return y;
}

Rows attention_oracle(const Rows& target, const Rows& source, const MultiHeadAttentionWeights& w, std::size_t heads,
                      const std::vector<bool>& valid = {}) {
  const Rows q = apply_linear(target, w.query), k = apply_linear(source, w.key), v = apply_linear(source, w.value);
  const std::size_t width = q[0].size(), dh = width / heads;
  Rows mixed(target.size(), std::vector<double>(width, 0.0));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      std::vector<double> score(source.size(), -INFINITY);
      double top = -INFINITY;
      for (std::size_t j = 0; j < source.size(); ++j) {
        if (!valid.empty() && !valid[j]) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += q[i][h * dh + c] * k[j][h * dh + c];
        score[j] = s / std::sqrt(static_cast<double>(dh));
        top = std::max(top, score[j]);
      }
      double z = 0.0;
      for (auto& s : score) z += (s = std::exp(s - top));
      for (std::size_t j = 0; j < source.size(); ++j) {
        for (std::size_t c = 0; c < dh; ++c) mixed[i][h * dh + c] += score[j] / z * v[j][h * dh + c];
      }
    }
  }
  return apply_linear(mixed, w.output);
}

// Cross-attention block with the attention computed by attention_oracle.
Rows block_oracle(const CrossAttentionBlock& b, const Rows& target, const Rows& source, std::size_t heads,
                  const std::vector<bool>& valid = {}) {
  const Rows attended = attention_oracle(to_rows(b.target_norm(from_rows(target))),
                                         to_rows(b.source_norm(from_rows(source))), b.attention, heads, valid);
  Rows y = target;
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t c = 0; c < y[i].size(); ++c) y[i][c] += attended[i][c];
  }
  const Rows f = to_rows(b.feed_forward_out(gelu(b.feed_forward_in(b.feed_forward_norm(from_rows(y))))));
  for (std::size_t i = 0; i < y.size(); ++i) {
    for (std::size_t c = 0; c < y[i].size(); ++c) y[i][c] += f[i][c];
  }
  return y;
}

Rows slice(const Rows& r, std::size_t from, std::size_t count) {
  return Rows(r.begin() + static_cast<std::ptrdiff_t>(from), r.begin() + static_cast<std::ptrdiff_t>(from + count));
}

const FusionScheme kAllSchemes[] = {FusionScheme::none, FusionScheme::appearance, FusionScheme::pff,
                                    FusionScheme::pbf,  FusionScheme::ef,         FusionScheme::vatf,
                                    FusionScheme::lcf,  FusionScheme::caf,        FusionScheme::cacnf};

}  // namespace

TEST_CASE("scheme names and model config") {
  for (auto s : kAllSchemes) CHECK(parse_scheme(scheme_name(s)) == s);
  CHECK_THROWS_AS(parse_scheme("late"), ConfigError);
  CHECK(uses_frame_images(FusionScheme::pbf));
  CHECK_FALSE(uses_frame_images(FusionScheme::caf));
  CHECK_FALSE(uses_layout(FusionScheme::appearance));
  CHECK_FALSE(uses_appearance(FusionScheme::none));

  auto c = small_config(FusionScheme::cacnf);
  c.fusion.lambda_layout = 0.25;
  const auto back = FusionModelConfig::from_json(c.to_json());
  CHECK(back.fusion.scheme == FusionScheme::cacnf);
  CHECK(back.fusion.lambda_layout == 0.25);
  CHECK(back.appearance.channels == c.appearance.channels);
  CHECK(back.layout.width == c.layout.width);
  CHECK_THROWS_AS(FusionModelConfig::from_json("{\"layout\": 1}"), DataError);

  auto bad = c;
  bad.appearance.num_classes = 4;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.fusion.lambda_appearance = -0.1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.fusion.caf_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("appearance branch") {
  const auto c = small_config(FusionScheme::appearance);
  Rng rng(3);
  const auto w = AppearanceWeights::init(c.appearance, rng);
  const auto batch = random_batch(c, rng, 3);

  SUBCASE("output shapes") {
    const auto out = appearance_forward(w, c.appearance, batch.clip, true, {});
    CHECK(out.video.shape() == Shape{3, c.appearance.width});
    CHECK(out.trunk.shape() == Shape{3, 6, 4, 2, 2});
    CHECK(out.sequence == 2 * 2 * 2 + 1);
    CHECK(out.tokens.shape() == Shape{3 * out.sequence, c.appearance.width});
  }
  SUBCASE("zero clip depends only on the biases") {
    // Zero conv biases and ReLU keep the trunk at zero.
    const auto zero = Tensor::zeros({2, 3, 4, 16, 16});
    const auto out = appearance_forward(w, c.appearance, zero, false, {});
    for (std::size_t b = 0; b < 2; ++b) {
      for (std::size_t j = 0; j < c.appearance.width; ++j) CHECK(out.video.at(b * c.appearance.width + j) == w.head.bias.at(j));
    }
  }
  SUBCASE("batch matches single clips") {
    const auto all = appearance_forward(w, c.appearance, batch.clip, true, {});
    const std::size_t per = batch.clip.size() / 3;
    for (std::size_t b = 0; b < 3; ++b) {
      std::vector<double> v(batch.clip.values().begin() + b * per, batch.clip.values().begin() + (b + 1) * per);
      const auto one = appearance_forward(w, c.appearance, Tensor({1, 3, 4, 16, 16}, v), true, {});
      for (std::size_t j = 0; j < c.appearance.width; ++j) {
        CHECK(std::abs(one.video.at(j) - all.video.at(b * c.appearance.width + j)) <= 1e-10);
      }
      const std::size_t span = all.sequence * c.appearance.width;
      for (std::size_t j = 0; j < span; ++j) CHECK(std::abs(one.tokens.at(j) - all.tokens.at(b * span + j)) <= 1e-10);
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(appearance_forward(w, c.appearance, Tensor::zeros({1, 3, 4, 8, 8}), false, {}), ShapeError);
    CHECK_THROWS_AS(appearance_forward(w, c.appearance, Tensor::zeros({1, 3, 2, 16, 16}), false, {}), ShapeError);
  }
}

TEST_CASE("PFF with zero appearance reproduces the layout model") {
  const auto c = small_config(FusionScheme::pff);
  Rng rng(5);
  const auto w = FusionWeights::init(c, rng);
  const auto batch = random_batch(c, rng, 2);
  const PackedLayout packed = pack_layouts(batch.layouts, c.layout);
  const Tensor frames = spatial_forward(w.layout, c.layout, packed, Tensor(), {});
  const Tensor fused = fuse_pff(w.pff_proj, Tensor::zeros({frames.rows(), c.appearance.width}), frames);
  const Tensor via_fusion = w.layout.classifier(temporal_forward(w.layout, c.layout, fused, 2, Tensor(), {}).class_hidden);
  CHECK(max_abs_diff(via_fusion, stlt_forward(w.layout, c.layout, batch.layouts, {})) <= 1e-10);

  FusionWeights zeroed = w;
  zeroed.pff_proj.weight = Tensor::zeros(w.pff_proj.weight.shape());
  CHECK(max_abs_diff(fusion_forward(zeroed, c, batch, {}).logits, stlt_forward(w.layout, c.layout, batch.layouts, {})) <=
        1e-10);
  // Non-zero appearance does reach the logits.
  CHECK(max_abs_diff(fusion_forward(w, c, batch, {}).logits, stlt_forward(w.layout, c.layout, batch.layouts, {})) > 1e-6);
  CHECK_THROWS_AS(fuse_pff(w.pff_proj, Tensor::zeros({3, c.appearance.width}), frames), ShapeError);
}

TEST_CASE("PBF") {
  const auto c = small_config(FusionScheme::pbf);
  Rng rng(7);
  const auto w = FusionWeights::init(c, rng);
  const auto batch = random_batch(c, rng, 2);

  SUBCASE("zero projection reproduces the layout model") {
    FusionWeights zeroed = w;
    zeroed.pbf_proj.weight = Tensor::zeros(w.pbf_proj.weight.shape());
    CHECK(max_abs_diff(fusion_forward(zeroed, c, batch, {}).logits,
                       stlt_forward(w.layout, c.layout, batch.layouts, {})) <= 1e-10);
  }
  SUBCASE("one RoI row per packed token") {
    const PackedLayout packed = pack_layouts(batch.layouts, c.layout);
    const Tensor maps = uniform_tensor({packed.lengths.size(), 6, 2, 2}, -1.0, 1.0, rng);
    CHECK(packed_roi_features(maps, packed).shape() == Shape{packed.categories.size(), 6});
    CHECK_THROWS_AS(packed_roi_features(Tensor::zeros({1, 6, 2, 2}), packed), ShapeError);
  }
  SUBCASE("object order within a frame does not matter") {
    const Tensor base = fusion_forward(w, c, batch, {}).logits;
    for (int trial = 0; trial < 50; ++trial) {
      FusionBatch shuffled = batch;
      for (auto& in : shuffled.layouts) {
        for (auto& f : in.frames) {
          std::vector<std::size_t> perm(f.boxes.size());
          for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
          for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
          PaddedFrame g = f;
          for (std::size_t i = 0; i < perm.size(); ++i) {
            g.categories[i] = f.categories[perm[i]];
            g.boxes[i] = f.boxes[perm[i]];
            g.valid[i] = f.valid[perm[i]];
            g.scores[i] = f.scores[perm[i]];
          }
          f = g;
        }
      }
      CHECK(max_abs_diff(fusion_forward(w, c, shuffled, {}).logits, base) <= 1e-9);
    }
  }
}

TEST_CASE("EF prepends one video token") {
  const auto c = small_config(FusionScheme::ef);
  Rng rng(9);
  const auto w = FusionWeights::init(c, rng);
  auto batch = random_batch(c, rng, 2);
  const PackedLayout packed = pack_layouts(batch.layouts, c.layout);
  const Tensor frames = spatial_forward(w.layout, c.layout, packed, Tensor(), {});
  const Tensor video = uniform_tensor({2, c.appearance.width}, -1.0, 1.0, rng);
  const auto t = temporal_forward(w.layout, c.layout, frames, 2, w.ef_proj(video), {});
  CHECK(t.sequence == c.layout.frames + 2);
  CHECK(t.hidden.rows() == 2 * (c.layout.frames + 2));

  // Changing video 1's token leaves video 0's logits alone and moves video 1's.
  batch.precomputed_video = video;
  const Tensor a = fusion_forward(w, c, batch, {}).logits;
  std::vector<double> v(video.values().begin(), video.values().end());
  for (std::size_t j = c.appearance.width; j < v.size(); ++j) v[j] += 0.5;
  batch.precomputed_video = Tensor(video.shape(), v);
  const Tensor b = fusion_forward(w, c, batch, {}).logits;
  const std::size_t k = c.layout.num_classes;
  for (std::size_t j = 0; j < k; ++j) CHECK(a.at(j) == b.at(j));
  double moved = 0.0;
  for (std::size_t j = k; j < 2 * k; ++j) moved = std::max(moved, std::abs(a.at(j) - b.at(j)));
  CHECK(moved > 1e-6);
  CHECK(max_abs_diff(a, fuse_ef(w, c, video, frames, 2, {})) <= 1e-12);
}

TEST_CASE("VATF") {
  const auto c = small_config(FusionScheme::vatf);
  Rng rng(11);
  const auto w = FusionWeights::init(c, rng);
  const std::size_t ch = c.appearance.trunk_channels(), da = c.appearance.width;

  SUBCASE("brute-force attention oracle") {
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t counts[2] = {2, 1 + rng.below(3)};
      const Tensor queries = uniform_tensor({counts[0] + counts[1], ch}, -1.0, 1.0, rng);
      const Tensor memory = uniform_tensor({2 * 4, ch}, -1.0, 1.0, rng);
      const Tensor got = fuse_vatf(w, c, queries, counts, memory, 4);
      REQUIRE(got.shape() == Shape{2, c.layout.num_classes});
      const Rows q = apply_linear(to_rows(queries), w.vatf_query), m = apply_linear(to_rows(memory), w.vatf_memory);
      std::size_t offset = 0;
      for (std::size_t b = 0; b < 2; ++b) {
        const Rows logits = apply_linear(
            attention_oracle(slice(q, offset, counts[b]), slice(m, 4 * b, 4), w.vatf_attention, c.fusion.vatf_heads),
            w.vatf_classifier);
        for (std::size_t k = 0; k < c.layout.num_classes; ++k) {
          double mean = 0.0;
          for (const auto& row : logits) mean += row[k];
          mean /= static_cast<double>(counts[b]);
          CHECK(std::abs(got.at(b * c.layout.num_classes + k) - mean) <= 1e-9);
        }
        offset += counts[b];
      }
    }
  }
  SUBCASE("constant trunk with one memory token") {
    // With a single memory token every query gets weight 1 on it.
    const Tensor queries = uniform_tensor({3, ch}, -1.0, 1.0, rng);
    const Tensor memory = uniform_tensor({1, ch}, -1.0, 1.0, rng);
    const std::size_t counts[1] = {3};
    const Tensor got = fuse_vatf(w, c, queries, counts, memory, 1);
    const Rows value = apply_linear(apply_linear(apply_linear(to_rows(memory), w.vatf_memory), w.vatf_attention.value),
                                    w.vatf_attention.output);
    const Rows expected = apply_linear(value, w.vatf_classifier);
    for (std::size_t k = 0; k < c.layout.num_classes; ++k) CHECK(std::abs(got.at(k) - expected[0][k]) <= 1e-9);
  }
  SUBCASE("errors") {
    const std::size_t none[2] = {2, 0};
    CHECK_THROWS_AS(fuse_vatf(w, c, Tensor::zeros({2, ch}), none, Tensor::zeros({8, ch}), 4), DataError);
    const std::size_t counts[2] = {1, 1};
    CHECK_THROWS_AS(fuse_vatf(w, c, Tensor::zeros({2, ch}), counts, Tensor::zeros({7, ch}), 4), ShapeError);
  }
  SUBCASE("videos without central boxes fall back to the full frame") {
    auto batch = random_batch(c, rng, 2);
    auto empty = batch;
    empty.central_boxes[0].clear();
    auto full = batch;
    full.central_boxes[0] = {BoundingBox::full_frame()};
    CHECK(max_abs_diff(fusion_forward(w, c, empty, {}).logits, fusion_forward(w, c, full, {}).logits) == 0.0);
    (void)da;
  }
}

TEST_CASE("LCF") {
  const auto c = small_config(FusionScheme::lcf);
  Rng rng(13);
  const auto w = FusionWeights::init(c, rng);
  const std::size_t d = c.layout.width, da = c.appearance.width, k = c.layout.num_classes;
  const Tensor layout = uniform_tensor({3, d}, -1.0, 1.0, rng);
  const Tensor app = uniform_tensor({3, da}, -1.0, 1.0, rng);
  const Tensor logits = fuse_lcf(w.lcf_classifier, layout, app);
  CHECK(logits.shape() == Shape{3, k});

  // Zeroing one input zeroes its half of the classifier's contribution.
  const Rows lw = slice(to_rows(w.lcf_classifier.weight), 0, d), aw = slice(to_rows(w.lcf_classifier.weight), d, da);
  const Linear layout_half{from_rows(lw), w.lcf_classifier.bias};
  const Linear app_half{from_rows(aw), w.lcf_classifier.bias};
  CHECK(max_abs_diff(fuse_lcf(w.lcf_classifier, layout, Tensor::zeros({3, da})), layout_half(layout)) <= 1e-12);
  CHECK(max_abs_diff(fuse_lcf(w.lcf_classifier, Tensor::zeros({3, d}), app), app_half(app)) <= 1e-12);
  CHECK(max_abs_diff(logits, from_rows(apply_linear(to_rows(concat_cols(std::vector<Tensor>{layout, app})),
                                                    w.lcf_classifier))) <= 1e-12);
}

TEST_CASE("CAF") {
  const auto c = small_config(FusionScheme::caf);
  Rng rng(17);
  const auto w = FusionWeights::init(c, rng);
  const std::size_t d = c.layout.width;

  SUBCASE("two-by-two brute-force oracle") {
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t videos = 2, ll = 2, la = 2;
      const Tensor l = uniform_tensor({videos * ll, d}, -1.0, 1.0, rng);
      const Tensor a = uniform_tensor({videos * la, d}, -1.0, 1.0, rng);
      const auto got = fuse_caf(w, c, l, ll, a, la, {}, {});
      const Rows lr = to_rows(l), ar = to_rows(a);
      for (std::size_t b = 0; b < videos; ++b) {
        const Rows lv = slice(lr, b * ll, ll), av = slice(ar, b * la, la);
        const Rows nl = block_oracle(w.caf_layout_blocks[0], lv, av, c.fusion.caf_heads);
        const Rows na = block_oracle(w.caf_appearance_blocks[0], av, lv, c.fusion.caf_heads);
        std::vector<double> pooled = nl[ll - 1];
        pooled.insert(pooled.end(), na[0].begin(), na[0].end());
        const Rows logits = apply_linear(Rows{pooled}, w.caf_classifier);
        for (std::size_t k = 0; k < c.layout.num_classes; ++k) {
          CHECK(std::abs(got.logits.at(b * c.layout.num_classes + k) - logits[0][k]) <= 1e-9);
        }
        for (std::size_t i = 0; i < ll; ++i) {
          for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(got.layout_sequence.at((b * ll + i) * d + j) - nl[i][j]) <= 1e-9);
        }
      }
    }
  }
  SUBCASE("masked appearance tokens") {
    const Tensor l = uniform_tensor({3, d}, -1.0, 1.0, rng);
    const Tensor a = uniform_tensor({3, d}, -1.0, 1.0, rng);
    const std::vector<bool> valid{true, false, true};
    const auto got = fuse_caf(w, c, l, 3, a, 3, valid, {});
    const Rows expected = block_oracle(w.caf_layout_blocks[0], to_rows(l), to_rows(a), c.fusion.caf_heads, valid);
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(got.layout_sequence.at(i * d + j) - expected[i][j]) <= 1e-9);
    }
    CHECK_THROWS_AS(fuse_caf(w, c, l, 3, a, 3, {false, false, false}, {}), NumericalError);
  }
  SUBCASE("a lone appearance token takes all the weight") {
    const Tensor l = uniform_tensor({2, d}, -1.0, 1.0, rng);
    const Tensor a = uniform_tensor({1, d}, -1.0, 1.0, rng);
    const auto got = fuse_caf(w, c, l, 2, a, 1, {}, {});
    const auto& blk = w.caf_layout_blocks[0];
    // Every layout query receives the projected value of the single token.
    const Rows value = apply_linear(apply_linear(to_rows(blk.source_norm(a)), blk.attention.value), blk.attention.output);
    Rows y = to_rows(l);
    for (auto& row : y) {
      for (std::size_t j = 0; j < d; ++j) row[j] += value[0][j];
    }
    const Rows f = to_rows(blk.feed_forward_out(gelu(blk.feed_forward_in(blk.feed_forward_norm(from_rows(y))))));
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < d; ++j) CHECK(std::abs(got.layout_sequence.at(i * d + j) - (y[i][j] + f[i][j])) <= 1e-9);
    }
  }
  SUBCASE("shape errors") {
    CHECK_THROWS_AS(fuse_caf(w, c, Tensor::zeros({5, d}), 2, Tensor::zeros({4, d}), 2, {}, {}), ShapeError);
    CHECK_THROWS_AS(fuse_caf(w, c, Tensor::zeros({4, d}), 2, Tensor::zeros({4, d}), 2, {true}, {}), ShapeError);
  }
}

TEST_CASE("CACNF loss") {
  Rng rng(19);
  Targets t;
  t.classes = {0, 3, 2};
  const Tensor f = uniform_tensor({3, 5}, -2.0, 2.0, rng);
  const Tensor l = uniform_tensor({3, 5}, -2.0, 2.0, rng);
  const Tensor a = uniform_tensor({3, 5}, -2.0, 2.0, rng);
  CHECK(cacnf_loss(f, l, a, t, 0.0, 0.0).item() == task_loss(f, t).item());
  CHECK(std::abs(cacnf_loss(f, f, f, t, 1.0, 1.0).item() - 3.0 * task_loss(f, t).item()) <= 1e-12);

  // Cross entropy by hand.
  auto ce = [&](const Tensor& x) {
    double total = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      double m = -INFINITY, z = 0.0;
      for (std::size_t k = 0; k < 5; ++k) m = std::max(m, x.at(i * 5 + k));
      for (std::size_t k = 0; k < 5; ++k) z += std::exp(x.at(i * 5 + k) - m);
      total += m + std::log(z) - x.at(i * 5 + t.classes[i]);
    }
    return total / 3.0;
  };
  for (int trial = 0; trial < 20; ++trial) {
    const double ll = rng.uniform(0.0, 2.0), la = rng.uniform(0.0, 2.0);
    CHECK(std::abs(cacnf_loss(f, l, a, t, ll, la).item() - (ce(f) + ll * ce(l) + la * ce(a))) <= 1e-12);
  }
  CHECK_THROWS_AS(cacnf_loss(f, l, a, t, -0.5, 0.5), ConfigError);
  CHECK_THROWS_AS(cacnf_loss(f, l, a, t, 0.5, -1e-9), ConfigError);

  Targets multi;
  multi.multi_label = true;
  multi.multi_hot.assign(15, 0.0);
  multi.multi_hot[1] = multi.multi_hot[7] = 1.0;
  CHECK(std::isfinite(cacnf_loss(f, l, a, multi, 0.5, 0.5).item()));
}

TEST_CASE("every scheme trains its own parameters") {
  for (auto scheme : kAllSchemes) {
    const auto c = small_config(scheme);
    Rng rng(23);
    const auto w = FusionWeights::init(c, rng);
    const auto batch = random_batch(c, rng, 2);
    Rng drop(1);
    const auto out = fusion_forward(w, c, batch, {true, &drop});
    REQUIRE(out.logits.shape() == Shape{2, c.layout.num_classes});
    Targets t;
    t.classes = {1, 4};
    backward(fusion_loss(out, c.fusion, t));
    const auto params = w.parameters();
    CHECK(params.size() == w.backbone_parameters().size() + w.classifier_parameters().size());
    for (const auto& [name, p] : params) {
      INFO(scheme_name(scheme) << " " << name);
      REQUIRE(p.has_grad());
      double norm = 0.0;
      for (double g : p.grad()) norm += g * g;
      CHECK(norm > 0.0);
    }
  }
}

TEST_CASE("CACNF gives both branches their own heads") {
  const auto c = small_config(FusionScheme::cacnf);
  Rng rng(29);
  const auto w = FusionWeights::init(c, rng);
  const auto batch = random_batch(c, rng, 2);
  const auto out = fusion_forward(w, c, batch, {});
  CHECK(max_abs_diff(out.layout_logits, stlt_forward(w.layout, c.layout, batch.layouts, {})) <= 1e-10);
  const auto app = appearance_forward(w.appearance, c.appearance, batch.clip, false, {});
  CHECK(max_abs_diff(out.appearance_logits, w.appearance.classifier(app.video)) <= 1e-12);

  // CAF with the same weights produces the same fused logits.
  auto caf_config = c;
  caf_config.fusion.scheme = FusionScheme::caf;
  FusionWeights caf = w;
  caf.scheme = FusionScheme::caf;
  CHECK(bit_equal(fusion_forward(caf, caf_config, batch, {}).logits, out.logits));
}

TEST_CASE("forward passes are deterministic") {
  for (auto scheme : kAllSchemes) {
    const auto c = small_config(scheme);
    Rng a(31), b(31);
    const auto wa = FusionWeights::init(c, a);
    const auto wb = FusionWeights::init(c, b);
    CHECK(parameter_hash(wa.parameters()) == parameter_hash(wb.parameters()));
    const auto batch = random_batch(c, a, 2);
    Rng da(5), db(5);
    CHECK(bit_equal(fusion_forward(wa, c, batch, {true, &da}).logits, fusion_forward(wb, c, batch, {true, &db}).logits));
    CHECK_THROWS_AS(fusion_forward(wa, c, batch, {true, nullptr}), ConfigError);
  }
}

TEST_CASE("classifier reset and parameter groups") {
  auto c = small_config(FusionScheme::lcf);
  Rng rng(37);
  auto w = FusionWeights::init(c, rng);
  const auto backbone = parameter_hash(w.backbone_parameters());
  w.reset_classifier(c, 9, rng);
  CHECK(w.lcf_classifier.out_features() == 9);
  CHECK(parameter_hash(w.backbone_parameters()) == backbone);
  for (const auto& [name, p] : w.backbone_parameters()) CHECK(name.find("classifier") == std::string::npos);

  auto wrong = c;
  wrong.fusion.scheme = FusionScheme::caf;
  const auto batch = random_batch(c, rng, 1);
  CHECK_THROWS_AS(fusion_forward(w, wrong, batch, {}), ConfigError);
}

TEST_CASE("precomputed appearance features") {
  const auto dir = std::filesystem::temp_directory_path() / "stlt_fusion_features";
  std::filesystem::create_directories(dir);
  Container box;
  box.tensors.push_back({"v1", {3}, {1.0, 2.0, 3.0}});
  box.tensors.push_back({"v2", {3}, {-1.0, 0.5, 0.0}});
  save_container(dir / "ok.bin", box);
  const auto store = load_appearance_features(dir / "ok.bin");
  CHECK(store.size() == 2);
  const std::vector<std::string> ids{"v2", "v1", "v2"};
  const Tensor t = gather_appearance_features(store, ids, 3);
  CHECK(t.shape() == Shape{3, 3});
  CHECK(std::vector<double>(t.values().begin(), t.values().end()) ==
        std::vector<double>{-1.0, 0.5, 0.0, 1.0, 2.0, 3.0, -1.0, 0.5, 0.0});
  const std::vector<std::string> missing{"v3"};
  CHECK_THROWS_AS(gather_appearance_features(store, missing, 3), DataError);
  CHECK_THROWS_AS(gather_appearance_features(store, ids, 4), DataError);

  box.tensors.push_back({"v3", {2}, {0.0, 0.0}});
  save_container(dir / "ragged.bin", box);
  CHECK_THROWS_AS(load_appearance_features(dir / "ragged.bin"), DataError);
  box.tensors = {{"m", {2, 2}, {0, 0, 0, 0}}};
  save_container(dir / "matrix.bin", box);
  CHECK_THROWS_AS(load_appearance_features(dir / "matrix.bin"), DataError);

  // EF with precomputed vectors skips the encoder entirely.
  const auto c = small_config(FusionScheme::ef);
  Rng rng(41);
  const auto w = FusionWeights::init(c, rng);
  auto batch = random_batch(c, rng, 2);
  const auto video = appearance_forward(w.appearance, c.appearance, batch.clip, false, {}).video;
  const Tensor live = fusion_forward(w, c, batch, {}).logits;
  batch.precomputed_video = video;
  batch.clip = Tensor();
  CHECK(bit_equal(fusion_forward(w, c, batch, {}).logits, live));
  std::filesystem::remove_all(dir);
}

TEST_CASE("fusion gradchecks") {
  for (const auto& gc : fusion_gradcheck_cases()) {
    const auto r = run_gradcheck_case(gc, 43, 3);
    INFO(gc.name << " worst " << r.worst_relative_error);
    CHECK(r.passed);
  }
}
