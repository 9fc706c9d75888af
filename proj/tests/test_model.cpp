#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>

#include "stlt/errors.hpp"
#include "stlt/ops.hpp"
#include "stlt/stlt_model.hpp"

using namespace stlt;

namespace {

StltConfig small_config(StltVariant variant = StltVariant::stlt) {
  StltConfig c;
  c.variant = variant;
  c.width = 16;
  c.spatial_heads = 4;
  c.temporal_heads = 2;
  c.spatial_layers = 2;
  c.temporal_layers = 2;
  c.max_objects = 4;
  c.frames = 5;
  c.vocabulary_size = 5;
  c.num_classes = 6;
  c.ff_multiplier = 2;
  return c;
}

FrameLayout random_frame(const StltConfig& c, Rng& rng, std::size_t count) {
  FrameLayout f;
  for (std::size_t j = 0; j < count; ++j) {
    const double x1 = rng.uniform(0.0, 0.6), y1 = rng.uniform(0.0, 0.6);
    f.objects.push_back({2 + rng.below(c.vocabulary_size - 2),
                         {x1, y1, x1 + rng.uniform(0.05, 0.4), y1 + rng.uniform(0.05, 0.4)},
                         std::nullopt});
  }
  return f;
}

LayoutInput random_input(const StltConfig& c, Rng& rng, std::size_t frames = 0) {
  LayoutInput in;
  for (std::size_t i = 0; i < (frames ? frames : c.frames); ++i) {
    in.frames.push_back(pad_objects(random_frame(c, rng, rng.below(c.max_objects + 1)), c.max_objects));
  }
  return in;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.at(i) - b.at(i)));
  return m;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

Tensor frame_embeddings(const StltWeights& w, const StltConfig& c, const std::vector<LayoutInput>& inputs) {
  return spatial_forward(w, c, pack_layouts(inputs, c), Tensor(), {});
}

}  // namespace

TEST_CASE("config validation") {
  StltConfig c = small_config();
  c.validate();
  c.width = 18;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.dropout = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  const auto back = StltConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(StltConfig::from_json("{}"), DataError);
}

TEST_CASE("embed_object examples") {
  const StltConfig c = small_config();
  Rng rng(1);
  StltWeights w = StltWeights::init(c, rng);
  const BoundingBox box{0.1, 0.2, 0.5, 0.7};
  const Tensor a = embed_object(w, c, 3, box, {});
  const Tensor b = embed_object(w, c, 3, box, {});
  CHECK(bit_equal(a.values(), b.values()));

  // Composition oracle: lookup, box projection, sum, layer norm.
  const std::size_t cat[1] = {3};
  const Tensor bx({1, 4}, {box.x1, box.y1, box.x2, box.y2});
  const Tensor oracle =
      layer_norm(add(w.category.lookup(cat), linear(bx, w.box.weight, w.box.bias)), w.object_norm.gamma,
                 w.object_norm.beta);
  CHECK(max_abs_diff(a, oracle) == 0.0);

  // Zero projections: LayerNorm of the zero vector is beta.
  StltWeights z = w;
  z.category.table = Tensor::zeros(w.category.table.shape());
  z.box.weight = Tensor::zeros(w.box.weight.shape());
  z.box.bias = Tensor::zeros(w.box.bias.shape());
  std::vector<double> beta(c.width);
  for (std::size_t i = 0; i < c.width; ++i) beta[i] = 0.1 * static_cast<double>(i) - 0.4;
  z.object_norm.beta = Tensor({c.width}, beta);
  const Tensor out = embed_object(z, c, 2, box, {});
  for (std::size_t i = 0; i < c.width; ++i) CHECK(out.at(i) == doctest::Approx(beta[i]).epsilon(1e-12));
}

TEST_CASE("spatial permutation invariance") {
  const StltConfig c = small_config();
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    const StltWeights w = StltWeights::init(c, rng);
    FrameLayout f = random_frame(c, rng, 1 + rng.below(c.max_objects));
    FrameLayout g = f;
    for (std::size_t i = g.objects.size(); i > 1; --i) std::swap(g.objects[i - 1], g.objects[rng.below(i)]);
    const std::vector<LayoutInput> a{{{pad_objects(f, c.max_objects)}}};
    const std::vector<LayoutInput> b{{{pad_objects(g, c.max_objects)}}};
    CHECK(max_abs_diff(frame_embeddings(w, c, a), frame_embeddings(w, c, b)) <= 1e-9);
  }
}

TEST_CASE("empty frame depends only on weights") {
  const StltConfig c = small_config();
  Rng rng(3);
  const StltWeights w = StltWeights::init(c, rng);
  std::vector<LayoutInput> batch;
  for (int i = 0; i < 3; ++i) {
    LayoutInput in = random_input(c, rng, 2);
    in.frames[0] = pad_objects(FrameLayout{}, c.max_objects);
    batch.push_back(in);
  }
  const Tensor s = frame_embeddings(w, c, batch);
  for (std::size_t v = 1; v < 3; ++v) {
    for (std::size_t k = 0; k < c.width; ++k) CHECK(s.at(v * 2 * c.width + k) == s.at(k));
  }
}

TEST_CASE("padding neutrality") {
  const StltConfig c = small_config();
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const StltWeights w = StltWeights::init(c, rng);
    const FrameLayout f = random_frame(c, rng, rng.below(c.max_objects));
    PaddedFrame tight = pad_objects(f, f.objects.size());
    PaddedFrame padded = pad_objects(f, c.max_objects);
    // Garbage in masked slots must not matter.
    for (std::size_t j = f.objects.size(); j < c.max_objects; ++j) {
      padded.categories[j] = 2 + rng.below(c.vocabulary_size - 2);
      padded.boxes[j] = {0.1, 0.1, rng.uniform(0.2, 0.9), 0.9};
    }
    const std::vector<LayoutInput> a{{{tight}}};
    const std::vector<LayoutInput> b{{{padded}}};
    CHECK(max_abs_diff(frame_embeddings(w, c, a), frame_embeddings(w, c, b)) <= 1e-9);
    CHECK(max_abs_diff(stlt_forward(w, c, a, {}), stlt_forward(w, c, b, {})) <= 1e-9);
  }
}

TEST_CASE("temporal causality is bit-exact") {
  const StltConfig c = small_config();
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const StltWeights w = StltWeights::init(c, rng);
    const std::size_t n = 1 + rng.below(c.frames);
    const Tensor frames = normal_tensor({n, c.width}, 1.0, rng);
    const std::size_t i = rng.below(n);
    std::vector<double> altered(frames.values().begin(), frames.values().end());
    for (std::size_t k = (i + 1) * c.width; k < altered.size(); ++k) altered[k] += rng.normal();
    const auto h1 = temporal_forward(w, c, frames, 1, Tensor(), {}).hidden;
    const auto h2 = temporal_forward(w, c, Tensor({n, c.width}, altered), 1, Tensor(), {}).hidden;
    CHECK(bit_equal(h1.values().subspan(0, (i + 1) * c.width), h2.values().subspan(0, (i + 1) * c.width)));
  }
}

TEST_CASE("temporal class token sees the whole past") {
  const StltConfig c = small_config();
  Rng rng(6);
  const StltWeights w = StltWeights::init(c, rng);
  const Tensor frames = normal_tensor({c.frames, c.width}, 1.0, rng);
  std::vector<double> moved(frames.values().begin(), frames.values().end());
  for (std::size_t k = 0; k < c.width; ++k) moved[k] += 1e-2;
  const auto a = temporal_forward(w, c, frames, 1, Tensor(), {}).class_hidden;
  const auto b = temporal_forward(w, c, Tensor({c.frames, c.width}, moved), 1, Tensor(), {}).class_hidden;
  CHECK(max_abs_diff(a, b) > 0.0);
}

TEST_CASE("temporal residual identity with n = 1") {
  const StltConfig c = small_config();
  Rng rng(7);
  StltWeights w = StltWeights::init(c, rng);
  for (auto& block : w.temporal) {
    block.attention.output.weight = Tensor::zeros(block.attention.output.weight.shape());
    block.attention.output.bias = Tensor::zeros(block.attention.output.bias.shape());
    block.feed_forward_out.weight = Tensor::zeros(block.feed_forward_out.weight.shape());
    block.feed_forward_out.bias = Tensor::zeros(block.feed_forward_out.bias.shape());
  }
  const Tensor frame = normal_tensor({1, c.width}, 1.0, rng);
  const auto out = temporal_forward(w, c, frame, 1, Tensor(), {});
  CHECK(out.sequence == 2);
  const std::size_t pos[2] = {0, 1};
  const Tensor pool[2] = {frame, w.temporal_class};
  const Tensor expected =
      layer_norm(add(concat_rows(pool), w.position.lookup(pos)), w.temporal_norm.gamma, w.temporal_norm.beta);
  CHECK(max_abs_diff(out.hidden, expected) == 0.0);
}

TEST_CASE("stlt_forward batch equals per-sample and repeats bit-exactly") {
  for (auto variant : {StltVariant::stlt, StltVariant::joint}) {
    const StltConfig c = small_config(variant);
    Rng rng(8);
    const StltWeights w = StltWeights::init(c, rng);
    std::vector<LayoutInput> batch;
    for (int i = 0; i < 4; ++i) batch.push_back(random_input(c, rng));
    const Tensor logits = stlt_forward(w, c, batch, {});
    CHECK(logits.shape() == Shape{4, c.num_classes});
    for (double v : logits.values()) CHECK(std::isfinite(v));
    for (std::size_t b = 0; b < 4; ++b) {
      const Tensor single = stlt_forward(w, c, std::span(&batch[b], 1), {});
      for (std::size_t k = 0; k < c.num_classes; ++k) {
        CHECK(std::abs(single.at(k) - logits.at(b * c.num_classes + k)) <= 1e-10);
      }
    }
    CHECK(bit_equal(logits.values(), stlt_forward(w, c, batch, {}).values()));
  }
}

TEST_CASE("joint variant structure") {
  const StltConfig c = small_config(StltVariant::joint);
  Rng rng(9);
  const StltWeights w = StltWeights::init(c, rng);
  const std::vector<LayoutInput> one{random_input(c, rng)};
  CHECK(joint_encode(w, c, one, {}).rows() == c.frames * c.max_objects + 1);
  CHECK_THROWS_AS(stlt_joint_forward(w, small_config(), one, {}), ConfigError);

  int changed = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const StltWeights wt = StltWeights::init(c, rng);
    LayoutInput in;
    std::vector<FrameLayout> frames;
    for (std::size_t i = 0; i < c.frames; ++i) frames.push_back(random_frame(c, rng, 1 + rng.below(c.max_objects)));
    for (const auto& f : frames) in.frames.push_back(pad_objects(f, c.max_objects));
    const std::size_t fi = rng.below(c.frames);
    FrameLayout shuffled = frames[fi];
    for (std::size_t i = shuffled.objects.size(); i > 1; --i) {
      std::swap(shuffled.objects[i - 1], shuffled.objects[rng.below(i)]);
    }
    LayoutInput perm = in;
    perm.frames[fi] = pad_objects(shuffled, c.max_objects);
    const std::vector<LayoutInput> a{in}, b{perm};
    CHECK(max_abs_diff(stlt_joint_forward(wt, c, a, {}), stlt_joint_forward(wt, c, b, {})) <= 1e-9);

    LayoutInput swapped = in;
    std::swap(swapped.frames[0], swapped.frames[1]);
    const std::vector<LayoutInput> s{swapped};
    if (max_abs_diff(stlt_joint_forward(wt, c, a, {}), stlt_joint_forward(wt, c, s, {})) > 1e-9) ++changed;
  }
  CHECK(changed == 200);
}

TEST_CASE("every weight group receives gradient") {
  for (auto variant : {StltVariant::stlt, StltVariant::joint}) {
    const StltConfig c = small_config(variant);
    Rng rng(10);
    const StltWeights w = StltWeights::init(c, rng);
    std::vector<LayoutInput> batch;
    for (int i = 0; i < 3; ++i) batch.push_back(random_input(c, rng));
    Rng drop(11);
    const std::size_t targets[3] = {0, 2, 5};
    backward(cross_entropy(stlt_forward(w, c, batch, {true, &drop}), targets));
    for (const auto& [name, t] : w.parameters()) {
      INFO(name);
      REQUIRE(t.has_grad());
      const auto g = t.grad();
      CHECK(std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; }));
    }
  }
}

TEST_CASE("checkpoint round trip reproduces logits") {
  const StltConfig c = small_config();
  Rng rng(12);
  const StltWeights w = StltWeights::init(c, rng);
  const auto path = std::filesystem::temp_directory_path() / "stlt_test_model.ckpt";
  save_stlt(path, c, w);
  const auto loaded = load_stlt(path);
  std::filesystem::remove(path);
  CHECK(loaded.config.to_json() == c.to_json());
  CHECK(parameter_hash(loaded.weights.parameters()) == parameter_hash(w.parameters()));
  const std::vector<LayoutInput> batch{random_input(c, rng), random_input(c, rng)};
  CHECK(bit_equal(stlt_forward(w, c, batch, {}).values(), stlt_forward(loaded.weights, c, batch, {}).values()));
}

TEST_CASE("model gradient checks") {
  for (const auto& gc : model_gradcheck_cases()) {
    const auto r = run_gradcheck_case(gc, 21, 10);
    INFO(gc.name << " worst " << r.worst_relative_error);
    CHECK(r.passed);
  }
}
