#include "stlt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "stlt/attention.hpp"
#include "stlt/conv.hpp"
#include "stlt/errors.hpp"
#include "stlt/nn.hpp"
#include "stlt/ops.hpp"

namespace stlt {

namespace {

double norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

Tensor random_leaf(Shape shape, Rng& rng, double scale = 1.0) {
  return normal_tensor(std::move(shape), scale, rng, true);
}

std::size_t between(Rng& rng, std::size_t lo, std::size_t hi) {
  return lo + static_cast<std::size_t>(rng.below(hi - lo + 1));
}

// Inputs bounded away from zero so the kink of relu is never straddled.
Tensor away_from_zero(Shape shape, Rng& rng) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) {
    const double mag = rng.uniform(0.1, 1.5);
    x = rng.bernoulli(0.5) ? mag : -mag;
  }
  return Tensor(std::move(shape), std::move(v), true);
}

template <typename F>
GradCheckCase unary_case(std::string name, F op) {
  return {std::move(name), [op](Rng& rng) {
            const std::size_t r = between(rng, 1, 4), c = between(rng, 1, 6);
            return GradCheckInstance{{random_leaf({r, c}, rng)},
                                     [op](const std::vector<Tensor>& in) { return op(in[0]); }};
          }};
}

template <typename F>
GradCheckCase binary_case(std::string name, F op) {
  return {std::move(name), [op](Rng& rng) {
            const std::size_t r = between(rng, 1, 4), c = between(rng, 1, 6);
            return GradCheckInstance{{random_leaf({r, c}, rng), random_leaf({r, c}, rng)},
                                     [op](const std::vector<Tensor>& in) { return op(in[0], in[1]); }};
          }};
}

std::vector<AttentionSegment> random_segments(Rng& rng, std::size_t& total_q, std::size_t& total_k,
                                              bool cross) {
  std::vector<AttentionSegment> segs;
  const std::size_t count = between(rng, 1, 3);
  total_q = total_k = 0;
  for (std::size_t s = 0; s < count; ++s) {
    const std::size_t t = between(rng, 1, 3);
    const std::size_t len = cross ? between(rng, 1, 3) : t;
    AttentionMask mask = AttentionMask::bidirectional();
    const std::uint64_t kind = rng.below(4);
    std::vector<bool> valid(len, true);
    for (std::size_t j = 1; j < len; ++j) valid[j] = rng.bernoulli(0.6);
    if (kind == 1 && !cross) mask = AttentionMask::causal();
    if (kind == 2) mask = AttentionMask::padding(valid);
    if (kind == 3 && !cross) mask = AttentionMask::combined(valid);
    segs.push_back({total_q, t, total_k, len, mask});
    total_q += t;
    total_k += len;
  }
  return segs;
}

}  // namespace

double gradient_relative_error(GradCheckInstance& instance, Rng& rng, double step) {
  Tensor probe;
  {
    NoGradGuard guard;
    probe = instance.forward(instance.inputs);
  }
  std::vector<double> weights(probe.size());
  for (double& w : weights) w = rng.uniform(-1.0, 1.0);
  const Tensor weighting(probe.shape(), weights);
  auto objective = [&](const std::vector<Tensor>& in) {
    return sum(mul(instance.forward(in), weighting));
  };

  for (Tensor& t : instance.inputs) t.zero_grad();
  backward(objective(instance.inputs));

  double worst = 0.0;
  for (Tensor& input : instance.inputs) {
    if (!input.requires_grad()) continue;
    std::vector<double> analytic(input.size(), 0.0);
    if (input.has_grad()) {
      auto g = input.grad();
      std::copy(g.begin(), g.end(), analytic.begin());
    }
    std::vector<double> numeric(input.size());
    auto values = input.mutable_values();
    NoGradGuard guard;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = objective(instance.inputs).item();
      values[i] = saved - step;
      const double down = objective(instance.inputs).item();
      values[i] = saved;
      numeric[i] = (up - down) / (2.0 * step);
    }
    std::vector<double> diff(analytic.size());
    for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = analytic[i] - numeric[i];
    const double denom = std::max({norm(analytic), norm(numeric), 1e-8});
    worst = std::max(worst, norm(diff) / denom);
  }
  return worst;
}

GradCheckResult run_gradcheck_case(const GradCheckCase& c, std::uint64_t seed, std::size_t instances,
                                   double tolerance, double step) {
  GradCheckResult result{c.name, instances, 0.0, true};
  const Rng base = Rng(seed).split(c.name);
  for (std::size_t i = 0; i < instances; ++i) {
    Rng rng = base.split(i);
    GradCheckInstance inst = c.make(rng);
    Rng weighting = rng.split("weighting");
    const double err = gradient_relative_error(inst, weighting, step);
    result.worst_relative_error = std::max(result.worst_relative_error, err);
    if (!(err < tolerance)) result.passed = false;
  }
  return result;
}

std::vector<GradCheckCase> tensor_engine_gradcheck_cases() {
  std::vector<GradCheckCase> cases;
  cases.push_back(binary_case("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }));
  cases.push_back(binary_case("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }));
  cases.push_back(binary_case("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }));
  cases.push_back(unary_case("scale", [](const Tensor& a) { return scale(a, -1.7); }));
  cases.push_back({"add_row", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 4), c = between(rng, 1, 6);
                     return GradCheckInstance{
                         {random_leaf({r, c}, rng), random_leaf({c}, rng)},
                         [](const std::vector<Tensor>& in) { return add_row(in[0], in[1]); }};
                   }});
  cases.push_back({"matmul", [](Rng& rng) {
                     const std::size_t m = between(rng, 1, 4), k = between(rng, 1, 5),
                                       n = between(rng, 1, 4);
                     return GradCheckInstance{
                         {random_leaf({m, k}, rng), random_leaf({k, n}, rng)},
                         [](const std::vector<Tensor>& in) { return matmul(in[0], in[1]); }};
                   }});
  cases.push_back({"linear", [](Rng& rng) {
                     const std::size_t m = between(rng, 1, 4), k = between(rng, 1, 5),
                                       n = between(rng, 1, 4);
                     return GradCheckInstance{
                         {random_leaf({m, k}, rng), random_leaf({k, n}, rng), random_leaf({n}, rng)},
                         [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); }};
                   }});
  cases.push_back({"relu", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 4), c = between(rng, 1, 6);
                     return GradCheckInstance{{away_from_zero({r, c}, rng)},
                                              [](const std::vector<Tensor>& in) { return relu(in[0]); }};
                   }});
  cases.push_back(unary_case("gelu", [](const Tensor& a) { return gelu(a); }));
  cases.push_back(unary_case("sigmoid", [](const Tensor& a) { return sigmoid(a); }));
  cases.push_back(unary_case("tanh", [](const Tensor& a) { return stlt::tanh(a); }));
  cases.push_back(unary_case("softmax", [](const Tensor& a) { return softmax(a); }));
  cases.push_back(unary_case("log_softmax", [](const Tensor& a) { return log_softmax(a); }));
  cases.push_back({"layer_norm", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 4), c = between(rng, 2, 8);
                     return GradCheckInstance{
                         {random_leaf({r, c}, rng), random_leaf({c}, rng), random_leaf({c}, rng)},
                         [](const std::vector<Tensor>& in) { return layer_norm(in[0], in[1], in[2]); }};
                   }});
  cases.push_back({"dropout", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 4), c = between(rng, 1, 8);
                     const std::uint64_t seed = rng.next_u64();
                     return GradCheckInstance{{random_leaf({r, c}, rng)},
                                              [seed](const std::vector<Tensor>& in) {
                                                Rng stream(seed);
                                                return dropout(in[0], 0.3, true, stream);
                                              }};
                   }});
  cases.push_back(unary_case("sum", [](const Tensor& a) { return sum(a); }));
  cases.push_back(unary_case("mean", [](const Tensor& a) { return mean(a); }));
  cases.push_back(unary_case("reshape", [](const Tensor& a) { return reshape(a, {a.size()}); }));
  cases.push_back({"concat_rows", [](Rng& rng) {
                     const std::size_t c = between(rng, 1, 5);
                     return GradCheckInstance{
                         {random_leaf({between(rng, 1, 3), c}, rng), random_leaf({between(rng, 1, 3), c}, rng)},
                         [](const std::vector<Tensor>& in) { return concat_rows(in); }};
                   }});
  cases.push_back({"concat_cols", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 4);
                     return GradCheckInstance{
                         {random_leaf({r, between(rng, 1, 4)}, rng), random_leaf({r, between(rng, 1, 4)}, rng)},
                         [](const std::vector<Tensor>& in) { return concat_cols(in); }};
                   }});
  cases.push_back({"gather_rows", [](Rng& rng) {
                     const std::size_t r = between(rng, 1, 5), c = between(rng, 1, 5);
                     std::vector<std::size_t> idx(between(rng, 1, 6));
                     for (auto& i : idx) i = rng.below(r);
                     return GradCheckInstance{{random_leaf({r, c}, rng)},
                                              [idx](const std::vector<Tensor>& in) {
                                                return gather_rows(in[0], idx);
                                              }};
                   }});
  cases.push_back({"segment_mean", [](Rng& rng) {
                     std::vector<std::size_t> offs{0};
                     const std::size_t segs = between(rng, 1, 3);
                     for (std::size_t s = 0; s < segs; ++s) offs.push_back(offs.back() + between(rng, 1, 3));
                     return GradCheckInstance{{random_leaf({offs.back(), between(rng, 1, 4)}, rng)},
                                              [offs](const std::vector<Tensor>& in) {
                                                return segment_mean(in[0], offs);
                                              }};
                   }});
  cases.push_back({"cross_entropy", [](Rng& rng) {
                     const std::size_t n = between(rng, 1, 4), c = between(rng, 2, 6);
                     std::vector<std::size_t> tg(n);
                     for (auto& t : tg) t = rng.below(c);
                     return GradCheckInstance{{random_leaf({n, c}, rng, 2.0)},
                                              [tg](const std::vector<Tensor>& in) {
                                                return cross_entropy(in[0], tg);
                                              }};
                   }});
  cases.push_back({"binary_cross_entropy", [](Rng& rng) {
                     const std::size_t n = between(rng, 1, 4), c = between(rng, 1, 6);
                     std::vector<double> tg(n * c);
                     for (auto& t : tg) t = rng.bernoulli(0.4) ? 1.0 : 0.0;
                     return GradCheckInstance{{random_leaf({n, c}, rng, 2.0)},
                                              [tg](const std::vector<Tensor>& in) {
                                                return binary_cross_entropy(in[0], tg);
                                              }};
                   }});
  cases.push_back({"attention", [](Rng& rng) {
                     std::size_t nq = 0, nk = 0;
                     auto segs = random_segments(rng, nq, nk, rng.bernoulli(0.5));
                     const std::size_t heads = between(rng, 1, 2);
                     const std::size_t dk = heads * between(rng, 1, 3), dv = heads * between(rng, 1, 2);
                     return GradCheckInstance{
                         {random_leaf({nq, dk}, rng), random_leaf({nk, dk}, rng), random_leaf({nk, dv}, rng)},
                         [segs, heads](const std::vector<Tensor>& in) {
                           return attention(in[0], in[1], in[2], segs, heads);
                         }};
                   }});
  cases.push_back({"scaled_dot_product_attention", [](Rng& rng) {
                     const std::size_t t = between(rng, 1, 4), s = between(rng, 1, 4), d = between(rng, 1, 4);
                     return GradCheckInstance{
                         {random_leaf({t, d}, rng), random_leaf({s, d}, rng), random_leaf({s, 2}, rng)},
                         [](const std::vector<Tensor>& in) {
                           return scaled_dot_product_attention(in[0], in[1], in[2],
                                                               AttentionMask::bidirectional());
                         }};
                   }});
  cases.push_back({"multi_head_attention", [](Rng& rng) {
                     const std::size_t width = 4, heads = 2, t = between(rng, 1, 4);
                     auto w = MultiHeadAttentionWeights::init(width, rng);
                     const bool causal = rng.bernoulli(0.5);
                     std::vector<Tensor> inputs{random_leaf({t, width}, rng), w.query.weight, w.key.weight,
                                                w.value.weight, w.output.weight, w.output.bias};
                     return GradCheckInstance{inputs, [w, heads, causal](const std::vector<Tensor>& in) {
                                                MultiHeadAttentionWeights ww = w;
                                                ww.query.weight = in[1];
                                                ww.key.weight = in[2];
                                                ww.value.weight = in[3];
                                                ww.output.weight = in[4];
                                                ww.output.bias = in[5];
                                                const auto mask = causal ? AttentionMask::causal()
                                                                         : AttentionMask::bidirectional();
                                                return multi_head_attention(in[0], in[0], ww, mask, heads);
                                              }};
                   }});
  cases.push_back({"transformer_block", [](Rng& rng) {
                     const std::size_t width = 4;
                     auto block = TransformerBlock::init(width, 2, rng);
                     std::vector<std::size_t> lengths{between(rng, 1, 3), between(rng, 1, 3)};
                     const std::uint64_t seed = rng.next_u64();
                     const bool causal = rng.bernoulli(0.5);
                     NamedTensors named;
                     block.collect("b", named);
                     std::vector<Tensor> inputs{random_leaf({lengths[0] + lengths[1], width}, rng)};
                     // A subset of the parameters keeps each instance under the size budget.
                     inputs.push_back(block.attention.value.weight);
                     inputs.push_back(block.feed_forward_in.weight);
                     inputs.push_back(block.attention_norm.gamma);
                     return GradCheckInstance{inputs, [block, lengths, seed, causal](const std::vector<Tensor>& in) {
                                                TransformerBlock b = block;
                                                b.attention.value.weight = in[1];
                                                b.feed_forward_in.weight = in[2];
                                                b.attention_norm.gamma = in[3];
                                                auto segs = self_segments(
                                                    lengths, causal ? AttentionMask::Kind::causal
                                                                    : AttentionMask::Kind::bidirectional);
                                                Rng stream(seed);
                                                return b.forward(in[0], segs, {2, 0.2, true}, stream);
                                              }};
                   }});
  cases.push_back({"cross_attention_block", [](Rng& rng) {
                     const std::size_t width = 4;
                     auto block = CrossAttentionBlock::init(width, 2, rng);
                     const std::size_t t = between(rng, 1, 3), s = between(rng, 1, 4);
                     std::vector<Tensor> inputs{random_leaf({t, width}, rng), random_leaf({s, width}, rng),
                                                block.attention.key.weight, block.source_norm.beta};
                     return GradCheckInstance{inputs, [block, t, s](const std::vector<Tensor>& in) {
                                                CrossAttentionBlock b = block;
                                                b.attention.key.weight = in[2];
                                                b.source_norm.beta = in[3];
                                                const AttentionSegment seg{0, t, 0, s, AttentionMask::bidirectional()};
                                                Rng stream(1);
                                                return b.forward(in[0], in[1], std::span(&seg, 1), {2, 0.0, false},
                                                                 stream);
                                              }};
                   }});
  cases.push_back({"conv3d", [](Rng& rng) {
                     const std::size_t cin = between(rng, 1, 2), cout = between(rng, 1, 2);
                     const Triple stride{1, between(rng, 1, 2), between(rng, 1, 2)};
                     return GradCheckInstance{
                         {random_leaf({1, cin, 2, 3, 3}, rng), random_leaf({cout, cin, 2, 2, 2}, rng),
                          random_leaf({cout}, rng)},
                         [stride](const std::vector<Tensor>& in) {
                           return conv3d(in[0], in[1], in[2], stride, {0, 1, 1});
                         }};
                   }});
  cases.push_back({"adaptive_avg_pool3d", [](Rng& rng) {
                     const std::size_t t = between(rng, 1, 3), h = between(rng, 2, 4), w = between(rng, 2, 4);
                     const Triple out{between(rng, 1, t), between(rng, 1, h), between(rng, 1, w)};
                     return GradCheckInstance{{random_leaf({1, 2, t, h, w}, rng)},
                                              [out](const std::vector<Tensor>& in) {
                                                return adaptive_avg_pool3d(in[0], out);
                                              }};
                   }});
  cases.push_back({"time_slice", [](Rng& rng) {
                     const std::size_t t = between(rng, 1, 4);
                     const std::size_t pick = rng.below(t);
                     return GradCheckInstance{{random_leaf({2, 2, t, 2, 3}, rng)},
                                              [pick](const std::vector<Tensor>& in) {
                                                return time_slice(in[0], pick);
                                              }};
                   }});
  cases.push_back({"channels_to_tokens", [](Rng& rng) {
                     return GradCheckInstance{{random_leaf({2, between(rng, 1, 3), 2, between(rng, 1, 3)}, rng)},
                                              [](const std::vector<Tensor>& in) {
                                                return channels_to_tokens(in[0]);
                                              }};
                   }});
  cases.push_back({"roi_align", [](Rng& rng) {
                     std::vector<RoiBox> boxes(between(rng, 1, 3));
                     for (auto& b : boxes) {
                       b.batch = rng.below(2);
                       b.x1 = rng.uniform(0.0, 0.6);
                       b.x2 = b.x1 + rng.uniform(0.1, 0.4);
                       b.y1 = rng.uniform(0.0, 0.6);
                       b.y2 = b.y1 + rng.uniform(0.1, 0.4);
                     }
                     return GradCheckInstance{{random_leaf({2, 2, 4, 4}, rng)},
                                              [boxes](const std::vector<Tensor>& in) {
                                                return roi_align(in[0], boxes);
                                              }};
                   }});
  cases.push_back({"composite_chain", [](Rng& rng) {
                     const std::size_t n = between(rng, 1, 3), d = 4, c = 3;
                     std::vector<std::size_t> tg(n);
                     for (auto& t : tg) t = rng.below(c);
                     return GradCheckInstance{
                         {random_leaf({n, d}, rng), random_leaf({d, d}, rng), random_leaf({d}, rng),
                          random_leaf({d}, rng), random_leaf({d, c}, rng)},
                         [tg](const std::vector<Tensor>& in) {
                           Tensor h = gelu(linear(in[0], in[1], Tensor()));
                           h = layer_norm(h, in[2], in[3]);
                           return cross_entropy(matmul(stlt::tanh(h), in[4]), tg);
                         }};
                   }});
  return cases;
}

}  // namespace stlt
