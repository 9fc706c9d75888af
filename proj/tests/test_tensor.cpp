#include <cmath>
#include <cstring>
#include <sstream>

#include "doctest.h"
#include "stlt/checkpoint.hpp"
#include "stlt/conv.hpp"
#include "stlt/errors.hpp"
#include "stlt/nn.hpp"
#include "stlt/ops.hpp"
#include "stlt/optim.hpp"

using namespace stlt;

namespace {

Tensor vec(std::vector<double> v, bool rg = false) {
  const std::size_t n = v.size();
  return Tensor({n}, std::move(v), rg);
}

}  // namespace

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({0}, {}), ShapeError);
  Tensor t = Tensor::zeros({2, 3}, true);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK_FALSE(t.has_grad());
}

TEST_CASE("softmax examples") {
  auto s = softmax(vec({0.0, 0.0}));
  CHECK(s.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  for (double c : {-3.0, 0.0, 7.5, 1e6}) {
    auto u = softmax(vec({c, c, c}));
    for (double x : u.values()) CHECK(std::abs(x - 1.0 / 3.0) < 1e-12);
  }
  auto p = softmax(vec({1.0, 2.0, 3.0}));
  // Direct exp-normalize oracle.
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(p.at(i) - std::exp(i + 1.0) / z) < 1e-12);
  CHECK(std::abs(p.at(0) - 0.09003) < 1e-5);
  CHECK(std::abs(p.at(1) - 0.24473) < 1e-5);
  CHECK(std::abs(p.at(2) - 0.66524) < 1e-5);
  CHECK_THROWS_AS(softmax(vec({1.0, NAN})), NumericalError);
  CHECK_THROWS_AS(softmax(vec({INFINITY, 0.0})), NumericalError);
}

TEST_CASE("softmax is shift invariant and sums to one") {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(9);
    std::vector<double> v(n), w(n);
    const double c = rng.uniform(-50, 50);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = rng.uniform(-5, 5);
      w[i] = v[i] + c;
    }
    auto a = softmax(vec(v));
    auto b = softmax(vec(w));
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(a.at(i) >= 0.0);
      total += a.at(i);
      CHECK(std::abs(a.at(i) - b.at(i)) < 1e-12);
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  auto gamma = Tensor::full({3}, 1.0);
  auto beta = Tensor::zeros({3});
  auto z = layer_norm(Tensor({1, 3}, {4.0, 4.0, 4.0}), gamma, beta);
  for (double x : z.values()) CHECK(x == 0.0);
  auto two = layer_norm(Tensor({1, 2}, {1.0, -1.0}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 1e-12);
  CHECK(std::abs(two.at(0) - 1.0) < 1e-9);
  CHECK(std::abs(two.at(1) + 1.0) < 1e-9);
  auto y = layer_norm(Tensor({1, 3}, {1.0, 2.0, 3.0}), gamma, beta, 1e-9);
  CHECK(std::abs(y.at(0) + 1.22474) < 1e-4);
  CHECK(std::abs(y.at(1)) < 1e-12);
  CHECK(std::abs(y.at(2) - 1.22474) < 1e-4);
}

TEST_CASE("dropout contract") {
  Rng rng(3);
  auto x = Tensor({2, 3}, {1, 2, 3, 4, 5, 6});
  auto eval = dropout(x, 0.5, false, rng);
  for (std::size_t i = 0; i < 6; ++i) CHECK(eval.at(i) == x.at(i));
  auto zero_rate = dropout(x, 0.0, true, rng);
  for (std::size_t i = 0; i < 6; ++i) CHECK(zero_rate.at(i) == x.at(i));
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), ConfigError);
  CHECK_THROWS_AS(dropout(x, -0.1, true, rng), ConfigError);

  // Monte-Carlo: inverted scaling keeps the expected mean.
  Rng mc(2024);
  double total = 0.0;
  const int reps = 10000;
  for (int r = 0; r < reps; ++r) {
    auto y = dropout(x, 0.5, true, mc);
    for (double v : y.values()) total += v;
  }
  const double mean_out = total / (reps * 6.0);
  CHECK(std::abs(mean_out - 3.5) / 3.5 < 0.02);
}

TEST_CASE("cross_entropy examples") {
  auto uniform = cross_entropy(vec({0.3, 0.3, 0.3, 0.3}), std::vector<std::size_t>{2});
  CHECK(std::abs(uniform.item() - std::log(4.0)) < 1e-12);
  auto saturated = cross_entropy(vec({50.0, 0.0, 0.0}), std::vector<std::size_t>{0});
  CHECK(saturated.item() < 1e-20);
  CHECK_THROWS_AS(cross_entropy(vec({1.0, 2.0}), std::vector<std::size_t>{2}), DataError);

  auto logits = vec({0.2, -1.0, 2.5, 0.7}, true);
  backward(cross_entropy(logits, std::vector<std::size_t>{1}));
  auto p = softmax(vec({0.2, -1.0, 2.5, 0.7}));
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(std::abs(logits.grad()[i] - (p.at(i) - (i == 1 ? 1.0 : 0.0))) < 1e-12);
  }
}

TEST_CASE("binary_cross_entropy examples") {
  std::vector<double> t1{1.0, 0.0, 1.0};
  CHECK(std::abs(binary_cross_entropy(vec({0, 0, 0}), t1).item() - std::log(2.0)) < 1e-12);
  std::vector<double> t2{1.0, 0.0};
  CHECK(binary_cross_entropy(vec({10.0, -10.0}), t2).item() < 1e-4);
  std::vector<double> t3{1.0, 1.0};
  // Direct per-class sigmoid loss: mean(-log sigmoid(x)).
  const double expect = 0.5 * (std::log1p(std::exp(-0.5)) + std::log1p(std::exp(0.3)));
  const double got = binary_cross_entropy(vec({0.5, -0.3}), t3).item();
  CHECK(std::abs(got - expect) < 1e-12);
  CHECK(std::abs(got - 0.665) < 1e-3);
  std::vector<double> bad{0.5, 1.0};
  CHECK_THROWS_AS(binary_cross_entropy(vec({0.0, 0.0}), bad), DataError);
}

TEST_CASE("backward basics") {
  auto x = Tensor({2, 2}, {1, 2, 3, 4}, true);
  backward(sum(x));
  for (double g : x.grad()) CHECK(g == 1.0);

  auto nonscalar = Tensor({2}, {1, 2}, true);
  CHECK_THROWS_AS(backward(scale(nonscalar, 2.0)), ShapeError);

  // sum(A B): dA = ones * B^T, checked against central differences.
  std::vector<double> av{0.1, -0.4, 0.7, 1.2, 0.3, -0.9};
  std::vector<double> bv{0.5, -1.1, 0.2, 0.8, -0.6, 0.4};
  auto a = Tensor({2, 3}, av, true);
  auto b = Tensor({3, 2}, bv, true);
  backward(sum(matmul(a, b)));
  auto loss_at = [&](std::vector<double> aa) {
    return sum(matmul(Tensor({2, 3}, aa), Tensor({3, 2}, bv))).item();
  };
  for (std::size_t i = 0; i < 6; ++i) {
    auto up = av, down = av;
    up[i] += 1e-5;
    down[i] -= 1e-5;
    const double fd = (loss_at(up) - loss_at(down)) / 2e-5;
    CHECK(std::abs(a.grad()[i] - fd) < 1e-8);
    const std::size_t k = i % 3;
    CHECK(std::abs(a.grad()[i] - (bv[k * 2] + bv[k * 2 + 1])) < 1e-12);
  }
}

TEST_CASE("backward visits shared nodes once") {
  auto x = Tensor({3}, {1, 2, 3}, true);
  auto y = scale(x, 2.0);
  // y feeds two consumers; its backward must still run once.
  backward(sum(add(y, mul(y, y))));
  for (std::size_t i = 0; i < 3; ++i) {
    const double xi = x.at(i);
    CHECK(std::abs(x.grad()[i] - (2.0 + 8.0 * xi)) < 1e-12);
  }
}

TEST_CASE("no-grad guard suppresses history") {
  auto x = Tensor({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = scale(x, 3.0);
  }
  CHECK_FALSE(y.requires_grad());
  CHECK(scale(x, 3.0).requires_grad());
}

TEST_CASE("adam optimizer") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    auto w = Tensor({3}, {0.5, -1.0, 2.0}, true);
    Adam opt({w});
    w.mutable_grad();
    opt.step();
    CHECK(w.at(0) == 0.5);
    CHECK(w.at(1) == -1.0);
    CHECK(w.at(2) == 2.0);
    CHECK_FALSE(w.has_grad());
  }
  SUBCASE("one step descends w^2") {
    auto w = Tensor({1}, {1.0}, true);
    Adam opt({w}, {0.1});
    backward(sum(mul(w, w)));
    opt.step();
    CHECK(w.at(0) * w.at(0) < 1.0);
  }
  SUBCASE("quadratic converges to its analytic optimum") {
    // f(a, b) = (a - 3)^2 + 2 (b + 1)^2, optimum (3, -1).
    auto w = Tensor({2}, {0.0, 0.0}, true);
    Adam opt({w}, {0.1});
    const auto target = Tensor({2}, {3.0, -1.0});
    const auto weights = Tensor({2}, {1.0, 2.0});
    for (int i = 0; i < 200; ++i) {
      auto d = sub(w, target);
      backward(sum(mul(weights, mul(d, d))));
      opt.step();
    }
    CHECK(std::abs(w.at(0) - 3.0) <= 1e-3);
    CHECK(std::abs(w.at(1) + 1.0) <= 1e-3);
  }
  SUBCASE("missing gradient is an error") {
    auto w = Tensor({1}, {1.0}, true);
    Adam opt({w});
    CHECK_THROWS_AS(opt.step(), Error);
  }
}

TEST_CASE("checkpoint container round-trip is bit exact") {
  Rng rng(5);
  Container c;
  c.texts.push_back({"__meta__", R"({"width": 8, "name": "café"})"});
  c.tensors.push_back({"a.weight", {2, 3}, {1.0 / 3.0, -0.0, 1e-310, 6.02e23, -7.5, NAN}});
  c.tensors.push_back({"b", {1}, {rng.normal()}});
  std::stringstream ss;
  write_container(ss, c);
  auto back = read_container(ss);
  REQUIRE(back.tensors.size() == 2);
  REQUIRE(back.texts.size() == 1);
  CHECK(back.texts[0].text == c.texts[0].text);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back.tensors[i].name == c.tensors[i].name);
    CHECK(back.tensors[i].shape == c.tensors[i].shape);
    CHECK(std::memcmp(back.tensors[i].values.data(), c.tensors[i].values.data(),
                      8 * c.tensors[i].values.size()) == 0);
  }
  std::stringstream bad("NOTACKPT");
  CHECK_THROWS_AS(read_container(bad), DataError);
}

TEST_CASE("snapshot and restore parameters") {
  Rng rng(9);
  auto l = Linear::init(3, 2, rng);
  NamedTensors named;
  l.collect("fc", named);
  const auto snap = snapshot(named);
  const auto before = parameter_hash(named);
  l.weight.mutable_values()[0] += 1.0;
  CHECK(parameter_hash(named) != before);
  restore(named, snap);
  CHECK(parameter_hash(named) == before);
  auto wrong = snap;
  wrong[0].shape = {2, 3};
  CHECK_THROWS_AS(restore(named, wrong), DataError);
}

TEST_CASE("conv3d matches a direct loop") {
  Rng rng(17);
  auto x = normal_tensor({2, 2, 3, 5, 4}, 1.0, rng);
  auto w = normal_tensor({3, 2, 2, 3, 3}, 1.0, rng);
  auto b = normal_tensor({3}, 1.0, rng);
  const Triple stride{1, 2, 2}, pad{0, 1, 1};
  auto y = conv3d(x, w, b, stride, pad);
  REQUIRE(y.shape() == Shape{2, 3, 2, 3, 2});
  auto xv = x.values();
  auto wv = w.values();
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t co = 0; co < 3; ++co)
      for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t i = 0; i < 3; ++i)
          for (std::size_t j = 0; j < 2; ++j) {
            double acc = b.at(co);
            for (std::size_t ci = 0; ci < 2; ++ci)
              for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t p = 0; p < 3; ++p)
                  for (std::size_t q = 0; q < 3; ++q) {
                    const long ih = static_cast<long>(i * 2 + p) - 1;
                    const long iw = static_cast<long>(j * 2 + q) - 1;
                    if (ih < 0 || ih >= 5 || iw < 0 || iw >= 4) continue;
                    acc += wv[(((co * 2 + ci) * 2 + a) * 3 + p) * 3 + q] *
                           xv[(((n * 2 + ci) * 3 + t + a) * 5 + ih) * 4 + iw];
                  }
            const double got = y.at((((n * 3 + co) * 2 + t) * 3 + i) * 2 + j);
            CHECK(std::abs(got - acc) < 1e-12);
          }
}

TEST_CASE("roi_align examples") {
  Rng rng(21);
  SUBCASE("full box gives the per-channel mean") {
    auto f = normal_tensor({1, 3, 5, 7}, 1.0, rng);
    const RoiBox box{0, 0.0, 0.0, 1.0, 1.0};
    auto out = roi_align(f, std::span(&box, 1));
    for (std::size_t c = 0; c < 3; ++c) {
      double m = 0.0;
      for (std::size_t i = 0; i < 35; ++i) m += f.at(c * 35 + i);
      CHECK(std::abs(out.at(c) - m / 35.0) < 1e-9);
    }
  }
  SUBCASE("box covering one cell of an integer grid map") {
    std::vector<double> v(25);
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c) v[r * 5 + c] = static_cast<double>(10 * r + c);
    auto f = Tensor({1, 1, 5, 5}, v);
    const RoiBox box{0, 2.0 / 5.0, 1.0 / 5.0, 3.0 / 5.0, 2.0 / 5.0};
    auto out = roi_align(f, std::span(&box, 1));
    CHECK(std::abs(out.at(0) - 12.0) < 1e-9);
  }
  SUBCASE("fine-grid sampling oracle") {
    auto f = normal_tensor({1, 1, 4, 4}, 1.0, rng);
    const RoiBox box{0, 0.25, 0.25, 0.75, 0.75};
    auto out = roi_align(f, std::span(&box, 1));
    // Independent bilinear sampler on a 100 x 100 midpoint grid.
    auto sample = [&](double x, double y) {
      auto clampc = [](double c, double len) { return std::min(std::max(c - 0.5, 0.0), len - 1.0); };
      const double cx = clampc(x, 4), cy = clampc(y, 4);
      const int x0 = static_cast<int>(std::floor(cx)), y0 = static_cast<int>(std::floor(cy));
      const int x1 = std::min(x0 + 1, 3), y1 = std::min(y0 + 1, 3);
      const double fx = cx - x0, fy = cy - y0;
      auto at = [&](int r, int c) { return f.at(static_cast<std::size_t>(r * 4 + c)); };
      return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
             fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
    };
    double acc = 0.0;
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 100; ++j) acc += sample(1.0 + (j + 0.5) * 0.02, 1.0 + (i + 0.5) * 0.02);
    CHECK(std::abs(out.at(0) - acc / 1e4) < 1e-6);
  }
  SUBCASE("degenerate box") {
    auto f = normal_tensor({1, 1, 4, 4}, 1.0, rng);
    const RoiBox box{0, 0.5, 0.2, 0.5, 0.6};
    CHECK_THROWS_AS(roi_align(f, std::span(&box, 1)), DataError);
  }
}

TEST_CASE("adaptive pooling averages bins") {
  auto x = Tensor({1, 1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  auto y = adaptive_avg_pool3d(x, {1, 1, 2});
  CHECK(y.at(0) == doctest::Approx((1 + 2 + 5 + 6) / 4.0));
  CHECK(y.at(1) == doctest::Approx((3 + 4 + 7 + 8) / 4.0));
}
