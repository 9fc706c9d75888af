#include "stlt/nn.hpp"

#include <cmath>
#include <cstring>

#include "stlt/ops.hpp"

namespace stlt {

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = stddev * rng.normal();
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

Linear Linear::init(std::size_t in, std::size_t out, Rng& rng, bool with_bias) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  Linear l;
  l.weight = uniform_tensor({in, out}, -limit, limit, rng, true);
  if (with_bias) l.bias = Tensor::zeros({out}, true);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".weight", weight);
  if (bias.defined()) out.emplace_back(prefix + ".bias", bias);
}

LayerNormParams LayerNormParams::init(std::size_t width) {
  return {Tensor::full({width}, 1.0, true), Tensor::zeros({width}, true)};
}

Tensor LayerNormParams::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

void LayerNormParams::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

Embedding Embedding::init(std::size_t count, std::size_t width, Rng& rng, double stddev) {
  return {normal_tensor({count, width}, stddev, rng, true)};
}

Tensor Embedding::lookup(std::span<const std::size_t> index) const { return gather_rows(table, index); }

void Embedding::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + ".table", table);
}

std::vector<Tensor> tensors_of(const NamedTensors& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& [name, t] : named) out.push_back(t);
  return out;
}

std::uint64_t parameter_hash(const NamedTensors& named) {
  std::uint64_t h = 0x243f6a8885a308d3ULL;
  for (const auto& [name, t] : named) {
    h = mix64(h ^ hash_string(name));
    for (std::size_t e : t.shape()) h = mix64(h ^ e);
    for (double v : t.values()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h = mix64(h ^ bits);
    }
  }
  return h;
}

}  // namespace stlt
