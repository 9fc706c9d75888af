#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "stlt/rng.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

// Parameters are exposed as (name, handle) pairs. Handles share storage with
// the owning weights, so writing through them updates the model.
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// y = x * weight + bias, weight stored [in x out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear init(std::size_t in, std::size_t out, Rng& rng, bool with_bias = true);
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;

  static LayerNormParams init(std::size_t width);
  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Lookup table; equivalent to a bias-free linear map of a one-hot index.
struct Embedding {
  Tensor table;

  static Embedding init(std::size_t count, std::size_t width, Rng& rng, double stddev = 0.02);
  Tensor lookup(std::span<const std::size_t> index) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

Tensor uniform_tensor(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false);
Tensor normal_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad = false);

std::vector<Tensor> tensors_of(const NamedTensors& named);
// Order-sensitive hash over names, shapes and raw bits of the values.
std::uint64_t parameter_hash(const NamedTensors& named);

}  // namespace stlt
