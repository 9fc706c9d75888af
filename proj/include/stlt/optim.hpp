#pragma once

#include <cstddef>
#include <vector>

#include "stlt/tensor.hpp"

namespace stlt {

struct AdamSettings {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Adaptive-moment optimizer. Moment buffers are allocated per parameter and
// stay congruent with it.
class Adam {
 public:
  Adam(std::vector<Tensor> params, AdamSettings settings = {});

  // Applies one update from the accumulated gradients, then clears them.
  // Throws if any parameter has no gradient.
  void step();
  void zero_grad();

  std::size_t step_count() const { return steps_; }
  const AdamSettings& settings() const { return settings_; }
  void set_learning_rate(double lr) { settings_.learning_rate = lr; }
  const std::vector<Tensor>& params() const { return params_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<Tensor> params_;
  AdamSettings settings_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::size_t steps_ = 0;
};

}  // namespace stlt
