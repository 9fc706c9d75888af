#include "stlt/optim.hpp"

#include <cmath>

#include "stlt/errors.hpp"

namespace stlt {

Adam::Adam(std::vector<Tensor> params, AdamSettings settings)
    : params_(std::move(params)), settings_(settings) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw ConfigError("Adam: parameter does not require grad");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void Adam::step() {
  for (const Tensor& p : params_) {
    if (!p.has_grad()) throw Error("Adam: parameter is missing its gradient");
  }
  ++steps_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    auto g = p.grad();
    auto w = p.mutable_values();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = b1 * m[j] + (1.0 - b1) * g[j];
      v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= settings_.learning_rate * mhat / (std::sqrt(vhat) + settings_.epsilon);
    }
  }
  zero_grad();
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

}  // namespace stlt
