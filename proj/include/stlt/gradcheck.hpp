#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "stlt/rng.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

// One randomly drawn problem: leaf inputs and a forward function. Inputs that
// require grad are checked.
struct GradCheckInstance {
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
};

struct GradCheckCase {
  std::string name;
  std::function<GradCheckInstance(Rng&)> make;
};

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  double worst_relative_error = 0.0;
  bool passed = false;
};

// Compares the reverse-mode gradient of sum(forward(inputs) * R), R a fixed
// random weighting, against central differences. The error of one input is
// ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8); the
// instance's error is the worst over its inputs.
double gradient_relative_error(GradCheckInstance& instance, Rng& rng, double step = 1e-5);

GradCheckResult run_gradcheck_case(const GradCheckCase& c, std::uint64_t seed, std::size_t instances,
                                   double tolerance = 1e-4, double step = 1e-5);

// Cases covering every differentiable tensor-engine operation.
std::vector<GradCheckCase> tensor_engine_gradcheck_cases();

}  // namespace stlt
