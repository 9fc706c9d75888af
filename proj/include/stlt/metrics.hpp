#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stlt/annotations.hpp"
#include "stlt/tensor.hpp"

namespace stlt {

// Fraction of rows whose label is among the k largest logits. Class j ranks
// ahead of the label l when logit_j > logit_l, or when they are equal and
// j < l. Throws ConfigError unless 1 <= k <= C, DataError on a label >= C and
// NumericalError on a non-finite logit.
double evaluate_topk(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k);

struct MapResult {
  double map = 0.0;
  std::vector<double> per_class;          // NaN for skipped classes
  std::vector<std::size_t> skipped;       // classes without a positive
};

// Mean over classes of average precision. Samples are ranked by descending
// score, ties by ascending sample index; AP averages the precision at the
// rank of every positive. `labels` is the row-major N x C multi-hot matrix.
// An all-zero label matrix raises DataError.
MapResult evaluate_map(const Tensor& scores, std::span<const double> labels);

// Single-label mode averages row softmaxes, multi-label mode elementwise
// sigmoids. Shape mismatch raises ShapeError.
Tensor ensemble(const Tensor& a, const Tensor& b, TaskMode mode);

}  // namespace stlt
