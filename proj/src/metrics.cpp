#include "stlt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stlt/errors.hpp"

namespace stlt {

namespace {

void check_matrix(const Tensor& x, const char* what) {
  if (x.rank() != 2) throw ShapeError(std::string(what) + ": expected an N x C matrix");
  for (double v : x.values()) {
    if (!std::isfinite(v)) throw NumericalError(std::string(what) + ": non-finite score");
  }
}

}  // namespace

double evaluate_topk(const Tensor& logits, std::span<const std::size_t> labels, std::size_t k) {
  check_matrix(logits, "evaluate_topk");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (k < 1 || k > c) throw ConfigError("evaluate_topk: k must lie in [1, C]");
  if (labels.size() != n) throw ShapeError("evaluate_topk: one label per row");
  if (n == 0) throw DataError("evaluate_topk: no samples");
  const auto v = logits.values();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t l = labels[i];
    if (l >= c) throw DataError("evaluate_topk: label " + std::to_string(l) + " >= class count");
    const double* row = v.data() + i * c;
    std::size_t ahead = 0;
    for (std::size_t j = 0; j < c; ++j) {
      if (row[j] > row[l] || (row[j] == row[l] && j < l)) ++ahead;
    }
    if (ahead < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

MapResult evaluate_map(const Tensor& scores, std::span<const double> labels) {
  check_matrix(scores, "evaluate_map");
  const std::size_t n = scores.dim(0), c = scores.dim(1);
  if (labels.size() != n * c) throw ShapeError("evaluate_map: label matrix must match the scores");
  const auto v = scores.values();
  MapResult out;
  out.per_class.assign(c, std::nan(""));
  std::vector<std::size_t> order(n);
  double total = 0.0;
  std::size_t included = 0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t positives = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double y = labels[i * c + k];
      if (y != 0.0 && y != 1.0) throw DataError("evaluate_map: labels must be 0 or 1");
      positives += y == 1.0;
    }
    if (positives == 0) {
      out.skipped.push_back(k);
      continue;
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a * c + k] > v[b * c + k]; });
    double ap = 0.0;
    std::size_t seen = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (labels[order[r] * c + k] == 1.0) {
        ++seen;
        ap += static_cast<double>(seen) / static_cast<double>(r + 1);
      }
    }
    out.per_class[k] = ap / static_cast<double>(positives);
    total += out.per_class[k];
    ++included;
  }
  if (included == 0) throw DataError("evaluate_map: the label matrix has no positives");
  out.map = total / static_cast<double>(included);
  return out;
}

Tensor ensemble(const Tensor& a, const Tensor& b, TaskMode mode) {
  check_matrix(a, "ensemble");
  check_matrix(b, "ensemble");
  if (a.shape() != b.shape()) throw ShapeError("ensemble: score matrices differ in shape");
  const std::size_t n = a.dim(0), c = a.dim(1);
  std::vector<double> out(n * c);
  auto normalize = [&](std::span<const double> x, std::vector<double>& dst) {
    dst.assign(x.begin(), x.end());
    if (mode == TaskMode::multi_label) {
      for (double& s : dst) s = 1.0 / (1.0 + std::exp(-s));
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      double* row = dst.data() + i * c;
      const double m = *std::max_element(row, row + c);
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) z += (row[j] = std::exp(row[j] - m));
      for (std::size_t j = 0; j < c; ++j) row[j] /= z;
    }
  };
  std::vector<double> pa, pb;
  normalize(a.values(), pa);
  normalize(b.values(), pb);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * (pa[i] + pb[i]);
  return Tensor({n, c}, std::move(out));
}

}  // namespace stlt
