#include "stlt/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stlt/errors.hpp"
#include "stlt/kernels.hpp"

namespace stlt {

namespace {

using detail::Node;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

// Grad buffer of parent i, or nullptr when it does not need one.
double* parent_grad(Node& self, std::size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? p.grad_buffer().data() : nullptr;
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericalError(std::string(op) + ": non-finite input");
  }
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [dfdx](Node& self) {
    double* gx = parent_grad(self, 0);
    if (!gx) return;
    const auto& xv = self.parents[0]->value;
    for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += self.grad[i] * dfdx(xv[i], self.value[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (double* g = parent_grad(self, p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.values().begin(), a.values().end());
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
    const auto& av = self.parents[0]->value;
    const auto& bv = self.parents[1]->value;
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a}, [factor](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * factor;
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (bias.size() != d) {
    throw ShapeError("add_row: bias of size " + std::to_string(bias.size()) + " for rows of width " +
                     std::to_string(d));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  auto bv = bias.values();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += bv[j];
  return Tensor::make_result(x.shape(), std::move(out), {x, bias}, [n, d](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (double* g = parent_grad(self, 1)) {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[r * d + j];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents disagree " + shape_string(a.shape()) + " * " +
                     shape_string(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  kernels::gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
    const double* av = self.parents[0]->value.data();
    const double* bv = self.parents[1]->value.data();
    if (double* g = parent_grad(self, 0)) kernels::gemm_nt_acc(self.grad.data(), bv, g, m, n, k);
    if (double* g = parent_grad(self, 1)) kernels::gemm_tn_acc(av, self.grad.data(), g, k, m, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_matrix(weight, "linear");
  const std::size_t in = weight.dim(0), outw = weight.dim(1);
  const std::size_t n = x.rows();
  if (x.cols() != in) {
    throw ShapeError("linear: input width " + std::to_string(x.cols()) + " for weight " +
                     shape_string(weight.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias && bias.size() != outw) throw ShapeError("linear: bias size mismatch");
  std::vector<double> out(n * outw, 0.0);
  if (has_bias) {
    auto bv = bias.values();
    for (std::size_t r = 0; r < n; ++r) std::copy(bv.begin(), bv.end(), out.begin() + r * outw);
  }
  kernels::gemm_acc(x.values().data(), weight.values().data(), out.data(), n, in, outw);
  std::vector<Tensor> parents{x, weight};
  if (has_bias) parents.push_back(bias);
  return Tensor::make_result({n, outw}, std::move(out), std::move(parents),
                             [n, in, outw, has_bias](Node& self) {
                               const double* xv = self.parents[0]->value.data();
                               const double* wv = self.parents[1]->value.data();
                               const double* gy = self.grad.data();
                               if (double* g = parent_grad(self, 0))
                                 kernels::gemm_nt_acc(gy, wv, g, n, outw, in);
                               if (double* g = parent_grad(self, 1))
                                 kernels::gemm_tn_acc(xv, gy, g, in, n, outw);
                               if (has_bias) {
                                 if (double* g = parent_grad(self, 2)) {
                                   for (std::size_t r = 0; r < n; ++r)
                                     for (std::size_t j = 0; j < outw; ++j) g[j] += gy[r * outw + j];
                                 }
                               }
                             });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor softmax(const Tensor& x) {
  require_finite(x.values(), "softmax");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * c;
    double* o = out.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (o[j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= total;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [n, c](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * c;
      const double* gy = self.grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  require_finite(x.values(), "log_softmax");
  const std::size_t n = x.rows(), c = x.cols();
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < c; ++j) out[r * c + j] = row[j] - lse;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [n, c](Node& self) {
    double* g = parent_grad(self, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      const double* y = self.value.data() + r * c;
      const double* gy = self.grad.data() + r * c;
      double total = 0.0;
      for (std::size_t j = 0; j < c; ++j) total += gy[j];
      for (std::size_t j = 0; j < c; ++j) g[r * c + j] += gy[j] - std::exp(y[j]) * total;
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t n = x.rows(), d = x.cols();
  if (gamma.size() != d || beta.size() != d) {
    throw ShapeError("layer_norm: affine parameters must match row width " + std::to_string(d));
  }
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(n);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = gv[j] * h + bv[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& gv = self.parents[1]->value;
        const double* gy = self.grad.data();
        if (double* g = parent_grad(self, 1)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j] * xhat[r * d + j];
        }
        if (double* g = parent_grad(self, 2)) {
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < d; ++j) g[j] += gy[r * d + j];
        }
        if (double* g = parent_grad(self, 0)) {
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < n; ++r) {
            double mean_dh = 0.0, mean_dh_h = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gy[r * d + j] * gv[j];
              mean_dh += dh;
              mean_dh_h += dh * xhat[r * d + j];
            }
            mean_dh *= inv_d;
            mean_dh_h *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = gy[r * d + j] * gv[j];
              g[r * d + j] += inv_std[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
            }
          }
        }
      });
}

Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.uniform() < rate ? 0.0 : keep_scale;
  std::vector<double> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  return Tensor::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  return Tensor::make_result({1}, {total}, {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      const std::size_t n = self.parents[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " to " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& self) {
    if (double* g = parent_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total_rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column counts differ");
    total_rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(total_rows * d);
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result({total_rows, d}, std::move(out), std::move(parents),
                             [offsets = std::move(offsets)](Node& self) {
                               for (std::size_t p = 0; p < offsets.size(); ++p) {
                                 double* g = parent_grad(self, p);
                                 if (!g) continue;
                                 const std::size_t len = self.parents[p]->value.size();
                                 for (std::size_t i = 0; i < len; ++i) g[i] += self.grad[offsets[p] + i];
                               }
                             });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t n = parts.front().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row counts differ");
    widths.push_back(p.cols());
    total += p.cols();
  }
  std::vector<double> out(n * total);
  std::size_t col = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto v = parts[p].values();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + col);
    col += widths[p];
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make_result({n, total}, std::move(out), std::move(parents),
                             [n, total, widths = std::move(widths)](Node& self) {
                               std::size_t col = 0;
                               for (std::size_t p = 0; p < widths.size(); ++p) {
                                 if (double* g = parent_grad(self, p)) {
                                   for (std::size_t r = 0; r < n; ++r)
                                     for (std::size_t j = 0; j < widths[p]; ++j)
                                       g[r * widths[p] + j] += self.grad[r * total + col + j];
                                 }
                                 col += widths[p];
                               }
                             });
}

Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index) {
  const std::size_t n = x.rows(), d = x.cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  std::vector<double> out(index.size() * d);
  auto xv = x.values();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(xv.data() + index[i] * d, d, out.data() + i * d);
  }
  return Tensor::make_result({index.size(), d}, std::move(out), {x},
                             [d, idx = std::vector<std::size_t>(index.begin(), index.end())](
                                 Node& self) {
                               double* g = parent_grad(self, 0);
                               if (!g) return;
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < d; ++j)
                                   g[idx[i] * d + j] += self.grad[i * d + j];
                             });
}

Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets) {
  const std::size_t d = x.cols();
  if (offsets.size() < 2 || offsets.back() > x.rows()) throw ShapeError("segment_mean: bad offsets");
  const std::size_t segs = offsets.size() - 1;
  std::vector<double> out(segs * d, 0.0);
  auto xv = x.values();
  for (std::size_t s = 0; s < segs; ++s) {
    const std::size_t len = offsets[s + 1] - offsets[s];
    if (offsets[s + 1] <= offsets[s]) throw ShapeError("segment_mean: empty segment");
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t j = 0; j < d; ++j) out[s * d + j] += xv[r * d + j];
    for (std::size_t j = 0; j < d; ++j) out[s * d + j] /= static_cast<double>(len);
  }
  return Tensor::make_result({segs, d}, std::move(out), {x},
                             [d, offs = std::vector<std::size_t>(offsets.begin(), offsets.end())](
                                 Node& self) {
                               double* g = parent_grad(self, 0);
                               if (!g) return;
                               for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
                                 const double inv = 1.0 / static_cast<double>(offs[s + 1] - offs[s]);
                                 for (std::size_t r = offs[s]; r < offs[s + 1]; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                     g[r * d + j] += self.grad[s * d + j] * inv;
                               }
                             });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const std::size_t n = logits.rank() == 1 ? 1 : logits.rows();
  const std::size_t c = logits.size() / n;
  if (targets.size() != n) throw ShapeError("cross_entropy: one target per row required");
  for (std::size_t t : targets) {
    if (t >= c) {
      throw DataError("cross_entropy: target " + std::to_string(t) + " out of range for " +
                      std::to_string(c) + " classes");
    }
  }
  require_finite(logits.values(), "cross_entropy");
  auto lv = logits.values();
  std::vector<double> probs(n * c);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = lv.data() + r * c;
    const double mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += (probs[r * c + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= total;
    loss += -(row[targets[r]] - mx - std::log(total));
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result(
      {1}, {loss}, {logits},
      [n, c, probs = std::move(probs),
       tg = std::vector<std::size_t>(targets.begin(), targets.end())](Node& self) {
        double* g = parent_grad(self, 0);
        if (!g) return;
        const double s = self.grad[0] / static_cast<double>(n);
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t j = 0; j < c; ++j) {
            const double onehot = j == tg[r] ? 1.0 : 0.0;
            g[r * c + j] += s * (probs[r * c + j] - onehot);
          }
        }
      });
}

Tensor binary_cross_entropy(const Tensor& logits, std::span<const double> targets) {
  if (targets.size() != logits.size()) throw ShapeError("binary_cross_entropy: target size mismatch");
  for (double t : targets) {
    if (t != 0.0 && t != 1.0) throw DataError("binary_cross_entropy: targets must be 0 or 1");
  }
  require_finite(logits.values(), "binary_cross_entropy");
  auto lv = logits.values();
  const std::size_t n = lv.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = lv[i];
    // max(x, 0) - x*t + log(1 + exp(-|x|))
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= static_cast<double>(n);
  return Tensor::make_result(
      {1}, {loss}, {logits},
      [n, tg = std::vector<double>(targets.begin(), targets.end())](Node& self) {
        double* g = parent_grad(self, 0);
        if (!g) return;
        const auto& lv = self.parents[0]->value;
        const double s = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = lv[i];
          const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
          g[i] += s * (p - tg[i]);
        }
      });
}

}  // namespace stlt
