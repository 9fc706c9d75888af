#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stlt/rng.hpp"
#include "stlt/tensor.hpp"

// Differentiable tensor operations. Matrices are rank-2 row-major tensors;
// "row-wise" ops treat any tensor as [rows() x cols()].
namespace stlt {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// x[N x d] + bias[d] broadcast over rows.
Tensor add_row(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);
// x[N x in] * weight[in x out] + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

Tensor relu(const Tensor& x);
// Exact GELU, x * Phi(x).
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);

// Row-wise softmax with max subtraction. Throws NumericalError on
// non-finite input.
Tensor softmax(const Tensor& x);
Tensor log_softmax(const Tensor& x);

// Row-wise normalization to zero mean and unit population variance, then
// gamma * xhat + beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Inverted dropout. Evaluation mode (training == false) returns `x` itself.
Tensor dropout(const Tensor& x, double rate, bool training, Rng& rng);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
// Stacks matrices with equal column counts.
Tensor concat_rows(std::span<const Tensor> parts);
// Joins matrices with equal row counts side by side.
Tensor concat_cols(std::span<const Tensor> parts);
// out[i] = x[index[i]]; repeated indices accumulate in backward.
Tensor gather_rows(const Tensor& x, std::span<const std::size_t> index);
// Mean of consecutive row ranges [offsets[s], offsets[s+1]).
Tensor segment_mean(const Tensor& x, std::span<const std::size_t> offsets);

// Mean over rows of -log softmax(logits)[target]. A rank-1 tensor is one row.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
// Mean over all entries of the per-class sigmoid cross-entropy. Targets must
// be 0 or 1 and congruent with logits.
Tensor binary_cross_entropy(const Tensor& logits, std::span<const double> targets);

}  // namespace stlt
