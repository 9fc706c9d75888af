#pragma once

#include <cstddef>

// Raw dense kernels shared by the differentiable ops. Every output element
// accumulates its products in ascending inner-index order regardless of the
// matrix extents, so a row's result never depends on how many other rows are
// in the same call.
namespace stlt::kernels {

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n);

// C[m x n] += A[m x k] * B^T, with B stored as [n x k].
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

// C[m x n] += A^T * B, with A stored as [k x m] and B as [k x n].
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n);

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols);

}  // namespace stlt::kernels
