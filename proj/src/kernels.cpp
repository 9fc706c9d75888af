#include "stlt/kernels.hpp"

#include <vector>

namespace stlt::kernels {

namespace {

constexpr std::size_t kRowBlock = 4;
constexpr std::size_t kColBlock = 256;

// One row of C accumulating over all of k. The j loop vectorizes; each
// element still sees its k terms in order.
inline void row_acc(const double* a_row, const double* b, double* c_row, std::size_t k,
                    std::size_t n, std::size_t j0, std::size_t j1) {
  for (std::size_t p = 0; p < k; ++p) {
    const double av = a_row[p];
    const double* b_row = b + p * n;
    for (std::size_t j = j0; j < j1; ++j) c_row[j] += av * b_row[j];
  }
}

}  // namespace

void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t j0 = 0; j0 < n; j0 += kColBlock) {
    const std::size_t j1 = j0 + kColBlock < n ? j0 + kColBlock : n;
    std::size_t i = 0;
    for (; i + kRowBlock <= m; i += kRowBlock) {
      const double* a0 = a + (i + 0) * k;
      const double* a1 = a + (i + 1) * k;
      const double* a2 = a + (i + 2) * k;
      const double* a3 = a + (i + 3) * k;
      double* c0 = c + (i + 0) * n;
      double* c1 = c + (i + 1) * n;
      double* c2 = c + (i + 2) * n;
      double* c3 = c + (i + 3) * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
        const double* br = b + p * n;
#pragma GCC ivdep
        for (std::size_t j = j0; j < j1; ++j) {
          const double bv = br[j];
          c0[j] += v0 * bv;
          c1[j] += v1 * bv;
          c2[j] += v2 * bv;
          c3[j] += v3 * bv;
        }
      }
    }
    for (; i < m; ++i) row_acc(a + i * k, b, c + i * n, k, n, j0, j1);
  }
}

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t i1 = i0 + kTile < rows ? i0 + kTile : rows;
      const std::size_t j1 = j0 + kTile < cols ? j0 + kTile : cols;
      for (std::size_t i = i0; i < i1; ++i)
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
    }
  }
}

void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::vector<double> bt(k * n);
  transpose(b, bt.data(), n, k);
  gemm_acc(a, bt.data(), c, m, k, n);
}

void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  std::vector<double> at(m * k);
  transpose(a, at.data(), k, m);
  gemm_acc(at.data(), b, c, m, k, n);
}

}  // namespace stlt::kernels
