#include "rfvla/kernels.hpp"

namespace rfvla::kernels::detail {
namespace {

void gemm_scalar(std::size_t m, std::size_t n, std::size_t k, const double* a,
                 std::size_t lda, const double* b, std::size_t ldb, double* c,
                 std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n; ++j) {
      double s = crow[j];
      for (std::size_t p = 0; p < k; ++p) s += a[i * lda + p] * b[p * ldb + j];
      crow[j] = s;
    }
  }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

const KernelTable kScalar{Isa::scalar, gemm_scalar, axpy_scalar, dot_scalar};

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

}  // namespace rfvla::kernels::detail
