#include "rfvla/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)
#include <immintrin.h>
#define RFVLA_HAVE_AVX2_TU 1
#endif

namespace rfvla::kernels::detail {

#ifdef RFVLA_HAVE_AVX2_TU
namespace {

#define RFVLA_AVX2 __attribute__((target("avx2,fma")))

// 4 rows x 8 columns of C held in eight ymm accumulators.
RFVLA_AVX2 inline void tile_4x8(std::size_t k, const double* a, std::size_t lda,
                     const double* b, std::size_t ldb, double* c,
                     std::size_t ldc) {
  __m256d c00 = _mm256_loadu_pd(c), c01 = _mm256_loadu_pd(c + 4);
  __m256d c10 = _mm256_loadu_pd(c + ldc), c11 = _mm256_loadu_pd(c + ldc + 4);
  __m256d c20 = _mm256_loadu_pd(c + 2 * ldc), c21 = _mm256_loadu_pd(c + 2 * ldc + 4);
  __m256d c30 = _mm256_loadu_pd(c + 3 * ldc), c31 = _mm256_loadu_pd(c + 3 * ldc + 4);
  for (std::size_t p = 0; p < k; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * ldb);
    const __m256d b1 = _mm256_loadu_pd(b + p * ldb + 4);
    __m256d av = _mm256_broadcast_sd(a + p);
    c00 = _mm256_fmadd_pd(av, b0, c00);
    c01 = _mm256_fmadd_pd(av, b1, c01);
    av = _mm256_broadcast_sd(a + lda + p);
    c10 = _mm256_fmadd_pd(av, b0, c10);
    c11 = _mm256_fmadd_pd(av, b1, c11);
    av = _mm256_broadcast_sd(a + 2 * lda + p);
    c20 = _mm256_fmadd_pd(av, b0, c20);
    c21 = _mm256_fmadd_pd(av, b1, c21);
    av = _mm256_broadcast_sd(a + 3 * lda + p);
    c30 = _mm256_fmadd_pd(av, b0, c30);
    c31 = _mm256_fmadd_pd(av, b1, c31);
  }
  _mm256_storeu_pd(c, c00);
  _mm256_storeu_pd(c + 4, c01);
  _mm256_storeu_pd(c + ldc, c10);
  _mm256_storeu_pd(c + ldc + 4, c11);
  _mm256_storeu_pd(c + 2 * ldc, c20);
  _mm256_storeu_pd(c + 2 * ldc + 4, c21);
  _mm256_storeu_pd(c + 3 * ldc, c30);
  _mm256_storeu_pd(c + 3 * ldc + 4, c31);
}

// One row of C, four columns.
RFVLA_AVX2 inline void tile_1x4(std::size_t k, const double* a, const double* b,
                     std::size_t ldb, double* c) {
  __m256d acc = _mm256_loadu_pd(c);
  for (std::size_t p = 0; p < k; ++p)
    acc = _mm256_fmadd_pd(_mm256_broadcast_sd(a + p), _mm256_loadu_pd(b + p * ldb), acc);
  _mm256_storeu_pd(c, acc);
}

RFVLA_AVX2 inline void tile_1x1(std::size_t k, const double* a, const double* b,
                     std::size_t ldb, double* c) {
  double s = *c;
  for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p * ldb];
  *c = s;
}

RFVLA_AVX2 void gemm_avx2(
    std::size_t m, std::size_t n, std::size_t k, const double* a,
    std::size_t lda, const double* b, std::size_t ldb, double* c,
    std::size_t ldc) {
  const std::size_t m4 = m - m % 4;
  const std::size_t n8 = n - n % 8;
  const std::size_t n4 = n - n % 4;
  for (std::size_t i = 0; i < m4; i += 4) {
    for (std::size_t j = 0; j < n8; j += 8)
      tile_4x8(k, a + i * lda, lda, b + j, ldb, c + i * ldc + j, ldc);
    for (std::size_t r = 0; r < 4; ++r) {
      const double* arow = a + (i + r) * lda;
      double* crow = c + (i + r) * ldc;
      for (std::size_t j = n8; j < n4; j += 4) tile_1x4(k, arow, b + j, ldb, crow + j);
      for (std::size_t j = n4; j < n; ++j) tile_1x1(k, arow, b + j, ldb, crow + j);
    }
  }
  for (std::size_t i = m4; i < m; ++i) {
    const double* arow = a + i * lda;
    double* crow = c + i * ldc;
    for (std::size_t j = 0; j < n4; j += 4) tile_1x4(k, arow, b + j, ldb, crow + j);
    for (std::size_t j = n4; j < n; ++j) tile_1x1(k, arow, b + j, ldb, crow + j);
  }
}

RFVLA_AVX2 void axpy_avx2(std::size_t n, double alpha,
                                                   const double* x, double* y) {
  const __m256d av = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4)
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(av, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) y[i] += alpha * x[i];
}

RFVLA_AVX2 double dot_avx2(std::size_t n, const double* x,
                                                    const double* y) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i + 4), _mm256_loadu_pd(y + i + 4), acc1);
  }
  for (; i + 4 <= n; i += 4)
    acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc0);
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, _mm256_add_pd(acc0, acc1));
  double s = (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

const KernelTable kAvx2{Isa::avx2, gemm_avx2, axpy_avx2, dot_avx2};

}  // namespace

const KernelTable* avx2_table() { return &kAvx2; }

#else

const KernelTable* avx2_table() { return nullptr; }

#endif

}  // namespace rfvla::kernels::detail
