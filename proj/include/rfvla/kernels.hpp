#pragma once

// Dense double-precision kernels behind the autodiff core.
//
// Each kernel has a portable scalar reference and, where the target supports
// it, an AVX2+FMA variant. The variant is chosen once at startup from CPUID;
// setting REFINEVLA_SIMD=scalar in the environment pins the reference path.
// Variants agree with the reference to rounding (FMA contracts a*b+c), and
// each variant is deterministic on its own.

#include <cstddef>
#include <string_view>

namespace rfvla::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  // C[m x n] += A[m x k] * B[k x n], all row-major with leading dimensions.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a,
               std::size_t lda, const double* b, std::size_t ldb, double* c,
               std::size_t ldc);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  double (*dot)(std::size_t n, const double* x, const double* y);
};

bool supported(Isa isa);
const KernelTable& table(Isa isa);

// Dispatched table. Selection happens on first use.
const KernelTable& active();
// Overrides the dispatched table for the whole process; intended for tests
// and benchmarking. Throws ConfigError if the ISA is not supported here.
void force(Isa isa);

std::string_view name(Isa isa);

namespace detail {
const KernelTable& scalar_table();
const KernelTable* avx2_table();  // nullptr when not compiled in
}  // namespace detail

}  // namespace rfvla::kernels
