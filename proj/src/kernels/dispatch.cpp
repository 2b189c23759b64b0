#include <atomic>
#include <cstdlib>
#include <string>

#include "rfvla/errors.hpp"
#include "rfvla/kernels.hpp"

namespace rfvla::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* select_default() {
  if (const char* env = std::getenv("REFINEVLA_SIMD")) {
    if (std::string(env) == "scalar") return &detail::scalar_table();
  }
  if (supported(Isa::avx2)) return detail::avx2_table();
  return &detail::scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{select_default()};
  return current;
}

}  // namespace

bool supported(Isa isa) {
  switch (isa) {
    case Isa::scalar:
      return true;
    case Isa::avx2:
      return detail::avx2_table() != nullptr && cpu_has_avx2();
  }
  return false;
}

const KernelTable& table(Isa isa) {
  if (!supported(isa))
    throw ConfigError("kernel ISA not supported on this CPU: " + std::string(name(isa)));
  return isa == Isa::avx2 ? *detail::avx2_table() : detail::scalar_table();
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

void force(Isa isa) { slot().store(&table(isa), std::memory_order_relaxed); }

std::string_view name(Isa isa) {
  return isa == Isa::avx2 ? "avx2" : "scalar";
}

}  // namespace rfvla::kernels
