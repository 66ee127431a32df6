#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <string>

#include "lprnet/kernels.hpp"

namespace lprnet::kern {
namespace {

const KernelTable* pick_table() {
  if (const char* force = std::getenv("LPRNET_KERNELS")) {
    const std::string want(force);
    if (want == "scalar") return &scalar_kernels();
#if defined(__x86_64__) || defined(_M_X64)
    if (want == "avx2") {
      if (!cpu_has_avx2_fma()) {
        throw std::runtime_error("LPRNET_KERNELS=avx2 but CPU lacks AVX2/FMA");
      }
      return &avx2_kernels();
    }
#endif
#if defined(__aarch64__)
    if (want == "neon") return &neon_kernels();
#endif
    throw std::runtime_error("unknown LPRNET_KERNELS value: " + want);
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (cpu_has_avx2_fma()) return &avx2_kernels();
#endif
#if defined(__aarch64__)
  return &neon_kernels();
#endif
  return &scalar_kernels();
}

}  // namespace

const KernelTable& active_kernels() {
  static const KernelTable* table = pick_table();
  return *table;
}

std::vector<const KernelTable*> available_kernels() {
  std::vector<const KernelTable*> out{&scalar_kernels()};
#if defined(__x86_64__) || defined(_M_X64)
  if (cpu_has_avx2_fma()) out.push_back(&avx2_kernels());
#endif
#if defined(__aarch64__)
  out.push_back(&neon_kernels());
#endif
  return out;
}

}  // namespace lprnet::kern
