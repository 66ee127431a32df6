#pragma once

#include <cstddef>
#include <vector>

// Data-parallel float32 kernels used by the tensor layer. Every kernel has a
// scalar reference implementation plus SIMD variants (AVX2 on x86-64, NEON on
// aarch64). The active table is picked once at startup from CPU capabilities
// and can be forced with LPRNET_KERNELS=scalar|avx2|neon.
//
// Determinism contract: for a fixed table, every output element is computed
// with a fixed accumulation order, so repeated calls are bit-identical.
// Different tables may round differently (FMA); they agree within tolerance,
// which tests/test_kernels.cpp checks on random inputs.

namespace lprnet::kern {

// c (m x n) = a (m x k) * b (k x n), all row-major with leading dimensions.
// accumulate=false overwrites c, accumulate=true adds into it.
using GemmFn = void (*)(int m, int n, int k, const float* a, int lda,
                        const float* b, int ldb, float* c, int ldc,
                        bool accumulate);

// c (m x n) = a (m x k) * b^T, where b is (n x k) row-major.
using GemmNtFn = void (*)(int m, int n, int k, const float* a, int lda,
                          const float* b, int ldb, float* c, int ldc,
                          bool accumulate);

using Map1Fn = void (*)(const float* x, float* y, std::size_t n);
using Map2Fn = void (*)(const float* a, const float* b, float* y,
                        std::size_t n);
// y = x where x > 0 else 0; relu_bwd: y = g where x > 0 else 0.
using ReluBwdFn = void (*)(const float* x, const float* g, float* y,
                           std::size_t n);
using AxpyFn = void (*)(float alpha, const float* x, float* y, std::size_t n);
using ScaleFn = void (*)(const float* x, float alpha, float* y,
                         std::size_t n);
using AddScalarFn = void (*)(const float* x, float s, float* y,
                             std::size_t n);
using ReduceFn = float (*)(const float* x, std::size_t n);

struct KernelTable {
  const char* name;
  GemmFn gemm;
  GemmNtFn gemm_nt;
  Map2Fn add;
  Map2Fn mul;
  Map2Fn max;
  Map1Fn relu;
  ReluBwdFn relu_bwd;
  AxpyFn axpy;
  ScaleFn scale;
  AddScalarFn add_scalar;
  ReduceFn reduce_sum;
  ReduceFn reduce_max;
};

const KernelTable& scalar_kernels();

#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_kernels();
bool cpu_has_avx2_fma();
#endif
#if defined(__aarch64__)
const KernelTable& neon_kernels();
#endif

// Best table for this CPU, honoring the LPRNET_KERNELS env override.
// Resolved once; stable for the lifetime of the process.
const KernelTable& active_kernels();

// All tables runnable on this CPU (scalar first). Used by equivalence tests.
std::vector<const KernelTable*> available_kernels();

// Generic reference loops, shared by the scalar table (T=float) and by the
// float64 instantiation of the tensor/layer templates used in gradient tests.
template <class T>
void gemm_ref(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
              T* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    if (!accumulate) {
      for (int j = 0; j < n; ++j) crow[j] = T(0);
    }
    const T* arow = a + static_cast<std::size_t>(i) * lda;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<std::size_t>(p) * ldb;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
void gemm_nt_ref(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
                 T* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * lda;
    T* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * ldb;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

}  // namespace lprnet::kern
