#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <algorithm>
#include <cstddef>
#include <limits>

#include "lprnet/kernels.hpp"

namespace lprnet::kern {
namespace {

// 4x16 register-blocked GEMM: four rows of A broadcast against two ymm-wide
// column strips of B, accumulated in 8 ymm registers. k is the inner loop so
// each output element keeps one fixed accumulation order.
template <int ROWS>
inline void gemm_block16(int n0, int k, const float* a, int lda,
                         const float* b, int ldb, float* c, int ldc,
                         bool accumulate, int j) {
  __m256 acc0[ROWS], acc1[ROWS];
  for (int r = 0; r < ROWS; ++r) {
    if (accumulate) {
      acc0[r] = _mm256_loadu_ps(c + static_cast<std::size_t>(r) * ldc + j);
      acc1[r] = _mm256_loadu_ps(c + static_cast<std::size_t>(r) * ldc + j + 8);
    } else {
      acc0[r] = _mm256_setzero_ps();
      acc1[r] = _mm256_setzero_ps();
    }
  }
  (void)n0;
  for (int p = 0; p < k; ++p) {
    const float* brow = b + static_cast<std::size_t>(p) * ldb + j;
    const __m256 b0 = _mm256_loadu_ps(brow);
    const __m256 b1 = _mm256_loadu_ps(brow + 8);
    for (int r = 0; r < ROWS; ++r) {
      const __m256 av =
          _mm256_set1_ps(a[static_cast<std::size_t>(r) * lda + p]);
      acc0[r] = _mm256_fmadd_ps(av, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_ps(av, b1, acc1[r]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    _mm256_storeu_ps(c + static_cast<std::size_t>(r) * ldc + j, acc0[r]);
    _mm256_storeu_ps(c + static_cast<std::size_t>(r) * ldc + j + 8, acc1[r]);
  }
}

template <int ROWS>
inline void gemm_block8(int k, const float* a, int lda, const float* b,
                        int ldb, float* c, int ldc, bool accumulate, int j) {
  __m256 acc[ROWS];
  for (int r = 0; r < ROWS; ++r) {
    acc[r] = accumulate
                 ? _mm256_loadu_ps(c + static_cast<std::size_t>(r) * ldc + j)
                 : _mm256_setzero_ps();
  }
  for (int p = 0; p < k; ++p) {
    const __m256 bv = _mm256_loadu_ps(b + static_cast<std::size_t>(p) * ldb + j);
    for (int r = 0; r < ROWS; ++r) {
      const __m256 av =
          _mm256_set1_ps(a[static_cast<std::size_t>(r) * lda + p]);
      acc[r] = _mm256_fmadd_ps(av, bv, acc[r]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    _mm256_storeu_ps(c + static_cast<std::size_t>(r) * ldc + j, acc[r]);
  }
}

template <int ROWS>
inline void gemm_tail(int n, int k, const float* a, int lda, const float* b,
                      int ldb, float* c, int ldc, bool accumulate, int j0) {
  for (int r = 0; r < ROWS; ++r) {
    for (int j = j0; j < n; ++j) {
      float acc =
          accumulate ? c[static_cast<std::size_t>(r) * ldc + j] : 0.0f;
      for (int p = 0; p < k; ++p) {
        acc += a[static_cast<std::size_t>(r) * lda + p] *
               b[static_cast<std::size_t>(p) * ldb + j];
      }
      c[static_cast<std::size_t>(r) * ldc + j] = acc;
    }
  }
}

template <int ROWS>
inline void gemm_rows(int n, int k, const float* a, int lda, const float* b,
                      int ldb, float* c, int ldc, bool accumulate) {
  int j = 0;
  for (; j + 16 <= n; j += 16) {
    gemm_block16<ROWS>(n, k, a, lda, b, ldb, c, ldc, accumulate, j);
  }
  for (; j + 8 <= n; j += 8) {
    gemm_block8<ROWS>(k, a, lda, b, ldb, c, ldc, accumulate, j);
  }
  if (j < n) gemm_tail<ROWS>(n, k, a, lda, b, ldb, c, ldc, accumulate, j);
}

void gemm_avx2(int m, int n, int k, const float* a, int lda, const float* b,
               int ldb, float* c, int ldc, bool accumulate) {
  int i = 0;
  for (; i + 4 <= m; i += 4) {
    gemm_rows<4>(n, k, a + static_cast<std::size_t>(i) * lda, lda, b, ldb,
                 c + static_cast<std::size_t>(i) * ldc, ldc, accumulate);
  }
  const int rem = m - i;
  const float* arow = a + static_cast<std::size_t>(i) * lda;
  float* crow = c + static_cast<std::size_t>(i) * ldc;
  switch (rem) {
    case 3: gemm_rows<3>(n, k, arow, lda, b, ldb, crow, ldc, accumulate); break;
    case 2: gemm_rows<2>(n, k, arow, lda, b, ldb, crow, ldc, accumulate); break;
    case 1: gemm_rows<1>(n, k, arow, lda, b, ldb, crow, ldc, accumulate); break;
    default: break;
  }
}

// Dot-product kernel: 8-lane partial sums over k, then one horizontal add.
inline float hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_add_ps(s, _mm_movehl_ps(s, s));
  s = _mm_add_ss(s, _mm_shuffle_ps(s, s, 1));
  return _mm_cvtss_f32(s);
}

void gemm_nt_avx2(int m, int n, int k, const float* a, int lda, const float* b,
                  int ldb, float* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * lda;
    float* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * ldb;
      // four independent accumulator chains to hide FMA latency
      __m256 acc0 = _mm256_setzero_ps();
      __m256 acc1 = _mm256_setzero_ps();
      __m256 acc2 = _mm256_setzero_ps();
      __m256 acc3 = _mm256_setzero_ps();
      int p = 0;
      for (; p + 32 <= k; p += 32) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p),
                               _mm256_loadu_ps(brow + p), acc0);
        acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p + 8),
                               _mm256_loadu_ps(brow + p + 8), acc1);
        acc2 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p + 16),
                               _mm256_loadu_ps(brow + p + 16), acc2);
        acc3 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p + 24),
                               _mm256_loadu_ps(brow + p + 24), acc3);
      }
      for (; p + 8 <= k; p += 8) {
        acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(arow + p),
                               _mm256_loadu_ps(brow + p), acc0);
      }
      float tail = 0.0f;
      for (; p < k; ++p) tail += arow[p] * brow[p];
      const float dot =
          hsum(_mm256_add_ps(_mm256_add_ps(acc0, acc1),
                             _mm256_add_ps(acc2, acc3))) +
          tail;
      crow[j] = accumulate ? crow[j] + dot : dot;
    }
  }
}

void add_avx2(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_avx2(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void max_avx2(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  }
  for (; i < n; ++i) y[i] = std::max(a[i], b[i]);
}

void relu_avx2(const float* x, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_avx2(const float* x, const float* g, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    _mm256_storeu_ps(y + i, _mm256_and_ps(mask, _mm256_loadu_ps(g + i)));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? g[i] : 0.0f;
}

void axpy_avx2(float alpha, const float* x, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(
        y + i, _mm256_fmadd_ps(av, _mm256_loadu_ps(x + i),
                               _mm256_loadu_ps(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(const float* x, float alpha, float* y, std::size_t n) {
  const __m256 av = _mm256_set1_ps(alpha);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_mul_ps(av, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) y[i] = alpha * x[i];
}

void add_scalar_avx2(const float* x, float s, float* y, std::size_t n) {
  const __m256 sv = _mm256_set1_ps(s);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    _mm256_storeu_ps(y + i, _mm256_add_ps(sv, _mm256_loadu_ps(x + i)));
  }
  for (; i < n; ++i) y[i] = x[i] + s;
}

float reduce_sum_avx2(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float reduce_max_avx2(const float* x, std::size_t n) {
  float m = -std::numeric_limits<float>::infinity();
  __m256 acc = _mm256_set1_ps(m);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_max_ps(acc, _mm256_loadu_ps(x + i));
  alignas(32) float lanes[8];
  _mm256_store_ps(lanes, acc);
  for (float v : lanes) m = std::max(m, v);
  for (; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

}  // namespace

const KernelTable& avx2_kernels() {
  static const KernelTable table = {
      "avx2",        gemm_avx2,  gemm_nt_avx2,    add_avx2,
      mul_avx2,      max_avx2,   relu_avx2,       relu_bwd_avx2,
      axpy_avx2,     scale_avx2, add_scalar_avx2, reduce_sum_avx2,
      reduce_max_avx2};
  return table;
}

bool cpu_has_avx2_fma() {
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
}

}  // namespace lprnet::kern

#endif  // x86-64
