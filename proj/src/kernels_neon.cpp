#if defined(__aarch64__)

#include <arm_neon.h>

#include <algorithm>
#include <cstddef>
#include <limits>

#include "lprnet/kernels.hpp"

namespace lprnet::kern {
namespace {

// 4x8 blocked GEMM on 128-bit NEON registers, k innermost.
template <int ROWS>
inline void gemm_rows(int n, int k, const float* a, int lda, const float* b,
                      int ldb, float* c, int ldc, bool accumulate) {
  int j = 0;
  for (; j + 8 <= n; j += 8) {
    float32x4_t acc0[ROWS], acc1[ROWS];
    for (int r = 0; r < ROWS; ++r) {
      if (accumulate) {
        acc0[r] = vld1q_f32(c + static_cast<std::size_t>(r) * ldc + j);
        acc1[r] = vld1q_f32(c + static_cast<std::size_t>(r) * ldc + j + 4);
      } else {
        acc0[r] = vdupq_n_f32(0.0f);
        acc1[r] = vdupq_n_f32(0.0f);
      }
    }
    for (int p = 0; p < k; ++p) {
      const float* brow = b + static_cast<std::size_t>(p) * ldb + j;
      const float32x4_t b0 = vld1q_f32(brow);
      const float32x4_t b1 = vld1q_f32(brow + 4);
      for (int r = 0; r < ROWS; ++r) {
        const float av = a[static_cast<std::size_t>(r) * lda + p];
        acc0[r] = vfmaq_n_f32(acc0[r], b0, av);
        acc1[r] = vfmaq_n_f32(acc1[r], b1, av);
      }
    }
    for (int r = 0; r < ROWS; ++r) {
      vst1q_f32(c + static_cast<std::size_t>(r) * ldc + j, acc0[r]);
      vst1q_f32(c + static_cast<std::size_t>(r) * ldc + j + 4, acc1[r]);
    }
  }
  for (int r = 0; r < ROWS; ++r) {
    for (int jj = j; jj < n; ++jj) {
      float acc = accumulate ? c[static_cast<std::size_t>(r) * ldc + jj] : 0.0f;
      for (int p = 0; p < k; ++p) {
        acc += a[static_cast<std::size_t>(r) * lda + p] *
               b[static_cast<std::size_t>(p) * ldb + jj];
      }
      c[static_cast<std::size_t>(r) * ldc + jj] = acc;
    }
  }
}

void gemm_neon(int m, int n, int k, const float* a, int lda, const float* b,
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

void gemm_nt_neon(int m, int n, int k, const float* a, int lda, const float* b,
                  int ldb, float* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const float* arow = a + static_cast<std::size_t>(i) * lda;
    float* crow = c + static_cast<std::size_t>(i) * ldc;
    for (int j = 0; j < n; ++j) {
      const float* brow = b + static_cast<std::size_t>(j) * ldb;
      float32x4_t acc = vdupq_n_f32(0.0f);
      int p = 0;
      for (; p + 4 <= k; p += 4) {
        acc = vfmaq_f32(acc, vld1q_f32(arow + p), vld1q_f32(brow + p));
      }
      float dot = vaddvq_f32(acc);
      for (; p < k; ++p) dot += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + dot : dot;
    }
  }
}

void add_neon(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vaddq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  }
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_neon(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vmulq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  }
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void max_neon(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vmaxq_f32(vld1q_f32(a + i), vld1q_f32(b + i)));
  }
  for (; i < n; ++i) y[i] = std::max(a[i], b[i]);
}

void relu_neon(const float* x, float* y, std::size_t n) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vmaxq_f32(vld1q_f32(x + i), zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_neon(const float* x, const float* g, float* y, std::size_t n) {
  const float32x4_t zero = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const uint32x4_t mask = vcgtq_f32(vld1q_f32(x + i), zero);
    const float32x4_t gv = vld1q_f32(g + i);
    vst1q_f32(y + i, vbslq_f32(mask, gv, zero));
  }
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? g[i] : 0.0f;
}

void axpy_neon(float alpha, const float* x, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vfmaq_n_f32(vld1q_f32(y + i), vld1q_f32(x + i), alpha));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_neon(const float* x, float alpha, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vmulq_n_f32(vld1q_f32(x + i), alpha));
  }
  for (; i < n; ++i) y[i] = alpha * x[i];
}

void add_scalar_neon(const float* x, float s, float* y, std::size_t n) {
  const float32x4_t sv = vdupq_n_f32(s);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    vst1q_f32(y + i, vaddq_f32(vld1q_f32(x + i), sv));
  }
  for (; i < n; ++i) y[i] = x[i] + s;
}

float reduce_sum_neon(const float* x, std::size_t n) {
  float32x4_t acc = vdupq_n_f32(0.0f);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vaddq_f32(acc, vld1q_f32(x + i));
  float s = vaddvq_f32(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float reduce_max_neon(const float* x, std::size_t n) {
  float m = -std::numeric_limits<float>::infinity();
  float32x4_t acc = vdupq_n_f32(m);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = vmaxq_f32(acc, vld1q_f32(x + i));
  m = std::max(m, vmaxvq_f32(acc));
  for (; i < n; ++i) m = std::max(m, x[i]);
  return m;
}

}  // namespace

const KernelTable& neon_kernels() {
  static const KernelTable table = {
      "neon",        gemm_neon,  gemm_nt_neon,    add_neon,
      mul_neon,      max_neon,   relu_neon,       relu_bwd_neon,
      axpy_neon,     scale_neon, add_scalar_neon, reduce_sum_neon,
      reduce_max_neon};
  return table;
}

}  // namespace lprnet::kern

#endif  // aarch64
