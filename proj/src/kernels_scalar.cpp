#include "lprnet/kernels.hpp"

#include <algorithm>
#include <limits>

namespace lprnet::kern {
namespace {

void gemm_scalar(int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
  gemm_ref<float>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void gemm_nt_scalar(int m, int n, int k, const float* a, int lda,
                    const float* b, int ldb, float* c, int ldc,
                    bool accumulate) {
  gemm_nt_ref<float>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
}

void add_scalar_impl(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

void mul_scalar_impl(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

void max_scalar_impl(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = std::max(a[i], b[i]);
}

void relu_scalar(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_bwd_scalar(const float* x, const float* g, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? g[i] : 0.0f;
}

void axpy_scalar(float alpha, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(const float* x, float alpha, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

void add_scalar_s(const float* x, float s, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + s;
}

float reduce_sum_scalar(const float* x, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

float reduce_max_scalar(const float* x, std::size_t n) {
  float acc = -std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i) acc = std::max(acc, x[i]);
  return acc;
}

}  // namespace

const KernelTable& scalar_kernels() {
  static const KernelTable table = {
      "scalar",         gemm_scalar,  gemm_nt_scalar,    add_scalar_impl,
      mul_scalar_impl,  max_scalar_impl, relu_scalar,    relu_bwd_scalar,
      axpy_scalar,      scale_scalar, add_scalar_s,      reduce_sum_scalar,
      reduce_max_scalar};
  return table;
}

}  // namespace lprnet::kern
