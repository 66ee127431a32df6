#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "lprnet/kernels.hpp"

namespace lprnet {

// Dense (N, C, H, W) tensor, row-major, contiguous. float at runtime; the
// double instantiation backs the finite-difference gradient tests.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const = default;
  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0)) : shape(s), data(s.numel(), fill) {}
  Tensor(Shape s, std::vector<T> d) : shape(s), data(std::move(d)) {
    if (data.size() != shape.numel()) {
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape.str());
    }
  }

  std::size_t numel() const { return data.size(); }

  T& at(int n, int c, int h, int w) {
    return data[idx(n, c, h, w)];
  }
  T at(int n, int c, int h, int w) const {
    return data[idx(n, c, h, w)];
  }
  std::size_t idx(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape.c + c) * shape.h + h) *
               shape.w +
           w;
  }

  // pointer to batch element n (C*H*W contiguous values)
  T* slice(int n) {
    return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h *
                             shape.w;
  }
  const T* slice(int n) const {
    return data.data() + static_cast<std::size_t>(n) * shape.c * shape.h *
                             shape.w;
  }

  bool all_finite() const {
    for (T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }
};

// Row-major 2-axis matrix, the im2col/matmul workhorse.
template <class T>
struct Mat {
  int rows = 0;
  int cols = 0;
  std::vector<T> v;

  Mat() = default;
  Mat(int r, int c, T fill = T(0))
      : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {}
  Mat(int r, int c, std::vector<T> d) : rows(r), cols(c), v(std::move(d)) {
    if (v.size() != static_cast<std::size_t>(r) * c) {
      throw std::invalid_argument("matrix data length mismatch");
    }
  }

  T& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
  T at(int r, int c) const {
    return v[static_cast<std::size_t>(r) * cols + c];
  }
  T* row(int r) { return v.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const {
    return v.data() + static_cast<std::size_t>(r) * cols;
  }
};

using Tensorf = Tensor<float>;
using Matf = Mat<float>;

namespace detail {

// Bridge to the runtime-dispatched float kernels; other scalar types fall
// back to the reference loops.
template <class T>
inline void gemm(int m, int n, int k, const T* a, int lda, const T* b, int ldb,
                 T* c, int ldc, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().gemm(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  } else {
    kern::gemm_ref<T>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

template <class T>
inline void gemm_nt(int m, int n, int k, const T* a, int lda, const T* b,
                    int ldb, T* c, int ldc, bool accumulate) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().gemm_nt(m, n, k, a, lda, b, ldb, c, ldc,
                                   accumulate);
  } else {
    kern::gemm_nt_ref<T>(m, n, k, a, lda, b, ldb, c, ldc, accumulate);
  }
}

template <class T>
inline void vadd(const T* a, const T* b, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().add(a, b, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  }
}

template <class T>
inline void vmul(const T* a, const T* b, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().mul(a, b, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
  }
}

template <class T>
inline void vmax(const T* a, const T* b, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().max(a, b, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = std::max(a[i], b[i]);
  }
}

template <class T>
inline void vrelu(const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().relu(x, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  }
}

template <class T>
inline void vrelu_bwd(const T* x, const T* g, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().relu_bwd(x, g, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? g[i] : T(0);
  }
}

template <class T>
inline void vaxpy(T alpha, const T* x, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().axpy(alpha, x, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
  }
}

template <class T>
inline void vscale(const T* x, T alpha, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().scale(x, alpha, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = alpha * x[i];
  }
}

template <class T>
inline void vadd_scalar(const T* x, T s, T* y, std::size_t n) {
  if constexpr (std::is_same_v<T, float>) {
    kern::active_kernels().add_scalar(x, s, y, n);
  } else {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + s;
  }
}

}  // namespace detail

struct ConvGeom {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int ph = 0, pw = 0;
};

inline int conv_out_dim(int in, int k, int s, int p) {
  return (in + 2 * p - k) / s + 1;
}

inline void check_conv_geom(const Shape& in, const ConvGeom& g) {
  if (g.kh < 1 || g.kw < 1 || g.sh < 1 || g.sw < 1 || g.ph < 0 || g.pw < 0) {
    throw std::invalid_argument("bad kernel/stride/pad");
  }
  if (in.h + 2 * g.ph < g.kh || in.w + 2 * g.pw < g.kw) {
    throw std::invalid_argument("kernel larger than padded input: input " +
                                in.str());
  }
}

// Lower one batch slice into a (C*kh*kw) x (H_out*W_out) column matrix.
// Padding reads as zero.
template <class T>
void im2col_slice(const T* x, int c, int h, int w, const ConvGeom& g, T* out) {
  const int ho = conv_out_dim(h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(w, g.kw, g.sw, g.pw);
  const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
  std::size_t r = 0;
  for (int ci = 0; ci < c; ++ci) {
    const T* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int kh = 0; kh < g.kh; ++kh) {
      for (int kw = 0; kw < g.kw; ++kw, ++r) {
        T* orow = out + r * ncols;
        std::size_t col = 0;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.sh - g.ph + kh;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < wo; ++ox) orow[col++] = T(0);
            continue;
          }
          const T* xrow = xc + static_cast<std::size_t>(iy) * w;
          int ox = 0;
          int ix = 0 * g.sw - g.pw + kw;
          if (g.sw == 1) {
            // contiguous copy of the in-range span
            for (; ox < wo && ix < 0; ++ox, ++ix) orow[col++] = T(0);
            const int span = std::min(wo - ox, w - ix);
            if (span > 0) {
              std::copy(xrow + ix, xrow + ix + span, orow + col);
              col += static_cast<std::size_t>(span);
              ox += span;
              ix += span;
            }
            for (; ox < wo; ++ox) orow[col++] = T(0);
          } else {
            for (; ox < wo; ++ox, ix += g.sw) {
              orow[col++] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add the column-matrix gradient back onto an input slice.
template <class T>
void col2im_slice(const T* cols, int c, int h, int w, const ConvGeom& g,
                  T* grad_x) {
  const int ho = conv_out_dim(h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(w, g.kw, g.sw, g.pw);
  const std::size_t ncols = static_cast<std::size_t>(ho) * wo;
  std::size_t r = 0;
  for (int ci = 0; ci < c; ++ci) {
    T* gc = grad_x + static_cast<std::size_t>(ci) * h * w;
    for (int kh = 0; kh < g.kh; ++kh) {
      for (int kw = 0; kw < g.kw; ++kw, ++r) {
        const T* crow = cols + r * ncols;
        std::size_t col = 0;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.sh - g.ph + kh;
          if (iy < 0 || iy >= h) {
            col += static_cast<std::size_t>(wo);
            continue;
          }
          T* grow = gc + static_cast<std::size_t>(iy) * w;
          int ix = -g.pw + kw;
          for (int ox = 0; ox < wo; ++ox, ix += g.sw) {
            if (ix >= 0 && ix < w) grow[ix] += crow[col];
            ++col;
          }
        }
      }
    }
  }
}

// Whole-tensor lowering; batch elements occupy consecutive column blocks.
template <class T>
Mat<T> im2col(const Tensor<T>& x, const ConvGeom& g) {
  check_conv_geom(x.shape, g);
  const int ho = conv_out_dim(x.shape.h, g.kh, g.sh, g.ph);
  const int wo = conv_out_dim(x.shape.w, g.kw, g.sw, g.pw);
  const int rows = x.shape.c * g.kh * g.kw;
  const int per = ho * wo;
  Mat<T> out(rows, x.shape.n * per);
  std::vector<T> scratch(static_cast<std::size_t>(rows) * per);
  for (int n = 0; n < x.shape.n; ++n) {
    im2col_slice(x.slice(n), x.shape.c, x.shape.h, x.shape.w, g,
                 scratch.data());
    for (int r = 0; r < rows; ++r) {
      std::copy(scratch.begin() + static_cast<std::size_t>(r) * per,
                scratch.begin() + static_cast<std::size_t>(r + 1) * per,
                out.row(r) + static_cast<std::size_t>(n) * per);
    }
  }
  return out;
}

template <class T>
Mat<T> matmul(const Mat<T>& a, const Mat<T>& b) {
  if (a.cols != b.rows) {
    throw std::invalid_argument("matmul dimension mismatch: " +
                                std::to_string(a.cols) + " vs " +
                                std::to_string(b.rows));
  }
  Mat<T> c(a.rows, b.cols);
  detail::gemm<T>(a.rows, b.cols, a.cols, a.v.data(), a.cols, b.v.data(),
                  b.cols, c.v.data(), c.cols, false);
  return c;
}

enum class EwOp { add, mul, max, relu, tanh };

template <class T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape == b.shape)) {
    throw std::invalid_argument("elementwise shape mismatch " + a.shape.str() +
                                " vs " + b.shape.str());
  }
  Tensor<T> y(a.shape);
  switch (op) {
    case EwOp::add: detail::vadd(a.data.data(), b.data.data(), y.data.data(), y.numel()); break;
    case EwOp::mul: detail::vmul(a.data.data(), b.data.data(), y.data.data(), y.numel()); break;
    case EwOp::max: detail::vmax(a.data.data(), b.data.data(), y.data.data(), y.numel()); break;
    default: throw std::invalid_argument("binary elementwise op expected");
  }
  return y;
}

template <class T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a, T scalar) {
  Tensor<T> y(a.shape);
  const std::size_t n = a.numel();
  switch (op) {
    case EwOp::add: detail::vadd_scalar(a.data.data(), scalar, y.data.data(), n); break;
    case EwOp::mul: detail::vscale(a.data.data(), scalar, y.data.data(), n); break;
    case EwOp::max:
      for (std::size_t i = 0; i < n; ++i) y.data[i] = std::max(a.data[i], scalar);
      break;
    default: throw std::invalid_argument("binary elementwise op expected");
  }
  return y;
}

template <class T>
Tensor<T> elementwise(EwOp op, const Tensor<T>& a) {
  Tensor<T> y(a.shape);
  switch (op) {
    case EwOp::relu:
      detail::vrelu(a.data.data(), y.data.data(), a.numel());
      break;
    case EwOp::tanh:
      for (std::size_t i = 0; i < a.numel(); ++i) {
        y.data[i] = static_cast<T>(std::tanh(static_cast<double>(a.data[i])));
      }
      break;
    default: throw std::invalid_argument("unary elementwise op expected");
  }
  return y;
}

// b holds one value per channel, broadcast over (N, H, W).
template <class T>
Tensor<T> add_per_channel(const Tensor<T>& a, const std::vector<T>& b) {
  if (static_cast<int>(b.size()) != a.shape.c) {
    throw std::invalid_argument("per-channel vector length mismatch");
  }
  Tensor<T> y(a.shape);
  const std::size_t plane = static_cast<std::size_t>(a.shape.h) * a.shape.w;
  for (int n = 0; n < a.shape.n; ++n) {
    for (int c = 0; c < a.shape.c; ++c) {
      const T* src = a.slice(n) + static_cast<std::size_t>(c) * plane;
      T* dst = y.slice(n) + static_cast<std::size_t>(c) * plane;
      detail::vadd_scalar(src, b[c], dst, plane);
    }
  }
  return y;
}

// Row softmax with max subtraction; rows sum to 1 within float rounding.
template <class T>
Mat<T> softmax_rows(const Mat<T>& m) {
  Mat<T> out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) {
    const T* in = m.row(r);
    T* o = out.row(r);
    T mx = in[0];
    for (int c = 1; c < m.cols; ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (int c = 0; c < m.cols; ++c) {
      const double e = std::exp(static_cast<double>(in[c] - mx));
      o[c] = static_cast<T>(e);
      sum += e;
    }
    const T inv = static_cast<T>(1.0 / sum);
    for (int c = 0; c < m.cols; ++c) o[c] = o[c] * inv;
  }
  return out;
}

}  // namespace lprnet
