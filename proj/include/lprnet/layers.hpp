#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "lprnet/parallel.hpp"
#include "lprnet/rng.hpp"
#include "lprnet/tensor.hpp"

namespace lprnet {

enum class Mode { train, infer };

// Per-call context. Stochastic layers derive their stream from
// (seed, layer name, iter), so masks depend only on these values and not on
// call order; a repeated forward with the same context reuses the same mask,
// which the finite-difference tests rely on.
struct RunCtx {
  Mode mode = Mode::infer;
  std::uint64_t seed = 0;
  std::int64_t iter = 0;
  bool stn_active = true;
};

template <class T>
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  Param() = default;
  Param(std::string n, std::vector<int> d, bool train = true)
      : name(std::move(n)), dims(std::move(d)), trainable(train) {
    std::size_t total = 1;
    for (int x : dims) total *= static_cast<std::size_t>(x);
    value.assign(total, T(0));
    grad.assign(total, T(0));
  }
  std::size_t numel() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

// Static per-layer description used for shape validation and FLOP accounting.
struct LayerRecord {
  std::string id;
  std::string kind;
  int c_in = 0;
  int c_out = 0;
  int h_out = 0;
  int w_out = 0;
  long long macs = 0;       // conv/dense multiply-accumulates
  long long bias_flops = 0; // one add per biased output element
  long long aux_flops = 0;  // pool/activation/norm bucket, one per element
};

template <class T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;

  virtual Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) = 0;
  // Uses state cached by the last train-mode forward.
  virtual Tensor<T> backward(const Tensor<T>& grad_out) = 0;
  virtual void collect_params(std::vector<Param<T>*>& out) { (void)out; }
  // Validates and propagates the shape; appends accounting records when
  // rec is non-null. Record shapes are per single image (n ignored).
  virtual Shape resolve(const Shape& in,
                        std::vector<LayerRecord>* rec) const = 0;
  virtual const char* kind() const = 0;

  const std::string& name() const { return name_; }

 protected:
  std::string name_;
};

namespace init {

// He-uniform over fan-in, the convolution/dense default.
template <class T>
void he_uniform(std::vector<T>& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace init

// ---------------------------------------------------------------------------
// Convolution (cross-correlation), lowered to im2col + GEMM per batch element.

template <class T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, int c_in, int c_out, ConvGeom g, Rng& rng,
         bool zero_init = false)
      : Layer<T>(std::move(name)),
        c_in_(c_in),
        c_out_(c_out),
        g_(g),
        weight_(this->name_ + ".weight", {c_out, c_in, g.kh, g.kw}),
        bias_(this->name_ + ".bias", {c_out}) {
    if (c_out < 1) throw std::invalid_argument("conv c_out must be >= 1");
    if (!zero_init) {
      init::he_uniform(weight_.value, c_in * g.kh * g.kw, rng);
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (x.shape.c != c_in_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch, got " +
                                  std::to_string(x.shape.c) + " want " +
                                  std::to_string(c_in_));
    }
    check_conv_geom(x.shape, g_);
    const int ho = conv_out_dim(x.shape.h, g_.kh, g_.sh, g_.ph);
    const int wo = conv_out_dim(x.shape.w, g_.kw, g_.sw, g_.pw);
    const int hw = ho * wo;
    const int k = c_in_ * g_.kh * g_.kw;
    Tensor<T> y({x.shape.n, c_out_, ho, wo});

    const bool pointwise = is_pointwise(x.shape);
    parallel_for(static_cast<std::size_t>(x.shape.n), [&](std::size_t n) {
      thread_local std::vector<T> cols;
      const T* col_ptr;
      if (pointwise) {
        col_ptr = x.slice(static_cast<int>(n));
      } else {
        cols.resize(static_cast<std::size_t>(k) * hw);
        im2col_slice(x.slice(static_cast<int>(n)), c_in_, x.shape.h,
                     x.shape.w, g_, cols.data());
        col_ptr = cols.data();
      }
      T* out = y.slice(static_cast<int>(n));
      detail::gemm<T>(c_out_, hw, k, weight_.value.data(), k, col_ptr, hw,
                      out, hw, false);
      for (int c = 0; c < c_out_; ++c) {
        detail::vadd_scalar(out + static_cast<std::size_t>(c) * hw,
                            bias_.value[c],
                            out + static_cast<std::size_t>(c) * hw,
                            static_cast<std::size_t>(hw));
      }
    });
    if (ctx.mode == Mode::train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const Tensor<T>& x = input_;
    const int ho = grad_out.shape.h;
    const int wo = grad_out.shape.w;
    const int hw = ho * wo;
    const int k = c_in_ * g_.kh * g_.kw;
    if (grad_out.shape.n != x.shape.n || grad_out.shape.c != c_out_) {
      throw std::invalid_argument(this->name_ + ": grad shape mismatch");
    }
    Tensor<T> grad_x(x.shape);
    const bool pointwise = is_pointwise(x.shape);

    // w transposed once, shared across batch elements
    std::vector<T> wt(static_cast<std::size_t>(k) * c_out_);
    for (int c = 0; c < c_out_; ++c) {
      for (int p = 0; p < k; ++p) {
        wt[static_cast<std::size_t>(p) * c_out_ + c] =
            weight_.value[static_cast<std::size_t>(c) * k + p];
      }
    }

    const int slots = std::min(max_threads(), x.shape.n);
    std::vector<std::vector<T>> gw(slots);
    std::vector<std::vector<T>> gb(slots);
    for (int s = 0; s < slots; ++s) {
      gw[s].assign(weight_.numel(), T(0));
      gb[s].assign(static_cast<std::size_t>(c_out_), T(0));
    }
    const int chunk = (x.shape.n + slots - 1) / slots;
    parallel_for(static_cast<std::size_t>(slots), [&](std::size_t s) {
      thread_local std::vector<T> cols, gcols;
      const int lo = static_cast<int>(s) * chunk;
      const int hi = std::min(x.shape.n, lo + chunk);
      for (int n = lo; n < hi; ++n) {
        const T* g = grad_out.slice(n);
        const T* col_ptr;
        if (pointwise) {
          col_ptr = x.slice(n);
        } else {
          cols.resize(static_cast<std::size_t>(k) * hw);
          im2col_slice(x.slice(n), c_in_, x.shape.h, x.shape.w, g_,
                       cols.data());
          col_ptr = cols.data();
        }
        // dW += g . cols^T
        detail::gemm_nt<T>(c_out_, k, hw, g, hw, col_ptr, hw, gw[s].data(), k,
                           true);
        for (int c = 0; c < c_out_; ++c) {
          T acc = T(0);
          const T* row = g + static_cast<std::size_t>(c) * hw;
          for (int i = 0; i < hw; ++i) acc += row[i];
          gb[s][c] += acc;
        }
        // dX via cols grad
        if (pointwise) {
          detail::gemm<T>(k, hw, c_out_, wt.data(), c_out_, g, hw,
                          grad_x.slice(n), hw, false);
        } else {
          gcols.assign(static_cast<std::size_t>(k) * hw, T(0));
          detail::gemm<T>(k, hw, c_out_, wt.data(), c_out_, g, hw,
                          gcols.data(), hw, false);
          col2im_slice(gcols.data(), c_in_, x.shape.h, x.shape.w, g_,
                       grad_x.slice(n));
        }
      }
    });
    for (int s = 0; s < slots; ++s) {
      detail::vaxpy(T(1), gw[s].data(), weight_.grad.data(), weight_.numel());
      detail::vaxpy(T(1), gb[s].data(), bias_.grad.data(), bias_.numel());
    }
    return grad_x;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (in.c != c_in_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch in spec");
    }
    check_conv_geom(in, g_);
    Shape out{in.n, c_out_, conv_out_dim(in.h, g_.kh, g_.sh, g_.ph),
              conv_out_dim(in.w, g_.kw, g_.sw, g_.pw)};
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "conv";
      r.c_in = c_in_;
      r.c_out = c_out_;
      r.h_out = out.h;
      r.w_out = out.w;
      r.macs = static_cast<long long>(g_.kh) * g_.kw * c_in_ * c_out_ *
               out.h * out.w;
      r.bias_flops = static_cast<long long>(c_out_) * out.h * out.w;
      rec->push_back(r);
    }
    return out;
  }

  const char* kind() const override { return "conv"; }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }
  const ConvGeom& geom() const { return g_; }

 private:
  bool is_pointwise(const Shape& s) const {
    (void)s;
    return g_.kh == 1 && g_.kw == 1 && g_.sh == 1 && g_.sw == 1 &&
           g_.ph == 0 && g_.pw == 0;
  }

  int c_in_;
  int c_out_;
  ConvGeom g_;
  Param<T> weight_;
  Param<T> bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Max pooling over a spatial window, optionally also over channel groups so
// the output channel count matches the table entry (channel-strided pooling).

template <class T>
class MaxPool : public Layer<T> {
 public:
  MaxPool(std::string name, ConvGeom g, int channel_out)
      : Layer<T>(std::move(name)), g_(g), channel_out_(channel_out) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (channel_out_ < 1 || x.shape.c % channel_out_ != 0) {
      throw std::invalid_argument(
          this->name_ + ": channel_out must divide input channels");
    }
    check_conv_geom(x.shape, g_);
    const int group = x.shape.c / channel_out_;
    const int ho = conv_out_dim(x.shape.h, g_.kh, g_.sh, g_.ph);
    const int wo = conv_out_dim(x.shape.w, g_.kw, g_.sw, g_.pw);
    Tensor<T> y({x.shape.n, channel_out_, ho, wo});
    const bool cache = ctx.mode == Mode::train;
    if (cache) {
      argmax_.assign(y.numel(), 0);
      in_shape_ = x.shape;
    }
    const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
    parallel_for(static_cast<std::size_t>(x.shape.n), [&](std::size_t n) {
      const T* xs = x.slice(static_cast<int>(n));
      T* ys = y.slice(static_cast<int>(n));
      for (int oc = 0; oc < channel_out_; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            T best = -std::numeric_limits<T>::infinity();
            std::int32_t best_idx = -1;
            for (int gc = 0; gc < group; ++gc) {
              const int ci = oc * group + gc;
              const T* plane_ptr = xs + static_cast<std::size_t>(ci) * plane;
              for (int kh = 0; kh < g_.kh; ++kh) {
                const int iy = oy * g_.sh - g_.ph + kh;
                if (iy < 0 || iy >= x.shape.h) continue;
                for (int kw = 0; kw < g_.kw; ++kw) {
                  const int ix = ox * g_.sw - g_.pw + kw;
                  if (ix < 0 || ix >= x.shape.w) continue;
                  const T v =
                      plane_ptr[static_cast<std::size_t>(iy) * x.shape.w + ix];
                  if (v > best) {
                    best = v;
                    best_idx = static_cast<std::int32_t>(
                        ci * plane + static_cast<std::size_t>(iy) * x.shape.w +
                        ix);
                  }
                }
              }
            }
            const std::size_t oidx =
                ((static_cast<std::size_t>(oc) * ho) + oy) * wo + ox;
            ys[oidx] = best;
            if (cache) {
              argmax_[n * static_cast<std::size_t>(channel_out_) * ho * wo +
                      oidx] = best_idx;
            }
          }
        }
      }
    });
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> grad_x(in_shape_);
    const std::size_t per_out = grad_out.numel() / in_shape_.n;
    parallel_for(static_cast<std::size_t>(in_shape_.n), [&](std::size_t n) {
      const T* g = grad_out.slice(static_cast<int>(n));
      T* gx = grad_x.slice(static_cast<int>(n));
      for (std::size_t i = 0; i < per_out; ++i) {
        const std::int32_t idx = argmax_[n * per_out + i];
        if (idx >= 0) gx[idx] += g[i];
      }
    });
    return grad_x;
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (channel_out_ < 1 || in.c % channel_out_ != 0) {
      throw std::invalid_argument(
          this->name_ + ": channel_out must divide input channels");
    }
    check_conv_geom(in, g_);
    Shape out{in.n, channel_out_, conv_out_dim(in.h, g_.kh, g_.sh, g_.ph),
              conv_out_dim(in.w, g_.kw, g_.sw, g_.pw)};
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "maxpool";
      r.c_in = in.c;
      r.c_out = out.c;
      r.h_out = out.h;
      r.w_out = out.w;
      r.aux_flops = static_cast<long long>(out.c) * out.h * out.w;
      rec->push_back(r);
    }
    return out;
  }

  const char* kind() const override { return "maxpool"; }

 private:
  ConvGeom g_;
  int channel_out_;
  Shape in_shape_;
  std::vector<std::int32_t> argmax_;
};

// ---------------------------------------------------------------------------
// Average pooling; the divisor counts only in-range taps, padding excluded.

template <class T>
class AvgPool : public Layer<T> {
 public:
  AvgPool(std::string name, ConvGeom g) : Layer<T>(std::move(name)), g_(g) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    check_conv_geom(x.shape, g_);
    const int ho = conv_out_dim(x.shape.h, g_.kh, g_.sh, g_.ph);
    const int wo = conv_out_dim(x.shape.w, g_.kw, g_.sw, g_.pw);
    Tensor<T> y({x.shape.n, x.shape.c, ho, wo});
    if (ctx.mode == Mode::train) in_shape_ = x.shape;
    parallel_for(static_cast<std::size_t>(x.shape.n), [&](std::size_t n) {
      const T* xs = x.slice(static_cast<int>(n));
      T* ys = y.slice(static_cast<int>(n));
      pool_slice(xs, x.shape, ho, wo, ys, nullptr);
    });
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> grad_x(in_shape_);
    const int ho = grad_out.shape.h;
    const int wo = grad_out.shape.w;
    parallel_for(static_cast<std::size_t>(in_shape_.n), [&](std::size_t n) {
      const T* g = grad_out.slice(static_cast<int>(n));
      T* gx = grad_x.slice(static_cast<int>(n));
      for (int c = 0; c < in_shape_.c; ++c) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            int count = 0;
            for (int kh = 0; kh < g_.kh; ++kh) {
              const int iy = oy * g_.sh - g_.ph + kh;
              if (iy < 0 || iy >= in_shape_.h) continue;
              for (int kw = 0; kw < g_.kw; ++kw) {
                const int ix = ox * g_.sw - g_.pw + kw;
                if (ix >= 0 && ix < in_shape_.w) ++count;
              }
            }
            const T share =
                g[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] /
                static_cast<T>(count);
            for (int kh = 0; kh < g_.kh; ++kh) {
              const int iy = oy * g_.sh - g_.ph + kh;
              if (iy < 0 || iy >= in_shape_.h) continue;
              for (int kw = 0; kw < g_.kw; ++kw) {
                const int ix = ox * g_.sw - g_.pw + kw;
                if (ix < 0 || ix >= in_shape_.w) continue;
                gx[(static_cast<std::size_t>(c) * in_shape_.h + iy) *
                       in_shape_.w +
                   ix] += share;
              }
            }
          }
        }
      }
    });
    return grad_x;
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    check_conv_geom(in, g_);
    Shape out{in.n, in.c, conv_out_dim(in.h, g_.kh, g_.sh, g_.ph),
              conv_out_dim(in.w, g_.kw, g_.sw, g_.pw)};
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "avgpool";
      r.c_in = in.c;
      r.c_out = out.c;
      r.h_out = out.h;
      r.w_out = out.w;
      r.aux_flops = static_cast<long long>(out.c) * out.h * out.w;
      rec->push_back(r);
    }
    return out;
  }

  const char* kind() const override { return "avgpool"; }

 private:
  void pool_slice(const T* xs, const Shape& s, int ho, int wo, T* ys,
                  const int*) const {
    for (int c = 0; c < s.c; ++c) {
      const T* plane = xs + static_cast<std::size_t>(c) * s.h * s.w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          int count = 0;
          for (int kh = 0; kh < g_.kh; ++kh) {
            const int iy = oy * g_.sh - g_.ph + kh;
            if (iy < 0 || iy >= s.h) continue;
            for (int kw = 0; kw < g_.kw; ++kw) {
              const int ix = ox * g_.sw - g_.pw + kw;
              if (ix < 0 || ix >= s.w) continue;
              acc += static_cast<double>(
                  plane[static_cast<std::size_t>(iy) * s.w + ix]);
              ++count;
            }
          }
          ys[(static_cast<std::size_t>(c) * ho + oy) * wo + ox] =
              static_cast<T>(acc / count);
        }
      }
    }
  }

  ConvGeom g_;
  Shape in_shape_;
};

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <class T>
class BatchNorm2d : public Layer<T> {
 public:
  BatchNorm2d(std::string name, int channels, double momentum = 0.9,
              double eps = 1e-5)
      : Layer<T>(std::move(name)),
        channels_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(this->name_ + ".gamma", {channels}),
        beta_(this->name_ + ".beta", {channels}),
        run_mean_(this->name_ + ".running_mean", {channels}, false),
        run_var_(this->name_ + ".running_var", {channels}, false) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), T(1));
    std::fill(run_var_.value.begin(), run_var_.value.end(), T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (x.shape.c != channels_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch");
    }
    const bool train = ctx.mode == Mode::train;
    const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
    const double m = static_cast<double>(x.shape.n) * plane;

    std::vector<double> mean(channels_), var(channels_);
    if (train) {
      parallel_for(static_cast<std::size_t>(channels_), [&](std::size_t c) {
        double acc = 0.0;
        for (int n = 0; n < x.shape.n; ++n) {
          const T* p = x.slice(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        }
        const double mu = acc / m;
        double vacc = 0.0;
        for (int n = 0; n < x.shape.n; ++n) {
          const T* p = x.slice(n) + c * plane;
          for (std::size_t i = 0; i < plane; ++i) {
            const double d = p[i] - mu;
            vacc += d * d;
          }
        }
        mean[c] = mu;
        var[c] = vacc / m;
      });
      for (int c = 0; c < channels_; ++c) {
        run_mean_.value[c] = static_cast<T>(momentum_ * run_mean_.value[c] +
                                            (1.0 - momentum_) * mean[c]);
        run_var_.value[c] = static_cast<T>(momentum_ * run_var_.value[c] +
                                           (1.0 - momentum_) * var[c]);
      }
    } else {
      for (int c = 0; c < channels_; ++c) {
        mean[c] = static_cast<double>(run_mean_.value[c]);
        var[c] = static_cast<double>(run_var_.value[c]);
      }
    }

    Tensor<T> y(x.shape);
    if (train) {
      xhat_ = Tensor<T>(x.shape);
      invstd_.resize(channels_);
      batch_n_ = x.shape.n;
    }
    parallel_for(static_cast<std::size_t>(channels_), [&](std::size_t c) {
      const double invstd = 1.0 / std::sqrt(var[c] + eps_);
      if (train) invstd_[c] = invstd;
      const double g = static_cast<double>(gamma_.value[c]);
      const double b = static_cast<double>(beta_.value[c]);
      const double mu = mean[c];
      for (int n = 0; n < x.shape.n; ++n) {
        const T* p = x.slice(n) + c * plane;
        T* q = y.slice(n) + c * plane;
        T* xh = train ? xhat_.slice(n) + c * plane : nullptr;
        for (std::size_t i = 0; i < plane; ++i) {
          const double h = (p[i] - mu) * invstd;
          if (train) xh[i] = static_cast<T>(h);
          q[i] = static_cast<T>(h * g + b);
        }
      }
    });
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const Shape s = grad_out.shape;
    if (s.c != channels_ || s.n != batch_n_) {
      throw std::invalid_argument(this->name_ + ": grad shape mismatch");
    }
    const std::size_t plane = static_cast<std::size_t>(s.h) * s.w;
    const double m = static_cast<double>(s.n) * plane;
    Tensor<T> grad_x(s);
    parallel_for(static_cast<std::size_t>(channels_), [&](std::size_t c) {
      double sum_dy = 0.0, sum_dy_xhat = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const T* g = grad_out.slice(n) + c * plane;
        const T* xh = xhat_.slice(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          sum_dy += g[i];
          sum_dy_xhat += static_cast<double>(g[i]) * xh[i];
        }
      }
      beta_.grad[c] += static_cast<T>(sum_dy);
      gamma_.grad[c] += static_cast<T>(sum_dy_xhat);
      const double scale = gamma_.value[c] * invstd_[c] / m;
      for (int n = 0; n < s.n; ++n) {
        const T* g = grad_out.slice(n) + c * plane;
        const T* xh = xhat_.slice(n) + c * plane;
        T* gx = grad_x.slice(n) + c * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          gx[i] = static_cast<T>(scale *
                                 (m * g[i] - sum_dy - xh[i] * sum_dy_xhat));
        }
      }
    });
    return grad_x;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&run_mean_);
    out.push_back(&run_var_);
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (in.c != channels_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch in spec");
    }
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "batchnorm";
      r.c_in = in.c;
      r.c_out = in.c;
      r.h_out = in.h;
      r.w_out = in.w;
      r.aux_flops = static_cast<long long>(in.c) * in.h * in.w;
      rec->push_back(r);
    }
    return in;
  }

  const char* kind() const override { return "batchnorm"; }

  Param<T>& gamma() { return gamma_; }
  Param<T>& beta() { return beta_; }
  Param<T>& running_mean() { return run_mean_; }
  Param<T>& running_var() { return run_var_; }

 private:
  int channels_;
  double momentum_;
  double eps_;
  Param<T> gamma_, beta_, run_mean_, run_var_;
  Tensor<T> xhat_;
  std::vector<double> invstd_;
  int batch_n_ = 0;
};

// ---------------------------------------------------------------------------

template <class T>
class Relu : public Layer<T> {
 public:
  explicit Relu(std::string name) : Layer<T>(std::move(name)) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    Tensor<T> y(x.shape);
    detail::vrelu(x.data.data(), y.data.data(), x.numel());
    if (ctx.mode == Mode::train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> gx(input_.shape);
    detail::vrelu_bwd(input_.data.data(), grad_out.data.data(),
                      gx.data.data(), gx.numel());
    return gx;
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "relu";
      r.c_in = in.c;
      r.c_out = in.c;
      r.h_out = in.h;
      r.w_out = in.w;
      r.aux_flops = static_cast<long long>(in.c) * in.h * in.w;
      rec->push_back(r);
    }
    return in;
  }

  const char* kind() const override { return "relu"; }

 private:
  Tensor<T> input_;
};

template <class T>
class TanhLayer : public Layer<T> {
 public:
  explicit TanhLayer(std::string name) : Layer<T>(std::move(name)) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    Tensor<T> y = elementwise(EwOp::tanh, x);
    if (ctx.mode == Mode::train) output_ = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> gx(output_.shape);
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      gx.data[i] = grad_out.data[i] * (T(1) - output_.data[i] * output_.data[i]);
    }
    return gx;
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "tanh";
      r.c_in = in.c;
      r.c_out = in.c;
      r.h_out = in.h;
      r.w_out = in.w;
      r.aux_flops = static_cast<long long>(in.c) * in.h * in.w;
      rec->push_back(r);
    }
    return in;
  }

  const char* kind() const override { return "tanh"; }

 private:
  Tensor<T> output_;
};

// ---------------------------------------------------------------------------
// Inverted dropout: train mode zeroes with probability `ratio` and scales
// survivors by 1/(1-ratio); inference is the identity. The mask stream is a
// pure function of (seed, layer name, iter).

template <class T>
class Dropout : public Layer<T> {
 public:
  Dropout(std::string name, double ratio)
      : Layer<T>(std::move(name)), ratio_(ratio) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
      throw std::invalid_argument("dropout ratio must be in [0,1)");
    }
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (ctx.mode == Mode::infer || ratio_ == 0.0) {
      if (ctx.mode == Mode::train) {
        mask_.assign(x.numel(), 1);
        in_shape_ = x.shape;
      }
      return x;
    }
    Rng rng(stream_seed(ctx.seed, this->name_,
                        static_cast<std::uint64_t>(ctx.iter)));
    mask_.resize(x.numel());
    in_shape_ = x.shape;
    Tensor<T> y(x.shape);
    const T scale = static_cast<T>(1.0 / (1.0 - ratio_));
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const bool keep = rng.uniform() >= ratio_;
      mask_[i] = keep ? 1 : 0;
      y.data[i] = keep ? x.data[i] * scale : T(0);
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> gx(in_shape_);
    const T scale = static_cast<T>(1.0 / (1.0 - ratio_));
    for (std::size_t i = 0; i < gx.numel(); ++i) {
      gx.data[i] = mask_[i] ? grad_out.data[i] * scale : T(0);
    }
    return gx;
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "dropout";
      r.c_in = in.c;
      r.c_out = in.c;
      r.h_out = in.h;
      r.w_out = in.w;
      rec->push_back(r);
    }
    return in;
  }

  const char* kind() const override { return "dropout"; }

  double ratio() const { return ratio_; }

 private:
  double ratio_;
  Shape in_shape_;
  std::vector<unsigned char> mask_;
};

// ---------------------------------------------------------------------------
// Fully connected layer on (N, F, 1, 1) tensors.

template <class T>
class Dense : public Layer<T> {
 public:
  Dense(std::string name, int in_features, int out_features, Rng& rng,
        bool zero_init = false)
      : Layer<T>(std::move(name)),
        in_(in_features),
        out_(out_features),
        weight_(this->name_ + ".weight", {out_features, in_features}),
        bias_(this->name_ + ".bias", {out_features}) {
    if (!zero_init) init::he_uniform(weight_.value, in_features, rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (x.shape.c * x.shape.h * x.shape.w != in_) {
      throw std::invalid_argument(this->name_ + ": feature size mismatch");
    }
    Tensor<T> y({x.shape.n, out_, 1, 1});
    // y (N x out) = x (N x in) . w^T, rows are batch elements
    detail::gemm_nt<T>(x.shape.n, out_, in_, x.data.data(), in_,
                       weight_.value.data(), in_, y.data.data(), out_, false);
    for (int n = 0; n < x.shape.n; ++n) {
      detail::vadd(y.slice(n), bias_.value.data(), y.slice(n),
                   static_cast<std::size_t>(out_));
    }
    if (ctx.mode == Mode::train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    const int n = input_.shape.n;
    // dW = g^T . x
    std::vector<T> gt(static_cast<std::size_t>(out_) * n);
    for (int i = 0; i < n; ++i) {
      for (int o = 0; o < out_; ++o) {
        gt[static_cast<std::size_t>(o) * n + i] =
            grad_out.data[static_cast<std::size_t>(i) * out_ + o];
      }
    }
    detail::gemm<T>(out_, in_, n, gt.data(), n, input_.data.data(), in_,
                    weight_.grad.data(), in_, true);
    for (int i = 0; i < n; ++i) {
      detail::vadd(bias_.grad.data(), grad_out.slice(i), bias_.grad.data(),
                   static_cast<std::size_t>(out_));
    }
    // dX = g . w
    Tensor<T> gx(input_.shape);
    detail::gemm<T>(n, in_, out_, grad_out.data.data(), out_,
                    weight_.value.data(), in_, gx.data.data(), in_, false);
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (in.c * in.h * in.w != in_) {
      throw std::invalid_argument(this->name_ + ": feature size mismatch");
    }
    Shape out{in.n, out_, 1, 1};
    if (rec) {
      LayerRecord r;
      r.id = this->name_;
      r.kind = "dense";
      r.c_in = in_;
      r.c_out = out_;
      r.h_out = 1;
      r.w_out = 1;
      r.macs = static_cast<long long>(in_) * out_;
      r.bias_flops = out_;
      rec->push_back(r);
    }
    return out;
  }

  const char* kind() const override { return "dense"; }

  Param<T>& weight() { return weight_; }
  Param<T>& bias() { return bias_; }

 private:
  int in_, out_;
  Param<T> weight_, bias_;
  Tensor<T> input_;
};

// ---------------------------------------------------------------------------
// Channel concatenation and its split adjoint.

template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape.n != b.shape.n || a.shape.h != b.shape.h ||
      a.shape.w != b.shape.w) {
    throw std::invalid_argument("concat_channels: spatial/batch mismatch " +
                                a.shape.str() + " vs " + b.shape.str());
  }
  Tensor<T> y({a.shape.n, a.shape.c + b.shape.c, a.shape.h, a.shape.w});
  const std::size_t as = static_cast<std::size_t>(a.shape.c) * a.shape.h *
                         a.shape.w;
  const std::size_t bs = static_cast<std::size_t>(b.shape.c) * b.shape.h *
                         b.shape.w;
  for (int n = 0; n < a.shape.n; ++n) {
    std::copy(a.slice(n), a.slice(n) + as, y.slice(n));
    std::copy(b.slice(n), b.slice(n) + bs, y.slice(n) + as);
  }
  return y;
}

template <class T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& y, int c_a) {
  if (c_a <= 0 || c_a >= y.shape.c) {
    throw std::invalid_argument("split_channels: bad split point");
  }
  Tensor<T> a({y.shape.n, c_a, y.shape.h, y.shape.w});
  Tensor<T> b({y.shape.n, y.shape.c - c_a, y.shape.h, y.shape.w});
  const std::size_t as = static_cast<std::size_t>(c_a) * y.shape.h * y.shape.w;
  const std::size_t bs =
      static_cast<std::size_t>(y.shape.c - c_a) * y.shape.h * y.shape.w;
  for (int n = 0; n < y.shape.n; ++n) {
    std::copy(y.slice(n), y.slice(n) + as, a.slice(n));
    std::copy(y.slice(n) + as, y.slice(n) + as + bs, b.slice(n));
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// A plain layer chain.

template <class T>
class Sequential : public Layer<T> {
 public:
  explicit Sequential(std::string name) : Layer<T>(std::move(name)) {}

  void add(std::unique_ptr<Layer<T>> layer) {
    layers_.push_back(std::move(layer));
  }

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    Tensor<T> cur = x;
    for (auto& l : layers_) cur = l->forward(cur, ctx);
    return cur;
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    Tensor<T> cur = grad_out;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      cur = (*it)->backward(cur);
    }
    return cur;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    for (auto& l : layers_) l->collect_params(out);
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    Shape cur = in;
    for (const auto& l : layers_) cur = l->resolve(cur, rec);
    return cur;
  }

  const char* kind() const override { return "sequential"; }

  std::vector<std::unique_ptr<Layer<T>>>& layers() { return layers_; }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// conv -> bn -> relu, the backbone's repeating unit
template <class T>
void add_conv_bn_relu(Sequential<T>& seq, const std::string& name, int c_in,
                      int c_out, ConvGeom g, Rng& rng) {
  seq.add(std::make_unique<Conv2d<T>>(name, c_in, c_out, g, rng));
  seq.add(std::make_unique<BatchNorm2d<T>>(name + ".bn", c_out));
  seq.add(std::make_unique<Relu<T>>(name + ".relu"));
}

// Factorized convolution unit: 1x1 down to c_out/4, 3x1, 1x3, then 1x1 up to
// c_out, batchnorm+relu after each convolution; spatial size preserved.
template <class T>
std::unique_ptr<Sequential<T>> make_small_basic_block(const std::string& name,
                                                      int c_in, int c_out,
                                                      Rng& rng) {
  if (c_out % 4 != 0) {
    throw std::invalid_argument(name + ": block channels must be divisible by 4");
  }
  const int mid = c_out / 4;
  auto seq = std::make_unique<Sequential<T>>(name);
  add_conv_bn_relu(*seq, name + ".squeeze", c_in, mid,
                   ConvGeom{1, 1, 1, 1, 0, 0}, rng);
  add_conv_bn_relu(*seq, name + ".conv_h", mid, mid, ConvGeom{3, 1, 1, 1, 1, 0},
                   rng);
  add_conv_bn_relu(*seq, name + ".conv_w", mid, mid, ConvGeom{1, 3, 1, 1, 0, 1},
                   rng);
  add_conv_bn_relu(*seq, name + ".expand", mid, c_out,
                   ConvGeom{1, 1, 1, 1, 0, 0}, rng);
  return seq;
}

// ---------------------------------------------------------------------------
// Global context: global average pool -> dense C->C -> tile -> concat with
// the input feature map, doubling the channel count.

template <class T>
class GlobalContext : public Layer<T> {
 public:
  GlobalContext(std::string name, int channels, Rng& rng)
      : Layer<T>(std::move(name)),
        channels_(channels),
        dense_(this->name_ + ".dense", channels, channels, rng) {}

  Tensor<T> forward(const Tensor<T>& x, const RunCtx& ctx) override {
    if (x.shape.c != channels_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch");
    }
    const std::size_t plane = static_cast<std::size_t>(x.shape.h) * x.shape.w;
    Tensor<T> pooled({x.shape.n, channels_, 1, 1});
    for (int n = 0; n < x.shape.n; ++n) {
      for (int c = 0; c < channels_; ++c) {
        double acc = 0.0;
        const T* p = x.slice(n) + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        pooled.slice(n)[c] = static_cast<T>(acc / static_cast<double>(plane));
      }
    }
    Tensor<T> ctxv = dense_.forward(pooled, ctx);
    Tensor<T> tiled(x.shape);
    for (int n = 0; n < x.shape.n; ++n) {
      for (int c = 0; c < channels_; ++c) {
        const T v = ctxv.slice(n)[c];
        T* q = tiled.slice(n) + static_cast<std::size_t>(c) * plane;
        std::fill(q, q + plane, v);
      }
    }
    if (ctx.mode == Mode::train) in_shape_ = x.shape;
    return concat_channels(x, tiled);
  }

  Tensor<T> backward(const Tensor<T>& grad_out) override {
    auto [g_feat, g_tiled] = split_channels(grad_out, channels_);
    const std::size_t plane =
        static_cast<std::size_t>(in_shape_.h) * in_shape_.w;
    // tile adjoint: per-channel spatial sum
    Tensor<T> g_ctx({in_shape_.n, channels_, 1, 1});
    for (int n = 0; n < in_shape_.n; ++n) {
      for (int c = 0; c < channels_; ++c) {
        double acc = 0.0;
        const T* p = g_tiled.slice(n) + static_cast<std::size_t>(c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
        g_ctx.slice(n)[c] = static_cast<T>(acc);
      }
    }
    Tensor<T> g_pooled = dense_.backward(g_ctx);
    // pool adjoint: distribute uniformly
    Tensor<T> gx = g_feat;
    const T inv = static_cast<T>(1.0 / static_cast<double>(plane));
    for (int n = 0; n < in_shape_.n; ++n) {
      for (int c = 0; c < channels_; ++c) {
        const T share = g_pooled.slice(n)[c] * inv;
        T* q = gx.slice(n) + static_cast<std::size_t>(c) * plane;
        detail::vadd_scalar(q, share, q, plane);
      }
    }
    return gx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    dense_.collect_params(out);
  }

  Shape resolve(const Shape& in, std::vector<LayerRecord>* rec) const override {
    if (in.c != channels_) {
      throw std::invalid_argument(this->name_ + ": channel mismatch in spec");
    }
    if (rec) {
      LayerRecord pool;
      pool.id = this->name_ + ".pool";
      pool.kind = "gap";
      pool.c_in = in.c;
      pool.c_out = in.c;
      pool.h_out = 1;
      pool.w_out = 1;
      pool.aux_flops = static_cast<long long>(in.c) * in.h * in.w;
      rec->push_back(pool);
      dense_.resolve(Shape{in.n, channels_, 1, 1}, rec);
      LayerRecord cat;
      cat.id = this->name_ + ".concat";
      cat.kind = "concat";
      cat.c_in = in.c;
      cat.c_out = 2 * in.c;
      cat.h_out = in.h;
      cat.w_out = in.w;
      rec->push_back(cat);
    }
    return Shape{in.n, 2 * in.c, in.h, in.w};
  }

  const char* kind() const override { return "global_context"; }

 private:
  int channels_;
  Dense<T> dense_;
  Shape in_shape_;
};

}  // namespace lprnet
