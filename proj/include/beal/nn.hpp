#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "beal/rng.hpp"
#include "beal/tensor.hpp"

namespace beal::nn {

enum class Mode { Train, Eval };

template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  explicit Param(std::string n, std::vector<std::int64_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}
};

// Persistent non-trainable state (batchnorm running statistics).
template <typename T>
struct Buffer {
  std::string name;
  Tensor<T> value;

  explicit Buffer(std::string n, std::vector<std::int64_t> shape)
      : name(std::move(n)), value(std::move(shape)) {}
};

template <typename T>
using MatMap =
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;

  // update_stats controls batchnorm running-statistic updates; finite
  // difference probes re-run training-mode forwards and must not advance them.
  virtual Tensor<T> forward(const Tensor<T>& x, Mode mode,
                            bool update_stats) = 0;

  // Returns dL/dx. When accumulate_param_grads is false the layer's
  // parameter gradients are left untouched (frozen-discriminator path).
  virtual Tensor<T> backward(const Tensor<T>& dy,
                             bool accumulate_param_grads) = 0;

  virtual void collect_params(std::vector<Param<T>*>& out) {}
  virtual void collect_buffers(std::vector<Buffer<T>*>& out) {}
  virtual void init(Rng& rng) {}
};

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

template <typename T>
class Conv2d : public Layer<T> {
 public:
  Conv2d(std::string name, std::int64_t in_c, std::int64_t out_c,
         std::int64_t kernel, std::int64_t stride, std::int64_t pad,
         std::int64_t dilation = 1, bool bias = true,
         bool need_input_grad = true, T init_std = T(0))
      : name_(std::move(name)),
        in_c_(in_c),
        out_c_(out_c),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        dil_(dilation),
        need_input_grad_(need_input_grad),
        init_std_(init_std),
        weight_(name_ + ".weight", {out_c, in_c * kernel * kernel}) {
    if (bias) bias_ = std::make_unique<Param<T>>(name_ + ".bias",
                                                 std::vector<std::int64_t>{out_c});
  }

  std::int64_t out_size(std::int64_t in) const {
    return (in + 2 * pad_ - dil_ * (k_ - 1) - 1) / stride_ + 1;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    if (x.dim(1) != in_c_)
      throw ValidationError(name_ + ": expected " + std::to_string(in_c_) +
                            " input channels, got " + std::to_string(x.dim(1)));
    const std::int64_t oh = out_size(h), ow = out_size(w);
    if (oh <= 0 || ow <= 0)
      throw ValidationError(name_ + ": input too small for kernel");
    x_ = x;
    Tensor<T> y({n, out_c_, oh, ow});
    Tensor<T> col({in_c_ * k_ * k_, oh * ow});
    for (std::int64_t i = 0; i < n; ++i) {
      im2col(x, i, col);
      ConstMatMap<T> wm(weight_.value.data(), out_c_, in_c_ * k_ * k_);
      ConstMatMap<T> cm(col.data(), in_c_ * k_ * k_, oh * ow);
      MatMap<T> ym(y.data() + i * out_c_ * oh * ow, out_c_, oh * ow);
      ym.noalias() = wm * cm;
      if (bias_) {
        for (std::int64_t c = 0; c < out_c_; ++c)
          ym.row(c).array() += bias_->value[c];
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads) override {
    const std::int64_t n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    Tensor<T> dx;
    if (need_input_grad_) dx = Tensor<T>(x_.shape());
    Tensor<T> col({in_c_ * k_ * k_, oh * ow});
    Tensor<T> dcol({in_c_ * k_ * k_, oh * ow});
    for (std::int64_t i = 0; i < n; ++i) {
      ConstMatMap<T> dym(dy.data() + i * out_c_ * oh * ow, out_c_, oh * ow);
      if (accumulate_param_grads) {
        im2col(x_, i, col);
        ConstMatMap<T> cm(col.data(), in_c_ * k_ * k_, oh * ow);
        MatMap<T> dwm(weight_.grad.data(), out_c_, in_c_ * k_ * k_);
        dwm.noalias() += dym * cm.transpose();
        if (bias_) {
          // Summed with a plain sequential loop: vectorized reductions over
          // unaligned maps accumulate in an address-dependent order, which
          // breaks bit-reproducibility across runs.
          for (std::int64_t c = 0; c < out_c_; ++c) {
            const T* row = dy.data() + (i * out_c_ + c) * oh * ow;
            T s = T(0);
            for (std::int64_t j = 0; j < oh * ow; ++j) s += row[j];
            bias_->grad[c] += s;
          }
        }
      }
      if (need_input_grad_) {
        ConstMatMap<T> wm(weight_.value.data(), out_c_, in_c_ * k_ * k_);
        MatMap<T> dcm(dcol.data(), in_c_ * k_ * k_, oh * ow);
        dcm.noalias() = wm.transpose() * dym;
        col2im(dcol, i, dx);
      }
    }
    return dx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    if (bias_) out.push_back(bias_.get());
  }

  void init(Rng& rng) override {
    const double fan_in = static_cast<double>(in_c_ * k_ * k_);
    const double std =
        init_std_ > T(0) ? static_cast<double>(init_std_) : std::sqrt(2.0 / fan_in);
    for (std::int64_t i = 0; i < weight_.value.numel(); ++i)
      weight_.value[i] = static_cast<T>(rng.normal(0.0, std));
    if (bias_) bias_->value.zero();
  }

 private:
  void im2col(const Tensor<T>& x, std::int64_t n, Tensor<T>& col) const {
    const std::int64_t h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = out_size(h), ow = out_size(w);
    const T* xp = x.data() + n * in_c_ * h * w;
    T* cp = col.data();
    for (std::int64_t c = 0; c < in_c_; ++c) {
      for (std::int64_t ki = 0; ki < k_; ++ki) {
        for (std::int64_t kj = 0; kj < k_; ++kj) {
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + ki * dil_;
            if (iy < 0 || iy >= h) {
              std::fill(cp, cp + ow, T(0));
              cp += ow;
              continue;
            }
            const T* row = xp + (c * h + iy) * w;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride_ - pad_ + kj * dil_;
              *cp++ = (ix >= 0 && ix < w) ? row[ix] : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const Tensor<T>& dcol, std::int64_t n, Tensor<T>& dx) const {
    const std::int64_t h = dx.dim(2), w = dx.dim(3);
    const std::int64_t oh = out_size(h), ow = out_size(w);
    T* xp = dx.data() + n * in_c_ * h * w;
    const T* cp = dcol.data();
    for (std::int64_t c = 0; c < in_c_; ++c) {
      for (std::int64_t ki = 0; ki < k_; ++ki) {
        for (std::int64_t kj = 0; kj < k_; ++kj) {
          for (std::int64_t oy = 0; oy < oh; ++oy) {
            const std::int64_t iy = oy * stride_ - pad_ + ki * dil_;
            if (iy < 0 || iy >= h) {
              cp += ow;
              continue;
            }
            T* row = xp + (c * h + iy) * w;
            for (std::int64_t ox = 0; ox < ow; ++ox) {
              const std::int64_t ix = ox * stride_ - pad_ + kj * dil_;
              if (ix >= 0 && ix < w) row[ix] += *cp;
              ++cp;
            }
          }
        }
      }
    }
  }

  std::string name_;
  std::int64_t in_c_, out_c_, k_, stride_, pad_, dil_;
  bool need_input_grad_;
  T init_std_;
  Param<T> weight_;
  std::unique_ptr<Param<T>> bias_;
  Tensor<T> x_;
};

// Depthwise 3x3-style convolution: one k*k kernel per channel.
template <typename T>
class DepthwiseConv2d : public Layer<T> {
 public:
  DepthwiseConv2d(std::string name, std::int64_t channels, std::int64_t kernel,
                  std::int64_t stride, std::int64_t pad)
      : name_(std::move(name)),
        c_(channels),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        weight_(name_ + ".weight", {channels, kernel * kernel}),
        bias_(name_ + ".bias", {channels}) {}

  std::int64_t out_size(std::int64_t in) const {
    return (in + 2 * pad_ - k_) / stride_ + 1;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    if (x.dim(1) != c_) throw ValidationError(name_ + ": channel mismatch");
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = out_size(h), ow = out_size(w);
    x_ = x;
    Tensor<T> y({n, c_, oh, ow});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c < c_; ++c) {
        const T* xp = x.data() + (i * c_ + c) * h * w;
        const T* wp = weight_.value.data() + c * k_ * k_;
        T* yp = y.data() + (i * c_ + c) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy)
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            T acc = bias_.value[c];
            for (std::int64_t ki = 0; ki < k_; ++ki) {
              const std::int64_t iy = oy * stride_ - pad_ + ki;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kj = 0; kj < k_; ++kj) {
                const std::int64_t ix = ox * stride_ - pad_ + kj;
                if (ix < 0 || ix >= w) continue;
                acc += wp[ki * k_ + kj] * xp[iy * w + ix];
              }
            }
            yp[oy * ow + ox] = acc;
          }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads) override {
    const std::int64_t n = x_.dim(0), h = x_.dim(2), w = x_.dim(3);
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    Tensor<T> dx(x_.shape());
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c < c_; ++c) {
        const T* xp = x_.data() + (i * c_ + c) * h * w;
        const T* dyp = dy.data() + (i * c_ + c) * oh * ow;
        const T* wp = weight_.value.data() + c * k_ * k_;
        T* dwp = weight_.grad.data() + c * k_ * k_;
        T* dxp = dx.data() + (i * c_ + c) * h * w;
        for (std::int64_t oy = 0; oy < oh; ++oy)
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const T g = dyp[oy * ow + ox];
            if (accumulate_param_grads) bias_.grad[c] += g;
            for (std::int64_t ki = 0; ki < k_; ++ki) {
              const std::int64_t iy = oy * stride_ - pad_ + ki;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t kj = 0; kj < k_; ++kj) {
                const std::int64_t ix = ox * stride_ - pad_ + kj;
                if (ix < 0 || ix >= w) continue;
                if (accumulate_param_grads)
                  dwp[ki * k_ + kj] += g * xp[iy * w + ix];
                dxp[iy * w + ix] += g * wp[ki * k_ + kj];
              }
            }
          }
      }
    return dx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

  void init(Rng& rng) override {
    const double std = std::sqrt(2.0 / static_cast<double>(k_ * k_));
    for (std::int64_t i = 0; i < weight_.value.numel(); ++i)
      weight_.value[i] = static_cast<T>(rng.normal(0.0, std));
    bias_.value.zero();
  }

 private:
  std::string name_;
  std::int64_t c_, k_, stride_, pad_;
  Param<T> weight_, bias_;
  Tensor<T> x_;
};

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
class BatchNorm2d : public Layer<T> {
 public:
  BatchNorm2d(std::string name, std::int64_t channels, T momentum = T(0.1),
              T eps = T(1e-5))
      : name_(std::move(name)),
        c_(channels),
        momentum_(momentum),
        eps_(eps),
        gamma_(name_ + ".gamma", {channels}),
        beta_(name_ + ".beta", {channels}),
        running_mean_(name_ + ".running_mean", {channels}),
        running_var_(name_ + ".running_var", {channels}) {
    gamma_.value.fill(T(1));
    running_var_.value.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, bool update_stats) override {
    const std::int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const std::int64_t m = n * h * w;
    mode_ = mode;
    xhat_ = Tensor<T>(x.shape());
    invstd_ = Tensor<T>({c_});
    Tensor<T> y(x.shape());
    for (std::int64_t c = 0; c < c_; ++c) {
      T mean, var;
      if (mode == Mode::Train) {
        T sum = 0, sq = 0;
        for (std::int64_t i = 0; i < n; ++i) {
          const T* xp = x.data() + (i * c_ + c) * h * w;
          for (std::int64_t j = 0; j < h * w; ++j) {
            sum += xp[j];
            sq += xp[j] * xp[j];
          }
        }
        mean = sum / static_cast<T>(m);
        var = sq / static_cast<T>(m) - mean * mean;
        if (var < T(0)) var = T(0);
        if (update_stats) {
          const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
          running_mean_.value[c] =
              (T(1) - momentum_) * running_mean_.value[c] + momentum_ * mean;
          running_var_.value[c] =
              (T(1) - momentum_) * running_var_.value[c] + momentum_ * unbiased;
        }
      } else {
        mean = running_mean_.value[c];
        var = running_var_.value[c];
      }
      const T inv = T(1) / std::sqrt(var + eps_);
      invstd_[c] = inv;
      const T g = gamma_.value[c], b = beta_.value[c];
      for (std::int64_t i = 0; i < n; ++i) {
        const T* xp = x.data() + (i * c_ + c) * h * w;
        T* hp = xhat_.data() + (i * c_ + c) * h * w;
        T* yp = y.data() + (i * c_ + c) * h * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          hp[j] = (xp[j] - mean) * inv;
          yp[j] = g * hp[j] + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads) override {
    const std::int64_t n = dy.dim(0), h = dy.dim(2), w = dy.dim(3);
    const std::int64_t m = n * h * w;
    Tensor<T> dx(dy.shape());
    for (std::int64_t c = 0; c < c_; ++c) {
      T sum_dy = 0, sum_dy_xhat = 0;
      for (std::int64_t i = 0; i < n; ++i) {
        const T* dyp = dy.data() + (i * c_ + c) * h * w;
        const T* hp = xhat_.data() + (i * c_ + c) * h * w;
        for (std::int64_t j = 0; j < h * w; ++j) {
          sum_dy += dyp[j];
          sum_dy_xhat += dyp[j] * hp[j];
        }
      }
      if (accumulate_param_grads) {
        gamma_.grad[c] += sum_dy_xhat;
        beta_.grad[c] += sum_dy;
      }
      const T g = gamma_.value[c], inv = invstd_[c];
      if (mode_ == Mode::Train) {
        const T k1 = sum_dy / static_cast<T>(m);
        const T k2 = sum_dy_xhat / static_cast<T>(m);
        for (std::int64_t i = 0; i < n; ++i) {
          const T* dyp = dy.data() + (i * c_ + c) * h * w;
          const T* hp = xhat_.data() + (i * c_ + c) * h * w;
          T* dxp = dx.data() + (i * c_ + c) * h * w;
          for (std::int64_t j = 0; j < h * w; ++j)
            dxp[j] = g * inv * (dyp[j] - k1 - hp[j] * k2);
        }
      } else {
        for (std::int64_t i = 0; i < n; ++i) {
          const T* dyp = dy.data() + (i * c_ + c) * h * w;
          T* dxp = dx.data() + (i * c_ + c) * h * w;
          for (std::int64_t j = 0; j < h * w; ++j) dxp[j] = g * inv * dyp[j];
        }
      }
    }
    return dx;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }

  void collect_buffers(std::vector<Buffer<T>*>& out) override {
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

 private:
  std::string name_;
  std::int64_t c_;
  T momentum_, eps_;
  Param<T> gamma_, beta_;
  Buffer<T> running_mean_, running_var_;
  Tensor<T> xhat_, invstd_;
  Mode mode_ = Mode::Train;
};

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
class ReLU6 : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      y[i] = std::min(std::max(x[i], T(0)), T(6));
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = (x_[i] > T(0) && x_[i] < T(6)) ? dy[i] : T(0);
    return dx;
  }

 private:
  Tensor<T> x_;
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = std::max(x[i], T(0));
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = x_[i] > T(0) ? dy[i] : T(0);
    return dx;
  }

 private:
  Tensor<T> x_;
};

template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  explicit LeakyReLU(T slope) : slope_(slope) {}
  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    x_ = x;
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      y[i] = x[i] > T(0) ? x[i] : slope_ * x[i];
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = x_[i] > T(0) ? dy[i] : slope_ * dy[i];
    return dx;
  }

 private:
  T slope_;
  Tensor<T> x_;
};

template <typename T>
class Sigmoid : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    y_ = Tensor<T>(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
      y_[i] = T(1) / (T(1) + std::exp(-x[i]));
    return y_;
  }
  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    Tensor<T> dx(dy.shape());
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dx[i] = dy[i] * y_[i] * (T(1) - y_[i]);
    return dx;
  }

 private:
  Tensor<T> y_;
};

// ---------------------------------------------------------------------------
// Bilinear resize (align_corners = false)
// ---------------------------------------------------------------------------

template <typename T>
class BilinearUpsample : public Layer<T> {
 public:
  // target size set per forward call via set_output_size, or a fixed integer
  // scale factor.
  explicit BilinearUpsample(std::int64_t scale) : scale_(scale) {}
  BilinearUpsample(std::int64_t out_h, std::int64_t out_w)
      : scale_(0), oh_(out_h), ow_(out_w) {}

  void set_output_size(std::int64_t oh, std::int64_t ow) {
    scale_ = 0;
    oh_ = oh;
    ow_ = ow;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode, bool) override {
    in_h_ = x.dim(2);
    in_w_ = x.dim(3);
    const std::int64_t oh = scale_ ? in_h_ * scale_ : oh_;
    const std::int64_t ow = scale_ ? in_w_ * scale_ : ow_;
    const std::int64_t n = x.dim(0), c = x.dim(1);
    n_ = n;
    c_ = c;
    Tensor<T> y({n, c, oh, ow});
    const double sy = static_cast<double>(in_h_) / static_cast<double>(oh);
    const double sx = static_cast<double>(in_w_) / static_cast<double>(ow);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T* xp = x.data() + (i * c + ch) * in_h_ * in_w_;
        T* yp = y.data() + (i * c + ch) * oh * ow;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          auto [y0, y1, wy] = src_index(oy, sy, in_h_);
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            auto [x0, x1, wx] = src_index(ox, sx, in_w_);
            const T v00 = xp[y0 * in_w_ + x0], v01 = xp[y0 * in_w_ + x1];
            const T v10 = xp[y1 * in_w_ + x0], v11 = xp[y1 * in_w_ + x1];
            yp[oy * ow + ox] = static_cast<T>(
                (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                wy * ((1 - wx) * v10 + wx * v11));
          }
        }
      }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool) override {
    const std::int64_t oh = dy.dim(2), ow = dy.dim(3);
    Tensor<T> dx({n_, c_, in_h_, in_w_});
    const double sy = static_cast<double>(in_h_) / static_cast<double>(oh);
    const double sx = static_cast<double>(in_w_) / static_cast<double>(ow);
    for (std::int64_t i = 0; i < n_; ++i)
      for (std::int64_t ch = 0; ch < c_; ++ch) {
        const T* dyp = dy.data() + (i * c_ + ch) * oh * ow;
        T* dxp = dx.data() + (i * c_ + ch) * in_h_ * in_w_;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          auto [y0, y1, wy] = src_index(oy, sy, in_h_);
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            auto [x0, x1, wx] = src_index(ox, sx, in_w_);
            const T g = dyp[oy * ow + ox];
            dxp[y0 * in_w_ + x0] += static_cast<T>((1 - wy) * (1 - wx)) * g;
            dxp[y0 * in_w_ + x1] += static_cast<T>((1 - wy) * wx) * g;
            dxp[y1 * in_w_ + x0] += static_cast<T>(wy * (1 - wx)) * g;
            dxp[y1 * in_w_ + x1] += static_cast<T>(wy * wx) * g;
          }
        }
      }
    return dx;
  }

 private:
  static std::tuple<std::int64_t, std::int64_t, double> src_index(
      std::int64_t dst, double scale, std::int64_t in_size) {
    double src = (static_cast<double>(dst) + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    std::int64_t i0 = static_cast<std::int64_t>(src);
    if (i0 > in_size - 1) i0 = in_size - 1;
    const std::int64_t i1 = std::min<std::int64_t>(i0 + 1, in_size - 1);
    return {i0, i1, src - static_cast<double>(i0)};
  }

  std::int64_t scale_ = 0, oh_ = 0, ow_ = 0;
  std::int64_t in_h_ = 0, in_w_ = 0, n_ = 0, c_ = 0;
};

// ---------------------------------------------------------------------------
// Sequential container
// ---------------------------------------------------------------------------

template <typename T>
class Sequential : public Layer<T> {
 public:
  Sequential() = default;

  template <typename L, typename... Args>
  L* add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L* raw = layer.get();
    layers_.push_back(std::move(layer));
    return raw;
  }

  Tensor<T> forward(const Tensor<T>& x, Mode mode, bool update_stats) override {
    Tensor<T> y = x;
    for (auto& l : layers_) y = l->forward(y, mode, update_stats);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy, bool accumulate_param_grads) override {
    Tensor<T> d = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
      d = (*it)->backward(d, accumulate_param_grads);
    return d;
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    for (auto& l : layers_) l->collect_params(out);
  }
  void collect_buffers(std::vector<Buffer<T>*>& out) override {
    for (auto& l : layers_) l->collect_buffers(out);
  }
  void init(Rng& rng) override {
    for (auto& l : layers_) l->init(rng);
  }

  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

// ---------------------------------------------------------------------------
// Channel concat / split helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
    throw ValidationError("concat_channels: spatial/batch mismatch");
  const std::int64_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  const std::int64_t hw = a.dim(2) * a.dim(3);
  Tensor<T> out({n, ca + cb, a.dim(2), a.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(a.data() + i * ca * hw, a.data() + (i + 1) * ca * hw,
              out.data() + i * (ca + cb) * hw);
    std::copy(b.data() + i * cb * hw, b.data() + (i + 1) * cb * hw,
              out.data() + i * (ca + cb) * hw + ca * hw);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> split_channels(const Tensor<T>& x,
                                               std::int64_t ca) {
  const std::int64_t n = x.dim(0), c = x.dim(1), cb = c - ca;
  const std::int64_t hw = x.dim(2) * x.dim(3);
  Tensor<T> a({n, ca, x.dim(2), x.dim(3)});
  Tensor<T> b({n, cb, x.dim(2), x.dim(3)});
  for (std::int64_t i = 0; i < n; ++i) {
    std::copy(x.data() + i * c * hw, x.data() + i * c * hw + ca * hw,
              a.data() + i * ca * hw);
    std::copy(x.data() + i * c * hw + ca * hw, x.data() + (i + 1) * c * hw,
              b.data() + i * cb * hw);
  }
  return {std::move(a), std::move(b)};
}

}  // namespace beal::nn
