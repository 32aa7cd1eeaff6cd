#include "cil/layers.hpp"

#include <algorithm>
#include <cmath>

namespace cil {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

}  // namespace cil

namespace cil::nn {

std::string layer_kind(std::size_t variant_index) {
  static const char* kNames[] = {"dense", "relu", "conv2d", "batchnorm", "dropout", "avgpool"};
  return variant_index < std::size(kNames) ? kNames[variant_index] : "unknown";
}

template <typename T>
void ParamBlock<T>::zero_grads() {
  for (auto& g : grads) g.fill(T{});
}

namespace detail {

template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T{});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] = acc;
    }
  }
}

}  // namespace detail

namespace {

std::size_t trailing_size(const Shape& shape, std::size_t from) {
  std::size_t s = 1;
  for (std::size_t i = from; i < shape.size(); ++i) s *= shape[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------- Dense

template <typename T>
Dense<T>::Dense(std::size_t in, std::size_t out) {
  this->params = {Tensor<T>({in, out}), Tensor<T>({out})};
  this->grads = {Tensor<T>({in, out}), Tensor<T>({out})};
  this->param_names = {"weight", "bias"};
}

template <typename T>
Tensor<T> Dense<T>::forward(const Tensor<T>& x, const LayerContext&) {
  const std::size_t n = x.dim(0);
  const std::size_t in = in_features();
  const std::size_t out = out_features();
  if (trailing_size(x.shape(), 1) != in) {
    throw ValidationError("dense layer expects " + std::to_string(in) + " features, got shape " +
                          shape_string(x.shape()));
  }
  input_ = Tensor<T>({n, in}, std::vector<T>(x.values().begin(), x.values().end()));
  Tensor<T> y({n, out});
  const T* bias = this->params[1].data();
  for (std::size_t i = 0; i < n; ++i) std::copy(bias, bias + out, y.data() + i * out);
  detail::matmul(input_.data(), this->params[0].data(), y.data(), n, in, out, true);
  return y;
}

template <typename T>
Tensor<T> Dense<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  const std::size_t n = grad_out.dim(0);
  const std::size_t in = in_features();
  const std::size_t out = out_features();
  detail::matmul_at_b(input_.data(), grad_out.data(), this->grads[0].data(), n, in, out);
  T* gb = this->grads[1].data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < out; ++j) gb[j] += grad_out[i * out + j];
  }
  if (!need_input_grad) return {};
  Tensor<T> gx({n, in});
  detail::matmul_a_bt(grad_out.data(), this->params[0].data(), gx.data(), n, out, in);
  return gx;
}

// ---------------------------------------------------------------- ReLU

template <typename T>
Tensor<T> Relu<T>::forward(const Tensor<T>& x, const LayerContext&) {
  Tensor<T> y(x.shape());
  active_.assign(x.size(), 0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > T{}) {
      y[i] = x[i];
      active_[i] = 1;
    }
  }
  return y;
}

template <typename T>
Tensor<T> Relu<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (!need_input_grad) return {};
  Tensor<T> gx(grad_out.shape());
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = active_[i] ? grad_out[i] : T{};
  return gx;
}

// ---------------------------------------------------------------- Conv2d

template <typename T>
Conv2d<T>::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel) {
  if (kernel % 2 == 0) throw ValidationError("conv kernel size must be odd");
  this->params = {Tensor<T>({out_channels, in_channels, kernel, kernel}), Tensor<T>({out_channels})};
  this->grads = {Tensor<T>({out_channels, in_channels, kernel, kernel}), Tensor<T>({out_channels})};
  this->param_names = {"weight", "bias"};
}

template <typename T>
Tensor<T> Conv2d<T>::forward(const Tensor<T>& x, const LayerContext&) {
  const Tensor<T>& w = this->params[0];
  const std::size_t oc = w.dim(0), ic = w.dim(1), k = w.dim(2);
  if (x.rank() != 4 || x.dim(1) != ic) {
    throw ValidationError("conv2d expects [N, " + std::to_string(ic) + ", H, W], got " + shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const long pad = static_cast<long>(k / 2);
  input_ = x;
  Tensor<T> y({n, oc, h, wd});
  const T* bias = this->params[1].data();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < oc; ++o) {
      T* out = y.data() + ((b * oc + o) * h) * wd;
      std::fill(out, out + h * wd, bias[o]);
      for (std::size_t c = 0; c < ic; ++c) {
        const T* in = x.data() + ((b * ic + c) * h) * wd;
        const T* kern = w.data() + ((o * ic + c) * k) * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long dy = static_cast<long>(ky) - pad;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h, static_cast<long>(h) - dy);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const T kv = kern[ky * k + kx];
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx), x1 = std::min<long>(wd, static_cast<long>(wd) - dx);
            for (long yy = y0; yy < y1; ++yy) {
              T* orow = out + yy * wd;
              const T* irow = in + (yy + dy) * static_cast<long>(wd) + dx;
              for (long xx = x0; xx < x1; ++xx) orow[xx] += kv * irow[xx];
            }
          }
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> Conv2d<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  const Tensor<T>& w = this->params[0];
  const std::size_t oc = w.dim(0), ic = w.dim(1), k = w.dim(2);
  const std::size_t n = input_.dim(0), h = input_.dim(2), wd = input_.dim(3);
  const long pad = static_cast<long>(k / 2);
  T* gw = this->grads[0].data();
  T* gb = this->grads[1].data();
  Tensor<T> gx;
  if (need_input_grad) gx = Tensor<T>(input_.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < oc; ++o) {
      const T* go = grad_out.data() + ((b * oc + o) * h) * wd;
      for (std::size_t i = 0; i < h * wd; ++i) gb[o] += go[i];
      for (std::size_t c = 0; c < ic; ++c) {
        const T* in = input_.data() + ((b * ic + c) * h) * wd;
        T* gin = need_input_grad ? gx.data() + ((b * ic + c) * h) * wd : nullptr;
        const T* kern = w.data() + ((o * ic + c) * k) * k;
        T* gkern = gw + ((o * ic + c) * k) * k;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const long dy = static_cast<long>(ky) - pad;
          const long y0 = std::max(0L, -dy), y1 = std::min<long>(h, static_cast<long>(h) - dy);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const long x0 = std::max(0L, -dx), x1 = std::min<long>(wd, static_cast<long>(wd) - dx);
            const T kv = kern[ky * k + kx];
            T acc{};
            for (long yy = y0; yy < y1; ++yy) {
              const T* grow = go + yy * wd;
              const long off = (yy + dy) * static_cast<long>(wd) + dx;
              const T* irow = in + off;
              for (long xx = x0; xx < x1; ++xx) acc += grow[xx] * irow[xx];
              if (gin) {
                T* girow = gin + off;
                for (long xx = x0; xx < x1; ++xx) girow[xx] += grow[xx] * kv;
              }
            }
            gkern[ky * k + kx] += acc;
          }
        }
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels, double momentum, double eps) : momentum(momentum), eps(eps) {
  this->params = {Tensor<T>({channels}, T{1}), Tensor<T>({channels})};
  this->grads = {Tensor<T>({channels}), Tensor<T>({channels})};
  this->buffers = {Tensor<T>({channels}), Tensor<T>({channels}, T{1})};
  this->param_names = {"gamma", "beta"};
  this->buffer_names = {"running_mean", "running_var"};
}

template <typename T>
Tensor<T> BatchNorm<T>::forward(const Tensor<T>& x, const LayerContext& ctx) {
  const std::size_t channels = this->params[0].size();
  if (x.rank() < 2 || x.dim(1) != channels) {
    throw ValidationError("batch norm expects channel axis of " + std::to_string(channels) + ", got " +
                          shape_string(x.shape()));
  }
  const std::size_t n = x.dim(0);
  const std::size_t spatial = trailing_size(x.shape(), 2);
  const std::size_t count = n * spatial;
  const T* gamma = this->params[0].data();
  const T* beta = this->params[1].data();
  T* running_mean = this->buffers[0].data();
  T* running_var = this->buffers[1].data();

  used_batch_stats_ = ctx.mode == Mode::kTrain && !ctx.frozen;
  if (used_batch_stats_ && count < 2) throw ValidationError("batch norm in training mode needs more than one value per channel");
  normalized_ = Tensor<T>(x.shape());
  inv_std_.assign(channels, 0.0);
  Tensor<T> y(x.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (used_batch_stats_) {
      double sum = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) sum += p[s];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = x.data() + (b * channels + c) * spatial;
        for (std::size_t s = 0; s < spatial; ++s) sq += (p[s] - mean) * (p[s] - mean);
      }
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mean);
      running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv_std = 1.0 / std::sqrt(var + eps);
    inv_std_[c] = inv_std;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        const T xh = static_cast<T>((x[base + s] - mean) * inv_std);
        normalized_[base + s] = xh;
        y[base + s] = gamma[c] * xh + beta[c];
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> BatchNorm<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  const std::size_t channels = this->params[0].size();
  const std::size_t n = grad_out.dim(0);
  const std::size_t spatial = trailing_size(grad_out.shape(), 2);
  const double count = static_cast<double>(n * spatial);
  const T* gamma = this->params[0].data();
  T* ggamma = this->grads[0].data();
  T* gbeta = this->grads[1].data();
  Tensor<T> gx;
  if (need_input_grad) gx = Tensor<T>(grad_out.shape());
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        sum_dy += grad_out[base + s];
        sum_dy_xh += grad_out[base + s] * normalized_[base + s];
      }
    }
    ggamma[c] += static_cast<T>(sum_dy_xh);
    gbeta[c] += static_cast<T>(sum_dy);
    if (!need_input_grad) continue;
    const double scale = gamma[c] * inv_std_[c];
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t base = (b * channels + c) * spatial;
      for (std::size_t s = 0; s < spatial; ++s) {
        if (used_batch_stats_) {
          gx[base + s] = static_cast<T>(
              scale * (grad_out[base + s] - sum_dy / count - normalized_[base + s] * sum_dy_xh / count));
        } else {
          gx[base + s] = static_cast<T>(scale * grad_out[base + s]);
        }
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------- Dropout

template <typename T>
Tensor<T> Dropout<T>::forward(const Tensor<T>& x, const LayerContext& ctx) {
  if (ctx.mode == Mode::kEval || !ctx.dropout || rate <= 0.0) {
    mask_.clear();
    return x;
  }
  if (!ctx.rng) throw ValidationError("dropout in training mode needs a random generator");
  mask_.resize(x.size());
  const T keep_scale = rate >= 1.0 ? T{} : static_cast<T>(1.0 / (1.0 - rate));
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mask_[i] = uniform01(*ctx.rng) >= rate ? keep_scale : T{};
    y[i] = x[i] * mask_[i];
  }
  return y;
}

template <typename T>
Tensor<T> Dropout<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (!need_input_grad) return {};
  if (mask_.empty()) return grad_out;
  Tensor<T> gx(grad_out.shape());
  for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = grad_out[i] * mask_[i];
  return gx;
}

// ---------------------------------------------------------------- GlobalAvgPool

template <typename T>
Tensor<T> GlobalAvgPool<T>::forward(const Tensor<T>& x, const LayerContext&) {
  if (x.rank() < 3) throw ValidationError("average pooling expects [N, C, spatial...], got " + shape_string(x.shape()));
  input_shape_ = x.shape();
  const std::size_t n = x.dim(0), c = x.dim(1);
  const std::size_t spatial = trailing_size(x.shape(), 2);
  Tensor<T> y({n, c});
  for (std::size_t i = 0; i < n * c; ++i) {
    double sum = 0.0;
    for (std::size_t s = 0; s < spatial; ++s) sum += x[i * spatial + s];
    y[i] = static_cast<T>(sum / static_cast<double>(spatial));
  }
  return y;
}

template <typename T>
Tensor<T> GlobalAvgPool<T>::backward(const Tensor<T>& grad_out, bool need_input_grad) {
  if (!need_input_grad) return {};
  Tensor<T> gx(input_shape_);
  const std::size_t spatial = trailing_size(input_shape_, 2);
  const T inv = static_cast<T>(1.0 / static_cast<double>(spatial));
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    for (std::size_t s = 0; s < spatial; ++s) gx[i * spatial + s] = grad_out[i] * inv;
  }
  return gx;
}

#define CIL_INSTANTIATE_LAYERS(T)                                                                          \
  template struct ParamBlock<T>;                                                                           \
  template struct Dense<T>;                                                                                \
  template struct Relu<T>;                                                                                 \
  template struct Conv2d<T>;                                                                               \
  template struct BatchNorm<T>;                                                                            \
  template struct Dropout<T>;                                                                              \
  template struct GlobalAvgPool<T>;                                                                        \
  template void detail::matmul<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool);    \
  template void detail::matmul_at_b<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);     \
  template void detail::matmul_a_bt<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t);

CIL_INSTANTIATE_LAYERS(float)
CIL_INSTANTIATE_LAYERS(double)

}  // namespace cil::nn
