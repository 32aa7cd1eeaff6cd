#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil::nn {

enum class Mode { kTrain, kEval };

struct LayerContext {
  Mode mode = Mode::kEval;
  // Frozen layers receive no parameter updates; batch norm additionally
  // normalizes with (and keeps) its running statistics.
  bool frozen = false;
  // Dropout layers act as identity when false, even in training mode.
  bool dropout = true;
  Rng* rng = nullptr;
};

// Parameters, their gradients and non-trainable buffers of one layer. Index i
// of `grads` always shape-matches index i of `params`.
template <typename T>
struct ParamBlock {
  std::vector<Tensor<T>> params;
  std::vector<Tensor<T>> grads;
  std::vector<Tensor<T>> buffers;
  std::vector<std::string> param_names;
  std::vector<std::string> buffer_names;

  void zero_grads();
};

// y = x W + b  with W [in, out].
template <typename T>
struct Dense : ParamBlock<T> {
  Dense() = default;
  Dense(std::size_t in, std::size_t out);

  std::size_t in_features() const { return this->params[0].dim(0); }
  std::size_t out_features() const { return this->params[0].dim(1); }

  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  Tensor<T> input_;
};

template <typename T>
struct Relu : ParamBlock<T> {
  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  std::vector<unsigned char> active_;
};

// Stride 1, zero "same" padding, odd kernel. Weight [out_c, in_c, k, k].
template <typename T>
struct Conv2d : ParamBlock<T> {
  Conv2d() = default;
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel);

  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  Tensor<T> input_;
};

// Per-channel normalization over every axis except axis 1.
template <typename T>
struct BatchNorm : ParamBlock<T> {
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  double momentum = 0.1;
  double eps = 1e-5;
  bool used_batch_stats_ = false;
  Tensor<T> normalized_;
  std::vector<double> inv_std_;
};

// Inverted dropout; identity in eval mode.
template <typename T>
struct Dropout : ParamBlock<T> {
  Dropout() = default;
  explicit Dropout(double rate) : rate(rate) {}

  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  double rate = 0.5;
  std::vector<T> mask_;
};

// [N, C, spatial...] -> [N, C].
template <typename T>
struct GlobalAvgPool : ParamBlock<T> {
  Tensor<T> forward(const Tensor<T>& x, const LayerContext& ctx);
  Tensor<T> backward(const Tensor<T>& grad_out, bool need_input_grad);

  Shape input_shape_;
};

template <typename T>
using Layer = std::variant<Dense<T>, Relu<T>, Conv2d<T>, BatchNorm<T>, Dropout<T>, GlobalAvgPool<T>>;

template <typename T>
ParamBlock<T>& block(Layer<T>& layer) {
  return std::visit([](auto& l) -> ParamBlock<T>& { return l; }, layer);
}
template <typename T>
const ParamBlock<T>& block(const Layer<T>& layer) {
  return std::visit([](const auto& l) -> const ParamBlock<T>& { return l; }, layer);
}

std::string layer_kind(std::size_t variant_index);

namespace detail {

// C[m, n] (+)= A[m, k] * B[k, n]
template <typename T>
void matmul(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate);
// C[k, n] += A[m, k]^T * B[m, n]
template <typename T>
void matmul_at_b(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);
// C[m, k] = A[m, n] * B[k, n]^T
template <typename T>
void matmul_a_bt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k);

}  // namespace detail

}  // namespace cil::nn
