#pragma once

#include <cstddef>
#include <span>

#include "cil/tensor.hpp"

namespace cil::nn {

// Scalar loss value plus its gradient with respect to the (student) logits.
template <typename T>
struct LossGrad {
  double value = 0.0;
  Tensor<T> grad;
};

// Mean over rows of -log softmax(logits)[target]. logits is [N, W], N > 0.
template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

// Distillation loss: T^2 * mean_rows KL(softmax(teacher/T) || softmax(student/T)).
// Both inputs are [N, W] over the same class columns.
template <typename T>
LossGrad<T> kd_loss(const Tensor<T>& student, const Tensor<T>& teacher, double temperature);

// Row-wise numerically stable log-softmax of logits / temperature.
template <typename T>
std::vector<double> log_softmax_row(const T* row, std::size_t width, double temperature = 1.0);

}  // namespace cil::nn
