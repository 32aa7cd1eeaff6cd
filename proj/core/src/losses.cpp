#include "cil/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cil::nn {

template <typename T>
std::vector<double> log_softmax_row(const T* row, std::size_t width, double temperature) {
  std::vector<double> out(width);
  double peak = -INFINITY;
  for (std::size_t j = 0; j < width; ++j) peak = std::max(peak, static_cast<double>(row[j]) / temperature);
  double sum = 0.0;
  for (std::size_t j = 0; j < width; ++j) {
    out[j] = static_cast<double>(row[j]) / temperature - peak;
    sum += std::exp(out[j]);
  }
  const double log_sum = std::log(sum);
  for (double& v : out) v -= log_sum;
  return out;
}

template <typename T>
LossGrad<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2) throw ValidationError("cross entropy expects [N, W] logits");
  const std::size_t n = logits.dim(0), width = logits.dim(1);
  if (n == 0) throw ValidationError("cross entropy on an empty batch");
  if (targets.size() != n) throw ValidationError("cross entropy: " + std::to_string(targets.size()) +
                                                 " targets for " + std::to_string(n) + " rows");
  LossGrad<T> out{0.0, Tensor<T>(logits.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= width) {
      throw ValidationError("label " + std::to_string(targets[i]) + " out of range for width " + std::to_string(width));
    }
    const auto logp = log_softmax_row(logits.data() + i * width, width);
    out.value -= logp[targets[i]] * inv_n;
    for (std::size_t j = 0; j < width; ++j) {
      const double p = std::exp(logp[j]);
      out.grad[i * width + j] = static_cast<T>((p - (j == targets[i] ? 1.0 : 0.0)) * inv_n);
    }
  }
  if (!std::isfinite(out.value)) throw NumericalError("non-finite cross entropy");
  return out;
}

template <typename T>
LossGrad<T> kd_loss(const Tensor<T>& student, const Tensor<T>& teacher, double temperature) {
  if (!(temperature > 0.0)) throw ValidationError("distillation temperature must be positive");
  if (student.rank() != 2 || student.shape() != teacher.shape()) {
    throw ValidationError("distillation width mismatch: student " + shape_string(student.shape()) + " vs teacher " +
                          shape_string(teacher.shape()));
  }
  const std::size_t n = student.dim(0), width = student.dim(1);
  if (n == 0) throw ValidationError("distillation on an empty batch");
  LossGrad<T> out{0.0, Tensor<T>(student.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  const double t2 = temperature * temperature;
  for (std::size_t i = 0; i < n; ++i) {
    const auto log_s = log_softmax_row(student.data() + i * width, width, temperature);
    const auto log_t = log_softmax_row(teacher.data() + i * width, width, temperature);
    double kl = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      const double pt = std::exp(log_t[j]);
      kl += pt * (log_t[j] - log_s[j]);
      // d/dz_s of T^2 * KL = T * (p_s - p_t)
      out.grad[i * width + j] = static_cast<T>(temperature * (std::exp(log_s[j]) - pt) * inv_n);
    }
    out.value += t2 * std::max(kl, 0.0) * inv_n;
  }
  if (!std::isfinite(out.value)) throw NumericalError("non-finite distillation loss");
  return out;
}

template std::vector<double> log_softmax_row<float>(const float*, std::size_t, double);
template std::vector<double> log_softmax_row<double>(const double*, std::size_t, double);
template LossGrad<float> cross_entropy<float>(const Tensor<float>&, std::span<const std::size_t>);
template LossGrad<double> cross_entropy<double>(const Tensor<double>&, std::span<const std::size_t>);
template LossGrad<float> kd_loss<float>(const Tensor<float>&, const Tensor<float>&, double);
template LossGrad<double> kd_loss<double>(const Tensor<double>&, const Tensor<double>&, double);

}  // namespace cil::nn
