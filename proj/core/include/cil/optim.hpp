#pragma once

#include <cstddef>
#include <variant>
#include <vector>

#include "cil/model.hpp"

namespace cil::nn {

// SGD with heavy-ball momentum: v <- momentum * v + g; p <- p - lr * v.
template <typename T>
class Sgd {
 public:
  explicit Sgd(double momentum = 0.9) : momentum_(momentum) {}

  // Frozen parameters and their velocities are left untouched.
  void step(Model<T>& model, const Gradients<T>& grads, double lr, const FreezeMask& mask);

  double momentum() const { return momentum_; }
  const std::vector<Tensor<T>>& velocities() const { return velocity_; }

 private:
  double momentum_;
  std::vector<Tensor<T>> velocity_;
};

struct ConstantLr {
  double lr0 = 0.01;
};

struct CosineLr {
  double lr0 = 0.01;
  std::size_t total_epochs = 1;
};

using LrSchedule = std::variant<ConstantLr, CosineLr>;

// lr0 * (1 + cos(pi * epoch / total_epochs)) / 2, for 0 <= epoch <= total_epochs.
double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0);

double learning_rate(const LrSchedule& schedule, std::size_t epoch);

}  // namespace cil::nn
