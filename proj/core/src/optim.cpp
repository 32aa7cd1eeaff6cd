#include "cil/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace cil::nn {

template <typename T>
void Sgd<T>::step(Model<T>& model, const Gradients<T>& grads, double lr, const FreezeMask& mask) {
  if (!(lr > 0.0)) throw ValidationError("learning rate must be positive");
  auto params = model.parameters();
  if (grads.size() != params.size() || mask.frozen.size() != params.size()) {
    throw ValidationError("optimizer step: " + std::to_string(grads.size()) + " gradients for " +
                          std::to_string(params.size()) + " parameters");
  }
  if (velocity_.empty()) {
    for (const auto* p : params) velocity_.emplace_back(p->shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    if (grads[i].shape() != p.shape() || velocity_[i].shape() != p.shape()) {
      throw ValidationError("optimizer step: shape mismatch for parameter " + std::to_string(i));
    }
    if (mask.frozen[i]) continue;
    T* v = velocity_[i].data();
    const T* g = grads[i].data();
    T* w = p.data();
    const T mu = static_cast<T>(momentum_);
    const T rate = static_cast<T>(lr);
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] + g[k];
      w[k] -= rate * v[k];
    }
  }
}

double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0) {
  if (total_epochs == 0) throw ValidationError("cosine schedule needs a positive epoch budget");
  if (epoch > total_epochs) {
    throw ValidationError("epoch " + std::to_string(epoch) + " beyond cosine schedule of " + std::to_string(total_epochs));
  }
  if (epoch == total_epochs) return 0.0;
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total_epochs)));
}

double learning_rate(const LrSchedule& schedule, std::size_t epoch) {
  if (const auto* c = std::get_if<ConstantLr>(&schedule)) return c->lr0;
  const auto& cos = std::get<CosineLr>(schedule);
  return cosine_lr(epoch, cos.total_epochs, cos.lr0);
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace cil::nn
