#include "cil/training.hpp"

#include <algorithm>

namespace cil {

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size) {
  require(batch_size > 0, "batch size must be positive");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch_size) out.emplace_back(b, std::min(n, b + batch_size));
  return out;
}

template <typename T>
std::vector<std::size_t> predict_columns(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                         int task_id, std::size_t batch_size) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto [b, e] : batch_ranges(indices.size(), batch_size)) {
    const std::vector<std::size_t> chunk(indices.begin() + b, indices.begin() + e);
    const auto logits = model.forward(data::gather<T>(ds, chunk), task_id, nn::Mode::kEval);
    const std::size_t w = logits.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const T* row = logits.data() + i * w;
      out.push_back(static_cast<std::size_t>(std::max_element(row, row + w) - row));
    }
  }
  return out;
}

template <typename T>
metrics::ConfusionMatrix evaluate_head(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                       int task_id, std::size_t batch_size) {
  const auto& head = model.head(task_id);
  std::vector<std::size_t> truth;
  truth.reserve(indices.size());
  for (auto i : indices) {
    const auto col = head.column_of(ds.labels.at(i));
    if (!col) throw ValidationError("sample label " + std::to_string(ds.labels[i]) + " not covered by head " + std::to_string(task_id));
    truth.push_back(*col);
  }
  const std::size_t width = head.width();
  const auto preds = predict_columns(model, ds, indices, task_id, batch_size);
  return metrics::confusion(preds, truth, width);
}

template <typename T>
double head_accuracy(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices, int task_id,
                     std::size_t batch_size) {
  if (indices.empty()) throw ValidationError("accuracy over an empty sample set");
  return metrics::accuracy(evaluate_head(model, ds, indices, task_id, batch_size));
}

#define CIL_INSTANTIATE_TRAINING(T)                                                                                  \
  template std::vector<std::size_t> predict_columns<T>(nn::Model<T>&, const data::Dataset&,                         \
                                                       const std::vector<std::size_t>&, int, std::size_t);          \
  template metrics::ConfusionMatrix evaluate_head<T>(nn::Model<T>&, const data::Dataset&,                           \
                                                     const std::vector<std::size_t>&, int, std::size_t);            \
  template double head_accuracy<T>(nn::Model<T>&, const data::Dataset&, const std::vector<std::size_t>&, int,       \
                                   std::size_t);

CIL_INSTANTIATE_TRAINING(float)
CIL_INSTANTIATE_TRAINING(double)

}  // namespace cil
