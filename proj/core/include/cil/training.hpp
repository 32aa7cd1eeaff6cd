#pragma once

#include <cstddef>
#include <vector>

#include "cil/dataset.hpp"
#include "cil/metrics.hpp"
#include "cil/model.hpp"

namespace cil {

// Contiguous [begin, end) ranges of at most batch_size over n items.
std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch_size);

// Eval-mode argmax column of `task_id` for every listed sample.
template <typename T>
std::vector<std::size_t> predict_columns(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                         int task_id, std::size_t batch_size = 256);

// Confusion matrix over the head's columns; every sample's label must be
// covered by the head.
template <typename T>
metrics::ConfusionMatrix evaluate_head(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices,
                                       int task_id, std::size_t batch_size = 256);

// Top-1 accuracy of the head on the listed samples.
template <typename T>
double head_accuracy(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& indices, int task_id,
                     std::size_t batch_size = 256);

}  // namespace cil
