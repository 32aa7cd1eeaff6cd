#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cil/dataset.hpp"
#include "cil/model.hpp"
#include "cil/optim.hpp"
#include "cil/task_factory.hpp"

namespace cil::multitask {

struct BaseTrainConfig {
  std::size_t epochs_max = 50;
  std::size_t batch_size = 32;
  nn::LrSchedule lr_schedule = nn::CosineLr{0.01, 50};
  std::size_t early_stop_patience = 10;
  double momentum = 0.9;
  // Per-head loss weights in plan order; empty means all 1.
  std::vector<double> head_weights;
  std::uint64_t seed = 0;

  void validate() const;
};

// Salt for the shuffle stream: the model is initialized from Rng(seed), batch
// order comes from Rng(mix_seed(seed, kShuffleSalt)).
inline constexpr std::uint64_t kShuffleSalt = 0x5348;

struct EpochLog {
  std::size_t epoch = 0;
  std::vector<double> head_losses;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_accuracy = 0.0;

  // epoch,loss_head0..loss_headK,val_acc,seconds
  std::string to_csv() const;
};

template <typename T>
struct BaseTrainResult {
  nn::Model<T> model;
  TrainLog log;
};

// Hard parameter sharing: one backbone, one head per plan task, the batch loss
// is the weighted sum of each head's cross entropy over the batch rows whose
// label it covers. Early stopping on the full-set head's validation accuracy;
// the returned model is the best-validation epoch.
template <typename T>
BaseTrainResult<T> train_base(const nn::BackboneSpec& spec, const tasks::TaskPlan& plan, const data::Dataset& ds,
                              const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                              const BaseTrainConfig& cfg);

// Keeps the backbone and the task-0 (full base set) head only.
template <typename T>
nn::Model<T> extract_for_incremental(const nn::Model<T>& model, const tasks::TaskPlan& plan);

}  // namespace cil::multitask
