#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cil/dataset.hpp"
#include "cil/exemplar_memory.hpp"
#include "cil/metrics.hpp"
#include "cil/model.hpp"

namespace cil::incremental {

// Which loss terms take part in a step. N = new-class samples, O = exemplars.
struct LossSwitches {
  bool ce_new = true;
  bool ce_old = false;
  bool kd_new = false;
  bool kd_old = false;
  double temperature = 2.0;
  double weight_ce_new = 1.0;
  double weight_ce_old = 1.0;
  double weight_kd_new = 1.0;
  double weight_kd_old = 1.0;

  // A term is active when switched on with a nonzero weight.
  bool ce_new_active() const { return ce_new && weight_ce_new != 0.0; }
  bool ce_old_active() const { return ce_old && weight_ce_old != 0.0; }
  bool kd_new_active() const { return kd_new && weight_kd_new != 0.0; }
  bool kd_old_active() const { return kd_old && weight_kd_old != 0.0; }
  bool uses_exemplars() const { return ce_old_active() || kd_old_active(); }
  bool uses_teacher() const { return kd_new_active() || kd_old_active(); }

  // "CE_N+CE_O+KD_N" style label.
  std::string label() const;
  void validate() const;
};

// The six loss configurations of the ablation grid, in table order.
std::array<LossSwitches, 6> loss_grid();

struct FixedPhase {
  double lr = 0.01;
  std::size_t epochs = 10;
  bool cosine = false;
};

struct EarlyStopPhase {
  double lr = 0.001;
  std::size_t epochs_max = 30;
  std::size_t patience = 5;
  bool cosine = false;
};

struct BalancedFinetune {
  std::size_t per_class_m = 10;
  std::size_t epochs = 5;
};

struct StepConfig {
  LossSwitches losses;
  FixedPhase phase1;
  EarlyStopPhase phase2;
  std::size_t batch_size = 32;
  double momentum = 0.9;
  double init_scale = 0.01;
  bool dropout_in_finetune = true;
  std::optional<BalancedFinetune> balanced_finetune;
  std::uint64_t seed = 0;

  void validate() const;
};

template <typename T>
struct IncrementalState {
  nn::Model<T> student;
  std::optional<nn::Model<T>> teacher;
  exemplar::ExemplarStore store;
  LabelList seen_classes;
  std::size_t step_index = 0;
};

struct StepData {
  const data::Dataset* dataset = nullptr;
  std::vector<std::size_t> new_train;  // training samples of the new classes
  std::vector<std::size_t> val;        // validation samples of all classes seen after the step
};

struct StepReport {
  std::size_t step = 0;
  LabelList new_classes;
  std::size_t teacher_width = 0;
  std::size_t student_width = 0;
  std::size_t corpus_new = 0;
  std::size_t corpus_old = 0;
  std::vector<double> phase1_losses;
  // phase2_val_accuracy[0] is measured before the first phase-2 epoch.
  std::vector<double> phase2_val_accuracy;
  std::vector<double> phase2_losses;
  std::size_t phase2_best_epoch = 0;
  std::size_t phase2_epochs_run = 0;
  double best_val_accuracy = 0.0;
  double final_val_accuracy = 0.0;
  std::vector<double> balanced_losses;
  std::uint64_t backbone_checksum_phase1_start = 0;
  std::uint64_t backbone_checksum_phase1_end = 0;
  std::uint64_t teacher_checksum_start = 0;
  std::uint64_t teacher_checksum_end = 0;
  // Largest number of student columns any KD term read during the step.
  std::size_t kd_max_compared_width = 0;
  std::size_t kd_terms_evaluated = 0;

  nlohmann::json to_json() const;
};

// One incremental step: snapshot teacher, expand the head, phase 1 with a
// frozen backbone, phase 2 unfrozen with early stopping on all-seen
// validation accuracy, optional balanced fine-tune, fold new classes into the
// exemplar store.
template <typename T>
StepReport run_step(IncrementalState<T>& state, const LabelList& new_classes, const StepData& data, const StepConfig& cfg);

struct StepEval {
  std::size_t step = 0;
  LabelList class_labels;  // confusion matrix column order
  double accuracy = 0.0;
  std::optional<double> accuracy_old;
  std::optional<double> accuracy_new;
  metrics::ConfusionMatrix confusion;
};

struct ExperimentConfig {
  StepConfig step;
  std::size_t exemplar_capacity = 100;
  exemplar::Strategy strategy = exemplar::Strategy::kRandom;
  std::uint64_t seed = 0;
};

struct ExperimentReport {
  std::vector<StepEval> evals;
  std::vector<StepReport> steps;
  std::optional<double> avg_incremental_accuracy;
  LabelList class_order;
  exemplar::ExemplarStore final_store;
  nlohmann::json config;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;

  // Wall-clock values live under "timing" only.
  nlohmann::json to_json() const;
  // step,n_classes,acc,acc_old,acc_new
  std::string steps_csv() const;
};

// Drops wall-clock fields so two reports can be compared byte for byte.
nlohmann::json strip_timing(nlohmann::json report);

template <typename T>
ExperimentReport run_experiment(nn::Model<T> base_model, const data::Dataset& ds, const data::Split& split,
                                const data::ClassSchedule& schedule, const ExperimentConfig& cfg);

}  // namespace cil::incremental
