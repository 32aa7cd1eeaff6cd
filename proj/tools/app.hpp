#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cil/dataset.hpp"
#include "cil/exemplar_memory.hpp"
#include "cil/incremental.hpp"
#include "cil/multitask_trainer.hpp"
#include "cil/task_factory.hpp"

namespace cil::app {

enum ExitCode : int { kOk = 0, kValidation = 1, kNumerical = 2, kIo = 3 };

struct PlanSpec {
  std::string mode = "decreasing";  // decreasing | fixed | explicit
  std::vector<std::size_t> sizes;    // decreasing; empty = single full-set task
  std::size_t head_count = 1;        // fixed
  std::size_t size = 0;              // fixed
  std::vector<LabelList> tasks;      // explicit
  bool nested = false;

  tasks::TaskPlan build(const LabelList& base_classes, std::uint64_t seed) const;
};

std::string plan_label(const tasks::TaskPlan& plan);

struct RunConfig {
  nlohmann::json resolved;

  std::optional<std::string> dataset_path;
  data::BlobSpec synth;
  data::SplitSpec split;
  std::string schedule;
  data::ClassOrder class_order = data::ClassOrder::kSeededPermutation;
  nlohmann::json backbone;  // without input_shape; filled from the dataset
  PlanSpec plan;
  multitask::BaseTrainConfig base;
  incremental::StepConfig step;
  std::size_t exemplar_capacity = 100;
  exemplar::Strategy strategy = exemplar::Strategy::kRandom;
  std::vector<std::uint64_t> seeds;
  std::string out;
  std::size_t jobs = 1;
  std::vector<std::size_t> exemplar_grid;
  std::optional<std::vector<PlanSpec>> head_configs;
};

// Built-in defaults every config is merged onto.
nlohmann::json default_config();

// defaults <- file <- overrides (each "a.b=value"; value parsed as JSON when
// possible, else taken as a string). Unknown keys are rejected.
nlohmann::json resolve_config(const nlohmann::json& file, const std::vector<std::string>& overrides);

RunConfig parse_config(const nlohmann::json& resolved);

// Per-seed derived streams.
struct CellSeeds {
  std::uint64_t split, schedule, plan, train;
};
CellSeeds cell_seeds(std::uint64_t seed);

// Everything one (seed, plan) cell needs before training starts.
struct Prepared {
  std::uint64_t seed = 0;
  data::Split split;
  data::ClassSchedule schedule;
  tasks::TaskPlan plan;
  nn::BackboneSpec backbone;
  std::vector<std::size_t> base_train, base_val, base_test;
};

data::Dataset load_or_synth(const RunConfig& cfg);
Prepared prepare(const RunConfig& cfg, const data::Dataset& ds, std::uint64_t seed, const PlanSpec& plan);
multitask::BaseTrainResult<float> train_base_cell(const RunConfig& cfg, const data::Dataset& ds, const Prepared& p);
incremental::ExperimentReport run_cil_cell(const RunConfig& cfg, const data::Dataset& ds, const Prepared& p,
                                           const nn::Model<float>& base_model, const incremental::LossSwitches& losses,
                                           std::size_t exemplar_capacity);

// Runs fn(0..n-1) on up to `jobs` threads; rethrows the lowest-index failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn);

// Full command line entry point; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cil::app
