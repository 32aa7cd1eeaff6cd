#pragma once

#include <cstdint>
#include <vector>

#include <nlohmann/json.hpp>

#include "cil/types.hpp"

namespace cil::tasks {

struct TaskSpec {
  int task_id = 0;
  LabelList class_labels;  // ascending

  bool operator==(const TaskSpec&) const = default;
};

// tasks[0] is always the full base set; all label sets are pairwise distinct.
struct TaskPlan {
  std::vector<TaskSpec> tasks;
  LabelList base_classes;
  std::uint64_t seed = 0;

  std::vector<LabelList> label_lists() const;
  void validate() const;

  bool operator==(const TaskPlan&) const = default;
};

// 2^N - 1 non-empty subsets of N classes.
std::uint64_t enumerate_task_count(unsigned n);

// C(n, k), saturating at UINT64_MAX.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

// sizes[0] must equal |base|. With nested set, every task is drawn from the
// previous task's classes instead of from the full base set.
TaskPlan make_decreasing_plan(const LabelList& base_classes, const std::vector<std::size_t>& sizes, std::uint64_t seed,
                              bool nested = false);

TaskPlan make_fixed_size_plan(const LabelList& base_classes, std::size_t head_count, std::size_t size, std::uint64_t seed);

// Plan from explicit label lists; the first list must be the full base set.
TaskPlan make_explicit_plan(const LabelList& base_classes, const std::vector<LabelList>& tasks, std::uint64_t seed = 0);

nlohmann::json plan_to_json(const TaskPlan& plan);
TaskPlan plan_from_json(const nlohmann::json& j);

}  // namespace cil::tasks
