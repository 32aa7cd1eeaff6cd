#include "cil/task_factory.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>

#include "cil/errors.hpp"
#include "cil/rng.hpp"

namespace cil::tasks {

namespace {

LabelList sorted_unique(LabelList labels) {
  std::sort(labels.begin(), labels.end());
  return labels;
}

void check_base(const LabelList& base) {
  require(base.size() >= 2, "base class set needs at least 2 classes");
  const std::set<Label> unique(base.begin(), base.end());
  require(unique.size() == base.size(), "base classes must be distinct");
}

LabelList sample_subset(const LabelList& from, std::size_t size, Rng& rng) {
  LabelList pool = from;
  // Partial Fisher-Yates: the first `size` slots are a uniform size-subset.
  for (std::size_t i = 0; i < size; ++i) {
    const std::size_t j = i + uniform_index(rng, pool.size() - i);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(size);
  return sorted_unique(std::move(pool));
}

// Draws subsets until one is new; the caller guarantees one exists.
LabelList sample_distinct(const LabelList& from, std::size_t size, const std::set<LabelList>& taken, Rng& rng) {
  // Enumerate when the space is small enough that rejection could stall.
  const std::uint64_t space = binomial(from.size(), size);
  if (space <= 4096) {
    std::vector<LabelList> free;
    std::vector<bool> pick(from.size(), false);
    std::fill(pick.begin(), pick.begin() + size, true);
    do {
      LabelList s;
      for (std::size_t i = 0; i < from.size(); ++i) {
        if (pick[i]) s.push_back(from[i]);
      }
      s = sorted_unique(std::move(s));
      if (!taken.count(s)) free.push_back(std::move(s));
    } while (std::prev_permutation(pick.begin(), pick.end()));
    if (free.empty()) throw ValidationError("no distinct subset of size " + std::to_string(size) + " left");
    std::sort(free.begin(), free.end());
    return free[uniform_index(rng, free.size())];
  }
  while (true) {
    LabelList s = sample_subset(from, size, rng);
    if (!taken.count(s)) return s;
  }
}

}  // namespace

std::uint64_t enumerate_task_count(unsigned n) {
  require(n >= 1, "task count needs at least one class");
  if (n > 62) throw ValidationError("task count overflows for N > 62");
  return (std::uint64_t{1} << n) - 1;
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  std::uint64_t r = 1;
  for (std::uint64_t i = 1; i <= k; ++i) {
    const std::uint64_t num = n - k + i;
    // r * num / i is exact at every step; guard the multiplication.
    if (r > std::numeric_limits<std::uint64_t>::max() / num) return std::numeric_limits<std::uint64_t>::max();
    r = r * num / i;
  }
  return r;
}

std::vector<LabelList> TaskPlan::label_lists() const {
  std::vector<LabelList> out;
  for (const auto& t : tasks) out.push_back(t.class_labels);
  return out;
}

void TaskPlan::validate() const {
  check_base(base_classes);
  require(!tasks.empty(), "task plan is empty");
  require(sorted_unique(tasks[0].class_labels) == sorted_unique(base_classes), "first task must cover the full base set");
  const std::set<Label> base(base_classes.begin(), base_classes.end());
  std::set<LabelList> seen;
  for (const auto& t : tasks) {
    require(t.class_labels.size() >= 2, "every task needs at least 2 classes");
    for (Label l : t.class_labels) require(base.count(l) > 0, "task label " + std::to_string(l) + " is not a base class");
    const std::set<Label> unique(t.class_labels.begin(), t.class_labels.end());
    require(unique.size() == t.class_labels.size(), "task labels must be distinct");
    require(seen.insert(sorted_unique(t.class_labels)).second, "task label sets must be pairwise distinct");
  }
}

TaskPlan make_decreasing_plan(const LabelList& base_classes, const std::vector<std::size_t>& sizes, std::uint64_t seed,
                              bool nested) {
  check_base(base_classes);
  require(!sizes.empty(), "head size list is empty");
  require(sizes[0] == base_classes.size(), "first head must cover all " + std::to_string(base_classes.size()) +
                                               " base classes, got " + std::to_string(sizes[0]));
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    require(sizes[i] >= 2, "head sizes must be at least 2");
    require(sizes[i] <= base_classes.size(), "head size " + std::to_string(sizes[i]) + " exceeds the base class count");
    if (i > 0) require(sizes[i] <= sizes[i - 1], "head sizes must be nonincreasing");
  }
  if (!nested) {
    std::map<std::size_t, std::uint64_t> wanted;
    for (std::size_t i = 1; i < sizes.size(); ++i) ++wanted[sizes[i]];
    for (const auto& [size, count] : wanted) {
      const std::uint64_t available = binomial(base_classes.size(), size) - (size == base_classes.size() ? 1 : 0);
      if (count > available) {
        throw ValidationError("requested " + std::to_string(count) + " distinct tasks of size " + std::to_string(size) +
                              " but only " + std::to_string(available) + " exist");
      }
    }
  }

  TaskPlan plan;
  plan.base_classes = base_classes;
  plan.seed = seed;
  plan.tasks.push_back({0, sorted_unique(base_classes)});
  std::set<LabelList> taken{plan.tasks[0].class_labels};
  Rng rng(seed);
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    const LabelList& from = nested ? plan.tasks.back().class_labels : plan.tasks[0].class_labels;
    LabelList chosen;
    try {
      chosen = sample_distinct(from, sizes[i], taken, rng);
    } catch (const ValidationError&) {
      throw ValidationError("nested plan cannot find a distinct subset of size " + std::to_string(sizes[i]));
    }
    taken.insert(chosen);
    plan.tasks.push_back({static_cast<int>(i), std::move(chosen)});
  }
  plan.validate();
  return plan;
}

TaskPlan make_fixed_size_plan(const LabelList& base_classes, std::size_t head_count, std::size_t size, std::uint64_t seed) {
  check_base(base_classes);
  require(head_count >= 1, "head count must be positive");
  require(size >= 2, "task size must be at least 2");
  require(size <= base_classes.size(), "task size exceeds the base class count");
  const std::uint64_t available = binomial(base_classes.size(), size) - (size == base_classes.size() ? 1 : 0);
  if (head_count - 1 > available) {
    throw ValidationError(std::to_string(head_count - 1) + " distinct tasks of size " + std::to_string(size) +
                          " requested but only " + std::to_string(available) + " exist");
  }
  std::vector<std::size_t> sizes{base_classes.size()};
  sizes.resize(head_count, size);
  return make_decreasing_plan(base_classes, sizes, seed);
}

TaskPlan make_explicit_plan(const LabelList& base_classes, const std::vector<LabelList>& tasks, std::uint64_t seed) {
  TaskPlan plan;
  plan.base_classes = base_classes;
  plan.seed = seed;
  for (std::size_t i = 0; i < tasks.size(); ++i) plan.tasks.push_back({static_cast<int>(i), sorted_unique(tasks[i])});
  plan.validate();
  return plan;
}

nlohmann::json plan_to_json(const TaskPlan& plan) {
  return {{"tasks", plan.label_lists()}, {"base_classes", plan.base_classes}, {"seed", plan.seed}};
}

TaskPlan plan_from_json(const nlohmann::json& j) {
  try {
    return make_explicit_plan(j.at("base_classes").get<LabelList>(), j.at("tasks").get<std::vector<LabelList>>(),
                              j.value("seed", std::uint64_t{0}));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad task plan: ") + e.what());
  }
}

}  // namespace cil::tasks
