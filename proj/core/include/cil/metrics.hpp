#pragma once

#include <cstddef>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace cil::metrics {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::uint64_t> counts;

  explicit ConfusionMatrix(std::size_t c = 0) : classes(c), counts(c * c, 0) {}

  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts[truth * classes + pred]; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts[truth * classes + pred]; }
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t total() const;

  bool operator==(const ConfusionMatrix&) const = default;
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t classes);

enum class Averaging { kMicro, kMacro };

// Micro: sum of diagonal over sum of rows within the group. Macro: mean of
// per-class recall over the group.
double group_accuracy(const ConfusionMatrix& cm, const std::set<std::size_t>& group,
                      Averaging averaging = Averaging::kMicro);

double accuracy(const ConfusionMatrix& cm);

// Mean of per-step accuracies; the base step (index 0) is dropped unless
// include_base is set.
double avg_incremental_accuracy(std::span<const double> step_accuracies, bool include_base = false);

std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& labels);

}  // namespace cil::metrics
