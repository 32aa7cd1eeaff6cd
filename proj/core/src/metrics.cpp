#include "cil/metrics.hpp"

#include <numeric>

#include "cil/errors.hpp"

namespace cil::metrics {

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t s = 0;
  for (std::size_t p = 0; p < classes; ++p) s += at(truth, p);
  return s;
}

std::uint64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels, std::size_t classes) {
  if (preds.size() != labels.size()) throw ValidationError("confusion: predictions and labels differ in length");
  ConfusionMatrix cm(classes);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] >= classes || preds[i] >= classes) {
      throw ValidationError("confusion: label out of range at sample " + std::to_string(i));
    }
    ++cm.at(labels[i], preds[i]);
  }
  return cm;
}

double group_accuracy(const ConfusionMatrix& cm, const std::set<std::size_t>& group, Averaging averaging) {
  if (group.empty()) throw ValidationError("group accuracy over an empty group");
  std::uint64_t correct = 0, total = 0;
  double recall_sum = 0.0;
  for (std::size_t c : group) {
    if (c >= cm.classes) throw ValidationError("group class " + std::to_string(c) + " outside confusion matrix");
    const std::uint64_t row = cm.row_sum(c);
    if (averaging == Averaging::kMacro) {
      if (row == 0) throw ValidationError("class " + std::to_string(c) + " has no samples for macro accuracy");
      recall_sum += static_cast<double>(cm.at(c, c)) / static_cast<double>(row);
    }
    correct += cm.at(c, c);
    total += row;
  }
  if (total == 0) throw ValidationError("group has no samples");
  if (averaging == Averaging::kMacro) return recall_sum / static_cast<double>(group.size());
  return static_cast<double>(correct) / static_cast<double>(total);
}

double accuracy(const ConfusionMatrix& cm) {
  std::set<std::size_t> all;
  for (std::size_t c = 0; c < cm.classes; ++c) all.insert(c);
  return group_accuracy(cm, all);
}

double avg_incremental_accuracy(std::span<const double> step_accuracies, bool include_base) {
  const auto steps = include_base ? step_accuracies : step_accuracies.subspan(std::min<std::size_t>(1, step_accuracies.size()));
  if (steps.empty()) throw ValidationError("average incremental accuracy needs at least one incremental step");
  return std::accumulate(steps.begin(), steps.end(), 0.0) / static_cast<double>(steps.size());
}

std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& labels) {
  std::string out = "true\\pred";
  for (std::size_t c = 0; c < cm.classes; ++c) out += "," + (c < labels.size() ? labels[c] : std::to_string(c));
  out += "\n";
  for (std::size_t t = 0; t < cm.classes; ++t) {
    out += t < labels.size() ? labels[t] : std::to_string(t);
    for (std::size_t p = 0; p < cm.classes; ++p) out += "," + std::to_string(cm.at(t, p));
    out += "\n";
  }
  return out;
}

}  // namespace cil::metrics
