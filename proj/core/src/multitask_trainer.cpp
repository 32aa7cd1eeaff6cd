#include "cil/multitask_trainer.hpp"

#include <chrono>
#include <map>
#include <set>
#include <sstream>

#include "cil/rng.hpp"
#include "cil/training.hpp"

namespace cil::multitask {

void BaseTrainConfig::validate() const {
  require(epochs_max > 0, "base training needs a positive epoch budget");
  require(batch_size > 0, "batch size must be positive");
  require(early_stop_patience > 0, "early stopping patience must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  if (const auto* cos = std::get_if<nn::CosineLr>(&lr_schedule)) {
    require(cos->lr0 > 0.0 && cos->total_epochs >= epochs_max, "cosine schedule must span the epoch budget");
  } else {
    require(std::get<nn::ConstantLr>(lr_schedule).lr0 > 0.0, "learning rate must be positive");
  }
}

std::string TrainLog::to_csv() const {
  std::ostringstream out;
  out.precision(9);
  const std::size_t heads = epochs.empty() ? 0 : epochs.front().head_losses.size();
  out << "epoch";
  for (std::size_t h = 0; h < heads; ++h) out << ",loss_head" << h;
  out << ",val_acc,seconds\n";
  for (const auto& e : epochs) {
    out << e.epoch;
    for (double l : e.head_losses) out << "," << l;
    out << "," << e.val_accuracy << "," << e.seconds << "\n";
  }
  return out.str();
}

template <typename T>
BaseTrainResult<T> train_base(const nn::BackboneSpec& spec, const tasks::TaskPlan& plan, const data::Dataset& ds,
                              const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                              const BaseTrainConfig& cfg) {
  cfg.validate();
  plan.validate();
  require(!train.empty() && !val.empty(), "base training needs nonempty train and validation sets");
  require(cfg.head_weights.empty() || cfg.head_weights.size() == plan.tasks.size(), "one head weight per task expected");
  {
    std::set<Label> present;
    for (auto i : train) present.insert(ds.labels.at(i));
    for (Label l : plan.base_classes) require(present.count(l) > 0, "base class " + std::to_string(l) + " missing from training data");
  }

  nn::Model<T> model(spec, plan.label_lists(), cfg.seed);
  // Global label -> local column, per head.
  std::vector<std::map<Label, std::size_t>> columns(plan.tasks.size());
  for (std::size_t h = 0; h < plan.tasks.size(); ++h) {
    for (std::size_t c = 0; c < plan.tasks[h].class_labels.size(); ++c) columns[h][plan.tasks[h].class_labels[c]] = c;
  }
  const nn::FreezeMask mask = model.unfrozen_mask();
  nn::Sgd<T> opt(cfg.momentum);
  Rng shuffle_rng(mix_seed(cfg.seed, kShuffleSalt));
  std::vector<std::size_t> order = train;

  BaseTrainResult<T> result{model, {}};
  double best = -1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_max; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const double lr = nn::learning_rate(cfg.lr_schedule, epoch);
    shuffle(order, shuffle_rng);
    std::vector<double> loss_sum(plan.tasks.size(), 0.0);
    std::vector<std::size_t> loss_batches(plan.tasks.size(), 0);
    for (auto [b, e] : batch_ranges(order.size(), cfg.batch_size)) {
      const std::vector<std::size_t> idx(order.begin() + b, order.begin() + e);
      nn::LossSpec<T> loss;
      for (std::size_t h = 0; h < plan.tasks.size(); ++h) {
        nn::CrossEntropyTerm term;
        term.task_id = plan.tasks[h].task_id;
        term.weight = cfg.head_weights.empty() ? 1.0 : cfg.head_weights[h];
        for (std::size_t r = 0; r < idx.size(); ++r) {
          auto it = columns[h].find(ds.labels[idx[r]]);
          if (it == columns[h].end()) continue;
          term.rows.push_back(r);
          term.targets.push_back(it->second);
        }
        loss.cross_entropy.push_back(std::move(term));
      }
      auto res = model.backward(data::gather<T>(ds, idx), loss, nn::Mode::kTrain, mask);
      for (std::size_t h = 0; h < plan.tasks.size(); ++h) {
        if (loss.cross_entropy[h].rows.empty()) continue;
        loss_sum[h] += res.cross_entropy_values[h];
        ++loss_batches[h];
      }
      opt.step(model, res.grads, lr, mask);
    }
    EpochLog log;
    log.epoch = epoch;
    for (std::size_t h = 0; h < plan.tasks.size(); ++h) {
      if (loss_batches[h] == 0) {
        throw ValidationError("head " + std::to_string(h) + " matched no training sample during epoch " + std::to_string(epoch));
      }
      log.head_losses.push_back(loss_sum[h] / static_cast<double>(loss_batches[h]));
    }
    log.val_accuracy = head_accuracy(model, ds, val, plan.tasks[0].task_id);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.epochs.push_back(log);
    if (log.val_accuracy > best) {
      best = log.val_accuracy;
      result.log.best_epoch = epoch;
      result.log.best_val_accuracy = best;
      result.model = model;
    } else if (epoch - result.log.best_epoch >= cfg.early_stop_patience) {
      break;
    }
  }
  return result;
}

template <typename T>
nn::Model<T> extract_for_incremental(const nn::Model<T>& model, const tasks::TaskPlan& plan) {
  plan.validate();
  if (model.heads().size() != plan.tasks.size()) {
    throw ValidationError("model has " + std::to_string(model.heads().size()) + " heads but the plan has " +
                          std::to_string(plan.tasks.size()) + " tasks");
  }
  for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
    if (model.heads()[i].class_labels != plan.tasks[i].class_labels) throw ValidationError("model heads do not match the plan");
  }
  nn::Model<T> out = model;
  out.heads().erase(out.heads().begin() + 1, out.heads().end());
  return out;
}

template BaseTrainResult<float> train_base<float>(const nn::BackboneSpec&, const tasks::TaskPlan&, const data::Dataset&,
                                                  const std::vector<std::size_t>&, const std::vector<std::size_t>&,
                                                  const BaseTrainConfig&);
template BaseTrainResult<double> train_base<double>(const nn::BackboneSpec&, const tasks::TaskPlan&, const data::Dataset&,
                                                    const std::vector<std::size_t>&, const std::vector<std::size_t>&,
                                                    const BaseTrainConfig&);
template nn::Model<float> extract_for_incremental<float>(const nn::Model<float>&, const tasks::TaskPlan&);
template nn::Model<double> extract_for_incremental<double>(const nn::Model<double>&, const tasks::TaskPlan&);

}  // namespace cil::multitask
