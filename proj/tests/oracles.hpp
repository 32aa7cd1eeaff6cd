#pragma once

// Reference implementations the library is checked against. They are written
// from the nn-core primitives only, without calling the code under test.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "cil/dataset.hpp"
#include "cil/exemplar_memory.hpp"
#include "cil/model.hpp"
#include "cil/multitask_trainer.hpp"
#include "cil/optim.hpp"
#include "cil/rng.hpp"

namespace cil::oracle {

template <typename T>
double accuracy_of(nn::Model<T>& m, const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  const auto& head = m.heads().front();
  const auto logits = m.forward(data::gather<T>(ds, idx), head.task_id, nn::Mode::kEval);
  const std::size_t w = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < w; ++c) {
      if (logits[i * w + c] > logits[i * w + best]) best = c;
    }
    correct += head.class_labels[best] == ds.labels[idx[i]];
  }
  return static_cast<double>(correct) / static_cast<double>(idx.size());
}

// Plain supervised loop over one head: same seeding conventions as the base
// trainer (init from seed, batch order from the salted shuffle stream), cosine
// or constant rate, early stopping with best-model restore.
template <typename T>
nn::Model<T> single_task_loop(const nn::BackboneSpec& spec, const LabelList& classes, const data::Dataset& ds,
                              const std::vector<std::size_t>& train, const std::vector<std::size_t>& val,
                              const multitask::BaseTrainConfig& cfg) {
  nn::Model<T> model(spec, {classes}, cfg.seed);
  nn::Sgd<T> opt(cfg.momentum);
  const auto mask = model.unfrozen_mask();
  Rng order_rng(mix_seed(cfg.seed, multitask::kShuffleSalt));
  std::vector<std::size_t> order = train;
  nn::Model<T> best_model = model;
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs_max; ++epoch) {
    shuffle(order, order_rng);
    const double lr = nn::learning_rate(cfg.lr_schedule, epoch);
    for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
      const std::size_t e = std::min(order.size(), b + cfg.batch_size);
      const std::vector<std::size_t> idx(order.begin() + b, order.begin() + e);
      nn::CrossEntropyTerm term;
      term.task_id = model.heads().front().task_id;
      for (std::size_t r = 0; r < idx.size(); ++r) {
        term.rows.push_back(r);
        term.targets.push_back(*model.heads().front().column_of(ds.labels[idx[r]]));
      }
      nn::LossSpec<T> loss;
      loss.cross_entropy.push_back(term);
      auto res = model.backward(data::gather<T>(ds, idx), loss, nn::Mode::kTrain, mask);
      opt.step(model, res.grads, lr, mask);
    }
    const double acc = accuracy_of(model, ds, val);
    if (acc > best) {
      best = acc;
      best_epoch = epoch;
      best_model = model;
    } else if (epoch - best_epoch >= cfg.early_stop_patience) {
      break;
    }
  }
  return best_model;
}

// Greedy herding written against the definition: at step k the candidate
// minimizing || mu - mean(S u {x}) || is taken, with the mean of the selected
// set recomputed from scratch; ties (equal up to rounding) keep the lower index.
inline std::vector<std::size_t> greedy_herding(const std::vector<std::vector<double>>& pts, std::size_t count) {
  const std::size_t n = pts.size(), d = pts.empty() ? 0 : pts[0].size();
  std::vector<double> mu(d, 0.0);
  for (const auto& p : pts) {
    for (std::size_t k = 0; k < d; ++k) mu[k] += p[k] / static_cast<double>(n);
  }
  std::vector<std::size_t> chosen;
  while (chosen.size() < std::min(count, n)) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      auto set = chosen;
      set.push_back(i);
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        double m = 0.0;
        for (auto j : set) m += pts[j][k];
        m /= static_cast<double>(set.size());
        dist += (mu[k] - m) * (mu[k] - m);
      }
      if (dist < best * (1.0 - 1e-12)) {
        best = dist;
        pick = i;
      }
    }
    chosen.push_back(pick);
  }
  return chosen;
}

// Store invariants: capacity, balance within one, distinct indices, labels
// matching their class.
inline bool store_invariants_hold(const exemplar::ExemplarStore& s, const data::Dataset& ds, std::string* why = nullptr) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  if (s.total() > s.capacity) return fail("total exceeds capacity");
  std::size_t lo = std::numeric_limits<std::size_t>::max(), hi = 0;
  for (const auto& [label, idx] : s.per_class) {
    lo = std::min(lo, idx.size());
    hi = std::max(hi, idx.size());
    std::vector<std::size_t> sorted = idx;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return fail("duplicate exemplar");
    for (auto i : idx) {
      if (ds.labels.at(i) != label) return fail("exemplar stored under the wrong class");
    }
  }
  if (!s.per_class.empty() && hi - lo > 1) return fail("classes differ by more than one exemplar");
  return true;
}

}  // namespace cil::oracle
