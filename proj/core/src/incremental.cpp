#include "cil/incremental.hpp"

#include <algorithm>
#include <chrono>
#include <set>
#include <sstream>

#include "cil/optim.hpp"
#include "cil/rng.hpp"
#include "cil/training.hpp"

namespace cil::incremental {

using nlohmann::json;

std::string LossSwitches::label() const {
  std::string out;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!out.empty()) out += "+";
    out += name;
  };
  add(ce_new, "CE_N");
  add(ce_old, "CE_O");
  add(kd_new, "KD_N");
  add(kd_old, "KD_O");
  return out;
}

void LossSwitches::validate() const {
  require(ce_new, "the new-class cross entropy term must be enabled");
  require(temperature > 0.0, "distillation temperature must be positive");
  for (double w : {weight_ce_new, weight_ce_old, weight_kd_new, weight_kd_old}) {
    require(w >= 0.0, "loss weights must be nonnegative");
  }
}

std::array<LossSwitches, 6> loss_grid() {
  auto make = [](bool ce_old, bool kd_new, bool kd_old) {
    LossSwitches s;
    s.ce_old = ce_old;
    s.kd_new = kd_new;
    s.kd_old = kd_old;
    return s;
  };
  return {make(false, false, false), make(false, true, false), make(true, false, false),
          make(true, true, false),   make(true, false, true),  make(true, true, true)};
}

void StepConfig::validate() const {
  losses.validate();
  require(batch_size > 0, "batch size must be positive");
  require(phase1.lr > 0.0 && phase2.lr > 0.0, "phase learning rates must be positive");
  require(phase1.lr > phase2.lr, "phase 1 learning rate must exceed phase 2 learning rate");
  require(phase2.patience > 0, "phase 2 patience must be positive");
  require(momentum >= 0.0 && momentum < 1.0, "momentum must lie in [0, 1)");
  require(init_scale >= 0.0, "head init scale must be nonnegative");
}

json StepReport::to_json() const {
  return {{"step", step},
          {"new_classes", new_classes},
          {"teacher_width", teacher_width},
          {"student_width", student_width},
          {"corpus_new", corpus_new},
          {"corpus_old", corpus_old},
          {"phase1_losses", phase1_losses},
          {"phase2_val_accuracy", phase2_val_accuracy},
          {"phase2_losses", phase2_losses},
          {"phase2_best_epoch", phase2_best_epoch},
          {"phase2_epochs_run", phase2_epochs_run},
          {"best_val_accuracy", best_val_accuracy},
          {"final_val_accuracy", final_val_accuracy},
          {"balanced_losses", balanced_losses},
          {"backbone_checksum_phase1_start", backbone_checksum_phase1_start},
          {"backbone_checksum_phase1_end", backbone_checksum_phase1_end},
          {"teacher_checksum_start", teacher_checksum_start},
          {"teacher_checksum_end", teacher_checksum_end},
          {"kd_max_compared_width", kd_max_compared_width},
          {"kd_terms_evaluated", kd_terms_evaluated}};
}

namespace {

template <typename T>
struct Corpus {
  std::vector<std::size_t> samples;
  std::vector<bool> old;
  std::vector<std::size_t> targets;  // student head columns
  Tensor<T> teacher_logits;          // [samples, teacher width] or empty
};

template <typename T>
Corpus<T> build_corpus(const data::Dataset& ds, const std::vector<std::size_t>& new_samples,
                       const std::vector<std::size_t>& old_samples, const nn::Head<T>& head,
                       std::optional<nn::Model<T>>& teacher, std::size_t batch_size) {
  Corpus<T> c;
  for (auto i : new_samples) {
    c.samples.push_back(i);
    c.old.push_back(false);
  }
  for (auto i : old_samples) {
    c.samples.push_back(i);
    c.old.push_back(true);
  }
  for (auto i : c.samples) {
    const auto col = head.column_of(ds.labels.at(i));
    if (!col) throw ValidationError("training sample label " + std::to_string(ds.labels[i]) + " unknown to the student head");
    c.targets.push_back(*col);
  }
  if (teacher) {
    const std::size_t tw = teacher->heads().front().width();
    c.teacher_logits = Tensor<T>({c.samples.size(), tw});
    for (auto [b, e] : batch_ranges(c.samples.size(), std::max<std::size_t>(batch_size, 256))) {
      const std::vector<std::size_t> chunk(c.samples.begin() + b, c.samples.begin() + e);
      const auto logits = teacher->forward(data::gather<T>(ds, chunk), teacher->heads().front().task_id, nn::Mode::kEval);
      std::copy(logits.values().begin(), logits.values().end(), c.teacher_logits.data() + b * tw);
    }
  }
  return c;
}

struct TermSelection {
  bool ce_new = false, ce_old = false, kd_new = false, kd_old = false;
  double w_ce_new = 1, w_ce_old = 1, w_kd_new = 1, w_kd_old = 1;
  double temperature = 2.0;
};

TermSelection select_terms(const LossSwitches& s, bool have_teacher) {
  TermSelection t;
  t.ce_new = s.ce_new_active();
  t.ce_old = s.ce_old_active();
  t.kd_new = have_teacher && s.kd_new_active();
  t.kd_old = have_teacher && s.kd_old_active();
  t.w_ce_new = s.weight_ce_new;
  t.w_ce_old = s.weight_ce_old;
  t.w_kd_new = s.weight_kd_new;
  t.w_kd_old = s.weight_kd_old;
  t.temperature = s.temperature;
  return t;
}

// One shuffled pass over the corpus; returns the mean batch loss.
template <typename T>
double train_epoch(nn::Model<T>& model, nn::Sgd<T>& opt, const nn::FreezeMask& mask, double lr, const data::Dataset& ds,
                   const Corpus<T>& corpus, const TermSelection& terms, std::size_t batch_size, Rng& rng,
                   std::size_t teacher_width, StepReport& report) {
  std::vector<std::size_t> order(corpus.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  shuffle(order, rng);
  const int task = model.heads().front().task_id;
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (auto [b, e] : batch_ranges(order.size(), batch_size)) {
    std::vector<std::size_t> samples;
    nn::CrossEntropyTerm ce_new{task, {}, {}, terms.w_ce_new}, ce_old{task, {}, {}, terms.w_ce_old};
    std::vector<std::size_t> new_rows, old_rows;
    for (std::size_t r = 0; r < e - b; ++r) {
      const std::size_t pos = order[b + r];
      samples.push_back(corpus.samples[pos]);
      auto& term = corpus.old[pos] ? ce_old : ce_new;
      term.rows.push_back(r);
      term.targets.push_back(corpus.targets[pos]);
      (corpus.old[pos] ? old_rows : new_rows).push_back(pos);
    }
    nn::LossSpec<T> loss;
    if (terms.ce_new) loss.cross_entropy.push_back(ce_new);
    if (terms.ce_old) loss.cross_entropy.push_back(ce_old);
    auto distill = [&](const nn::CrossEntropyTerm& rows_of, const std::vector<std::size_t>& positions, double weight) {
      nn::DistillTerm<T> d;
      d.task_id = task;
      d.rows = rows_of.rows;
      d.temperature = terms.temperature;
      d.weight = weight;
      d.teacher_logits = Tensor<T>({positions.size(), teacher_width});
      for (std::size_t i = 0; i < positions.size(); ++i) {
        std::copy_n(corpus.teacher_logits.data() + positions[i] * teacher_width, teacher_width,
                    d.teacher_logits.data() + i * teacher_width);
      }
      loss.distill.push_back(std::move(d));
    };
    if (terms.kd_new) distill(ce_new, new_rows, terms.w_kd_new);
    if (terms.kd_old) distill(ce_old, old_rows, terms.w_kd_old);

    auto res = model.backward(data::gather<T>(ds, samples), loss, nn::Mode::kTrain, mask);
    for (std::size_t i = 0; i < res.distill_compared_widths.size(); ++i) {
      const std::size_t w = res.distill_compared_widths[i];
      if (w == 0) continue;
      if (w > teacher_width) throw std::logic_error("distillation read student columns unknown to the teacher");
      report.kd_max_compared_width = std::max(report.kd_max_compared_width, w);
      ++report.kd_terms_evaluated;
    }
    loss_sum += res.loss;
    ++batches;
    opt.step(model, res.grads, lr, mask);
  }
  return batches ? loss_sum / static_cast<double>(batches) : 0.0;
}

double phase_lr(double lr0, bool cosine, std::size_t epoch, std::size_t total) {
  return cosine ? nn::cosine_lr(epoch, total, lr0) : lr0;
}

}  // namespace

template <typename T>
StepReport run_step(IncrementalState<T>& state, const LabelList& new_classes, const StepData& data, const StepConfig& cfg) {
  cfg.validate();
  require(data.dataset != nullptr, "step data has no dataset");
  const data::Dataset& ds = *data.dataset;
  require(state.student.heads().size() == 1, "incremental student must have exactly one head");
  require(!new_classes.empty(), "incremental step without new classes");
  require(!data.new_train.empty(), "no training data for the new classes");
  require(!data.val.empty(), "no validation data for early stopping");
  {
    const std::set<Label> seen(state.seen_classes.begin(), state.seen_classes.end());
    std::set<Label> fresh;
    for (Label l : new_classes) {
      require(!seen.count(l), "class " + std::to_string(l) + " was already learned");
      require(fresh.insert(l).second, "duplicate new class " + std::to_string(l));
    }
    for (auto i : data.new_train) require(fresh.count(ds.labels.at(i)) > 0, "new-class training data contains an old class");
  }
  if (cfg.losses.uses_teacher()) require(!state.seen_classes.empty(), "distillation requested without a teacher (no learned classes)");
  if (cfg.losses.uses_exemplars()) require(state.store.total() > 0, "old-sample losses requested but the exemplar store is empty");

  StepReport report;
  report.step = state.step_index + 1;
  report.new_classes = new_classes;
  Rng rng(mix_seed(cfg.seed, 0x1000 + state.step_index));

  // 1. Teacher snapshot.
  state.teacher = state.student;
  report.teacher_width = state.teacher->heads().front().width();
  report.teacher_checksum_start = nn::model_checksum(*state.teacher);

  // 2. Head expansion.
  auto& head = state.student.heads().front();
  head = nn::expand_head(head, new_classes, cfg.init_scale, rng);
  report.student_width = head.width();

  // 3. Training corpus.
  const std::vector<std::size_t> old_samples = cfg.losses.uses_exemplars() ? state.store.all_indices() : std::vector<std::size_t>{};
  std::optional<nn::Model<T>> teacher_for_logits;
  if (cfg.losses.uses_teacher()) teacher_for_logits = *state.teacher;
  const Corpus<T> corpus = build_corpus(ds, data.new_train, old_samples, head, teacher_for_logits, cfg.batch_size);
  report.corpus_new = data.new_train.size();
  report.corpus_old = old_samples.size();
  const TermSelection terms = select_terms(cfg.losses, cfg.losses.uses_teacher());
  const std::size_t tw = report.teacher_width;

  const bool dropout_before = state.student.dropout_enabled();
  state.student.set_dropout_enabled(cfg.dropout_in_finetune);

  // 4. Phase 1: frozen backbone, larger rate.
  {
    const auto mask = nn::set_freeze(state.student, nn::FreezeScope::kBackboneOnly);
    nn::Sgd<T> opt(cfg.momentum);
    report.backbone_checksum_phase1_start = nn::backbone_checksum(state.student);
    for (std::size_t e = 0; e < cfg.phase1.epochs; ++e) {
      const double lr = phase_lr(cfg.phase1.lr, cfg.phase1.cosine, e, cfg.phase1.epochs);
      report.phase1_losses.push_back(
          train_epoch(state.student, opt, mask, lr, ds, corpus, terms, cfg.batch_size, rng, tw, report));
    }
    report.backbone_checksum_phase1_end = nn::backbone_checksum(state.student);
  }

  // 5. Phase 2: everything trainable, early stopping with best-weight restore.
  const int task = head.task_id;
  {
    const auto mask = nn::set_freeze(state.student, nn::FreezeScope::kNone);
    nn::Sgd<T> opt(cfg.momentum);
    double best = head_accuracy(state.student, ds, data.val, task);
    report.phase2_val_accuracy.push_back(best);
    std::size_t best_epoch = 0;
    nn::Model<T> best_model = state.student;
    for (std::size_t e = 1; e <= cfg.phase2.epochs_max; ++e) {
      const double lr = phase_lr(cfg.phase2.lr, cfg.phase2.cosine, e - 1, cfg.phase2.epochs_max);
      report.phase2_losses.push_back(
          train_epoch(state.student, opt, mask, lr, ds, corpus, terms, cfg.batch_size, rng, tw, report));
      report.phase2_epochs_run = e;
      const double acc = head_accuracy(state.student, ds, data.val, task);
      report.phase2_val_accuracy.push_back(acc);
      if (acc > best) {
        best = acc;
        best_epoch = e;
        best_model = state.student;
      } else if (e - best_epoch >= cfg.phase2.patience) {
        break;
      }
    }
    state.student = std::move(best_model);
    report.phase2_best_epoch = best_epoch;
    report.best_val_accuracy = best;
  }

  // 6. Optional class-balanced fine-tune.
  if (cfg.balanced_finetune && cfg.balanced_finetune->epochs > 0 && cfg.balanced_finetune->per_class_m > 0) {
    const auto balanced = exemplar::build_balanced_set(state.store, ds, data.new_train, new_classes,
                                                       cfg.balanced_finetune->per_class_m, mix_seed(cfg.seed, 0x2000 + state.step_index));
    const std::set<Label> fresh(new_classes.begin(), new_classes.end());
    std::vector<std::size_t> bal_new, bal_old;
    for (auto i : balanced) (fresh.count(ds.labels[i]) ? bal_new : bal_old).push_back(i);
    std::optional<nn::Model<T>> teacher_copy = *state.teacher;
    const bool kd = !state.seen_classes.empty();
    if (!kd) teacher_copy.reset();
    const Corpus<T> bal_corpus = build_corpus(ds, bal_new, bal_old, state.student.heads().front(), teacher_copy, cfg.batch_size);
    TermSelection bal_terms;
    bal_terms.ce_new = bal_terms.ce_old = true;
    bal_terms.kd_new = bal_terms.kd_old = kd;
    bal_terms.temperature = cfg.losses.temperature;
    const auto mask = nn::set_freeze(state.student, nn::FreezeScope::kNone);
    nn::Sgd<T> opt(cfg.momentum);
    for (std::size_t e = 0; e < cfg.balanced_finetune->epochs; ++e) {
      report.balanced_losses.push_back(
          train_epoch(state.student, opt, mask, cfg.phase2.lr, ds, bal_corpus, bal_terms, cfg.batch_size, rng, tw, report));
    }
  }
  state.student.set_dropout_enabled(dropout_before);
  report.final_val_accuracy = head_accuracy(state.student, ds, data.val, task);
  report.teacher_checksum_end = nn::model_checksum(*state.teacher);

  // 7. Fold the new classes into the exemplar memory.
  LabelList seen_after = state.seen_classes;
  seen_after.insert(seen_after.end(), new_classes.begin(), new_classes.end());
  if (state.store.capacity > 0) {
    state.store = exemplar::rebalance(state.store, seen_after, ds, data.new_train, &state.student);
  }
  state.seen_classes = std::move(seen_after);
  ++state.step_index;
  return report;
}

json ExperimentReport::to_json() const {
  json j;
  j["config"] = config;
  j["seed"] = seed;
  j["class_order"] = class_order;
  json steps_json = json::array();
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const auto& ev = evals[i];
    json s{{"step", ev.step},
           {"n_classes", ev.class_labels.size()},
           {"class_labels", ev.class_labels},
           {"accuracy", ev.accuracy},
           {"accuracy_old", ev.accuracy_old ? json(*ev.accuracy_old) : json(nullptr)},
           {"accuracy_new", ev.accuracy_new ? json(*ev.accuracy_new) : json(nullptr)}};
    json cm = json::array();
    for (std::size_t r = 0; r < ev.confusion.classes; ++r) {
      json row = json::array();
      for (std::size_t c = 0; c < ev.confusion.classes; ++c) row.push_back(ev.confusion.at(r, c));
      cm.push_back(row);
    }
    s["confusion"] = cm;
    if (ev.step > 0 && ev.step - 1 < steps.size()) s["training"] = steps[ev.step - 1].to_json();
    steps_json.push_back(s);
  }
  j["steps"] = steps_json;
  if (avg_incremental_accuracy) j["avg_incremental_accuracy"] = *avg_incremental_accuracy;
  j["exemplar_store"] = exemplar::store_to_json(final_store);
  j["timing"] = {{"wall_seconds", wall_seconds}};
  return j;
}

std::string ExperimentReport::steps_csv() const {
  std::ostringstream out;
  out.precision(9);
  out << "step,n_classes,acc,acc_old,acc_new\n";
  for (const auto& ev : evals) {
    out << ev.step << "," << ev.class_labels.size() << "," << ev.accuracy << ",";
    if (ev.accuracy_old) out << *ev.accuracy_old;
    out << ",";
    if (ev.accuracy_new) out << *ev.accuracy_new;
    out << "\n";
  }
  return out.str();
}

json strip_timing(json report) {
  if (report.is_object()) {
    report.erase("timing");
    for (auto& [key, value] : report.items()) value = strip_timing(value);
  } else if (report.is_array()) {
    for (auto& value : report) value = strip_timing(value);
  }
  return report;
}

namespace {

template <typename T>
StepEval evaluate_step(nn::Model<T>& model, const data::Dataset& ds, const std::vector<std::size_t>& test,
                       const LabelList& old_classes, const LabelList& new_classes, std::size_t step) {
  StepEval ev;
  ev.step = step;
  const auto& head = model.heads().front();
  ev.class_labels = head.class_labels;
  ev.confusion = evaluate_head(model, ds, test, head.task_id);
  ev.accuracy = metrics::accuracy(ev.confusion);
  if (step > 0) {
    std::set<std::size_t> old_cols, new_cols;
    for (Label l : old_classes) old_cols.insert(*head.column_of(l));
    for (Label l : new_classes) new_cols.insert(*head.column_of(l));
    ev.accuracy_old = metrics::group_accuracy(ev.confusion, old_cols);
    ev.accuracy_new = metrics::group_accuracy(ev.confusion, new_cols);
  }
  return ev;
}

json step_config_echo(const ExperimentConfig& cfg) {
  const auto& s = cfg.step;
  return {{"losses", s.losses.label()},
          {"temperature", s.losses.temperature},
          {"phase1", {{"lr", s.phase1.lr}, {"epochs", s.phase1.epochs}, {"cosine", s.phase1.cosine}}},
          {"phase2",
           {{"lr", s.phase2.lr}, {"epochs_max", s.phase2.epochs_max}, {"patience", s.phase2.patience}, {"cosine", s.phase2.cosine}}},
          {"batch_size", s.batch_size},
          {"momentum", s.momentum},
          {"exemplar_capacity", cfg.exemplar_capacity},
          {"strategy", exemplar::to_string(cfg.strategy)},
          {"seed", cfg.seed}};
}

}  // namespace

template <typename T>
ExperimentReport run_experiment(nn::Model<T> base_model, const data::Dataset& ds, const data::Split& split,
                                const data::ClassSchedule& schedule, const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  cfg.step.validate();
  require(!schedule.class_assignment.empty(), "empty class schedule");
  require(base_model.heads().size() == 1, "base model must carry exactly the full-set head");
  for (const auto& step : schedule.class_assignment) {
    for (Label l : step) require(l < ds.num_classes(), "schedule requests class " + std::to_string(l) + " beyond the dataset");
  }
  {
    LabelList a = schedule.class_assignment[0], b = base_model.heads().front().class_labels;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    require(a == b, "base model head does not match the schedule's base classes");
  }
  if (cfg.step.losses.uses_exemplars()) require(cfg.exemplar_capacity > 0, "old-sample losses need a positive exemplar budget");

  ExperimentReport report;
  report.seed = cfg.seed;
  report.class_order = schedule.class_order;
  report.config = step_config_echo(cfg);

  IncrementalState<T> state;
  state.seen_classes = base_model.heads().front().class_labels;
  state.student = std::move(base_model);
  state.store.capacity = cfg.exemplar_capacity;
  state.store.strategy = cfg.strategy;
  state.store.seed = mix_seed(cfg.seed, 0xe8);
  if (cfg.exemplar_capacity > 0) {
    const auto base_train = data::filter_by_class(ds, split.train, state.seen_classes);
    state.store = exemplar::rebalance(state.store, state.seen_classes, ds, base_train, &state.student);
  }

  std::vector<double> accs;
  {
    const auto test = data::filter_by_class(ds, split.test, state.seen_classes);
    require(!test.empty(), "no test samples for the base classes");
    report.evals.push_back(evaluate_step(state.student, ds, test, {}, state.seen_classes, 0));
    accs.push_back(report.evals.back().accuracy);
  }

  for (std::size_t s = 1; s < schedule.class_assignment.size(); ++s) {
    const LabelList& fresh = schedule.class_assignment[s];
    const LabelList old_classes = state.seen_classes;
    LabelList all = old_classes;
    all.insert(all.end(), fresh.begin(), fresh.end());
    StepData data{&ds, data::filter_by_class(ds, split.train, fresh), data::filter_by_class(ds, split.val, all)};
    StepConfig step_cfg = cfg.step;
    step_cfg.seed = mix_seed(cfg.seed, s);
    report.steps.push_back(run_step(state, fresh, data, step_cfg));
    const auto test = data::filter_by_class(ds, split.test, all);
    require(!test.empty(), "no test samples after step " + std::to_string(s));
    report.evals.push_back(evaluate_step(state.student, ds, test, old_classes, fresh, s));
    accs.push_back(report.evals.back().accuracy);
  }
  if (accs.size() > 1) report.avg_incremental_accuracy = metrics::avg_incremental_accuracy(accs);
  report.final_store = state.store;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

template StepReport run_step<float>(IncrementalState<float>&, const LabelList&, const StepData&, const StepConfig&);
template StepReport run_step<double>(IncrementalState<double>&, const LabelList&, const StepData&, const StepConfig&);
template ExperimentReport run_experiment<float>(nn::Model<float>, const data::Dataset&, const data::Split&,
                                                const data::ClassSchedule&, const ExperimentConfig&);
template ExperimentReport run_experiment<double>(nn::Model<double>, const data::Dataset&, const data::Split&,
                                                 const data::ClassSchedule&, const ExperimentConfig&);

}  // namespace cil::incremental
