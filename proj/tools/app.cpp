#include "app.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "cil/gradcheck.hpp"
#include "cil/io_util.hpp"
#include "cil/metrics.hpp"
#include "cil/rng.hpp"
#include "cil/snapshot.hpp"
#include "cil/training.hpp"

namespace cil::app {

using nlohmann::json;
namespace fs = std::filesystem;

// ------------------------------------------------------------------ config

json default_config() {
  return json::parse(R"({
    "dataset": {
      "path": null,
      "synth": {"num_classes": 10, "per_class": 100, "dim": 32, "separation": 3.0, "noise_sigma": 1.0, "seed": 0}
    },
    "split": {"train": 0.7, "test": 0.2, "val": 0.1},
    "schedule": "4-2-2-2",
    "class_order": "permutation",
    "backbone": {"type": "mlp", "hidden": [64, 32]},
    "plan": {"mode": "decreasing", "sizes": [], "head_count": 1, "size": 0, "tasks": [], "nested": false},
    "base": {"epochs_max": 50, "batch_size": 32, "lr": 0.01, "lr_schedule": "cosine", "patience": 10,
             "momentum": 0.9, "head_weights": []},
    "step": {
      "losses": {"ce_new": true, "ce_old": true, "kd_new": true, "kd_old": true, "temperature": 2.0,
                 "weight_ce_new": 1.0, "weight_ce_old": 1.0, "weight_kd_new": 1.0, "weight_kd_old": 1.0},
      "phase1": {"lr": 0.01, "epochs": 10, "cosine": false},
      "phase2": {"lr": 0.001, "epochs_max": 30, "patience": 5, "cosine": false},
      "batch_size": 32,
      "momentum": 0.9,
      "init_scale": 0.01,
      "dropout_in_finetune": true,
      "balanced_finetune": null
    },
    "exemplars": {"K": 100, "strategy": "random"},
    "seeds": [0],
    "sweep": {"exemplar_grid": [20, 50, 100, 200, 300, 400], "head_configs": null},
    "out": "out",
    "jobs": 1
  })");
}

namespace {

// Objects whose default is null or whose members are free-form.
bool open_key(const std::string& path) {
  return path == "dataset.path" || path == "step.balanced_finetune" || path == "sweep.head_configs" ||
         path == "backbone";
}

void merge_into(json& target, const json& patch, const std::string& path) {
  if (!patch.is_object()) throw ValidationError("config" + (path.empty() ? "" : " key '" + path + "'") + " must be an object");
  for (const auto& [key, value] : patch.items()) {
    const std::string sub = path.empty() ? key : path + "." + key;
    if (!target.contains(key)) throw ValidationError("unknown config key '" + sub + "'");
    json& slot = target[key];
    if (slot.is_object() && value.is_object() && !open_key(sub)) {
      merge_into(slot, value, sub);
    } else if (slot.is_object() && value.is_object() && !(value.contains("type") && value["type"] != slot.value("type", json()))) {
      // Free-form member update, e.g. backbone.hidden=[32]; a new type replaces the whole object.
      for (const auto& [k, v] : value.items()) slot[k] = v;
    } else {
      slot = value;
    }
  }
}

json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

}  // namespace

json resolve_config(const json& file, const std::vector<std::string>& overrides) {
  json cfg = default_config();
  if (!file.is_null()) merge_into(cfg, file, "");
  for (const auto& item : overrides) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("override '" + item + "' is not key.path=value");
    const std::string key = item.substr(0, eq);
    json patch = parse_override_value(item.substr(eq + 1));
    std::size_t end = key.size();
    while (true) {
      const auto dot = key.rfind('.', end - 1);
      const std::string part = key.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
      if (part.empty()) throw ValidationError("override '" + item + "' has an empty key segment");
      patch = json{{part, patch}};
      if (dot == std::string::npos) break;
      end = dot;
    }
    merge_into(cfg, patch, "");
  }
  return cfg;
}

namespace {

template <typename V>
V get(const json& j, const char* key, const std::string& path) {
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ValidationError("config key '" + path + "." + key + "' is missing or has the wrong type");
  }
}

PlanSpec parse_plan(const json& j, const std::string& path) {
  PlanSpec p;
  p.mode = j.value("mode", std::string("decreasing"));
  if (j.contains("sizes")) p.sizes = get<std::vector<std::size_t>>(j, "sizes", path);
  if (j.contains("head_count")) p.head_count = get<std::size_t>(j, "head_count", path);
  if (j.contains("size")) p.size = get<std::size_t>(j, "size", path);
  if (j.contains("tasks")) p.tasks = get<std::vector<LabelList>>(j, "tasks", path);
  if (j.contains("nested")) p.nested = get<bool>(j, "nested", path);
  require(p.mode == "decreasing" || p.mode == "fixed" || p.mode == "explicit",
          "plan mode must be decreasing, fixed or explicit, got '" + p.mode + "'");
  return p;
}

}  // namespace

tasks::TaskPlan PlanSpec::build(const LabelList& base_classes, std::uint64_t seed) const {
  LabelList base = base_classes;
  std::sort(base.begin(), base.end());
  if (mode == "fixed") {
    if (head_count == 1) return tasks::make_decreasing_plan(base, {base.size()}, seed);
    return tasks::make_fixed_size_plan(base, head_count, size, seed);
  }
  if (mode == "explicit") {
    if (tasks.empty()) return tasks::make_decreasing_plan(base, {base.size()}, seed);
    return tasks::make_explicit_plan(base, tasks, seed);
  }
  if (sizes.empty()) return tasks::make_decreasing_plan(base, {base.size()}, seed, nested);
  return tasks::make_decreasing_plan(base, sizes, seed, nested);
}

std::string plan_label(const tasks::TaskPlan& plan) {
  std::string s = "[";
  for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(plan.tasks[i].class_labels.size());
  }
  return s + "]";
}

RunConfig parse_config(const json& r) {
  RunConfig c;
  c.resolved = r;
  try {
    const auto& ds = r.at("dataset");
    if (!ds.at("path").is_null()) c.dataset_path = get<std::string>(ds, "path", "dataset");
    const auto& sy = ds.at("synth");
    c.synth.num_classes = get<std::size_t>(sy, "num_classes", "dataset.synth");
    c.synth.per_class = get<std::size_t>(sy, "per_class", "dataset.synth");
    c.synth.dim = get<std::size_t>(sy, "dim", "dataset.synth");
    c.synth.separation = get<double>(sy, "separation", "dataset.synth");
    c.synth.noise_sigma = get<double>(sy, "noise_sigma", "dataset.synth");
    c.synth.seed = get<std::uint64_t>(sy, "seed", "dataset.synth");

    const auto& sp = r.at("split");
    c.split = {get<double>(sp, "train", "split"), get<double>(sp, "test", "split"), get<double>(sp, "val", "split")};
    c.split.validate();

    c.schedule = get<std::string>(r, "schedule", "");
    const auto order = get<std::string>(r, "class_order", "");
    require(order == "permutation" || order == "label", "class_order must be 'permutation' or 'label'");
    c.class_order = order == "label" ? data::ClassOrder::kLabelOrder : data::ClassOrder::kSeededPermutation;

    c.backbone = r.at("backbone");
    require(c.backbone.is_object() && !c.backbone.contains("input_shape"),
            "backbone config must be an object; input_shape comes from the dataset");
    c.plan = parse_plan(r.at("plan"), "plan");

    const auto& b = r.at("base");
    c.base.epochs_max = get<std::size_t>(b, "epochs_max", "base");
    c.base.batch_size = get<std::size_t>(b, "batch_size", "base");
    const double lr = get<double>(b, "lr", "base");
    const auto sched = get<std::string>(b, "lr_schedule", "base");
    require(sched == "cosine" || sched == "constant", "base.lr_schedule must be 'cosine' or 'constant'");
    if (sched == "cosine") {
      c.base.lr_schedule = nn::CosineLr{lr, c.base.epochs_max};
    } else {
      c.base.lr_schedule = nn::ConstantLr{lr};
    }
    c.base.early_stop_patience = get<std::size_t>(b, "patience", "base");
    c.base.momentum = get<double>(b, "momentum", "base");
    c.base.head_weights = get<std::vector<double>>(b, "head_weights", "base");
    c.base.validate();

    const auto& s = r.at("step");
    const auto& l = s.at("losses");
    auto& ls = c.step.losses;
    ls.ce_new = get<bool>(l, "ce_new", "step.losses");
    ls.ce_old = get<bool>(l, "ce_old", "step.losses");
    ls.kd_new = get<bool>(l, "kd_new", "step.losses");
    ls.kd_old = get<bool>(l, "kd_old", "step.losses");
    ls.temperature = get<double>(l, "temperature", "step.losses");
    ls.weight_ce_new = get<double>(l, "weight_ce_new", "step.losses");
    ls.weight_ce_old = get<double>(l, "weight_ce_old", "step.losses");
    ls.weight_kd_new = get<double>(l, "weight_kd_new", "step.losses");
    ls.weight_kd_old = get<double>(l, "weight_kd_old", "step.losses");
    const auto& p1 = s.at("phase1");
    c.step.phase1 = {get<double>(p1, "lr", "step.phase1"), get<std::size_t>(p1, "epochs", "step.phase1"),
                     get<bool>(p1, "cosine", "step.phase1")};
    const auto& p2 = s.at("phase2");
    c.step.phase2 = {get<double>(p2, "lr", "step.phase2"), get<std::size_t>(p2, "epochs_max", "step.phase2"),
                     get<std::size_t>(p2, "patience", "step.phase2"), get<bool>(p2, "cosine", "step.phase2")};
    c.step.batch_size = get<std::size_t>(s, "batch_size", "step");
    c.step.momentum = get<double>(s, "momentum", "step");
    c.step.init_scale = get<double>(s, "init_scale", "step");
    c.step.dropout_in_finetune = get<bool>(s, "dropout_in_finetune", "step");
    if (!s.at("balanced_finetune").is_null()) {
      const auto& bf = s.at("balanced_finetune");
      c.step.balanced_finetune = incremental::BalancedFinetune{get<std::size_t>(bf, "per_class_m", "step.balanced_finetune"),
                                                               get<std::size_t>(bf, "epochs", "step.balanced_finetune")};
    }
    c.step.validate();

    const auto& ex = r.at("exemplars");
    c.exemplar_capacity = get<std::size_t>(ex, "K", "exemplars");
    c.strategy = exemplar::strategy_from_string(get<std::string>(ex, "strategy", "exemplars"));

    c.seeds = get<std::vector<std::uint64_t>>(r, "seeds", "");
    require(!c.seeds.empty(), "at least one seed is required");
    c.out = get<std::string>(r, "out", "");
    require(!c.out.empty(), "output directory must not be empty");
    c.jobs = get<std::size_t>(r, "jobs", "");
    if (c.jobs == 0) c.jobs = std::max(1u, std::thread::hardware_concurrency());

    const auto& sw = r.at("sweep");
    c.exemplar_grid = get<std::vector<std::size_t>>(sw, "exemplar_grid", "sweep");
    if (!sw.at("head_configs").is_null()) {
      std::vector<PlanSpec> specs;
      for (const auto& h : sw.at("head_configs")) specs.push_back(parse_plan(h, "sweep.head_configs"));
      c.head_configs = std::move(specs);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad config: ") + e.what());
  }
  return c;
}

CellSeeds cell_seeds(std::uint64_t seed) { return {mix_seed(seed, 1), mix_seed(seed, 2), mix_seed(seed, 3), seed}; }

data::Dataset load_or_synth(const RunConfig& cfg) {
  data::Dataset ds = cfg.dataset_path ? data::load_dataset(*cfg.dataset_path) : data::synth_blobs(cfg.synth);
  ds.validate();
  return ds;
}

Prepared prepare(const RunConfig& cfg, const data::Dataset& ds, std::uint64_t seed, const PlanSpec& plan) {
  const CellSeeds s = cell_seeds(seed);
  Prepared p;
  p.seed = seed;
  p.schedule = data::parse_schedule(cfg.schedule, ds.num_classes(), s.schedule, cfg.class_order);
  p.split = data::stratified_split(ds, cfg.split, s.split);
  const LabelList& base = p.schedule.class_assignment.front();
  p.plan = plan.build(base, s.plan);
  json bj = cfg.backbone;
  bj["input_shape"] = ds.feature_shape;
  p.backbone = nn::backbone_from_json(bj);
  p.base_train = data::filter_by_class(ds, p.split.train, base);
  p.base_val = data::filter_by_class(ds, p.split.val, base);
  p.base_test = data::filter_by_class(ds, p.split.test, base);
  require(!p.base_train.empty() && !p.base_val.empty() && !p.base_test.empty(),
          "every split needs samples of the base classes");
  if (cfg.base.head_weights.size() > 0) {
    require(cfg.base.head_weights.size() == p.plan.tasks.size(), "base.head_weights needs one weight per plan task");
  }
  return p;
}

multitask::BaseTrainResult<float> train_base_cell(const RunConfig& cfg, const data::Dataset& ds, const Prepared& p) {
  multitask::BaseTrainConfig bc = cfg.base;
  bc.seed = cell_seeds(p.seed).train;
  return multitask::train_base<float>(p.backbone, p.plan, ds, p.base_train, p.base_val, bc);
}

incremental::ExperimentReport run_cil_cell(const RunConfig& cfg, const data::Dataset& ds, const Prepared& p,
                                           const nn::Model<float>& base_model, const incremental::LossSwitches& losses,
                                           std::size_t exemplar_capacity) {
  incremental::ExperimentConfig ec;
  ec.step = cfg.step;
  ec.step.losses = losses;
  ec.exemplar_capacity = exemplar_capacity;
  ec.strategy = cfg.strategy;
  ec.seed = mix_seed(p.seed, 4);
  auto report = incremental::run_experiment<float>(base_model, ds, p.split, p.schedule, ec);
  report.seed = p.seed;
  report.config = cfg.resolved;
  return report;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), n);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// ---------------------------------------------------------------- commands

namespace {

std::string fmt_num(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

struct Output {
  std::vector<std::pair<std::string, std::string>> files;

  void add(std::string name, std::string contents) { files.emplace_back(std::move(name), std::move(contents)); }

  // Everything is computed before the directory is touched; each file lands
  // through an atomic rename.
  void commit(const fs::path& dir) const {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
    for (const auto& [name, contents] : files) io::write_file_atomic(dir / name, contents);
  }
};

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double stddev_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

json train_log_json(const multitask::TrainLog& log) {
  json epochs = json::array();
  json seconds = json::array();
  for (const auto& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"head_losses", e.head_losses}, {"val_accuracy", e.val_accuracy}});
    seconds.push_back(e.seconds);
  }
  return {{"epochs", epochs},
          {"best_epoch", log.best_epoch},
          {"best_val_accuracy", log.best_val_accuracy},
          {"timing", {{"epoch_seconds", seconds}}}};
}

double seconds_per_epoch(const multitask::TrainLog& log) {
  std::vector<double> s;
  for (const auto& e : log.epochs) s.push_back(e.seconds);
  return mean_of(s);
}

std::string steps_table(const std::vector<incremental::ExperimentReport>& runs) {
  std::ostringstream out;
  out << "seed,step,n_classes,acc,acc_old,acc_new\n";
  for (const auto& r : runs) {
    for (const auto& ev : r.evals) {
      out << r.seed << "," << ev.step << "," << ev.class_labels.size() << "," << fmt_num(ev.accuracy) << ","
          << (ev.accuracy_old ? fmt_num(*ev.accuracy_old) : "") << "," << (ev.accuracy_new ? fmt_num(*ev.accuracy_new) : "")
          << "\n";
    }
  }
  return out.str();
}

std::vector<double> avg_accuracies(const std::vector<incremental::ExperimentReport>& runs) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.avg_incremental_accuracy.value_or(r.evals.back().accuracy));
  return out;
}

void require_single_seed(const RunConfig& cfg, const char* what) {
  require(cfg.seeds.size() == 1, std::string(what) + " takes exactly one seed");
}

int cmd_train_base(const RunConfig& cfg, std::ostream& out) {
  require_single_seed(cfg, "train-base");
  const auto ds = load_or_synth(cfg);
  const auto p = prepare(cfg, ds, cfg.seeds.front(), cfg.plan);
  auto result = train_base_cell(cfg, ds, p);
  const auto model = multitask::extract_for_incremental(result.model, p.plan);
  const double test_acc = head_accuracy(result.model, ds, p.base_test, p.plan.tasks.front().task_id);

  json report{{"config", cfg.resolved},
              {"seed", p.seed},
              {"plan", tasks::plan_to_json(p.plan)},
              {"plan_label", plan_label(p.plan)},
              {"class_order", p.schedule.class_order},
              {"base_classes", p.plan.base_classes},
              {"base_test_accuracy", test_acc},
              {"log", train_log_json(result.log)}};
  Output files;
  files.add("base_model.cilm", nn::encode_snapshot(model));
  files.add("train_log.csv", result.log.to_csv());
  files.add("train_base.json", dump(report));
  files.commit(cfg.out);
  out << "train-base: plan " << plan_label(p.plan) << ", best epoch " << result.log.best_epoch << ", val acc "
      << fmt_num(result.log.best_val_accuracy, 4) << ", test acc " << fmt_num(test_acc, 4) << "\n";
  return kOk;
}

json runs_json(const std::vector<incremental::ExperimentReport>& runs) {
  json arr = json::array();
  for (const auto& r : runs) arr.push_back(r.to_json());
  return arr;
}

int cmd_run_cil(const RunConfig& cfg, const std::optional<std::string>& snapshot, std::ostream& out) {
  const auto ds = load_or_synth(cfg);
  if (cfg.step.losses.uses_exemplars()) require(cfg.exemplar_capacity > 0, "old-sample losses need exemplars.K > 0");
  std::vector<Prepared> cells;
  for (auto seed : cfg.seeds) cells.push_back(prepare(cfg, ds, seed, cfg.plan));

  std::optional<nn::Model<float>> loaded;
  if (snapshot) {
    require_single_seed(cfg, "run-cil with --snapshot");
    loaded = nn::load_snapshot<float>(*snapshot);
    require(loaded->heads().size() == 1, "snapshot must hold exactly one head");
    LabelList have = loaded->heads().front().class_labels, want = cells.front().schedule.class_assignment.front();
    std::sort(have.begin(), have.end());
    std::sort(want.begin(), want.end());
    require(have == want, "snapshot head classes do not match the schedule's base classes for this seed");
    require(loaded->spec().input_shape == ds.feature_shape, "snapshot input shape does not match the dataset");
  }

  std::vector<incremental::ExperimentReport> runs(cells.size());
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
    nn::Model<float> base;
    if (loaded) {
      base = *loaded;
    } else {
      auto trained = train_base_cell(cfg, ds, cells[i]);
      base = multitask::extract_for_incremental(trained.model, cells[i].plan);
    }
    runs[i] = run_cil_cell(cfg, ds, cells[i], base, cfg.step.losses, cfg.exemplar_capacity);
  });

  const auto avgs = avg_accuracies(runs);
  json report{{"config", cfg.resolved},
              {"losses", cfg.step.losses.label()},
              {"runs", runs_json(runs)},
              {"mean_avg_incremental_accuracy", mean_of(avgs)}};
  Output files;
  files.add("report.json", dump(report));
  files.add("steps.csv", steps_table(runs));
  for (const auto& r : runs) {
    const auto& last = r.evals.back();
    std::vector<std::string> names;
    for (Label l : last.class_labels) names.push_back(ds.class_names.at(l));
    files.add("confusion_seed" + std::to_string(r.seed) + ".csv", metrics::confusion_csv(last.confusion, names));
  }
  files.commit(cfg.out);
  out << "run-cil: " << cfg.step.losses.label() << ", " << runs.size() << " seed(s), "
      << runs.front().evals.size() << " steps, mean avg incremental accuracy " << fmt_num(mean_of(avgs), 4) << "\n";
  return kOk;
}

// Trains one base model per seed (in parallel) for the given plan.
std::vector<nn::Model<float>> train_bases(const RunConfig& cfg, const data::Dataset& ds, const std::vector<Prepared>& cells,
                                          std::vector<multitask::TrainLog>* logs = nullptr) {
  std::vector<nn::Model<float>> models(cells.size());
  std::vector<multitask::TrainLog> local(cells.size());
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
    auto trained = train_base_cell(cfg, ds, cells[i]);
    models[i] = multitask::extract_for_incremental(trained.model, cells[i].plan);
    local[i] = std::move(trained.log);
  });
  if (logs) *logs = std::move(local);
  return models;
}

int cmd_ablate(const RunConfig& cfg, std::ostream& out) {
  const auto ds = load_or_synth(cfg);
  require(cfg.exemplar_capacity > 0, "the loss ablation includes old-sample losses; exemplars.K must be positive");
  std::vector<Prepared> cells;
  for (auto seed : cfg.seeds) cells.push_back(prepare(cfg, ds, seed, cfg.plan));
  const auto bases = train_bases(cfg, ds, cells);
  const auto grid = incremental::loss_grid();

  const std::size_t n_seeds = cells.size();
  std::vector<incremental::ExperimentReport> runs(grid.size() * n_seeds);
  parallel_for(runs.size(), cfg.jobs, [&](std::size_t i) {
    const std::size_t row = i / n_seeds, s = i % n_seeds;
    auto losses = grid[row];
    losses.temperature = cfg.step.losses.temperature;
    runs[i] = run_cil_cell(cfg, ds, cells[s], bases[s], losses, cfg.exemplar_capacity);
  });

  // Same shape as the loss table: base step, every incremental step, avg.
  const std::size_t n_steps = runs.front().evals.size();
  std::ostringstream csv;
  csv << "losses";
  for (std::size_t k = 0; k < n_steps; ++k) csv << ",step" << k;
  csv << ",avg\n";
  json rows = json::array();
  for (std::size_t row = 0; row < grid.size(); ++row) {
    std::vector<double> step_means(n_steps, 0.0);
    std::vector<double> avgs;
    json per_seed = json::array();
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto& r = runs[row * n_seeds + s];
      for (std::size_t k = 0; k < n_steps; ++k) step_means[k] += r.evals[k].accuracy / static_cast<double>(n_seeds);
      avgs.push_back(r.avg_incremental_accuracy.value_or(0.0));
      per_seed.push_back(r.to_json());
    }
    csv << grid[row].label();
    for (double v : step_means) csv << "," << fmt_num(100.0 * v, 2);
    csv << "," << fmt_num(100.0 * mean_of(avgs), 2) << "\n";
    rows.push_back({{"losses", grid[row].label()},
                    {"step_accuracy", step_means},
                    {"avg_incremental_accuracy", mean_of(avgs)},
                    {"avg_incremental_accuracy_per_seed", avgs},
                    {"runs", per_seed}});
  }
  Output files;
  files.add("ablation.csv", csv.str());
  files.add("ablation.json", dump({{"config", cfg.resolved}, {"rows", rows}}));
  files.commit(cfg.out);
  out << csv.str();
  return kOk;
}

std::vector<std::pair<std::string, PlanSpec>> default_head_grid(std::size_t base_size) {
  std::vector<std::pair<std::string, PlanSpec>> grid;
  for (std::size_t extra = 0; extra <= 3 && base_size >= 2 + extra; ++extra) {
    PlanSpec p;
    for (std::size_t k = 0; k <= extra; ++k) p.sizes.push_back(base_size - k);
    grid.emplace_back("decreasing", p);
  }
  if (base_size >= 3) {
    const std::size_t max_heads = std::min<std::size_t>(6, base_size + 1);
    for (std::size_t heads = 1; heads <= max_heads; ++heads) {
      PlanSpec p;
      p.mode = "fixed";
      p.head_count = heads;
      p.size = base_size - 1;
      grid.emplace_back("fixed", p);
    }
  }
  return grid;
}

int cmd_sweep_heads(const RunConfig& cfg, std::ostream& out) {
  const auto ds = load_or_synth(cfg);
  if (cfg.step.losses.uses_exemplars()) require(cfg.exemplar_capacity > 0, "old-sample losses need exemplars.K > 0");
  const std::size_t base_size = data::parse_schedule(cfg.schedule, ds.num_classes(), 0).step_sizes.front();
  std::vector<std::pair<std::string, PlanSpec>> grid;
  if (cfg.head_configs) {
    for (const auto& p : *cfg.head_configs) grid.emplace_back(p.mode, p);
  } else {
    grid = default_head_grid(base_size);
  }
  require(!grid.empty(), "head sweep grid is empty");

  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<Prepared> cells;
  for (const auto& [dir, plan] : grid) {
    for (auto seed : cfg.seeds) cells.push_back(prepare(cfg, ds, seed, plan));
  }
  struct CellResult {
    incremental::ExperimentReport report;
    multitask::TrainLog log;
  };
  std::vector<CellResult> results(cells.size());
  parallel_for(cells.size(), cfg.jobs, [&](std::size_t i) {
    auto trained = train_base_cell(cfg, ds, cells[i]);
    results[i].log = trained.log;
    const auto base = multitask::extract_for_incremental(trained.model, cells[i].plan);
    results[i].report = run_cil_cell(cfg, ds, cells[i], base, cfg.step.losses, cfg.exemplar_capacity);
  });

  std::ostringstream acc, time;
  acc << "direction,heads,n_heads,mean_avg_acc,std_avg_acc,mean_base_acc,n_seeds\n";
  time << "direction,heads,n_heads,seconds_per_epoch\n";
  json rows = json::array();
  for (std::size_t g = 0; g < grid.size(); ++g) {
    std::vector<double> avgs, base_accs, secs;
    json per_seed = json::array();
    std::string label;
    for (std::size_t s = 0; s < n_seeds; ++s) {
      const auto& r = results[g * n_seeds + s];
      label = plan_label(cells[g * n_seeds + s].plan);
      avgs.push_back(r.report.avg_incremental_accuracy.value_or(r.report.evals.back().accuracy));
      base_accs.push_back(r.report.evals.front().accuracy);
      secs.push_back(seconds_per_epoch(r.log));
      per_seed.push_back({{"seed", cells[g * n_seeds + s].seed},
                          {"plan", tasks::plan_to_json(cells[g * n_seeds + s].plan)},
                          {"avg_incremental_accuracy", avgs.back()},
                          {"base_test_accuracy", base_accs.back()},
                          {"base_best_epoch", r.log.best_epoch},
                          {"timing", {{"seconds_per_epoch", secs.back()}}}});
    }
    const std::size_t n_heads = cells[g * n_seeds].plan.tasks.size();
    acc << grid[g].first << ",\"" << label << "\"," << n_heads << "," << fmt_num(mean_of(avgs)) << ","
        << fmt_num(stddev_of(avgs)) << "," << fmt_num(mean_of(base_accs)) << "," << n_seeds << "\n";
    time << grid[g].first << ",\"" << label << "\"," << n_heads << "," << fmt_num(mean_of(secs), 6) << "\n";
    rows.push_back({{"direction", grid[g].first},
                    {"heads", label},
                    {"mean_avg_incremental_accuracy", mean_of(avgs)},
                    {"mean_base_test_accuracy", mean_of(base_accs)},
                    {"runs", per_seed},
                    {"timing", {{"seconds_per_epoch", mean_of(secs)}}}});
  }
  Output files;
  files.add("heads_accuracy.csv", acc.str());
  files.add("heads_time.csv", time.str());
  files.add("sweep_heads.json", dump({{"config", cfg.resolved}, {"rows", rows}}));
  files.commit(cfg.out);
  out << acc.str();
  return kOk;
}

int cmd_sweep_exemplars(const RunConfig& cfg, std::ostream& out) {
  const auto ds = load_or_synth(cfg);
  require(!cfg.exemplar_grid.empty(), "exemplar grid is empty");
  for (auto k : cfg.exemplar_grid) require(k > 0, "exemplar grid values must be positive");
  PlanSpec baseline;  // single-task [F]
  struct Arm {
    std::string name;
    PlanSpec plan;
  };
  std::vector<Arm> arms{{"single_task", baseline}, {"configured", cfg.plan}};

  std::vector<Prepared> cells;
  for (const auto& arm : arms) {
    for (auto seed : cfg.seeds) cells.push_back(prepare(cfg, ds, seed, arm.plan));
  }
  const auto bases = train_bases(cfg, ds, cells);
  const std::size_t n_cells = cells.size(), n_k = cfg.exemplar_grid.size();
  std::vector<incremental::ExperimentReport> runs(n_cells * n_k);
  parallel_for(runs.size(), cfg.jobs, [&](std::size_t i) {
    const std::size_t k = i / n_cells, c = i % n_cells;
    runs[i] = run_cil_cell(cfg, ds, cells[c], bases[c], cfg.step.losses, cfg.exemplar_grid[k]);
  });

  const std::size_t n_seeds = cfg.seeds.size();
  std::ostringstream csv;
  csv << "arm,heads,K,mean_avg_acc,std_avg_acc,n_seeds\n";
  json rows = json::array();
  for (std::size_t k = 0; k < n_k; ++k) {
    for (std::size_t a = 0; a < arms.size(); ++a) {
      std::vector<double> avgs;
      for (std::size_t s = 0; s < n_seeds; ++s) {
        const auto& r = runs[k * n_cells + a * n_seeds + s];
        avgs.push_back(r.avg_incremental_accuracy.value_or(r.evals.back().accuracy));
      }
      const std::string label = plan_label(cells[a * n_seeds].plan);
      csv << arms[a].name << ",\"" << label << "\"," << cfg.exemplar_grid[k] << "," << fmt_num(mean_of(avgs)) << ","
          << fmt_num(stddev_of(avgs)) << "," << n_seeds << "\n";
      rows.push_back({{"arm", arms[a].name},
                      {"heads", label},
                      {"K", cfg.exemplar_grid[k]},
                      {"mean_avg_incremental_accuracy", mean_of(avgs)},
                      {"avg_incremental_accuracy_per_seed", avgs}});
    }
  }
  Output files;
  files.add("exemplars_accuracy.csv", csv.str());
  files.add("sweep_exemplars.json", dump({{"config", cfg.resolved}, {"rows", rows}}));
  files.commit(cfg.out);
  out << csv.str();
  return kOk;
}

int cmd_gradcheck(const std::optional<std::string>& fault, const std::optional<std::string>& out_dir, std::ostream& out) {
  gradcheck::Options opt;
  opt.inject_fault = fault;
  const auto summary = gradcheck::run_suite(opt);
  json results = json::array();
  for (const auto& r : summary.results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " seed=" << r.seed << " entries=" << r.entries
        << " max_rel_err=" << r.max_rel_error << " tol=" << r.tolerance << "\n";
    results.push_back({{"name", r.name},
                       {"seed", r.seed},
                       {"entries", r.entries},
                       {"max_rel_error", r.max_rel_error},
                       {"tolerance", r.tolerance},
                       {"passed", r.passed}});
  }
  out << "gradcheck: " << summary.results.size() - summary.failures() << "/" << summary.results.size() << " passed in "
      << fmt_num(summary.seconds, 3) << " s\n";
  if (out_dir) {
    Output files;
    files.add("gradcheck.json", dump({{"results", results}, {"passed", summary.all_passed()}, {"timing", {{"seconds", summary.seconds}}}}));
    files.commit(*out_dir);
  }
  if (!summary.all_passed()) throw NumericalError(std::to_string(summary.failures()) + " gradient check(s) failed");
  return kOk;
}

int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  const auto ds = data::synth_blobs(cfg.synth);
  const fs::path dir(cfg.out);
  data::save_dataset(dir, ds);
  out << "synth: " << ds.num_samples() << " samples, " << ds.num_classes() << " classes, dim " << ds.feature_size()
      << " -> " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Class-incremental learning with multitask base training"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> jobs;
  std::vector<std::string> overrides;
  std::optional<std::string> heads, schedule, snapshot, fault;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "Single seed (replaces the config's seed list)");
    sub->add_option("--out", out_dir, "Output directory");
    sub->add_option("--jobs", jobs, "Concurrent cells (0 = all cores)");
    sub->add_option("--set", overrides, "Config override key.path=value (repeatable)")->take_all();
    sub->add_option("--schedule", schedule, "Class schedule such as 4-2-2-2");
  };
  auto* train_base = app.add_subcommand("train-base", "Train the multitask base model and write a snapshot");
  auto* run_cil = app.add_subcommand("run-cil", "Run the incremental steps and write the report");
  auto* ablate = app.add_subcommand("ablate-losses", "Run the six loss configurations");
  auto* sweep_heads = app.add_subcommand("sweep-heads", "Sweep base-stage head configurations");
  auto* sweep_ex = app.add_subcommand("sweep-exemplars", "Sweep the exemplar budget K");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  auto* synth = app.add_subcommand("synth", "Write a synthetic Gaussian-blob dataset");
  for (auto* sub : {train_base, run_cil, ablate, sweep_heads, sweep_ex, synth}) common(sub);
  for (auto* sub : {train_base, run_cil, ablate, sweep_heads, sweep_ex}) {
    sub->add_option("--heads", heads, "Decreasing head sizes, e.g. 5,4,3,2");
  }
  run_cil->add_option("--snapshot", snapshot, "Base model snapshot from train-base");
  grad->add_option("--out", out_dir, "Optional directory for gradcheck.json");
  grad->add_option("--inject-fault", fault, "Flip the sign of one check's analytic gradient")->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }

  try {
    if (grad->parsed()) return cmd_gradcheck(fault, out_dir, out);

    json file;
    if (!config_path.empty()) {
      const std::string text = io::read_file(config_path);
      try {
        file = json::parse(text);
      } catch (const json::exception& e) {
        throw ValidationError("config " + config_path + " is not valid JSON: " + e.what());
      }
    }
    std::vector<std::string> all = overrides;
    if (seed) all.push_back("seeds=[" + std::to_string(*seed) + "]");
    if (out_dir) all.push_back("out=" + json(*out_dir).dump());
    if (jobs) all.push_back("jobs=" + std::to_string(*jobs));
    if (schedule) all.push_back("schedule=" + json(*schedule).dump());
    if (heads) {
      std::vector<std::size_t> sizes;
      std::stringstream ss(*heads);
      std::string tok;
      while (std::getline(ss, tok, ',')) {
        if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
          throw ValidationError("--heads expects comma-separated positive integers, got '" + *heads + "'");
        }
        sizes.push_back(std::stoul(tok));
      }
      all.push_back("plan.mode=\"decreasing\"");
      all.push_back("plan.sizes=" + json(sizes).dump());
    }
    const RunConfig cfg = parse_config(resolve_config(file, all));

    if (train_base->parsed()) return cmd_train_base(cfg, out);
    if (run_cil->parsed()) return cmd_run_cil(cfg, snapshot, out);
    if (ablate->parsed()) return cmd_ablate(cfg, out);
    if (sweep_heads->parsed()) return cmd_sweep_heads(cfg, out);
    if (sweep_ex->parsed()) return cmd_sweep_exemplars(cfg, out);
    if (synth->parsed()) return cmd_synth(cfg, out);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidation;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kValidation;
  }
  return kValidation;
}

}  // namespace cil::app
