#include <gtest/gtest.h>

#include <numeric>

#include "cil/errors.hpp"
#include "cil/incremental.hpp"
#include "cil/multitask_trainer.hpp"
#include "cil/snapshot.hpp"
#include "cil/training.hpp"
#include "support.hpp"

using namespace cil;
using cil::testing::blobs;
using cil::testing::iota_labels;
using cil::testing::mlp;
using incremental::LossSwitches;

namespace {

struct World {
  data::Dataset ds;
  data::Split split;
  data::ClassSchedule schedule;
  nn::Model<float> base;
};

World make_world(std::uint64_t seed, const std::string& schedule = "2-2-2") {
  World w;
  w.ds = blobs(6, 40, 8, seed);
  w.split = data::stratified_split(w.ds, {}, seed + 1);
  w.schedule = data::parse_schedule(schedule, 6, seed + 2, data::ClassOrder::kLabelOrder);
  const auto& base = w.schedule.class_assignment[0];
  const auto plan = tasks::make_decreasing_plan(base, {base.size()}, 0);
  multitask::BaseTrainConfig cfg;
  cfg.epochs_max = 8;
  cfg.lr_schedule = nn::CosineLr{0.05, 8};
  cfg.seed = seed;
  w.base = multitask::train_base<float>(mlp({16}, 8), plan, w.ds, data::filter_by_class(w.ds, w.split.train, base),
                                        data::filter_by_class(w.ds, w.split.val, base), cfg)
               .model;
  return w;
}

incremental::StepConfig quick_step(LossSwitches losses, std::uint64_t seed = 0) {
  incremental::StepConfig cfg;
  cfg.losses = losses;
  cfg.phase1.epochs = 2;
  cfg.phase2.epochs_max = 6;
  cfg.phase2.patience = 2;
  cfg.seed = seed;
  return cfg;
}

LossSwitches full_losses() {
  LossSwitches l;
  l.ce_old = l.kd_new = l.kd_old = true;
  return l;
}

incremental::IncrementalState<float> base_state(const World& w, std::size_t capacity) {
  incremental::IncrementalState<float> st;
  st.student = w.base;
  st.seen_classes = w.schedule.class_assignment[0];
  st.store.capacity = capacity;
  if (capacity > 0) st.store = exemplar::rebalance<float>(st.store, st.seen_classes, w.ds, w.split.train);
  return st;
}

incremental::StepData step_data(const World& w, std::size_t step) {
  incremental::StepData d;
  d.dataset = &w.ds;
  d.new_train = data::filter_by_class(w.ds, w.split.train, w.schedule.class_assignment[step]);
  d.val = data::filter_by_class(w.ds, w.split.val, w.schedule.classes_through(step));
  return d;
}

}  // namespace

TEST(Incremental, LossGridLabels) {
  std::vector<std::string> labels;
  for (const auto& l : incremental::loss_grid()) labels.push_back(l.label());
  EXPECT_EQ(labels, (std::vector<std::string>{"CE_N", "CE_N+KD_N", "CE_N+CE_O", "CE_N+CE_O+KD_N", "CE_N+CE_O+KD_O",
                                              "CE_N+CE_O+KD_N+KD_O"}));
}

TEST(Incremental, ConfigValidation) {
  auto cfg = quick_step({});
  EXPECT_NO_THROW(cfg.validate());
  cfg.phase2.lr = cfg.phase1.lr;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = quick_step({});
  cfg.losses.ce_new = false;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = quick_step({});
  cfg.losses.temperature = 0.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg = quick_step({});
  cfg.momentum = 1.0;
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(Incremental, PhaseDisciplineAndTeacherIntegrity) {
  const auto w = make_world(3);
  for (const auto& losses : incremental::loss_grid()) {
    auto st = base_state(w, 20);
    const auto before = nn::encode_snapshot(st.student);
    for (std::size_t step = 1; step < 3; ++step) {
      const auto r = incremental::run_step(st, w.schedule.class_assignment[step], step_data(w, step), quick_step(losses));
      EXPECT_EQ(r.backbone_checksum_phase1_start, r.backbone_checksum_phase1_end) << losses.label();
      EXPECT_EQ(r.teacher_checksum_start, r.teacher_checksum_end) << losses.label();
      EXPECT_NE(r.phase1_losses.size(), 0u);
      EXPECT_EQ(r.student_width, r.teacher_width + 2);
      if (step == 1) EXPECT_EQ(nn::encode_snapshot(*st.teacher), before) << "teacher is not the pre-step student";
      if (losses.uses_teacher()) {
        EXPECT_EQ(r.kd_max_compared_width, r.teacher_width);
        EXPECT_GT(r.kd_terms_evaluated, 0u);
      } else {
        EXPECT_EQ(r.kd_terms_evaluated, 0u);
      }
    }
  }
}

TEST(Incremental, NoEpochsKeepsOldLogits) {
  const auto w = make_world(5);
  auto st = base_state(w, 10);
  auto cfg = quick_step(full_losses());
  cfg.phase1.epochs = 0;
  cfg.phase2.epochs_max = 0;
  const auto r = incremental::run_step(st, w.schedule.class_assignment[1], step_data(w, 1), cfg);
  EXPECT_EQ(r.phase2_epochs_run, 0u);
  const auto batch = data::gather<float>(w.ds, w.split.test);
  auto teacher = *st.teacher;
  const auto t = teacher.forward(batch, 0, nn::Mode::kEval);
  const auto s = st.student.forward(batch, 0, nn::Mode::kEval);
  ASSERT_EQ(s.dim(1), t.dim(1) + 2);
  for (std::size_t i = 0; i < w.split.test.size(); ++i) {
    for (std::size_t c = 0; c < t.dim(1); ++c) ASSERT_EQ(s[i * s.dim(1) + c], t[i * t.dim(1) + c]);
  }
}

TEST(Incremental, DisabledSwitchEqualsZeroWeight) {
  const auto w = make_world(7);
  auto off = full_losses();
  off.kd_old = false;
  auto zero = full_losses();
  zero.weight_kd_old = 0.0;
  auto a = base_state(w, 10), b = base_state(w, 10);
  const auto ra = incremental::run_step(a, w.schedule.class_assignment[1], step_data(w, 1), quick_step(off, 4));
  const auto rb = incremental::run_step(b, w.schedule.class_assignment[1], step_data(w, 1), quick_step(zero, 4));
  EXPECT_EQ(nn::encode_snapshot(a.student), nn::encode_snapshot(b.student));
  EXPECT_EQ(ra.phase2_losses, rb.phase2_losses);
}

TEST(Incremental, KdChangesTheResult) {
  const auto w = make_world(7);
  LossSwitches ce;
  ce.ce_old = true;
  auto a = base_state(w, 10), b = base_state(w, 10);
  incremental::run_step(a, w.schedule.class_assignment[1], step_data(w, 1), quick_step(ce, 4));
  incremental::run_step(b, w.schedule.class_assignment[1], step_data(w, 1), quick_step(full_losses(), 4));
  EXPECT_NE(nn::encode_snapshot(a.student), nn::encode_snapshot(b.student));
}

TEST(Incremental, StepErrors) {
  const auto w = make_world(2);
  const auto data1 = step_data(w, 1);
  {
    // Distillation without any learned classes.
    incremental::IncrementalState<float> st;
    st.student = w.base;
    LossSwitches kd;
    kd.kd_new = true;
    EXPECT_THROW(incremental::run_step(st, w.schedule.class_assignment[1], data1, quick_step(kd)), ValidationError);
  }
  {
    auto st = base_state(w, 0);
    EXPECT_THROW(incremental::run_step(st, w.schedule.class_assignment[1], data1, quick_step(full_losses())), ValidationError);
  }
  {
    auto st = base_state(w, 10);
    auto empty = data1;
    empty.new_train.clear();
    EXPECT_THROW(incremental::run_step(st, w.schedule.class_assignment[1], empty, quick_step({})), ValidationError);
    EXPECT_THROW(incremental::run_step(st, w.schedule.class_assignment[0], data1, quick_step({})), ValidationError);
    EXPECT_THROW(incremental::run_step(st, {}, data1, quick_step({})), ValidationError);
    const std::vector<std::size_t> old_rows = data::filter_by_class(w.ds, w.split.train, w.schedule.class_assignment[0]);
    auto mixed = data1;
    mixed.new_train.insert(mixed.new_train.end(), old_rows.begin(), old_rows.end());
    EXPECT_THROW(incremental::run_step(st, w.schedule.class_assignment[1], mixed, quick_step({})), ValidationError);
  }
}

TEST(Incremental, EarlyStoppingRestoresBest) {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto w = make_world(40 + seed);
    auto st = base_state(w, 12);
    auto cfg = quick_step(full_losses(), seed);
    cfg.phase2.epochs_max = 12;
    cfg.phase2.patience = 1 + seed % 3;
    cfg.phase2.lr = 0.005;
    const auto d = step_data(w, 1);
    const auto r = incremental::run_step(st, w.schedule.class_assignment[1], d, cfg);
    EXPECT_LE(r.phase2_epochs_run, r.phase2_best_epoch + cfg.phase2.patience);
    const double logged = *std::max_element(r.phase2_val_accuracy.begin(), r.phase2_val_accuracy.end());
    EXPECT_EQ(r.best_val_accuracy, logged);
    EXPECT_EQ(r.phase2_val_accuracy[r.phase2_best_epoch], logged);
    EXPECT_EQ(head_accuracy(st.student, w.ds, d.val, 0), logged);
    EXPECT_EQ(r.final_val_accuracy, logged);
  }
}

TEST(Incremental, StoreFoldsNewClasses) {
  const auto w = make_world(9);
  auto st = base_state(w, 12);
  incremental::run_step(st, w.schedule.class_assignment[1], step_data(w, 1), quick_step(full_losses()));
  EXPECT_EQ(st.seen_classes.size(), 4u);
  EXPECT_EQ(st.store.per_class.size(), 4u);
  EXPECT_EQ(st.store.total(), 12u);
  EXPECT_EQ(st.step_index, 1u);
}

TEST(Incremental, BalancedFinetuneRuns) {
  const auto w = make_world(9);
  auto st = base_state(w, 12);
  auto cfg = quick_step(full_losses());
  cfg.balanced_finetune = incremental::BalancedFinetune{2, 3};
  const auto r = incremental::run_step(st, w.schedule.class_assignment[1], step_data(w, 1), cfg);
  EXPECT_EQ(r.balanced_losses.size(), 3u);
  EXPECT_EQ(r.teacher_checksum_start, r.teacher_checksum_end);
}

TEST(Incremental, ExperimentReport) {
  const auto w = make_world(11);
  incremental::ExperimentConfig cfg;
  cfg.step = quick_step(full_losses());
  cfg.exemplar_capacity = 12;
  cfg.seed = 3;
  const auto rep = incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg);
  ASSERT_EQ(rep.evals.size(), 3u);
  ASSERT_EQ(rep.steps.size(), 2u);
  EXPECT_FALSE(rep.evals[0].accuracy_old.has_value());
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(rep.evals[s].class_labels.size(), 2 * (s + 1));
    EXPECT_EQ(rep.evals[s].confusion.classes, 2 * (s + 1));
  }
  EXPECT_TRUE(rep.evals[2].accuracy_old.has_value() && rep.evals[2].accuracy_new.has_value());
  ASSERT_TRUE(rep.avg_incremental_accuracy.has_value());
  EXPECT_NEAR(*rep.avg_incremental_accuracy, (rep.evals[1].accuracy + rep.evals[2].accuracy) / 2.0, 1e-12);
  for (const auto& r : rep.steps) {
    EXPECT_EQ(r.backbone_checksum_phase1_start, r.backbone_checksum_phase1_end);
    EXPECT_EQ(r.teacher_checksum_start, r.teacher_checksum_end);
  }
  const auto csv = rep.steps_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "step,n_classes,acc,acc_old,acc_new");
  EXPECT_TRUE(rep.to_json().contains("timing"));
  EXPECT_FALSE(incremental::strip_timing(rep.to_json()).contains("timing"));
}

TEST(Incremental, ExperimentIsDeterministic) {
  const auto w = make_world(12);
  incremental::ExperimentConfig cfg;
  cfg.step = quick_step(full_losses());
  cfg.exemplar_capacity = 12;
  const auto a = incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg);
  const auto b = incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg);
  EXPECT_EQ(incremental::strip_timing(a.to_json()).dump(), incremental::strip_timing(b.to_json()).dump());
  cfg.seed = 1;
  const auto c = incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg);
  EXPECT_NE(incremental::strip_timing(a.to_json()).dump(), incremental::strip_timing(c.to_json()).dump());
}

TEST(Incremental, BaseOnlyScheduleHasNoAverage) {
  auto w = make_world(13, "6");
  incremental::ExperimentConfig cfg;
  cfg.step = quick_step({});
  cfg.exemplar_capacity = 0;
  const auto rep = incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg);
  EXPECT_EQ(rep.evals.size(), 1u);
  EXPECT_FALSE(rep.avg_incremental_accuracy.has_value());
  EXPECT_TRUE(!rep.to_json().contains("avg_incremental_accuracy") || rep.to_json().at("avg_incremental_accuracy").is_null());
}

TEST(Incremental, ExperimentRejectsMismatchedBase) {
  const auto w = make_world(14);
  auto other = data::parse_schedule("3-3", 6, 1, data::ClassOrder::kLabelOrder);
  incremental::ExperimentConfig cfg;
  cfg.step = quick_step({});
  EXPECT_THROW(incremental::run_experiment(w.base, w.ds, w.split, other, cfg), ValidationError);
  cfg.exemplar_capacity = 0;
  cfg.step.losses = full_losses();
  EXPECT_THROW(incremental::run_experiment(w.base, w.ds, w.split, w.schedule, cfg), ValidationError);
}
