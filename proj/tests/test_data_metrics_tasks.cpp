#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "cil/dataset.hpp"
#include "cil/io_util.hpp"
#include "cil/metrics.hpp"
#include "cil/task_factory.hpp"
#include "support.hpp"

using namespace cil;

// ---------------------------------------------------------------- data-io

namespace {

void put_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// Two samples of three features, labels {1, 0}; bytes spelled out by hand.
void write_fixture(const std::filesystem::path& dir) {
  std::ofstream(dir / "manifest.json")
      << R"({"version": 1, "num_samples": 2, "feature_shape": [3], "class_names": ["a", "b"]})";
  put_bytes(dir / "features.bin", {0x00, 0x00, 0x80, 0x3f,    // 1.0
                                   0x00, 0x00, 0x20, 0xc0,    // -2.5
                                   0x00, 0x00, 0x00, 0x3f,    // 0.5
                                   0x00, 0x00, 0x00, 0x00,    // 0.0
                                   0x00, 0x00, 0x40, 0x40,    // 3.0
                                   0x00, 0x00, 0x80, 0x3e});  // 0.25
  put_bytes(dir / "labels.bin", {0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00});
}

}  // namespace

TEST(DataIo, HandWrittenFixture) {
  cil::testing::TempDir dir("fixture");
  write_fixture(dir.path());
  const auto ds = data::load_dataset(dir.path());
  EXPECT_EQ(ds.feature_shape, (Shape{3}));
  EXPECT_EQ(ds.features, (std::vector<float>{1.0f, -2.5f, 0.5f, 0.0f, 3.0f, 0.25f}));
  EXPECT_EQ(ds.labels, (LabelList{1, 0}));
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"a", "b"}));
}

TEST(DataIo, SaveLoadRoundTripIsByteIdentical) {
  const auto ds = cil::testing::blobs(4, 7, 5, 3);
  cil::testing::TempDir a("rt_a"), b("rt_b");
  data::save_dataset(a.path(), ds);
  const auto back = data::load_dataset(a.path());
  EXPECT_EQ(back, ds);
  data::save_dataset(b.path(), back);
  for (const char* f : {"manifest.json", "features.bin", "labels.bin"}) {
    EXPECT_EQ(io::read_file(a / f), io::read_file(b / f)) << f;
  }
}

TEST(DataIo, LoaderRejectsInconsistentFiles) {
  cil::testing::TempDir dir("bad");
  write_fixture(dir.path());
  const auto features = io::read_file(dir / "features.bin");
  io::write_file_atomic(dir / "features.bin", features.substr(0, features.size() - 1));
  EXPECT_THROW(data::load_dataset(dir.path()), IoError);

  write_fixture(dir.path());
  put_bytes(dir / "labels.bin", {0x01, 0x00, 0x00, 0x00});
  EXPECT_THROW(data::load_dataset(dir.path()), IoError);

  write_fixture(dir.path());
  put_bytes(dir / "labels.bin", {0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00});
  EXPECT_THROW(data::load_dataset(dir.path()), IoError);

  write_fixture(dir.path());
  std::ofstream(dir / "manifest.json")
      << R"({"version": 2, "num_samples": 2, "feature_shape": [3], "class_names": ["a", "b"]})";
  EXPECT_THROW(data::load_dataset(dir.path()), IoError);

  write_fixture(dir.path());
  std::ofstream(dir / "manifest.json") << "{not json";
  EXPECT_THROW(data::load_dataset(dir.path()), IoError);

  EXPECT_THROW(data::load_dataset(dir / "missing"), IoError);
}

TEST(Split, SeventyTwentyTen) {
  const auto ds = cil::testing::blobs(3, 100, 2, 1);
  const auto s = data::stratified_split(ds, {}, 5);
  for (Label c = 0; c < 3; ++c) {
    EXPECT_EQ(data::filter_by_class(ds, s.train, {c}).size(), 70u);
    EXPECT_EQ(data::filter_by_class(ds, s.test, {c}).size(), 20u);
    EXPECT_EQ(data::filter_by_class(ds, s.val, {c}).size(), 10u);
  }
}

TEST(Split, PartitionIsExactAndSeeded) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const auto ds = cil::testing::blobs(2 + uniform_index(rng, 4), 3 + uniform_index(rng, 30), 2, seed);
    const auto s = data::stratified_split(ds, {}, seed);
    std::vector<int> seen(ds.num_samples(), 0);
    for (const auto* part : {&s.train, &s.test, &s.val}) {
      for (auto i : *part) ++seen.at(i);
    }
    for (int v : seen) EXPECT_EQ(v, 1);
    const auto again = data::stratified_split(ds, {}, seed);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
    EXPECT_EQ(again.val, s.val);
  }
}

TEST(Split, AllTrainAndErrors) {
  const auto ds = cil::testing::blobs(2, 10, 2, 1);
  const auto s = data::stratified_split(ds, {1.0, 0.0, 0.0}, 1);
  EXPECT_EQ(s.train.size(), 20u);
  EXPECT_TRUE(s.test.empty());
  EXPECT_TRUE(s.val.empty());
  EXPECT_THROW(data::stratified_split(ds, {0.5, 0.2, 0.2}, 1), ValidationError);
  EXPECT_THROW(data::stratified_split(ds, {0.0, 0.5, 0.5}, 1), ValidationError);
}

TEST(Schedule, ReferenceSchedules) {
  const auto twenty = data::parse_schedule("5-3-3-3-3-3", 20, 1);
  EXPECT_EQ(twenty.step_sizes, (std::vector<std::size_t>{5, 3, 3, 3, 3, 3}));
  const auto ten = data::parse_schedule("4-2-2-2", 10, 7);
  EXPECT_EQ(ten.step_sizes, (std::vector<std::size_t>{4, 2, 2, 2}));
  std::set<Label> all;
  for (const auto& step : ten.class_assignment) all.insert(step.begin(), step.end());
  EXPECT_EQ(all.size(), 10u);
  EXPECT_EQ(ten.classes_through(1).size(), 6u);
}

TEST(Schedule, BijectionOntoPermutationPrefix) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = data::parse_schedule("3-2-1", 9, seed);
    LabelList flat;
    for (const auto& step : s.class_assignment) flat.insert(flat.end(), step.begin(), step.end());
    EXPECT_EQ(flat, LabelList(s.class_order.begin(), s.class_order.begin() + 6));
    EXPECT_EQ(std::set<Label>(s.class_order.begin(), s.class_order.end()).size(), 9u);
  }
  const auto fixed = data::parse_schedule("2-2", 4, 3, data::ClassOrder::kLabelOrder);
  EXPECT_EQ(fixed.class_assignment[0], (LabelList{0, 1}));
  EXPECT_EQ(fixed.class_assignment[1], (LabelList{2, 3}));
}

TEST(Schedule, Errors) {
  EXPECT_THROW(data::parse_schedule("0-2", 10, 1), ValidationError);
  EXPECT_THROW(data::parse_schedule("4-x", 10, 1), ValidationError);
  EXPECT_THROW(data::parse_schedule("4--2", 10, 1), ValidationError);
  EXPECT_THROW(data::parse_schedule("", 10, 1), ValidationError);
  EXPECT_THROW(data::parse_schedule("6-6", 10, 1), ValidationError);
}

TEST(Synth, ZeroNoiseSamplesSitOnCenters) {
  data::BlobSpec spec;
  spec.num_classes = 3;
  spec.per_class = 4;
  spec.dim = 5;
  spec.noise_sigma = 0.0;
  const auto ds = data::synth_blobs(spec);
  const auto centers = data::blob_centers(spec);
  for (std::size_t i = 0; i < ds.num_samples(); ++i) {
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(ds.features[i * 5 + k], static_cast<float>(centers[ds.labels[i]][k]));
    }
  }
  double norm = 0.0;
  for (double v : centers[0]) norm += v * v;
  EXPECT_NEAR(std::sqrt(norm), spec.separation, 1e-12);
}

TEST(Synth, NearestCentroidIsPerfectWhenWellSeparated) {
  data::BlobSpec spec;
  spec.num_classes = 6;
  spec.per_class = 50;
  spec.dim = 16;
  spec.separation = 50.0;
  spec.noise_sigma = 0.5;
  const auto ds = data::synth_blobs(spec);
  const auto centers = data::blob_centers(spec);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.num_samples(); ++i) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < centers.size(); ++c) {
      double d = 0.0;
      for (std::size_t k = 0; k < spec.dim; ++k) d += std::pow(ds.features[i * spec.dim + k] - centers[c][k], 2);
      if (d < best_d) {
        best_d = d;
        best = c;
      }
    }
    correct += best == ds.labels[i];
  }
  EXPECT_EQ(correct, ds.num_samples());
}

TEST(Synth, DeterministicPerSeed) {
  EXPECT_EQ(cil::testing::blobs(4, 10, 3, 9), cil::testing::blobs(4, 10, 3, 9));
  EXPECT_NE(cil::testing::blobs(4, 10, 3, 9), cil::testing::blobs(4, 10, 3, 10));
}

// ---------------------------------------------------------------- metrics

TEST(Metrics, ConfusionBasics) {
  const std::vector<std::size_t> labels{0, 1, 2, 2};
  const auto cm = metrics::confusion(labels, labels, 3);
  EXPECT_EQ(cm.at(2, 2), 2u);
  EXPECT_EQ(cm.total(), 4u);
  EXPECT_DOUBLE_EQ(metrics::accuracy(cm), 1.0);
  const std::vector<std::size_t> none;
  EXPECT_EQ(metrics::confusion(none, none, 3).total(), 0u);
  const std::vector<std::size_t> bad{3};
  const std::vector<std::size_t> one{0};
  EXPECT_THROW(metrics::confusion(bad, one, 3), ValidationError);
  EXPECT_THROW(metrics::confusion(one, labels, 3), ValidationError);
}

TEST(Metrics, ConfusionMatchesTally) {
  Rng rng(3);
  std::vector<std::size_t> preds(100), labels(100);
  std::vector<std::uint64_t> tally(25, 0);
  for (std::size_t i = 0; i < 100; ++i) {
    preds[i] = uniform_index(rng, 5);
    labels[i] = uniform_index(rng, 5);
    ++tally[labels[i] * 5 + preds[i]];
  }
  const auto cm = metrics::confusion(preds, labels, 5);
  EXPECT_EQ(cm.counts, tally);
  // Row sums do not depend on the predictions.
  std::vector<std::size_t> relabeled(100);
  for (std::size_t i = 0; i < 100; ++i) relabeled[i] = (preds[i] + 3) % 5;
  const auto cm2 = metrics::confusion(relabeled, labels, 5);
  for (std::size_t c = 0; c < 5; ++c) EXPECT_EQ(cm.row_sum(c), cm2.row_sum(c));
}

TEST(Metrics, GroupAccuracyHandTally) {
  metrics::ConfusionMatrix cm(3);
  const std::uint64_t counts[3][3] = {{8, 2, 0}, {1, 9, 0}, {5, 0, 5}};
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t c = 0; c < 3; ++c) cm.at(r, c) = counts[r][c];
  }
  EXPECT_DOUBLE_EQ(metrics::group_accuracy(cm, {0, 1}), 17.0 / 20.0);
  EXPECT_DOUBLE_EQ(metrics::group_accuracy(cm, {0, 1, 2}), metrics::accuracy(cm));
  EXPECT_DOUBLE_EQ(metrics::group_accuracy(cm, {0, 1}, metrics::Averaging::kMacro), (0.8 + 0.9) / 2.0);
  // Weighted recombination of disjoint groups.
  const double a = metrics::group_accuracy(cm, {0, 1}), b = metrics::group_accuracy(cm, {2});
  EXPECT_NEAR((20.0 * a + 10.0 * b) / 30.0, metrics::accuracy(cm), 1e-12);
  EXPECT_THROW(metrics::group_accuracy(cm, {}), ValidationError);
  metrics::ConfusionMatrix empty(2);
  EXPECT_THROW(metrics::group_accuracy(empty, {0}), ValidationError);
}

TEST(Metrics, AverageIncrementalAccuracyLossTable) {
  struct Row {
    std::vector<double> steps;
    double avg;
  };
  const std::vector<Row> rows{{{96.97, 60.23, 43.79, 35.73, 29.46, 26.22}, 39.09},
                              {{97.25, 88.77, 79.07, 72.88, 72.82, 57.27}, 74.16},
                              {{97.12, 85.72, 80.64, 78.99, 74.30, 71.93}, 78.32},
                              {{97.35, 87.92, 81.47, 77.66, 73.80, 73.27}, 78.82}};
  for (const auto& r : rows) EXPECT_NEAR(metrics::avg_incremental_accuracy(r.steps), r.avg, 0.005);
  // Two printed Avg values sit 0.006 away from the mean of their own printed
  // steps (42.514 vs 42.52, 77.396 vs 77.39); only the two-rounding bound of
  // 0.01 holds for them.
  const std::vector<double> kd_new_row{97.08, 60.75, 43.34, 37.43, 36.20, 34.85};
  EXPECT_NEAR(metrics::avg_incremental_accuracy(kd_new_row), 42.514, 1e-9);
  EXPECT_NEAR(metrics::avg_incremental_accuracy(kd_new_row), 42.52, 0.01);
  const std::vector<double> ce_kd_new_row{96.78, 84.65, 78.27, 77.91, 73.60, 72.55};
  EXPECT_NEAR(metrics::avg_incremental_accuracy(ce_kd_new_row), 77.396, 1e-9);
  EXPECT_NEAR(metrics::avg_incremental_accuracy(ce_kd_new_row), 77.39, 0.01);
  // Including the base step does not fit the table.
  EXPECT_NEAR(metrics::avg_incremental_accuracy(rows[0].steps, true), 48.7333, 1e-3);
}

TEST(Metrics, AverageIncrementalAccuracyEdges) {
  const std::vector<double> flat{0.4, 0.4, 0.4};
  EXPECT_DOUBLE_EQ(metrics::avg_incremental_accuracy(flat), 0.4);
  const std::vector<double> base_only{0.9};
  EXPECT_THROW(metrics::avg_incremental_accuracy(base_only), ValidationError);
  EXPECT_THROW(metrics::avg_incremental_accuracy(std::vector<double>{}, true), ValidationError);
}

TEST(Metrics, ConfusionCsv) {
  metrics::ConfusionMatrix cm(2);
  cm.at(0, 0) = 3;
  cm.at(1, 0) = 1;
  EXPECT_EQ(metrics::confusion_csv(cm, {"a", "b"}), "true\\pred,a,b\na,3,0\nb,1,0\n");
}

// ----------------------------------------------------------- task factory

TEST(TaskFactory, EnumerateTaskCount) {
  for (unsigned n = 1; n <= 10; ++n) EXPECT_EQ(tasks::enumerate_task_count(n), (1ull << n) - 1);
  EXPECT_EQ(tasks::enumerate_task_count(4), 15u);
  EXPECT_THROW(tasks::enumerate_task_count(0), ValidationError);
  EXPECT_THROW(tasks::enumerate_task_count(63), ValidationError);
}

TEST(TaskFactory, DecreasingPlanExamples) {
  const LabelList base{0, 1, 2, 3, 4};
  const auto single = tasks::make_decreasing_plan(base, {5}, 3);
  ASSERT_EQ(single.tasks.size(), 1u);
  EXPECT_EQ(single.tasks[0].class_labels, base);
  const auto p = tasks::make_decreasing_plan(base, {5, 4, 3, 2}, 11);
  ASSERT_EQ(p.tasks.size(), 4u);
  EXPECT_EQ(p.tasks[0].class_labels, base);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(p.tasks[i].class_labels.size(), 5 - i);
  EXPECT_NO_THROW(p.validate());
  EXPECT_EQ(tasks::make_decreasing_plan(base, {5, 4, 3, 2}, 11), p);
  EXPECT_THROW(tasks::make_decreasing_plan(base, {6}, 1), ValidationError);
  EXPECT_THROW(tasks::make_decreasing_plan(base, {5, 6}, 1), ValidationError);
  EXPECT_THROW(tasks::make_decreasing_plan(base, {5, 1}, 1), ValidationError);
  EXPECT_THROW(tasks::make_decreasing_plan(base, {5, 3, 4}, 1), ValidationError);
  EXPECT_THROW(tasks::make_decreasing_plan(base, {5, 5}, 1), ValidationError);
  EXPECT_THROW(tasks::make_decreasing_plan({0, 1, 2}, {3, 2, 2, 2, 2}, 1), ValidationError);
}

TEST(TaskFactory, NestedPlansAreChains) {
  const auto p = tasks::make_decreasing_plan(cil::testing::iota_labels(6), {6, 5, 4, 3}, 2, true);
  for (std::size_t i = 1; i < p.tasks.size(); ++i) {
    const auto& prev = p.tasks[i - 1].class_labels;
    for (Label l : p.tasks[i].class_labels) EXPECT_NE(std::find(prev.begin(), prev.end(), l), prev.end());
  }
}

TEST(TaskFactory, FixedSizePlans) {
  const auto p = tasks::make_fixed_size_plan({0, 1, 2, 3, 4}, 3, 4, 5);
  ASSERT_EQ(p.tasks.size(), 3u);
  EXPECT_EQ(p.tasks[1].class_labels.size(), 4u);
  EXPECT_EQ(p.tasks[2].class_labels.size(), 4u);
  EXPECT_NO_THROW(p.validate());
  const auto all = tasks::make_fixed_size_plan({0, 1, 2}, 4, 2, 9);
  std::set<LabelList> subsets;
  for (std::size_t i = 1; i < all.tasks.size(); ++i) subsets.insert(all.tasks[i].class_labels);
  EXPECT_EQ(subsets, (std::set<LabelList>{{0, 1}, {0, 2}, {1, 2}}));
  EXPECT_EQ(tasks::make_fixed_size_plan({0, 1, 2}, 1, 2, 9).tasks.size(), 1u);
  EXPECT_THROW(tasks::make_fixed_size_plan({0, 1, 2}, 5, 2, 9), ValidationError);
}

TEST(TaskFactory, PropertyPlansAreValid) {
  Rng rng(2024);
  std::size_t built = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + uniform_index(rng, 7);
    LabelList base;
    for (std::size_t i = 0; i < n; ++i) base.push_back(static_cast<Label>(3 * i + uniform_index(rng, 3)));
    std::vector<std::size_t> sizes{n};
    const std::size_t extra = uniform_index(rng, 5);
    for (std::size_t k = 0; k < extra; ++k) {
      const std::size_t prev = sizes.back();
      if (prev <= 2) break;
      sizes.push_back(2 + uniform_index(rng, prev - 1));
    }
    const bool nested = uniform01(rng) < 0.3;
    try {
      const auto p = tasks::make_decreasing_plan(base, sizes, trial, nested);
      ++built;
      p.validate();
      ASSERT_EQ(p.tasks.size(), sizes.size());
      std::set<LabelList> distinct;
      for (std::size_t i = 0; i < p.tasks.size(); ++i) {
        const auto& l = p.tasks[i].class_labels;
        EXPECT_EQ(l.size(), sizes[i]);
        EXPECT_TRUE(std::is_sorted(l.begin(), l.end()));
        for (Label x : l) EXPECT_NE(std::find(base.begin(), base.end(), x), base.end());
        distinct.insert(l);
      }
      EXPECT_EQ(distinct.size(), p.tasks.size());
    } catch (const ValidationError&) {
      // Only infeasible requests may fail: more equal-size tasks than subsets.
      std::map<std::size_t, std::size_t> per_size;
      for (auto s : sizes) ++per_size[s];
      bool infeasible = nested;
      for (auto [s, count] : per_size) infeasible |= count > tasks::binomial(n, s);
      EXPECT_TRUE(infeasible);
    }
  }
  EXPECT_GT(built, 700u);
}

TEST(TaskFactory, SubsetSamplingIsUniform) {
  const LabelList base{0, 1, 2, 3, 4};
  std::map<LabelList, int> counts;
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) ++counts[tasks::make_decreasing_plan(base, {5, 3}, s).tasks[1].class_labels];
  EXPECT_EQ(counts.size(), 10u);
  for (const auto& [subset, c] : counts) EXPECT_NEAR(static_cast<double>(c) / draws, 0.1, 0.02);
}

TEST(TaskFactory, JsonRoundTripAndExplicit) {
  const auto p = tasks::make_decreasing_plan({2, 4, 6, 8}, {4, 3, 2}, 7);
  EXPECT_EQ(tasks::plan_from_json(tasks::plan_to_json(p)), p);
  const auto e = tasks::make_explicit_plan({0, 1, 2}, {{0, 1, 2}, {0, 2}});
  EXPECT_EQ(e.tasks[1].class_labels, (LabelList{0, 2}));
  EXPECT_THROW(tasks::make_explicit_plan({0, 1, 2}, {{0, 1}}), ValidationError);
  EXPECT_THROW(tasks::make_explicit_plan({0, 1, 2}, {{0, 1, 2}, {0, 5}}), ValidationError);
  EXPECT_THROW(tasks::make_explicit_plan({0, 1, 2}, {{0, 1, 2}, {1, 2}, {2, 1}}), ValidationError);
}
