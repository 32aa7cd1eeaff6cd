#include <benchmark/benchmark.h>

#include <numeric>

#include "cil/incremental.hpp"
#include "cil/multitask_trainer.hpp"
#include "support.hpp"

using namespace cil;

namespace {

nn::LossSpec<float> ce_all_rows(std::size_t n, std::size_t classes) {
  nn::CrossEntropyTerm term;
  for (std::size_t r = 0; r < n; ++r) {
    term.rows.push_back(r);
    term.targets.push_back(r % classes);
  }
  nn::LossSpec<float> loss;
  loss.cross_entropy.push_back(term);
  return loss;
}

Tensor<float> random_batch(Shape shape, std::uint64_t seed) {
  Tensor<float> t(std::move(shape));
  Rng rng(seed);
  for (auto& v : t.values()) v = static_cast<float>(normal01(rng));
  return t;
}

void BM_MlpForwardBackward(benchmark::State& state) {
  const std::size_t batch = state.range(0);
  nn::Model<float> model(testing::mlp({64, 32}, 32), {testing::iota_labels(10)}, 1);
  const auto x = random_batch({batch, 32}, 2);
  const auto loss = ce_all_rows(batch, 10);
  const auto mask = model.unfrozen_mask();
  for (auto _ : state) {
    auto res = model.backward(x, loss, nn::Mode::kTrain, mask);
    benchmark::DoNotOptimize(res.loss);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_MlpForwardBackward)->Arg(32)->Arg(128);

void BM_ConvNetForwardBackward(benchmark::State& state) {
  const std::size_t batch = state.range(0);
  nn::BackboneSpec spec{nn::ConvNetSpec{{8, 8, 16, 16}, 3, 0.5}, {1, 16, 16}};
  nn::Model<float> model(spec, {testing::iota_labels(10)}, 1);
  const auto x = random_batch({batch, 1, 16, 16}, 2);
  const auto loss = ce_all_rows(batch, 10);
  const auto mask = model.unfrozen_mask();
  for (auto _ : state) {
    auto res = model.backward(x, loss, nn::Mode::kTrain, mask);
    benchmark::DoNotOptimize(res.loss);
  }
  state.SetItemsProcessed(state.iterations() * batch);
}
BENCHMARK(BM_ConvNetForwardBackward)->Arg(16)->Unit(benchmark::kMillisecond);

// One base-training epoch on the blob benchmark as the number of heads grows.
void BM_BaseEpochVsHeads(benchmark::State& state) {
  const std::size_t heads = state.range(0);
  const auto ds = testing::blobs(10, 100, 32, 0);
  const auto split = data::stratified_split(ds, {}, 1);
  const LabelList base{0, 1, 2, 3, 4, 5};
  const auto train = data::filter_by_class(ds, split.train, base);
  const auto val = data::filter_by_class(ds, split.val, base);
  std::vector<std::size_t> sizes;
  for (std::size_t h = 0; h < heads; ++h) sizes.push_back(base.size() - h);
  const auto plan = tasks::make_decreasing_plan(base, sizes, 3);
  multitask::BaseTrainConfig cfg;
  cfg.epochs_max = 1;
  cfg.lr_schedule = nn::CosineLr{0.01, 1};
  for (auto _ : state) {
    auto res = multitask::train_base<float>(testing::mlp({64, 32}, 32), plan, ds, train, val, cfg);
    benchmark::DoNotOptimize(res.log.best_val_accuracy);
  }
}
BENCHMARK(BM_BaseEpochVsHeads)->DenseRange(1, 5)->Unit(benchmark::kMillisecond);

// A full incremental step (both phases, all four losses) on the blob benchmark.
void BM_IncrementalStep(benchmark::State& state) {
  const auto ds = testing::blobs(10, 100, 32, 0);
  const auto split = data::stratified_split(ds, {}, 1);
  const LabelList base{0, 1, 2, 3};
  multitask::BaseTrainConfig bcfg;
  bcfg.epochs_max = 10;
  bcfg.lr_schedule = nn::CosineLr{0.01, 10};
  const auto trained = multitask::train_base<float>(testing::mlp({64, 32}, 32), tasks::make_decreasing_plan(base, {4}, 0), ds,
                                                    data::filter_by_class(ds, split.train, base),
                                                    data::filter_by_class(ds, split.val, base), bcfg);
  incremental::StepConfig cfg;
  cfg.losses.ce_old = cfg.losses.kd_new = cfg.losses.kd_old = true;
  cfg.phase2.epochs_max = 10;
  incremental::StepData data;
  data.dataset = &ds;
  data.new_train = data::filter_by_class(ds, split.train, {4, 5});
  data.val = data::filter_by_class(ds, split.val, {0, 1, 2, 3, 4, 5});
  for (auto _ : state) {
    incremental::IncrementalState<float> st;
    st.student = trained.model;
    st.seen_classes = base;
    st.store.capacity = 50;
    st.store = exemplar::rebalance<float>(st.store, base, ds, split.train);
    auto r = incremental::run_step(st, {4, 5}, data, cfg);
    benchmark::DoNotOptimize(r.final_val_accuracy);
  }
}
BENCHMARK(BM_IncrementalStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
