#include "cil/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>

#include "cil/errors.hpp"
#include "cil/losses.hpp"
#include "cil/model.hpp"

namespace cil::gradcheck {

using nn::LayerContext;
using nn::Mode;
using D = double;

bool Summary::all_passed() const { return failures() == 0 && !results.empty(); }

std::size_t Summary::failures() const {
  return static_cast<std::size_t>(std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.passed; }));
}

namespace {

// A value being perturbed together with its analytic derivative.
struct Probe {
  double* value;
  double analytic;
};

struct Tolerance {
  double eps, floor;
  bool flip;
};

double compare(std::vector<Probe> probes, const std::function<double()>& loss, const Tolerance& tol) {
  double worst = 0.0;
  for (auto& p : probes) {
    const double saved = *p.value;
    *p.value = saved + tol.eps;
    const double up = loss();
    *p.value = saved - tol.eps;
    const double down = loss();
    *p.value = saved;
    const double numeric = (up - down) / (2.0 * tol.eps);
    const double analytic = tol.flip ? -p.analytic : p.analytic;
    const double denom = std::max({std::abs(analytic), std::abs(numeric), tol.floor});
    worst = std::max(worst, std::abs(analytic - numeric) / denom);
  }
  return worst;
}

Tensor<D> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<D> t(std::move(shape));
  for (auto& v : t.values()) v = scale * normal01(rng);
  return t;
}

// Inputs kept away from the ReLU kink so the central difference never straddles it.
Tensor<D> away_from_zero(Shape shape, Rng& rng) {
  Tensor<D> t(std::move(shape));
  for (auto& v : t.values()) {
    const double mag = uniform(rng, 0.05, 1.5);
    v = uniform01(rng) < 0.5 ? -mag : mag;
  }
  return t;
}

double dot(const Tensor<D>& a, const Tensor<D>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void add_probes(std::vector<Probe>& probes, Tensor<D>& values, const Tensor<D>& grads) {
  for (std::size_t i = 0; i < values.size(); ++i) probes.push_back({values.data() + i, grads[i]});
}

// Projects the layer output on a fixed random direction, giving a scalar loss
// whose gradient with respect to the output is that direction.
template <typename L>
double check_layer(L& layer, Tensor<D> x, LayerContext ctx, std::uint64_t rng_seed, Rng& rng, const Tolerance& tol,
                   std::size_t& entries) {
  Rng layer_rng(rng_seed);
  auto run = [&]() {
    layer_rng.seed(rng_seed);
    ctx.rng = &layer_rng;
    return layer.forward(x, ctx);
  };
  const Tensor<D> y = run();
  const Tensor<D> dir = random_tensor(y.shape(), rng);
  layer.zero_grads();
  const Tensor<D> dx = layer.backward(dir, true);
  std::vector<Probe> probes;
  add_probes(probes, x, dx);
  const auto param_grads = layer.grads;
  for (std::size_t i = 0; i < layer.params.size(); ++i) add_probes(probes, layer.params[i], param_grads[i]);
  entries = probes.size();
  return compare(std::move(probes), [&]() { return dot(run(), dir); }, tol);
}

// Parameters are redrawn first: zero biases can park a pre-activation exactly
// on the ReLU kink, where the central difference sees half the slope.
double check_model(nn::Model<D>& model, const Tensor<D>& batch, const nn::LossSpec<D>& loss, Mode mode, Rng& rng,
                   const Tolerance& tol, std::size_t& entries) {
  for (auto* p : model.parameters()) *p = random_tensor(p->shape(), rng, 0.5);
  const auto mask = model.unfrozen_mask();
  auto res = model.backward(batch, loss, mode, mask);
  std::vector<Probe> probes;
  auto params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) add_probes(probes, *params[i], res.grads[i]);
  entries = probes.size();
  return compare(std::move(probes), [&]() { return model.backward(batch, loss, mode, mask).loss; }, tol);
}

using Check = std::function<double(std::uint64_t seed, const Tolerance&, std::size_t& entries)>;

struct NamedCheck {
  std::string name;
  Check run;
  double tolerance_scale = 1.0;
};

std::vector<NamedCheck> suite() {
  std::vector<NamedCheck> checks;
  checks.push_back({"dense", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::Dense<D> layer(5, 4);
                      for (auto& p : layer.params) p = random_tensor(p.shape(), rng, 0.5);
                      return check_layer(layer, random_tensor({3, 5}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"relu", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::Relu<D> layer;
                      return check_layer(layer, away_from_zero({4, 6}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"conv2d", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::Conv2d<D> layer(2, 3, 3);
                      for (auto& p : layer.params) p = random_tensor(p.shape(), rng, 0.5);
                      return check_layer(layer, random_tensor({2, 2, 5, 4}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"batchnorm_eval", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::BatchNorm<D> layer(3);
                      for (auto& p : layer.params) p = random_tensor(p.shape(), rng);
                      layer.buffers[0] = random_tensor({3}, rng);
                      for (auto& v : layer.buffers[1].values()) v = uniform(rng, 0.5, 2.0);
                      return check_layer(layer, random_tensor({4, 3, 2, 2}, rng), {Mode::kEval}, seed, rng, tol, n);
                    }});
  checks.push_back({"batchnorm_train", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::BatchNorm<D> layer(3);
                      for (auto& p : layer.params) p = random_tensor(p.shape(), rng);
                      return check_layer(layer, random_tensor({5, 3}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"dropout", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::Dropout<D> layer(0.3);
                      return check_layer(layer, random_tensor({4, 5}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"avgpool", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::GlobalAvgPool<D> layer;
                      return check_layer(layer, random_tensor({2, 3, 3, 4}, rng), {Mode::kTrain}, seed, rng, tol, n);
                    }});
  checks.push_back({"cross_entropy", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      Tensor<D> logits = random_tensor({4, 5}, rng, 2.0);
                      std::vector<std::size_t> targets(4);
                      for (auto& t : targets) t = uniform_index(rng, 5);
                      const auto lg = nn::cross_entropy(logits, targets);
                      std::vector<Probe> probes;
                      add_probes(probes, logits, lg.grad);
                      n = probes.size();
                      return compare(std::move(probes), [&]() { return nn::cross_entropy(logits, targets).value; }, tol);
                    }});
  checks.push_back({"kd", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      const double temps[] = {1.0, 2.0, 4.0};
                      const double t = temps[seed % 3];
                      Tensor<D> student = random_tensor({3, 4}, rng, 2.0);
                      const Tensor<D> teacher = random_tensor({3, 4}, rng, 2.0);
                      const auto lg = nn::kd_loss(student, teacher, t);
                      std::vector<Probe> probes;
                      add_probes(probes, student, lg.grad);
                      n = probes.size();
                      return compare(std::move(probes), [&]() { return nn::kd_loss(student, teacher, t).value; }, tol);
                    }});
  checks.push_back({"mlp_model", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::BackboneSpec spec{nn::MlpSpec{{7, 6}}, {5}};
                      nn::Model<D> model(spec, {{0, 1, 2, 3}, {1, 2}}, seed);
                      const auto batch = random_tensor({6, 5}, rng);
                      nn::LossSpec<D> loss;
                      loss.cross_entropy.push_back({0, {0, 1, 2, 3}, {0, 3, 1, 2}, 1.0});
                      loss.cross_entropy.push_back({1, {2, 4, 5}, {0, 1, 1}, 0.5});
                      nn::DistillTerm<D> kd;
                      kd.task_id = 0;
                      kd.rows = {1, 3, 5};
                      kd.teacher_logits = random_tensor({3, 3}, rng);
                      loss.distill.push_back(kd);
                      return check_model(model, batch, loss, Mode::kTrain, rng, tol, n);
                    }});
  checks.push_back({"convnet_model_eval", [](std::uint64_t seed, const Tolerance& tol, std::size_t& n) {
                      Rng rng(seed);
                      nn::BackboneSpec spec{nn::ConvNetSpec{{2, 2, 3, 3}, 3, 0.5}, {1, 4, 4}};
                      nn::Model<D> model(spec, {{0, 1, 2}}, seed);
                      for (auto* b : model.buffers()) {
                        for (auto& v : b->values()) v = uniform(rng, 0.5, 1.5);
                      }
                      const auto batch = random_tensor({3, 1, 4, 4}, rng);
                      nn::LossSpec<D> loss;
                      loss.cross_entropy.push_back({0, {0, 1, 2}, {2, 0, 1}, 1.0});
                      return check_model(model, batch, loss, Mode::kEval, rng, tol, n);
                    }});
  return checks;
}

}  // namespace

std::vector<std::string> check_names() {
  std::vector<std::string> names;
  for (const auto& c : suite()) names.push_back(c.name);
  return names;
}

Summary run_suite(const Options& options) {
  require(!options.seeds.empty(), "gradient check needs at least one seed");
  require(options.eps > 0.0 && options.tolerance > 0.0, "gradient check eps and tolerance must be positive");
  const auto checks = suite();
  if (options.inject_fault) {
    const bool known = std::any_of(checks.begin(), checks.end(), [&](const auto& c) { return c.name == *options.inject_fault; });
    require(known, "unknown gradient check '" + *options.inject_fault + "'");
  }
  const auto start = std::chrono::steady_clock::now();
  Summary summary;
  for (const auto& check : checks) {
    const Tolerance tol{options.eps, options.floor, options.inject_fault && *options.inject_fault == check.name};
    for (auto seed : options.seeds) {
      CheckResult r;
      r.name = check.name;
      r.seed = seed;
      r.tolerance = options.tolerance * check.tolerance_scale;
      r.max_rel_error = check.run(seed, tol, r.entries);
      r.passed = std::isfinite(r.max_rel_error) && r.max_rel_error <= r.tolerance;
      summary.results.push_back(r);
    }
  }
  summary.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

}  // namespace cil::gradcheck
