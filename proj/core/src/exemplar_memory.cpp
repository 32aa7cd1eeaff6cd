#include "cil/exemplar_memory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "cil/rng.hpp"
#include "cil/training.hpp"

namespace cil::exemplar {

using nlohmann::json;

Strategy strategy_from_string(const std::string& name) {
  if (name == "random") return Strategy::kRandom;
  if (name == "herding") return Strategy::kHerding;
  throw ValidationError("unknown exemplar strategy '" + name + "'");
}

std::string to_string(Strategy s) { return s == Strategy::kRandom ? "random" : "herding"; }

std::size_t ExemplarStore::total() const {
  std::size_t n = 0;
  for (const auto& [label, idx] : per_class) n += idx.size();
  return n;
}

std::vector<std::size_t> ExemplarStore::all_indices() const {
  std::vector<std::size_t> out;
  for (const auto& [label, idx] : per_class) out.insert(out.end(), idx.begin(), idx.end());
  return out;
}

json store_to_json(const ExemplarStore& store) {
  json classes = json::object();
  for (const auto& [label, idx] : store.per_class) classes[std::to_string(label)] = idx;
  return {{"capacity", store.capacity}, {"strategy", to_string(store.strategy)}, {"seed", store.seed}, {"per_class", classes}};
}

ExemplarStore store_from_json(const json& j) {
  try {
    ExemplarStore s;
    s.capacity = j.at("capacity").get<std::size_t>();
    s.strategy = strategy_from_string(j.at("strategy").get<std::string>());
    s.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [key, idx] : j.at("per_class").items()) {
      s.per_class[static_cast<Label>(std::stoul(key))] = idx.get<std::vector<std::size_t>>();
    }
    return s;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad exemplar store: ") + e.what());
  }
}

std::map<Label, std::size_t> class_quotas(std::size_t capacity, const LabelList& seen) {
  require(!seen.empty(), "exemplar quotas need at least one class");
  const std::set<Label> sorted(seen.begin(), seen.end());
  require(sorted.size() == seen.size(), "seen classes must be distinct");
  if (capacity < sorted.size()) {
    throw ValidationError("exemplar budget " + std::to_string(capacity) + " is smaller than the " +
                          std::to_string(sorted.size()) + " seen classes");
  }
  const std::size_t base = capacity / sorted.size();
  std::size_t extra = capacity % sorted.size();
  std::map<Label, std::size_t> out;
  for (Label l : sorted) {
    out[l] = base + (extra > 0 ? 1 : 0);
    if (extra > 0) --extra;
  }
  return out;
}

std::vector<std::size_t> herding_order(const std::vector<std::vector<double>>& embeddings, std::size_t count) {
  const std::size_t n = embeddings.size();
  count = std::min(count, n);
  if (n == 0 || count == 0) return {};
  const std::size_t d = embeddings[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& e : embeddings) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += e[k];
  }
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<double> running(d, 0.0);
  std::vector<bool> used(n, false);
  std::vector<std::size_t> order;
  for (std::size_t step = 1; step <= count; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t pick = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = mean[k] - (running[k] + embeddings[i][k]) / static_cast<double>(step);
        dist += diff * diff;
      }
      // Distances equal up to rounding count as a tie.
      if (dist < best * (1.0 - 1e-12)) {
        best = dist;
        pick = i;
      }
    }
    used[pick] = true;
    order.push_back(pick);
    for (std::size_t k = 0; k < d; ++k) running[k] += embeddings[pick][k];
  }
  return order;
}

namespace {

template <typename T>
std::vector<std::size_t> select_class(const ExemplarStore& store, Label label, const std::vector<std::size_t>& candidates,
                                      std::size_t quota, const data::Dataset& ds, nn::Model<T>* model) {
  if (store.strategy == Strategy::kRandom) {
    std::vector<std::size_t> pool = candidates;
    Rng rng(mix_seed(store.seed, label));
    shuffle(pool, rng);
    pool.resize(std::min(quota, pool.size()));
    return pool;
  }
  if (!model) throw ValidationError("herding selection needs a model for embeddings");
  std::vector<std::vector<double>> emb;
  emb.reserve(candidates.size());
  for (auto [b, e] : batch_ranges(candidates.size(), 256)) {
    const std::vector<std::size_t> chunk(candidates.begin() + b, candidates.begin() + e);
    const auto out = model->embed(data::gather<T>(ds, chunk), nn::Mode::kEval);
    const std::size_t dim = out.dim(1);
    for (std::size_t i = 0; i < chunk.size(); ++i) emb.emplace_back(out.data() + i * dim, out.data() + (i + 1) * dim);
  }
  std::vector<std::size_t> picked;
  for (auto pos : herding_order(emb, quota)) picked.push_back(candidates[pos]);
  return picked;
}

}  // namespace

template <typename T>
ExemplarStore rebalance(const ExemplarStore& store, const LabelList& seen, const data::Dataset& ds,
                        const std::vector<std::size_t>& train_pool, nn::Model<T>* model) {
  const auto quotas = class_quotas(store.capacity, seen);
  ExemplarStore out;
  out.capacity = store.capacity;
  out.strategy = store.strategy;
  out.seed = store.seed;
  for (const auto& [label, quota] : quotas) {
    auto it = store.per_class.find(label);
    if (it != store.per_class.end()) {
      std::vector<std::size_t> kept(it->second.begin(), it->second.begin() + std::min(quota, it->second.size()));
      out.per_class[label] = std::move(kept);
      continue;
    }
    const auto candidates = data::filter_by_class(ds, train_pool, {label});
    if (candidates.empty()) throw ValidationError("class " + std::to_string(label) + " has no training samples for exemplars");
    out.per_class[label] = select_class(store, label, candidates, quota, ds, model);
  }
  return out;
}

std::vector<std::size_t> build_balanced_set(const ExemplarStore& store, const data::Dataset& ds,
                                            const std::vector<std::size_t>& new_train, const LabelList& new_classes,
                                            std::size_t per_class_m, std::uint64_t seed) {
  if (per_class_m == 0) return {};
  std::map<Label, std::vector<std::size_t>> pools = store.per_class;
  for (Label l : new_classes) {
    require(!pools.count(l), "new class " + std::to_string(l) + " is already stored as an old class");
    pools[l] = data::filter_by_class(ds, new_train, {l});
  }
  std::vector<std::size_t> out;
  for (auto& [label, pool] : pools) {
    if (pool.size() < per_class_m) {
      throw ValidationError("class " + std::to_string(label) + " has " + std::to_string(pool.size()) +
                            " samples, balanced set needs " + std::to_string(per_class_m));
    }
    Rng rng(mix_seed(seed, label));
    shuffle(pool, rng);
    out.insert(out.end(), pool.begin(), pool.begin() + per_class_m);
  }
  return out;
}

template ExemplarStore rebalance<float>(const ExemplarStore&, const LabelList&, const data::Dataset&,
                                        const std::vector<std::size_t>&, nn::Model<float>*);
template ExemplarStore rebalance<double>(const ExemplarStore&, const LabelList&, const data::Dataset&,
                                         const std::vector<std::size_t>&, nn::Model<double>*);

}  // namespace cil::exemplar
