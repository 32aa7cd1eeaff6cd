#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "cil/dataset.hpp"
#include "cil/model.hpp"

namespace cil::exemplar {

enum class Strategy { kRandom, kHerding };

Strategy strategy_from_string(const std::string& name);
std::string to_string(Strategy s);

// Budget-K memory of training-corpus indices, kept balanced across classes.
// Each class list is in selection order, so truncation keeps the best prefix.
struct ExemplarStore {
  std::size_t capacity = 0;
  Strategy strategy = Strategy::kRandom;
  std::uint64_t seed = 0;
  std::map<Label, std::vector<std::size_t>> per_class;

  std::size_t total() const;
  std::vector<std::size_t> all_indices() const;

  bool operator==(const ExemplarStore&) const = default;
};

nlohmann::json store_to_json(const ExemplarStore& store);
ExemplarStore store_from_json(const nlohmann::json& j);

// floor(K / |seen|) each, remainder one apiece to the lowest labels.
std::map<Label, std::size_t> class_quotas(std::size_t capacity, const LabelList& seen);

// Greedy herding: step k picks the unselected row minimizing
// || mean(all) - (sum(selected) + x) / k ||_2; ties go to the lower index.
std::vector<std::size_t> herding_order(const std::vector<std::vector<double>>& embeddings, std::size_t count);

// Truncates retained classes to their quota and fills classes not yet in the
// store from `train_pool` using the store's strategy. Herding needs `model`.
template <typename T>
ExemplarStore rebalance(const ExemplarStore& store, const LabelList& seen, const data::Dataset& ds,
                        const std::vector<std::size_t>& train_pool, nn::Model<T>* model = nullptr);

// per_class_m samples from every stored class plus every class in
// new_classes (drawn from new_train), seeded.
std::vector<std::size_t> build_balanced_set(const ExemplarStore& store, const data::Dataset& ds,
                                            const std::vector<std::size_t>& new_train, const LabelList& new_classes,
                                            std::size_t per_class_m, std::uint64_t seed);

}  // namespace cil::exemplar
