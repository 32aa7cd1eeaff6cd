#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cil/tensor.hpp"
#include "cil/types.hpp"

namespace cil::data {

// Immutable labelled feature matrix. features holds num_samples() rows of
// feature_size() float values each, row-major.
struct Dataset {
  Shape feature_shape;
  std::vector<float> features;
  std::vector<Label> labels;
  std::vector<std::string> class_names;

  std::size_t num_samples() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }
  std::size_t feature_size() const { return shape_size(feature_shape); }

  // Checks sizes, label range, and that every class has a sample.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

// Gathers rows into a [indices.size(), feature_shape...] batch.
template <typename T>
Tensor<T> gather(const Dataset& ds, const std::vector<std::size_t>& indices);

inline constexpr int kManifestVersion = 1;

// Directory with manifest.json, features.bin (f32 LE) and labels.bin (u32 LE).
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);

struct SplitSpec {
  double train = 0.7;
  double test = 0.2;
  double val = 0.1;

  void validate() const;
};

// Indices into the source dataset; each list ascending by class then shuffled order.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> val;
};

Split stratified_split(const Dataset& ds, const SplitSpec& spec, std::uint64_t seed);

enum class ClassOrder { kSeededPermutation, kLabelOrder };

struct ClassSchedule {
  std::vector<std::size_t> step_sizes;
  std::vector<LabelList> class_assignment;
  // Full class order the steps were cut from.
  LabelList class_order;
  std::uint64_t seed = 0;

  LabelList classes_through(std::size_t step) const;
};

ClassSchedule parse_schedule(const std::string& text, std::size_t num_classes, std::uint64_t seed,
                             ClassOrder order = ClassOrder::kSeededPermutation);

struct BlobSpec {
  std::size_t num_classes = 10;
  std::size_t per_class = 100;
  std::size_t dim = 32;
  double separation = 3.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

// Gaussian blobs around seeded random unit directions scaled by separation.
// Samples are interleaved by class.
Dataset synth_blobs(const BlobSpec& spec);
// Class centers used by synth_blobs, [num_classes][dim].
std::vector<std::vector<double>> blob_centers(const BlobSpec& spec);

// Indices of `pool` whose label is in `classes`.
std::vector<std::size_t> filter_by_class(const Dataset& ds, const std::vector<std::size_t>& pool, const LabelList& classes);

}  // namespace cil::data
