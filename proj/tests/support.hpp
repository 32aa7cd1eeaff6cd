#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "cil/dataset.hpp"
#include "cil/model.hpp"

namespace cil::testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("cil_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline data::Dataset blobs(std::size_t classes, std::size_t per_class, std::size_t dim, std::uint64_t seed,
                           double separation = 3.0, double sigma = 1.0) {
  data::BlobSpec spec;
  spec.num_classes = classes;
  spec.per_class = per_class;
  spec.dim = dim;
  spec.separation = separation;
  spec.noise_sigma = sigma;
  spec.seed = seed;
  return data::synth_blobs(spec);
}

inline nn::BackboneSpec mlp(std::vector<std::size_t> hidden, std::size_t in) {
  return nn::BackboneSpec{nn::MlpSpec{std::move(hidden)}, {in}};
}

inline LabelList iota_labels(std::size_t n, Label start = 0) {
  LabelList out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = start + static_cast<Label>(i);
  return out;
}

template <typename T>
std::vector<T> flat(const nn::Model<T>& m) {
  std::vector<T> out;
  for (const auto* p : m.parameters()) out.insert(out.end(), p->values().begin(), p->values().end());
  for (const auto* b : m.buffers()) out.insert(out.end(), b->values().begin(), b->values().end());
  return out;
}

}  // namespace cil::testing
