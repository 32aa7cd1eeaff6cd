#include "cil/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "cil/io_util.hpp"
#include "cil/rng.hpp"

namespace cil::data {

using nlohmann::json;

void Dataset::validate() const {
  require(!feature_shape.empty(), "dataset feature shape is empty");
  require(features.size() == num_samples() * feature_size(), "dataset feature buffer does not match sample count");
  require(!class_names.empty(), "dataset has no classes");
  std::vector<std::size_t> counts(num_classes(), 0);
  for (Label l : labels) {
    require(l < num_classes(), "label " + std::to_string(l) + " out of range for " + std::to_string(num_classes()) + " classes");
    ++counts[l];
  }
  for (std::size_t c = 0; c < counts.size(); ++c) require(counts[c] > 0, "class " + std::to_string(c) + " has no samples");
}

template <typename T>
Tensor<T> gather(const Dataset& ds, const std::vector<std::size_t>& indices) {
  Shape shape{indices.size()};
  shape.insert(shape.end(), ds.feature_shape.begin(), ds.feature_shape.end());
  const std::size_t f = ds.feature_size();
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = ds.features.data() + indices[i] * f;
    std::transform(src, src + f, out.data() + i * f, [](float v) { return static_cast<T>(v); });
  }
  return out;
}

template Tensor<float> gather<float>(const Dataset&, const std::vector<std::size_t>&);
template Tensor<double> gather<double>(const Dataset&, const std::vector<std::size_t>&);

Dataset load_dataset(const std::filesystem::path& dir) {
  json manifest;
  try {
    manifest = json::parse(io::read_file(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw IoError("bad manifest.json in " + dir.string() + ": " + e.what());
  }
  Dataset ds;
  std::size_t n = 0;
  try {
    const int version = manifest.at("version").get<int>();
    if (version != kManifestVersion) throw IoError("unsupported dataset manifest version " + std::to_string(version));
    n = manifest.at("num_samples").get<std::size_t>();
    ds.feature_shape = manifest.at("feature_shape").get<Shape>();
    ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw IoError("bad manifest.json in " + dir.string() + ": " + e.what());
  }
  if (ds.feature_shape.empty() || shape_size(ds.feature_shape) == 0) throw IoError("manifest feature_shape is empty");

  const std::string fbytes = io::read_file(dir / "features.bin");
  const std::string lbytes = io::read_file(dir / "labels.bin");
  const std::size_t expected_f = n * ds.feature_size() * 4;
  if (fbytes.size() != expected_f) {
    throw IoError("features.bin holds " + std::to_string(fbytes.size()) + " bytes, manifest implies " +
                  std::to_string(expected_f));
  }
  if (lbytes.size() != n * 4) {
    throw IoError("labels.bin holds " + std::to_string(lbytes.size()) + " bytes, manifest implies " + std::to_string(n * 4));
  }
  ds.features.resize(n * ds.feature_size());
  for (std::size_t i = 0; i < ds.features.size(); ++i) ds.features[i] = io::get_f32(fbytes, 4 * i);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = io::get_u32(lbytes, 4 * i);
    if (ds.labels[i] >= ds.class_names.size()) {
      throw IoError("label " + std::to_string(ds.labels[i]) + " at sample " + std::to_string(i) + " exceeds class count");
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  ds.validate();
  json manifest{{"version", kManifestVersion},
                {"num_samples", ds.num_samples()},
                {"feature_shape", ds.feature_shape},
                {"class_names", ds.class_names}};
  std::string fbytes, lbytes;
  fbytes.reserve(ds.features.size() * 4);
  for (float v : ds.features) io::put_f32(fbytes, v);
  for (Label l : ds.labels) io::put_u32(lbytes, l);
  io::write_file_atomic(dir / "features.bin", fbytes);
  io::write_file_atomic(dir / "labels.bin", lbytes);
  io::write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

void SplitSpec::validate() const {
  require(train >= 0.0 && test >= 0.0 && val >= 0.0, "split fractions must be nonnegative");
  require(std::abs(train + test + val - 1.0) <= 1e-9, "split fractions must sum to 1");
}

Split stratified_split(const Dataset& ds, const SplitSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes());
  for (std::size_t i = 0; i < ds.num_samples(); ++i) by_class.at(ds.labels[i]).push_back(i);
  const bool all_positive = spec.train > 0 && spec.test > 0 && spec.val > 0;
  Rng rng(seed);
  Split out;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto& idx = by_class[c];
    const std::size_t n = idx.size();
    if (all_positive && n < 3) {
      throw ValidationError("class " + std::to_string(c) + " has " + std::to_string(n) + " samples; need at least 3 to split");
    }
    shuffle(idx, rng);
    const auto cut1 = static_cast<std::size_t>(std::llround(static_cast<double>(n) * spec.train));
    const auto cut2 = std::min(n, static_cast<std::size_t>(std::llround(static_cast<double>(n) * (spec.train + spec.test))));
    if (cut1 == 0) throw ValidationError("class " + std::to_string(c) + " would receive no training samples");
    out.train.insert(out.train.end(), idx.begin(), idx.begin() + cut1);
    out.test.insert(out.test.end(), idx.begin() + cut1, idx.begin() + cut2);
    out.val.insert(out.val.end(), idx.begin() + cut2, idx.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  std::sort(out.val.begin(), out.val.end());
  return out;
}

LabelList ClassSchedule::classes_through(std::size_t step) const {
  LabelList out;
  for (std::size_t s = 0; s <= step && s < class_assignment.size(); ++s) {
    out.insert(out.end(), class_assignment[s].begin(), class_assignment[s].end());
  }
  return out;
}

ClassSchedule parse_schedule(const std::string& text, std::size_t num_classes, std::uint64_t seed, ClassOrder order) {
  ClassSchedule out;
  out.seed = seed;
  std::size_t start = 0;
  while (true) {
    const std::size_t dash = text.find('-', start);
    const std::string token = text.substr(start, dash == std::string::npos ? std::string::npos : dash - start);
    if (token.empty() || token.size() > 9 ||
        !std::all_of(token.begin(), token.end(), [](unsigned char ch) { return std::isdigit(ch); })) {
      throw ValidationError("malformed schedule '" + text + "': bad step '" + token + "'");
    }
    const std::size_t size = std::stoul(token);
    if (size == 0) throw ValidationError("schedule '" + text + "' has a nonpositive step");
    out.step_sizes.push_back(size);
    if (dash == std::string::npos) break;
    start = dash + 1;
  }
  std::size_t total = 0;
  for (auto s : out.step_sizes) total += s;
  if (total > num_classes) {
    throw ValidationError("schedule '" + text + "' needs " + std::to_string(total) + " classes, dataset has " +
                          std::to_string(num_classes));
  }
  out.class_order.resize(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) out.class_order[c] = static_cast<Label>(c);
  if (order == ClassOrder::kSeededPermutation) {
    Rng rng(seed);
    shuffle(out.class_order, rng);
  }
  std::size_t pos = 0;
  for (auto s : out.step_sizes) {
    out.class_assignment.emplace_back(out.class_order.begin() + pos, out.class_order.begin() + pos + s);
    pos += s;
  }
  return out;
}

std::vector<std::vector<double>> blob_centers(const BlobSpec& spec) {
  require(spec.num_classes >= 2, "synthetic blobs need at least 2 classes");
  require(spec.dim >= 1 && spec.per_class >= 1, "synthetic blobs need positive dim and per-class count");
  require(spec.separation > 0.0, "blob separation must be positive");
  require(spec.noise_sigma >= 0.0, "blob noise must be nonnegative");
  Rng rng(spec.seed);
  std::vector<std::vector<double>> centers(spec.num_classes, std::vector<double>(spec.dim));
  for (auto& c : centers) {
    double norm = 0.0;
    while (norm == 0.0) {
      for (auto& v : c) v = normal01(rng);
      for (double v : c) norm += v * v;
    }
    norm = std::sqrt(norm);
    for (auto& v : c) v = v / norm * spec.separation;
  }
  return centers;
}

Dataset synth_blobs(const BlobSpec& spec) {
  const auto centers = blob_centers(spec);
  // Noise draws continue a separate stream so centers do not depend on noise.
  Rng rng(mix_seed(spec.seed, 1));
  Dataset ds;
  ds.feature_shape = {spec.dim};
  for (std::size_t c = 0; c < spec.num_classes; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  ds.features.reserve(spec.num_classes * spec.per_class * spec.dim);
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < spec.num_classes; ++c) {
      for (std::size_t d = 0; d < spec.dim; ++d) {
        const double noise = spec.noise_sigma > 0.0 ? spec.noise_sigma * normal01(rng) : 0.0;
        ds.features.push_back(static_cast<float>(centers[c][d] + noise));
      }
      ds.labels.push_back(static_cast<Label>(c));
    }
  }
  return ds;
}

std::vector<std::size_t> filter_by_class(const Dataset& ds, const std::vector<std::size_t>& pool, const LabelList& classes) {
  const std::set<Label> wanted(classes.begin(), classes.end());
  std::vector<std::size_t> out;
  for (auto i : pool) {
    if (wanted.count(ds.labels.at(i))) out.push_back(i);
  }
  return out;
}

}  // namespace cil::data
