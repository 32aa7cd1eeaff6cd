#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "cil/layers.hpp"
#include "cil/types.hpp"

namespace cil::nn {

struct MlpSpec {
  std::vector<std::size_t> hidden_sizes;
};

// Four conv stages (conv -> ReLU -> batch norm), dropout, global average pool.
struct ConvNetSpec {
  std::array<std::size_t, 4> conv_channels{};
  std::size_t kernel_size = 3;
  double dropout_rate = 0.5;
};

struct BackboneSpec {
  std::variant<MlpSpec, ConvNetSpec> variant;
  // Per-sample shape: [features...] for an MLP (flattened), [C, H, W] for a ConvNet.
  Shape input_shape;

  std::size_t embedding_dim() const;
  void validate() const;
};

template <typename T>
struct Head {
  int task_id = 0;
  LabelList class_labels;
  Tensor<T> weight;  // [embedding_dim, |class_labels|]
  Tensor<T> bias;    // [|class_labels|]
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;

  std::size_t width() const { return class_labels.size(); }
  // Head-local column of a global label, if the head covers it.
  std::optional<std::size_t> column_of(Label label) const;
};

// Describes one trainable tensor of a model in declaration order.
struct ParamGroup {
  std::string name;
  bool in_backbone = false;
  std::size_t layer = 0;  // backbone layer index, or head index
};

// true = excluded from updates. Aligned with Model::parameter_groups().
struct FreezeMask {
  std::vector<bool> frozen;

  bool operator==(const FreezeMask&) const = default;
  bool any_frozen() const;
};

enum class FreezeScope { kNone, kBackboneOnly };

// Gradients aligned with Model::parameter_groups(); frozen groups are zero.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

// Mean cross entropy of `head` over a subset of batch rows; targets are
// head-local column indices.
struct CrossEntropyTerm {
  int task_id = 0;
  std::vector<std::size_t> rows;
  std::vector<std::size_t> targets;
  double weight = 1.0;
};

// Distillation of `head` towards teacher logits on the selected rows. Only the
// first teacher_logits.dim(1) student columns (the classes the teacher knows)
// take part.
template <typename T>
struct DistillTerm {
  int task_id = 0;
  std::vector<std::size_t> rows;
  Tensor<T> teacher_logits;  // [rows.size(), teacher_width]
  double temperature = 2.0;
  double weight = 1.0;
};

template <typename T>
struct LossSpec {
  std::vector<CrossEntropyTerm> cross_entropy;
  std::vector<DistillTerm<T>> distill;
};

template <typename T>
struct BackwardResult {
  double loss = 0.0;
  std::vector<double> cross_entropy_values;
  std::vector<double> distill_values;
  // Student columns actually read by each distill term, and the head width.
  std::vector<std::size_t> distill_compared_widths;
  std::vector<std::size_t> distill_student_widths;
  Gradients<T> grads;
};

template <typename T>
class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(BackboneSpec spec);

  const BackboneSpec& spec() const { return spec_; }
  std::vector<Layer<T>>& layers() { return layers_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }

  // batch: [N, input_shape...] -> [N, embedding_dim]. layer_frozen may be empty.
  Tensor<T> forward(const Tensor<T>& batch, Mode mode, const std::vector<bool>& layer_frozen, Rng* rng,
                    bool dropout = true);
  // Back-propagates down to (and including) layer `lowest`.
  void backward(const Tensor<T>& grad_embedding, std::size_t lowest);

 private:
  BackboneSpec spec_;
  std::vector<Layer<T>> layers_;
};

template <typename T>
class Model {
 public:
  Model() = default;
  // Seeded initialization: He-uniform backbone weights, zero biases, heads
  // uniform in +-1/sqrt(embedding_dim).
  Model(BackboneSpec spec, const std::vector<LabelList>& head_labels, std::uint64_t seed);

  const BackboneSpec& spec() const { return backbone_.spec(); }
  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  std::vector<Head<T>>& heads() { return heads_; }
  const std::vector<Head<T>>& heads() const { return heads_; }
  Head<T>& head(int task_id);
  const Head<T>& head(int task_id) const;
  std::size_t head_index(int task_id) const;

  std::uint64_t seed() const { return seed_; }
  Rng& rng() { return rng_; }

  // Training-mode dropout switch (on by default).
  void set_dropout_enabled(bool enabled) { dropout_enabled_ = enabled; }
  bool dropout_enabled() const { return dropout_enabled_; }

  Tensor<T> embed(const Tensor<T>& batch, Mode mode, const FreezeMask* mask = nullptr);
  Tensor<T> forward(const Tensor<T>& batch, int task_id, Mode mode, const FreezeMask* mask = nullptr);
  BackwardResult<T> backward(const Tensor<T>& batch, const LossSpec<T>& loss, Mode mode, const FreezeMask& mask);

  std::vector<ParamGroup> parameter_groups() const;
  std::vector<Tensor<T>*> parameters();
  std::vector<const Tensor<T>*> parameters() const;
  // Batch-norm running statistics, in layer order.
  std::vector<Tensor<T>*> buffers();
  std::vector<const Tensor<T>*> buffers() const;
  std::vector<std::string> buffer_names() const;

  FreezeMask unfrozen_mask() const;

 private:
  std::vector<bool> frozen_layers(const FreezeMask* mask) const;

  Backbone<T> backbone_;
  std::vector<Head<T>> heads_;
  std::uint64_t seed_ = 0;
  Rng rng_;
  bool dropout_enabled_ = true;
};

template <typename T>
FreezeMask set_freeze(const Model<T>& model, FreezeScope scope);

// Appends new output columns drawn uniform in [-init_scale, init_scale], zero bias.
template <typename T>
Head<T> expand_head(const Head<T>& head, const LabelList& new_labels, double init_scale, Rng& rng);

// FNV-1a over raw bytes.
std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

template <typename T>
std::uint64_t backbone_checksum(const Model<T>& model);
template <typename T>
std::uint64_t model_checksum(const Model<T>& model);

}  // namespace cil::nn
