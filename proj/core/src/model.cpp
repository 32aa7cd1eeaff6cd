#include "cil/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cil/losses.hpp"

namespace cil::nn {

std::size_t BackboneSpec::embedding_dim() const {
  if (const auto* mlp = std::get_if<MlpSpec>(&variant)) {
    return mlp->hidden_sizes.empty() ? shape_size(input_shape) : mlp->hidden_sizes.back();
  }
  return std::get<ConvNetSpec>(variant).conv_channels[3];
}

void BackboneSpec::validate() const {
  require(!input_shape.empty(), "backbone input shape is empty");
  for (auto d : input_shape) require(d > 0, "backbone input shape has a zero extent");
  if (const auto* mlp = std::get_if<MlpSpec>(&variant)) {
    require(!mlp->hidden_sizes.empty(), "MLP backbone needs at least one hidden layer");
    for (auto h : mlp->hidden_sizes) require(h > 0, "MLP hidden sizes must be positive");
    return;
  }
  const auto& conv = std::get<ConvNetSpec>(variant);
  require(input_shape.size() == 3, "ConvNet input shape must be [C, H, W]");
  for (auto c : conv.conv_channels) require(c > 0, "ConvNet channels must be positive");
  require(conv.kernel_size > 0 && conv.kernel_size % 2 == 1, "ConvNet kernel size must be odd and positive");
  require(conv.dropout_rate >= 0.0 && conv.dropout_rate <= 1.0, "dropout rate must lie in [0, 1]");
}

template <typename T>
std::optional<std::size_t> Head<T>::column_of(Label label) const {
  auto it = std::find(class_labels.begin(), class_labels.end(), label);
  if (it == class_labels.end()) return std::nullopt;
  return static_cast<std::size_t>(it - class_labels.begin());
}

bool FreezeMask::any_frozen() const {
  return std::any_of(frozen.begin(), frozen.end(), [](bool b) { return b; });
}

// ---------------------------------------------------------------- Backbone

template <typename T>
Backbone<T>::Backbone(BackboneSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  if (const auto* mlp = std::get_if<MlpSpec>(&spec_.variant)) {
    std::size_t in = shape_size(spec_.input_shape);
    for (auto h : mlp->hidden_sizes) {
      layers_.emplace_back(Dense<T>(in, h));
      layers_.emplace_back(Relu<T>());
      in = h;
    }
    return;
  }
  const auto& conv = std::get<ConvNetSpec>(spec_.variant);
  std::size_t in = spec_.input_shape[0];
  for (auto c : conv.conv_channels) {
    layers_.emplace_back(Conv2d<T>(in, c, conv.kernel_size));
    layers_.emplace_back(Relu<T>());
    layers_.emplace_back(BatchNorm<T>(c));
    in = c;
  }
  layers_.emplace_back(Dropout<T>(conv.dropout_rate));
  layers_.emplace_back(GlobalAvgPool<T>());
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& batch, Mode mode, const std::vector<bool>& layer_frozen, Rng* rng,
                               bool dropout) {
  if (batch.rank() != spec_.input_shape.size() + 1 ||
      !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), batch.shape().begin() + 1)) {
    throw ValidationError("batch shape " + shape_string(batch.shape()) + " does not match backbone input " +
                          shape_string(spec_.input_shape));
  }
  if (batch.dim(0) == 0) throw ValidationError("empty batch");
  Tensor<T> x = batch;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    LayerContext ctx{mode, !layer_frozen.empty() && layer_frozen[i], dropout, rng};
    x = std::visit([&](auto& layer) { return layer.forward(x, ctx); }, layers_[i]);
  }
  return x;
}

template <typename T>
void Backbone<T>::backward(const Tensor<T>& grad_embedding, std::size_t lowest) {
  Tensor<T> g = grad_embedding;
  for (std::size_t i = layers_.size(); i-- > lowest;) {
    const bool need_input = i > lowest;
    g = std::visit([&](auto& layer) { return layer.backward(g, need_input); }, layers_[i]);
  }
}

// ---------------------------------------------------------------- Model

namespace {

template <typename T>
void init_uniform(Tensor<T>& t, double bound, Rng& rng) {
  for (auto& v : t.values()) v = static_cast<T>(uniform(rng, -bound, bound));
}

template <typename T>
Head<T> make_head(int task_id, LabelList labels, std::size_t dim, Rng& rng) {
  std::set<Label> unique(labels.begin(), labels.end());
  require(unique.size() == labels.size(), "head class labels must be distinct");
  require(!labels.empty(), "head needs at least one class");
  Head<T> h;
  h.task_id = task_id;
  h.class_labels = std::move(labels);
  h.weight = Tensor<T>({dim, h.class_labels.size()});
  h.bias = Tensor<T>({h.class_labels.size()});
  h.grad_weight = Tensor<T>(h.weight.shape());
  h.grad_bias = Tensor<T>(h.bias.shape());
  init_uniform(h.weight, 1.0 / std::sqrt(static_cast<double>(dim)), rng);
  return h;
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::size_t>& rows) {
  const std::size_t width = x.dim(1);
  Tensor<T> out({rows.size(), width});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.dim(0)) throw ValidationError("loss term row " + std::to_string(rows[r]) + " outside batch");
    std::copy_n(x.data() + rows[r] * width, width, out.data() + r * width);
  }
  return out;
}

template <typename T>
Tensor<T> head_logits(const Head<T>& head, const Tensor<T>& emb) {
  const std::size_t n = emb.dim(0), d = emb.dim(1), w = head.width();
  Tensor<T> logits({n, w});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(head.bias.data(), w, logits.data() + i * w);
  detail::matmul(emb.data(), head.weight.data(), logits.data(), n, d, w, true);
  return logits;
}

}  // namespace

template <typename T>
Model<T>::Model(BackboneSpec spec, const std::vector<LabelList>& head_labels, std::uint64_t seed)
    : backbone_(std::move(spec)), seed_(seed), rng_(seed) {
  for (auto& layer : backbone_.layers()) {
    if (auto* dense = std::get_if<Dense<T>>(&layer)) {
      init_uniform(dense->params[0], std::sqrt(6.0 / static_cast<double>(dense->in_features())), rng_);
    } else if (auto* conv = std::get_if<Conv2d<T>>(&layer)) {
      const auto& w = conv->params[0];
      init_uniform(conv->params[0], std::sqrt(6.0 / static_cast<double>(w.dim(1) * w.dim(2) * w.dim(3))), rng_);
    }
  }
  const std::size_t dim = backbone_.spec().embedding_dim();
  for (std::size_t i = 0; i < head_labels.size(); ++i) {
    heads_.push_back(make_head<T>(static_cast<int>(i), head_labels[i], dim, rng_));
  }
}

template <typename T>
std::size_t Model<T>::head_index(int task_id) const {
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    if (heads_[i].task_id == task_id) return i;
  }
  throw ValidationError("unknown head id " + std::to_string(task_id));
}

template <typename T>
Head<T>& Model<T>::head(int task_id) {
  return heads_[head_index(task_id)];
}

template <typename T>
const Head<T>& Model<T>::head(int task_id) const {
  return heads_[head_index(task_id)];
}

template <typename T>
std::vector<bool> Model<T>::frozen_layers(const FreezeMask* mask) const {
  const auto& layers = backbone_.layers();
  std::vector<bool> out(layers.size(), false);
  if (!mask) return out;
  const auto groups = parameter_groups();
  if (mask->frozen.size() != groups.size()) throw ValidationError("freeze mask does not match model parameters");
  // A layer counts as frozen when all of its parameter groups are.
  std::vector<int> seen(layers.size(), 0), frozen(layers.size(), 0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (!groups[g].in_backbone) continue;
    ++seen[groups[g].layer];
    if (mask->frozen[g]) ++frozen[groups[g].layer];
  }
  for (std::size_t i = 0; i < layers.size(); ++i) out[i] = seen[i] > 0 && seen[i] == frozen[i];
  return out;
}

template <typename T>
Tensor<T> Model<T>::embed(const Tensor<T>& batch, Mode mode, const FreezeMask* mask) {
  Tensor<T> emb = backbone_.forward(batch, mode, frozen_layers(mask), &rng_, dropout_enabled_);
  require_finite(emb, "backbone embedding");
  return emb;
}

template <typename T>
Tensor<T> Model<T>::forward(const Tensor<T>& batch, int task_id, Mode mode, const FreezeMask* mask) {
  const Head<T>& h = head(task_id);
  Tensor<T> logits = head_logits(h, embed(batch, mode, mask));
  require_finite(logits, "logits");
  return logits;
}

template <typename T>
BackwardResult<T> Model<T>::backward(const Tensor<T>& batch, const LossSpec<T>& loss, Mode mode,
                                     const FreezeMask& mask) {
  const auto groups = parameter_groups();
  if (mask.frozen.size() != groups.size()) throw ValidationError("freeze mask does not match model parameters");
  const auto layer_frozen = frozen_layers(&mask);

  for (auto& layer : backbone_.layers()) block(layer).zero_grads();
  for (auto& h : heads_) {
    h.grad_weight.fill(T{});
    h.grad_bias.fill(T{});
  }

  const Tensor<T> emb = embed(batch, mode, &mask);
  const std::size_t n = emb.dim(0), dim = emb.dim(1);
  Tensor<T> grad_emb({n, dim});
  BackwardResult<T> result;

  // Accumulates one term's logit gradient into the head and the embedding.
  auto apply = [&](Head<T>& h, const std::vector<std::size_t>& rows, const Tensor<T>& sub_emb,
                   const Tensor<T>& grad_logits, double weight) {
    const std::size_t r = rows.size(), w_all = h.width(), w = grad_logits.dim(1);
    // grad_logits may cover only the leading w columns of the head.
    Tensor<T> g({r, w_all});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w; ++j) g[i * w_all + j] = static_cast<T>(weight * grad_logits[i * w + j]);
    }
    detail::matmul_at_b(sub_emb.data(), g.data(), h.grad_weight.data(), r, dim, w_all);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < w_all; ++j) h.grad_bias[j] += g[i * w_all + j];
    }
    Tensor<T> ge({r, dim});
    detail::matmul_a_bt(g.data(), h.weight.data(), ge.data(), r, w_all, dim);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t k = 0; k < dim; ++k) grad_emb[rows[i] * dim + k] += ge[i * dim + k];
    }
  };

  for (const auto& term : loss.cross_entropy) {
    if (term.rows.size() != term.targets.size()) throw ValidationError("cross entropy rows/targets length mismatch");
    if (term.rows.empty() || term.weight == 0.0) {
      result.cross_entropy_values.push_back(0.0);
      continue;
    }
    Head<T>& h = head(term.task_id);
    const Tensor<T> sub = gather_rows(emb, term.rows);
    const Tensor<T> logits = head_logits(h, sub);
    require_finite(logits, "logits");
    const auto lg = cross_entropy(logits, term.targets);
    result.cross_entropy_values.push_back(lg.value);
    result.loss += term.weight * lg.value;
    apply(h, term.rows, sub, lg.grad, term.weight);
  }

  for (const auto& term : loss.distill) {
    Head<T>& h = head(term.task_id);
    const std::size_t teacher_width = term.teacher_logits.empty() ? 0 : term.teacher_logits.dim(1);
    if (term.rows.empty() || term.weight == 0.0) {
      result.distill_values.push_back(0.0);
      result.distill_compared_widths.push_back(0);
      result.distill_student_widths.push_back(h.width());
      continue;
    }
    if (term.teacher_logits.rank() != 2 || term.teacher_logits.dim(0) != term.rows.size()) {
      throw ValidationError("teacher logits must be [rows, teacher_width]");
    }
    if (teacher_width > h.width()) throw ValidationError("teacher knows more classes than the student head");
    const Tensor<T> sub = gather_rows(emb, term.rows);
    const Tensor<T> logits = head_logits(h, sub);
    require_finite(logits, "logits");
    Tensor<T> student({term.rows.size(), teacher_width});
    for (std::size_t i = 0; i < term.rows.size(); ++i) {
      std::copy_n(logits.data() + i * h.width(), teacher_width, student.data() + i * teacher_width);
    }
    const auto lg = kd_loss(student, term.teacher_logits, term.temperature);
    result.distill_values.push_back(lg.value);
    result.distill_compared_widths.push_back(teacher_width);
    result.distill_student_widths.push_back(h.width());
    result.loss += term.weight * lg.value;
    apply(h, term.rows, sub, lg.grad, term.weight);
  }

  if (!std::isfinite(result.loss)) throw NumericalError("non-finite loss");

  // Back-propagate only as deep as the lowest trainable backbone layer.
  const auto& layers = backbone_.layers();
  std::size_t lowest = layers.size();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (!block(layers[i]).params.empty() && !layer_frozen[i]) {
      lowest = i;
      break;
    }
  }
  if (lowest < layers.size()) backbone_.backward(grad_emb, lowest);

  std::size_t g = 0;
  for (auto& layer : backbone_.layers()) {
    for (auto& grad : block(layer).grads) {
      result.grads.push_back(mask.frozen[g] ? Tensor<T>(grad.shape()) : grad);
      ++g;
    }
  }
  for (auto& h : heads_) {
    result.grads.push_back(mask.frozen[g++] ? Tensor<T>(h.grad_weight.shape()) : h.grad_weight);
    result.grads.push_back(mask.frozen[g++] ? Tensor<T>(h.grad_bias.shape()) : h.grad_bias);
  }
  for (const auto& t : result.grads) require_finite(t, "gradient");
  return result;
}

template <typename T>
std::vector<ParamGroup> Model<T>::parameter_groups() const {
  std::vector<ParamGroup> out;
  const auto& layers = backbone_.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& name : block(layers[i]).param_names) {
      out.push_back({"backbone." + std::to_string(i) + "." + name, true, i});
    }
  }
  for (std::size_t i = 0; i < heads_.size(); ++i) {
    const std::string prefix = "head." + std::to_string(heads_[i].task_id) + ".";
    out.push_back({prefix + "weight", false, i});
    out.push_back({prefix + "bias", false, i});
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::parameters() {
  std::vector<Tensor<T>*> out;
  for (auto& layer : backbone_.layers()) {
    for (auto& p : block(layer).params) out.push_back(&p);
  }
  for (auto& h : heads_) {
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Model<T>::parameters() const {
  auto ptrs = const_cast<Model*>(this)->parameters();
  return {ptrs.begin(), ptrs.end()};
}

template <typename T>
std::vector<Tensor<T>*> Model<T>::buffers() {
  std::vector<Tensor<T>*> out;
  for (auto& layer : backbone_.layers()) {
    for (auto& b : block(layer).buffers) out.push_back(&b);
  }
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Model<T>::buffers() const {
  auto ptrs = const_cast<Model*>(this)->buffers();
  return {ptrs.begin(), ptrs.end()};
}

template <typename T>
std::vector<std::string> Model<T>::buffer_names() const {
  std::vector<std::string> out;
  const auto& layers = backbone_.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    for (const auto& name : block(layers[i]).buffer_names) out.push_back("backbone." + std::to_string(i) + "." + name);
  }
  return out;
}

template <typename T>
FreezeMask Model<T>::unfrozen_mask() const {
  return FreezeMask{std::vector<bool>(parameter_groups().size(), false)};
}

template <typename T>
FreezeMask set_freeze(const Model<T>& model, FreezeScope scope) {
  FreezeMask mask;
  for (const auto& g : model.parameter_groups()) mask.frozen.push_back(scope == FreezeScope::kBackboneOnly && g.in_backbone);
  return mask;
}

template <typename T>
Head<T> expand_head(const Head<T>& head, const LabelList& new_labels, double init_scale, Rng& rng) {
  std::set<Label> all(head.class_labels.begin(), head.class_labels.end());
  for (Label l : new_labels) {
    if (!all.insert(l).second) throw ValidationError("duplicate class label " + std::to_string(l) + " in head expansion");
  }
  if (new_labels.empty()) return head;
  const std::size_t dim = head.weight.dim(0), old_w = head.width(), new_w = old_w + new_labels.size();
  Head<T> out;
  out.task_id = head.task_id;
  out.class_labels = head.class_labels;
  out.class_labels.insert(out.class_labels.end(), new_labels.begin(), new_labels.end());
  out.weight = Tensor<T>({dim, new_w});
  out.bias = Tensor<T>({new_w});
  for (std::size_t r = 0; r < dim; ++r) {
    std::copy_n(head.weight.data() + r * old_w, old_w, out.weight.data() + r * new_w);
  }
  // New columns drawn column by column so the draw order does not depend on dim layout.
  for (std::size_t c = old_w; c < new_w; ++c) {
    for (std::size_t r = 0; r < dim; ++r) out.weight[r * new_w + c] = static_cast<T>(uniform(rng, -init_scale, init_scale));
  }
  std::copy_n(head.bias.data(), old_w, out.bias.data());
  out.grad_weight = Tensor<T>(out.weight.shape());
  out.grad_bias = Tensor<T>(out.bias.shape());
  return out;
}

std::uint64_t fnv1a(const void* data, std::size_t bytes, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
std::uint64_t backbone_checksum(const Model<T>& model) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& layer : model.backbone().layers()) {
    for (const auto& p : block(layer).params) h = fnv1a(p.data(), p.size() * sizeof(T), h);
    for (const auto& b : block(layer).buffers) h = fnv1a(b.data(), b.size() * sizeof(T), h);
  }
  return h;
}

template <typename T>
std::uint64_t model_checksum(const Model<T>& model) {
  std::uint64_t h = backbone_checksum(model);
  for (const auto& head : model.heads()) {
    h = fnv1a(head.class_labels.data(), head.class_labels.size() * sizeof(Label), h);
    h = fnv1a(head.weight.data(), head.weight.size() * sizeof(T), h);
    h = fnv1a(head.bias.data(), head.bias.size() * sizeof(T), h);
  }
  return h;
}

#define CIL_INSTANTIATE_MODEL(T)                                                              \
  template struct Head<T>;                                                                    \
  template class Backbone<T>;                                                                 \
  template class Model<T>;                                                                    \
  template FreezeMask set_freeze<T>(const Model<T>&, FreezeScope);                            \
  template Head<T> expand_head<T>(const Head<T>&, const LabelList&, double, Rng&);            \
  template std::uint64_t backbone_checksum<T>(const Model<T>&);                               \
  template std::uint64_t model_checksum<T>(const Model<T>&);

CIL_INSTANTIATE_MODEL(float)
CIL_INSTANTIATE_MODEL(double)

}  // namespace cil::nn
