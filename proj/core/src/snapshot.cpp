#include "cil/snapshot.hpp"

#include <cstring>

#include "cil/io_util.hpp"

namespace cil::nn {

using nlohmann::json;

json backbone_to_json(const BackboneSpec& spec) {
  json j;
  j["input_shape"] = spec.input_shape;
  if (const auto* mlp = std::get_if<MlpSpec>(&spec.variant)) {
    j["type"] = "mlp";
    j["hidden"] = mlp->hidden_sizes;
  } else {
    const auto& conv = std::get<ConvNetSpec>(spec.variant);
    j["type"] = "conv";
    j["channels"] = conv.conv_channels;
    j["kernel"] = conv.kernel_size;
    j["dropout"] = conv.dropout_rate;
  }
  return j;
}

BackboneSpec backbone_from_json(const json& j) {
  try {
    BackboneSpec spec;
    spec.input_shape = j.at("input_shape").get<Shape>();
    const std::string type = j.value("type", "mlp");
    if (type == "mlp") {
      spec.variant = MlpSpec{j.at("hidden").get<std::vector<std::size_t>>()};
    } else if (type == "conv") {
      ConvNetSpec conv;
      const auto channels = j.at("channels").get<std::vector<std::size_t>>();
      require(channels.size() == 4, "ConvNet backbone needs exactly 4 channel counts");
      std::copy(channels.begin(), channels.end(), conv.conv_channels.begin());
      conv.kernel_size = j.value("kernel", std::size_t{3});
      conv.dropout_rate = j.value("dropout", 0.5);
      spec.variant = conv;
    } else {
      throw ValidationError("unknown backbone type '" + type + "'");
    }
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("bad backbone spec: ") + e.what());
  }
}

template <typename T>
std::string encode_snapshot(const Model<T>& model) {
  json manifest;
  manifest["backbone"] = backbone_to_json(model.spec());
  manifest["rng_seed"] = model.seed();
  json heads = json::array();
  for (const auto& h : model.heads()) heads.push_back({{"task_id", h.task_id}, {"class_labels", h.class_labels}});
  manifest["heads"] = heads;

  const auto groups = model.parameter_groups();
  const auto params = model.parameters();
  const auto buffer_names = model.buffer_names();
  const auto buffers = model.buffers();
  json tensors = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) tensors.push_back({{"name", groups[i].name}, {"shape", params[i]->shape()}});
  for (std::size_t i = 0; i < buffers.size(); ++i) tensors.push_back({{"name", buffer_names[i]}, {"shape", buffers[i]->shape()}});
  manifest["tensors"] = tensors;

  const std::string text = manifest.dump();
  std::string out(kSnapshotMagic, 4);
  io::put_u32(out, kSnapshotVersion);
  io::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  for (const auto* p : params) {
    for (T v : p->values()) io::put_f32(out, static_cast<float>(v));
  }
  for (const auto* b : buffers) {
    for (T v : b->values()) io::put_f32(out, static_cast<float>(v));
  }
  return out;
}

template <typename T>
Model<T> decode_snapshot(const std::string& bytes) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kSnapshotMagic, 4) != 0) throw IoError("not a model snapshot (bad magic)");
  const std::uint32_t version = io::get_u32(bytes, 4);
  if (version != kSnapshotVersion) throw IoError("unsupported snapshot version " + std::to_string(version));
  const std::uint32_t len = io::get_u32(bytes, 8);
  if (12 + static_cast<std::size_t>(len) > bytes.size()) throw IoError("truncated snapshot manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.substr(12, len));
  } catch (const json::exception& e) {
    throw IoError(std::string("corrupt snapshot manifest: ") + e.what());
  }
  std::vector<LabelList> head_labels;
  std::vector<int> task_ids;
  for (const auto& h : manifest.at("heads")) {
    head_labels.push_back(h.at("class_labels").get<LabelList>());
    task_ids.push_back(h.at("task_id").get<int>());
  }
  Model<T> model(backbone_from_json(manifest.at("backbone")), head_labels, manifest.at("rng_seed").get<std::uint64_t>());
  for (std::size_t i = 0; i < task_ids.size(); ++i) model.heads()[i].task_id = task_ids[i];

  std::vector<Tensor<T>*> targets = model.parameters();
  for (auto* b : model.buffers()) targets.push_back(b);
  const auto& table = manifest.at("tensors");
  if (table.size() != targets.size()) throw IoError("snapshot tensor table does not match its backbone/heads");
  std::size_t offset = 12 + len;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (table[i].at("shape").get<Shape>() != targets[i]->shape()) {
      throw IoError("snapshot tensor " + table[i].at("name").get<std::string>() + " has an unexpected shape");
    }
    for (auto& v : targets[i]->values()) {
      v = static_cast<T>(io::get_f32(bytes, offset));
      offset += 4;
    }
  }
  if (offset != bytes.size()) throw IoError("snapshot has " + std::to_string(bytes.size() - offset) + " trailing bytes");
  return model;
}

template <typename T>
void save_snapshot(const std::filesystem::path& path, const Model<T>& model) {
  io::write_file_atomic(path, encode_snapshot(model));
}

template <typename T>
Model<T> load_snapshot(const std::filesystem::path& path) {
  return decode_snapshot<T>(io::read_file(path));
}

template std::string encode_snapshot<float>(const Model<float>&);
template std::string encode_snapshot<double>(const Model<double>&);
template Model<float> decode_snapshot<float>(const std::string&);
template Model<double> decode_snapshot<double>(const std::string&);
template void save_snapshot<float>(const std::filesystem::path&, const Model<float>&);
template void save_snapshot<double>(const std::filesystem::path&, const Model<double>&);
template Model<float> load_snapshot<float>(const std::filesystem::path&);
template Model<double> load_snapshot<double>(const std::filesystem::path&);

}  // namespace cil::nn
