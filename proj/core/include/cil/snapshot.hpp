#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "cil/model.hpp"

namespace cil::nn {

inline constexpr char kSnapshotMagic[4] = {'C', 'I', 'L', 'M'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

nlohmann::json backbone_to_json(const BackboneSpec& spec);
BackboneSpec backbone_from_json(const nlohmann::json& j);

// Layout: "CILM", u32 version, u32 manifest length, manifest JSON (backbone,
// heads, rng seed, tensor table), then every parameter tensor followed by every
// buffer tensor as little-endian float32, in declaration order.
template <typename T>
std::string encode_snapshot(const Model<T>& model);
template <typename T>
Model<T> decode_snapshot(const std::string& bytes);

template <typename T>
void save_snapshot(const std::filesystem::path& path, const Model<T>& model);
template <typename T>
Model<T> load_snapshot(const std::filesystem::path& path);

}  // namespace cil::nn
