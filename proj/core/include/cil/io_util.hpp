#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <string_view>

#include "cil/errors.hpp"

namespace cil::io {

std::string read_file(const std::filesystem::path& path);

// Writes into a sibling temporary and renames over the target, so readers
// never observe a partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t offset) {
  if (offset + 4 > in.size()) throw IoError("unexpected end of data");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[offset + i])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, sizeof bits);
  put_u32(out, bits);
}

inline float get_f32(std::string_view in, std::size_t offset) {
  const std::uint32_t bits = get_u32(in, offset);
  float f;
  std::memcpy(&f, &bits, sizeof f);
  return f;
}

}  // namespace cil::io
