#pragma once

// Raw little-endian float32 / uint8 blobs shared by the dataset and
// checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

namespace ilss::detail {

inline std::uint32_t to_little_endian(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
  } else {
    return v;
  }
}

inline std::vector<char> encode_f32(std::span<const float> values) {
  std::vector<char> bytes(values.size() * 4);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint32_t le = to_little_endian(std::bit_cast<std::uint32_t>(values[i]));
    std::memcpy(bytes.data() + 4 * i, &le, 4);
  }
  return bytes;
}

inline void decode_f32(std::span<const char> bytes, std::span<float> out) {
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint32_t le = 0;
    std::memcpy(&le, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<float>(to_little_endian(le));
  }
}

/// Returns false if the file cannot be opened.
inline bool read_file(const std::filesystem::path& path, std::vector<char>& out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  in.seekg(0, std::ios::end);
  out.resize(static_cast<std::size_t>(in.tellg()));
  in.seekg(0, std::ios::beg);
  in.read(out.data(), static_cast<std::streamsize>(out.size()));
  return static_cast<bool>(in) || out.empty();
}

inline bool write_file(const std::filesystem::path& path, std::span<const char> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) return false;
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  return static_cast<bool>(out);
}

}  // namespace ilss::detail
