#pragma once

// MVL1 volume files:
//   "MVL1" | u32 nc nz ny nx | f32 sz sy sx | u8 dtype | u8 kind | u8[2] zero | payload
// All multi-byte fields little-endian. dtype 0 = f32, 1 = u8. Labels are written as u8.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/volume.hpp"

namespace ivdseg {

inline constexpr std::size_t kVolumeHeaderBytes = 36;

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
inline float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "' for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
  v.validate_values();
  const auto& d = v.dims();
  for (auto n : {d.nc, d.nz, d.ny, d.nx})
    if (n > std::numeric_limits<std::uint32_t>::max()) throw FormatError("dims", "dimension exceeds u32");
  const bool as_u8 = v.kind() == VolumeKind::label;
  std::vector<std::uint8_t> out;
  out.reserve(kVolumeHeaderBytes + d.size() * (as_u8 ? 1 : 4));
  out.insert(out.end(), {'M', 'V', 'L', '1'});
  detail::put_u32(out, static_cast<std::uint32_t>(d.nc));
  detail::put_u32(out, static_cast<std::uint32_t>(d.nz));
  detail::put_u32(out, static_cast<std::uint32_t>(d.ny));
  detail::put_u32(out, static_cast<std::uint32_t>(d.nx));
  detail::put_f32(out, v.spacing().z);
  detail::put_f32(out, v.spacing().y);
  detail::put_f32(out, v.spacing().x);
  out.push_back(as_u8 ? 1 : 0);
  out.push_back(static_cast<std::uint8_t>(v.kind()));
  out.push_back(0);
  out.push_back(0);
  if (as_u8) {
    for (float x : v.data()) out.push_back(x != 0.0f ? 1 : 0);
  } else {
    for (float x : v.data()) detail::put_f32(out, x);
  }
  return out;
}

inline Volume decode_volume(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kVolumeHeaderBytes) throw FormatError("header", "file shorter than the 36-byte header");
  if (std::memcmp(bytes.data(), "MVL1", 4) != 0) throw FormatError("magic", "expected \"MVL1\"");
  const auto* p = bytes.data() + 4;
  std::array<std::uint64_t, 4> n{};
  for (int i = 0; i < 4; ++i) {
    n[i] = detail::get_u32(p + 4 * i);
    if (n[i] == 0) throw FormatError("dims", "zero dimension");
  }
  const Spacing sp{detail::get_f32(p + 16), detail::get_f32(p + 20), detail::get_f32(p + 24)};
  if (!(sp.z > 0 && sp.y > 0 && sp.x > 0)) throw FormatError("spacing", "non-positive spacing");
  const std::uint8_t dtype = p[28], kind = p[29];
  if (dtype > 1) throw FormatError("dtype", "unknown dtype code " + std::to_string(dtype));
  if (kind > 2) throw FormatError("kind", "unknown kind code " + std::to_string(kind));
  if (p[30] != 0 || p[31] != 0) throw FormatError("reserved", "reserved bytes must be zero");

  const std::uint64_t elem = dtype == 0 ? 4 : 1;
  std::uint64_t count = 1;
  for (auto k : n) {
    if (count > std::numeric_limits<std::uint64_t>::max() / k) throw FormatError("dims", "element count overflows");
    count *= k;
  }
  if (count > (std::numeric_limits<std::uint64_t>::max() - kVolumeHeaderBytes) / elem)
    throw FormatError("dims", "payload size overflows");
  const std::uint64_t need = kVolumeHeaderBytes + count * elem;
  if (bytes.size() < need) throw FormatError("payload", "truncated payload");
  if (bytes.size() > need) throw FormatError("payload", "trailing bytes after payload");

  std::vector<float> data(count);
  const auto* q = bytes.data() + kVolumeHeaderBytes;
  if (dtype == 0)
    for (std::uint64_t i = 0; i < count; ++i) data[i] = detail::get_f32(q + 4 * i);
  else
    for (std::uint64_t i = 0; i < count; ++i) data[i] = static_cast<float>(q[i]);
  try {
    return Volume({n[0], n[1], n[2], n[3]}, sp, static_cast<VolumeKind>(kind), std::move(data));
  } catch (const ContractError& e) {
    throw FormatError("payload", e.what());
  }
}

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  detail::write_file_atomic(path, encode_volume(v));
}

inline Volume load_volume(const std::filesystem::path& path) { return decode_volume(detail::read_file(path)); }

}  // namespace ivdseg
