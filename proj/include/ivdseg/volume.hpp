#pragma once

// Volumetric data model and the geometric primitives shared by every stage:
// padding, box cropping, axis slicing, and pooled z-score normalization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ivdseg/error.hpp"

namespace ivdseg {

enum class VolumeKind : std::uint8_t { intensity = 0, label = 1, probability = 2 };

enum class Axis : std::uint8_t { z = 0, y = 1, x = 2 };

inline std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::z: return "z";
    case Axis::y: return "y";
    case Axis::x: return "x";
  }
  return "?";
}

inline Axis parse_axis(std::string_view s) {
  if (s == "z") return Axis::z;
  if (s == "y") return Axis::y;
  if (s == "x") return Axis::x;
  throw ContractError("unknown axis '" + std::string(s) + "' (expected x, y or z)");
}

/// Spatial extent (z, y, x) in voxels.
struct Extent3 {
  std::size_t z = 1, y = 1, x = 1;

  std::size_t voxels() const noexcept { return z * y * x; }
  std::size_t operator[](std::size_t i) const noexcept { return i == 0 ? z : (i == 1 ? y : x); }
  std::size_t& operator[](std::size_t i) noexcept { return i == 0 ? z : (i == 1 ? y : x); }
  friend bool operator==(const Extent3&, const Extent3&) = default;
};

/// Integer voxel coordinate (z, y, x); may lie outside a grid.
struct Index3 {
  std::int64_t z = 0, y = 0, x = 0;

  std::int64_t operator[](std::size_t i) const noexcept { return i == 0 ? z : (i == 1 ? y : x); }
  std::int64_t& operator[](std::size_t i) noexcept { return i == 0 ? z : (i == 1 ? y : x); }
  friend bool operator==(const Index3&, const Index3&) = default;
  friend Index3 operator+(Index3 a, const Index3& b) { return {a.z + b.z, a.y + b.y, a.x + b.x}; }
  friend Index3 operator-(Index3 a, const Index3& b) { return {a.z - b.z, a.y - b.y, a.x - b.x}; }
};

/// Millimeters per voxel along (z, y, x).
struct Spacing {
  float z = 1.0f, y = 1.0f, x = 1.0f;

  float operator[](std::size_t i) const noexcept { return i == 0 ? z : (i == 1 ? y : x); }
  friend bool operator==(const Spacing&, const Spacing&) = default;
};

struct Dims4 {
  std::size_t nc = 1, nz = 1, ny = 1, nx = 1;

  Extent3 spatial() const noexcept { return {nz, ny, nx}; }
  std::size_t voxels() const noexcept { return nz * ny * nx; }
  std::size_t size() const noexcept { return nc * voxels(); }
  friend bool operator==(const Dims4&, const Dims4&) = default;
};

/// Channel-major, then z, y, x with x fastest.
class Volume {
 public:
  Volume() = default;

  Volume(Dims4 dims, Spacing spacing, VolumeKind kind)
      : dims_(dims), spacing_(spacing), kind_(kind), data_(dims.size(), 0.0f) {
    check_header();
  }

  Volume(Dims4 dims, Spacing spacing, VolumeKind kind, std::vector<float> data)
      : dims_(dims), spacing_(spacing), kind_(kind), data_(std::move(data)) {
    check_header();
    if (data_.size() != dims_.size())
      throw ContractError("volume data length " + std::to_string(data_.size()) +
                          " != nc*nz*ny*nx " + std::to_string(dims_.size()));
    validate_values();
  }

  const Dims4& dims() const noexcept { return dims_; }
  Extent3 extent() const noexcept { return dims_.spatial(); }
  const Spacing& spacing() const noexcept { return spacing_; }
  VolumeKind kind() const noexcept { return kind_; }
  bool empty() const noexcept { return data_.empty(); }

  std::span<const float> data() const noexcept { return data_; }
  std::span<float> data() noexcept { return data_; }
  std::span<const float> channel(std::size_t c) const noexcept {
    return std::span<const float>(data_).subspan(c * dims_.voxels(), dims_.voxels());
  }
  std::span<float> channel(std::size_t c) noexcept {
    return std::span<float>(data_).subspan(c * dims_.voxels(), dims_.voxels());
  }

  std::size_t index(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return ((c * dims_.nz + z) * dims_.ny + y) * dims_.nx + x;
  }
  float at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) const noexcept {
    return data_[index(c, z, y, x)];
  }
  float& at(std::size_t c, std::size_t z, std::size_t y, std::size_t x) noexcept {
    return data_[index(c, z, y, x)];
  }
  bool contains(const Index3& p) const noexcept {
    return p.z >= 0 && p.y >= 0 && p.x >= 0 && p.z < static_cast<std::int64_t>(dims_.nz) &&
           p.y < static_cast<std::int64_t>(dims_.ny) && p.x < static_cast<std::int64_t>(dims_.nx);
  }

  Volume with_kind(VolumeKind kind) const { return Volume(dims_, spacing_, kind, data_); }

  /// Throws ContractError when label/probability value constraints are violated.
  void validate_values() const {
    if (kind_ == VolumeKind::label) {
      for (float v : data_)
        if (v != 0.0f && v != 1.0f) throw ContractError("label volume contains a value outside {0,1}");
    } else if (kind_ == VolumeKind::probability) {
      for (float v : data_)
        if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("probability volume value outside [0,1]");
    }
  }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.kind_ == b.kind_ && a.data_ == b.data_;
  }

 private:
  void check_header() const {
    if (dims_.nc == 0 || dims_.nz == 0 || dims_.ny == 0 || dims_.nx == 0)
      throw ContractError("volume dims must be positive");
    if (!(spacing_.z > 0 && spacing_.y > 0 && spacing_.x > 0))
      throw ContractError("volume spacing must be positive");
  }

  Dims4 dims_{};
  Spacing spacing_{};
  VolumeKind kind_ = VolumeKind::intensity;
  std::vector<float> data_;
};

// ---------------------------------------------------------------------------
// Multimodal samples

enum class Modality : std::uint8_t { fat = 0, inn = 1, opp = 2, wat = 3 };

inline constexpr std::array<Modality, 4> kAllModalities{Modality::fat, Modality::inn, Modality::opp,
                                                        Modality::wat};

inline std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::fat: return "fat";
    case Modality::inn: return "inn";
    case Modality::opp: return "opp";
    case Modality::wat: return "wat";
  }
  return "?";
}

inline Modality parse_modality(std::string_view s) {
  for (auto m : kAllModalities)
    if (modality_name(m) == s) return m;
  throw ContractError("unknown modality '" + std::string(s) + "' (expected fat, inn, opp or wat)");
}

/// Parses "opp,wat,fat" into the canonical order fat, inn, opp, wat (duplicates rejected).
inline std::vector<Modality> parse_modality_list(std::string_view text) {
  std::array<bool, 4> seen{};
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    auto token = text.substr(start, end - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) {
      auto m = parse_modality(token);
      if (seen[static_cast<std::size_t>(m)]) throw ContractError("duplicate modality '" + std::string(token) + "'");
      seen[static_cast<std::size_t>(m)] = true;
    }
    start = end + 1;
  }
  std::vector<Modality> out;
  for (auto m : kAllModalities)
    if (seen[static_cast<std::size_t>(m)]) out.push_back(m);
  if (out.empty()) throw ContractError("modality list is empty");
  return out;
}

inline std::string modality_list_string(std::span<const Modality> ms) {
  std::string out;
  for (auto m : ms) {
    if (!out.empty()) out += ',';
    out += modality_name(m);
  }
  return out;
}

struct MultiModalSample {
  std::map<Modality, Volume> modalities;  // ordered fat, inn, opp, wat
  std::optional<Volume> label;
  std::string sample_id;

  const Volume& modality(Modality m) const {
    auto it = modalities.find(m);
    if (it == modalities.end())
      throw ContractError("sample '" + sample_id + "' lacks modality " + std::string(modality_name(m)));
    return it->second;
  }

  /// Any member volume (for dims/spacing queries).
  const Volume& reference() const {
    if (!modalities.empty()) return modalities.begin()->second;
    if (label) return *label;
    throw ContractError("sample '" + sample_id + "' is empty");
  }

  void validate() const {
    if (modalities.empty()) throw ContractError("sample '" + sample_id + "' has no modalities");
    const auto& ref = reference();
    auto check = [&](const Volume& v, std::string_view what) {
      if (v.dims().nc != 1) throw ContractError(std::string(what) + " must be single-channel");
      if (!(v.dims() == ref.dims()) || !(v.spacing() == ref.spacing()))
        throw ContractError(std::string(what) + " dims/spacing differ within sample '" + sample_id + "'");
    };
    for (const auto& [m, v] : modalities) check(v, modality_name(m));
    if (label) {
      check(*label, "label");
      if (label->kind() != VolumeKind::label) throw ContractError("sample label must be label-binary");
    }
  }

  /// Sub-sample holding only the listed modalities (label kept).
  MultiModalSample select(std::span<const Modality> ms) const {
    MultiModalSample out;
    out.sample_id = sample_id;
    out.label = label;
    for (auto m : ms) out.modalities.emplace(m, modality(m));
    return out;
  }
};

/// Centered box; its first voxel is center - extent/2 (floor) on each axis.
struct BoxRegion {
  Index3 center;
  Extent3 extent;

  Index3 origin() const noexcept {
    return {center.z - static_cast<std::int64_t>(extent.z / 2), center.y - static_cast<std::int64_t>(extent.y / 2),
            center.x - static_cast<std::int64_t>(extent.x / 2)};
  }
  std::size_t voxels() const noexcept { return extent.voxels(); }
};

// ---------------------------------------------------------------------------
// Geometry

/// Copies the block of `src` starting at `origin` (may be out of bounds; zero-filled)
/// into a new volume of spatial extent `extent`, all channels.
inline Volume extract_block(const Volume& src, const Index3& origin, const Extent3& extent, float fill = 0.0f) {
  const auto& d = src.dims();
  Volume out({d.nc, extent.z, extent.y, extent.x}, src.spacing(), src.kind());
  auto dst = out.data();
  if (fill != 0.0f) std::fill(dst.begin(), dst.end(), fill);
  const auto sz = static_cast<std::int64_t>(d.nz), sy = static_cast<std::int64_t>(d.ny),
             sx = static_cast<std::int64_t>(d.nx);
  const std::int64_t x_lo = std::max<std::int64_t>(0, -origin.x);
  const std::int64_t x_hi = std::min<std::int64_t>(static_cast<std::int64_t>(extent.x), sx - origin.x);
  if (x_lo >= x_hi) return out;
  auto s = src.data();
  for (std::size_t c = 0; c < d.nc; ++c)
    for (std::size_t z = 0; z < extent.z; ++z) {
      const std::int64_t iz = origin.z + static_cast<std::int64_t>(z);
      if (iz < 0 || iz >= sz) continue;
      for (std::size_t y = 0; y < extent.y; ++y) {
        const std::int64_t iy = origin.y + static_cast<std::int64_t>(y);
        if (iy < 0 || iy >= sy) continue;
        const auto* from = s.data() + src.index(c, static_cast<std::size_t>(iz), static_cast<std::size_t>(iy),
                                                static_cast<std::size_t>(origin.x + x_lo));
        auto* to = dst.data() + out.index(c, z, y, static_cast<std::size_t>(x_lo));
        std::copy(from, from + (x_hi - x_lo), to);
      }
    }
  return out;
}

/// Zero-fills outside the grid; dims == box extent; spacing preserved.
inline Volume crop_box(const Volume& v, const BoxRegion& box) { return extract_block(v, box.origin(), box.extent); }

/// Per-axis (before, after) padding amounts for centering `from` inside `to`;
/// the odd voxel goes to the high-index side.
inline std::array<std::pair<std::size_t, std::size_t>, 3> pad_split(const Extent3& from, const Extent3& to) {
  std::array<std::pair<std::size_t, std::size_t>, 3> out{};
  for (std::size_t a = 0; a < 3; ++a) {
    const auto total = to[a] - from[a];
    out[a] = {total / 2, total - total / 2};
  }
  return out;
}

inline Volume pad_to(const Volume& v, const Extent3& target, float fill = 0.0f) {
  const auto src = v.extent();
  for (std::size_t a = 0; a < 3; ++a)
    if (target[a] < src[a])
      throw DimensionError("pad_to target " + std::to_string(target[a]) + " smaller than source " +
                           std::to_string(src[a]) + " on axis " + std::string(axis_name(static_cast<Axis>(a))));
  const auto split = pad_split(src, target);
  const Index3 origin{-static_cast<std::int64_t>(split[0].first), -static_cast<std::int64_t>(split[1].first),
                      -static_cast<std::int64_t>(split[2].first)};
  return extract_block(v, origin, target, fill);
}

/// Inverse of pad_to: takes the centered `target` block (floor-biased offset).
inline Volume center_crop(const Volume& v, const Extent3& target) {
  const auto src = v.extent();
  for (std::size_t a = 0; a < 3; ++a)
    if (target[a] > src[a]) throw DimensionError("center_crop target exceeds source");
  const auto split = pad_split(target, src);
  return extract_block(v, {static_cast<std::int64_t>(split[0].first), static_cast<std::int64_t>(split[1].first),
                           static_cast<std::int64_t>(split[2].first)},
                       target);
}

inline std::size_t round_up(std::size_t n, std::size_t multiple) {
  return multiple == 0 ? n : ((n + multiple - 1) / multiple) * multiple;
}

/// Slices a single-channel volume into 2D volumes (nz == 1).
/// axis z -> (ny, nx) slices; axis y -> (nz, nx); axis x -> (nz, ny).
inline std::vector<Volume> slice_along_axis(const Volume& v, Axis axis) {
  const auto& d = v.dims();
  if (d.nc != 1) throw ContractError("slice_along_axis needs a single-channel volume");
  const auto& sp = v.spacing();
  std::vector<Volume> out;
  auto src = v.data();
  switch (axis) {
    case Axis::z:
      out.reserve(d.nz);
      for (std::size_t z = 0; z < d.nz; ++z) {
        Volume s({1, 1, d.ny, d.nx}, {sp.z, sp.y, sp.x}, v.kind());
        std::copy_n(src.data() + v.index(0, z, 0, 0), d.ny * d.nx, s.data().data());
        out.push_back(std::move(s));
      }
      break;
    case Axis::y:
      out.reserve(d.ny);
      for (std::size_t y = 0; y < d.ny; ++y) {
        Volume s({1, 1, d.nz, d.nx}, {sp.y, sp.z, sp.x}, v.kind());
        for (std::size_t z = 0; z < d.nz; ++z)
          std::copy_n(src.data() + v.index(0, z, y, 0), d.nx, s.data().data() + z * d.nx);
        out.push_back(std::move(s));
      }
      break;
    case Axis::x:
      out.reserve(d.nx);
      for (std::size_t x = 0; x < d.nx; ++x) {
        Volume s({1, 1, d.nz, d.ny}, {sp.x, sp.z, sp.y}, v.kind());
        auto dst = s.data();
        for (std::size_t z = 0; z < d.nz; ++z)
          for (std::size_t y = 0; y < d.ny; ++y) dst[z * d.ny + y] = v.at(0, z, y, x);
        out.push_back(std::move(s));
      }
      break;
  }
  return out;
}

/// Inverse of slice_along_axis.
inline Volume stack_slices(std::span<const Volume> slices, Axis axis) {
  if (slices.empty()) throw ContractError("stack_slices needs at least one slice");
  const auto& f = slices.front();
  const std::size_t n = slices.size(), a = f.dims().ny, b = f.dims().nx;
  for (const auto& s : slices)
    if (s.dims().nc != 1 || s.dims().nz != 1 || s.dims().ny != a || s.dims().nx != b || s.kind() != f.kind())
      throw ContractError("stack_slices needs uniform single-channel 2D slices");
  const auto& sp = f.spacing();
  Dims4 dims;
  Spacing spacing;
  switch (axis) {
    case Axis::z: dims = {1, n, a, b}; spacing = {sp.z, sp.y, sp.x}; break;
    case Axis::y: dims = {1, a, n, b}; spacing = {sp.y, sp.z, sp.x}; break;
    case Axis::x: dims = {1, a, b, n}; spacing = {sp.y, sp.x, sp.z}; break;
  }
  Volume out(dims, spacing, f.kind());
  for (std::size_t i = 0; i < n; ++i) {
    auto s = slices[i].data();
    for (std::size_t r = 0; r < a; ++r)
      for (std::size_t c = 0; c < b; ++c) {
        const float val = s[r * b + c];
        switch (axis) {
          case Axis::z: out.at(0, i, r, c) = val; break;
          case Axis::y: out.at(0, r, i, c) = val; break;
          case Axis::x: out.at(0, r, c, i) = val; break;
        }
      }
  }
  return out;
}

struct NormalizedSample {
  MultiModalSample sample;
  bool degenerate = false;  // pooled sd was zero; volumes are all zeros
  double mean = 0.0;
  double sd = 0.0;
};

/// Pooled z-score: one mean/sd over the voxels of all modalities jointly.
inline NormalizedSample normalize_sample(const MultiModalSample& s) {
  if (s.modalities.empty()) throw ContractError("normalize_sample needs at least one modality");
  long double sum = 0.0L;
  std::size_t count = 0;
  for (const auto& [m, v] : s.modalities) {
    for (float x : v.data()) sum += x;
    count += v.data().size();
  }
  const long double mean = sum / static_cast<long double>(count);
  long double ss = 0.0L;
  for (const auto& [m, v] : s.modalities)
    for (float x : v.data()) {
      const long double d = static_cast<long double>(x) - mean;
      ss += d * d;
    }
  const long double sd = std::sqrt(ss / static_cast<long double>(count));

  NormalizedSample out;
  out.sample.sample_id = s.sample_id;
  out.sample.label = s.label;
  out.mean = static_cast<double>(mean);
  out.sd = static_cast<double>(sd);
  out.degenerate = !(sd > 0.0L);
  for (const auto& [m, v] : s.modalities) {
    std::vector<float> data(v.data().size(), 0.0f);
    if (!out.degenerate)
      for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<float>((static_cast<long double>(v.data()[i]) - mean) / sd);
    out.sample.modalities.emplace(m, Volume(v.dims(), v.spacing(), VolumeKind::intensity, std::move(data)));
  }
  return out;
}

/// Block-mean downsampling by an integer factor per axis (axes of size 1 untouched);
/// partial edge blocks average their in-grid voxels.
inline Volume downsample_mean(const Volume& v, std::size_t factor) {
  if (factor <= 1) return v;
  const auto& d = v.dims();
  auto f = [&](std::size_t n) { return n == 1 ? std::size_t{1} : factor; };
  const std::size_t fz = f(d.nz), fy = f(d.ny), fx = f(d.nx);
  const Dims4 od{d.nc, (d.nz + fz - 1) / fz, (d.ny + fy - 1) / fy, (d.nx + fx - 1) / fx};
  const Spacing sp{v.spacing().z * static_cast<float>(fz), v.spacing().y * static_cast<float>(fy),
                   v.spacing().x * static_cast<float>(fx)};
  std::vector<double> acc(od.size(), 0.0);
  std::vector<std::uint32_t> cnt(od.size(), 0);
  Volume out(od, sp, v.kind() == VolumeKind::label ? VolumeKind::probability : v.kind());
  for (std::size_t c = 0; c < d.nc; ++c)
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) {
          const auto o = out.index(c, z / fz, y / fy, x / fx);
          acc[o] += v.at(c, z, y, x);
          ++cnt[o];
        }
  auto dst = out.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<float>(acc[i] / cnt[i]);
  return out;
}

/// Label downsampling: block mean >= 0.5 becomes foreground.
inline Volume downsample_label(const Volume& label, std::size_t factor) {
  if (factor <= 1) return label;
  Volume m = downsample_mean(label, factor);
  for (auto& x : m.data()) x = x >= 0.5f ? 1.0f : 0.0f;
  return m.with_kind(VolumeKind::label);
}

/// Nearest-neighbour upsampling followed by cropping to `target`.
inline Volume upsample_nearest(const Volume& v, std::size_t factor, const Extent3& target, const Spacing& spacing) {
  const auto& d = v.dims();
  Volume out({d.nc, target.z, target.y, target.x}, spacing, v.kind());
  auto f = [&](std::size_t n, std::size_t t) { return (n == 1 && t == 1) ? std::size_t{1} : factor; };
  const std::size_t fz = f(d.nz, target.z), fy = f(d.ny, target.y), fx = f(d.nx, target.x);
  for (std::size_t c = 0; c < d.nc; ++c)
    for (std::size_t z = 0; z < target.z; ++z)
      for (std::size_t y = 0; y < target.y; ++y)
        for (std::size_t x = 0; x < target.x; ++x) {
          const auto sz = std::min(z / fz, d.nz - 1), sy = std::min(y / fy, d.ny - 1), sx = std::min(x / fx, d.nx - 1);
          out.at(c, z, y, x) = v.at(c, sz, sy, sx);
        }
  return out;
}

inline std::size_t count_foreground(const Volume& mask) {
  std::size_t n = 0;
  for (float v : mask.data()) n += v >= 0.5f ? 1 : 0;
  return n;
}

}  // namespace ivdseg
