#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ivdseg/volume.hpp"

namespace ivdseg {

struct ComponentLabeling {
  Extent3 extent;
  std::vector<std::uint32_t> ids;             // per voxel, 0 = background, components 1..count
  std::vector<std::size_t> sizes;             // sizes[id - 1]
  std::vector<std::array<double, 3>> centroids;  // voxel coordinates (z, y, x)
  std::vector<std::array<Index3, 2>> boxes;      // inclusive [lo, hi] per component

  std::size_t count() const noexcept { return sizes.size(); }

  /// Binary mask of one component (1-based id).
  Volume mask(std::uint32_t id, const Spacing& spacing) const {
    Volume out({1, extent.z, extent.y, extent.x}, spacing, VolumeKind::label);
    auto d = out.data();
    for (std::size_t i = 0; i < ids.size(); ++i) d[i] = ids[i] == id ? 1.0f : 0.0f;
    return out;
  }
};

/// Flood-fill labeling of foreground voxels (value >= 0.5). Ids are assigned in
/// the scan order of each component's first voxel.
inline ComponentLabeling connected_components(const Volume& mask, int connectivity = 26) {
  if (connectivity != 6 && connectivity != 26) throw ContractError("connectivity must be 6 or 26");
  if (mask.dims().nc != 1) throw ContractError("connected_components needs a single-channel mask");
  const Extent3 e = mask.extent();
  ComponentLabeling out;
  out.extent = e;
  out.ids.assign(e.voxels(), 0);
  const auto data = mask.data();

  std::vector<Index3> offsets;
  for (std::int64_t dz = -1; dz <= 1; ++dz)
    for (std::int64_t dy = -1; dy <= 1; ++dy)
      for (std::int64_t dx = -1; dx <= 1; ++dx) {
        const auto manhattan = std::abs(dz) + std::abs(dy) + std::abs(dx);
        if (manhattan == 0 || (connectivity == 6 && manhattan > 1)) continue;
        offsets.push_back({dz, dy, dx});
      }

  const auto nz = static_cast<std::int64_t>(e.z), ny = static_cast<std::int64_t>(e.y),
             nx = static_cast<std::int64_t>(e.x);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < data.size(); ++start) {
    if (data[start] < 0.5f || out.ids[start] != 0) continue;
    const auto id = static_cast<std::uint32_t>(out.sizes.size() + 1);
    std::array<double, 3> sum{};
    std::size_t size = 0;
    Index3 lo{nz, ny, nx}, hi{-1, -1, -1};
    out.ids[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const Index3 p{static_cast<std::int64_t>(i / (e.y * e.x)), static_cast<std::int64_t>((i / e.x) % e.y),
                     static_cast<std::int64_t>(i % e.x)};
      ++size;
      for (std::size_t a = 0; a < 3; ++a) {
        sum[a] += static_cast<double>(p[a]);
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
      for (const auto& o : offsets) {
        const Index3 q = p + o;
        if (q.z < 0 || q.y < 0 || q.x < 0 || q.z >= nz || q.y >= ny || q.x >= nx) continue;
        const auto j = static_cast<std::size_t>((q.z * ny + q.y) * nx + q.x);
        if (data[j] >= 0.5f && out.ids[j] == 0) {
          out.ids[j] = id;
          stack.push_back(j);
        }
      }
    }
    out.sizes.push_back(size);
    out.centroids.push_back({sum[0] / static_cast<double>(size), sum[1] / static_cast<double>(size),
                             sum[2] / static_cast<double>(size)});
    out.boxes.push_back({lo, hi});
  }
  return out;
}

inline Index3 round_voxel(const std::array<double, 3>& c) {
  return {std::llround(c[0]), std::llround(c[1]), std::llround(c[2])};
}

}  // namespace ivdseg
