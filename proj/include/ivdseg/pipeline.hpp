#pragma once

// Two-stage inference: a localizer on the (downsampled) whole volume yields disc
// centers; fixed-size patches around them go through the segmenter and the
// thresholded patches are pasted back into a full-size mask.

#include <algorithm>
#include <vector>

#include "ivdseg/components.hpp"
#include "ivdseg/unet.hpp"
#include "ivdseg/volume.hpp"

namespace ivdseg {

struct PipelineConfig {
  std::vector<Modality> modalities{Modality::opp, Modality::wat, Modality::fat};
  std::size_t loc_downsample = 4;
  std::size_t min_region_voxels = 100;
  Extent3 crop{25, 35, 35};
  Extent3 patch{28, 36, 36};
  float threshold = 0.5f;

  void validate() const {
    if (modalities.empty()) throw ConfigError("pipeline needs at least one modality");
    if (loc_downsample < 1) throw ConfigError("loc_downsample must be >= 1");
    for (std::size_t a = 0; a < 3; ++a)
      if (crop[a] == 0 || patch[a] < crop[a]) throw ConfigError("patch extent must cover the crop extent");
  }
};

struct DiscInstance {
  Index3 center;
  MultiModalSample patch;  // padded to PipelineConfig::patch
  Volume prob;             // same grid as the patch
  Volume mask;             // prob >= threshold
};

// ---------------------------------------------------------------------------
// Input preparation

/// Pooled z-score over the selected modalities (label carried along).
inline MultiModalSample prepare_sample(const MultiModalSample& s, const std::vector<Modality>& modalities) {
  auto sel = s.select(modalities);
  sel.validate();
  return normalize_sample(sel).sample;
}

/// (1, C, D, H, W) tensor with channels in canonical modality order.
inline nn::Tensor<float> sample_tensor(const MultiModalSample& s) {
  const auto e = s.reference().extent();
  nn::Tensor<float> t({1, s.modalities.size(), e.z, e.y, e.x});
  std::size_t c = 0;
  for (const auto& [m, v] : s.modalities) {
    std::copy(v.data().begin(), v.data().end(), t.values().begin() + static_cast<std::ptrdiff_t>(c * e.voxels()));
    ++c;
  }
  return t;
}

inline nn::Tensor<float> label_tensor(const Volume& label) {
  const auto e = label.extent();
  return nn::Tensor<float>({1, 1, e.z, e.y, e.x}, std::vector<float>(label.data().begin(), label.data().end()));
}

inline Volume tensor_channel(const nn::Tensor<float>& t, const Spacing& spacing, VolumeKind kind) {
  const auto& d = t.dims();
  const std::size_t n = d[2] * d[3] * d[4];
  return Volume({1, d[2], d[3], d[4]}, spacing, kind, std::vector<float>(t.values().begin(), t.values().begin() + static_cast<std::ptrdiff_t>(n)));
}

namespace detail {

inline Extent3 divisible_extent(const Extent3& e, const Extent3& divisor) {
  return {round_up(e.z, divisor.z), round_up(e.y, divisor.y), round_up(e.x, divisor.x)};
}

inline Extent3 net_divisor(const nn::NetworkSpec& spec) {
  const auto g = nn::spatial_divisor(spec);
  return {g.d, g.h, g.w};
}

/// Downsampled, padded localizer input for a prepared sample; also returns the
/// unpadded downsampled extent.
inline std::pair<MultiModalSample, Extent3> localizer_grid(const MultiModalSample& prepared, std::size_t factor,
                                                           const Extent3& divisor) {
  MultiModalSample out;
  out.sample_id = prepared.sample_id;
  Extent3 small{};
  for (const auto& [m, v] : prepared.modalities) {
    auto d = downsample_mean(v, factor);
    small = d.extent();
    out.modalities.emplace(m, pad_to(d, divisible_extent(small, divisor)));
  }
  if (prepared.label) {
    auto l = downsample_label(*prepared.label, factor);
    out.label = pad_to(l, divisible_extent(l.extent(), divisor));
  }
  return {std::move(out), small};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Localization

/// Components of prob >= 0.5 with at least `min_region_voxels` voxels; rounded
/// centroids sorted craniocaudally (y, then z, then x).
inline std::vector<Index3> centers_from_probability(const Volume& prob, std::size_t min_region_voxels,
                                                    float threshold = 0.5f) {
  Volume mask(prob.dims(), prob.spacing(), VolumeKind::label);
  for (std::size_t i = 0; i < prob.data().size(); ++i) mask.data()[i] = prob.data()[i] >= threshold ? 1.0f : 0.0f;
  const auto cc = connected_components(mask, 26);
  std::vector<std::array<double, 3>> kept;
  for (std::size_t i = 0; i < cc.count(); ++i)
    if (cc.sizes[i] >= min_region_voxels) kept.push_back(cc.centroids[i]);
  std::vector<Index3> out;
  for (const auto& c : kept) out.push_back(round_voxel(c));
  std::sort(out.begin(), out.end(), [](const Index3& a, const Index3& b) {
    return std::tie(a.y, a.z, a.x) < std::tie(b.y, b.z, b.x);
  });
  return out;
}

/// Full-resolution localizer probability map for a prepared sample.
inline Volume localizer_probability(const MultiModalSample& prepared, nn::Network<float>& localizer,
                                    const PipelineConfig& cfg) {
  const auto& ref = prepared.reference();
  auto [grid, small] = detail::localizer_grid(prepared, cfg.loc_downsample, detail::net_divisor(localizer.spec()));
  if (localizer.spec().in_channels != grid.modalities.size())
    throw ShapeError("localizer expects " + std::to_string(localizer.spec().in_channels) + " channels, sample has " +
                     std::to_string(grid.modalities.size()));
  const auto& y = localizer.forward(sample_tensor(grid), {false, 0});
  const auto prob = center_crop(tensor_channel(y, grid.reference().spacing(), VolumeKind::probability), small);
  localizer.release_activations();
  return upsample_nearest(prob, cfg.loc_downsample, ref.extent(), ref.spacing());
}

inline std::vector<Index3> localize(const MultiModalSample& prepared, nn::Network<float>& localizer,
                                    const PipelineConfig& cfg) {
  return centers_from_probability(localizer_probability(prepared, localizer, cfg), cfg.min_region_voxels,
                                  cfg.threshold);
}

// ---------------------------------------------------------------------------
// Patches

inline std::vector<DiscInstance> crop_disc_patches(const MultiModalSample& prepared, const std::vector<Index3>& centers,
                                                   const PipelineConfig& cfg) {
  std::vector<DiscInstance> out;
  out.reserve(centers.size());
  for (const auto& c : centers) {
    if (!prepared.reference().contains(c))
      throw ContractError("disc center (" + std::to_string(c.z) + ", " + std::to_string(c.y) + ", " +
                          std::to_string(c.x) + ") lies outside the volume");
    const BoxRegion box{c, cfg.crop};
    DiscInstance d;
    d.center = c;
    d.patch.sample_id = prepared.sample_id;
    for (const auto& [m, v] : prepared.modalities) d.patch.modalities.emplace(m, pad_to(crop_box(v, box), cfg.patch));
    if (prepared.label) d.patch.label = pad_to(crop_box(*prepared.label, box), cfg.patch);
    out.push_back(std::move(d));
  }
  return out;
}

inline void segment_patches(std::vector<DiscInstance>& instances, nn::Network<float>& segmenter) {
  for (auto& d : instances) {
    if (segmenter.spec().in_channels != d.patch.modalities.size())
      throw ShapeError("segmenter expects " + std::to_string(segmenter.spec().in_channels) +
                       " channels, patch has " + std::to_string(d.patch.modalities.size()));
    const auto& y = segmenter.forward(sample_tensor(d.patch), {false, 0});
    d.prob = tensor_channel(y, d.patch.reference().spacing(), VolumeKind::probability);
  }
  segmenter.release_activations();
}

/// Thresholds each instance and ORs its crop-sized mask into a zero volume at the source box.
inline Volume threshold_and_assemble(std::vector<DiscInstance>& instances, const Extent3& full, const Spacing& spacing,
                                     const PipelineConfig& cfg) {
  Volume out({1, full.z, full.y, full.x}, spacing, VolumeKind::label);
  for (auto& d : instances) {
    d.mask = Volume(d.prob.dims(), d.prob.spacing(), VolumeKind::label);
    for (std::size_t i = 0; i < d.prob.data().size(); ++i)
      d.mask.data()[i] = d.prob.data()[i] >= cfg.threshold ? 1.0f : 0.0f;
    const auto m = center_crop(d.mask, cfg.crop);
    const Index3 o = BoxRegion{d.center, cfg.crop}.origin();
    for (std::size_t z = 0; z < cfg.crop.z; ++z)
      for (std::size_t y = 0; y < cfg.crop.y; ++y)
        for (std::size_t x = 0; x < cfg.crop.x; ++x) {
          const Index3 p{o.z + static_cast<std::int64_t>(z), o.y + static_cast<std::int64_t>(y),
                         o.x + static_cast<std::int64_t>(x)};
          if (m.at(0, z, y, x) != 0.0f && out.contains(p))
            out.at(0, static_cast<std::size_t>(p.z), static_cast<std::size_t>(p.y), static_cast<std::size_t>(p.x)) = 1.0f;
        }
  }
  return out;
}

struct Prediction {
  Volume mask;
  std::vector<Index3> centers;
  std::vector<DiscInstance> instances;
};

inline Prediction run_end_to_end(const MultiModalSample& sample, nn::Network<float>& localizer,
                                 nn::Network<float>& segmenter, const PipelineConfig& cfg) {
  cfg.validate();
  const auto prepared = prepare_sample(sample, cfg.modalities);
  Prediction p;
  p.centers = localize(prepared, localizer, cfg);
  p.instances = crop_disc_patches(prepared, p.centers, cfg);
  segment_patches(p.instances, segmenter);
  const auto& ref = prepared.reference();
  p.mask = threshold_and_assemble(p.instances, ref.extent(), ref.spacing(), cfg);
  return p;
}

// ---------------------------------------------------------------------------
// Training examples

/// Whole-volume localizer example (downsampled, padded to the net divisor).
inline Example localizer_example(const MultiModalSample& sample, const PipelineConfig& cfg, const Extent3& divisor) {
  if (!sample.label) throw ContractError("localizer example '" + sample.sample_id + "' needs a label");
  const auto prepared = prepare_sample(sample, cfg.modalities);
  auto grid = detail::localizer_grid(prepared, cfg.loc_downsample, divisor).first;
  return {sample_tensor(grid), label_tensor(*grid.label)};
}

/// Rounded centroids of the ground-truth discs.
inline std::vector<Index3> label_centers(const Volume& label) {
  const auto cc = connected_components(label, 26);
  std::vector<Index3> out;
  for (const auto& c : cc.centroids) out.push_back(round_voxel(c));
  std::sort(out.begin(), out.end(), [](const Index3& a, const Index3& b) {
    return std::tie(a.y, a.z, a.x) < std::tie(b.y, b.z, b.x);
  });
  return out;
}

/// One segmenter example per ground-truth disc.
inline std::vector<Example> segmenter_examples(const MultiModalSample& sample, const PipelineConfig& cfg) {
  if (!sample.label) throw ContractError("segmenter examples of '" + sample.sample_id + "' need a label");
  const auto prepared = prepare_sample(sample, cfg.modalities);
  std::vector<Example> out;
  for (auto& d : crop_disc_patches(prepared, label_centers(*sample.label), cfg))
    out.push_back({sample_tensor(d.patch), label_tensor(*d.patch.label)});
  return out;
}

}  // namespace ivdseg
