#pragma once

// Synthetic Dixon spine: ellipsoidal discs strung along a sinusoidal curve in
// the sagittal (y, x) plane, on a mildly textured soft-tissue background.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ivdseg/rng.hpp"
#include "ivdseg/volume.hpp"
#include "ivdseg/volume_io.hpp"

namespace ivdseg {

struct PhantomConfig {
  Extent3 dims{36, 256, 64};
  Spacing spacing{2.0f, 1.25f, 1.25f};
  std::size_t disc_count = 7;
  std::array<double, 3> semi_axes{9.0, 4.0, 12.0};  // voxels (z, y, x)
  double disc_gap = 36.0;                            // center spacing along y, voxels
  double curve_amplitude = 6.0;                      // x excursion, voxels
  double curve_period = 256.0;                       // voxels along y
  double curve_phase = 0.0;                          // radians
  double wat_fg = 163.4, wat_bg = 67.9;
  double fat_fg = 15.9, fat_bg = 35.2;
  double noise_fraction = 0.2;    // noise sd as a fraction of the region mean
  double texture_amplitude = 0.1; // relative background modulation
  std::uint64_t seed = 0;

  static constexpr double kMinSeparation = 36.0;
  static constexpr Extent3 kCropBox{25, 35, 35};

  /// Disc centers in voxel coordinates (z, y, x), craniocaudal order.
  std::vector<std::array<double, 3>> disc_centers() const {
    std::vector<std::array<double, 3>> out;
    const double y0 = (static_cast<double>(dims.y) - 1) / 2 - (static_cast<double>(disc_count) - 1) * disc_gap / 2;
    for (std::size_t k = 0; k < disc_count; ++k) {
      const double y = y0 + static_cast<double>(k) * disc_gap;
      const double x = (static_cast<double>(dims.x) - 1) / 2 +
                       curve_amplitude * std::sin(2 * std::numbers::pi * y / curve_period + curve_phase);
      out.push_back({(static_cast<double>(dims.z) - 1) / 2, y, x});
    }
    return out;
  }

  void validate() const {
    if (dims.voxels() == 0) throw ConfigError("phantom dims must be positive");
    if (disc_count == 0) throw ConfigError("phantom needs at least one disc");
    for (double m : {wat_fg, wat_bg, fat_fg, fat_bg})
      if (!(m >= 0)) throw ConfigError("phantom intensity means must be >= 0");
    if (!(noise_fraction >= 0) || !(texture_amplitude >= 0) || texture_amplitude >= 1)
      throw ConfigError("phantom noise fraction must be >= 0 and texture amplitude in [0, 1)");
    if (!(spacing.z > 0 && spacing.y > 0 && spacing.x > 0)) throw ConfigError("phantom spacing must be positive");
    for (std::size_t a = 0; a < 3; ++a) {
      if (!(semi_axes[a] > 0)) throw ConfigError("disc semi-axes must be positive");
      // a disc must fit the pipeline's crop box around its rounded center
      if (semi_axes[a] + 0.5 > static_cast<double>(kCropBox[a] / 2))
        throw ConfigError("disc semi-axis " + std::to_string(semi_axes[a]) + " does not fit the " +
                          std::to_string(kCropBox[a]) + "-voxel crop box");
    }
    if (disc_gap < kMinSeparation)
      throw ConfigError("disc centers must be >= " + std::to_string(kMinSeparation) + " voxels apart (gap " +
                        std::to_string(disc_gap) + ")");
    for (const auto& c : disc_centers())
      for (std::size_t a = 0; a < 3; ++a)
        if (c[a] - semi_axes[a] < 0 || c[a] + semi_axes[a] > static_cast<double>(dims[a]) - 1)
          throw ConfigError("disc at (" + std::to_string(c[0]) + ", " + std::to_string(c[1]) + ", " +
                            std::to_string(c[2]) + ") does not fit inside the " + std::to_string(dims.z) + "x" +
                            std::to_string(dims.y) + "x" + std::to_string(dims.x) + " volume");
  }
};

namespace detail {

/// Intensities live on a 1/16 grid so inn, opp and their differences are exact in float.
inline float quantize_intensity(double v) { return static_cast<float>(std::round(std::max(v, 0.0) * 16.0) / 16.0); }

}  // namespace detail

inline MultiModalSample generate_phantom(const PhantomConfig& cfg, std::string sample_id = "phantom") {
  cfg.validate();
  const Extent3 e = cfg.dims;
  const Dims4 d{1, e.z, e.y, e.x};
  Volume label(d, cfg.spacing, VolumeKind::label);
  const auto centers = cfg.disc_centers();
  for (const auto& c : centers) {
    const auto lo = [&](std::size_t a) { return static_cast<std::size_t>(std::ceil(c[a] - cfg.semi_axes[a])); };
    const auto hi = [&](std::size_t a) { return static_cast<std::size_t>(std::floor(c[a] + cfg.semi_axes[a])); };
    for (std::size_t z = lo(0); z <= hi(0); ++z)
      for (std::size_t y = lo(1); y <= hi(1); ++y)
        for (std::size_t x = lo(2); x <= hi(2); ++x) {
          const double q = std::pow((z - c[0]) / cfg.semi_axes[0], 2) + std::pow((y - c[1]) / cfg.semi_axes[1], 2) +
                           std::pow((x - c[2]) / cfg.semi_axes[2], 2);
          if (q <= 1.0) label.at(0, z, y, x) = 1.0f;
        }
  }

  Volume wat(d, cfg.spacing, VolumeKind::intensity), fat(d, cfg.spacing, VolumeKind::intensity);
  SplitMix64 rw(derive_seed(cfg.seed, {1})), rf(derive_seed(cfg.seed, {2}));
  std::normal_distribution<double> unit(0.0, 1.0);
  const double tex_phase = SplitMix64(derive_seed(cfg.seed, {3})).uniform(0, 2 * std::numbers::pi);
  for (std::size_t z = 0; z < e.z; ++z)
    for (std::size_t y = 0; y < e.y; ++y)
      for (std::size_t x = 0; x < e.x; ++x) {
        const bool fg = label.at(0, z, y, x) != 0.0f;
        const double tex =
            fg ? 1.0
               : 1.0 + cfg.texture_amplitude * std::sin(2 * std::numbers::pi * y / 48.0 + tex_phase) *
                           std::cos(2 * std::numbers::pi * (x + 0.5 * z) / 40.0);
        const double mw = (fg ? cfg.wat_fg : cfg.wat_bg) * tex, mf = (fg ? cfg.fat_fg : cfg.fat_bg) * tex;
        wat.at(0, z, y, x) = detail::quantize_intensity(mw + cfg.noise_fraction * mw * unit(rw));
        fat.at(0, z, y, x) = detail::quantize_intensity(mf + cfg.noise_fraction * mf * unit(rf));
      }

  std::vector<float> inn(e.voxels()), opp(e.voxels());
  for (std::size_t i = 0; i < inn.size(); ++i) {
    inn[i] = wat.data()[i] + fat.data()[i];
    opp[i] = std::abs(wat.data()[i] - fat.data()[i]);
  }
  MultiModalSample s;
  s.sample_id = std::move(sample_id);
  s.modalities.emplace(Modality::fat, std::move(fat));
  s.modalities.emplace(Modality::inn, Volume(d, cfg.spacing, VolumeKind::intensity, std::move(inn)));
  s.modalities.emplace(Modality::opp, Volume(d, cfg.spacing, VolumeKind::intensity, std::move(opp)));
  s.modalities.emplace(Modality::wat, std::move(wat));
  s.label = std::move(label);
  return s;
}

/// Per-sample configuration: the base config with the curve, disc size and
/// intensity means jittered by a seed derived from (seed, index).
inline PhantomConfig jittered_config(const PhantomConfig& base, std::uint64_t seed, std::size_t index) {
  PhantomConfig c = base;
  c.seed = derive_seed(seed, {index, 0});
  SplitMix64 r(derive_seed(seed, {index, 1}));
  c.curve_amplitude = base.curve_amplitude * r.uniform(0.7, 1.3);
  c.curve_phase = base.curve_phase + r.uniform(0, 2 * std::numbers::pi);
  for (auto& a : c.semi_axes) a *= r.uniform(0.9, 1.0);
  c.disc_gap = base.disc_gap + r.uniform(0, 1);
  for (double* m : {&c.wat_fg, &c.wat_bg, &c.fat_fg, &c.fat_bg}) *m *= r.uniform(0.9, 1.1);
  return c;
}

inline std::string phantom_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "phantom-%02zu", index);
  return buf;
}

inline std::vector<MultiModalSample> generate_dataset(std::size_t n, const PhantomConfig& base, std::uint64_t seed) {
  if (n < 1) throw ConfigError("phantom dataset needs n >= 1");
  std::vector<MultiModalSample> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(generate_phantom(jittered_config(base, seed, i), phantom_id(i)));
  return out;
}

/// "train" / "val" tags: the trailing `n_val` samples validate.
inline std::vector<std::string> split_tags(std::size_t n, std::size_t n_val) {
  if (n_val >= n) throw ConfigError("validation count must leave at least one training sample");
  std::vector<std::string> out(n, "train");
  for (std::size_t i = n - n_val; i < n; ++i) out[i] = "val";
  return out;
}

// ---------------------------------------------------------------------------
// On-disk datasets: one directory per sample plus manifest.json

struct DatasetEntry {
  MultiModalSample sample;
  std::string split;
};

inline nlohmann::json write_dataset(const std::filesystem::path& dir, const std::vector<MultiModalSample>& samples,
                                    const std::vector<std::string>& splits) {
  if (splits.size() != samples.size()) throw ContractError("write_dataset: one split tag per sample");
  std::filesystem::create_directories(dir);
  nlohmann::json entries = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    s.validate();
    nlohmann::json mods = nlohmann::json::object();
    std::filesystem::create_directories(dir / s.sample_id);
    for (const auto& [m, v] : s.modalities) {
      const auto rel = s.sample_id + "/" + std::string(modality_name(m)) + ".mvl";
      save_volume(v, dir / rel);
      mods[std::string(modality_name(m))] = rel;
    }
    nlohmann::json e = {{"id", s.sample_id}, {"split", splits[i]}, {"modalities", mods}};
    if (s.label) {
      const auto rel = s.sample_id + "/label.mvl";
      save_volume(*s.label, dir / rel);
      e["label"] = rel;
    }
    entries.push_back(e);
  }
  nlohmann::json manifest = {{"samples", entries}};
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
  return manifest;
}

/// Loads a dataset written by write_dataset. `modalities` restricts what is read (empty = all).
inline std::vector<DatasetEntry> read_dataset(const std::filesystem::path& manifest_path,
                                              const std::vector<Modality>& modalities = {}) {
  std::ifstream in(manifest_path);
  if (!in) throw ConfigError("cannot open dataset manifest " + manifest_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  const auto root = manifest_path.parent_path();
  std::vector<DatasetEntry> out;
  try {
    for (const auto& e : j.at("samples")) {
      DatasetEntry d;
      d.sample.sample_id = e.at("id").get<std::string>();
      d.split = e.value("split", "train");
      for (const auto& [name, rel] : e.at("modalities").items()) {
        const auto m = parse_modality(name);
        if (!modalities.empty() && std::find(modalities.begin(), modalities.end(), m) == modalities.end()) continue;
        d.sample.modalities.emplace(m, load_volume(root / rel.get<std::string>()));
      }
      if (e.contains("label")) d.sample.label = load_volume(root / e.at("label").get<std::string>());
      for (auto m : modalities) d.sample.modality(m);  // throws when a requested modality is missing
      d.sample.validate();
      out.push_back(std::move(d));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  return out;
}

}  // namespace ivdseg
