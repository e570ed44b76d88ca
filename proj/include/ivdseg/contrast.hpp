#pragma once

// Foreground/background intensity statistics and absolute Weber contrast.

#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/volume.hpp"

namespace ivdseg {

struct RegionStats {
  double fg_mean = 0, fg_sd = 0;
  double bg_mean = 0, bg_sd = 0;
};

/// Population statistics of `v` over mask==1 (foreground) and mask==0 (background).
inline RegionStats region_stats(const Volume& v, const Volume& mask) {
  if (!(v.dims() == mask.dims())) throw DimensionError("region_stats: volume and mask dims differ");
  if (mask.kind() != VolumeKind::label) throw ContractError("region_stats: mask must be label-binary");
  long double sum[2] = {0, 0}, sq[2] = {0, 0};
  std::size_t n[2] = {0, 0};
  auto vals = v.data();
  auto m = mask.data();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const int side = m[i] != 0.0f ? 1 : 0;
    sum[side] += vals[i];
    ++n[side];
  }
  if (n[1] == 0) throw StatisticsError("region_stats: empty foreground");
  if (n[0] == 0) throw StatisticsError("region_stats: empty background");
  const long double mean[2] = {sum[0] / n[0], sum[1] / n[1]};
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const int side = m[i] != 0.0f ? 1 : 0;
    const long double d = vals[i] - mean[side];
    sq[side] += d * d;
  }
  return {static_cast<double>(mean[1]), static_cast<double>(std::sqrt(sq[1] / n[1])),
          static_cast<double>(mean[0]), static_cast<double>(std::sqrt(sq[0] / n[0]))};
}

/// C = |I - Ib| / Ib.
inline double weber_contrast(double fg_mean, double bg_mean) {
  if (!(bg_mean > 0.0)) throw DomainError("weber_contrast: background mean must be positive");
  return std::abs(fg_mean - bg_mean) / bg_mean;
}

struct ContrastRow {
  Modality modality;
  RegionStats stats;
  double weber = 0;
};

struct ContrastReport {
  std::vector<ContrastRow> rows;  // fat, inn, opp, wat order

  const ContrastRow* find(Modality m) const {
    for (const auto& r : rows)
      if (r.modality == m) return &r;
    return nullptr;
  }

  std::string to_csv() const {
    std::ostringstream out;
    out << "modality,fg_mean,fg_sd,bg_mean,bg_sd,weber\n";
    char buf[256];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%.6g,%.6g,%.6g,%.6g,%.6g\n", std::string(modality_name(r.modality)).c_str(),
                    r.stats.fg_mean, r.stats.fg_sd, r.stats.bg_mean, r.stats.bg_sd, r.weber);
      out << buf;
    }
    return out.str();
  }
};

inline ContrastReport contrast_report(const MultiModalSample& s) {
  if (!s.label) throw ContractError("contrast_report: sample '" + s.sample_id + "' has no label");
  ContrastReport report;
  for (const auto& [m, v] : s.modalities) {
    ContrastRow row{m, region_stats(v, *s.label), 0.0};
    row.weber = weber_contrast(row.stats.fg_mean, row.stats.bg_mean);
    report.rows.push_back(row);
  }
  return report;
}

}  // namespace ivdseg
