#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/components.hpp"
#include "ivdseg/volume.hpp"

namespace ivdseg {

namespace detail {

inline void require_same_grid(const Volume& a, const Volume& b, const char* what) {
  if (!(a.dims() == b.dims()))
    throw DimensionError(std::string(what) + ": mask dims differ (" + std::to_string(a.dims().nz) + "x" +
                         std::to_string(a.dims().ny) + "x" + std::to_string(a.dims().nx) + " vs " +
                         std::to_string(b.dims().nz) + "x" + std::to_string(b.dims().ny) + "x" +
                         std::to_string(b.dims().nx) + ")");
}

/// Shortest decimal that round-trips.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw FormatError("number", "bad number '" + s + "'");
  return v;
}

}  // namespace detail

/// 2|X∩Y| / (|X| + |Y|) in percent; two empty masks agree perfectly (100).
inline double dice(const Volume& x, const Volume& y) {
  detail::require_same_grid(x, y, "dice");
  std::size_t nx = 0, ny = 0, both = 0;
  const auto a = x.data(), b = y.data();
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool p = a[i] >= 0.5f, q = b[i] >= 0.5f;
    nx += p;
    ny += q;
    both += p && q;
  }
  if (nx + ny == 0) return 100.0;
  return 200.0 * static_cast<double>(both) / static_cast<double>(nx + ny);
}

/// Foreground voxels with at least one 6-neighbour that is background or off-grid.
inline std::vector<Index3> surface_voxels(const Volume& mask) {
  const Extent3 e = mask.extent();
  const auto d = mask.data();
  const auto nz = static_cast<std::int64_t>(e.z), ny = static_cast<std::int64_t>(e.y),
             nx = static_cast<std::int64_t>(e.x);
  auto fg = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
    if (z < 0 || y < 0 || x < 0 || z >= nz || y >= ny || x >= nx) return false;
    return d[static_cast<std::size_t>((z * ny + y) * nx + x)] >= 0.5f;
  };
  std::vector<Index3> out;
  for (std::int64_t z = 0; z < nz; ++z)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t x = 0; x < nx; ++x) {
        if (!fg(z, y, x)) continue;
        if (!fg(z - 1, y, x) || !fg(z + 1, y, x) || !fg(z, y - 1, x) || !fg(z, y + 1, x) || !fg(z, y, x - 1) ||
            !fg(z, y, x + 1))
          out.push_back({z, y, x});
      }
  return out;
}

/// Surface voxel centers in millimeters (z, y, x).
inline std::vector<std::array<double, 3>> surface_points(const Volume& mask, const Spacing& spacing) {
  std::vector<std::array<double, 3>> out;
  for (const auto& p : surface_voxels(mask))
    out.push_back({static_cast<double>(p.z) * spacing.z, static_cast<double>(p.y) * spacing.y,
                   static_cast<double>(p.x) * spacing.x});
  return out;
}

namespace detail {

inline double squared_mm(const Index3& a, const Index3& b, const Spacing& s) {
  const double dz = static_cast<double>(a.z - b.z) * s.z, dy = static_cast<double>(a.y - b.y) * s.y,
               dx = static_cast<double>(a.x - b.x) * s.x;
  return dz * dz + dy * dy + dx * dx;
}

/// max over a of min over b of squared distance. A source point stops scanning
/// as soon as it is closer than the running maximum (it cannot raise it).
inline double directed_squared(const std::vector<Index3>& from, const std::vector<Index3>& to, const Spacing& s) {
  double worst = 0;
  for (const auto& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : to) {
      const double d = squared_mm(a, b, s);
      if (d < best) {
        best = d;
        if (best <= worst) break;
      }
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace detail

/// Symmetric Hausdorff distance between the surface voxel sets, in millimeters.
inline double hausdorff(const Volume& a, const Volume& b, const Spacing& spacing) {
  detail::require_same_grid(a, b, "hausdorff");
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  if (sa.empty() || sb.empty()) throw EvaluationError("hausdorff: distance to an empty mask is undefined");
  return std::sqrt(std::max(detail::directed_squared(sa, sb, spacing), detail::directed_squared(sb, sa, spacing)));
}

// ---------------------------------------------------------------------------
// Per-disc evaluation

struct DiscResult {
  std::string sample_id;
  std::size_t disc_index = 0;  // craniocaudal order of ground-truth discs
  Index3 center;               // rounded ground-truth centroid
  bool matched = false;
  double dice_pct = 0.0;
  double hd_mm = std::numeric_limits<double>::quiet_NaN();  // NaN when unmatched
};

struct Aggregate {
  std::size_t discs = 0;
  std::size_t with_hd = 0;
  double mean_dice = 0, sd_dice = 0, mean_hd = 0, sd_hd = 0;
};

struct EvalReport {
  std::string sample_id;
  std::vector<DiscResult> rows;
  Aggregate aggregate;
  double global_dice = 0.0;
  std::size_t unmatched_pred = 0;  // predicted components left without a disc
};

/// Mean and population sd of dice over all rows; of hd over matched rows.
inline Aggregate aggregate(const std::vector<DiscResult>& rows) {
  Aggregate a;
  a.discs = rows.size();
  auto moments = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = sd = 0;
    if (v.empty()) return;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    for (double x : v) sd += (x - mean) * (x - mean);
    sd = std::sqrt(sd / static_cast<double>(v.size()));
  };
  std::vector<double> d, h;
  for (const auto& r : rows) {
    d.push_back(r.dice_pct);
    if (r.matched) h.push_back(r.hd_mm);
  }
  a.with_hd = h.size();
  moments(d, a.mean_dice, a.sd_dice);
  moments(h, a.mean_hd, a.sd_hd);
  return a;
}

namespace detail {

inline bool craniocaudal_less(const std::array<double, 3>& a, const std::array<double, 3>& b) {
  if (a[1] != b[1]) return a[1] < b[1];
  if (a[0] != b[0]) return a[0] < b[0];
  return a[2] < b[2];
}

}  // namespace detail

/// Matches ground-truth discs to predicted components (greedy, nearest centroid in
/// mm first) and scores each disc inside the union of both bounding boxes grown
/// by 2 voxels.
inline EvalReport evaluate_sample(const Volume& pred, const Volume& gt, const std::string& sample_id = {}) {
  detail::require_same_grid(pred, gt, "evaluate_sample");
  const Spacing sp = gt.spacing();
  const auto g = connected_components(gt, 26);
  if (g.count() == 0) throw EvaluationError("evaluate_sample: ground truth of '" + sample_id + "' is empty");
  const auto p = connected_components(pred, 26);

  std::vector<std::size_t> order(g.count());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return detail::craniocaudal_less(g.centroids[a], g.centroids[b]);
  });

  struct Pair {
    double d;
    std::size_t gi, pj;
  };
  std::vector<Pair> pairs;
  for (std::size_t i = 0; i < g.count(); ++i)
    for (std::size_t j = 0; j < p.count(); ++j) {
      double d = 0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double t = (g.centroids[i][a] - p.centroids[j][a]) * sp[a];
        d += t * t;
      }
      pairs.push_back({d, i, j});
    }
  std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.d < b.d; });
  std::vector<std::ptrdiff_t> match(g.count(), -1);
  std::vector<bool> used(p.count(), false);
  for (const auto& pr : pairs)
    if (match[pr.gi] < 0 && !used[pr.pj]) {
      match[pr.gi] = static_cast<std::ptrdiff_t>(pr.pj);
      used[pr.pj] = true;
    }

  EvalReport rep;
  rep.sample_id = sample_id;
  rep.global_dice = dice(pred, gt);
  rep.unmatched_pred = static_cast<std::size_t>(std::count(used.begin(), used.end(), false));
  const Extent3 e = gt.extent();
  for (std::size_t k = 0; k < order.size(); ++k) {
    const std::size_t i = order[k];
    DiscResult r;
    r.sample_id = sample_id;
    r.disc_index = k;
    r.center = round_voxel(g.centroids[i]);
    if (match[i] >= 0) {
      const auto j = static_cast<std::size_t>(match[i]);
      Index3 lo = g.boxes[i][0], hi = g.boxes[i][1];
      for (std::size_t a = 0; a < 3; ++a) {
        lo[a] = std::max<std::int64_t>(0, std::min(lo[a], p.boxes[j][0][a]) - 2);
        hi[a] = std::min<std::int64_t>(static_cast<std::int64_t>(e[a]) - 1, std::max(hi[a], p.boxes[j][1][a]) + 2);
      }
      const Extent3 be{static_cast<std::size_t>(hi.z - lo.z + 1), static_cast<std::size_t>(hi.y - lo.y + 1),
                       static_cast<std::size_t>(hi.x - lo.x + 1)};
      Volume x({1, be.z, be.y, be.x}, sp, VolumeKind::label), y({1, be.z, be.y, be.x}, sp, VolumeKind::label);
      for (std::size_t z = 0; z < be.z; ++z)
        for (std::size_t yy = 0; yy < be.y; ++yy)
          for (std::size_t xx = 0; xx < be.x; ++xx) {
            const std::size_t src = ((lo.z + z) * e.y + (lo.y + yy)) * e.x + (lo.x + xx);
            x.at(0, z, yy, xx) = p.ids[src] == j + 1 ? 1.0f : 0.0f;
            y.at(0, z, yy, xx) = g.ids[src] == i + 1 ? 1.0f : 0.0f;
          }
      r.matched = true;
      r.dice_pct = dice(x, y);
      r.hd_mm = hausdorff(x, y, sp);
    }
    rep.rows.push_back(r);
  }
  rep.aggregate = aggregate(rep.rows);
  return rep;
}

// ---------------------------------------------------------------------------
// Serialization

inline std::string report_csv(const std::vector<DiscResult>& rows) {
  std::string out = "sample_id,disc_index,dice_pct,hd_mm\n";
  for (const auto& r : rows) {
    out += r.sample_id + ',' + std::to_string(r.disc_index) + ',' + detail::format_double(r.dice_pct) + ',';
    if (r.matched) out += detail::format_double(r.hd_mm);
    out += '\n';
  }
  return out;
}

/// Inverse of report_csv (centers are not part of the CSV).
inline std::vector<DiscResult> parse_report_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "sample_id,disc_index,dice_pct,hd_mm")
    throw FormatError("header", "not a disc report CSV");
  std::vector<DiscResult> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto c = line.find(',', start);
      f.push_back(line.substr(start, c == std::string::npos ? std::string::npos : c - start));
      if (c == std::string::npos) break;
      start = c + 1;
    }
    if (f.size() != 4) throw FormatError("row", "expected 4 fields in '" + line + "'");
    DiscResult r;
    r.sample_id = f[0];
    r.disc_index = static_cast<std::size_t>(detail::parse_double(f[1]));
    r.dice_pct = detail::parse_double(f[2]);
    r.matched = !f[3].empty();
    if (r.matched) r.hd_mm = detail::parse_double(f[3]);
    rows.push_back(r);
  }
  return rows;
}

inline nlohmann::json disc_json(const DiscResult& r) {
  nlohmann::json j = {{"sample_id", r.sample_id},
                      {"disc_index", r.disc_index},
                      {"center", {r.center.z, r.center.y, r.center.x}},
                      {"dice", r.dice_pct},
                      {"matched", r.matched}};
  j["hausdorff_mm"] = r.matched ? nlohmann::json(r.hd_mm) : nlohmann::json(nullptr);
  return j;
}

inline nlohmann::json aggregate_json(const Aggregate& a) {
  return {{"discs", a.discs}, {"discs_with_hd", a.with_hd}, {"mean_dice", a.mean_dice},
          {"sd_dice", a.sd_dice}, {"mean_hd", a.mean_hd},     {"sd_hd", a.sd_hd}};
}

/// Per-disc rows of all samples plus one aggregate block over every disc.
inline nlohmann::json reports_json(const std::vector<EvalReport>& reports) {
  nlohmann::json samples = nlohmann::json::array(), discs = nlohmann::json::array();
  std::vector<DiscResult> all;
  double global = 0;
  for (const auto& r : reports) {
    samples.push_back({{"sample_id", r.sample_id},
                       {"global_dice", r.global_dice},
                       {"unmatched_pred", r.unmatched_pred},
                       {"aggregate", aggregate_json(r.aggregate)}});
    for (const auto& d : r.rows) {
      discs.push_back(disc_json(d));
      all.push_back(d);
    }
    global += r.global_dice;
  }
  auto agg = aggregate_json(aggregate(all));
  agg["mean_global_dice"] = reports.empty() ? 0.0 : global / static_cast<double>(reports.size());
  return {{"samples", samples}, {"discs", discs}, {"aggregate", agg}};
}

inline std::vector<DiscResult> all_rows(const std::vector<EvalReport>& reports) {
  std::vector<DiscResult> out;
  for (const auto& r : reports) out.insert(out.end(), r.rows.begin(), r.rows.end());
  return out;
}

}  // namespace ivdseg
