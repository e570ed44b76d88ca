#pragma once

// Geometric data augmentation: exact flips, inverse-mapped affine resampling,
// and Gaussian-smoothed random elastic displacement fields. Modalities are
// resampled with Catmull-Rom cubic interpolation, labels with nearest neighbour.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/rng.hpp"
#include "ivdseg/volume.hpp"

namespace ivdseg {

enum class Interpolation { cubic, nearest };

/// Per-voxel displacement (voxel units) along z, y and x.
struct DisplacementField {
  Extent3 dims;
  std::array<std::vector<float>, 3> component;  // z, y, x
  double delta = 0;
  double alpha = 0;
};

namespace detail {

/// Normalized Gaussian taps for offsets -r..r, r = ceil(3*sd).
inline std::vector<double> gaussian_kernel(double sd) {
  const int r = static_cast<int>(std::ceil(3.0 * sd));
  std::vector<double> k(2 * r + 1);
  double sum = 0;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = std::exp(-0.5 * (i * i) / (sd * sd));
  for (auto& w : k) w /= sum;
  return k;
}

/// In-place 1D Gaussian blur along one axis of a z,y,x grid; taps falling
/// outside the grid are dropped and the remaining weights renormalized.
inline void blur_axis(std::vector<double>& data, const Extent3& d, std::size_t axis, const std::vector<double>& k) {
  const std::size_t n = d[axis];
  if (n == 1) return;
  const int r = static_cast<int>(k.size() / 2);
  const std::size_t stride = axis == 2 ? 1 : (axis == 1 ? d.x : d.x * d.y);
  std::vector<double> line(n), out(n);
  const std::size_t lines = d.voxels() / n;
  for (std::size_t l = 0; l < lines; ++l) {
    std::size_t base;
    if (axis == 2) base = l * d.x;
    else if (axis == 1) base = (l / d.x) * d.x * d.y + (l % d.x);
    else base = l;
    for (std::size_t i = 0; i < n; ++i) line[i] = data[base + i * stride];
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0, wsum = 0;
      const int lo = std::max<int>(-r, -static_cast<int>(i));
      const int hi = std::min<int>(r, static_cast<int>(n - 1 - i));
      for (int t = lo; t <= hi; ++t) {
        acc += k[t + r] * line[i + t];
        wsum += k[t + r];
      }
      out[i] = acc / wsum;
    }
    for (std::size_t i = 0; i < n; ++i) data[base + i * stride] = out[i];
  }
}

inline void catmull_rom_weights(double t, double w[4]) {
  const double t2 = t * t, t3 = t2 * t;
  w[0] = -0.5 * t3 + t2 - 0.5 * t;
  w[1] = 1.5 * t3 - 2.5 * t2 + 1.0;
  w[2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t;
  w[3] = 0.5 * t3 - 0.5 * t2;
}

/// Tricubic Catmull-Rom sample of one channel; voxels outside the grid read 0.
inline float sample_cubic(const float* ch, const Extent3& d, double z, double y, double x) {
  const double fz = std::floor(z), fy = std::floor(y), fx = std::floor(x);
  double wz[4], wy[4], wx[4];
  catmull_rom_weights(z - fz, wz);
  catmull_rom_weights(y - fy, wy);
  catmull_rom_weights(x - fx, wx);
  const auto iz0 = static_cast<std::int64_t>(fz) - 1, iy0 = static_cast<std::int64_t>(fy) - 1,
             ix0 = static_cast<std::int64_t>(fx) - 1;
  const auto nz = static_cast<std::int64_t>(d.z), ny = static_cast<std::int64_t>(d.y),
             nx = static_cast<std::int64_t>(d.x);
  double acc = 0;
  for (int a = 0; a < 4; ++a) {
    const auto iz = iz0 + a;
    if (iz < 0 || iz >= nz || wz[a] == 0.0) continue;
    double acc_y = 0;
    for (int b = 0; b < 4; ++b) {
      const auto iy = iy0 + b;
      if (iy < 0 || iy >= ny || wy[b] == 0.0) continue;
      const float* row = ch + (iz * ny + iy) * nx;
      double acc_x = 0;
      for (int c = 0; c < 4; ++c) {
        const auto ix = ix0 + c;
        if (ix < 0 || ix >= nx) continue;
        acc_x += wx[c] * row[ix];
      }
      acc_y += wy[b] * acc_x;
    }
    acc += wz[a] * acc_y;
  }
  return static_cast<float>(acc);
}

inline float sample_nearest(const float* ch, const Extent3& d, double z, double y, double x) {
  const auto iz = static_cast<std::int64_t>(std::floor(z + 0.5)), iy = static_cast<std::int64_t>(std::floor(y + 0.5)),
             ix = static_cast<std::int64_t>(std::floor(x + 0.5));
  if (iz < 0 || iy < 0 || ix < 0 || iz >= static_cast<std::int64_t>(d.z) || iy >= static_cast<std::int64_t>(d.y) ||
      ix >= static_cast<std::int64_t>(d.x))
    return 0.0f;
  return ch[(static_cast<std::size_t>(iz) * d.y + static_cast<std::size_t>(iy)) * d.x + static_cast<std::size_t>(ix)];
}

inline void check_interpolation(const Volume& v, Interpolation interp) {
  if (interp == Interpolation::cubic && v.kind() == VolumeKind::label)
    throw ContractError("cubic interpolation requested for a label-binary volume; labels must use nearest");
}

/// Resamples every channel of `v` at source coordinates produced by `map(z,y,x,&sz,&sy,&sx)`.
template <typename Map>
Volume resample(const Volume& v, Interpolation interp, Map&& map) {
  check_interpolation(v, interp);
  const auto& d = v.dims();
  const Extent3 e = v.extent();
  Volume out(d, v.spacing(), v.kind());
  const auto in = v.data();
  auto dst = out.data();
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        double sz, sy, sx;
        map(z, y, x, sz, sy, sx);
        for (std::size_t c = 0; c < d.nc; ++c) {
          const float* ch = in.data() + c * e.voxels();
          dst[out.index(c, z, y, x)] = interp == Interpolation::cubic ? sample_cubic(ch, e, sz, sy, sx)
                                                                      : sample_nearest(ch, e, sz, sy, sx);
        }
      }
  if (out.kind() == VolumeKind::probability)
    for (auto& x : dst) x = std::clamp(x, 0.0f, 1.0f);
  return out;
}

}  // namespace detail

/// Raw i.i.d. uniform(-1, 1) displacements per axis, Gaussian-blurred with sd `delta`
/// (taps truncated at 3 delta, renormalized), scaled by `alpha`. Axes of extent 1
/// get zero displacement.
inline DisplacementField elastic_field(const Extent3& dims, double delta, double alpha, std::uint64_t seed) {
  if (!(delta > 0)) throw DomainError("elastic_field: delta must be positive");
  if (!(alpha >= 0)) throw DomainError("elastic_field: alpha must be non-negative");
  if (dims.voxels() == 0) throw DomainError("elastic_field: dims must be positive");
  DisplacementField f{dims, {}, delta, alpha};
  const auto kernel = detail::gaussian_kernel(delta);
  for (std::size_t a = 0; a < 3; ++a) {
    f.component[a].assign(dims.voxels(), 0.0f);
    if (dims[a] == 1 || alpha == 0) continue;
    SplitMix64 rng(derive_seed(seed, {a}));
    std::vector<double> raw(dims.voxels());
    for (auto& r : raw) r = rng.uniform(-1.0, 1.0);
    for (std::size_t ax = 0; ax < 3; ++ax) detail::blur_axis(raw, dims, ax, kernel);
    for (std::size_t i = 0; i < raw.size(); ++i) f.component[a][i] = static_cast<float>(alpha * raw[i]);
  }
  return f;
}

/// out(p) = in(p + d(p)).
inline Volume apply_deformation(const Volume& v, const DisplacementField& field, Interpolation interp) {
  if (!(field.dims == v.extent())) throw DimensionError("apply_deformation: field dims differ from volume dims");
  const auto& e = field.dims;
  return detail::resample(v, interp, [&](std::size_t z, std::size_t y, std::size_t x, double& sz, double& sy,
                                         double& sx) {
    const std::size_t i = (z * e.y + y) * e.x + x;
    sz = static_cast<double>(z) + field.component[0][i];
    sy = static_cast<double>(y) + field.component[1][i];
    sx = static_cast<double>(x) + field.component[2][i];
  });
}

struct AffineParams {
  std::array<double, 3> translate{0, 0, 0};   // voxels, z y x
  std::array<double, 3> rotate_deg{0, 0, 0};  // about the z, y, x axes
  std::array<bool, 3> flip{false, false, false};
  std::array<double, 3> scale{1, 1, 1};

  bool resamples() const {
    return translate != std::array<double, 3>{0, 0, 0} || rotate_deg != std::array<double, 3>{0, 0, 0} ||
           scale != std::array<double, 3>{1, 1, 1};
  }
};

/// Reverses the listed axes (exact permutation).
inline Volume flip_axes(const Volume& v, const std::array<bool, 3>& flip) {
  if (!flip[0] && !flip[1] && !flip[2]) return v;
  const auto& d = v.dims();
  Volume out(d, v.spacing(), v.kind());
  for (std::size_t c = 0; c < d.nc; ++c)
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x)
          out.at(c, flip[0] ? d.nz - 1 - z : z, flip[1] ? d.ny - 1 - y : y, flip[2] ? d.nx - 1 - x : x) =
              v.at(c, z, y, x);
  return out;
}

/// Flip first (exact), then rotate/scale about the volume center and translate,
/// sampling each output voxel at its inverse-mapped source position.
inline Volume apply_affine(const Volume& v, const AffineParams& p, Interpolation interp) {
  detail::check_interpolation(v, interp);
  Volume flipped = flip_axes(v, p.flip);
  if (!p.resamples()) return flipped;
  for (double s : p.scale)
    if (!(s > 0)) throw DomainError("apply_affine: scale factors must be positive");

  // Forward map q = R S (p - c) + c + t with R = Rz Ry Rx in (z, y, x) coordinates.
  using Mat = std::array<std::array<double, 3>, 3>;
  auto mul = [](const Mat& a, const Mat& b) {
    Mat r{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
    return r;
  };
  const double deg = std::numbers::pi / 180.0;
  const double az = p.rotate_deg[0] * deg, ay = p.rotate_deg[1] * deg, ax = p.rotate_deg[2] * deg;
  // about z: rotates the (y, x) plane; about y: (z, x); about x: (z, y)
  const Mat rz{{{1, 0, 0}, {0, std::cos(az), -std::sin(az)}, {0, std::sin(az), std::cos(az)}}};
  const Mat ry{{{std::cos(ay), 0, std::sin(ay)}, {0, 1, 0}, {-std::sin(ay), 0, std::cos(ay)}}};
  const Mat rx{{{std::cos(ax), -std::sin(ax), 0}, {std::sin(ax), std::cos(ax), 0}, {0, 0, 1}}};
  const Mat r = mul(rz, mul(ry, rx));
  // Inverse: p = S^-1 R^T (q - c - t) + c
  Mat inv{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) inv[i][j] = r[j][i] / p.scale[i];
  const auto& d = v.dims();
  const std::array<double, 3> c{(static_cast<double>(d.nz) - 1) / 2, (static_cast<double>(d.ny) - 1) / 2,
                                (static_cast<double>(d.nx) - 1) / 2};
  return detail::resample(flipped, interp, [&](std::size_t z, std::size_t y, std::size_t x, double& sz, double& sy,
                                               double& sx) {
    const double q[3] = {static_cast<double>(z) - c[0] - p.translate[0], static_cast<double>(y) - c[1] - p.translate[1],
                         static_cast<double>(x) - c[2] - p.translate[2]};
    sz = inv[0][0] * q[0] + inv[0][1] * q[1] + inv[0][2] * q[2] + c[0];
    sy = inv[1][0] * q[0] + inv[1][1] * q[1] + inv[1][2] * q[2] + c[1];
    sx = inv[2][0] * q[0] + inv[2][1] * q[1] + inv[2][2] * q[2] + c[2];
  });
}

// ---------------------------------------------------------------------------
// Random augmentation recipes

enum class AugmentOpKind { translate, rotate, flip, scale, elastic };

struct AugmentOp {
  AugmentOpKind kind;
  AffineParams affine;  // translate / rotate / flip / scale
  double delta = 0, alpha = 0;
  std::uint64_t field_seed = 0;
};

/// Parameter bounds for randomly drawn recipes.
struct AugmentBounds {
  double translate = 5.0;                           // +- voxels per axis
  std::array<double, 3> rotate_deg{10.0, 5.0, 2.0}; // +- degrees about z, y, x
  double scale_min = 0.9, scale_max = 1.1;
  bool scale_in_plane = true;  // scale (y, x) only; z keeps unit scale
  bool allow_flip = true;
  double elastic_delta = 4.0;
  double elastic_alpha = 8.0;
};

/// One seeded recipe: a nonempty list of operations in a random order.
struct AugmentSpec {
  std::uint64_t seed = 0;
  std::vector<AugmentOp> ops;

  std::string describe() const {
    std::ostringstream out;
    out << "seed=" << seed << " ops=";
    for (std::size_t i = 0; i < ops.size(); ++i) {
      const auto& op = ops[i];
      if (i) out << ';';
      const auto& a = op.affine;
      switch (op.kind) {
        case AugmentOpKind::translate:
          out << "translate(" << a.translate[0] << ',' << a.translate[1] << ',' << a.translate[2] << ')';
          break;
        case AugmentOpKind::rotate:
          out << "rotate(" << a.rotate_deg[0] << ',' << a.rotate_deg[1] << ',' << a.rotate_deg[2] << ')';
          break;
        case AugmentOpKind::flip:
          out << "flip(" << (a.flip[0] ? "z" : "") << (a.flip[1] ? "y" : "") << (a.flip[2] ? "x" : "") << ')';
          break;
        case AugmentOpKind::scale:
          out << "scale(" << a.scale[0] << ',' << a.scale[1] << ',' << a.scale[2] << ')';
          break;
        case AugmentOpKind::elastic: out << "elastic(" << op.delta << ',' << op.alpha << ')'; break;
      }
    }
    return out.str();
  }
};

inline AugmentSpec random_augment_spec(const AugmentBounds& b, std::uint64_t seed) {
  SplitMix64 rng(seed);
  AugmentSpec spec{seed, {}};
  std::vector<AugmentOpKind> available, kinds;
  for (auto k : {AugmentOpKind::translate, AugmentOpKind::rotate, AugmentOpKind::flip, AugmentOpKind::scale,
                 AugmentOpKind::elastic})
    if (k != AugmentOpKind::flip || b.allow_flip) available.push_back(k);
  for (auto k : available)
    if (rng.uniform() < 0.5) kinds.push_back(k);
  if (kinds.empty()) kinds.push_back(available[rng.below(available.size())]);
  for (std::size_t i = kinds.size(); i > 1; --i) std::swap(kinds[i - 1], kinds[rng.below(i)]);

  for (auto k : kinds) {
    AugmentOp op{k, {}, 0, 0, 0};
    switch (k) {
      case AugmentOpKind::translate:
        for (auto& t : op.affine.translate) t = rng.uniform(-b.translate, b.translate);
        break;
      case AugmentOpKind::rotate:
        for (std::size_t a = 0; a < 3; ++a) op.affine.rotate_deg[a] = rng.uniform(-b.rotate_deg[a], b.rotate_deg[a]);
        break;
      case AugmentOpKind::flip: {
        do {
          for (auto& f : op.affine.flip) f = rng.uniform() < 0.5;
        } while (!op.affine.flip[0] && !op.affine.flip[1] && !op.affine.flip[2]);
        break;
      }
      case AugmentOpKind::scale: {
        const double s = rng.uniform(b.scale_min, b.scale_max);
        op.affine.scale = {b.scale_in_plane ? 1.0 : s, s, s};
        break;
      }
      case AugmentOpKind::elastic:
        op.delta = b.elastic_delta;
        op.alpha = b.elastic_alpha;
        op.field_seed = rng();
        break;
    }
    spec.ops.push_back(op);
  }
  return spec;
}

/// Applies the recipe to every modality (cubic) and the label (nearest) with identical parameters.
inline MultiModalSample apply_augment_spec(const MultiModalSample& s, const AugmentSpec& spec) {
  MultiModalSample out = s;
  for (const auto& op : spec.ops) {
    if (op.kind == AugmentOpKind::elastic) {
      const auto field = elastic_field(out.reference().extent(), op.delta, op.alpha, op.field_seed);
      for (auto& [m, v] : out.modalities) v = apply_deformation(v, field, Interpolation::cubic);
      if (out.label) out.label = apply_deformation(*out.label, field, Interpolation::nearest);
    } else {
      for (auto& [m, v] : out.modalities) v = apply_affine(v, op.affine, Interpolation::cubic);
      if (out.label) out.label = apply_affine(*out.label, op.affine, Interpolation::nearest);
    }
  }
  return out;
}

/// Originals first, then `copies_per_sample` augmented copies of each sample in order.
/// Copy j of sample i uses seed derive_seed(seed, {i, j}).
inline std::vector<MultiModalSample> augment_dataset(const std::vector<MultiModalSample>& samples,
                                                     std::size_t copies_per_sample, const AugmentBounds& bounds,
                                                     std::uint64_t seed) {
  std::vector<MultiModalSample> out(samples);
  out.reserve(samples.size() * (1 + copies_per_sample));
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = 0; j < copies_per_sample; ++j) {
      const auto spec = random_augment_spec(bounds, derive_seed(seed, {i, j}));
      auto copy = apply_augment_spec(samples[i], spec);
      copy.sample_id = samples[i].sample_id + "-aug" + std::to_string(j + 1);
      out.push_back(std::move(copy));
    }
  return out;
}

}  // namespace ivdseg
