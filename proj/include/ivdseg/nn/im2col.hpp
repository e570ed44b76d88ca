#pragma once

// Patch-matrix lowering for 3D (and, with unit depth, 2D) convolutions.
//
// A "big" grid (channels x D x H x W) is sampled by a kernel at the positions of
// a "small" grid: column o, row (c, kd, kh, kw) holds big[c][o*s - p + k] (zero
// outside). Convolution forward lowers its input; transposed convolution uses
// the same geometry with the roles swapped (its output is the big grid).

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstring>

namespace ivdseg::nn {

struct Grid3 {
  std::size_t d = 1, h = 1, w = 1;

  std::size_t volume() const noexcept { return d * h * w; }
  std::size_t operator[](std::size_t i) const noexcept { return i == 0 ? d : (i == 1 ? h : w); }
  std::size_t& operator[](std::size_t i) noexcept { return i == 0 ? d : (i == 1 ? h : w); }
  friend bool operator==(const Grid3&, const Grid3&) = default;
};

struct PatchGeometry {
  Grid3 big, small, kernel, stride, pad;  // pad = leading padding per axis
};

/// col has (channels * kernel.volume()) rows of small.volume() entries.
template <typename S>
void im2col(const S* big, std::size_t channels, const PatchGeometry& g, S* col) {
  const std::size_t n_small = g.small.volume();
  const auto D = static_cast<std::ptrdiff_t>(g.big.d), H = static_cast<std::ptrdiff_t>(g.big.h),
             W = static_cast<std::ptrdiff_t>(g.big.w);
  for (std::size_t c = 0; c < channels; ++c) {
    const S* src_c = big + c * g.big.volume();
    for (std::size_t kd = 0; kd < g.kernel.d; ++kd)
      for (std::size_t kh = 0; kh < g.kernel.h; ++kh)
        for (std::size_t kw = 0; kw < g.kernel.w; ++kw) {
          S* dst = col + (((c * g.kernel.d + kd) * g.kernel.h + kh) * g.kernel.w + kw) * n_small;
          // valid output-x range for this kernel column
          const auto off_w = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(g.pad.w);
          for (std::size_t od = 0; od < g.small.d; ++od) {
            const auto id = static_cast<std::ptrdiff_t>(od * g.stride.d + kd) - static_cast<std::ptrdiff_t>(g.pad.d);
            for (std::size_t oh = 0; oh < g.small.h; ++oh, dst += g.small.w) {
              const auto ih =
                  static_cast<std::ptrdiff_t>(oh * g.stride.h + kh) - static_cast<std::ptrdiff_t>(g.pad.h);
              if (id < 0 || id >= D || ih < 0 || ih >= H) {
                std::fill(dst, dst + g.small.w, S(0));
                continue;
              }
              const S* row = src_c + (id * H + ih) * W;
              if (g.stride.w == 1) {
                const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-off_w, 0, static_cast<std::ptrdiff_t>(g.small.w));
                const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(W - off_w, lo, static_cast<std::ptrdiff_t>(g.small.w));
                std::fill(dst, dst + lo, S(0));
                std::memcpy(dst + lo, row + lo + off_w, static_cast<std::size_t>(hi - lo) * sizeof(S));
                std::fill(dst + hi, dst + g.small.w, S(0));
              } else {
                for (std::size_t ow = 0; ow < g.small.w; ++ow) {
                  const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride.w) + off_w;
                  dst[ow] = (iw >= 0 && iw < W) ? row[iw] : S(0);
                }
              }
            }
          }
        }
  }
}

/// Adjoint of im2col: scatters-adds columns back into the big grid.
template <typename S>
void col2im_add(const S* col, std::size_t channels, const PatchGeometry& g, S* big) {
  const std::size_t n_small = g.small.volume();
  const auto D = static_cast<std::ptrdiff_t>(g.big.d), H = static_cast<std::ptrdiff_t>(g.big.h),
             W = static_cast<std::ptrdiff_t>(g.big.w);
  for (std::size_t c = 0; c < channels; ++c) {
    S* dst_c = big + c * g.big.volume();
    for (std::size_t kd = 0; kd < g.kernel.d; ++kd)
      for (std::size_t kh = 0; kh < g.kernel.h; ++kh)
        for (std::size_t kw = 0; kw < g.kernel.w; ++kw) {
          const S* src = col + (((c * g.kernel.d + kd) * g.kernel.h + kh) * g.kernel.w + kw) * n_small;
          const auto off_w = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(g.pad.w);
          for (std::size_t od = 0; od < g.small.d; ++od) {
            const auto id = static_cast<std::ptrdiff_t>(od * g.stride.d + kd) - static_cast<std::ptrdiff_t>(g.pad.d);
            for (std::size_t oh = 0; oh < g.small.h; ++oh, src += g.small.w) {
              const auto ih =
                  static_cast<std::ptrdiff_t>(oh * g.stride.h + kh) - static_cast<std::ptrdiff_t>(g.pad.h);
              if (id < 0 || id >= D || ih < 0 || ih >= H) continue;
              S* row = dst_c + (id * H + ih) * W;
              if (g.stride.w == 1) {
                const std::ptrdiff_t lo = std::clamp<std::ptrdiff_t>(-off_w, 0, static_cast<std::ptrdiff_t>(g.small.w));
                const std::ptrdiff_t hi = std::clamp<std::ptrdiff_t>(W - off_w, lo, static_cast<std::ptrdiff_t>(g.small.w));
                S* r = row + off_w;
                for (std::ptrdiff_t ow = lo; ow < hi; ++ow) r[ow] += src[ow];
              } else {
                for (std::size_t ow = 0; ow < g.small.w; ++ow) {
                  const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride.w) + off_w;
                  if (iw >= 0 && iw < W) row[iw] += src[ow];
                }
              }
            }
          }
        }
  }
}

}  // namespace ivdseg::nn
