#pragma once

// Layer forward/backward passes over (N, C, D, H, W) tensors. 2D networks use
// D == 1 with unit kernel depth. Convolutions are cross-correlations (no kernel
// flip) lowered to matrix products.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/nn/im2col.hpp"
#include "ivdseg/nn/init.hpp"
#include "ivdseg/nn/tensor.hpp"
#include "ivdseg/rng.hpp"

namespace ivdseg::nn {

enum class LayerKind { conv, relu, sigmoid, dropout, maxpool, upsample, tconv, concat, batchnorm };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  Grid3 kernel{1, 1, 1};  // conv, tconv
  Grid3 stride{1, 1, 1};  // conv, tconv
  Grid3 window{2, 2, 2};  // maxpool window (stride == window), upsample factor
  std::size_t in_channels = 0, out_channels = 0;  // conv, tconv, batchnorm (in_channels)
  bool same_padding = true;
  double rate = 0.0;        // dropout
  std::size_t source = 0;   // concat: earlier layer whose output is appended
  double epsilon = 1e-3;    // batchnorm
  double momentum = 0.99;   // batchnorm: running = momentum * running + (1 - momentum) * batch

  static LayerSpec conv(Grid3 k, std::size_t in, std::size_t out, Grid3 stride = {1, 1, 1}, bool same = true) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.kernel = k;
    s.in_channels = in;
    s.out_channels = out;
    s.stride = stride;
    s.same_padding = same;
    return s;
  }
  static LayerSpec tconv(Grid3 k, std::size_t in, std::size_t out, Grid3 stride) {
    LayerSpec s = conv(k, in, out, stride, true);
    s.kind = LayerKind::tconv;
    return s;
  }
  static LayerSpec simple(LayerKind kind) {
    LayerSpec s;
    s.kind = kind;
    return s;
  }
  static LayerSpec dropout(double rate) {
    LayerSpec s = simple(LayerKind::dropout);
    s.rate = rate;
    return s;
  }
  static LayerSpec maxpool(Grid3 window) {
    LayerSpec s = simple(LayerKind::maxpool);
    s.window = window;
    return s;
  }
  static LayerSpec upsample(Grid3 factor) {
    LayerSpec s = simple(LayerKind::upsample);
    s.window = factor;
    return s;
  }
  static LayerSpec concat(std::size_t source) {
    LayerSpec s = simple(LayerKind::concat);
    s.source = source;
    return s;
  }
  static LayerSpec batchnorm(std::size_t channels, double eps = 1e-3, double momentum = 0.99) {
    LayerSpec s = simple(LayerKind::batchnorm);
    s.in_channels = s.out_channels = channels;
    s.epsilon = eps;
    s.momentum = momentum;
    return s;
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

struct ForwardContext {
  bool training = false;
  std::uint64_t seed = 0;  // dropout masks derive from (seed, layer index)
};

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MatMap = Eigen::Map<RowMatrix<S>>;
template <typename S>
using ConstMatMap = Eigen::Map<const RowMatrix<S>>;

inline Grid3 spatial_grid(const Shape& s) {
  if (s.size() != 5) throw ShapeError("layers expect (N,C,D,H,W) tensors, got " + shape_string(s));
  return {s[2], s[3], s[4]};
}

template <typename S>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
  /// `out` is already sized to output_shape().
  virtual void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext& ctx) = 0;
  /// Reads out.grad(); adds into parameter grads and, when requested, in[i]->grad().
  virtual void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) = 0;
  virtual std::vector<Tensor<S>*> parameters() { return {}; }
  /// Non-trainable state that must travel with the parameters (batchnorm running stats).
  virtual std::vector<Tensor<S>*> buffers() { return {}; }
};

namespace detail {

inline void require_inputs(std::span<const Shape> in, std::size_t n, const char* who) {
  if (in.size() != n) throw ShapeError(std::string(who) + ": expected " + std::to_string(n) + " input(s)");
}

}  // namespace detail

// ---------------------------------------------------------------------------

template <typename S>
class ConvLayer final : public Layer<S> {
 public:
  ConvLayer(const LayerSpec& spec, std::uint64_t seed)
      : spec_(spec),
        weight_({spec.out_channels, spec.in_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                he_init<S>({spec.out_channels, spec.in_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                           spec.in_channels * spec.kernel.volume(), seed)),
        bias_({spec.out_channels}, true) {
    weight_.enable_grad();
  }

  PatchGeometry geometry(const Shape& in) const {
    const Grid3 g = spatial_grid(in);
    PatchGeometry pg{g, {}, spec_.kernel, spec_.stride, {0, 0, 0}};
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t n = g[a], k = spec_.kernel[a], s = spec_.stride[a];
      if (spec_.same_padding) {
        const std::size_t out = (n + s - 1) / s;
        const std::size_t need = (out - 1) * s + k;
        pg.small[a] = out;
        pg.pad[a] = need > n ? (need - n) / 2 : 0;
      } else {
        if (n < k) throw ShapeError("conv: input " + shape_string(in) + " smaller than kernel");
        pg.small[a] = (n - k) / s + 1;
      }
    }
    return pg;
  }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "conv");
    if (in[0].size() != 5 || in[0][1] != spec_.in_channels)
      throw ShapeError("conv: input " + shape_string(in[0]) + " does not match weight " + shape_string(weight_.dims()));
    const auto g = geometry(in[0]).small;
    return {in[0][0], spec_.out_channels, g.d, g.h, g.w};
  }

  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto& x = *in[0];
    const auto g = geometry(x.dims());
    const std::size_t ic = spec_.in_channels, oc = spec_.out_channels, K = spec_.kernel.volume();
    const std::size_t n_in = g.big.volume(), n_out = g.small.volume();
    ConstMatMap<S> w(weight_.data(), static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(ic * K));
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const S* col = lowered(x.data() + n * ic * n_in, g);
      MatMap<S> y(out.data() + n * oc * n_out, static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(n_out));
      y.noalias() = w * ConstMatMap<S>(col, static_cast<Eigen::Index>(ic * K), static_cast<Eigen::Index>(n_out));
      for (std::size_t o = 0; o < oc; ++o) y.row(static_cast<Eigen::Index>(o)).array() += bias_[o];
    }
  }

  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    auto& x = *in[0];
    const auto g = geometry(x.dims());
    const std::size_t ic = spec_.in_channels, oc = spec_.out_channels, K = spec_.kernel.volume();
    const std::size_t n_in = g.big.volume(), n_out = g.small.volume();
    ConstMatMap<S> w(weight_.data(), static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(ic * K));
    MatMap<S> gw(weight_.grad().data(), static_cast<Eigen::Index>(oc), static_cast<Eigen::Index>(ic * K));
    for (std::size_t n = 0; n < x.batch(); ++n) {
      ConstMatMap<S> gy(out.grad().data() + n * oc * n_out, static_cast<Eigen::Index>(oc),
                        static_cast<Eigen::Index>(n_out));
      const S* col = lowered(x.data() + n * ic * n_in, g);
      gw.noalias() += gy * ConstMatMap<S>(col, static_cast<Eigen::Index>(ic * K), static_cast<Eigen::Index>(n_out))
                               .transpose();
      for (std::size_t o = 0; o < oc; ++o) bias_.grad()[o] += gy.row(static_cast<Eigen::Index>(o)).sum();
      if (!need_input_grad) continue;
      S* gx = x.grad().data() + n * ic * n_in;
      if (is_pointwise(g)) {
        MatMap<S>(gx, static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(n_in)).noalias() += w.transpose() * gy;
      } else {
        gcol_.resize(ic * K * n_out);
        MatMap<S>(gcol_.data(), static_cast<Eigen::Index>(ic * K), static_cast<Eigen::Index>(n_out)).noalias() =
            w.transpose() * gy;
        col2im_add(gcol_.data(), ic, g, gx);
      }
    }
  }

  std::vector<Tensor<S>*> parameters() override { return {&weight_, &bias_}; }

 private:
  static bool is_pointwise(const PatchGeometry& g) {
    return g.kernel.volume() == 1 && g.stride == Grid3{1, 1, 1} && g.pad == Grid3{0, 0, 0};
  }
  const S* lowered(const S* x, const PatchGeometry& g) {
    if (is_pointwise(g)) return x;
    col_.resize(spec_.in_channels * g.kernel.volume() * g.small.volume());
    im2col(x, spec_.in_channels, g, col_.data());
    return col_.data();
  }

  LayerSpec spec_;
  Tensor<S> weight_;
  Tensor<S> bias_;
  AlignedVector<S> col_, gcol_;
};

/// Transposed convolution: the adjoint of a strided convolution. With "same"
/// semantics the output is input * stride per axis.
template <typename S>
class TransposedConvLayer final : public Layer<S> {
 public:
  TransposedConvLayer(const LayerSpec& spec, std::uint64_t seed)
      : spec_(spec),
        weight_({spec.in_channels, spec.out_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                he_init<S>({spec.in_channels, spec.out_channels, spec.kernel.d, spec.kernel.h, spec.kernel.w},
                           effective_fan_in(spec), seed)),
        bias_({spec.out_channels}, true) {
    weight_.enable_grad();
  }

  /// Inputs contributing to one output voxel: in_channels * prod(ceil(k / s)).
  static std::size_t effective_fan_in(const LayerSpec& s) {
    std::size_t f = s.in_channels;
    for (std::size_t a = 0; a < 3; ++a) f *= (s.kernel[a] + s.stride[a] - 1) / s.stride[a];
    return f;
  }

  PatchGeometry geometry(const Shape& in) const {
    const Grid3 g = spatial_grid(in);
    PatchGeometry pg{{}, g, spec_.kernel, spec_.stride, {0, 0, 0}};
    for (std::size_t a = 0; a < 3; ++a) {
      const std::size_t n = g[a], k = spec_.kernel[a], s = spec_.stride[a];
      if (spec_.same_padding) {
        pg.big[a] = n * s;
        pg.pad[a] = k > s ? (k - s) / 2 : 0;
      } else {
        pg.big[a] = (n - 1) * s + k;
      }
    }
    return pg;
  }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "transposed conv");
    if (in[0].size() != 5 || in[0][1] != spec_.in_channels)
      throw ShapeError("transposed conv: input " + shape_string(in[0]) + " does not match weight " +
                       shape_string(weight_.dims()));
    const auto g = geometry(in[0]).big;
    return {in[0][0], spec_.out_channels, g.d, g.h, g.w};
  }

  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto& x = *in[0];
    const auto g = geometry(x.dims());
    const std::size_t ic = spec_.in_channels, oc = spec_.out_channels, K = spec_.kernel.volume();
    const std::size_t n_in = g.small.volume(), n_out = g.big.volume();
    ConstMatMap<S> w(weight_.data(), static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(oc * K));
    col_.resize(oc * K * n_in);
    std::fill(out.values().begin(), out.values().end(), S(0));
    for (std::size_t n = 0; n < x.batch(); ++n) {
      MatMap<S>(col_.data(), static_cast<Eigen::Index>(oc * K), static_cast<Eigen::Index>(n_in)).noalias() =
          w.transpose() * ConstMatMap<S>(x.data() + n * ic * n_in, static_cast<Eigen::Index>(ic),
                                         static_cast<Eigen::Index>(n_in));
      S* y = out.data() + n * oc * n_out;
      col2im_add(col_.data(), oc, g, y);
      for (std::size_t o = 0; o < oc; ++o) {
        S* ch = y + o * n_out;
        for (std::size_t i = 0; i < n_out; ++i) ch[i] += bias_[o];
      }
    }
  }

  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    auto& x = *in[0];
    const auto g = geometry(x.dims());
    const std::size_t ic = spec_.in_channels, oc = spec_.out_channels, K = spec_.kernel.volume();
    const std::size_t n_in = g.small.volume(), n_out = g.big.volume();
    ConstMatMap<S> w(weight_.data(), static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(oc * K));
    MatMap<S> gw(weight_.grad().data(), static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(oc * K));
    col_.resize(oc * K * n_in);
    for (std::size_t n = 0; n < x.batch(); ++n) {
      const S* gy = out.grad().data() + n * oc * n_out;
      for (std::size_t o = 0; o < oc; ++o) {
        S acc = 0;
        for (std::size_t i = 0; i < n_out; ++i) acc += gy[o * n_out + i];
        bias_.grad()[o] += acc;
      }
      im2col(gy, oc, g, col_.data());
      ConstMatMap<S> gcol(col_.data(), static_cast<Eigen::Index>(oc * K), static_cast<Eigen::Index>(n_in));
      ConstMatMap<S> xm(x.data() + n * ic * n_in, static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(n_in));
      gw.noalias() += xm * gcol.transpose();
      if (need_input_grad)
        MatMap<S>(x.grad().data() + n * ic * n_in, static_cast<Eigen::Index>(ic), static_cast<Eigen::Index>(n_in))
            .noalias() += w * gcol;
    }
  }

  std::vector<Tensor<S>*> parameters() override { return {&weight_, &bias_}; }

 private:
  LayerSpec spec_;
  Tensor<S> weight_;
  Tensor<S> bias_;
  AlignedVector<S> col_;
};

// ---------------------------------------------------------------------------

template <typename S>
class ReluLayer final : public Layer<S> {
 public:
  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "relu");
    return in[0];
  }
  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto x = in[0]->values();
    auto y = out.values();
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > S(0) ? x[i] : S(0);
  }
  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    const auto x = in[0]->values();
    auto gx = in[0]->grad();
    const auto gy = out.grad();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > S(0)) gx[i] += gy[i];
  }
};

template <typename S>
class SigmoidLayer final : public Layer<S> {
 public:
  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "sigmoid");
    return in[0];
  }
  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto x = in[0]->values();
    auto y = out.values();
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i] >= S(0)) {
        y[i] = S(1) / (S(1) + std::exp(-x[i]));
      } else {
        const S e = std::exp(x[i]);
        y[i] = e / (S(1) + e);
      }
    }
  }
  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto gx = in[0]->grad();
    const auto y = out.values();
    const auto gy = out.grad();
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] += gy[i] * y[i] * (S(1) - y[i]);
  }
};

/// Inverted dropout with a per-voxel mask: survivors are scaled by 1/(1-rate);
/// inference is the identity.
template <typename S>
class DropoutLayer final : public Layer<S> {
 public:
  DropoutLayer(double rate, std::size_t layer_index) : rate_(rate), index_(layer_index) {
    if (!(rate >= 0.0 && rate < 1.0)) throw DomainError("dropout rate must be in [0, 1)");
  }

  /// Keeps reusing the current mask (finite-difference checks need a fixed mask).
  void freeze_mask(bool frozen) { frozen_ = frozen; }

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "dropout");
    return in[0];
  }
  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext& ctx) override {
    const auto x = in[0]->values();
    auto y = out.values();
    active_ = ctx.training && rate_ > 0.0;
    if (!active_) {
      std::copy(x.begin(), x.end(), y.begin());
      return;
    }
    if (!frozen_ || mask_.size() != x.size()) {
      mask_.resize(x.size());
      SplitMix64 rng(derive_seed(ctx.seed, {index_}));
      const S keep = S(1) / S(1.0 - rate_);
      for (auto& m : mask_) m = rng.uniform() < rate_ ? S(0) : keep;
    }
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask_[i];
  }
  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto gx = in[0]->grad();
    const auto gy = out.grad();
    if (!active_) {
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
      return;
    }
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * mask_[i];
  }

 private:
  double rate_;
  std::size_t index_;
  bool frozen_ = false;
  bool active_ = false;
  std::vector<S> mask_;
};

/// Non-overlapping max pooling (stride == window). Gradient goes to the first
/// maximal element in window scan order.
template <typename S>
class MaxPoolLayer final : public Layer<S> {
 public:
  explicit MaxPoolLayer(Grid3 window) : window_(window) {}

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "maxpool");
    const Grid3 g = spatial_grid(in[0]);
    for (std::size_t a = 0; a < 3; ++a)
      if (g[a] % window_[a] != 0)
        throw ContractError("maxpool: spatial dim " + std::to_string(g[a]) + " not divisible by window " +
                            std::to_string(window_[a]) + " (pad upstream)");
    return {in[0][0], in[0][1], g.d / window_.d, g.h / window_.h, g.w / window_.w};
  }

  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto& x = *in[0];
    const Grid3 gi = spatial_grid(x.dims()), go = spatial_grid(out.dims());
    argmax_.resize(out.size());
    const std::size_t planes = x.batch() * x.channels();
    for (std::size_t p = 0; p < planes; ++p) {
      const S* src = x.data() + p * gi.volume();
      const std::size_t obase = p * go.volume();
      for (std::size_t od = 0; od < go.d; ++od)
        for (std::size_t oh = 0; oh < go.h; ++oh)
          for (std::size_t ow = 0; ow < go.w; ++ow) {
            std::size_t best = 0;
            S best_v = -std::numeric_limits<S>::infinity();
            bool first = true;
            for (std::size_t a = 0; a < window_.d; ++a)
              for (std::size_t b = 0; b < window_.h; ++b)
                for (std::size_t c = 0; c < window_.w; ++c) {
                  const std::size_t idx =
                      ((od * window_.d + a) * gi.h + (oh * window_.h + b)) * gi.w + (ow * window_.w + c);
                  if (first || src[idx] > best_v) {
                    best_v = src[idx];
                    best = idx;
                    first = false;
                  }
                }
            const std::size_t o = obase + (od * go.h + oh) * go.w + ow;
            out[o] = best_v;
            argmax_[o] = p * gi.volume() + best;
          }
    }
  }

  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto gx = in[0]->grad();
    const auto gy = out.grad();
    for (std::size_t o = 0; o < gy.size(); ++o) gx[argmax_[o]] += gy[o];
  }

 private:
  Grid3 window_;
  std::vector<std::size_t> argmax_;
};

/// Nearest-neighbour upsampling by an integer factor per axis.
template <typename S>
class UpsampleLayer final : public Layer<S> {
 public:
  explicit UpsampleLayer(Grid3 factor) : factor_(factor) {}

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "upsample");
    const Grid3 g = spatial_grid(in[0]);
    return {in[0][0], in[0][1], g.d * factor_.d, g.h * factor_.h, g.w * factor_.w};
  }
  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto& x = *in[0];
    const Grid3 gi = spatial_grid(x.dims()), go = spatial_grid(out.dims());
    const std::size_t planes = x.batch() * x.channels();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t d = 0; d < go.d; ++d)
        for (std::size_t h = 0; h < go.h; ++h) {
          const S* src = x.data() + p * gi.volume() + ((d / factor_.d) * gi.h + h / factor_.h) * gi.w;
          S* dst = out.data() + p * go.volume() + (d * go.h + h) * go.w;
          for (std::size_t w = 0; w < go.w; ++w) dst[w] = src[w / factor_.w];
        }
  }
  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto& x = *in[0];
    const Grid3 gi = spatial_grid(x.dims()), go = spatial_grid(out.dims());
    const std::size_t planes = x.batch() * x.channels();
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t d = 0; d < go.d; ++d)
        for (std::size_t h = 0; h < go.h; ++h) {
          S* dst = x.grad().data() + p * gi.volume() + ((d / factor_.d) * gi.h + h / factor_.h) * gi.w;
          const S* src = out.grad().data() + p * go.volume() + (d * go.h + h) * go.w;
          for (std::size_t w = 0; w < go.w; ++w) dst[w / factor_.w] += src[w];
        }
  }

 private:
  Grid3 factor_;
};

/// Channel concatenation [previous, source].
template <typename S>
class ConcatLayer final : public Layer<S> {
 public:
  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 2, "concat");
    const auto& a = in[0];
    const auto& b = in[1];
    if (a.size() != 5 || b.size() != 5 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3] || a[4] != b[4])
      throw ShapeError("concat: incompatible shapes " + shape_string(a) + " and " + shape_string(b));
    return {a[0], a[1] + b[1], a[2], a[3], a[4]};
  }
  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext&) override {
    const auto& a = *in[0];
    const auto& b = *in[1];
    const std::size_t na = a.channels() * a.spatial_size(), nb = b.channels() * b.spatial_size();
    for (std::size_t n = 0; n < a.batch(); ++n) {
      S* dst = out.data() + n * (na + nb);
      std::copy_n(a.data() + n * na, na, dst);
      std::copy_n(b.data() + n * nb, nb, dst + na);
    }
  }
  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto& a = *in[0];
    auto& b = *in[1];
    const std::size_t na = a.channels() * a.spatial_size(), nb = b.channels() * b.spatial_size();
    for (std::size_t n = 0; n < a.batch(); ++n) {
      const S* src = out.grad().data() + n * (na + nb);
      S* ga = a.grad().data() + n * na;
      S* gb = b.grad().data() + n * nb;
      for (std::size_t i = 0; i < na; ++i) ga[i] += src[i];
      for (std::size_t i = 0; i < nb; ++i) gb[i] += src[na + i];
    }
  }
};

/// Batch normalization without a learnable affine transform. Training mode
/// normalizes with per-channel batch statistics over (N, spatial) and updates
/// running estimates; inference mode uses the running estimates.
template <typename S>
class BatchNormLayer final : public Layer<S> {
 public:
  explicit BatchNormLayer(const LayerSpec& spec)
      : channels_(spec.in_channels),
        eps_(spec.epsilon),
        momentum_(spec.momentum),
        running_mean_({spec.in_channels}),
        running_var_({spec.in_channels}, std::vector<S>(spec.in_channels, S(1))) {}

  Shape output_shape(std::span<const Shape> in) const override {
    detail::require_inputs(in, 1, "batchnorm");
    if (in[0].size() != 5 || in[0][1] != channels_)
      throw ShapeError("batchnorm: input " + shape_string(in[0]) + " has wrong channel count");
    return in[0];
  }

  void forward(std::span<const Tensor<S>* const> in, Tensor<S>& out, const ForwardContext& ctx) override {
    const auto& x = *in[0];
    const std::size_t N = x.batch(), C = channels_, V = x.spatial_size();
    training_ = ctx.training;
    inv_std_.assign(C, S(0));
    for (std::size_t c = 0; c < C; ++c) {
      double mean, var;
      if (training_) {
        double sum = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const S* p = x.data() + (n * C + c) * V;
          for (std::size_t i = 0; i < V; ++i) sum += p[i];
        }
        mean = sum / static_cast<double>(N * V);
        double ss = 0;
        for (std::size_t n = 0; n < N; ++n) {
          const S* p = x.data() + (n * C + c) * V;
          for (std::size_t i = 0; i < V; ++i) ss += (p[i] - mean) * (p[i] - mean);
        }
        var = ss / static_cast<double>(N * V);
        running_mean_[c] = static_cast<S>(momentum_ * running_mean_[c] + (1.0 - momentum_) * mean);
        running_var_[c] = static_cast<S>(momentum_ * running_var_[c] + (1.0 - momentum_) * var);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const S inv = static_cast<S>(1.0 / std::sqrt(var + eps_));
      const S m = static_cast<S>(mean);
      inv_std_[c] = inv;
      for (std::size_t n = 0; n < N; ++n) {
        const S* p = x.data() + (n * C + c) * V;
        S* q = out.data() + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) q[i] = (p[i] - m) * inv;
      }
    }
  }

  void backward(std::span<Tensor<S>* const> in, const Tensor<S>& out, bool need_input_grad) override {
    if (!need_input_grad) return;
    auto& x = *in[0];
    const std::size_t N = x.batch(), C = channels_, V = x.spatial_size();
    for (std::size_t c = 0; c < C; ++c) {
      const S inv = inv_std_[c];
      if (!training_) {
        for (std::size_t n = 0; n < N; ++n) {
          const S* gy = out.grad().data() + (n * C + c) * V;
          S* gx = x.grad().data() + (n * C + c) * V;
          for (std::size_t i = 0; i < V; ++i) gx[i] += gy[i] * inv;
        }
        continue;
      }
      // out holds xhat
      double sum_g = 0, sum_gx = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const S* gy = out.grad().data() + (n * C + c) * V;
        const S* xh = out.data() + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) {
          sum_g += gy[i];
          sum_gx += static_cast<double>(gy[i]) * xh[i];
        }
      }
      const S mg = static_cast<S>(sum_g / static_cast<double>(N * V));
      const S mgx = static_cast<S>(sum_gx / static_cast<double>(N * V));
      for (std::size_t n = 0; n < N; ++n) {
        const S* gy = out.grad().data() + (n * C + c) * V;
        const S* xh = out.data() + (n * C + c) * V;
        S* gx = x.grad().data() + (n * C + c) * V;
        for (std::size_t i = 0; i < V; ++i) gx[i] += inv * (gy[i] - mg - xh[i] * mgx);
      }
    }
  }

  std::vector<Tensor<S>*> buffers() override { return {&running_mean_, &running_var_}; }

 private:
  std::size_t channels_;
  double eps_, momentum_;
  Tensor<S> running_mean_, running_var_;
  std::vector<S> inv_std_;
  bool training_ = false;
};

template <typename S>
std::unique_ptr<Layer<S>> make_layer(const LayerSpec& spec, std::size_t index, std::uint64_t seed) {
  const auto layer_seed = derive_seed(seed, {index});
  switch (spec.kind) {
    case LayerKind::conv: return std::make_unique<ConvLayer<S>>(spec, layer_seed);
    case LayerKind::tconv: return std::make_unique<TransposedConvLayer<S>>(spec, layer_seed);
    case LayerKind::relu: return std::make_unique<ReluLayer<S>>();
    case LayerKind::sigmoid: return std::make_unique<SigmoidLayer<S>>();
    case LayerKind::dropout: return std::make_unique<DropoutLayer<S>>(spec.rate, index);
    case LayerKind::maxpool: return std::make_unique<MaxPoolLayer<S>>(spec.window);
    case LayerKind::upsample: return std::make_unique<UpsampleLayer<S>>(spec.window);
    case LayerKind::concat: return std::make_unique<ConcatLayer<S>>();
    case LayerKind::batchnorm: return std::make_unique<BatchNormLayer<S>>(spec);
  }
  throw ContractError("unknown layer kind");
}

}  // namespace ivdseg::nn
