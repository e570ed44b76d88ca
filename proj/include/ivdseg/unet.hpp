#pragma once

// U-Net builders, parameter accounting and the training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/nn/adam.hpp"
#include "ivdseg/nn/loss.hpp"
#include "ivdseg/nn/network.hpp"
#include "ivdseg/rng.hpp"

namespace ivdseg {

using nn::Grid3;
using nn::LayerKind;
using nn::LayerSpec;
using nn::NetworkSpec;

namespace detail {

class SpecBuilder {
 public:
  explicit SpecBuilder(NetworkSpec& s) : s_(s) {}
  std::size_t add(LayerSpec l) {
    s_.layers.push_back(l);
    return s_.layers.size() - 1;
  }
  /// conv + relu; returns the relu index.
  std::size_t conv_relu(Grid3 k, std::size_t in, std::size_t out) {
    add(LayerSpec::conv(k, in, out));
    return add(LayerSpec::simple(LayerKind::relu));
  }

 private:
  NetworkSpec& s_;
};

}  // namespace detail

/// 3D U-Net: three resolution levels (base, 2 base, 4 base channels), two
/// 3x3x3 same-padded conv+ReLU per level with dropout between them, 2x2x2 max
/// pooling, 2x2x2 stride-2 transposed convs halving channels, skip concatenation,
/// a batchnorm and a 1x1x1 sigmoid conv to one channel.
inline NetworkSpec build_unet3d(std::size_t in_channels = 3, std::size_t base = 32, double dropout = 0.2) {
  if (in_channels < 1 || in_channels > 4) throw ContractError("build_unet3d: in_channels must be in [1, 4]");
  if (base == 0) throw ContractError("build_unet3d: base must be positive");
  NetworkSpec s;
  s.dims = 3;
  s.in_channels = in_channels;
  s.base_channels = base;
  s.depth = 3;
  detail::SpecBuilder b(s);
  const Grid3 k3{3, 3, 3}, two{2, 2, 2};
  std::vector<std::size_t> skips;
  std::size_t c = in_channels;
  for (std::size_t level = 0; level < 3; ++level) {
    const std::size_t out = base << level;
    b.conv_relu(k3, c, out);
    b.add(LayerSpec::dropout(dropout));
    const auto last = b.conv_relu(k3, out, out);
    c = out;
    if (level < 2) {
      skips.push_back(last);
      b.add(LayerSpec::maxpool(two));
    }
  }
  for (std::size_t level = 2; level-- > 0;) {
    const std::size_t out = base << level;
    b.add(LayerSpec::tconv(two, c, out, two));
    b.add(LayerSpec::concat(skips[level]));
    b.conv_relu(k3, 2 * out, out);
    b.add(LayerSpec::dropout(dropout));
    b.conv_relu(k3, out, out);
    c = out;
  }
  b.add(LayerSpec::batchnorm(c));
  b.add(LayerSpec::conv({1, 1, 1}, c, 1));
  b.add(LayerSpec::simple(LayerKind::sigmoid));
  return s;
}

/// 2D U-Net on (1, H, W) slices: four encoder blocks (base .. 8 base), a 16 base
/// bottleneck, 2x2 pooling, 3x3 stride-2 transposed convs, skip concatenation
/// and a 1x1 sigmoid conv. Inputs must be multiples of 16 in-plane.
inline NetworkSpec build_unet2d(std::size_t in_channels, std::size_t base = 64) {
  if (in_channels < 1) throw ContractError("build_unet2d: in_channels must be >= 1");
  if (base == 0) throw ContractError("build_unet2d: base must be positive");
  NetworkSpec s;
  s.dims = 2;
  s.in_channels = in_channels;
  s.base_channels = base;
  s.depth = 5;
  detail::SpecBuilder b(s);
  const Grid3 k3{1, 3, 3}, pool{1, 2, 2};
  std::vector<std::size_t> skips;
  std::size_t c = in_channels;
  for (std::size_t level = 0; level < 5; ++level) {
    const std::size_t out = base << level;
    b.conv_relu(k3, c, out);
    const auto last = b.conv_relu(k3, out, out);
    c = out;
    if (level < 4) {
      skips.push_back(last);
      b.add(LayerSpec::maxpool(pool));
    }
  }
  for (std::size_t level = 4; level-- > 0;) {
    const std::size_t out = base << level;
    b.add(LayerSpec::tconv(k3, c, out, pool));
    b.add(LayerSpec::concat(skips[level]));
    b.conv_relu(k3, 2 * out, out);
    b.conv_relu(k3, out, out);
    c = out;
  }
  b.add(LayerSpec::conv({1, 1, 1}, c, 1));
  b.add(LayerSpec::simple(LayerKind::sigmoid));
  return s;
}

/// Segmentation-network invariants on top of nn::validate: one output channel
/// behind a final sigmoid.
inline void validate_segmentation_net(const NetworkSpec& s) {
  if (nn::validate(s) != 1) throw ContractError("segmentation network must output one channel");
  if (s.layers.back().kind != LayerKind::sigmoid) throw ContractError("segmentation network must end in a sigmoid");
}

/// Trainable scalars: conv and transposed-conv weights plus biases.
inline std::size_t param_count(const NetworkSpec& s) {
  std::size_t n = 0;
  for (const auto& l : s.layers)
    if (l.kind == LayerKind::conv || l.kind == LayerKind::tconv)
      n += l.in_channels * l.out_channels * l.kernel.volume() + l.out_channels;
  return n;
}

template <typename S>
std::size_t param_count(nn::Network<S>& net) {
  return net.param_count();
}

// ---------------------------------------------------------------------------
// Training

/// One training pair: input (1, C, D, H, W) and binary target (1, 1, D, H, W).
struct Example {
  nn::Tensor<float> input;
  nn::Tensor<float> target;
};

struct TrainConfig {
  double lr = 1e-5;
  std::size_t batch_size = 1;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double dropout = 0.2;
  double smooth = 1.0;
  std::uint64_t seed = 0;
  bool reproducible = true;
  std::filesystem::path checkpoint_prefix;  // empty: no checkpoint files
  bool resume = false;                      // continue from <prefix>.last.mck when present

  void validate() const {
    if (batch_size < 1) throw ContractError("batch_size must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ContractError("lr must be > 0");
    if (!(smooth >= 0.0)) throw ContractError("smoothing must be >= 0");
  }
};

struct EpochLoss {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = 0.0;
  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

struct FitResult {
  std::vector<EpochLoss> history;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  bool stopped_early = false;
};

inline std::string history_csv(const std::vector<EpochLoss>& h) {
  std::string out = "epoch,train_loss,val_loss\n";
  char buf[96];
  for (const auto& e : h) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", e.epoch, e.train_loss, e.val_loss);
    out += buf;
  }
  return out;
}

/// Holds out the trailing round(n * fraction) examples (at least one, at most n - 1).
inline std::pair<std::vector<Example>, std::vector<Example>> split_validation(std::vector<Example> all,
                                                                              double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("validation split must be in (0, 1)");
  if (all.size() < 2) throw ContractError("need at least two examples to split off validation data");
  auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(all.size()) * fraction));
  n_val = std::clamp<std::size_t>(n_val, 1, all.size() - 1);
  std::vector<Example> val(std::make_move_iterator(all.end() - static_cast<std::ptrdiff_t>(n_val)),
                           std::make_move_iterator(all.end()));
  all.resize(all.size() - n_val);
  return {std::move(all), std::move(val)};
}

namespace detail {

inline nn::Tensor<float> stack_batch(const std::vector<Example>& data, const std::vector<std::size_t>& idx,
                                     bool targets) {
  const auto& first = targets ? data[idx[0]].target : data[idx[0]].input;
  nn::Shape shape = first.dims();
  shape[0] = idx.size();
  nn::Tensor<float> out(shape);
  const std::size_t per = first.size();
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& t = targets ? data[idx[k]].target : data[idx[k]].input;
    if (t.dims() != first.dims())
      throw ContractError("examples in one batch must share a shape: " + nn::shape_string(t.dims()) + " vs " +
                          nn::shape_string(first.dims()));
    std::copy(t.values().begin(), t.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(k * per));
  }
  return out;
}

inline std::string hexfloat(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::size_t stale = 0;
  std::vector<EpochLoss> history;

  std::string encode() const {
    std::string s = "epoch=" + std::to_string(epoch) + "\nbest_epoch=" + std::to_string(best_epoch) +
                    "\nbest_val=" + hexfloat(best_val) + "\nstale=" + std::to_string(stale) + "\nhistory=";
    for (const auto& e : history)
      s += std::to_string(e.epoch) + ":" + hexfloat(e.train_loss) + ":" + hexfloat(e.val_loss) + ";";
    return s + "\n";
  }

  static TrainState decode(const std::string& text) {
    TrainState st;
    std::istringstream in(text);
    std::string line;
    bool seen_epoch = false;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const auto key = line.substr(0, eq), val = line.substr(eq + 1);
      if (key == "epoch") {
        st.epoch = std::stoul(val);
        seen_epoch = true;
      } else if (key == "best_epoch") {
        st.best_epoch = std::stoul(val);
      } else if (key == "best_val") {
        st.best_val = std::strtod(val.c_str(), nullptr);
      } else if (key == "stale") {
        st.stale = std::stoul(val);
      } else if (key == "history") {
        std::istringstream items(val);
        std::string item;
        while (std::getline(items, item, ';')) {
          if (item.empty()) continue;
          const auto a = item.find(':'), b = item.find(':', a + 1);
          if (a == std::string::npos || b == std::string::npos) throw FormatError("extra", "bad history entry");
          st.history.push_back({std::stoul(item.substr(0, a)), std::strtod(item.substr(a + 1, b - a - 1).c_str(), nullptr),
                                std::strtod(item.substr(b + 1).c_str(), nullptr)});
        }
      }
    }
    if (!seen_epoch) throw FormatError("extra", "checkpoint carries no training state");
    return st;
  }
};

inline std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  auto p = prefix;
  p += suffix;
  return p;
}

}  // namespace detail

inline std::filesystem::path best_checkpoint_path(const std::filesystem::path& prefix) {
  return detail::with_suffix(prefix, ".best.mck");
}
inline std::filesystem::path last_checkpoint_path(const std::filesystem::path& prefix) {
  return detail::with_suffix(prefix, ".last.mck");
}

/// Mean Dice loss over examples, one forward pass each, inference mode.
inline double evaluate_loss(nn::Network<float>& net, const std::vector<Example>& data, double smooth = 1.0) {
  if (data.empty()) throw ContractError("evaluate_loss: no examples");
  double total = 0;
  for (const auto& ex : data) {
    const auto& y = net.forward(ex.input, {false, 0});
    total += nn::dice_loss<float>(y.values(), ex.target.values(), smooth).coefficient;
  }
  return total / static_cast<double>(data.size());
}

/// Minimizes 1 - Dice with Adam. Validation loss drives early stopping: the run
/// stops once `patience` consecutive epochs fail to improve on the best value.
/// The network holds the best-validation weights on return.
/// `on_epoch` (optional) observes each finished epoch.
inline FitResult fit(nn::Network<float>& net, const std::vector<Example>& train, const std::vector<Example>& val,
                     const TrainConfig& cfg, const std::function<void(const EpochLoss&)>& on_epoch = {}) {
  cfg.validate();
  validate_segmentation_net(net.spec());
  if (train.empty()) throw ContractError("fit: training set is empty");
  if (val.empty()) throw ContractError("fit: validation set is empty");

  nn::AdamState<float> adam;
  adam.lr = cfg.lr;
  detail::TrainState st;
  st.best_val = std::numeric_limits<double>::infinity();
  std::vector<std::vector<float>> best_params, best_buffers;
  const bool files = !cfg.checkpoint_prefix.empty();

  if (files && cfg.resume && std::filesystem::exists(last_checkpoint_path(cfg.checkpoint_prefix))) {
    const auto last = nn::load_checkpoint(last_checkpoint_path(cfg.checkpoint_prefix));
    nn::load_weights(net, last);
    if (!last.adam) throw FormatError("adam", "last checkpoint has no optimizer state");
    adam = *last.adam;
    adam.lr = cfg.lr;
    st = detail::TrainState::decode(last.extra);
    if (std::filesystem::exists(best_checkpoint_path(cfg.checkpoint_prefix))) {
      const auto best = nn::load_checkpoint(best_checkpoint_path(cfg.checkpoint_prefix));
      best_params = best.params;
      best_buffers = best.buffers;
    }
  }

  FitResult res;
  std::vector<std::size_t> order(train.size());
  while (st.epoch < cfg.max_epochs && !(st.epoch > 0 && st.stale > cfg.patience)) {
    const std::size_t epoch = st.epoch + 1;
    std::iota(order.begin(), order.end(), std::size_t{0});
    SplitMix64 shuffle_rng(derive_seed(cfg.seed, {epoch, 0}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double train_total = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++batches) {
      const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(
                                                             std::min(order.size(), start + cfg.batch_size)));
      const auto x = detail::stack_batch(train, idx, false);
      const auto t = detail::stack_batch(train, idx, true);
      net.zero_grad();
      const auto& y = net.forward(x, {true, derive_seed(cfg.seed, {epoch, 1, batches})});
      const auto loss = nn::dice_loss<float>(y.values(), t.values(), cfg.smooth);
      if (!std::isfinite(loss.coefficient))
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches));
      net.backward(loss.grad);
      try {
        nn::adam_step(net.parameters(), adam);
      } catch (const OptimizerError& e) {
        throw TrainingError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", batch " +
                            std::to_string(batches));
      }
      train_total += loss.coefficient;
    }
    const double val_loss = evaluate_loss(net, val, cfg.smooth);
    if (!std::isfinite(val_loss)) throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    const EpochLoss row{epoch, train_total / static_cast<double>(batches), val_loss};
    st.history.push_back(row);
    st.epoch = epoch;
    const bool improved = val_loss < st.best_val;
    if (improved) {
      st.best_val = val_loss;
      st.best_epoch = epoch;
      st.stale = 0;
      best_params = nn::detail::snapshot(net.parameters());
      best_buffers = nn::detail::snapshot(net.buffers());
    } else {
      ++st.stale;
    }
    if (files) {
      if (improved) nn::save_checkpoint(best_checkpoint_path(cfg.checkpoint_prefix), nn::make_checkpoint(net, nullptr, st.encode()));
      nn::save_checkpoint(last_checkpoint_path(cfg.checkpoint_prefix), nn::make_checkpoint(net, &adam, st.encode()));
    }
    if (on_epoch) on_epoch(row);
  }

  if (!best_params.empty()) {
    nn::detail::restore(net.parameters(), best_params, "params");
    nn::detail::restore(net.buffers(), best_buffers, "buffers");
  }
  net.release_activations();
  res.history = st.history;
  res.best_epoch = st.best_epoch;
  res.best_val = st.best_val;
  res.stopped_early = st.stale > cfg.patience && st.epoch < cfg.max_epochs;
  return res;
}

}  // namespace ivdseg
