#pragma once

// Sequential network with skip wiring, its text description, and the MCK1
// checkpoint format:
//   "MCK1" | u32 len | spec text
//   | u32 n | n x (u64 count | f32[count])        trainable parameters
//   | u32 n | n x (u64 count | f32[count])        buffers (batchnorm running stats)
//   | u8 has_adam [| u64 t | f64 lr b1 b2 eps | m arrays | v arrays]
//   | u32 len | extra text (key=value lines)
// Little-endian throughout.

#include <bit>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/error.hpp"
#include "ivdseg/nn/adam.hpp"
#include "ivdseg/nn/layers.hpp"
#include "ivdseg/volume_io.hpp"

namespace ivdseg::nn {

struct NetworkSpec {
  int dims = 3;  // 2 or 3
  std::size_t in_channels = 1;
  std::size_t base_channels = 0;
  std::size_t depth = 0;
  std::vector<LayerSpec> layers;

  friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

namespace detail {

using ivdseg::detail::get_f32;
using ivdseg::detail::get_u32;
using ivdseg::detail::put_f32;
using ivdseg::detail::put_u32;

inline const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::dropout: return "dropout";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::tconv: return "tconv";
    case LayerKind::concat: return "concat";
    case LayerKind::batchnorm: return "batchnorm";
  }
  return "?";
}

inline std::string grid_text(Grid3 g) {
  return std::to_string(g.d) + "x" + std::to_string(g.h) + "x" + std::to_string(g.w);
}

inline Grid3 parse_grid(const std::string& s) {
  Grid3 g;
  char x1 = 0, x2 = 0;
  std::istringstream in(s);
  if (!(in >> g.d >> x1 >> g.h >> x2 >> g.w) || x1 != 'x' || x2 != 'x' || g.volume() == 0)
    throw FormatError("spec", "bad grid '" + s + "'");
  return g;
}

inline std::string double_text(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace detail

inline std::string to_text(const NetworkSpec& spec) {
  std::ostringstream out;
  out << "network dims=" << spec.dims << " in_channels=" << spec.in_channels << " base=" << spec.base_channels
      << " depth=" << spec.depth << "\n";
  for (const auto& l : spec.layers) {
    out << detail::kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::tconv:
        out << " kernel=" << detail::grid_text(l.kernel) << " in=" << l.in_channels << " out=" << l.out_channels
            << " stride=" << detail::grid_text(l.stride) << " same=" << (l.same_padding ? 1 : 0);
        break;
      case LayerKind::dropout: out << " rate=" << detail::double_text(l.rate); break;
      case LayerKind::maxpool: out << " window=" << detail::grid_text(l.window); break;
      case LayerKind::upsample: out << " factor=" << detail::grid_text(l.window); break;
      case LayerKind::concat: out << " src=" << l.source; break;
      case LayerKind::batchnorm:
        out << " channels=" << l.in_channels << " eps=" << detail::double_text(l.epsilon)
            << " momentum=" << detail::double_text(l.momentum);
        break;
      default: break;
    }
    out << "\n";
  }
  return out.str();
}

inline NetworkSpec spec_from_text(const std::string& text) {
  NetworkSpec spec;
  std::istringstream lines(text);
  std::string line;
  bool header = false;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream words(line);
    std::string head, kv;
    words >> head;
    std::vector<std::pair<std::string, std::string>> fields;
    while (words >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw FormatError("spec", "expected key=value, got '" + kv + "'");
      fields.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    }
    auto get = [&](const std::string& key) -> const std::string& {
      for (const auto& [k, v] : fields)
        if (k == key) return v;
      throw FormatError("spec", "'" + head + "' missing field '" + key + "'");
    };
    auto num = [&](const std::string& key) -> std::size_t {
      try {
        return static_cast<std::size_t>(std::stoull(get(key)));
      } catch (const std::logic_error&) {
        throw FormatError("spec", "bad integer for '" + key + "'");
      }
    };
    auto real = [&](const std::string& key) -> double {
      try {
        return std::stod(get(key));
      } catch (const std::logic_error&) {
        throw FormatError("spec", "bad number for '" + key + "'");
      }
    };
    if (!header) {
      if (head != "network") throw FormatError("spec", "missing 'network' header");
      spec.dims = static_cast<int>(num("dims"));
      spec.in_channels = num("in_channels");
      spec.base_channels = num("base");
      spec.depth = num("depth");
      header = true;
      continue;
    }
    LayerSpec l;
    if (head == "conv" || head == "tconv") {
      l = LayerSpec::conv(detail::parse_grid(get("kernel")), num("in"), num("out"), detail::parse_grid(get("stride")),
                          num("same") != 0);
      if (head == "tconv") l.kind = LayerKind::tconv;
    } else if (head == "relu") {
      l = LayerSpec::simple(LayerKind::relu);
    } else if (head == "sigmoid") {
      l = LayerSpec::simple(LayerKind::sigmoid);
    } else if (head == "dropout") {
      l = LayerSpec::dropout(real("rate"));
    } else if (head == "maxpool") {
      l = LayerSpec::maxpool(detail::parse_grid(get("window")));
    } else if (head == "upsample") {
      l = LayerSpec::upsample(detail::parse_grid(get("factor")));
    } else if (head == "concat") {
      l = LayerSpec::concat(num("src"));
    } else if (head == "batchnorm") {
      l = LayerSpec::batchnorm(num("channels"), real("eps"), real("momentum"));
    } else {
      throw FormatError("spec", "unknown layer '" + head + "'");
    }
    spec.layers.push_back(l);
  }
  if (!header) throw FormatError("spec", "empty network description");
  return spec;
}

/// Checks channel arithmetic and concat wiring; returns the output channel count.
inline std::size_t validate(const NetworkSpec& spec) {
  if (spec.dims != 2 && spec.dims != 3) throw ContractError("network dims must be 2 or 3");
  if (spec.in_channels == 0) throw ContractError("network needs at least one input channel");
  if (spec.layers.empty()) throw ContractError("network has no layers");
  std::vector<std::size_t> channels_after;
  std::size_t c = spec.in_channels;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + detail::kind_name(l.kind) + ")";
    switch (l.kind) {
      case LayerKind::conv:
      case LayerKind::tconv:
        if (l.in_channels != c)
          throw ContractError(where + ": expects " + std::to_string(l.in_channels) + " channels, receives " +
                              std::to_string(c));
        if (l.out_channels == 0 || l.kernel.volume() == 0 || l.stride.volume() == 0)
          throw ContractError(where + ": zero-sized kernel, stride or channel count");
        c = l.out_channels;
        break;
      case LayerKind::batchnorm:
        if (l.in_channels != c) throw ContractError(where + ": channel count mismatch");
        if (!(l.epsilon > 0.0) || !(l.momentum >= 0.0 && l.momentum <= 1.0))
          throw ContractError(where + ": epsilon must be > 0 and momentum in [0, 1]");
        break;
      case LayerKind::concat:
        if (l.source >= i) throw ContractError(where + ": concat source must be an earlier layer");
        c += channels_after[l.source];
        break;
      case LayerKind::dropout:
        if (!(l.rate >= 0.0 && l.rate < 1.0)) throw ContractError(where + ": dropout rate must be in [0, 1)");
        break;
      case LayerKind::maxpool:
      case LayerKind::upsample:
        if (l.window.volume() == 0) throw ContractError(where + ": zero window");
        break;
      default: break;
    }
    channels_after.push_back(c);
  }
  return c;
}

/// Product of pooling windows per axis: input spatial dims must be multiples of it.
inline Grid3 spatial_divisor(const NetworkSpec& spec) {
  Grid3 g{1, 1, 1};
  for (const auto& l : spec.layers)
    if (l.kind == LayerKind::maxpool)
      for (std::size_t a = 0; a < 3; ++a) g[a] *= l.window[a];
  return g;
}

template <typename S>
class Network {
 public:
  explicit Network(NetworkSpec spec, std::uint64_t seed = 0) : spec_(std::move(spec)) {
    validate(spec_);
    divisor_ = spatial_divisor(spec_);
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) layers_.push_back(make_layer<S>(spec_.layers[i], i, seed));
    acts_.resize(layers_.size());
  }

  const NetworkSpec& spec() const noexcept { return spec_; }
  std::size_t size() const noexcept { return layers_.size(); }
  Layer<S>& layer(std::size_t i) { return *layers_[i]; }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> out;
    for (auto& l : layers_)
      for (auto* p : l->parameters()) out.push_back(p);
    return out;
  }
  std::vector<Tensor<S>*> buffers() {
    std::vector<Tensor<S>*> out;
    for (auto& l : layers_)
      for (auto* p : l->buffers()) out.push_back(p);
    return out;
  }
  std::size_t param_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->size();
    return n;
  }
  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }
  void freeze_dropout(bool frozen) {
    for (auto& l : layers_)
      if (auto* d = dynamic_cast<DropoutLayer<S>*>(l.get())) d->freeze_mask(frozen);
  }

  Shape output_shape(const Shape& input) const {
    check_input(input);
    std::vector<Shape> shapes;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::vector<Shape> in{i == 0 ? input : shapes[i - 1]};
      if (spec_.layers[i].kind == LayerKind::concat) in.push_back(shapes[spec_.layers[i].source]);
      shapes.push_back(layers_[i]->output_shape(in));
    }
    return shapes.back();
  }

  /// Runs all layers; the returned reference stays valid until the next forward.
  const Tensor<S>& forward(const Tensor<S>& input, const ForwardContext& ctx = {}) {
    check_input(input.dims());
    input_ = input;
    input_.drop_grad();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      std::vector<const Tensor<S>*> in{i == 0 ? &input_ : &acts_[i - 1]};
      std::vector<Shape> shapes{in[0]->dims()};
      if (spec_.layers[i].kind == LayerKind::concat) {
        in.push_back(&acts_[spec_.layers[i].source]);
        shapes.push_back(in[1]->dims());
      }
      acts_[i].resize(layers_[i]->output_shape(shapes), false);
      layers_[i]->forward(in, acts_[i], ctx);
    }
    forwarded_ = true;
    return acts_.back();
  }

  /// Back-propagates dLoss/dOutput, accumulating into parameter grads (and
  /// into input_grad() when `want_input_grad`).
  void backward(std::span<const S> grad_output, bool want_input_grad = false) {
    if (!forwarded_) throw StateError("backward called without a preceding forward pass");
    if (grad_output.size() != acts_.back().size())
      throw ShapeError("backward: gradient has " + std::to_string(grad_output.size()) + " elements, output " +
                       shape_string(acts_.back().dims()));
    for (auto& a : acts_) {
      a.enable_grad();
      a.zero_grad();
    }
    if (want_input_grad) {
      input_.enable_grad();
      input_.zero_grad();
    }
    std::copy(grad_output.begin(), grad_output.end(), acts_.back().grad().begin());
    for (std::size_t i = layers_.size(); i-- > 0;) {
      std::vector<Tensor<S>*> in{i == 0 ? &input_ : &acts_[i - 1]};
      if (spec_.layers[i].kind == LayerKind::concat) in.push_back(&acts_[spec_.layers[i].source]);
      layers_[i]->backward(in, acts_[i], i > 0 || want_input_grad);
    }
  }

  std::span<const S> input_grad() const { return input_.grad(); }

  /// Releases cached activations (keeps parameters).
  void release_activations() {
    for (auto& a : acts_) a = Tensor<S>();
    input_ = Tensor<S>();
    forwarded_ = false;
  }

 private:
  void check_input(const Shape& s) const {
    if (s.size() != 5) throw ShapeError("network input must be (N,C,D,H,W), got " + shape_string(s));
    if (s[1] != spec_.in_channels)
      throw ShapeError("network expects " + std::to_string(spec_.in_channels) + " input channels, got " +
                       shape_string(s));
    for (std::size_t a = 0; a < 3; ++a)
      if (s[2 + a] % divisor_[a] != 0)
        throw ShapeError("network input spatial dims " + shape_string(s) + " must be multiples of " +
                         detail::grid_text(divisor_));
  }

  NetworkSpec spec_;
  Grid3 divisor_;
  std::vector<std::unique_ptr<Layer<S>>> layers_;
  std::vector<Tensor<S>> acts_;
  Tensor<S> input_;
  bool forwarded_ = false;
};

// ---------------------------------------------------------------------------
// Checkpoints

struct Checkpoint {
  NetworkSpec spec;
  std::vector<std::vector<float>> params, buffers;
  std::optional<AdamState<float>> adam;
  std::string extra;
};

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f64(std::vector<std::uint8_t>& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
inline void put_text(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}
inline void put_arrays(std::vector<std::uint8_t>& out, const std::vector<std::vector<float>>& arrays) {
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    put_u64(out, a.size());
    for (float f : a) put_f32(out, f);
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  const std::uint8_t* take(std::size_t n, const char* field) {
    if (n > b_.size() - pos_) throw FormatError(field, "truncated checkpoint");
    const auto* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8(const char* f) { return *take(1, f); }
  std::uint32_t u32(const char* f) { return get_u32(take(4, f)); }
  std::uint64_t u64(const char* f) {
    const auto* p = take(8, f);
    return static_cast<std::uint64_t>(get_u32(p)) | (static_cast<std::uint64_t>(get_u32(p + 4)) << 32);
  }
  double f64(const char* f) { return std::bit_cast<double>(u64(f)); }
  std::string text(const char* f) {
    const auto n = u32(f);
    const auto* p = take(n, f);
    return std::string(reinterpret_cast<const char*>(p), n);
  }
  std::vector<std::vector<float>> arrays(const char* f) {
    const auto n = u32(f);
    std::vector<std::vector<float>> out;
    for (std::uint32_t k = 0; k < n; ++k) {
      const auto count = u64(f);
      if (count > (b_.size() - pos_) / 4) throw FormatError(f, "truncated checkpoint");
      std::vector<float> a(count);
      for (auto& x : a) x = get_f32(take(4, f));
      out.push_back(std::move(a));
    }
    return out;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

inline std::vector<std::vector<float>> snapshot(const std::vector<Tensor<float>*>& ts) {
  std::vector<std::vector<float>> out;
  for (auto* t : ts) out.emplace_back(t->values().begin(), t->values().end());
  return out;
}

inline void restore(const std::vector<Tensor<float>*>& ts, const std::vector<std::vector<float>>& arrays,
                    const char* field) {
  if (ts.size() != arrays.size())
    throw FormatError(field, "expected " + std::to_string(ts.size()) + " arrays, found " +
                                 std::to_string(arrays.size()));
  for (std::size_t k = 0; k < ts.size(); ++k) {
    if (ts[k]->size() != arrays[k].size())
      throw FormatError(field, "array " + std::to_string(k) + " has wrong length");
    std::copy(arrays[k].begin(), arrays[k].end(), ts[k]->values().begin());
  }
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  std::vector<std::uint8_t> out{'M', 'C', 'K', '1'};
  detail::put_text(out, to_text(c.spec));
  detail::put_arrays(out, c.params);
  detail::put_arrays(out, c.buffers);
  out.push_back(c.adam ? 1 : 0);
  if (c.adam) {
    detail::put_u64(out, c.adam->t);
    detail::put_f64(out, c.adam->lr);
    detail::put_f64(out, c.adam->beta1);
    detail::put_f64(out, c.adam->beta2);
    detail::put_f64(out, c.adam->epsilon);
    detail::put_arrays(out, c.adam->m);
    detail::put_arrays(out, c.adam->v);
  }
  detail::put_text(out, c.extra);
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  detail::Reader r(bytes);
  const auto* magic = r.take(4, "magic");
  if (std::string(reinterpret_cast<const char*>(magic), 4) != "MCK1") throw FormatError("magic", "not an MCK1 file");
  Checkpoint c;
  c.spec = spec_from_text(r.text("spec"));
  c.params = r.arrays("params");
  c.buffers = r.arrays("buffers");
  const auto has_adam = r.u8("adam");
  if (has_adam > 1) throw FormatError("adam", "bad flag");
  if (has_adam) {
    AdamState<float> a;
    a.t = r.u64("adam");
    a.lr = r.f64("adam");
    a.beta1 = r.f64("adam");
    a.beta2 = r.f64("adam");
    a.epsilon = r.f64("adam");
    a.m = r.arrays("adam");
    a.v = r.arrays("adam");
    c.adam = std::move(a);
  }
  c.extra = r.text("extra");
  if (!r.done()) throw FormatError("extra", "trailing bytes");
  return c;
}

inline Checkpoint make_checkpoint(Network<float>& net, const AdamState<float>* adam = nullptr, std::string extra = {}) {
  Checkpoint c;
  c.spec = net.spec();
  c.params = detail::snapshot(net.parameters());
  c.buffers = detail::snapshot(net.buffers());
  if (adam) c.adam = *adam;
  c.extra = std::move(extra);
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  ivdseg::detail::write_file_atomic(path, encode_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(ivdseg::detail::read_file(path));
}

/// Copies checkpoint arrays into a network built from the same spec.
inline void load_weights(Network<float>& net, const Checkpoint& c) {
  if (!(net.spec() == c.spec)) throw FormatError("spec", "checkpoint was written for a different network");
  detail::restore(net.parameters(), c.params, "params");
  detail::restore(net.buffers(), c.buffers, "buffers");
}

inline Network<float> network_from_checkpoint(const Checkpoint& c) {
  Network<float> net(c.spec, 0);
  load_weights(net, c);
  return net;
}

}  // namespace ivdseg::nn
