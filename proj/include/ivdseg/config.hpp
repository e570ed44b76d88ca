#pragma once

// RunConfig: line-oriented `key = value` text. Every key has a default, unknown
// keys are rejected, and the canonical form (all keys, fixed order) is hashed to
// name run directories.

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ivdseg/experiment.hpp"
#include "ivdseg/phantom.hpp"

namespace ivdseg {

struct ConfigKey {
  const char* name;
  const char* default_value;
  const char* doc;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "0", "root seed; every random stream derives from it"},
      {"mode", "reproducible", "reproducible | fast"},
      {"modalities", "fat,opp,wat", "input channels, any subset of fat,inn,opp,wat"},
      {"run_root", "runs", "directory that receives run directories"},
      {"dataset", "", "dataset manifest.json"},
      {"localizer", "", "localizer checkpoint"},
      {"segmenter", "", "segmenter checkpoint"},
      {"model2d", "", "2D network checkpoint"},
      {"phantom_count", "8", "number of phantom samples"},
      {"phantom_val", "2", "trailing samples tagged for validation"},
      {"phantom_dims", "36x256x64", "phantom grid z x y x x"},
      {"phantom_spacing", "2x1.25x1.25", "voxel spacing in mm"},
      {"phantom_discs", "7", "discs per phantom"},
      {"phantom_noise", "0.2", "noise sd as a fraction of each region mean"},
      {"augment", "on", "on | off"},
      {"augment_copies", "3", "augmented copies per training sample"},
      {"aug_translate", "5", "max translation, voxels"},
      {"aug_rotate", "10,5,2", "max rotation about z,y,x, degrees"},
      {"aug_scale", "0.9,1.1", "in-plane scale range"},
      {"aug_flip", "on", "allow axis flips"},
      {"elastic_delta", "4", "elastic field smoothing sd, voxels"},
      {"elastic_alpha", "8", "elastic field magnitude, voxels"},
      {"dropout", "0.2", "dropout rate of the 3D nets"},
      {"smooth", "1", "Dice loss smoothing"},
      {"loc_base", "8", "localizer base channels"},
      {"loc_lr", "0.01", "localizer learning rate"},
      {"loc_batch", "1", "localizer batch size"},
      {"loc_epochs", "40", "localizer max epochs"},
      {"loc_patience", "8", "localizer early-stop patience"},
      {"loc_downsample", "4", "localizer input downsampling factor"},
      {"seg_base", "8", "segmenter base channels"},
      {"seg_lr", "0.01", "segmenter learning rate"},
      {"seg_batch", "1", "segmenter batch size"},
      {"seg_epochs", "8", "segmenter max epochs"},
      {"seg_patience", "3", "segmenter early-stop patience"},
      {"base2d", "4", "2D net base channels"},
      {"lr2d", "0.01", "2D net learning rate"},
      {"batch2d", "16", "2D net batch size"},
      {"epochs2d", "20", "2D net max epochs"},
      {"patience2d", "4", "2D net early-stop patience"},
      {"axis2d", "y", "slicing axis of the 2D pathway"},
      {"min_region_voxels", "100", "smallest localized component kept"},
      {"jobs", "1", "experiment cells run concurrently"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static RunConfig parse(const std::string& text) {
    RunConfig c;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
      const auto trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value', got '" + trimmed + "'");
      const auto key = trim(trimmed.substr(0, eq));
      if (auto it = seen.find(key); it != seen.end())
        throw ConfigError("line " + std::to_string(lineno) + ": key '" + key + "' already set on line " +
                          std::to_string(it->second));
      seen[key] = lineno;
      c.set(key, trim(trimmed.substr(eq + 1)));
    }
    c.settings();  // type-check every value
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  void set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  /// Every key in declaration order, `key = value` per line.
  std::string canonical() const {
    std::string out;
    for (const auto& k : config_keys()) out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    return out;
  }

  /// FNV-1a 64 of the canonical text, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  std::size_t count(const std::string& key) const { return to_unsigned(key); }
  double real(const std::string& key) const { return to_real(key, get(key)); }

  bool flag(const std::string& key) const {
    const auto& v = get(key);
    if (v == "on" || v == "true" || v == "1") return true;
    if (v == "off" || v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected on/off, got '" + v + "'");
  }

  std::vector<Modality> modalities() const {
    try {
      return parse_modality_list(get("modalities"));
    } catch (const ContractError& e) {
      throw ConfigError("key 'modalities': " + std::string(e.what()));
    }
  }

  std::uint64_t seed() const {
    const auto& v = get("seed");
    std::uint64_t s = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), s);
    if (r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError("key 'seed': expected an unsigned integer, got '" + v + "'");
    return s;
  }

  PhantomConfig phantom() const {
    PhantomConfig p;
    const auto dims = triple("phantom_dims", 'x');
    p.dims = {static_cast<std::size_t>(dims[0]), static_cast<std::size_t>(dims[1]), static_cast<std::size_t>(dims[2])};
    for (double d : dims)
      if (d < 1 || d != std::floor(d)) throw ConfigError("key 'phantom_dims': expected positive integers");
    const auto sp = triple("phantom_spacing", 'x');
    p.spacing = {static_cast<float>(sp[0]), static_cast<float>(sp[1]), static_cast<float>(sp[2])};
    p.disc_count = count("phantom_discs");
    p.noise_fraction = real("phantom_noise");
    p.seed = derive_seed(seed(), {1});
    try {
      p.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("phantom settings: " + std::string(e.what()));
    }
    return p;
  }

  ExperimentSettings settings() const {
    ExperimentSettings x;
    x.seed = seed();
    const auto& mode = get("mode");
    if (mode != "reproducible" && mode != "fast") throw ConfigError("key 'mode': expected reproducible or fast");
    x.reproducible = mode == "reproducible";
    x.pipeline.modalities = modalities();
    x.pipeline.loc_downsample = count("loc_downsample");
    x.pipeline.min_region_voxels = count("min_region_voxels");
    x.augment = flag("augment");
    x.augment_copies = count("augment_copies");
    x.bounds.translate = real("aug_translate");
    const auto rot = triple("aug_rotate", ',');
    x.bounds.rotate_deg = {rot[0], rot[1], rot[2]};
    const auto sc = list("aug_scale", ',');
    if (sc.size() != 2 || !(sc[0] > 0 && sc[0] <= sc[1])) throw ConfigError("key 'aug_scale': expected 'min,max'");
    x.bounds.scale_min = sc[0];
    x.bounds.scale_max = sc[1];
    x.bounds.allow_flip = flag("aug_flip");
    x.bounds.elastic_delta = real("elastic_delta");
    x.bounds.elastic_alpha = real("elastic_alpha");
    if (!(x.bounds.elastic_delta > 0)) throw ConfigError("key 'elastic_delta': must be > 0");
    x.dropout = real("dropout");
    if (!(x.dropout >= 0 && x.dropout < 1)) throw ConfigError("key 'dropout': must be in [0, 1)");
    x.smooth = real("smooth");
    x.loc = stage("loc_base", "loc_lr", "loc_batch", "loc_epochs", "loc_patience");
    x.seg = stage("seg_base", "seg_lr", "seg_batch", "seg_epochs", "seg_patience");
    x.net2d = stage("base2d", "lr2d", "batch2d", "epochs2d", "patience2d");
    try {
      x.axis2d = parse_axis(get("axis2d"));
      x.pipeline.validate();
    } catch (const ContractError& e) {
      throw ConfigError("key 'axis2d': " + std::string(e.what()));
    }
    if (count("phantom_val") >= count("phantom_count"))
      throw ConfigError("key 'phantom_val': must be smaller than phantom_count");
    count("jobs");
    return x;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static double to_real(const std::string& key, const std::string& v) {
    double d = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), d);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(d))
      throw ConfigError("key '" + key + "': expected a number, got '" + v + "'");
    return d;
  }

  std::size_t to_unsigned(const std::string& key) const {
    const auto& v = get(key);
    std::size_t n = 0;
    auto r = std::from_chars(v.data(), v.data() + v.size(), n);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError("key '" + key + "': expected a non-negative integer, got '" + v + "'");
    return n;
  }

  std::vector<double> list(const std::string& key, char sep) const {
    std::vector<double> out;
    const auto& v = get(key);
    std::size_t start = 0;
    for (;;) {
      const auto e = v.find(sep, start);
      out.push_back(to_real(key, trim(v.substr(start, e == std::string::npos ? std::string::npos : e - start))));
      if (e == std::string::npos) break;
      start = e + 1;
    }
    return out;
  }

  std::array<double, 3> triple(const std::string& key, char sep) const {
    const auto l = list(key, sep);
    if (l.size() != 3) throw ConfigError("key '" + key + "': expected three values separated by '" + sep + "'");
    for (double d : l)
      if (!(d > 0)) throw ConfigError("key '" + key + "': values must be positive");
    return {l[0], l[1], l[2]};
  }

  StageSettings stage(const char* base, const char* lr, const char* batch, const char* epochs,
                      const char* patience) const {
    StageSettings s{count(base), real(lr), count(batch), count(epochs), count(patience)};
    if (s.base == 0) throw ConfigError(std::string("key '") + base + "': must be >= 1");
    if (!(s.lr > 0)) throw ConfigError(std::string("key '") + lr + "': must be > 0");
    if (s.batch_size == 0) throw ConfigError(std::string("key '") + batch + "': must be >= 1");
    if (s.max_epochs == 0) throw ConfigError(std::string("key '") + epochs + "': must be >= 1");
    return s;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace ivdseg
