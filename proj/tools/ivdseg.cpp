// ivdseg command-line front end. Every command writes into a fresh run
// directory <run_root>/<command>-<config hash>-<UTC timestamp>/ and lists its
// outputs in run.json. Success prints one JSON line on stdout; failure prints
// one JSON line {"error": kind, "message": ...} on stderr and exits nonzero.

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "ivdseg/ivdseg.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ivdseg;

namespace {

enum ExitCode { kOk = 0, kUnexpected = 1, kConfig = 2, kPath = 3, kFormat = 4, kRuntime = 5 };

/// A file the command needs is missing or unusable.
class PathError : public Error {
 public:
  PathError(std::string kind, const std::string& what) : Error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

std::string utc_stamp() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

class RunDir {
 public:
  RunDir(const std::string& command, const RunConfig& cfg) : command_(command), cfg_(cfg) {
    const fs::path root = cfg.get("run_root");
    const auto base = command + "-" + cfg.hash().substr(0, 12) + "-" + utc_stamp();
    dir_ = root / base;
    for (int k = 1; fs::exists(dir_); ++k) dir_ = root / (base + "-" + std::to_string(k));
    fs::create_directories(dir_);
    write_text("config.txt", cfg.canonical());
  }

  const fs::path& path() const { return dir_; }

  /// Absolute path for a relative output; the file is recorded in run.json.
  fs::path file(const std::string& rel) {
    files_.push_back(rel);
    const auto p = dir_ / rel;
    fs::create_directories(p.parent_path());
    return p;
  }

  void write_text(const std::string& rel, const std::string& text) {
    std::ofstream out(file(rel), std::ios::binary);
    out << text;
    if (!out) throw PathError("path", "cannot write " + (dir_ / rel).string());
  }

  void write_json(const std::string& rel, const json& j) { write_text(rel, j.dump(2) + "\n"); }

  /// Records outputs written by library code (dataset writers, checkpoints).
  void adopt(const fs::path& abs) { files_.push_back(fs::relative(abs, dir_).generic_string()); }
  void adopt_tree(const fs::path& abs) {
    std::vector<std::string> found;
    for (const auto& e : fs::recursive_directory_iterator(abs))
      if (e.is_regular_file()) found.push_back(fs::relative(e.path(), dir_).generic_string());
    std::sort(found.begin(), found.end());
    files_.insert(files_.end(), found.begin(), found.end());
  }

  json finish(json summary) {
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    json manifest = {{"command", command_}, {"config_hash", cfg_.hash()}, {"created_utc", utc_stamp()},
                     {"files", files_},     {"summary", summary}};
    std::ofstream(dir_ / "run.json") << manifest.dump(2) << '\n';
    summary["run_dir"] = dir_.string();
    summary["status"] = "ok";
    return summary;
  }

 private:
  std::string command_;
  const RunConfig& cfg_;
  fs::path dir_;
  std::vector<std::string> files_;
};

fs::path required_path(const RunConfig& cfg, const std::string& key, const std::string& kind) {
  const auto& v = cfg.get(key);
  if (v.empty()) throw PathError(kind, "missing " + kind + ": set '" + key + "' in the config or pass --" + key);
  if (!fs::exists(v)) throw PathError(kind, "missing " + kind + ": '" + v + "' does not exist");
  return v;
}

std::vector<DatasetEntry> load_dataset(const RunConfig& cfg, bool all_modalities = false) {
  const auto manifest = required_path(cfg, "dataset", "dataset");
  return read_dataset(manifest, all_modalities ? std::vector<Modality>{} : cfg.modalities());
}

std::vector<MultiModalSample> by_split(const std::vector<DatasetEntry>& d, const std::string& split) {
  std::vector<MultiModalSample> out;
  for (const auto& e : d)
    if (split == "all" || e.split == split) out.push_back(e.sample);
  return out;
}

nn::Network<float> load_net(const RunConfig& cfg, const std::string& key) {
  const auto path = required_path(cfg, key, "checkpoint");
  return nn::network_from_checkpoint(nn::load_checkpoint(path));
}

void check_channels(const nn::Network<float>& net, const RunConfig& cfg, const std::string& what) {
  if (net.spec().in_channels != cfg.modalities().size())
    throw ConfigError(what + " expects " + std::to_string(net.spec().in_channels) + " input channels but modalities=" +
                      cfg.get("modalities") + " selects " + std::to_string(cfg.modalities().size()));
}

json history_json(const FitResult& f) {
  return {{"epochs", f.history.size()}, {"best_epoch", f.best_epoch}, {"best_val_loss", f.best_val},
          {"stopped_early", f.stopped_early}};
}

ProgressFn stderr_progress() {
  return [](const std::string& m) { std::cerr << m << '\n'; };
}

bool is_slice_dataset(const std::vector<MultiModalSample>& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](const auto& x) { return x.reference().dims().nz == 1; });
}

// ---------------------------------------------------------------------------
// Commands

json cmd_config(const RunConfig& cfg) {
  std::cout << cfg.canonical();
  return {{"status", "ok"}, {"config_hash", cfg.hash()}};
}

json cmd_phantom(const RunConfig& cfg) {
  RunDir run("phantom", cfg);
  const auto p = cfg.phantom();
  const auto n = cfg.count("phantom_count");
  const auto samples = generate_dataset(n, p, cfg.seed());
  const auto tags = split_tags(n, cfg.count("phantom_val"));
  write_dataset(run.path() / "dataset", samples, tags);
  run.adopt_tree(run.path() / "dataset");
  json ids = json::object();
  for (std::size_t i = 0; i < n; ++i) ids[samples[i].sample_id] = tags[i];
  return run.finish({{"samples", n}, {"splits", ids}, {"manifest", (run.path() / "dataset/manifest.json").string()}});
}

json cmd_contrast(const RunConfig& cfg) {
  const auto data = load_dataset(cfg, true);
  RunDir run("contrast", cfg);
  std::string csv = "sample_id,modality,fg_mean,fg_sd,bg_mean,bg_sd,weber\n";
  std::map<std::string, std::pair<double, std::size_t>> mean_weber;
  for (const auto& e : data) {
    const auto rep = contrast_report(e.sample);
    for (const auto& r : rep.rows) {
      const std::string m(modality_name(r.modality));
      csv += e.sample.sample_id + ',' + m + ',' + detail::format_double(r.stats.fg_mean) + ',' +
             detail::format_double(r.stats.fg_sd) + ',' + detail::format_double(r.stats.bg_mean) + ',' +
             detail::format_double(r.stats.bg_sd) + ',' + detail::format_double(r.weber) + '\n';
      mean_weber[m].first += r.weber;
      ++mean_weber[m].second;
    }
  }
  run.write_text("contrast.csv", csv);
  json summary = json::object();
  for (const auto& [m, v] : mean_weber) summary[m] = v.first / static_cast<double>(v.second);
  run.write_json("contrast.json", {{"mean_weber", summary}});
  return run.finish({{"samples", data.size()}, {"mean_weber", summary}});
}

json cmd_augment(const RunConfig& cfg) {
  const auto data = load_dataset(cfg, true);
  const auto x = cfg.settings();
  RunDir run("augment", cfg);
  const auto train = by_split(data, "train");
  const auto val = by_split(data, "val");
  const auto aug = augment_dataset(train, x.augment_copies, x.bounds, derive_seed(x.seed, {10}));
  std::vector<MultiModalSample> all = aug;
  std::vector<std::string> tags(aug.size(), "train");
  for (const auto& s : val) {
    all.push_back(s);
    tags.push_back("val");
  }
  write_dataset(run.path() / "dataset", all, tags);
  run.adopt_tree(run.path() / "dataset");
  return run.finish({{"train_in", train.size()}, {"train_out", aug.size()}, {"val", val.size()},
                     {"manifest", (run.path() / "dataset/manifest.json").string()}});
}

json cmd_train(const RunConfig& cfg, const std::string& stage) {
  const auto x = cfg.settings();
  const auto data = load_dataset(cfg);
  const auto train = by_split(data, "train"), val = by_split(data, "val");
  if (train.empty() || val.empty()) throw ConfigError("dataset needs both train and val samples");
  RunDir run("train-" + stage, cfg);
  json summary = {{"stage", stage}, {"modalities", cfg.get("modalities")}};
  FitResult f;
  if (stage == "loc" || stage == "seg") {
    const auto st = stage == "loc" ? Stage::localizer : Stage::segmenter;
    auto net = make_stage_net(st, x);
    const auto samples = training_samples(train, x);
    f = train_stage(st, net, samples, val, x, run.path() / stage, stderr_progress());
    nn::save_checkpoint(run.file(stage + ".mck"), nn::make_checkpoint(net));
    summary["train_samples"] = samples.size();
  } else if (stage == "2d") {
    auto net = make_2d_net(x);
    if (is_slice_dataset(train)) {
      // slices written by `slice2d`: each sample is one 2D slice
      auto xs = x;
      xs.axis2d = Axis::z;
      f = train_2d(net, train, val, xs, run.path() / stage, stderr_progress());
      summary["slices"] = train.size();
    } else {
      const auto samples = training_samples(train, x);
      f = train_2d(net, samples, val, x, run.path() / stage, stderr_progress());
      summary["axis"] = std::string(axis_name(x.axis2d));
    }
    nn::save_checkpoint(run.file(stage + ".mck"), nn::make_checkpoint(net));
  } else {
    throw ConfigError("unknown stage '" + stage + "' (expected loc, seg or 2d)");
  }
  for (const char* suffix : {".best.mck", ".last.mck"})
    if (fs::exists(run.path() / (stage + suffix))) run.adopt(run.path() / (stage + suffix));
  run.write_text("history.csv", history_csv(f.history));
  summary["fit"] = history_json(f);
  summary["checkpoint"] = (run.path() / (stage + ".mck")).string();
  return run.finish(summary);
}

json cmd_predict(const RunConfig& cfg, const std::string& split) {
  const auto x = cfg.settings();
  const auto data = load_dataset(cfg);
  const auto samples = by_split(data, split);
  if (samples.empty()) throw ConfigError("no samples in split '" + split + "'");
  const bool two_d = !cfg.get("model2d").empty();
  std::optional<nn::Network<float>> loc, seg, net2d;
  if (two_d) {
    net2d = load_net(cfg, "model2d");
    check_channels(*net2d, cfg, "2D model");
  } else {
    loc = load_net(cfg, "localizer");
    seg = load_net(cfg, "segmenter");
    check_channels(*loc, cfg, "localizer");
    check_channels(*seg, cfg, "segmenter");
  }
  RunDir run("predict", cfg);
  json entries = json::array(), discs = json::array();
  std::vector<EvalReport> reports;
  for (const auto& s : samples) {
    Volume mask;
    json entry = {{"id", s.sample_id}};
    if (two_d) {
      mask = predict_2d(s, *net2d, x.axis2d, x.pipeline);
    } else {
      auto p = run_end_to_end(s, *loc, *seg, x.pipeline);
      mask = std::move(p.mask);
      json centers = json::array();
      for (const auto& c : p.centers) centers.push_back({c.z, c.y, c.x});
      entry["centers"] = centers;
    }
    const auto rel = "predictions/" + s.sample_id + ".mvl";
    save_volume(mask, run.file(rel));
    entry["mask"] = s.sample_id + ".mvl";  // relative to the manifest
    entries.push_back(entry);
    if (s.label) {
      reports.push_back(evaluate_sample(mask, *s.label, s.sample_id));
      for (const auto& r : reports.back().rows) discs.push_back(disc_json(r));
    }
  }
  run.write_json("predictions/manifest.json", {{"samples", entries}});
  json summary = {{"samples", samples.size()}, {"manifest", (run.path() / "predictions/manifest.json").string()}};
  if (!reports.empty()) {
    run.write_json("discs.json", discs);
    summary["aggregate"] = reports_json(reports)["aggregate"];
  }
  return run.finish(summary);
}

/// id -> mask volume, from a prediction manifest, a dataset manifest (labels) or a single .mvl file.
std::map<std::string, Volume> load_masks(const fs::path& p, bool labels) {
  if (!fs::exists(p)) throw PathError("path", "'" + p.string() + "' does not exist");
  std::map<std::string, Volume> out;
  if (p.extension() == ".mvl") {
    out.emplace(p.stem().string(), load_volume(p));
    return out;
  }
  json j;
  try {
    std::ifstream(p) >> j;
    for (const auto& e : j.at("samples")) {
      const auto key = labels ? "label" : "mask";
      if (!e.contains(key)) {
        if (labels) throw FormatError("manifest", "sample '" + e.at("id").get<std::string>() + "' has no label");
        continue;
      }
      out.emplace(e.at("id").get<std::string>(), load_volume(p.parent_path() / e.at(key).get<std::string>()));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest", e.what());
  }
  return out;
}

json cmd_eval(const RunConfig& cfg, const fs::path& pred_path, const fs::path& gt_path) {
  const auto pred = load_masks(pred_path, false);
  const auto gt = load_masks(gt_path, true);
  std::vector<EvalReport> reports;
  if (pred.size() == 1 && gt.size() == 1) {
    reports.push_back(evaluate_sample(pred.begin()->second, gt.begin()->second, gt.begin()->first));
  } else {
    for (const auto& [id, p] : pred) {
      auto it = gt.find(id);
      if (it == gt.end()) throw EvaluationError("no ground truth for predicted sample '" + id + "'");
      reports.push_back(evaluate_sample(p, it->second, id));
    }
  }
  if (reports.empty()) throw EvaluationError("nothing to evaluate");
  RunDir run("eval", cfg);
  run.write_text("report.csv", report_csv(all_rows(reports)));
  const auto j = reports_json(reports);
  run.write_json("report.json", j);
  return run.finish({{"samples", reports.size()}, {"aggregate", j["aggregate"]}});
}

json cmd_slice2d(const RunConfig& cfg) {
  const auto data = load_dataset(cfg);
  const auto axis = parse_axis(cfg.get("axis2d"));
  RunDir run("slice2d", cfg);
  std::vector<MultiModalSample> slices;
  std::vector<std::string> tags;
  for (const auto& e : data) {
    std::map<Modality, std::vector<Volume>> per;
    for (const auto& [m, v] : e.sample.modalities) per[m] = slice_along_axis(v, axis);
    std::vector<Volume> labels;
    if (e.sample.label) labels = slice_along_axis(*e.sample.label, axis);
    for (std::size_t i = 0; i < per.begin()->second.size(); ++i) {
      MultiModalSample s;
      char id[64];
      std::snprintf(id, sizeof id, "%s-%s%03zu", e.sample.sample_id.c_str(), std::string(axis_name(axis)).c_str(), i);
      s.sample_id = id;
      for (auto& [m, sl] : per) s.modalities.emplace(m, sl[i]);
      if (e.sample.label) s.label = labels[i];
      slices.push_back(std::move(s));
      tags.push_back(e.split);
    }
  }
  write_dataset(run.path() / "slices", slices, tags);
  run.adopt_tree(run.path() / "slices");
  return run.finish({{"axis", std::string(axis_name(axis))}, {"slices", slices.size()},
                     {"manifest", (run.path() / "slices/manifest.json").string()}});
}

json cmd_experiment(const RunConfig& cfg, const std::string& matrix) {
  const auto x = cfg.settings();
  const auto cells = matrix_cells(matrix, x);
  std::vector<DatasetEntry> data;
  if (cfg.get("dataset").empty()) {
    const auto n = cfg.count("phantom_count");
    const auto samples = generate_dataset(n, cfg.phantom(), cfg.seed());
    const auto tags = split_tags(n, cfg.count("phantom_val"));
    for (std::size_t i = 0; i < n; ++i) data.push_back({samples[i], tags[i]});
  } else {
    data = load_dataset(cfg, true);
  }
  RunDir run("experiment-" + matrix, cfg);
  const auto results = run_matrix(cells, by_split(data, "train"), by_split(data, "val"), x, {}, cfg.count("jobs"),
                                  stderr_progress());
  run.write_text("results.csv", matrix_csv(results));
  json rows = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    if (r.ok) run.write_json("cells/" + std::to_string(i) + "/report.json", reports_json(r.reports));
    rows.push_back({{"config", r.cell.name}, {"ok", r.ok}, {"error", r.error}, {"aggregate", aggregate_json(r.aggregate)}});
  }
  run.write_json("results.json", rows);
  const auto failed = std::count_if(results.begin(), results.end(), [](const auto& r) { return !r.ok; });
  return run.finish({{"matrix", matrix}, {"cells", results.size()}, {"failed_cells", failed}});
}

void emit_error(const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ivdseg: two-stage intervertebral disc segmentation"};
  app.require_subcommand(1);
  std::string config_path, run_root, dataset, localizer, segmenter, model2d, axis, seed;
  std::vector<std::string> sets;
  auto common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "RunConfig file (key = value lines)");
    c->add_option("--set", sets, "override one config key: key=value (repeatable)");
    c->add_option("--run-root", run_root, "overrides run_root");
    c->add_option("--seed", seed, "overrides seed");
  };
  auto* c_config = app.add_subcommand("config", "print the canonical config and its hash");
  auto* c_phantom = app.add_subcommand("phantom", "generate a phantom dataset");
  auto* c_contrast = app.add_subcommand("contrast", "Weber contrast per modality");
  auto* c_augment = app.add_subcommand("augment", "write an augmented copy of a dataset");
  auto* c_train = app.add_subcommand("train", "train one network stage");
  auto* c_predict = app.add_subcommand("predict", "run a trained pipeline");
  auto* c_eval = app.add_subcommand("eval", "Dice / Hausdorff evaluation");
  auto* c_slice = app.add_subcommand("slice2d", "slice a dataset into 2D samples");
  auto* c_exp = app.add_subcommand("experiment", "run an experiment matrix");
  for (auto* c : {c_config, c_phantom, c_contrast, c_augment, c_train, c_predict, c_eval, c_slice, c_exp}) common(c);
  for (auto* c : {c_contrast, c_augment, c_train, c_predict, c_slice, c_exp})
    c->add_option("--dataset", dataset, "dataset manifest.json");
  std::string stage, split = "val", matrix, pred, gt;
  c_train->add_option("--stage", stage, "loc | seg | 2d")->required();
  c_predict->add_option("--localizer", localizer, "localizer checkpoint");
  c_predict->add_option("--segmenter", segmenter, "segmenter checkpoint");
  c_predict->add_option("--model2d", model2d, "2D checkpoint (predicts slice-wise instead)");
  c_predict->add_option("--split", split, "train | val | all");
  c_eval->add_option("--pred", pred, "prediction manifest or .mvl")->required();
  c_eval->add_option("--gt", gt, "dataset manifest or .mvl")->required();
  for (auto* c : {c_train, c_predict, c_slice, c_exp}) c->add_option("--axis", axis, "overrides axis2d");
  c_exp->add_option("--matrix", matrix, "modalities | augmentation | axes | all")->required();
  std::string jobs;
  c_exp->add_option("--jobs", jobs, "cells run concurrently");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("usage", e.what());
    return kConfig;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    const std::pair<std::string, std::string> flags[] = {{"run_root", run_root},   {"seed", seed},
                                                          {"dataset", dataset},     {"localizer", localizer},
                                                          {"segmenter", segmenter}, {"model2d", model2d},
                                                          {"axis2d", axis},         {"jobs", jobs}};
    for (const auto& [k, v] : flags)
      if (!v.empty()) cfg.set(k, v);
    cfg.settings();

    json out;
    if (*c_config) out = cmd_config(cfg);
    else if (*c_phantom) out = cmd_phantom(cfg);
    else if (*c_contrast) out = cmd_contrast(cfg);
    else if (*c_augment) out = cmd_augment(cfg);
    else if (*c_train) out = cmd_train(cfg, stage);
    else if (*c_predict) out = cmd_predict(cfg, split);
    else if (*c_eval) out = cmd_eval(cfg, pred, gt);
    else if (*c_slice) out = cmd_slice2d(cfg);
    else if (*c_exp) out = cmd_experiment(cfg, matrix);
    if (!*c_config) std::cout << out.dump() << std::endl;
    return kOk;
  } catch (const PathError& e) {
    emit_error(e.kind(), e.what());
    return kPath;
  } catch (const ConfigError& e) {
    emit_error("config", e.what());
    return kConfig;
  } catch (const FormatError& e) {
    emit_error("format", e.what());
    return kFormat;
  } catch (const Error& e) {
    emit_error("runtime", e.what());
    return kRuntime;
  } catch (const fs::filesystem_error& e) {
    emit_error("path", e.what());
    return kPath;
  } catch (const std::exception& e) {
    emit_error("unexpected", e.what());
    return kUnexpected;
  }
}
