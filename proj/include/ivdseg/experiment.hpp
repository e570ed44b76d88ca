#pragma once

// Training/evaluation recipes shared by the CLI and the acceptance runner: the
// 3D two-stage pipeline, the 2D slice pathway, and the experiment matrices.

#include <chrono>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <vector>

#include "ivdseg/augment.hpp"
#include "ivdseg/metrics.hpp"
#include "ivdseg/pipeline.hpp"
#include "ivdseg/unet.hpp"

namespace ivdseg {

struct StageSettings {
  std::size_t base = 8;
  double lr = 1e-2;
  std::size_t batch_size = 1;
  std::size_t max_epochs = 40;
  std::size_t patience = 8;
};

struct ExperimentSettings {
  PipelineConfig pipeline;
  bool augment = true;
  std::size_t augment_copies = 3;
  AugmentBounds bounds;
  StageSettings loc{8, 1e-2, 1, 40, 8};
  StageSettings seg{8, 1e-2, 1, 8, 3};
  StageSettings net2d{4, 1e-2, 16, 20, 4};
  Axis axis2d = Axis::y;
  double dropout = 0.2;
  double smooth = 1.0;
  std::uint64_t seed = 0;
  bool reproducible = true;
};

using ProgressFn = std::function<void(const std::string&)>;

namespace detail {

inline TrainConfig train_config(const StageSettings& s, const ExperimentSettings& x, std::uint64_t seed,
                                const std::filesystem::path& prefix) {
  TrainConfig c;
  c.lr = s.lr;
  c.batch_size = s.batch_size;
  c.max_epochs = s.max_epochs;
  c.patience = s.patience;
  c.dropout = x.dropout;
  c.smooth = x.smooth;
  c.seed = seed;
  c.reproducible = x.reproducible;
  c.checkpoint_prefix = prefix;
  return c;
}

inline std::function<void(const EpochLoss&)> epoch_logger(const ProgressFn& progress, std::string stage) {
  if (!progress) return {};
  return [progress, stage](const EpochLoss& e) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%s epoch %zu train %.5f val %.5f", stage.c_str(), e.epoch, e.train_loss,
                  e.val_loss);
    progress(buf);
  };
}

}  // namespace detail

/// Training samples as the networks see them: originals plus augmented copies when enabled.
inline std::vector<MultiModalSample> training_samples(const std::vector<MultiModalSample>& train,
                                                      const ExperimentSettings& x) {
  if (!x.augment) return train;
  return augment_dataset(train, x.augment_copies, x.bounds, derive_seed(x.seed, {10}));
}

// ---------------------------------------------------------------------------
// 3D two-stage pipeline

enum class Stage { localizer, segmenter };

inline nn::NetworkSpec stage_spec(Stage st, const ExperimentSettings& x) {
  const auto& s = st == Stage::localizer ? x.loc : x.seg;
  return build_unet3d(x.pipeline.modalities.size(), s.base, x.dropout);
}

inline std::pair<std::vector<Example>, std::vector<Example>> stage_examples(
    Stage st, const std::vector<MultiModalSample>& train, const std::vector<MultiModalSample>& val,
    const ExperimentSettings& x) {
  std::vector<Example> tr, va;
  if (st == Stage::localizer) {
    const auto divisor = detail::net_divisor(stage_spec(st, x));
    for (const auto& s : train) tr.push_back(localizer_example(s, x.pipeline, divisor));
    for (const auto& s : val) va.push_back(localizer_example(s, x.pipeline, divisor));
  } else {
    for (const auto& s : train)
      for (auto& e : segmenter_examples(s, x.pipeline)) tr.push_back(std::move(e));
    for (const auto& s : val)
      for (auto& e : segmenter_examples(s, x.pipeline)) va.push_back(std::move(e));
  }
  return {std::move(tr), std::move(va)};
}

/// Builds and trains one stage. `train` should already include augmented copies.
inline FitResult train_stage(Stage st, nn::Network<float>& net, const std::vector<MultiModalSample>& train,
                             const std::vector<MultiModalSample>& val, const ExperimentSettings& x,
                             const std::filesystem::path& checkpoint_prefix = {}, const ProgressFn& progress = {}) {
  const auto [tr, va] = stage_examples(st, train, val, x);
  const auto& s = st == Stage::localizer ? x.loc : x.seg;
  const auto seed = derive_seed(x.seed, {st == Stage::localizer ? 21u : 31u});
  return fit(net, tr, va, detail::train_config(s, x, seed, checkpoint_prefix),
             detail::epoch_logger(progress, st == Stage::localizer ? "loc" : "seg"));
}

inline nn::Network<float> make_stage_net(Stage st, const ExperimentSettings& x) {
  return nn::Network<float>(stage_spec(st, x), derive_seed(x.seed, {st == Stage::localizer ? 20u : 30u}));
}

struct TrainedPipeline {
  nn::Network<float> localizer;
  nn::Network<float> segmenter;
  FitResult loc_fit, seg_fit;
};

inline TrainedPipeline train_pipeline(const std::vector<MultiModalSample>& train,
                                      const std::vector<MultiModalSample>& val, const ExperimentSettings& x,
                                      const std::filesystem::path& checkpoint_dir = {},
                                      const ProgressFn& progress = {}) {
  x.pipeline.validate();
  const auto samples = training_samples(train, x);
  if (progress) progress("training on " + std::to_string(samples.size()) + " samples");
  TrainedPipeline t{make_stage_net(Stage::localizer, x), make_stage_net(Stage::segmenter, x), {}, {}};
  const auto prefix = [&](const char* n) {
    return checkpoint_dir.empty() ? std::filesystem::path{} : checkpoint_dir / n;
  };
  t.loc_fit = train_stage(Stage::localizer, t.localizer, samples, val, x, prefix("localizer"), progress);
  t.seg_fit = train_stage(Stage::segmenter, t.segmenter, samples, val, x, prefix("segmenter"), progress);
  return t;
}

struct LocalizationCheck {
  std::string sample_id;
  std::size_t expected = 0, found = 0;
  double max_error_vox = 0;  // over matched discs
  bool all_within(double tol) const { return expected == found && max_error_vox <= tol; }
};

/// Greedy nearest matching of predicted centers to ground-truth disc centroids.
inline LocalizationCheck check_localization(const std::vector<Index3>& centers, const Volume& label,
                                            std::string sample_id = {}) {
  const auto cc = connected_components(label, 26);
  LocalizationCheck r{std::move(sample_id), cc.count(), centers.size(), 0};
  std::vector<bool> used(centers.size(), false);
  for (const auto& t : cc.centroids) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = centers.size();
    for (std::size_t j = 0; j < centers.size(); ++j) {
      if (used[j]) continue;
      double d = 0;
      for (std::size_t a = 0; a < 3; ++a) d += std::pow(t[a] - static_cast<double>(centers[j][a]), 2);
      if (d < best) {
        best = d;
        arg = j;
      }
    }
    if (arg == centers.size()) {
      r.max_error_vox = std::numeric_limits<double>::infinity();
      continue;
    }
    used[arg] = true;
    r.max_error_vox = std::max(r.max_error_vox, std::sqrt(best));
  }
  return r;
}

struct PipelineEvaluation {
  std::vector<EvalReport> reports;
  std::vector<LocalizationCheck> localization;
  Aggregate aggregate;
};

inline PipelineEvaluation evaluate_pipeline(const std::vector<MultiModalSample>& samples, TrainedPipeline& t,
                                            const PipelineConfig& cfg) {
  PipelineEvaluation out;
  for (const auto& s : samples) {
    if (!s.label) throw EvaluationError("sample '" + s.sample_id + "' has no ground truth");
    const auto p = run_end_to_end(s, t.localizer, t.segmenter, cfg);
    out.localization.push_back(check_localization(p.centers, *s.label, s.sample_id));
    out.reports.push_back(evaluate_sample(p.mask, *s.label, s.sample_id));
  }
  out.aggregate = aggregate(all_rows(out.reports));
  return out;
}

// ---------------------------------------------------------------------------
// 2D slice pathway

/// Slices of a prepared sample along `axis`, each padded to the 2D net divisor.
inline std::vector<Example> slice_examples(const MultiModalSample& prepared, Axis axis, const Extent3& divisor) {
  std::map<Modality, std::vector<Volume>> per;
  for (const auto& [m, v] : prepared.modalities) per[m] = slice_along_axis(v, axis);
  std::vector<Volume> labels;
  if (prepared.label) labels = slice_along_axis(*prepared.label, axis);
  const std::size_t n = per.begin()->second.size();
  std::vector<Example> out;
  for (std::size_t i = 0; i < n; ++i) {
    MultiModalSample s;
    const auto e = per.begin()->second[i].extent();
    const auto target = detail::divisible_extent(e, divisor);
    for (auto& [m, slices] : per) s.modalities.emplace(m, pad_to(slices[i], target));
    Example ex{sample_tensor(s), {}};
    if (prepared.label) ex.target = label_tensor(pad_to(labels[i], target));
    out.push_back(std::move(ex));
  }
  return out;
}

inline nn::NetworkSpec spec_2d(const ExperimentSettings& x) {
  return build_unet2d(x.pipeline.modalities.size(), x.net2d.base);
}

inline FitResult train_2d(nn::Network<float>& net, const std::vector<MultiModalSample>& train,
                          const std::vector<MultiModalSample>& val, const ExperimentSettings& x,
                          const std::filesystem::path& checkpoint_prefix = {}, const ProgressFn& progress = {}) {
  const auto divisor = detail::net_divisor(net.spec());
  std::vector<Example> tr, va;
  for (const auto& s : train)
    for (auto& e : slice_examples(prepare_sample(s, x.pipeline.modalities), x.axis2d, divisor)) tr.push_back(std::move(e));
  for (const auto& s : val)
    for (auto& e : slice_examples(prepare_sample(s, x.pipeline.modalities), x.axis2d, divisor)) va.push_back(std::move(e));
  return fit(net, tr, va, detail::train_config(x.net2d, x, derive_seed(x.seed, {41}), checkpoint_prefix),
             detail::epoch_logger(progress, std::string("2d-") + std::string(axis_name(x.axis2d))));
}

/// Slice-wise prediction reassembled into a full-volume mask.
inline Volume predict_2d(const MultiModalSample& sample, nn::Network<float>& net, Axis axis,
                         const PipelineConfig& cfg) {
  const auto prepared = prepare_sample(sample, cfg.modalities);
  const auto& ref = prepared.reference();
  const auto divisor = detail::net_divisor(net.spec());
  const auto examples = slice_examples(prepared, axis, divisor);
  const auto slice_extent = slice_along_axis(ref, axis).front().extent();
  std::vector<Volume> masks;
  for (const auto& ex : examples) {
    const auto& y = net.forward(ex.input, {false, 0});
    auto prob = center_crop(tensor_channel(y, ref.spacing(), VolumeKind::probability), slice_extent);
    for (auto& v : prob.data()) v = v >= cfg.threshold ? 1.0f : 0.0f;
    masks.push_back(prob.with_kind(VolumeKind::label));
  }
  net.release_activations();
  auto out = stack_slices(masks, axis);
  return Volume(out.dims(), ref.spacing(), VolumeKind::label, std::vector<float>(out.data().begin(), out.data().end()));
}

inline nn::Network<float> make_2d_net(const ExperimentSettings& x) {
  return nn::Network<float>(spec_2d(x), derive_seed(x.seed, {40}));
}

// ---------------------------------------------------------------------------
// Experiment matrices

struct CellSpec {
  std::string name;
  bool is_2d = false;
  std::vector<Modality> modalities;
  bool augment = true;
  Axis axis = Axis::y;
};

struct CellResult {
  CellSpec cell;
  bool ok = false;
  std::string error;
  Aggregate aggregate;
  double wall_seconds = 0;
  std::vector<EvalReport> reports;
};

inline std::string cell_name(const CellSpec& c) {
  std::string n = c.is_2d ? "2d axis=" + std::string(axis_name(c.axis)) : "3d";
  auto mods = c.modalities;
  std::sort(mods.begin(), mods.end());
  n += " modalities=" + modality_list_string(mods);
  n += c.augment ? " augment=on" : " augment=off";
  return n;
}

/// "modalities": the four input combinations; "augmentation": on/off;
/// "axes": 2D along x, y, z; "all": every cell above.
inline std::vector<CellSpec> matrix_cells(const std::string& matrix, const ExperimentSettings& x) {
  std::vector<CellSpec> cells;
  const auto combos = {"opp,wat,fat,inn", "opp,wat,fat", "opp,wat,inn", "opp,wat"};
  const bool all = matrix == "all";
  if (matrix == "modalities" || all)
    for (const char* c : combos) cells.push_back({"", false, parse_modality_list(c), x.augment, x.axis2d});
  if (matrix == "augmentation" || all)
    for (bool a : {true, false}) cells.push_back({"", false, x.pipeline.modalities, a, x.axis2d});
  if (matrix == "axes" || all)
    for (Axis a : {Axis::x, Axis::y, Axis::z}) cells.push_back({"", true, x.pipeline.modalities, x.augment, a});
  if (cells.empty()) throw ConfigError("unknown matrix '" + matrix + "' (expected modalities, augmentation, axes or all)");
  for (auto& c : cells) c.name = cell_name(c);
  return cells;
}

inline CellResult run_cell(const CellSpec& cell, const std::vector<MultiModalSample>& train,
                           const std::vector<MultiModalSample>& val, ExperimentSettings x,
                           const std::filesystem::path& cell_dir = {}, const ProgressFn& progress = {}) {
  x.pipeline.modalities = cell.modalities;
  x.augment = cell.augment;
  x.axis2d = cell.axis;
  CellResult r;
  r.cell = cell;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (!cell_dir.empty()) std::filesystem::create_directories(cell_dir);
    if (cell.is_2d) {
      auto net = make_2d_net(x);
      const auto samples = training_samples(train, x);
      train_2d(net, samples, val, x, cell_dir.empty() ? cell_dir : cell_dir / "net2d", progress);
      for (const auto& s : val) r.reports.push_back(evaluate_sample(predict_2d(s, net, cell.axis, x.pipeline), *s.label, s.sample_id));
    } else {
      auto t = train_pipeline(train, val, x, cell_dir, progress);
      r.reports = evaluate_pipeline(val, t, x.pipeline).reports;
    }
    r.aggregate = aggregate(all_rows(r.reports));
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Runs every cell (up to `jobs` at a time); a failing cell is recorded and the rest continue.
inline std::vector<CellResult> run_matrix(const std::vector<CellSpec>& cells, const std::vector<MultiModalSample>& train,
                                          const std::vector<MultiModalSample>& val, const ExperimentSettings& x,
                                          const std::filesystem::path& dir = {}, std::size_t jobs = 1,
                                          const ProgressFn& progress = {}) {
  std::vector<CellResult> out(cells.size());
  jobs = std::max<std::size_t>(jobs, 1);
  for (std::size_t start = 0; start < cells.size(); start += jobs) {
    std::vector<std::future<CellResult>> running;
    for (std::size_t i = start; i < std::min(cells.size(), start + jobs); ++i) {
      const auto cell_dir = dir.empty() ? dir : dir / ("cell" + std::to_string(i));
      running.push_back(std::async(jobs == 1 ? std::launch::deferred : std::launch::async, [&, i, cell_dir] {
        return run_cell(cells[i], train, val, x, cell_dir,
                        progress ? ProgressFn([&, i](const std::string& m) { progress(cells[i].name + ": " + m); })
                                 : ProgressFn{});
      }));
    }
    for (std::size_t k = 0; k < running.size(); ++k) out[start + k] = running[k].get();
  }
  return out;
}

/// `config,mean_dice,sd_dice,mean_hd,sd_hd,wall_s,status`
inline std::string matrix_csv(const std::vector<CellResult>& results, bool include_wall_time = true) {
  std::string out = "config,mean_dice,sd_dice,mean_hd,sd_hd,wall_s,status\n";
  for (const auto& r : results) {
    const auto& a = r.aggregate;
    out += r.cell.name + ',';
    if (r.ok)
      out += detail::format_double(a.mean_dice) + ',' + detail::format_double(a.sd_dice) + ',' +
             detail::format_double(a.mean_hd) + ',' + detail::format_double(a.sd_hd) + ',';
    else
      out += ",,,,";
    if (include_wall_time) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.1f", r.wall_seconds);
      out += buf;
    }
    std::string status = r.ok ? "ok" : "error: " + r.error;
    std::replace(status.begin(), status.end(), ',', ';');
    std::replace(status.begin(), status.end(), '\n', ' ');
    out += ',' + status + '\n';
  }
  return out;
}

}  // namespace ivdseg
