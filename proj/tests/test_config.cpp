#include <gtest/gtest.h>

#include "ivdseg/config.hpp"

using namespace ivdseg;

TEST(RunConfig, DefaultsMatchTable) {
  RunConfig c;
  const auto x = c.settings();
  EXPECT_EQ(x.pipeline.modalities, (std::vector<Modality>{Modality::fat, Modality::opp, Modality::wat}));
  EXPECT_EQ(x.loc.base, 8u);
  EXPECT_EQ(x.seg.base, 8u);
  EXPECT_EQ(x.pipeline.loc_downsample, 4u);
  EXPECT_TRUE(x.augment);
  EXPECT_EQ(x.augment_copies, 3u);
  EXPECT_EQ(x.bounds.rotate_deg, (std::array<double, 3>{10, 5, 2}));
  EXPECT_EQ(x.axis2d, Axis::y);
  const auto p = c.phantom();
  EXPECT_EQ(p.dims, (Extent3{36, 256, 64}));
  EXPECT_EQ(p.spacing, (Spacing{2, 1.25f, 1.25f}));
  EXPECT_EQ(p.seed, derive_seed(0, {1}));
}

TEST(RunConfig, CanonicalTextParsesBackToItself) {
  auto c = RunConfig::parse("# comment\nseed = 17\n  modalities=opp,wat # trailing\n\naugment = off\n");
  EXPECT_EQ(c.seed(), 17u);
  const auto text = c.canonical();
  EXPECT_EQ(RunConfig::parse(text).canonical(), text);
  EXPECT_EQ(RunConfig::parse(text).hash(), c.hash());
  EXPECT_NE(text.find("modalities = opp,wat\n"), std::string::npos);
  std::size_t lines = 0;
  for (char ch : text) lines += ch == '\n';
  EXPECT_EQ(lines, config_keys().size());
}

TEST(RunConfig, HashIsStableAndSensitive) {
  RunConfig a, b;
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 16u);
  b.set("seed", "1");
  EXPECT_NE(a.hash(), b.hash());
}

TEST(RunConfig, RejectsBadInput) {
  EXPECT_THROW(RunConfig::parse("sede = 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("seed 1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("seed = -1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("loc_lr = fast\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("augment = maybe\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("modalities = opp,t1\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("phantom_val = 8\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("axis2d = w\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("aug_rotate = 1,2\n"), ConfigError);
  EXPECT_THROW(RunConfig::parse("mode = quick\n"), ConfigError);
  try {
    RunConfig::parse("seed = 1\n\nseed = 2\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("line 1"), std::string::npos);
  }
  RunConfig c;
  c.set("phantom_dims", "36x100x64");
  EXPECT_THROW(c.phantom(), ConfigError);
}

TEST(Matrix, CellLists) {
  ExperimentSettings x;
  const auto m = matrix_cells("modalities", x);
  ASSERT_EQ(m.size(), 4u);
  EXPECT_EQ(m[1].name, "3d modalities=fat,opp,wat augment=on");
  EXPECT_EQ(m[0].modalities.size(), 4u);
  const auto a = matrix_cells("augmentation", x);
  ASSERT_EQ(a.size(), 2u);
  EXPECT_TRUE(a[0].augment);
  EXPECT_FALSE(a[1].augment);
  EXPECT_EQ(a[0].modalities, a[1].modalities);
  const auto ax = matrix_cells("axes", x);
  ASSERT_EQ(ax.size(), 3u);
  EXPECT_TRUE(ax[2].is_2d);
  EXPECT_EQ(ax[2].name, "2d axis=z modalities=fat,opp,wat augment=on");
  EXPECT_EQ(matrix_cells("all", x).size(), 9u);
  EXPECT_THROW(matrix_cells("everything", x), ConfigError);
}

namespace {

PhantomConfig small_phantom() {
  PhantomConfig p;
  p.dims = {36, 128, 64};
  p.disc_count = 3;
  return p;
}

ExperimentSettings tiny_settings() {
  ExperimentSettings x;
  x.augment = false;
  x.loc = {2, 1e-2, 1, 1, 1};
  x.seg = {2, 1e-2, 1, 1, 1};
  x.net2d = {2, 1e-2, 16, 1, 1};
  x.seed = 3;
  return x;
}

}  // namespace

TEST(Matrix, CellsRunAndFailuresAreContained) {
  auto ds = generate_dataset(3, small_phantom(), 4);
  std::vector<MultiModalSample> train(ds.begin(), ds.begin() + 2), val{ds[2]};
  auto x = tiny_settings();
  auto unlabeled = val;
  unlabeled[0].label.reset();
  auto cells = matrix_cells("augmentation", x);
  cells.resize(1);
  cells[0].augment = false;
  cells[0].name = cell_name(cells[0]);
  auto axes = matrix_cells("axes", x);
  cells.push_back(axes[2]);
  const auto results = run_matrix(cells, train, val, x);
  ASSERT_EQ(results.size(), 2u);
  for (const auto& r : results) {
    EXPECT_TRUE(r.ok) << r.error;
    ASSERT_EQ(r.reports.size(), 1u);
    EXPECT_EQ(r.reports[0].rows.size(), 3u);
  }
  const auto bad = run_cell(cells[0], train, unlabeled, x);
  EXPECT_FALSE(bad.ok);
  EXPECT_FALSE(bad.error.empty());
  const auto csv = matrix_csv({results[0], bad}, false);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config,mean_dice,sd_dice,mean_hd,sd_hd,wall_s,status");
  EXPECT_NE(csv.find("augment=off,,,,,,error: "), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Matrix, SameSeedSameReports) {
  auto ds = generate_dataset(3, small_phantom(), 4);
  std::vector<MultiModalSample> train(ds.begin(), ds.begin() + 2), val{ds[2]};
  const auto x = tiny_settings();
  const auto cell = matrix_cells("augmentation", x)[0];
  const auto a = run_cell(cell, train, val, x), b = run_cell(cell, train, val, x);
  ASSERT_TRUE(a.ok && b.ok);
  EXPECT_EQ(reports_json(a.reports).dump(), reports_json(b.reports).dump());
}

TEST(SliceExamples, PaddedToDivisor) {
  auto s = generate_phantom(small_phantom());
  PipelineConfig cfg;
  const auto prepared = prepare_sample(s, cfg.modalities);
  const auto ex = slice_examples(prepared, Axis::y, {1, 16, 16});
  ASSERT_EQ(ex.size(), 128u);
  EXPECT_EQ(ex[0].input.dims(), (std::vector<std::size_t>{1, 3, 1, 48, 64}));
  EXPECT_EQ(ex[0].target.dims(), (std::vector<std::size_t>{1, 1, 1, 48, 64}));
  const auto ez = slice_examples(prepared, Axis::z, {1, 16, 16});
  ASSERT_EQ(ez.size(), 36u);
  EXPECT_EQ(ez[0].input.dims(), (std::vector<std::size_t>{1, 3, 1, 128, 64}));
}
