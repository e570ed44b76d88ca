#include <gtest/gtest.h>

#include "ivdseg/contrast.hpp"

using namespace ivdseg;

namespace {

Volume line(std::vector<float> v, VolumeKind kind = VolumeKind::intensity) {
  const std::size_t n = v.size();
  return Volume({1, 1, 1, n}, {}, kind, std::move(v));
}

}  // namespace

TEST(RegionStats, ConstantVolume) {
  const auto r = region_stats(line({5, 5, 5, 5}), line({1, 0, 1, 0}, VolumeKind::label));
  EXPECT_EQ(r.fg_mean, 5.0);
  EXPECT_EQ(r.bg_mean, 5.0);
  EXPECT_EQ(r.fg_sd, 0.0);
  EXPECT_EQ(r.bg_sd, 0.0);
}

TEST(RegionStats, HandArithmetic) {
  const auto r = region_stats(line({1, 2, 3, 4}), line({1, 1, 0, 0}, VolumeKind::label));
  EXPECT_DOUBLE_EQ(r.fg_mean, 1.5);
  EXPECT_DOUBLE_EQ(r.bg_mean, 3.5);
  EXPECT_DOUBLE_EQ(r.fg_sd, 0.5);  // population sd
  EXPECT_DOUBLE_EQ(r.bg_sd, 0.5);
}

TEST(RegionStats, EmptySidesNamed) {
  try {
    region_stats(line({1, 2}), line({1, 1}, VolumeKind::label));
    FAIL();
  } catch (const StatisticsError& e) {
    EXPECT_NE(std::string(e.what()).find("background"), std::string::npos);
  }
  try {
    region_stats(line({1, 2}), line({0, 0}, VolumeKind::label));
    FAIL();
  } catch (const StatisticsError& e) {
    EXPECT_NE(std::string(e.what()).find("foreground"), std::string::npos);
  }
  EXPECT_THROW(region_stats(line({1, 2, 3}), line({1, 0}, VolumeKind::label)), DimensionError);
}

TEST(Weber, PublishedRows) {
  EXPECT_NEAR(weber_contrast(172.1, 97.9), 0.758, 5e-4);
  EXPECT_NEAR(weber_contrast(155.4, 63.2), 1.459, 5e-4);
  EXPECT_EQ(weber_contrast(10.0, 10.0), 0.0);
  EXPECT_THROW(weber_contrast(1.0, 0.0), DomainError);
  EXPECT_THROW(weber_contrast(1.0, -2.0), DomainError);
}

TEST(Weber, ScaleInvariant) {
  for (double k : {0.01, 0.5, 3.0, 1e4}) EXPECT_NEAR(weber_contrast(k * 163.4, k * 67.9), weber_contrast(163.4, 67.9), 1e-12);
}

TEST(ContrastReport, SingleModalityCsv) {
  MultiModalSample s;
  s.sample_id = "a";
  s.modalities.emplace(Modality::wat, line({3, 3, 1, 1}));
  s.label = line({1, 1, 0, 0}, VolumeKind::label);
  const auto r = contrast_report(s);
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.to_csv(), "modality,fg_mean,fg_sd,bg_mean,bg_sd,weber\nwat,3,0,1,0,2\n");
  s.label.reset();
  EXPECT_THROW(contrast_report(s), ContractError);
}

TEST(ContrastReport, RowsInCanonicalOrder) {
  MultiModalSample s;
  for (auto m : {Modality::wat, Modality::fat, Modality::opp}) s.modalities.emplace(m, line({3, 3, 1, 1}));
  s.label = line({1, 1, 0, 0}, VolumeKind::label);
  const auto r = contrast_report(s);
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].modality, Modality::fat);
  EXPECT_EQ(r.rows[1].modality, Modality::opp);
  EXPECT_EQ(r.rows[2].modality, Modality::wat);
}
