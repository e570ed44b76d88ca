#include <gtest/gtest.h>

#include "ivdseg/augment.hpp"

using namespace ivdseg;

namespace {

Volume random_volume(Dims4 d, std::uint64_t seed, float lo = 0, float hi = 100) {
  SplitMix64 rng(seed);
  std::vector<float> data(d.size());
  for (auto& v : data) v = static_cast<float>(rng.uniform(lo, hi));
  return Volume(d, {2, 1, 1}, VolumeKind::intensity, std::move(data));
}

Volume ball_label(Extent3 e, double r) {
  Volume v({1, e.z, e.y, e.x}, {2, 1, 1}, VolumeKind::label);
  const double cz = (e.z - 1) / 2.0, cy = (e.y - 1) / 2.0, cx = (e.x - 1) / 2.0;
  for (std::size_t z = 0; z < e.z; ++z)
    for (std::size_t y = 0; y < e.y; ++y)
      for (std::size_t x = 0; x < e.x; ++x)
        if ((z - cz) * (z - cz) + (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r) v.at(0, z, y, x) = 1;
  return v;
}

MultiModalSample dixon_sample(Extent3 e, std::uint64_t seed) {
  MultiModalSample s;
  s.sample_id = "s" + std::to_string(seed);
  auto wat = random_volume({1, e.z, e.y, e.x}, seed);
  auto fat = random_volume({1, e.z, e.y, e.x}, seed + 1000, 0, 40);
  std::vector<float> inn(wat.data().size());
  for (std::size_t i = 0; i < inn.size(); ++i) inn[i] = wat.data()[i] + fat.data()[i];
  s.modalities.emplace(Modality::inn, Volume(wat.dims(), wat.spacing(), VolumeKind::intensity, inn));
  s.modalities.emplace(Modality::wat, std::move(wat));
  s.modalities.emplace(Modality::fat, std::move(fat));
  s.label = ball_label(e, std::min({e.z, e.y, e.x}) / 3.0);
  return s;
}

}  // namespace

TEST(ElasticField, ZeroAlphaIsZero) {
  const auto f = elastic_field({6, 7, 8}, 4.0, 0.0, 1);
  for (const auto& c : f.component)
    for (float v : c) EXPECT_EQ(v, 0.0f);
}

TEST(ElasticField, DeterministicPerSeed) {
  const auto a = elastic_field({5, 6, 7}, 2.0, 8.0, 9), b = elastic_field({5, 6, 7}, 2.0, 8.0, 9);
  const auto c = elastic_field({5, 6, 7}, 2.0, 8.0, 10);
  EXPECT_EQ(a.component, b.component);
  EXPECT_NE(a.component, c.component);
  EXPECT_THROW(elastic_field({5, 6, 7}, 0.0, 8.0, 9), DomainError);
  EXPECT_THROW(elastic_field({5, 6, 7}, -1.0, 8.0, 9), DomainError);
}

TEST(ElasticField, BlurReducesSecondDifferences) {
  const Extent3 e{32, 32, 32};
  const auto f = elastic_field(e, 4.0, 1.0, 5);
  // the raw field is the uniform draw that elastic_field blurs (same seed derivation)
  for (std::size_t a = 0; a < 3; ++a) {
    SplitMix64 rng(derive_seed(5, {a}));
    std::vector<double> raw(e.voxels());
    for (auto& r : raw) r = rng.uniform(-1.0, 1.0);
    auto max_d2 = [&](auto get) {
      double m = 0;
      for (std::size_t z = 0; z < e.z; ++z)
        for (std::size_t y = 0; y < e.y; ++y)
          for (std::size_t x = 1; x + 1 < e.x; ++x) {
            const std::size_t i = (z * e.y + y) * e.x + x;
            m = std::max(m, std::abs(get(i - 1) - 2 * get(i) + get(i + 1)));
          }
      return m;
    };
    const double blurred = max_d2([&](std::size_t i) { return static_cast<double>(f.component[a][i]); });
    const double rough = max_d2([&](std::size_t i) { return raw[i]; });
    EXPECT_LT(blurred, rough);
    EXPECT_LT(blurred, 0.1 * rough);
  }
}

TEST(Deformation, ZeroFieldIsIdentity) {
  const auto v = random_volume({1, 4, 5, 6}, 1);
  const auto f = elastic_field({4, 5, 6}, 1.0, 0.0, 1);
  EXPECT_EQ(apply_deformation(v, f, Interpolation::cubic), v);
  EXPECT_EQ(apply_deformation(v, f, Interpolation::nearest), v);
}

TEST(Deformation, IntegerShiftMatchesIndexShift) {
  const auto v = random_volume({1, 3, 4, 5}, 2);
  DisplacementField f{{3, 4, 5}, {}, 1, 1};
  for (auto& c : f.component) c.assign(60, 0.0f);
  std::fill(f.component[2].begin(), f.component[2].end(), 1.0f);
  for (auto interp : {Interpolation::cubic, Interpolation::nearest}) {
    const auto out = apply_deformation(v, f, interp);
    for (std::size_t z = 0; z < 3; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 5; ++x) EXPECT_EQ(out.at(0, z, y, x), x + 1 < 5 ? v.at(0, z, y, x + 1) : 0.0f);
  }
}

TEST(Deformation, LabelsStayBinaryAndRejectCubic) {
  const auto lab = ball_label({12, 12, 12}, 4);
  const auto f = elastic_field({12, 12, 12}, 2.0, 3.0, 7);
  const auto out = apply_deformation(lab, f, Interpolation::nearest);
  for (float v : out.data()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
  EXPECT_THROW(apply_deformation(lab, f, Interpolation::cubic), ContractError);
  EXPECT_THROW(apply_deformation(lab, elastic_field({12, 12, 11}, 2.0, 3.0, 7), Interpolation::nearest),
               DimensionError);
}

TEST(Affine, IdentityAndFlipInvolution) {
  const auto v = random_volume({1, 4, 5, 6}, 3);
  EXPECT_EQ(apply_affine(v, {}, Interpolation::cubic), v);
  AffineParams flip;
  flip.flip = {false, false, true};
  const auto once = apply_affine(v, flip, Interpolation::cubic);
  EXPECT_NE(once, v);
  EXPECT_EQ(once.at(0, 1, 2, 0), v.at(0, 1, 2, 5));
  EXPECT_EQ(apply_affine(once, flip, Interpolation::cubic), v);
}

TEST(Affine, QuarterTurnAboutZIsPermutation) {
  const auto v = random_volume({1, 3, 7, 7}, 4);
  AffineParams p;
  p.rotate_deg = {90, 0, 0};
  const auto out = apply_affine(v, p, Interpolation::nearest);
  // forward map (y, x) -> (-x, y) about the center, so out(y, x) = in(x, n-1-y)
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 7; ++x) EXPECT_EQ(out.at(0, z, y, x), v.at(0, z, x, 6 - y));
  const auto cubic = apply_affine(v, p, Interpolation::cubic);
  for (std::size_t z = 0; z < 3; ++z)
    for (std::size_t y = 0; y < 7; ++y)
      for (std::size_t x = 0; x < 7; ++x) EXPECT_NEAR(cubic.at(0, z, y, x), v.at(0, z, x, 6 - y), 1e-3);
}

TEST(Affine, IntegerTranslationShiftsContent) {
  const auto v = random_volume({1, 4, 6, 6}, 5);
  AffineParams p;
  p.translate = {0, 2, -1};
  const auto out = apply_affine(v, p, Interpolation::cubic);
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t y = 0; y < 6; ++y)
      for (std::size_t x = 0; x < 6; ++x) {
        const long sy = long(y) - 2, sx = long(x) + 1;
        const float expected = (sy >= 0 && sx < 6) ? v.at(0, z, sy, sx) : 0.0f;
        EXPECT_NEAR(out.at(0, z, y, x), expected, 1e-4);
      }
}

TEST(Augment, DixonIdentitySurvivesCubicOps) {
  const auto s = dixon_sample({10, 16, 16}, 11);
  AugmentBounds b;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const auto spec = random_augment_spec(b, seed);
    ASSERT_FALSE(spec.ops.empty());
    const auto out = apply_augment_spec(s, spec);
    const auto inn = out.modality(Modality::inn).data(), wat = out.modality(Modality::wat).data(),
               fat = out.modality(Modality::fat).data();
    for (std::size_t i = 0; i < inn.size(); ++i) {
      const double resid = std::abs(inn[i] - wat[i] - fat[i]);
      EXPECT_LE(resid, 1e-4 * std::max(1.0, std::abs(static_cast<double>(inn[i])))) << spec.describe();
    }
  }
}

TEST(Augment, DatasetSizeOrderAndDeterminism) {
  std::vector<MultiModalSample> six;
  for (std::uint64_t i = 0; i < 6; ++i) six.push_back(dixon_sample({6, 8, 8}, i));
  const auto a = augment_dataset(six, 3, {}, 42);
  ASSERT_EQ(a.size(), 24u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(a[i].sample_id, six[i].sample_id);
    EXPECT_EQ(a[i].modality(Modality::wat), six[i].modality(Modality::wat));
  }
  EXPECT_EQ(a[6].sample_id, "s0-aug1");
  const auto b = augment_dataset(six, 3, {}, 42);
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (const auto& [m, v] : a[i].modalities) EXPECT_EQ(v, b[i].modality(m));
    EXPECT_EQ(*a[i].label, *b[i].label);
  }
  const auto none = augment_dataset(six, 0, {}, 42);
  ASSERT_EQ(none.size(), 6u);
  EXPECT_EQ(none[3].modality(Modality::fat), six[3].modality(Modality::fat));
}

TEST(Augment, RecipesRespectBounds) {
  AugmentBounds b;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const auto spec = random_augment_spec(b, seed);
    ASSERT_FALSE(spec.ops.empty());
    for (const auto& op : spec.ops) {
      for (std::size_t a = 0; a < 3; ++a) {
        EXPECT_LE(std::abs(op.affine.translate[a]), b.translate);
        EXPECT_LE(std::abs(op.affine.rotate_deg[a]), b.rotate_deg[a]);
        EXPECT_GE(op.affine.scale[a], b.scale_min);
        EXPECT_LE(op.affine.scale[a], b.scale_max);
      }
      if (op.kind == AugmentOpKind::elastic) {
        EXPECT_EQ(op.delta, 4.0);
        EXPECT_EQ(op.alpha, 8.0);
      }
    }
  }
}
