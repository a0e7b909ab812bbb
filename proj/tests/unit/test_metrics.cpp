#include <gtest/gtest.h>

#include <cmath>

#include "cats/errors.hpp"
#include "cats/metrics.hpp"
#include "cats/oracles/oracles.hpp"
#include "cats/random.hpp"

namespace cats::metrics {
namespace {

Mask mask_of(GridDims dims, std::initializer_list<Extent3> voxels) {
  Mask m(dims, 1);
  for (const auto& v : voxels) m.at(v[0], v[1], v[2]) = 1;
  return m;
}

Mask random_blob(GridDims dims, Rng& rng) {
  Mask m(dims, 1);
  const double ci = rng.uniform(0, static_cast<double>(dims.d)), cj = rng.uniform(0, static_cast<double>(dims.h)),
               ck = rng.uniform(0, static_cast<double>(dims.w));
  const double r = rng.uniform(1.0, 4.0);
  for (std::int64_t i = 0; i < dims.d; ++i)
    for (std::int64_t j = 0; j < dims.h; ++j)
      for (std::int64_t k = 0; k < dims.w; ++k) {
        const double d2 = (i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck);
        if (d2 <= r * r || rng.uniform() < 0.03) m.at(i, j, k) = 1;
      }
  return m;
}

TEST(Dice, IdenticalDisjointAndHalfOverlap) {
  const GridDims dims{3, 3, 3};
  const auto a = mask_of(dims, {{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}});
  EXPECT_EQ(dice(a, a, 1), 1.0);
  EXPECT_EQ(dice(a, mask_of(dims, {{2, 2, 2}}), 1), 0.0);
  const auto b = mask_of(dims, {{0, 1, 0}, {0, 2, 0}, {1, 1, 0}, {1, 2, 0}});
  EXPECT_EQ(dice(a, b, 1), 0.5);
}

TEST(Dice, EmptyConventionsAndDimMismatch) {
  const Mask empty({2, 2, 2}, 1);
  EXPECT_EQ(dice(empty, empty, 1), 1.0);
  EXPECT_EQ(dice(empty, mask_of({2, 2, 2}, {{0, 0, 0}}), 1), 0.0);
  EXPECT_THROW(dice(empty, Mask({2, 2, 3}, 1), 1), PreconditionError);
}

TEST(Surface, SingleVoxelCubeAndEmpty) {
  const auto one = extract_surface(mask_of({3, 3, 3}, {{1, 1, 1}}), {});
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.voxels[0], (Extent3{1, 1, 1}));
  Mask cube({3, 3, 3}, 1);
  for (auto& v : cube.voxels) v = 1;
  const auto s = extract_surface(cube, {});
  EXPECT_EQ(s.size(), 26u);
  for (const auto& v : s.voxels) EXPECT_NE(v, (Extent3{1, 1, 1}));
  EXPECT_TRUE(extract_surface(Mask({3, 3, 3}, 1), {}).empty());
}

TEST(Distances, IdenticalMasksAreZero) {
  Rng rng(1);
  const auto m = random_blob({8, 8, 8}, rng);
  EXPECT_EQ(asd(m, m, {}).value(), 0.0);
  EXPECT_EQ(hd95(m, m, {}).value(), 0.0);
}

TEST(Distances, TwoVoxelsThreeApart) {
  const GridDims dims{1, 1, 5};
  const auto a = mask_of(dims, {{0, 0, 0}});
  const auto b = mask_of(dims, {{0, 0, 3}});
  EXPECT_EQ(asd(a, b, {}).value(), 3.0);
  EXPECT_EQ(hd95(a, b, {}).value(), 3.0);
}

TEST(Distances, AnisotropicSpacing) {
  const GridDims dims{1, 1, 2};
  const auto a = mask_of(dims, {{0, 0, 0}});
  const auto b = mask_of(dims, {{0, 0, 1}});
  EXPECT_EQ(asd(a, b, {1, 1, 2}).value(), 2.0);
}

TEST(Distances, UndefinedOnEmptySurface) {
  const GridDims dims{2, 2, 2};
  EXPECT_FALSE(asd(Mask(dims, 1), mask_of(dims, {{0, 0, 0}}), {}).has_value());
  EXPECT_FALSE(hd95(mask_of(dims, {{0, 0, 0}}), Mask(dims, 1), {}).has_value());
}

TEST(Percentile, NineteenZerosAndATen) {
  std::vector<double> v(19, 0.0);
  v.push_back(10.0);
  EXPECT_DOUBLE_EQ(percentile(v, 95), 0.5);
  EXPECT_EQ(percentile({4.0}, 95), 4.0);
  EXPECT_EQ(percentile({1.0, 2.0, 3.0}, 100), 3.0);
  EXPECT_EQ(percentile({3.0, 1.0, 2.0}, 50), 2.0);
}

TEST(Distances, MatchAllPairsOracleExactly) {
  Rng rng(2);
  const double choices[] = {0.5, 1.0, 1.5, 2.0, 2.5};
  for (int trial = 0; trial < 60; ++trial) {
    const GridDims dims{4 + static_cast<std::int64_t>(rng.below(9)), 4 + static_cast<std::int64_t>(rng.below(9)),
                        4 + static_cast<std::int64_t>(rng.below(9))};
    const Spacing sp{choices[rng.below(5)], choices[rng.below(5)], choices[rng.below(5)]};
    const auto a = random_blob(dims, rng);
    const auto b = random_blob(dims, rng);
    EXPECT_EQ(dice(a, b, 1), oracles::dice(a, b, 1));
    EXPECT_EQ(asd(a, b, sp), oracles::asd(a, b, sp)) << trial;
    EXPECT_EQ(hd95(a, b, sp), oracles::hd95(a, b, sp)) << trial;
    EXPECT_EQ(surface_distances(a, b, sp), oracles::pooled_distances(a, b, sp));
  }
}

TEST(Distances, SymmetricAndTranslationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const GridDims dims{10, 10, 10};
    Mask a(dims, 1), b(dims, 1), a2(dims, 1), b2(dims, 1);
    // Blobs kept inside [0, 7] so a (2, 1, 2) translation stays in bounds.
    for (std::int64_t i = 0; i < 8; ++i)
      for (std::int64_t j = 0; j < 8; ++j)
        for (std::int64_t k = 0; k < 8; ++k) {
          const bool in_a = rng.uniform() < 0.3, in_b = rng.uniform() < 0.3;
          a.at(i, j, k) = in_a;
          b.at(i, j, k) = in_b;
          a2.at(i + 2, j + 1, k + 2) = in_a;
          b2.at(i + 2, j + 1, k + 2) = in_b;
        }
    const Spacing sp{1.0, 0.5, 2.0};
    EXPECT_EQ(dice(a, b, 1), dice(b, a, 1));
    EXPECT_EQ(asd(a, b, sp), asd(b, a, sp));
    EXPECT_EQ(hd95(a, b, sp), hd95(b, a, sp));
    EXPECT_EQ(dice(a, b, 1), dice(a2, b2, 1));
    EXPECT_EQ(asd(a, b, sp), asd(a2, b2, sp));
    EXPECT_EQ(hd95(a, b, sp), hd95(a2, b2, sp));
  }
}

TEST(Distances, SpacingScalesDistancesExactly) {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_blob({9, 9, 9}, rng);
    const auto b = random_blob({9, 9, 9}, rng);
    const Spacing sp{1.0, 1.5, 0.5};
    for (double c : {2.0, 0.5, 4.0}) {
      const Spacing scaled{sp.d * c, sp.h * c, sp.w * c};
      EXPECT_EQ(asd(a, b, scaled).value(), c * asd(a, b, sp).value());
      EXPECT_EQ(hd95(a, b, scaled).value(), c * hd95(a, b, sp).value());
    }
  }
}

TEST(Distances, HausdorffPercentileBoundedByMaximum) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto a = random_blob({8, 8, 8}, rng);
    const auto b = random_blob({8, 8, 8}, rng);
    const auto d = surface_distances(a, b, {});
    EXPECT_LE(hd95(a, b, {}).value(), *std::max_element(d.begin(), d.end()));
    EXPECT_GE(hd95(a, b, {}).value(), 0.0);
  }
}

CaseMetrics case_with_dice(const std::string& id, double d) {
  CaseMetrics c;
  c.case_id = id;
  c.classes.push_back({d, 0.5, 1.0});
  return c;
}

TEST(Aggregate, MeanAndPopulationStd) {
  const auto one = aggregate({case_with_dice("a", 0.7)}, 2);
  EXPECT_EQ(format_mean_std(one.per_class[0].dice, 3), "0.700 (0.000)");
  const auto two = aggregate({case_with_dice("a", 0.8), case_with_dice("b", 0.9)}, 2);
  EXPECT_NEAR(two.per_class[0].dice.mean, 0.85, 1e-15);
  EXPECT_EQ(format_mean_std(two.per_class[0].dice, 3), "0.850 (0.050)");
  EXPECT_THROW(aggregate({}, 2), PreconditionError);
}

TEST(Aggregate, UndefinedDistancesAreExcludedAndCounted) {
  auto a = case_with_dice("a", 0.0);
  a.classes[0].asd_mm.reset();
  a.classes[0].hd95_mm.reset();
  const auto r = aggregate({a, case_with_dice("b", 1.0)}, 2);
  EXPECT_EQ(r.per_class[0].asd_mm.count, 1);
  EXPECT_EQ(r.per_class[0].asd_mm.excluded, 1);
  EXPECT_EQ(r.per_class[0].dice.count, 2);
  EXPECT_NE(render_csv(r).find("a,1,0,nan,nan"), std::string::npos) << render_csv(r);
}

TEST(Report, MeanStdRendering) {
  Summary s;
  s.count = 4;
  s.mean = 0.886;
  s.std = 0.076;
  EXPECT_EQ(format_mean_std(s, 3), "0.886 (0.076)");
  s.mean = 0.48;
  s.std = 0.1;
  EXPECT_EQ(format_mean_std(s, 2), "0.48 (0.10)");
}

TEST(Report, SelfEvaluationIsPerfect) {
  Rng rng(6);
  LabelVolume gt({8, 8, 8}, 1);
  for (auto& v : gt.voxels) v = static_cast<std::uint8_t>(rng.below(3));
  const auto r = aggregate({evaluate_case("c0", gt, gt, 3), evaluate_case("c1", gt, gt, 3)}, 3);
  ASSERT_EQ(r.per_class.size(), 2u);
  for (const auto& c : r.per_class) {
    EXPECT_EQ(format_mean_std(c.dice, 3), "1.000 (0.000)");
    EXPECT_EQ(format_mean_std(c.asd_mm, 2), "0.00 (0.00)");
    EXPECT_EQ(format_mean_std(c.hd95_mm, 2), "0.00 (0.00)");
  }
  const std::string summary = render_summary(r);
  EXPECT_NE(summary.find("1.000 (0.000)"), std::string::npos) << summary;
}

TEST(Report, CsvHasOneRowPerCaseAndClass) {
  LabelVolume gt({4, 4, 4}, 1);
  gt.at(1, 1, 1) = 1;
  gt.at(2, 2, 2) = 2;
  const auto r = aggregate({evaluate_case("x", gt, gt, 3), evaluate_case("y", gt, gt, 3)}, 3);
  const std::string csv = render_csv(r);
  EXPECT_EQ(csv.rfind("case_id,class,dice,asd_mm,hd95_mm\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

}  // namespace
}  // namespace cats::metrics
