/*
 * Copyright 2026 The AtomForge Authors. All Rights Reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "atomforge/reorder.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <numeric>
#include <set>

using namespace atomforge;

namespace
{

// Oracle for a single column block: independent symmetric per-group MSE in
// double, groups along columns of each row.
double block_mse(const Matrix &m, std::size_t group, int n)
{
  if (m.cols() == 0)
    return 0.0;
  double err = 0.0;
  const double qmax = (1 << (n - 1)) - 1, qmin = -(1 << (n - 1));
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t g0 = 0; g0 < m.cols(); g0 += group)
    {
      double amax = 0.0;
      for (std::size_t j = g0; j < g0 + group; ++j)
        amax = std::max(amax, std::fabs(static_cast<double>(m(r, j))));
      double s = 2.0 * amax / ((1 << n) - 1);
      if (s == 0.0)
        s = std::numeric_limits<float>::min();
      for (std::size_t j = g0; j < g0 + group; ++j)
      {
        const double q = std::clamp(test_support::round_half_even(m(r, j) / s), qmin, qmax);
        err += (m(r, j) - s * q) * (m(r, j) - s * q);
      }
    }
  return err;
}

} // namespace

TEST(CalibrateOutliers, Examples)
{
  std::vector<Matrix> calib{Matrix::from_rows({{1, 10, 1}})};
  auto plan = calibrate_outliers(calib, 1);
  EXPECT_EQ(plan.permutation(), (std::vector<std::size_t>{0, 2, 1}));
  ASSERT_EQ(plan.outliers().size(), 1u);
  EXPECT_EQ(plan.outliers()[0], 1u);

  EXPECT_EQ(calibrate_outliers(calib, 0), ReorderPlan::identity(3));

  std::vector<Matrix> tie{Matrix::from_rows({{3, 0, 3}})};
  auto tplan = calibrate_outliers(tie, 1);
  EXPECT_EQ(tplan.outliers()[0], 0u);
  EXPECT_EQ(tplan.permutation(), (std::vector<std::size_t>{1, 2, 0}));
}

TEST(CalibrateOutliers, PoolsAcrossMatricesAndChecksShapes)
{
  // Channel 0 leads the first matrix; pooled, channel 2 has 16 against 9.
  std::vector<Matrix> calib{Matrix::from_rows({{3, 0, 0}}), Matrix::from_rows({{0, 2, 4}})};
  EXPECT_EQ(calibrate_outliers(calib, 1).outliers()[0], 2u);
  std::vector<Matrix> bad{Matrix(1, 3, 0.0f), Matrix(1, 4, 0.0f)};
  EXPECT_THROW(calibrate_outliers(bad, 1), ShapeError);
  EXPECT_THROW(calibrate_outliers(calib, 4), ShapeError);
}

TEST(CalibrateOutliers, OutlierCoverageProperty)
{
  std::mt19937_64 rng(21);
  std::uniform_int_distribution<std::size_t> kdist(0, 64);
  for (int trial = 0; trial < 50; ++trial)
  {
    std::vector<Matrix> calib;
    for (int i = 0; i < 3; ++i)
      calib.push_back(test_support::random_matrix(rng, 8, 64));
    const std::size_t k = kdist(rng);
    auto plan = calibrate_outliers(calib, k);

    std::vector<double> score(64, 0.0);
    for (const auto &m : calib)
      for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < 64; ++c)
          score[c] += static_cast<double>(m(r, c)) * m(r, c);
    std::set<std::size_t> selected(plan.outliers().begin(), plan.outliers().end());
    ASSERT_EQ(selected.size(), k);
    double min_sel = 1e300, max_rest = -1.0;
    for (std::size_t c = 0; c < 64; ++c)
    {
      if (selected.count(c))
        min_sel = std::min(min_sel, score[c]);
      else
        max_rest = std::max(max_rest, score[c]);
    }
    if (k > 0 && k < 64)
    {
      ASSERT_GE(min_sel, max_rest);
    }
    // Both blocks keep ascending original order.
    auto perm = plan.permutation();
    ASSERT_TRUE(std::is_sorted(perm.begin(), perm.begin() + (64 - k)));
    ASSERT_TRUE(std::is_sorted(perm.begin() + (64 - k), perm.end()));
  }
}

TEST(ReorderPlanTest, ValidatesAndSerializes)
{
  EXPECT_THROW(ReorderPlan({0, 0, 1}, 1), ArgumentError);
  EXPECT_THROW(ReorderPlan({0, 3, 1}, 1), ArgumentError);
  EXPECT_THROW(ReorderPlan({0, 1}, 3), ShapeError);
  ReorderPlan plan({2, 0, 3, 1}, 2);
  auto j = plan.to_json();
  EXPECT_EQ(j["hidden_dim"], 4);
  EXPECT_EQ(j["outlier_count"], 2);
  EXPECT_EQ(ReorderPlan::from_json(j), plan);
  j["hidden_dim"] = 5;
  EXPECT_THROW(ReorderPlan::from_json(j), ShapeError);
  EXPECT_THROW(ReorderPlan::from_json(nlohmann::json{{"permutation", 3}}), ParseError);
}

TEST(ReorderActivation, Examples)
{
  auto m = Matrix::from_rows({{1.5f, 2.5f, 3.5f}});
  EXPECT_EQ(reorder_activation_cols(m, ReorderPlan::identity(3)), m);
  ReorderPlan plan({0, 2, 1}, 1);
  EXPECT_EQ(reorder_activation_cols(m, plan), Matrix::from_rows({{1.5f, 3.5f, 2.5f}}));
  EXPECT_EQ(restore_activation_cols(reorder_activation_cols(m, plan), plan), m);
  EXPECT_THROW(reorder_activation_cols(Matrix(1, 4), plan), ShapeError);
}

TEST(ReorderWeight, PermutationCancellationIsBitExact)
{
  std::mt19937_64 rng(22);
  for (int trial = 0; trial < 20; ++trial)
  {
    Matrix a = test_support::random_matrix(rng, 8, 16);
    Matrix w = test_support::random_matrix(rng, 16, 4);
    std::vector<std::size_t> perm(16);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    ReorderPlan plan(perm, 4);

    EXPECT_EQ(reorder_weight_rows(w, ReorderPlan::identity(16)), w);
    EXPECT_EQ(restore_weight_rows(reorder_weight_rows(w, plan), plan), w);

    // Exact check: each product is accumulated in the same permuted order on
    // both sides, so the oracle sums the pairs in plan order directly.
    Matrix ar = reorder_activation_cols(a, plan);
    Matrix wr = reorder_weight_rows(w, plan);
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 4; ++j)
      {
        float lhs = 0.0f, rhs = 0.0f;
        for (std::size_t k = 0; k < 16; ++k)
        {
          lhs += a(i, perm[k]) * w(perm[k], j);
          rhs += ar(i, k) * wr(k, j);
        }
        ASSERT_EQ(std::bit_cast<std::uint32_t>(lhs), std::bit_cast<std::uint32_t>(rhs));
      }
    // Double-precision products agree to rounding regardless of order.
    auto exact = test_support::matmul_f64(a, w);
    auto permuted = test_support::matmul_f64(ar, wr);
    for (std::size_t i = 0; i < exact.size(); ++i)
      ASSERT_NEAR(exact[i], permuted[i], 1e-12);
  }
}

TEST(FusedReorderQuantize, ZeroOutliersMatchesPlainQuantization)
{
  std::mt19937_64 rng(23);
  Matrix m = test_support::random_matrix(rng, 4, 256);
  MixedPrecisionSpec spec;
  auto plan = ReorderPlan::identity(256);
  auto fused = fused_reorder_quantize(m, plan, spec);
  EXPECT_EQ(fused.outlier.cols(), 0u);
  auto direct = quantize_matrix(m, spec.scheme, 4, 1.0f, true, ChannelAxis::kCols);
  EXPECT_EQ(fused.normal.codes(), direct.codes());
  EXPECT_EQ(fused.normal.params(), direct.params());
}

TEST(FusedReorderQuantize, GroupCounts)
{
  std::mt19937_64 rng(24);
  Matrix m = test_support::random_matrix(rng, 3, 256);
  std::vector<Matrix> calib{m};
  auto plan = calibrate_outliers(calib, 128);
  auto fused = fused_reorder_quantize(m, plan, MixedPrecisionSpec{});
  EXPECT_EQ(fused.normal.groups_per_line(), 1u);
  EXPECT_EQ(fused.outlier.groups_per_line(), 1u);
  EXPECT_EQ(fused.outlier.bit_width(), 8);
  EXPECT_EQ(fused.hidden_dim(), 256u);
  EXPECT_EQ(dequantize(fused).cols(), 256u);
}

TEST(FusedReorderQuantize, HugeChannelMovesOutOfTheNormalBlock)
{
  std::mt19937_64 rng(25);
  Matrix m = test_support::random_matrix(rng, 16, 64);
  for (std::size_t r = 0; r < m.rows(); ++r)
    m(r, 17) *= 100.0f;
  std::vector<Matrix> calib{m};
  auto plan = calibrate_outliers(calib, 1);
  ASSERT_EQ(plan.outliers()[0], 17u);

  MixedPrecisionSpec spec;
  spec.scheme = GroupScheme::per_token();
  auto fused = fused_reorder_quantize(m, plan, spec);
  const Matrix normal_fp = slice_cols(reorder_activation_cols(m, plan), 0, 63);
  const double mixed = test_support::rel_frobenius(dequantize(fused.normal), normal_fp);

  const double uniform_oracle = block_mse(m, 64, 4);
  const double normal_oracle = block_mse(normal_fp, 63, 4);
  EXPECT_LT(normal_oracle, uniform_oracle);
  // The library's normal block agrees with the oracle's error.
  const Matrix dq = dequantize(fused.normal);
  double lib = 0.0;
  for (std::size_t i = 0; i < dq.size(); ++i)
    lib += (dq.data()[i] - normal_fp.data()[i]) * static_cast<double>(dq.data()[i] - normal_fp.data()[i]);
  EXPECT_NEAR(lib, normal_oracle, 1e-6 * normal_oracle + 1e-9);
  EXPECT_LT(mixed, 0.2);
}

TEST(FusedReorderQuantize, MixedPrecisionGainProperty)
{
  std::mt19937_64 rng(26);
  std::uniform_int_distribution<std::size_t> channel(0, 255);
  double mixed_total = 0.0, uniform_total = 0.0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t)
  {
    Matrix m = test_support::random_matrix(rng, 8, 256);
    std::set<std::size_t> chosen;
    while (chosen.size() < 8)
      chosen.insert(channel(rng));
    for (std::size_t c : chosen)
      for (std::size_t r = 0; r < m.rows(); ++r)
        m(r, c) *= 100.0f;
    std::vector<Matrix> calib{m};
    auto plan = calibrate_outliers(calib, 8);
    MixedPrecisionSpec spec;
    spec.scheme = GroupScheme::per_token();
    Matrix mixed = restore_activation_cols(dequantize(fused_reorder_quantize(m, plan, spec)), plan);
    Matrix uniform = dequantize(quantize_matrix(m, GroupScheme::per_token(), 4, 1.0f, true, ChannelAxis::kCols));
    auto sq = [&](const Matrix &x) {
      double e = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i)
        e += (x.data()[i] - m.data()[i]) * static_cast<double>(x.data()[i] - m.data()[i]);
      return e / static_cast<double>(x.size());
    };
    mixed_total += sq(mixed);
    uniform_total += sq(uniform);
  }
  EXPECT_LT(mixed_total / trials, uniform_total / trials);
}
