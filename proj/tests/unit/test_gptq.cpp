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

#include "atomforge/gptq.hpp"
#include "atomforge/parallel.hpp"
#include "support/test_support.hpp"

#include <Eigen/Eigenvalues>
#include <gtest/gtest.h>

using namespace atomforge;

namespace
{

// Symmetric n-bit round to nearest of one value with a given scale. The
// ratio is formed in float, matching 32-bit reference arithmetic, so that
// ties like 3.5 land identically.
double oracle_code(double x, float s, int n)
{
  const double lo = -(1 << (n - 1)), hi = (1 << (n - 1)) - 1;
  const float ratio = static_cast<float>(x) / s;
  return std::clamp(test_support::round_half_even(ratio), lo, hi);
}

using test_support::correlated_tokens;
using test_support::direct_proxy_loss;

} // namespace

TEST(Hessian, OuterProductsAndDamping)
{
  std::vector<Matrix> one{Matrix::from_rows({{1, 0}})};
  auto h = accumulate_hessian(one);
  EXPECT_EQ(h.raw(0, 0), 1.0);
  EXPECT_EQ(h.raw(0, 1), 0.0);
  EXPECT_EQ(h.raw(1, 1), 0.0);
  // The silent channel gets unit curvature before damping; damping is 1% of
  // the resulting mean diagonal (1.0).
  EXPECT_DOUBLE_EQ(h.matrix()[0], 1.01);
  EXPECT_DOUBLE_EQ(h.matrix()[3], 1.01);
  EXPECT_EQ(h.matrix()[1], 0.0);

  std::vector<Matrix> twice{Matrix::from_rows({{1, 2}}), Matrix::from_rows({{1, 2}, {1, 2}})};
  auto h3 = accumulate_hessian(twice, 0.0);
  EXPECT_EQ(h3.tokens(), 3u);
  EXPECT_EQ(h3.raw(0, 1), 6.0);
  EXPECT_EQ(h3.raw(1, 1), 12.0);

  CalibrationHessian empty(3);
  EXPECT_THROW(empty.finalize(), ArgumentError);
  EXPECT_THROW(empty.matrix(), StateError);
  EXPECT_THROW(empty.add(Matrix(1, 2)), ShapeError);
}

TEST(Hessian, SymmetricAndPositiveSemidefinite)
{
  std::mt19937_64 rng(41);
  for (int trial = 0; trial < 10; ++trial)
  {
    std::vector<Matrix> acts{correlated_tokens(rng, 20, 32), correlated_tokens(rng, 7, 32)};
    auto h = accumulate_hessian(acts);
    Eigen::MatrixXd raw(32, 32), damped(32, 32);
    for (std::size_t i = 0; i < 32; ++i)
      for (std::size_t j = 0; j < 32; ++j)
      {
        raw(i, j) = h.raw(i, j);
        damped(i, j) = h.matrix()[i * 32 + j];
        ASSERT_NEAR(h.raw(i, j), h.raw(j, i), 1e-6);
      }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(raw);
    ASSERT_GE(es.eigenvalues().minCoeff(), -1e-6 * es.eigenvalues().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ed(damped);
    ASSERT_GT(ed.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(Hessian, PermutedMatchesReorderedActivations)
{
  std::mt19937_64 rng(42);
  std::vector<Matrix> acts{correlated_tokens(rng, 16, 8)};
  auto plan = calibrate_outliers(acts, 3);
  std::vector<Matrix> reordered{reorder_activation_cols(acts[0], plan)};
  auto direct = accumulate_hessian(reordered);
  auto permuted = accumulate_hessian(acts).permuted(plan);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      ASSERT_NEAR(direct.raw(i, j), permuted.raw(i, j), 1e-9 * (1.0 + std::fabs(direct.raw(i, j))));
}

TEST(Gptq, DiagonalHessianEqualsRoundToNearest)
{
  std::mt19937_64 rng(43);
  std::uniform_real_distribution<float> gain(0.2f, 3.0f);
  Matrix x(64, 64, 0.0f);
  for (std::size_t i = 0; i < 64; ++i)
    x(i, i) = gain(rng);
  std::vector<Matrix> acts{x};
  auto h = accumulate_hessian(acts);
  Matrix w = test_support::random_matrix(rng, 64, 24);
  for (auto scheme : {GroupScheme::per_group(32), GroupScheme::per_channel(), GroupScheme::per_tensor()})
  {
    auto gptq = gptq_quantize_weight(w, h, scheme, 4, 0.9f);
    auto rtn = quantize_matrix(w, scheme, 4, 0.9f, true, ChannelAxis::kRows);
    EXPECT_EQ(gptq.codes(), rtn.codes());
    EXPECT_EQ(gptq.params(), rtn.params());
  }
}

TEST(Gptq, TwoByTwoCorrelatedToy)
{
  // X^T X = [[1, 0.9], [0.9, 1]] with X the transposed lower Cholesky factor.
  const float r = std::sqrt(0.19f);
  Matrix x = Matrix::from_rows({{1.0f, 0.9f}, {0.0f, r}});
  std::vector<Matrix> acts{x};
  auto h = accumulate_hessian(acts);

  std::mt19937_64 rng(44);
  Matrix w = test_support::random_matrix(rng, 2, 32);
  auto q = gptq_quantize_weight(w, h, GroupScheme::per_channel(), 3);
  const Matrix gptq_hat = dequantize(q);

  // Closed form for two rows: damped inverse, then one compensation step
  // w1 -= (w0 - w0_hat) * Hinv01 / Hinv00. Scales come from the original
  // column since both rows share one group entered at row 0.
  const double h00 = h.raw(0, 0) + 0.01 * (h.raw(0, 0) + h.raw(1, 1)) / 2.0;
  const double h11 = h.raw(1, 1) + 0.01 * (h.raw(0, 0) + h.raw(1, 1)) / 2.0;
  const double h01 = h.raw(0, 1);
  const double det = h00 * h11 - h01 * h01;
  const double inv00 = h11 / det, inv01 = -h01 / det;
  Matrix rtn_hat(2, 32);
  for (std::size_t c = 0; c < 32; ++c)
  {
    const double s = 2.0 * std::max(std::fabs(w(0, c)), std::fabs(w(1, c))) / 7.0;
    const float sf = static_cast<float>(s);
    const double q0 = oracle_code(w(0, c), sf, 3);
    const double w1 = w(1, c) - (w(0, c) - q0 * sf) * inv01 / inv00;
    const double q1 = oracle_code(w1, sf, 3);
    EXPECT_EQ(q.codes().code(0, c), static_cast<int>(q0)) << "col " << c;
    EXPECT_EQ(q.codes().code(1, c), static_cast<int>(q1)) << "col " << c;
    rtn_hat(0, c) = static_cast<float>(oracle_code(w(0, c), sf, 3) * sf);
    rtn_hat(1, c) = static_cast<float>(oracle_code(w(1, c), sf, 3) * sf);
  }
  const double gptq_loss = direct_proxy_loss(x, w, gptq_hat);
  const double rtn_loss = direct_proxy_loss(x, w, rtn_hat);
  EXPECT_LT(gptq_loss, rtn_loss);
  EXPECT_NEAR(proxy_loss(w, gptq_hat, h), gptq_loss, 1e-4 * gptq_loss);
}

TEST(Gptq, ProxyLossDominanceSignTest)
{
  int wins = 0;
  double gptq_total = 0.0, rtn_total = 0.0;
  const int seeds = 50;
  for (int seed = 0; seed < seeds; ++seed)
  {
    std::mt19937_64 rng(500 + seed);
    std::vector<Matrix> acts{correlated_tokens(rng, 256, 64)};
    auto h = accumulate_hessian(acts);
    Matrix w = test_support::random_matrix(rng, 64, 64);
    const Matrix g = dequantize(gptq_quantize_weight(w, h, GroupScheme::per_group(32), 4));
    const Matrix r = dequantize(quantize_matrix(w, GroupScheme::per_group(32), 4, 1.0f, true, ChannelAxis::kRows));
    const double lg = direct_proxy_loss(acts[0], w, g);
    const double lr = direct_proxy_loss(acts[0], w, r);
    wins += lg < lr;
    gptq_total += lg;
    rtn_total += lr;
  }
  EXPECT_LT(test_support::sign_test_p(wins, seeds), 0.05) << wins << " wins";
  EXPECT_LE(gptq_total, rtn_total);
}

TEST(Gptq, DeterministicAcrossThreadCounts)
{
  std::mt19937_64 rng(45);
  std::vector<Matrix> acts{correlated_tokens(rng, 128, 64)};
  auto h = accumulate_hessian(acts);
  Matrix w = test_support::random_matrix(rng, 64, 40);
  QuantizedTensor a, b;
  {
    ScopedThreadCount one(1);
    a = gptq_quantize_weight(w, h, GroupScheme::per_group(16), 4);
  }
  {
    ScopedThreadCount many(3);
    b = gptq_quantize_weight(w, h, GroupScheme::per_group(16), 4);
  }
  EXPECT_EQ(a.codes(), b.codes());
  EXPECT_EQ(a.params(), b.params());
}

TEST(Gptq, MixedBlocks)
{
  std::mt19937_64 rng(46);
  std::vector<Matrix> acts{correlated_tokens(rng, 128, 96)};
  auto plan = calibrate_outliers(acts, 32);
  auto h = accumulate_hessian(acts).permuted(plan);
  Matrix w = reorder_weight_rows(test_support::random_matrix(rng, 96, 16), plan);
  MixedPrecisionSpec spec{4, 8, GroupScheme::per_group(32)};

  auto with = gptq_quantize_weight_mixed(w, h, 32, spec, true);
  EXPECT_EQ(with.normal.rows(), 64u);
  EXPECT_EQ(with.outlier.rows(), 32u);
  EXPECT_EQ(with.outlier.bit_width(), 8);

  auto without = gptq_quantize_weight_mixed(w, h, 32, spec, false);
  auto rtn_outlier = quantize_matrix(slice_rows(w, 64, 96), GroupScheme::per_group(32), 8, 1.0f, true,
                                     ChannelAxis::kRows);
  EXPECT_EQ(without.outlier.codes(), rtn_outlier.codes());

  MixedPrecisionSpec keep{4, kBypassBits, GroupScheme::per_group(32)};
  auto fp = gptq_quantize_weight_mixed(w, h, 32, keep, true);
  EXPECT_TRUE(fp.outlier.bypass());
  // Kept rows are the compensated weights, not the originals, so the total
  // loss is no worse than leaving them untouched.
  std::vector<Matrix> racts{reorder_activation_cols(acts[0], plan)};
  Matrix untouched = concat_rows(dequantize(fp.normal), slice_rows(w, 64, 96));
  EXPECT_LE(direct_proxy_loss(racts[0], w, dequantize(fp)), direct_proxy_loss(racts[0], w, untouched));
}

TEST(Gptq, ErrorsOnSingularHessianAndShape)
{
  std::vector<Matrix> acts{Matrix::from_rows({{1, 1}})};
  auto h = accumulate_hessian(acts, 0.0);
  EXPECT_THROW(gptq_quantize_weight(Matrix(2, 3, 1.0f), h, GroupScheme::per_channel(), 4), NumericalError);
  auto ok = accumulate_hessian(acts);
  EXPECT_THROW(gptq_quantize_weight(Matrix(3, 3, 1.0f), ok, GroupScheme::per_channel(), 4), ShapeError);
}
