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

#include "atomforge/gemm_check.hpp"
#include "atomforge/qgemm.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace atomforge
{

double GemmCheckReport::max_error() const
{
  double worst = 0.0;
  for (const auto &c : cases)
    worst = std::max(worst, c.rel_error);
  return worst;
}

std::size_t GemmCheckReport::failures() const
{
  return static_cast<std::size_t>(
      std::count_if(cases.begin(), cases.end(), [&](const GemmCheckCase &c) { return !(c.rel_error <= tolerance); }));
}

nlohmann::json GemmCheckReport::to_json() const
{
  nlohmann::json rows = nlohmann::json::array();
  for (const auto &c : cases)
    rows.push_back({{"tokens", c.tokens},
                    {"hidden", c.hidden},
                    {"out", c.out},
                    {"outliers", c.outliers},
                    {"group", c.group},
                    {"bits", c.bits},
                    {"outlier_bits", c.outlier_bits},
                    {"rel_error", c.rel_error}});
  return {{"tolerance", tolerance},
          {"trials", cases.size()},
          {"max_rel_error", max_error()},
          {"failures", failures()},
          {"passed", failures() == 0},
          {"cases", rows}};
}

GemmCheckReport run_gemm_check(std::size_t trials, std::uint64_t seed, double tolerance)
{
  if (trials == 0)
    throw ArgumentError("gemm-check needs at least one trial");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, 1 << 20);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  const int bit_choices[] = {3, 4, 8};
  const std::size_t group_choices[] = {16, 32, 64, 128};

  GemmCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t trial = 0; trial < trials; ++trial)
  {
    GemmCheckCase c;
    c.group = group_choices[pick(rng) % 4];
    // Outlier blocks of 0, half a group, one or two groups.
    const std::size_t k_choices[] = {0, c.group / 2, c.group, 2 * c.group};
    c.outliers = k_choices[pick(rng) % 4];
    c.hidden = c.outliers + c.group * (1 + pick(rng) % 4);
    c.tokens = 1 + pick(rng) % 8;
    c.out = 1 + pick(rng) % 16;
    c.bits = bit_choices[pick(rng) % 3];
    c.outlier_bits = pick(rng) % 4 == 0 ? kBypassBits : 8;

    Matrix x(c.tokens, c.hidden), w(c.hidden, c.out);
    for (auto &v : x.data())
      v = normal(rng);
    for (auto &v : w.data())
      v = normal(rng);
    // A few loud channels so the plan has something to find.
    for (std::size_t i = 0; i < c.outliers; ++i)
    {
      const std::size_t ch = static_cast<std::size_t>(pick(rng)) % c.hidden;
      for (std::size_t t = 0; t < c.tokens; ++t)
        x(t, ch) *= 20.0f;
    }

    const MixedPrecisionSpec spec{c.bits, c.outlier_bits, GroupScheme::per_group(c.group)};
    const ReorderPlan plan = calibrate_outliers(std::span(&x, 1), c.outliers);
    const MixedQuantActivation qa = fused_reorder_quantize(x, plan, spec);
    const MixedQuantWeight qw = quantize_weight_mixed(reorder_weight_rows(w, plan), c.outliers, spec);
    const Matrix got = group_gemm(qa, qw);

    const Matrix da = dequantize(qa), dw = dequantize(qw);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < c.tokens; ++i)
      for (std::size_t j = 0; j < c.out; ++j)
      {
        double want = 0.0;
        for (std::size_t kk = 0; kk < c.hidden; ++kk)
          want += static_cast<double>(da(i, kk)) * dw(kk, j);
        const double diff = got(i, j) - want;
        num += diff * diff;
        den += want * want;
      }
    c.rel_error = den > 0.0 ? std::sqrt(num / den) : std::sqrt(num);
    report.cases.push_back(c);
  }
  return report;
}

} // namespace atomforge
