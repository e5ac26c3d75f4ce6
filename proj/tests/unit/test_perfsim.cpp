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

#include "atomforge/perfsim.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace atomforge;

namespace
{

constexpr Scheme kAllSchemes[] = {Scheme::kFp16, Scheme::kW4A16, Scheme::kW8A8, Scheme::kW4A4};

double throughput_at(Scheme scheme, std::size_t batch, const HardwareProfile &hw)
{
  TraceConfig tc;
  tc.requests = std::max<std::size_t>(128, 2 * batch);
  tc.seed = 3;
  ServingConfig sc;
  sc.max_batch = batch;
  sc.scheme = scheme;
  return simulate_serving(sc, hw, generate_trace(tc)).throughput;
}

} // namespace

TEST(Roofline, Examples)
{
  HardwareProfile hw;
  EXPECT_DOUBLE_EQ(roofline_time(OperatorCost::single(312e12, 1.0, Precision::kFp16), hw), 1.0);
  EXPECT_DOUBLE_EQ(roofline_time(OperatorCost::single(1.0, hw.bandwidth, Precision::kFp16), hw), 1.0);
  // At the ridge point both limbs agree.
  const double ridge = hw.peak_int8 / hw.bandwidth;
  const OperatorCost at_ridge = OperatorCost::single(ridge * 1e9, 1e9, Precision::kInt8);
  EXPECT_NEAR(at_ridge.ops / hw.peak_int8, at_ridge.bytes / hw.bandwidth, 1e-15);
  EXPECT_DOUBLE_EQ(roofline_time(at_ridge, hw), at_ridge.bytes / hw.bandwidth);
  EXPECT_DOUBLE_EQ(roofline_time(OperatorCost{}, hw), 0.0);
  EXPECT_DOUBLE_EQ(attained_time(OperatorCost::single(312e12, 0.0, Precision::kFp16), hw), 1.0 / hw.efficiency);
}

TEST(Roofline, MaxOfLimbsAndMonotoneProperty)
{
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> log_u(6.0, 15.0);
  for (int trial = 0; trial < 500; ++trial)
  {
    HardwareProfile hw;
    const auto p = static_cast<Precision>(trial % 3);
    const OperatorCost c = OperatorCost::single(std::pow(10.0, log_u(rng)), std::pow(10.0, log_u(rng)), p);
    EXPECT_EQ(c.intensity(), c.ops / c.bytes);
    const double t = roofline_time(c, hw);
    EXPECT_EQ(t, std::max(c.ops / hw.peak(p), c.bytes / hw.bandwidth));
    HardwareProfile faster = hw;
    faster.peak_fp16 *= 1.5;
    faster.peak_int8 *= 1.5;
    faster.peak_int4 *= 1.5;
    EXPECT_LE(roofline_time(c, faster), t);
    faster.bandwidth *= 1.3;
    EXPECT_LE(roofline_time(c, faster), roofline_time(c, hw));
  }
}

TEST(HardwareProfileTest, ValidationAndJson)
{
  HardwareProfile hw;
  EXPECT_NO_THROW(hw.validate());
  EXPECT_EQ(HardwareProfile::from_json(hw.to_json()).to_json(), hw.to_json());
  HardwareProfile bad = hw;
  bad.peak_int4 = 100e12;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.tensor_core = false;
  EXPECT_NO_THROW(bad.validate());
  bad = hw;
  bad.bandwidth = 0.0;
  EXPECT_THROW(bad.validate(), ConfigError);
  auto j = hw.to_json();
  j["clock"] = 1;
  EXPECT_THROW(HardwareProfile::from_json(j), ConfigError);
}

TEST(DenseCost, IntensityGrowsWithBatchUntilWeightsAmortize)
{
  const auto d = llama_7b_dims();
  const double i1 = dense_cost(1, d, Scheme::kFp16).intensity();
  const double i256 = dense_cost(256, d, Scheme::kFp16).intensity();
  EXPECT_GT(i256 / i1, 150.0);
  EXPECT_LT(i256 / i1, 256.0);
  // ops = 2 * tokens * sum of GEMM sizes per layer * layers
  const double h = 4096, f = 11008;
  EXPECT_DOUBLE_EQ(dense_cost(3, d, Scheme::kFp16).ops, 2.0 * 3 * (4 * h * h + 3 * h * f) * 32);
}

TEST(DenseCost, WeightOnlyQuantizationKeepsOpsAndPeak)
{
  const auto d = llama_7b_dims();
  HardwareProfile hw;
  for (std::size_t batch : {1, 64, 512})
  {
    const auto fp = dense_cost(batch, d, Scheme::kFp16);
    const auto w4 = dense_cost(batch, d, Scheme::kW4A16);
    EXPECT_EQ(fp.ops, w4.ops);
    EXPECT_EQ(fp.precision, w4.precision);
    EXPECT_LT(w4.bytes, fp.bytes);
    EXPECT_EQ(fp.ops / hw.peak(fp.precision), w4.ops / hw.peak(w4.precision));
  }
  // Compute bound at large batch: no speedup at all.
  EXPECT_DOUBLE_EQ(roofline_time(dense_cost(4096, d, Scheme::kFp16), hw),
                   roofline_time(dense_cost(4096, d, Scheme::kW4A16), hw));
}

TEST(DenseCost, W4A4SpeedupBand)
{
  HardwareProfile hw;
  const auto d = llama_7b_dims();
  const double speedup = roofline_time(dense_cost(512, d, Scheme::kFp16), hw) /
                         roofline_time(dense_cost(512, d, Scheme::kW4A4), hw);
  EXPECT_GE(speedup, 2.0);
  EXPECT_LE(speedup, 4.0);
  // The 128-wide toy GEMMs are memory bound even at batch 512, so only the
  // direction survives there.
  const ModelConfig toy;
  EXPECT_GT(roofline_time(dense_cost(512, toy, Scheme::kFp16), hw),
            roofline_time(dense_cost(512, toy, Scheme::kW4A4), hw));
}

TEST(AttentionCost, KvBitsScaleBytes)
{
  const auto d = llama_7b_dims();
  HardwareProfile hw;
  const double t16 = roofline_time(attention_cost(64, 1024, 16, d), hw);
  const double t8 = roofline_time(attention_cost(64, 1024, 8, d), hw);
  const double t4 = roofline_time(attention_cost(128, 1024, 4, d), hw);
  const double t16b = roofline_time(attention_cost(128, 1024, 16, d), hw);
  EXPECT_GT(t16 / t8, 1.8);
  EXPECT_LE(t16 / t8, 2.0);
  EXPECT_GE(t16b / t4, 3.0);
  EXPECT_LE(t16b / t4, 4.0);
  const auto zero = attention_cost(32, 0, 4, d);
  EXPECT_EQ(zero.ops, 0.0);
  EXPECT_EQ(zero.bytes, 0.0);
  EXPECT_EQ(roofline_time(zero, hw), 0.0);
  // Bytes are exactly batch * context * per-token cache bytes.
  EXPECT_DOUBLE_EQ(attention_cost(3, 5, 16, d).bytes, 15.0 * 32 * 32 * 2 * 128 * 2);
}

TEST(BreakdownTest, FractionsAndMonotonicity)
{
  const auto d = llama_7b_dims();
  HardwareProfile hw;
  for (Scheme s : kAllSchemes)
  {
    double previous = -1.0;
    for (std::size_t ctx : {0, 128, 512, 2048, 8192})
    {
      const Breakdown f = breakdown(d, s, hw, 16, ctx).fractions();
      EXPECT_NEAR(f.total(), 1.0, 1e-9);
      EXPECT_GT(f.attention, previous);
      previous = f.attention;
    }
  }
  const Breakdown fp = breakdown(d, Scheme::kFp16, hw, 16, 512).fractions();
  EXPECT_GT(fp.dense + fp.attention, 0.9);
  EXPECT_EQ(fp.quant_overhead, 0.0);
  const Breakdown q = breakdown(d, Scheme::kW4A4, hw, 16, 512).fractions();
  EXPECT_NEAR(q.quant_overhead, hw.quant_overhead, 1e-12);
}

TEST(MemoryModel, MaxFeasibleBatchOrdering)
{
  const auto d = llama_7b_dims();
  const auto fp = max_feasible_batch(d, Scheme::kFp16, 24e9, 1024);
  const auto w8 = max_feasible_batch(d, Scheme::kW8A8, 24e9, 1024);
  const auto w4 = max_feasible_batch(d, Scheme::kW4A4, 24e9, 1024);
  EXPECT_GT(w4, w8);
  EXPECT_GT(w8, fp);
  EXPECT_GE(fp, 1u);
  EXPECT_EQ(max_feasible_batch(d, Scheme::kFp16, 10e9, 1024), 0u);
  EXPECT_LT(weight_bytes(d, Scheme::kW4A4), weight_bytes(d, Scheme::kW8A8));
  EXPECT_LT(weight_bytes(d, Scheme::kW8A8), weight_bytes(d, Scheme::kFp16));
}

TEST(Trace, LengthsAndDeterminism)
{
  TraceConfig tc;
  tc.requests = 4001;
  tc.seed = 5;
  const auto a = generate_trace(tc);
  const auto b = generate_trace(tc);
  std::vector<std::size_t> prompts;
  for (std::size_t i = 0; i < a.size(); ++i)
  {
    EXPECT_GE(a[i].prompt_len, 1u);
    EXPECT_LE(a[i].decode_len, tc.max_len);
    EXPECT_EQ(a[i].prompt_len, b[i].prompt_len);
    prompts.push_back(a[i].prompt_len);
  }
  std::nth_element(prompts.begin(), prompts.begin() + 2000, prompts.end());
  EXPECT_NEAR(static_cast<double>(prompts[2000]), 128.0, 10.0);
  tc.arrival_rate = 5.0;
  const auto timed = generate_trace(tc);
  for (std::size_t i = 1; i < timed.size(); ++i)
    EXPECT_GE(timed[i].arrival, timed[i - 1].arrival);
  EXPECT_EQ(TraceConfig::from_json(tc.to_json()).to_json(), tc.to_json());
}

TEST(Simulator, SingleTokenRequestsGiveOneTokenPerStep)
{
  HardwareProfile hw;
  ServingConfig sc;
  sc.max_batch = 1;
  const std::vector<Request> trace{{0, 0.0, 64, 1}, {1, 0.0, 64, 1}};
  const auto report = simulate_serving(sc, hw, trace);
  // One prefill step per request, each producing its only token.
  const double step = attained_time(dense_cost(64, sc.dims, sc.scheme), hw) +
                      attained_time(prefill_attention_cost(64, 16, sc.dims), hw) +
                      attained_time(other_cost(64, 1, sc.dims), hw);
  EXPECT_EQ(report.steps, 2u);
  EXPECT_NEAR(report.throughput, 1.0 / step, 1e-9 / step);
  EXPECT_EQ(report.completed, 2u);
}

TEST(Simulator, ConservationAndMemoryBound)
{
  HardwareProfile hw;
  for (Scheme s : kAllSchemes)
  {
    ServingConfig sc;
    sc.scheme = s;
    sc.max_batch = 256;
    sc.memory_capacity = 24e9;
    TraceConfig tc;
    tc.requests = 300;
    tc.arrival_rate = 40.0;
    tc.seed = 9;
    const auto trace = generate_trace(tc);
    std::size_t events = 0;
    const auto report = simulate_serving(sc, hw, trace, 0.0, [&](const SimulatorSnapshot &snap) {
      ++events;
      EXPECT_EQ(snap.admitted, snap.completed + snap.active);
      EXPECT_LE(snap.admitted + snap.queued, trace.size());
      EXPECT_LE(snap.memory, sc.memory_capacity);
    });
    EXPECT_EQ(events, report.steps);
    EXPECT_EQ(report.completed, trace.size());
    EXPECT_LE(report.memory_high_water, sc.memory_capacity);
    std::size_t tokens = 0;
    for (const auto &r : trace)
      tokens += r.decode_len;
    EXPECT_EQ(report.generated_tokens, tokens);
  }
}

TEST(Simulator, HorizonDeterminismAndErrors)
{
  HardwareProfile hw;
  ServingConfig sc;
  TraceConfig tc;
  tc.requests = 64;
  const auto trace = generate_trace(tc);
  const auto a = simulate_serving(sc, hw, trace);
  const auto b = simulate_serving(sc, hw, trace);
  EXPECT_EQ(a.to_json(), b.to_json());
  const auto cut = simulate_serving(sc, hw, trace, a.elapsed / 4);
  EXPECT_LT(cut.completed, a.completed);
  EXPECT_GE(cut.elapsed, a.elapsed / 4);

  EXPECT_THROW(simulate_serving(sc, hw, {}), ArgumentError);
  sc.memory_capacity = 5e9;
  EXPECT_THROW(simulate_serving(sc, hw, trace), InfeasibleError);
  sc.memory_capacity = 0.0;
  sc.max_batch = 0;
  EXPECT_THROW(simulate_serving(sc, hw, trace), ConfigError);
}

TEST(Simulator, ThroughputOrderingAtLargeBatch)
{
  HardwareProfile hw;
  for (std::size_t batch : {64, 128, 256})
  {
    const double fp = throughput_at(Scheme::kFp16, batch, hw);
    const double w4a16 = throughput_at(Scheme::kW4A16, batch, hw);
    const double w8 = throughput_at(Scheme::kW8A8, batch, hw);
    const double w4 = throughput_at(Scheme::kW4A4, batch, hw);
    EXPECT_GT(w4, w8) << batch;
    EXPECT_GT(w8, std::max(fp, w4a16)) << batch;
    EXPECT_GE(w4a16, fp) << batch;
  }
}

TEST(ServingConfigTest, JsonAndCsv)
{
  ServingConfig sc;
  sc.scheme = Scheme::kW8A8;
  sc.max_batch = 32;
  EXPECT_EQ(ServingConfig::from_json(sc.to_json()).to_json(), sc.to_json());
  EXPECT_THROW(scheme_from_string("w2a2"), ArgumentError);
  HardwareProfile hw;
  TraceConfig tc;
  tc.requests = 16;
  std::vector<SweepPoint> points;
  for (Scheme s : kAllSchemes)
  {
    sc.scheme = s;
    points.push_back({s, 32, simulate_serving(sc, hw, generate_trace(tc))});
  }
  const std::string csv = sweep_to_csv(points);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_EQ(csv.rfind("scheme,batch,", 0), 0u);
}
