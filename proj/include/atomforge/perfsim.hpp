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

#pragma once

#include "atomforge/model.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace atomforge
{

enum class Precision
{
  kFp16,
  kInt8,
  kInt4,
};
inline constexpr std::size_t kPrecisionCount = 3;
std::string to_string(Precision p);

struct HardwareProfile
{
  std::string name = "a100-80gb";
  double peak_fp16 = 312e12; // ops/s
  double peak_int8 = 624e12;
  double peak_int4 = 1248e12;
  double bandwidth = 2.039e12; // bytes/s
  double capacity = 80e9;      // bytes
  // Fraction of the roofline bound real kernels attain.
  double efficiency = 0.6;
  // Quantize/dequantize/reorder overhead as a fraction of step time.
  double quant_overhead = 0.005;
  // Enforce peak(INT4) >= peak(INT8) >= peak(FP16).
  bool tensor_core = true;

  double peak(Precision p) const;
  void validate() const;
  nlohmann::json to_json() const;
  static HardwareProfile from_json(const nlohmann::json &j);
};

/// Work of one operator. Ops may be spread over several precisions (a mixed
/// GEMM runs its outlier block at INT8 and its epilogue at FP16);
/// `precision` names the dominant one.
struct OperatorCost
{
  double ops = 0.0;
  double bytes = 0.0;
  Precision precision = Precision::kFp16;
  std::array<double, kPrecisionCount> ops_by_precision{};

  static OperatorCost single(double ops, double bytes, Precision precision);
  double intensity() const;
  OperatorCost &operator+=(const OperatorCost &other);
};

/// max(sum_p ops_p / peak_p, bytes / bandwidth).
double roofline_time(const OperatorCost &cost, const HardwareProfile &hw);
/// roofline_time divided by the profile's efficiency.
double attained_time(const OperatorCost &cost, const HardwareProfile &hw);

enum class Scheme
{
  kFp16,
  kW4A16,
  kW8A8,
  kW4A4,
};
std::string to_string(Scheme s);
Scheme scheme_from_string(const std::string &s);

struct SchemeTraits
{
  int weight_bits;
  int activation_bits;
  int kv_bits;
  Precision compute;
  // The model's outlier_count input channels stay at INT8 inside the GEMM.
  bool int8_outliers;
  // Scales per group_size channels instead of one per row/column.
  bool grouped;
};
SchemeTraits scheme_traits(Scheme s);

/// Llama-7B dimensions: 32 layers, hidden 4096, 32 heads, FFN 11008, vocab 32000.
ModelConfig llama_7b_dims();

/// QKV, O and MLP GEMMs over `tokens` rows.
OperatorCost dense_cost(std::size_t tokens, const ModelConfig &dims, Scheme scheme);
/// Decode attention of `batch` sequences that each read `context` cached tokens.
OperatorCost attention_cost(std::size_t batch, std::size_t context, int kv_bits, const ModelConfig &dims);
/// Causal self-attention over a prompt of `prompt_len` tokens (KV written once).
OperatorCost prefill_attention_cost(std::size_t prompt_len, int kv_bits, const ModelConfig &dims);
/// Norms, residuals, activation, RoPE and the FP16 output head.
OperatorCost other_cost(std::size_t tokens, std::size_t logits_rows, const ModelConfig &dims);

double kv_bytes_per_token(const ModelConfig &dims, int kv_bits);
/// Dense weights at the scheme's storage precision plus FP16 embedding and head.
double weight_bytes(const ModelConfig &dims, Scheme scheme);
/// Largest batch whose weights plus full-context KV fit in `capacity` bytes.
std::size_t max_feasible_batch(const ModelConfig &dims, Scheme scheme, double capacity, std::size_t context);

struct Breakdown
{
  double dense = 0.0;
  double attention = 0.0;
  double other = 0.0;
  double quant_overhead = 0.0;

  double total() const { return dense + attention + other + quant_overhead; }
  Breakdown fractions() const;
  Breakdown &operator+=(const Breakdown &b);
  nlohmann::json to_json() const;
};

/// Time split of one decode step of `batch` sequences at `context` tokens.
Breakdown breakdown(const ModelConfig &dims, Scheme scheme, const HardwareProfile &hw, std::size_t batch,
                    std::size_t context);

struct Request
{
  std::size_t id = 0;
  double arrival = 0.0;
  std::size_t prompt_len = 1;
  std::size_t decode_len = 1; // generated tokens, the first one by the prefill step
};

struct TraceConfig
{
  std::size_t requests = 256;
  double prompt_median = 128.0;
  double decode_median = 256.0;
  double sigma = 0.6; // log-space standard deviation of both lengths
  std::size_t max_len = 2048;
  // Poisson arrival rate in requests/s; 0 puts every arrival at t = 0.
  double arrival_rate = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static TraceConfig from_json(const nlohmann::json &j);
};

std::vector<Request> generate_trace(const TraceConfig &config);

struct ServingConfig
{
  ModelConfig dims = llama_7b_dims();
  std::size_t max_batch = 64;
  Scheme scheme = Scheme::kFp16;
  // Overrides the hardware capacity when positive.
  double memory_capacity = 0.0;

  void validate() const;
  nlohmann::json to_json() const;
  static ServingConfig from_json(const nlohmann::json &j);
};

struct SimulatorSnapshot
{
  double time = 0.0;
  std::size_t queued = 0;
  std::size_t active = 0;
  std::size_t completed = 0;
  std::size_t admitted = 0;
  std::size_t batch_tokens = 0;
  double memory = 0.0;
};

struct ServingReport
{
  double elapsed = 0.0;
  double throughput = 0.0;       // generated tokens per second
  double mean_decode_latency = 0.0; // mean step time seen by each generated token
  double memory_high_water = 0.0;
  std::size_t generated_tokens = 0;
  std::size_t completed = 0;
  std::size_t steps = 0;
  std::size_t peak_batch = 0;
  Breakdown time;
  std::vector<SimulatorSnapshot> timeline;

  nlohmann::json to_json() const;
};

/// FCFS continuous batching: every step admits queued requests whose full
/// KV footprint fits, runs their prefill alongside one decode token for every
/// running request, and retires finished ones. A positive horizon stops the
/// clock early.
ServingReport simulate_serving(const ServingConfig &config, const HardwareProfile &hw,
                               const std::vector<Request> &trace, double horizon = 0.0,
                               const std::function<void(const SimulatorSnapshot &)> &observer = {});

struct SweepPoint
{
  Scheme scheme;
  std::size_t batch;
  ServingReport report;
};

std::string sweep_to_csv(const std::vector<SweepPoint> &points);

} // namespace atomforge
