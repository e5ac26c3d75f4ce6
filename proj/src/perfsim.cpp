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

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

namespace atomforge
{

std::string to_string(Precision p)
{
  switch (p)
  {
    case Precision::kFp16:
      return "fp16";
    case Precision::kInt8:
      return "int8";
    case Precision::kInt4:
      return "int4";
  }
  return "unknown";
}

double HardwareProfile::peak(Precision p) const
{
  switch (p)
  {
    case Precision::kFp16:
      return peak_fp16;
    case Precision::kInt8:
      return peak_int8;
    case Precision::kInt4:
      return peak_int4;
  }
  throw ArgumentError("unknown precision");
}

void HardwareProfile::validate() const
{
  for (double v : {peak_fp16, peak_int8, peak_int4, bandwidth, capacity})
    if (!(v > 0.0) || !std::isfinite(v))
      throw ConfigError("hardware profile '" + name + "': peaks, bandwidth and capacity must be positive");
  if (!(efficiency > 0.0 && efficiency <= 1.0))
    throw ConfigError("hardware efficiency must lie in (0, 1]");
  if (!(quant_overhead >= 0.0 && quant_overhead < 1.0))
    throw ConfigError("quant_overhead must lie in [0, 1)");
  if (tensor_core && !(peak_int4 >= peak_int8 && peak_int8 >= peak_fp16))
    throw ConfigError("tensor-core profile needs peak_int4 >= peak_int8 >= peak_fp16");
}

nlohmann::json HardwareProfile::to_json() const
{
  return {{"name", name},
          {"peak_ops", {{"fp16", peak_fp16}, {"int8", peak_int8}, {"int4", peak_int4}}},
          {"bandwidth", bandwidth},
          {"capacity", capacity},
          {"efficiency", efficiency},
          {"quant_overhead", quant_overhead},
          {"tensor_core", tensor_core}};
}

HardwareProfile HardwareProfile::from_json(const nlohmann::json &j)
{
  HardwareProfile hw;
  try
  {
    for (const auto &[key, value] : j.items())
    {
      if (key == "name")
        hw.name = value.get<std::string>();
      else if (key == "peak_ops")
      {
        for (const auto &[p, v] : value.items())
        {
          if (p == "fp16")
            hw.peak_fp16 = v.get<double>();
          else if (p == "int8")
            hw.peak_int8 = v.get<double>();
          else if (p == "int4")
            hw.peak_int4 = v.get<double>();
          else
            throw ConfigError("unknown precision '" + p + "' in peak_ops");
        }
      }
      else if (key == "bandwidth")
        hw.bandwidth = value.get<double>();
      else if (key == "capacity")
        hw.capacity = value.get<double>();
      else if (key == "efficiency")
        hw.efficiency = value.get<double>();
      else if (key == "quant_overhead")
        hw.quant_overhead = value.get<double>();
      else if (key == "tensor_core")
        hw.tensor_core = value.get<bool>();
      else
        throw ConfigError("unknown hardware profile key '" + key + "'");
    }
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ConfigError(std::string("malformed hardware profile: ") + e.what());
  }
  hw.validate();
  return hw;
}

OperatorCost OperatorCost::single(double ops, double bytes, Precision precision)
{
  OperatorCost c;
  c.ops = ops;
  c.bytes = bytes;
  c.precision = precision;
  c.ops_by_precision[static_cast<std::size_t>(precision)] = ops;
  return c;
}

double OperatorCost::intensity() const
{
  if (bytes == 0.0)
    return ops == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return ops / bytes;
}

OperatorCost &OperatorCost::operator+=(const OperatorCost &other)
{
  if (ops == 0.0 && bytes == 0.0)
    precision = other.precision;
  ops += other.ops;
  bytes += other.bytes;
  for (std::size_t p = 0; p < kPrecisionCount; ++p)
    ops_by_precision[p] += other.ops_by_precision[p];
  return *this;
}

double roofline_time(const OperatorCost &cost, const HardwareProfile &hw)
{
  double compute = 0.0;
  for (std::size_t p = 0; p < kPrecisionCount; ++p)
    if (cost.ops_by_precision[p] != 0.0)
      compute += cost.ops_by_precision[p] / hw.peak(static_cast<Precision>(p));
  return std::max(compute, cost.bytes / hw.bandwidth);
}

double attained_time(const OperatorCost &cost, const HardwareProfile &hw)
{
  return roofline_time(cost, hw) / hw.efficiency;
}

std::string to_string(Scheme s)
{
  switch (s)
  {
    case Scheme::kFp16:
      return "fp16";
    case Scheme::kW4A16:
      return "w4a16";
    case Scheme::kW8A8:
      return "w8a8";
    case Scheme::kW4A4:
      return "w4a4";
  }
  return "unknown";
}

Scheme scheme_from_string(const std::string &s)
{
  for (Scheme v : {Scheme::kFp16, Scheme::kW4A16, Scheme::kW8A8, Scheme::kW4A4})
    if (to_string(v) == s)
      return v;
  throw ArgumentError("unknown serving scheme '" + s + "' (expected fp16, w4a16, w8a8 or w4a4)");
}

SchemeTraits scheme_traits(Scheme s)
{
  switch (s)
  {
    case Scheme::kFp16:
      return {16, 16, 16, Precision::kFp16, false, false};
    case Scheme::kW4A16:
      return {4, 16, 16, Precision::kFp16, false, true};
    case Scheme::kW8A8:
      return {8, 8, 8, Precision::kInt8, false, false};
    case Scheme::kW4A4:
      return {4, 4, 4, Precision::kInt4, true, true};
  }
  throw ArgumentError("unknown scheme");
}

ModelConfig llama_7b_dims()
{
  ModelConfig c;
  c.n_layers = 32;
  c.hidden_dim = 4096;
  c.n_heads = 32;
  c.head_dim = 128;
  c.ffn_dim = 11008;
  c.vocab_size = 32000;
  c.group_size = 128;
  c.outlier_count = 128;
  c.injected_outliers = 0;
  return c;
}

namespace
{

struct Gemm
{
  double in;
  double out;
};

std::array<Gemm, 4> layer_gemms(const ModelConfig &d)
{
  const double h = static_cast<double>(d.hidden_dim), f = static_cast<double>(d.ffn_dim);
  return {Gemm{h, 3 * h}, Gemm{h, h}, Gemm{h, 2 * f}, Gemm{f, h}};
}

// Bytes of one weight matrix or of one activation row of `width` input
// channels, including FP16 scales.
struct Layout
{
  double outliers = 0.0; // INT8 channels per GEMM input
  double group = 0.0;    // 0 = one scale per line
};

Layout layout_for(const SchemeTraits &t, const ModelConfig &dims)
{
  return {t.int8_outliers ? static_cast<double>(dims.outlier_count) : 0.0,
          t.grouped ? static_cast<double>(dims.group_size) : 0.0};
}

double stored_bytes(double width, double lines, int bits, const Layout &t)
{
  if (bits == 16)
    return width * lines * 2.0;
  const double outliers = std::min(t.outliers, width);
  const double scale_groups = t.group > 0.0 ? std::ceil(width / t.group) : 1.0;
  return lines * ((width - outliers) * bits / 8.0 + outliers * 1.0 + scale_groups * 2.0);
}

} // namespace

OperatorCost dense_cost(std::size_t tokens, const ModelConfig &dims, Scheme scheme)
{
  if (tokens == 0)
    return OperatorCost{};
  const SchemeTraits t = scheme_traits(scheme);
  const Layout lay = layout_for(t, dims);
  const double n = static_cast<double>(tokens);
  OperatorCost total;
  total.precision = t.compute;
  for (const Gemm &g : layer_gemms(dims))
  {
    const double weight = stored_bytes(g.in, g.out, t.weight_bits, lay);
    const double act = stored_bytes(g.in, n, t.activation_bits, lay) + n * g.out * 2.0;
    const double ops = 2.0 * n * g.in * g.out;
    OperatorCost c;
    c.ops = ops;
    c.bytes = weight + act;
    c.precision = t.compute;
    if (scheme == Scheme::kW4A4)
    {
      const double outliers = std::min(lay.outliers, g.in);
      c.ops_by_precision[static_cast<std::size_t>(Precision::kInt4)] = 2.0 * n * (g.in - outliers) * g.out;
      c.ops_by_precision[static_cast<std::size_t>(Precision::kInt8)] = 2.0 * n * outliers * g.out;
      // One FP16 multiply-add per output element per group to apply scales.
      const double epilogue = 2.0 * n * g.out * std::ceil(g.in / lay.group);
      c.ops_by_precision[static_cast<std::size_t>(Precision::kFp16)] = epilogue;
      c.ops += epilogue;
    }
    else
      c.ops_by_precision[static_cast<std::size_t>(t.compute)] = ops;
    total += c;
  }
  const double layers = static_cast<double>(dims.n_layers);
  total.ops *= layers;
  total.bytes *= layers;
  for (double &o : total.ops_by_precision)
    o *= layers;
  return total;
}

double kv_bytes_per_token(const ModelConfig &dims, int kv_bits)
{
  const KVCacheConfig kv{dims.n_layers, dims.n_heads, dims.head_dim, 16, kv_bits};
  return cache_memory_bytes(kv, 1, kv_bits);
}

OperatorCost attention_cost(std::size_t batch, std::size_t context, int kv_bits, const ModelConfig &dims)
{
  const double reads = static_cast<double>(batch) * static_cast<double>(context);
  const double ops = 2.0 * reads * static_cast<double>(dims.n_heads * dims.head_dim) * 2.0 *
                     static_cast<double>(dims.n_layers);
  return OperatorCost::single(ops, reads * kv_bytes_per_token(dims, kv_bits), Precision::kFp16);
}

OperatorCost prefill_attention_cost(std::size_t prompt_len, int kv_bits, const ModelConfig &dims)
{
  const double p = static_cast<double>(prompt_len);
  const double pairs = p * (p + 1.0) / 2.0;
  const double ops = 2.0 * pairs * static_cast<double>(dims.n_heads * dims.head_dim) * 2.0 *
                     static_cast<double>(dims.n_layers);
  // The prompt's K/V are written once and streamed back once.
  return OperatorCost::single(ops, 2.0 * p * kv_bytes_per_token(dims, kv_bits), Precision::kFp16);
}

OperatorCost other_cost(std::size_t tokens, std::size_t logits_rows, const ModelConfig &dims)
{
  const double n = static_cast<double>(tokens), h = static_cast<double>(dims.hidden_dim);
  const double f = static_cast<double>(dims.ffn_dim), v = static_cast<double>(dims.vocab_size);
  const double layers = static_cast<double>(dims.n_layers);
  // Two norms, two residual adds, RoPE on q/k and the gated activation.
  const double elem_bytes = n * layers * (14.0 * h + 3.0 * f) * 2.0 + n * h * 2.0;
  const double elem_ops = n * layers * (20.0 * h + 4.0 * f);
  const double r = static_cast<double>(logits_rows);
  const double head_ops = r > 0 ? 2.0 * r * h * v : 0.0;
  const double head_bytes = r > 0 ? v * h * 2.0 + r * (h + v) * 2.0 : 0.0;
  return OperatorCost::single(elem_ops + head_ops, elem_bytes + head_bytes, Precision::kFp16);
}

double weight_bytes(const ModelConfig &dims, Scheme scheme)
{
  const SchemeTraits t = scheme_traits(scheme);
  const Layout lay = layout_for(t, dims);
  double total = 0.0;
  for (const Gemm &g : layer_gemms(dims))
    total += stored_bytes(g.in, g.out, t.weight_bits, lay);
  total *= static_cast<double>(dims.n_layers);
  // Untied FP16 embedding and output head.
  return total + 2.0 * static_cast<double>(dims.vocab_size * dims.hidden_dim) * 2.0;
}

std::size_t max_feasible_batch(const ModelConfig &dims, Scheme scheme, double capacity, std::size_t context)
{
  if (context == 0)
    throw ArgumentError("context must be at least 1 token");
  const double free = capacity - weight_bytes(dims, scheme);
  if (free <= 0.0)
    return 0;
  const double per_seq = kv_bytes_per_token(dims, scheme_traits(scheme).kv_bits) * static_cast<double>(context);
  return static_cast<std::size_t>(std::floor(free / per_seq));
}

Breakdown Breakdown::fractions() const
{
  const double t = total();
  if (t == 0.0)
    return {};
  return {dense / t, attention / t, other / t, quant_overhead / t};
}

Breakdown &Breakdown::operator+=(const Breakdown &b)
{
  dense += b.dense;
  attention += b.attention;
  other += b.other;
  quant_overhead += b.quant_overhead;
  return *this;
}

nlohmann::json Breakdown::to_json() const
{
  return {{"dense", dense}, {"attention", attention}, {"other", other}, {"quant_overhead", quant_overhead}};
}

namespace
{

Breakdown step_times(const OperatorCost &dense, const OperatorCost &attention, const OperatorCost &other,
                     Scheme scheme, const HardwareProfile &hw)
{
  Breakdown b;
  b.dense = attained_time(dense, hw);
  b.attention = attained_time(attention, hw);
  b.other = attained_time(other, hw);
  // Overhead is a fixed share of the final step time.
  if (scheme != Scheme::kFp16)
    b.quant_overhead = (b.dense + b.attention + b.other) * hw.quant_overhead / (1.0 - hw.quant_overhead);
  return b;
}

} // namespace

Breakdown breakdown(const ModelConfig &dims, Scheme scheme, const HardwareProfile &hw, std::size_t batch,
                    std::size_t context)
{
  if (batch == 0)
    throw ArgumentError("batch must be at least 1");
  const int kv_bits = scheme_traits(scheme).kv_bits;
  return step_times(dense_cost(batch, dims, scheme), attention_cost(batch, context, kv_bits, dims),
                    other_cost(batch, batch, dims), scheme, hw);
}

nlohmann::json TraceConfig::to_json() const
{
  return {{"requests", requests},
          {"prompt_median", prompt_median},
          {"decode_median", decode_median},
          {"sigma", sigma},
          {"max_len", max_len},
          {"arrival_rate", arrival_rate},
          {"seed", seed}};
}

TraceConfig TraceConfig::from_json(const nlohmann::json &j)
{
  TraceConfig t;
  try
  {
    for (const auto &[key, value] : j.items())
    {
      if (key == "requests")
        t.requests = value.get<std::size_t>();
      else if (key == "prompt_median")
        t.prompt_median = value.get<double>();
      else if (key == "decode_median")
        t.decode_median = value.get<double>();
      else if (key == "sigma")
        t.sigma = value.get<double>();
      else if (key == "max_len")
        t.max_len = value.get<std::size_t>();
      else if (key == "arrival_rate")
        t.arrival_rate = value.get<double>();
      else if (key == "seed")
        t.seed = value.get<std::uint64_t>();
      else
        throw ConfigError("unknown trace key '" + key + "'");
    }
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ConfigError(std::string("malformed trace config: ") + e.what());
  }
  return t;
}

std::vector<Request> generate_trace(const TraceConfig &config)
{
  if (config.requests == 0)
    throw ArgumentError("trace needs at least one request");
  if (!(config.prompt_median >= 1.0 && config.decode_median >= 1.0 && config.sigma >= 0.0 && config.max_len >= 1 &&
        config.arrival_rate >= 0.0))
    throw ConfigError("trace medians must be >= 1, sigma and arrival rate >= 0, max_len >= 1");
  std::mt19937_64 rng(config.seed);
  std::lognormal_distribution<double> prompt(std::log(config.prompt_median), config.sigma);
  std::lognormal_distribution<double> decode(std::log(config.decode_median), config.sigma);
  std::exponential_distribution<double> gap(config.arrival_rate > 0.0 ? config.arrival_rate : 1.0);
  auto clamp_len = [&](double v) {
    return std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(v)), 1, config.max_len);
  };
  std::vector<Request> out(config.requests);
  double t = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i)
  {
    out[i].id = i;
    out[i].prompt_len = clamp_len(prompt(rng));
    out[i].decode_len = clamp_len(decode(rng));
    if (config.arrival_rate > 0.0)
      t += gap(rng);
    out[i].arrival = t;
  }
  return out;
}

void ServingConfig::validate() const
{
  dims.validate();
  if (max_batch == 0)
    throw ConfigError("max_batch must be at least 1");
  if (memory_capacity < 0.0)
    throw ConfigError("memory_capacity must be non-negative");
}

nlohmann::json ServingConfig::to_json() const
{
  return {{"model", dims.to_json()},
          {"max_batch", max_batch},
          {"scheme", to_string(scheme)},
          {"memory_capacity", memory_capacity}};
}

ServingConfig ServingConfig::from_json(const nlohmann::json &j)
{
  ServingConfig c;
  try
  {
    for (const auto &[key, value] : j.items())
    {
      if (key == "model")
        c.dims = ModelConfig::from_json(value);
      else if (key == "max_batch")
        c.max_batch = value.get<std::size_t>();
      else if (key == "scheme")
        c.scheme = scheme_from_string(value.get<std::string>());
      else if (key == "memory_capacity")
        c.memory_capacity = value.get<double>();
      else
        throw ConfigError("unknown serving config key '" + key + "'");
    }
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ConfigError(std::string("malformed serving config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ServingReport::to_json() const
{
  return {{"elapsed_s", elapsed},
          {"throughput_tokens_per_s", throughput},
          {"mean_decode_latency_s", mean_decode_latency},
          {"memory_high_water_bytes", memory_high_water},
          {"generated_tokens", generated_tokens},
          {"completed", completed},
          {"steps", steps},
          {"peak_batch", peak_batch},
          {"time_s", time.to_json()},
          {"time_fraction", time.fractions().to_json()}};
}

ServingReport simulate_serving(const ServingConfig &config, const HardwareProfile &hw,
                               const std::vector<Request> &trace, double horizon,
                               const std::function<void(const SimulatorSnapshot &)> &observer)
{
  config.validate();
  hw.validate();
  if (trace.empty())
    throw ArgumentError("request trace is empty");
  const double capacity = config.memory_capacity > 0.0 ? config.memory_capacity : hw.capacity;
  const double weights = weight_bytes(config.dims, config.scheme);
  const int kv_bits = scheme_traits(config.scheme).kv_bits;
  const double per_token = kv_bytes_per_token(config.dims, kv_bits);
  if (weights >= capacity)
    throw InfeasibleError("model weights (" + std::to_string(weights) + " B) do not fit in " +
                          std::to_string(capacity) + " B");
  for (const Request &r : trace)
  {
    if (r.prompt_len == 0 || r.decode_len == 0 || !(r.arrival >= 0.0))
      throw ArgumentError("request " + std::to_string(r.id) + " needs prompt_len, decode_len >= 1 and arrival >= 0");
    if (weights + static_cast<double>(r.prompt_len + r.decode_len) * per_token > capacity)
      throw InfeasibleError("request " + std::to_string(r.id) + " does not fit in memory even at batch 1");
  }

  std::vector<std::size_t> order(trace.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return trace[a].arrival < trace[b].arrival; });

  struct Running
  {
    const Request *request;
    std::size_t generated = 0;
    double reserved = 0.0;
  };
  std::vector<Running> running;
  std::size_t next = 0, completed = 0;
  double t = 0.0, reserved = 0.0, latency_sum = 0.0;
  std::size_t decode_tokens = 0;
  ServingReport report;
  report.memory_high_water = weights;

  auto snapshot = [&](std::size_t batch_tokens, double memory) {
    SimulatorSnapshot s;
    s.time = t;
    s.admitted = next;
    s.active = running.size();
    s.completed = completed;
    s.batch_tokens = batch_tokens;
    s.memory = memory;
    for (std::size_t i = next; i < order.size() && trace[order[i]].arrival <= t; ++i)
      ++s.queued;
    report.timeline.push_back(s);
    if (observer)
      observer(s);
  };

  while (horizon <= 0.0 || t < horizon)
  {
    while (next < order.size() && trace[order[next]].arrival <= t && running.size() < config.max_batch)
    {
      const Request &r = trace[order[next]];
      const double need = static_cast<double>(r.prompt_len + r.decode_len) * per_token;
      if (weights + reserved + need > capacity)
        break; // FCFS: the head of the queue blocks the rest
      running.push_back(Running{&r, 0, need});
      reserved += need;
      ++next;
    }
    if (running.empty())
    {
      if (next == order.size())
        break;
      t = std::max(t, trace[order[next]].arrival);
      continue;
    }

    // Requests admitted this step run their prefill; the rest decode one token.
    OperatorCost attention;
    std::size_t rows = 0, decoding = 0;
    for (const Running &r : running)
    {
      if (r.generated == 0)
      {
        rows += r.request->prompt_len;
        attention += prefill_attention_cost(r.request->prompt_len, kv_bits, config.dims);
      }
      else
      {
        ++rows;
        ++decoding;
        attention += attention_cost(1, r.request->prompt_len + r.generated, kv_bits, config.dims);
      }
    }
    const Breakdown step = step_times(dense_cost(rows, config.dims, config.scheme), attention,
                                      other_cost(rows, running.size(), config.dims), config.scheme, hw);
    const double dt = step.total();
    t += dt;
    report.time += step;
    ++report.steps;
    report.peak_batch = std::max(report.peak_batch, running.size());
    latency_sum += dt * static_cast<double>(decoding);
    decode_tokens += decoding;

    double kv_used = 0.0;
    for (Running &r : running)
    {
      ++r.generated;
      ++report.generated_tokens;
      kv_used += static_cast<double>(r.request->prompt_len + r.generated) * per_token;
    }
    report.memory_high_water = std::max(report.memory_high_water, weights + kv_used);

    auto done = std::stable_partition(running.begin(), running.end(),
                                      [](const Running &r) { return r.generated < r.request->decode_len; });
    for (auto it = done; it != running.end(); ++it)
    {
      reserved -= it->reserved;
      ++completed;
    }
    running.erase(done, running.end());
    snapshot(rows, weights + kv_used);
  }

  report.elapsed = t;
  report.completed = completed;
  report.throughput = t > 0.0 ? static_cast<double>(report.generated_tokens) / t : 0.0;
  report.mean_decode_latency = decode_tokens ? latency_sum / static_cast<double>(decode_tokens) : 0.0;
  return report;
}

std::string sweep_to_csv(const std::vector<SweepPoint> &points)
{
  std::ostringstream out;
  out.precision(10);
  out << "scheme,batch,throughput_tokens_per_s,mean_decode_latency_s,memory_high_water_bytes,peak_batch,"
         "dense_fraction,attention_fraction,other_fraction,quant_overhead_fraction\n";
  for (const auto &p : points)
  {
    const Breakdown f = p.report.time.fractions();
    out << to_string(p.scheme) << ',' << p.batch << ',' << p.report.throughput << ',' << p.report.mean_decode_latency
        << ',' << p.report.memory_high_water << ',' << p.report.peak_batch << ',' << f.dense << ',' << f.attention
        << ',' << f.other << ',' << f.quant_overhead << '\n';
  }
  return out.str();
}

} // namespace atomforge
