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

#include "atomforge/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <utility>

namespace atomforge
{

namespace
{

void require(bool ok, const std::string &message)
{
  if (!ok)
    throw ConfigError(message);
}

bool valid_bits(int bits) { return is_bypass(bits) || is_packable_bit_width(bits); }

Matrix normal_matrix(std::mt19937_64 &rng, std::size_t rows, std::size_t cols, double stddev)
{
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (auto &v : m.data())
    v = static_cast<float>(dist(rng));
  return m;
}

std::vector<std::size_t> pick_channels(std::mt19937_64 &rng, std::size_t n, std::size_t count)
{
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(std::min(count, n));
  std::sort(all.begin(), all.end());
  return all;
}

Matrix rms_norm(const Matrix &x, const Matrix &gain, float eps)
{
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r)
  {
    auto in = x.row(r);
    float ss = 0.0f;
    for (float v : in)
      ss += v * v;
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(in.size()) + eps);
    auto o = out.row(r);
    for (std::size_t c = 0; c < in.size(); ++c)
      o[c] = in[c] * inv * gain(0, c);
  }
  return out;
}

void apply_rope(std::span<float> v, std::size_t n_heads, std::size_t head_dim, std::size_t position, float theta)
{
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < head_dim / 2; ++i)
    {
      const float freq = std::pow(theta, -2.0f * static_cast<float>(i) / static_cast<float>(head_dim));
      const float angle = static_cast<float>(position) * freq;
      const float c = std::cos(angle), s = std::sin(angle);
      float &a = v[h * head_dim + 2 * i];
      float &b = v[h * head_dim + 2 * i + 1];
      const float a0 = a, b0 = b;
      a = a0 * c - b0 * s;
      b = a0 * s + b0 * c;
    }
}

float silu(float x) { return x / (1.0f + std::exp(-x)); }

void add_into(Matrix &x, const Matrix &delta)
{
  for (std::size_t i = 0; i < x.size(); ++i)
    x.data()[i] += delta.data()[i];
}

} // namespace

void ModelConfig::validate() const
{
  require(n_layers >= 1 && hidden_dim >= 1 && n_heads >= 1 && head_dim >= 1 && ffn_dim >= 1 && vocab_size >= 1,
          "all model dimensions must be at least 1");
  require(hidden_dim == n_heads * head_dim, "hidden_dim " + std::to_string(hidden_dim) + " != n_heads * head_dim (" +
                                                std::to_string(n_heads) + " * " + std::to_string(head_dim) + ")");
  require(head_dim % 2 == 0, "head_dim must be even for rotary embeddings");
  require(group_size >= 1, "group_size must be at least 1");
  require(outlier_count <= std::min(hidden_dim, ffn_dim), "outlier_count exceeds a layer input width");
  for (std::size_t width : {hidden_dim, ffn_dim})
    require((width - outlier_count) % group_size == 0,
            "group_size " + std::to_string(group_size) + " must divide " + std::to_string(width - outlier_count) +
                " (input width minus outlier_count)");
  // Fewer outliers than a group form a single group of their own.
  require(outlier_count < group_size || outlier_count % group_size == 0,
          "group_size " + std::to_string(group_size) + " must divide outlier_count " + std::to_string(outlier_count));
  require(valid_bits(weight_bits) && valid_bits(activation_bits) && valid_bits(kv_bits) && valid_bits(outlier_bits),
          "bit widths must be 3, 4, 8 or 16");
  require(clip.activation > 0.0f && clip.activation <= 1.0f && clip.weight > 0.0f && clip.weight <= 1.0f,
          "clip factors must lie in (0, 1]");
  require(injected_outliers <= std::min(hidden_dim, ffn_dim), "injected_outliers exceeds a layer input width");
  require(outlier_magnitude > 0.0f && std::isfinite(outlier_magnitude), "outlier_magnitude must be positive");
  require(rope_theta > 0.0f && norm_eps > 0.0f, "rope_theta and norm_eps must be positive");
}

nlohmann::json ModelConfig::to_json() const
{
  return {{"n_layers", n_layers},
          {"hidden_dim", hidden_dim},
          {"n_heads", n_heads},
          {"head_dim", head_dim},
          {"ffn_dim", ffn_dim},
          {"vocab_size", vocab_size},
          {"group_size", group_size},
          {"outlier_count", outlier_count},
          {"weight_bits", weight_bits},
          {"activation_bits", activation_bits},
          {"kv_bits", kv_bits},
          {"outlier_bits", outlier_bits},
          {"clip", {{"activation", clip.activation}, {"weight", clip.weight}}},
          {"clip_search", clip_search},
          {"injected_outliers", injected_outliers},
          {"outlier_magnitude", outlier_magnitude},
          {"rope_theta", rope_theta},
          {"norm_eps", norm_eps},
          {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json &j)
{
  ModelConfig c;
  try
  {
    if (!j.is_object())
      throw ConfigError("model config must be a JSON object");
    for (const auto &[key, value] : j.items())
    {
      if (key == "n_layers")
        c.n_layers = value.get<std::size_t>();
      else if (key == "hidden_dim")
        c.hidden_dim = value.get<std::size_t>();
      else if (key == "n_heads")
        c.n_heads = value.get<std::size_t>();
      else if (key == "head_dim")
        c.head_dim = value.get<std::size_t>();
      else if (key == "ffn_dim")
        c.ffn_dim = value.get<std::size_t>();
      else if (key == "vocab_size")
        c.vocab_size = value.get<std::size_t>();
      else if (key == "group_size")
        c.group_size = value.get<std::size_t>();
      else if (key == "outlier_count")
        c.outlier_count = value.get<std::size_t>();
      else if (key == "weight_bits")
        c.weight_bits = value.get<int>();
      else if (key == "activation_bits")
        c.activation_bits = value.get<int>();
      else if (key == "kv_bits")
        c.kv_bits = value.get<int>();
      else if (key == "outlier_bits")
        c.outlier_bits = value.get<int>();
      else if (key == "clip")
      {
        c.clip.activation = value.value("activation", c.clip.activation);
        c.clip.weight = value.value("weight", c.clip.weight);
      }
      else if (key == "clip_search")
        c.clip_search = value.get<bool>();
      else if (key == "injected_outliers")
        c.injected_outliers = value.get<std::size_t>();
      else if (key == "outlier_magnitude")
        c.outlier_magnitude = value.get<float>();
      else if (key == "rope_theta")
        c.rope_theta = value.get<float>();
      else if (key == "norm_eps")
        c.norm_eps = value.get<float>();
      else if (key == "seed")
        c.seed = value.get<std::uint64_t>();
      else
        throw ConfigError("unknown model config key '" + key + "'");
    }
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string to_string(Site site)
{
  switch (site)
  {
    case Site::kQkv:
      return "qkv";
    case Site::kOut:
      return "out";
    case Site::kGateUp:
      return "gate_up";
    case Site::kDown:
      return "down";
  }
  return "unknown";
}

const Matrix &site_weight(const LayerWeights &layer, Site site)
{
  switch (site)
  {
    case Site::kQkv:
      return layer.w_qkv;
    case Site::kOut:
      return layer.w_o;
    case Site::kGateUp:
      return layer.w_gate_up;
    case Site::kDown:
      return layer.w_down;
  }
  throw ArgumentError("unknown site");
}

Matrix &site_weight(LayerWeights &layer, Site site)
{
  return const_cast<Matrix &>(site_weight(std::as_const(layer), site));
}

void check_model_shapes(const ToyModel &model)
{
  const auto &c = model.config;
  const std::size_t h = c.hidden_dim, f = c.ffn_dim;
  auto expect = [](const Matrix &m, std::size_t r, std::size_t cols, const std::string &name) {
    if (m.rows() != r || m.cols() != cols)
      throw ShapeError(name + " is " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ", expected " +
                       std::to_string(r) + "x" + std::to_string(cols));
  };
  expect(model.embedding, c.vocab_size, h, "embedding");
  expect(model.final_norm, 1, h, "final_norm");
  if (model.layers.size() != c.n_layers)
    throw ShapeError("model has " + std::to_string(model.layers.size()) + " layers, config says " +
                     std::to_string(c.n_layers));
  for (const auto &l : model.layers)
  {
    expect(l.attn_norm, 1, h, "attn_norm");
    expect(l.w_qkv, h, 3 * h, "w_qkv");
    expect(l.w_o, h, h, "w_o");
    expect(l.ffn_norm, 1, h, "ffn_norm");
    expect(l.w_gate_up, h, 2 * f, "w_gate_up");
    expect(l.w_down, f, h, "w_down");
  }
}

ToyModel build_toy_model(const ModelConfig &config, std::uint64_t seed)
{
  config.validate();
  ToyModel m;
  m.config = config;
  m.config.seed = seed;
  std::mt19937_64 rng(seed);
  const std::size_t h = config.hidden_dim, f = config.ffn_dim;
  m.embedding = normal_matrix(rng, config.vocab_size, h, 0.2);
  for (std::size_t l = 0; l < config.n_layers; ++l)
  {
    LayerWeights w;
    w.attn_norm = Matrix(1, h, 1.0f);
    w.w_qkv = normal_matrix(rng, h, 3 * h, 1.0 / std::sqrt(static_cast<double>(h)));
    w.w_o = normal_matrix(rng, h, h, 1.0 / std::sqrt(static_cast<double>(h)));
    w.ffn_norm = Matrix(1, h, 1.0f);
    w.w_gate_up = normal_matrix(rng, h, 2 * f, 1.0 / std::sqrt(static_cast<double>(h)));
    w.w_down = normal_matrix(rng, f, h, 1.0 / std::sqrt(static_cast<double>(f)));
    m.layers.push_back(std::move(w));
  }
  m.final_norm = Matrix(1, h, 1.0f);
  if (config.injected_outliers > 0)
    inject_outliers(m, config.injected_outliers, config.outlier_magnitude, seed ^ 0x9e3779b97f4a7c15ULL);
  return m;
}

void inject_outliers(ToyModel &model, std::size_t count, float magnitude, std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  const std::size_t h = model.config.hidden_dim, f = model.config.ffn_dim;
  for (auto &layer : model.layers)
  {
    // Norm gains feed the QKV and gate/up inputs; the consuming rows shrink.
    for (auto [gain, weight] : {std::pair{&layer.attn_norm, &layer.w_qkv}, std::pair{&layer.ffn_norm, &layer.w_gate_up}})
      for (std::size_t c : pick_channels(rng, h, count))
      {
        (*gain)(0, c) *= magnitude;
        for (float &v : weight->row(c))
          v /= magnitude;
      }
    // Down-projection input: scale the up columns, shrink the down rows.
    for (std::size_t c : pick_channels(rng, f, count))
    {
      for (std::size_t r = 0; r < h; ++r)
        layer.w_gate_up(r, f + c) *= magnitude;
      for (float &v : layer.w_down.row(c))
        v /= magnitude;
    }
  }
}

InferenceSession::InferenceSession(const ToyModel &model, const std::vector<SiteLayers> *quantized, int kv_bits)
  : model_(&model), quantized_(quantized),
    cache_(KVCacheConfig{model.config.n_layers, model.config.n_heads, model.config.head_dim, 16, kv_bits})
{
  if (quantized_ && quantized_->size() != model.config.n_layers)
    throw ShapeError("quantized layer count " + std::to_string(quantized_->size()) + " != model layers " +
                     std::to_string(model.config.n_layers));
  seq_ = cache_.add_sequence();
}

Matrix InferenceSession::linear(std::size_t layer, Site site, const Matrix &x) const
{
  if (observer_)
    observer_(layer, site, x);
  if (quantized_)
  {
    const auto &q = (*quantized_)[layer][static_cast<std::size_t>(site)];
    if (q)
      return quantized_linear(x, *q);
  }
  return fp_oracle_gemm(x, site_weight(model_->layers[layer], site));
}

Matrix InferenceSession::prefill(std::span<const std::int32_t> tokens)
{
  const ModelConfig &cfg = model_->config;
  const std::size_t n = tokens.size(), h = cfg.hidden_dim, f = cfg.ffn_dim;
  Matrix x(n, h);
  for (std::size_t t = 0; t < n; ++t)
  {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= cfg.vocab_size)
      throw RangeError("token id " + std::to_string(tokens[t]) + " outside vocabulary of " +
                       std::to_string(cfg.vocab_size));
    auto src = model_->embedding.row(static_cast<std::size_t>(tokens[t]));
    std::copy(src.begin(), src.end(), x.row(t).begin());
  }

  for (std::size_t l = 0; l < cfg.n_layers; ++l)
  {
    const LayerWeights &w = model_->layers[l];
    const Matrix qkv = linear(l, Site::kQkv, rms_norm(x, w.attn_norm, cfg.norm_eps));
    Matrix attn(n, h);
    Matrix q(1, h), k(1, h), v(1, h);
    for (std::size_t t = 0; t < n; ++t)
    {
      auto row = qkv.row(t);
      std::copy_n(row.begin(), h, q.row(0).begin());
      std::copy_n(row.begin() + h, h, k.row(0).begin());
      std::copy_n(row.begin() + 2 * h, h, v.row(0).begin());
      apply_rope(q.row(0), cfg.n_heads, cfg.head_dim, position_ + t, cfg.rope_theta);
      apply_rope(k.row(0), cfg.n_heads, cfg.head_dim, position_ + t, cfg.rope_theta);
      cache_.append_token(l, seq_, k, v);
      const Matrix out = cache_.attention(l, seq_, q);
      std::copy_n(out.row(0).begin(), h, attn.row(t).begin());
    }
    add_into(x, linear(l, Site::kOut, attn));

    const Matrix gate_up = linear(l, Site::kGateUp, rms_norm(x, w.ffn_norm, cfg.norm_eps));
    Matrix act(n, f);
    for (std::size_t t = 0; t < n; ++t)
      for (std::size_t c = 0; c < f; ++c)
        act(t, c) = silu(gate_up(t, c)) * gate_up(t, f + c);
    add_into(x, linear(l, Site::kDown, act));
  }
  position_ += n;
  const Matrix final_hidden = rms_norm(x, model_->final_norm, cfg.norm_eps);
  return fp_oracle_gemm(final_hidden, transpose(model_->embedding));
}

Matrix InferenceSession::decode(std::int32_t token)
{
  const std::int32_t one[] = {token};
  return prefill(one);
}

Matrix forward_fp(const ToyModel &model, std::span<const std::int32_t> tokens)
{
  InferenceSession session(model, nullptr, kBypassBits);
  return session.prefill(tokens);
}

Matrix forward_quantized(const ModelBundle &bundle, std::span<const std::int32_t> tokens, ForwardMode mode)
{
  InferenceSession session(bundle.fp, &bundle.layers, bundle.recipe.kv_bits);
  if (mode == ForwardMode::kPrefill)
    return session.prefill(tokens);
  Matrix logits(tokens.size(), bundle.fp.config.vocab_size);
  for (std::size_t t = 0; t < tokens.size(); ++t)
  {
    const Matrix row = session.decode(tokens[t]);
    std::copy(row.data().begin(), row.data().end(), logits.row(t).begin());
  }
  return logits;
}

std::vector<std::span<const std::int32_t>> split_windows(std::span<const std::int32_t> stream, std::size_t window)
{
  std::vector<std::span<const std::int32_t>> out;
  if (window == 0)
    window = stream.size();
  for (std::size_t begin = 0; begin < stream.size(); begin += window)
    out.push_back(stream.subspan(begin, std::min(window, stream.size() - begin)));
  return out;
}

namespace
{

// log-softmax of one logits row, in double.
std::vector<double> log_softmax(std::span<const float> logits)
{
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (float v : logits)
    z += std::exp(v - mx);
  const double log_z = mx + std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i)
    out[i] = logits[i] - log_z;
  return out;
}

template <typename Forward>
double windowed_perplexity(std::span<const std::int32_t> stream, std::size_t window, Forward forward)
{
  if (stream.size() < 2)
    throw ArgumentError("perplexity needs at least 2 tokens, got " + std::to_string(stream.size()));
  double nll = 0.0;
  std::size_t count = 0;
  for (auto w : split_windows(stream, window))
  {
    if (w.size() < 2)
      continue;
    const Matrix logits = forward(w);
    nll += mean_nll(logits, w) * static_cast<double>(w.size() - 1);
    count += w.size() - 1;
  }
  return std::exp(nll / static_cast<double>(count));
}

} // namespace

double mean_nll(const Matrix &logits, std::span<const std::int32_t> tokens)
{
  if (tokens.size() < 2)
    throw ArgumentError("next-token NLL needs at least 2 tokens");
  if (logits.rows() < tokens.size() - 1)
    throw ShapeError("fewer logit rows than predictions");
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t)
    total -= log_softmax(logits.row(t))[static_cast<std::size_t>(tokens[t + 1])];
  return total / static_cast<double>(tokens.size() - 1);
}

double perplexity(const ToyModel &model, std::span<const std::int32_t> stream, std::size_t window)
{
  return windowed_perplexity(stream, window, [&](auto w) { return forward_fp(model, w); });
}

double perplexity(const ModelBundle &bundle, std::span<const std::int32_t> stream, std::size_t window)
{
  return windowed_perplexity(stream, window, [&](auto w) { return forward_quantized(bundle, w); });
}

double mean_kl(const Matrix &p_logits, const Matrix &q_logits)
{
  if (p_logits.rows() != q_logits.rows() || p_logits.cols() != q_logits.cols())
    throw ShapeError("KL operands differ in shape");
  if (p_logits.rows() == 0)
    return 0.0;
  double total = 0.0;
  for (std::size_t r = 0; r < p_logits.rows(); ++r)
  {
    const auto lp = log_softmax(p_logits.row(r));
    const auto lq = log_softmax(q_logits.row(r));
    for (std::size_t i = 0; i < lp.size(); ++i)
      total += std::exp(lp[i]) * (lp[i] - lq[i]);
  }
  return total / static_cast<double>(p_logits.rows());
}

std::vector<std::int32_t> sample_stream(const ToyModel &model, std::size_t length, std::size_t window,
                                        std::uint64_t seed)
{
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> first(0, static_cast<std::int32_t>(model.config.vocab_size) - 1);
  if (window == 0)
    window = length;
  std::vector<std::int32_t> out;
  out.reserve(length);
  while (out.size() < length)
  {
    InferenceSession session(model, nullptr, kBypassBits);
    std::int32_t token = first(rng);
    out.push_back(token);
    for (std::size_t t = 1; t < window && out.size() < length; ++t)
    {
      const auto lp = log_softmax(session.decode(token).row(0));
      std::vector<double> probs(lp.size());
      std::transform(lp.begin(), lp.end(), probs.begin(), [](double v) { return std::exp(v); });
      std::discrete_distribution<std::int32_t> next(probs.begin(), probs.end());
      token = next(rng);
      out.push_back(token);
    }
  }
  return out;
}

} // namespace atomforge
