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

#include "atomforge/kvcache.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>

namespace atomforge
{

void KVCacheConfig::validate() const
{
  if (n_layers == 0 || n_heads == 0 || head_dim == 0)
    throw ConfigError("KV cache needs at least one layer, head and head dimension");
  if (page_size == 0)
    throw ConfigError("KV cache page size must be positive");
  if (!is_bypass(bits) && !is_packable_bit_width(bits))
    throw ConfigError("KV cache bits must be 3, 4, 8 or 16, got " + std::to_string(bits));
}

QuantizedKVCache::QuantizedKVCache(KVCacheConfig config) : config_(config)
{
  config_.validate();
  if (!is_bypass(config_.bits))
    row_bytes_ = bitpack::row_bytes(config_.head_dim, config_.bits);
}

SequenceId QuantizedKVCache::add_sequence()
{
  const SequenceId id = next_id_++;
  sequences_.emplace(id, Sequence(config_.n_layers));
  return id;
}

void QuantizedKVCache::remove_sequence(SequenceId seq)
{
  if (sequences_.erase(seq) == 0)
    throw LookupError("unknown sequence " + std::to_string(seq));
}

bool QuantizedKVCache::has_sequence(SequenceId seq) const { return sequences_.count(seq) != 0; }

const QuantizedKVCache::Sequence &QuantizedKVCache::sequence(SequenceId seq) const
{
  auto it = sequences_.find(seq);
  if (it == sequences_.end())
    throw LookupError("unknown sequence " + std::to_string(seq));
  return it->second;
}

QuantizedKVCache::Sequence &QuantizedKVCache::sequence(SequenceId seq)
{
  return const_cast<Sequence &>(std::as_const(*this).sequence(seq));
}

void QuantizedKVCache::check_layer(std::size_t layer) const
{
  if (layer >= config_.n_layers)
    throw LookupError("layer " + std::to_string(layer) + " out of range (" + std::to_string(config_.n_layers) +
                      " layers)");
}

void QuantizedKVCache::append_token(std::size_t layer, SequenceId seq, const Matrix &k_vec, const Matrix &v_vec)
{
  check_layer(layer);
  Sequence &s = sequence(seq);
  const std::size_t width = config_.width();
  for (const Matrix *m : {&k_vec, &v_vec})
  {
    if (m->rows() != 1 || m->cols() != width)
      throw ShapeError("KV vector must be 1x" + std::to_string(width) + ", got " + std::to_string(m->rows()) + "x" +
                       std::to_string(m->cols()));
    for (float x : m->data())
      if (!std::isfinite(x))
        throw RangeError("KV vector contains a non-finite value");
  }
  if (layer > 0 && s[layer].tokens >= s[layer - 1].tokens)
    throw StateError("layer " + std::to_string(layer) + " would run ahead of layer " + std::to_string(layer - 1));

  LayerStore &store = s[layer];
  if (store.pages.empty() || store.pages.back().used == config_.page_size)
  {
    Page page;
    const std::size_t heads = config_.n_heads;
    if (is_bypass(config_.bits))
    {
      page.k_values.resize(config_.page_size * width);
      page.v_values.resize(config_.page_size * width);
    }
    else
    {
      page.k_codes.resize(config_.page_size * heads * row_bytes_);
      page.v_codes.resize(config_.page_size * heads * row_bytes_);
    }
    page.k_params.reserve(config_.page_size * heads);
    page.v_params.reserve(config_.page_size * heads);
    store.pages.push_back(std::move(page));
  }
  Page &page = store.pages.back();
  const std::size_t slot = page.used;
  const std::size_t d = config_.head_dim;
  std::vector<std::int32_t> codes(d);
  for (std::size_t h = 0; h < config_.n_heads; ++h)
  {
    for (int which = 0; which < 2; ++which)
    {
      const Matrix &src = which == 0 ? k_vec : v_vec;
      std::span<const float> slice = src.row(0).subspan(h * d, d);
      auto &params = which == 0 ? page.k_params : page.v_params;
      if (is_bypass(config_.bits))
      {
        auto &dst = which == 0 ? page.k_values : page.v_values;
        std::copy(slice.begin(), slice.end(), dst.begin() + (slot * config_.n_heads + h) * d);
        params.push_back(QuantParams{1.0f, 0, kBypassBits, true});
        continue;
      }
      const QuantParams p = asymmetric_params(slice, config_.bits, 1.0f);
      for (std::size_t i = 0; i < d; ++i)
        codes[i] = quantize_value(slice[i], p);
      auto &dst = which == 0 ? page.k_codes : page.v_codes;
      bitpack::pack_row(codes, config_.bits,
                        std::span(dst).subspan((slot * config_.n_heads + h) * row_bytes_, row_bytes_));
      params.push_back(p);
    }
  }
  ++page.used;
  ++store.tokens;
}

std::size_t QuantizedKVCache::length(std::size_t layer, SequenceId seq) const
{
  check_layer(layer);
  return sequence(seq)[layer].tokens;
}

std::size_t QuantizedKVCache::page_count(std::size_t layer, SequenceId seq) const
{
  check_layer(layer);
  return sequence(seq)[layer].pages.size();
}

std::size_t QuantizedKVCache::param_count(std::size_t layer, SequenceId seq) const
{
  check_layer(layer);
  std::size_t n = 0;
  for (const auto &page : sequence(seq)[layer].pages)
    n += page.k_params.size() + page.v_params.size();
  return n;
}

bool QuantizedKVCache::lengths_consistent(SequenceId seq) const
{
  const Sequence &s = sequence(seq);
  return std::all_of(s.begin(), s.end(), [&](const LayerStore &l) { return l.tokens == s.front().tokens; });
}

Matrix QuantizedKVCache::load(const LayerStore &store, bool key) const
{
  const std::size_t d = config_.head_dim;
  const std::size_t heads = config_.n_heads;
  Matrix out(store.tokens, config_.width());
  std::vector<std::int32_t> codes(d);
  std::size_t t = 0;
  for (const auto &page : store.pages)
  {
    const auto &params = key ? page.k_params : page.v_params;
    for (std::size_t slot = 0; slot < page.used; ++slot, ++t)
    {
      auto row = out.row(t);
      for (std::size_t h = 0; h < heads; ++h)
      {
        if (is_bypass(config_.bits))
        {
          const auto &src = key ? page.k_values : page.v_values;
          std::copy_n(src.begin() + (slot * heads + h) * d, d, row.begin() + h * d);
          continue;
        }
        const auto &src = key ? page.k_codes : page.v_codes;
        bitpack::unpack_row(std::span(src).subspan((slot * heads + h) * row_bytes_, row_bytes_), config_.bits, false,
                            codes);
        const QuantParams &p = params[slot * heads + h];
        for (std::size_t i = 0; i < d; ++i)
          row[h * d + i] = dequantize_value(codes[i], p);
      }
    }
  }
  return out;
}

Matrix QuantizedKVCache::keys(std::size_t layer, SequenceId seq) const
{
  check_layer(layer);
  return load(sequence(seq)[layer], true);
}

Matrix QuantizedKVCache::values(std::size_t layer, SequenceId seq) const
{
  check_layer(layer);
  return load(sequence(seq)[layer], false);
}

Matrix QuantizedKVCache::probabilities(const Matrix &keys, const Matrix &q_vec) const
{
  const std::size_t d = config_.head_dim;
  const std::size_t tokens = keys.rows();
  const float inv_sqrt_d = 1.0f / std::sqrt(static_cast<float>(d));
  Matrix probs(config_.n_heads, tokens);
  auto q = q_vec.row(0);
  for (std::size_t h = 0; h < config_.n_heads; ++h)
  {
    auto p = probs.row(h);
    float max_score = -std::numeric_limits<float>::infinity();
    for (std::size_t t = 0; t < tokens; ++t)
    {
      auto k = keys.row(t);
      float dot = 0.0f;
      for (std::size_t i = 0; i < d; ++i)
        dot += q[h * d + i] * k[h * d + i];
      p[t] = dot * inv_sqrt_d;
      max_score = std::max(max_score, p[t]);
    }
    float total = 0.0f;
    for (auto &v : p)
    {
      v = std::exp(v - max_score);
      total += v;
    }
    for (auto &v : p)
      v /= total;
  }
  return probs;
}

Matrix QuantizedKVCache::attention_probabilities(std::size_t layer, SequenceId seq, const Matrix &q_vec) const
{
  check_layer(layer);
  const LayerStore &store = sequence(seq)[layer];
  if (q_vec.rows() != 1 || q_vec.cols() != config_.width())
    throw ShapeError("query must be 1x" + std::to_string(config_.width()));
  if (store.tokens == 0)
    throw StateError("attention over an empty sequence");
  return probabilities(load(store, true), q_vec);
}

Matrix QuantizedKVCache::attention(std::size_t layer, SequenceId seq, const Matrix &q_vec) const
{
  const Matrix probs = attention_probabilities(layer, seq, q_vec);
  const Matrix v = values(layer, seq);
  const std::size_t d = config_.head_dim;
  Matrix out(1, config_.width(), 0.0f);
  auto o = out.row(0);
  for (std::size_t h = 0; h < config_.n_heads; ++h)
    for (std::size_t t = 0; t < v.rows(); ++t)
    {
      const float w = probs(h, t);
      auto vr = v.row(t);
      for (std::size_t i = 0; i < d; ++i)
        o[h * d + i] += w * vr[h * d + i];
    }
  return out;
}

double cache_memory_bytes(const KVCacheConfig &config, std::size_t tokens, int bits)
{
  if (bits <= 0 || bits > 16)
    throw ArgumentError("KV bits must be in [1, 16], got " + std::to_string(bits));
  const double pairs = static_cast<double>(tokens) * config.n_layers * config.n_heads;
  const double codes = pairs * 2.0 * config.head_dim * bits / 8.0;
  const double params = bits < 16 ? pairs * 2.0 * 4.0 : 0.0;
  return codes + params;
}

} // namespace atomforge
