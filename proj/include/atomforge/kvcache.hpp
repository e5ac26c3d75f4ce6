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

#include "atomforge/quantizer.hpp"

#include <map>
#include <vector>

namespace atomforge
{

struct KVCacheConfig
{
  std::size_t n_layers = 1;
  std::size_t n_heads = 1;
  std::size_t head_dim = 64;
  std::size_t page_size = 16;
  // 3, 4 or 8 for asymmetric per-(token, head) codes; 16 stores floats.
  int bits = 4;

  std::size_t width() const noexcept { return n_heads * head_dim; }
  void validate() const;
};

using SequenceId = std::size_t;

/**
 * @brief Paged K/V store for several sequences, laid out [layer][sequence][page].
 *
 * Each appended token is split into heads and every head slice of K and of V
 * gets its own asymmetric params. Layers of one sequence may lag behind the
 * layer below them (prefill fills one layer at a time) but never run ahead.
 */
class QuantizedKVCache
{
public:
  explicit QuantizedKVCache(KVCacheConfig config);

  const KVCacheConfig &config() const noexcept { return config_; }

  SequenceId add_sequence();
  void remove_sequence(SequenceId seq);
  bool has_sequence(SequenceId seq) const;

  void append_token(std::size_t layer, SequenceId seq, const Matrix &k_vec, const Matrix &v_vec);

  std::size_t length(std::size_t layer, SequenceId seq) const;
  std::size_t page_count(std::size_t layer, SequenceId seq) const;
  std::size_t param_count(std::size_t layer, SequenceId seq) const;
  /// True when every layer of the sequence holds the same number of tokens.
  bool lengths_consistent(SequenceId seq) const;

  /// Dequantized keys or values of one layer: tokens x (heads * head_dim).
  Matrix keys(std::size_t layer, SequenceId seq) const;
  Matrix values(std::size_t layer, SequenceId seq) const;

  /// Softmax weights per head over the cached tokens: heads x tokens.
  Matrix attention_probabilities(std::size_t layer, SequenceId seq, const Matrix &q_vec) const;
  /// 1 x (heads * head_dim) attention output over the dequantized cache.
  Matrix attention(std::size_t layer, SequenceId seq, const Matrix &q_vec) const;

private:
  struct Page
  {
    std::vector<std::uint8_t> k_codes;
    std::vector<std::uint8_t> v_codes;
    std::vector<float> k_values; // bypass storage
    std::vector<float> v_values;
    std::vector<QuantParams> k_params; // token-major, heads per token
    std::vector<QuantParams> v_params;
    std::size_t used = 0;
  };
  struct LayerStore
  {
    std::vector<Page> pages;
    std::size_t tokens = 0;
  };
  using Sequence = std::vector<LayerStore>;

  const Sequence &sequence(SequenceId seq) const;
  Sequence &sequence(SequenceId seq);
  void check_layer(std::size_t layer) const;
  Matrix load(const LayerStore &store, bool key) const;
  Matrix probabilities(const Matrix &keys, const Matrix &q_vec) const;

  KVCacheConfig config_;
  std::size_t row_bytes_ = 0;
  std::map<SequenceId, Sequence> sequences_;
  SequenceId next_id_ = 0;
};

/// Modeled bytes for K and V of `tokens` tokens: codes plus 4 bytes of
/// (scale, zero point) per token-head for each of K and V below 16 bits.
double cache_memory_bytes(const KVCacheConfig &config, std::size_t tokens, int bits);

} // namespace atomforge
