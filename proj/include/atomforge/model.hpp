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

#include "atomforge/kvcache.hpp"
#include "atomforge/qgemm.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace atomforge
{

struct ModelConfig
{
  std::size_t n_layers = 2;
  std::size_t hidden_dim = 128;
  std::size_t n_heads = 4;
  std::size_t head_dim = 32;
  std::size_t ffn_dim = 256;
  std::size_t vocab_size = 128;

  std::size_t group_size = 16;
  std::size_t outlier_count = 16;
  int weight_bits = 4;
  int activation_bits = 4;
  int kv_bits = 4;
  int outlier_bits = 8;
  ClipConfig clip;
  // Search the clip factors per layer on calibration data instead of using
  // the fixed values above.
  bool clip_search = true;

  // Outlier channels planted at every quantized-operator input; the FP
  // function is unchanged (see build_toy_model).
  std::size_t injected_outliers = 0;
  float outlier_magnitude = 30.0f;

  float rope_theta = 10000.0f;
  float norm_eps = 1e-5f;
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json &j);
};

struct LayerWeights
{
  Matrix attn_norm;  // 1 x hidden
  Matrix w_qkv;      // hidden x 3*hidden, columns [q | k | v]
  Matrix w_o;        // hidden x hidden
  Matrix ffn_norm;   // 1 x hidden
  Matrix w_gate_up;  // hidden x 2*ffn, columns [gate | up]
  Matrix w_down;     // ffn x hidden
};

struct ToyModel
{
  ModelConfig config;
  Matrix embedding; // vocab x hidden, tied with the output head
  std::vector<LayerWeights> layers;
  Matrix final_norm; // 1 x hidden
};

/// The four quantized dense operators of a block, in execution order.
enum class Site
{
  kQkv,
  kOut,
  kGateUp,
  kDown,
};
inline constexpr std::size_t kSiteCount = 4;
inline constexpr std::array<Site, kSiteCount> kSites{Site::kQkv, Site::kOut, Site::kGateUp, Site::kDown};
std::string to_string(Site site);
const Matrix &site_weight(const LayerWeights &layer, Site site);
Matrix &site_weight(LayerWeights &layer, Site site);

/// Throws ShapeError unless every tensor matches the config.
void check_model_shapes(const ToyModel &model);

ToyModel build_toy_model(const ModelConfig &config, std::uint64_t seed);

/// Scales `count` random channels at every quantized-operator input by
/// `magnitude` and divides the consuming weight rows by the same factor.
void inject_outliers(ToyModel &model, std::size_t count, float magnitude, std::uint64_t seed);

struct QuantRecipe
{
  int weight_bits = 4;
  int activation_bits = 4;
  int outlier_bits = 8;
  int kv_bits = 4;
  std::size_t outlier_count = 0;
  GroupScheme activation_scheme = GroupScheme::per_token();
  GroupScheme weight_scheme = GroupScheme::per_channel();
  float activation_clip = 1.0f;
  float weight_clip = 1.0f;
  bool clip_search = false;
  bool gptq = false;
  bool gptq_outliers = true;
  // Capture each operator's calibration input from the model with all
  // earlier operators already quantized.
  bool sequential = true;
  double damping = 0.01;
  std::size_t calibration_window = 64;

  MixedPrecisionSpec activation_spec() const;
  MixedPrecisionSpec weight_spec() const;

  /// Full recipe implied by a model config.
  static QuantRecipe from_config(const ModelConfig &config);
  /// Every tensor in bypass precision.
  static QuantRecipe bypass(const ModelConfig &config);

  void validate(const ModelConfig &config) const;
  nlohmann::json to_json() const;
  static QuantRecipe from_json(const nlohmann::json &j);
};

nlohmann::json scheme_to_json(const GroupScheme &scheme);
GroupScheme scheme_from_json(const nlohmann::json &j);

using SiteLayers = std::array<std::optional<QuantizedLinearLayer>, kSiteCount>;

struct ModelBundle
{
  ToyModel fp;
  QuantRecipe recipe;
  std::vector<SiteLayers> layers;
  nlohmann::json metadata = nlohmann::json::object();
};

/**
 * @brief One sequence running through the model with its own KV cache.
 *
 * Prefill and decode share one code path: tokens are pushed through each
 * layer in turn, and each token's K/V is appended before its attention runs.
 * Operators without a quantized layer fall back to the FP weights.
 */
class InferenceSession
{
public:
  using Observer = std::function<void(std::size_t layer, Site site, const Matrix &input)>;

  InferenceSession(const ToyModel &model, const std::vector<SiteLayers> *quantized, int kv_bits);

  /// Logits (tokens x vocab) for the given tokens appended after the cache.
  Matrix prefill(std::span<const std::int32_t> tokens);
  Matrix decode(std::int32_t token);

  std::size_t position() const noexcept { return position_; }
  const QuantizedKVCache &cache() const noexcept { return cache_; }
  void set_observer(Observer observer) { observer_ = std::move(observer); }

private:
  Matrix linear(std::size_t layer, Site site, const Matrix &x) const;

  const ToyModel *model_;
  const std::vector<SiteLayers> *quantized_;
  QuantizedKVCache cache_;
  SequenceId seq_;
  std::size_t position_ = 0;
  Observer observer_;
};

enum class ForwardMode
{
  kPrefill,
  kDecode,
};

Matrix forward_fp(const ToyModel &model, std::span<const std::int32_t> tokens);
Matrix forward_quantized(const ModelBundle &bundle, std::span<const std::int32_t> tokens,
                         ForwardMode mode = ForwardMode::kPrefill);

ModelBundle quantize_model(const ToyModel &model, std::span<const std::int32_t> calibration,
                           const QuantRecipe &recipe);

/// Splits a stream into consecutive windows; window 0 means one window.
std::vector<std::span<const std::int32_t>> split_windows(std::span<const std::int32_t> stream, std::size_t window);

/// Mean next-token negative log-likelihood of logits row t for token t+1.
double mean_nll(const Matrix &logits, std::span<const std::int32_t> tokens);
/// exp of the mean NLL over all windows, teacher-forced, prefill per window.
double perplexity(const ToyModel &model, std::span<const std::int32_t> stream, std::size_t window = 0);
double perplexity(const ModelBundle &bundle, std::span<const std::int32_t> stream, std::size_t window = 0);
/// Mean over rows of KL(softmax(p) || softmax(q)).
double mean_kl(const Matrix &p_logits, const Matrix &q_logits);

/// Autoregressive samples from the FP model, one fresh sequence per window.
std::vector<std::int32_t> sample_stream(const ToyModel &model, std::size_t length, std::size_t window,
                                        std::uint64_t seed);

struct AblationRow
{
  std::string name;
  double perplexity = 0.0;
  double delta = 0.0; // against the previous row
  double kl = 0.0;    // mean KL(FP || this row) over the eval stream
};

struct AblationReport
{
  std::vector<AblationRow> rows;
  nlohmann::json to_json() const;
};

/// Recipes in ablation order, starting from plain RTN W4A4.
std::vector<std::pair<std::string, QuantRecipe>> ablation_recipes(const ModelConfig &config);

AblationReport ablation_suite(const ToyModel &model, std::span<const std::int32_t> calibration,
                              std::span<const std::int32_t> eval, std::size_t window);

void save_bundle(const ModelBundle &bundle, const std::filesystem::path &dir);
ModelBundle load_bundle(const std::filesystem::path &dir);

} // namespace atomforge
