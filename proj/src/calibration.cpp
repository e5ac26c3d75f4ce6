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
#include "atomforge/hashing.hpp"
#include "atomforge/model.hpp"

#include <cmath>

namespace atomforge
{

nlohmann::json scheme_to_json(const GroupScheme &s)
{
  nlohmann::json j{{"granularity", to_string(s.granularity)}};
  if (s.granularity == Granularity::kPerGroup)
    j["group_size"] = s.group_size;
  return j;
}

GroupScheme scheme_from_json(const nlohmann::json &j)
{
  GroupScheme s;
  s.granularity = granularity_from_string(j.at("granularity").get<std::string>());
  s.group_size = s.granularity == Granularity::kPerGroup ? j.at("group_size").get<std::size_t>() : 0;
  return s;
}

MixedPrecisionSpec QuantRecipe::activation_spec() const
{
  return MixedPrecisionSpec{activation_bits, outlier_bits, activation_scheme, activation_clip, 1.0f};
}

MixedPrecisionSpec QuantRecipe::weight_spec() const
{
  return MixedPrecisionSpec{weight_bits, outlier_bits, weight_scheme, weight_clip, 1.0f};
}

QuantRecipe QuantRecipe::from_config(const ModelConfig &config)
{
  QuantRecipe r;
  r.weight_bits = config.weight_bits;
  r.activation_bits = config.activation_bits;
  r.outlier_bits = config.outlier_bits;
  r.kv_bits = config.kv_bits;
  r.outlier_count = config.outlier_count;
  r.activation_scheme = GroupScheme::per_group(config.group_size);
  r.weight_scheme = GroupScheme::per_group(config.group_size);
  r.activation_clip = config.clip.activation;
  r.weight_clip = config.clip.weight;
  r.clip_search = config.clip_search;
  r.gptq = true;
  return r;
}

QuantRecipe QuantRecipe::bypass(const ModelConfig &config)
{
  QuantRecipe r;
  r.weight_bits = r.activation_bits = r.outlier_bits = r.kv_bits = kBypassBits;
  r.outlier_count = config.outlier_count;
  r.activation_scheme = r.weight_scheme = GroupScheme::per_group(config.group_size);
  return r;
}

void QuantRecipe::validate(const ModelConfig &config) const
{
  auto bits_ok = [](int b) { return is_bypass(b) || is_packable_bit_width(b); };
  if (!bits_ok(weight_bits) || !bits_ok(activation_bits) || !bits_ok(outlier_bits) || !bits_ok(kv_bits))
    throw ConfigError("recipe bit widths must be 3, 4, 8 or 16");
  if (outlier_count > std::min(config.hidden_dim, config.ffn_dim))
    throw ConfigError("recipe outlier_count exceeds a layer input width");
  for (const auto &s : {activation_scheme, weight_scheme})
    if (s.granularity == Granularity::kPerTensor)
      throw ConfigError("per-tensor schemes are not supported by the mixed GEMM");
  if (activation_scheme.granularity == Granularity::kPerGroup || weight_scheme.granularity == Granularity::kPerGroup)
  {
    if (!(activation_scheme == weight_scheme))
      throw ConfigError("activation and weight group sizes must match for the group GEMM");
    const std::size_t g = activation_scheme.group_size;
    for (std::size_t width : {config.hidden_dim, config.ffn_dim})
      if (g == 0 || (width - outlier_count) % g != 0 || (outlier_count >= g && outlier_count % g != 0))
        throw ConfigError("group size " + std::to_string(g) + " does not tile the normal and outlier blocks");
  }
  if (!(activation_clip > 0.0f && activation_clip <= 1.0f && weight_clip > 0.0f && weight_clip <= 1.0f))
    throw ConfigError("clip factors must lie in (0, 1]");
  if (!(damping >= 0.0))
    throw ConfigError("damping must be non-negative");
}

nlohmann::json QuantRecipe::to_json() const
{
  return {{"weight_bits", weight_bits},
          {"activation_bits", activation_bits},
          {"outlier_bits", outlier_bits},
          {"kv_bits", kv_bits},
          {"outlier_count", outlier_count},
          {"activation_scheme", scheme_to_json(activation_scheme)},
          {"weight_scheme", scheme_to_json(weight_scheme)},
          {"activation_clip", activation_clip},
          {"weight_clip", weight_clip},
          {"clip_search", clip_search},
          {"gptq", gptq},
          {"gptq_outliers", gptq_outliers},
          {"sequential", sequential},
          {"damping", damping},
          {"calibration_window", calibration_window}};
}

QuantRecipe QuantRecipe::from_json(const nlohmann::json &j)
{
  try
  {
    QuantRecipe r;
    r.weight_bits = j.at("weight_bits").get<int>();
    r.activation_bits = j.at("activation_bits").get<int>();
    r.outlier_bits = j.at("outlier_bits").get<int>();
    r.kv_bits = j.at("kv_bits").get<int>();
    r.outlier_count = j.at("outlier_count").get<std::size_t>();
    r.activation_scheme = scheme_from_json(j.at("activation_scheme"));
    r.weight_scheme = scheme_from_json(j.at("weight_scheme"));
    r.activation_clip = j.at("activation_clip").get<float>();
    r.weight_clip = j.at("weight_clip").get<float>();
    r.clip_search = j.at("clip_search").get<bool>();
    r.gptq = j.at("gptq").get<bool>();
    r.gptq_outliers = j.at("gptq_outliers").get<bool>();
    r.sequential = j.at("sequential").get<bool>();
    r.damping = j.at("damping").get<double>();
    r.calibration_window = j.at("calibration_window").get<std::size_t>();
    return r;
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ConfigError(std::string("malformed quantization recipe: ") + e.what());
  }
}

namespace
{

struct SiteChoice
{
  QuantizedLinearLayer layer;
  float activation_clip = 1.0f;
  float weight_clip = 1.0f;
};

SiteChoice build_site(const std::vector<Matrix> &inputs, const Matrix &weight, const QuantRecipe &recipe)
{
  const std::size_t k = recipe.outlier_count;
  const ReorderPlan plan = calibrate_outliers(inputs, k);
  const std::size_t split = plan.normal_count();
  MixedPrecisionSpec act = recipe.activation_spec();
  MixedPrecisionSpec wspec = recipe.weight_spec();

  std::vector<Matrix> reordered;
  reordered.reserve(inputs.size());
  for (const auto &x : inputs)
    reordered.push_back(reorder_activation_cols(x, plan));
  const Matrix wr = reorder_weight_rows(weight, plan);

  if (recipe.clip_search)
  {
    const auto grid = default_clip_grid();
    if (!is_bypass(act.normal_bits) && split > 0)
    {
      std::vector<Matrix> normal;
      for (const auto &x : reordered)
        normal.push_back(slice_cols(x, 0, split));
      act.clip = grid_search_clip(normal, act.normal_bits, act.scheme, grid, ChannelAxis::kCols);
    }
    if (!is_bypass(wspec.normal_bits) && split > 0)
    {
      const Matrix normal = slice_rows(wr, 0, split);
      wspec.clip = grid_search_clip(std::span(&normal, 1), wspec.normal_bits, wspec.scheme, grid, ChannelAxis::kRows);
    }
  }

  MixedQuantWeight qw;
  if (recipe.gptq && !is_bypass(wspec.normal_bits))
  {
    CalibrationHessian h(wr.rows());
    for (const auto &x : reordered)
      h.add(x);
    h.finalize(recipe.damping);
    qw = gptq_quantize_weight_mixed(wr, h, k, wspec, recipe.gptq_outliers);
  }
  else
    qw = quantize_weight_mixed(wr, k, wspec);
  return SiteChoice{QuantizedLinearLayer{plan, std::move(qw), act}, act.clip, wspec.clip};
}

} // namespace

ModelBundle quantize_model(const ToyModel &model, std::span<const std::int32_t> calibration, const QuantRecipe &recipe)
{
  if (calibration.empty())
    throw ArgumentError("calibration stream is empty");
  recipe.validate(model.config);
  const std::size_t n_layers = model.config.n_layers;
  ModelBundle bundle;
  bundle.fp = model;
  bundle.recipe = recipe;
  bundle.layers.assign(n_layers, SiteLayers{});
  const auto windows = split_windows(calibration, recipe.calibration_window);
  nlohmann::json sites = nlohmann::json::array();

  auto capture = [&](std::size_t want_layer, std::optional<Site> want_site) {
    // inputs[layer][site] -> one matrix per calibration window
    std::vector<std::array<std::vector<Matrix>, kSiteCount>> inputs(n_layers);
    struct CaptureDone
    {
    };
    for (auto w : windows)
    {
      InferenceSession session(model, &bundle.layers, kBypassBits);
      session.set_observer([&](std::size_t layer, Site site, const Matrix &x) {
        if (want_site && (layer != want_layer || site != *want_site))
          return;
        inputs[layer][static_cast<std::size_t>(site)].push_back(x);
        // Nothing downstream of the target operator is needed.
        if (want_site)
          throw CaptureDone{};
      });
      try
      {
        session.prefill(w);
      }
      catch (const CaptureDone &)
      {
      }
    }
    return inputs;
  };

  auto install = [&](std::size_t l, Site site, const std::vector<Matrix> &inputs) {
    auto choice = build_site(inputs, site_weight(model.layers[l], site), recipe);
    sites.push_back({{"layer", l},
                     {"site", to_string(site)},
                     {"activation_clip", choice.activation_clip},
                     {"weight_clip", choice.weight_clip},
                     {"outliers", std::vector<std::size_t>(choice.layer.plan.outliers().begin(),
                                                           choice.layer.plan.outliers().end())}});
    bundle.layers[l][static_cast<std::size_t>(site)] = std::move(choice.layer);
  };

  if (recipe.sequential)
  {
    for (std::size_t l = 0; l < n_layers; ++l)
      for (Site site : kSites)
      {
        auto inputs = capture(l, site);
        install(l, site, inputs[l][static_cast<std::size_t>(site)]);
      }
  }
  else
  {
    auto inputs = capture(0, std::nullopt);
    for (std::size_t l = 0; l < n_layers; ++l)
      for (Site site : kSites)
        install(l, site, inputs[l][static_cast<std::size_t>(site)]);
  }

  bundle.metadata = {{"calibration_tokens", calibration.size()},
                     {"calibration_sha256", sha256_hex(std::as_bytes(calibration))},
                     {"calibration_mode", recipe.sequential ? "sequential" : "fp"},
                     {"activation_capture", "operator_input"},
                     {"sites", sites}};
  return bundle;
}

std::vector<std::pair<std::string, QuantRecipe>> ablation_recipes(const ModelConfig &config)
{
  std::vector<std::pair<std::string, QuantRecipe>> out;
  QuantRecipe r;
  r.weight_bits = config.weight_bits;
  r.activation_bits = config.activation_bits;
  r.outlier_bits = kBypassBits;
  r.kv_bits = kBypassBits;
  r.outlier_count = 0;
  r.activation_scheme = GroupScheme::per_token();
  r.weight_scheme = GroupScheme::per_channel();
  const std::string wa = "W" + std::to_string(config.weight_bits) + "A" + std::to_string(config.activation_bits);
  out.emplace_back(wa + " RTN", r);

  r.outlier_count = config.outlier_count;
  out.emplace_back("+ Keeping " + std::to_string(config.outlier_count) + " outliers in FP", r);

  r.outlier_bits = config.outlier_bits;
  out.emplace_back("+ Quantizing outliers to INT" + std::to_string(config.outlier_bits), r);

  r.activation_scheme = r.weight_scheme = GroupScheme::per_group(config.group_size);
  out.emplace_back("+ Group size " + std::to_string(config.group_size), r);

  if (config.clip_search)
    r.clip_search = true;
  else
  {
    r.activation_clip = config.clip.activation;
    r.weight_clip = config.clip.weight;
  }
  out.emplace_back("+ Clipping", r);

  r.gptq = true;
  out.emplace_back("+ GPTQ", r);

  r.kv_bits = config.kv_bits;
  out.emplace_back("+ Quantizing KV cache to INT" + std::to_string(config.kv_bits), r);
  return out;
}

nlohmann::json AblationReport::to_json() const
{
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto &r : rows)
    rows_json.push_back({{"name", r.name}, {"perplexity", r.perplexity}, {"delta", r.delta}, {"kl", r.kl}});
  return {{"rows", rows_json}};
}

AblationReport ablation_suite(const ToyModel &model, std::span<const std::int32_t> calibration,
                              std::span<const std::int32_t> eval, std::size_t window)
{
  if (eval.size() < 2)
    throw ArgumentError("ablation eval stream needs at least 2 tokens");
  const auto windows = split_windows(eval, window);
  std::vector<Matrix> fp_logits;
  for (auto w : windows)
    fp_logits.push_back(forward_fp(model, w));

  auto evaluate = [&](const std::string &name, const std::function<Matrix(std::span<const std::int32_t>)> &forward) {
    AblationRow row;
    row.name = name;
    double nll = 0.0, kl = 0.0;
    std::size_t predictions = 0, positions = 0;
    for (std::size_t i = 0; i < windows.size(); ++i)
    {
      const Matrix logits = forward(windows[i]);
      if (windows[i].size() >= 2)
      {
        nll += mean_nll(logits, windows[i]) * static_cast<double>(windows[i].size() - 1);
        predictions += windows[i].size() - 1;
      }
      kl += mean_kl(fp_logits[i], logits) * static_cast<double>(logits.rows());
      positions += logits.rows();
    }
    row.perplexity = std::exp(nll / static_cast<double>(predictions));
    row.kl = kl / static_cast<double>(positions);
    return row;
  };

  AblationReport report;
  std::size_t fp_index = 0;
  report.rows.push_back(evaluate("FP baseline", [&](auto) { return fp_logits[fp_index++]; }));
  for (const auto &[name, recipe] : ablation_recipes(model.config))
  {
    const ModelBundle bundle = quantize_model(model, calibration, recipe);
    AblationRow row = evaluate(name, [&](auto w) { return forward_quantized(bundle, w); });
    row.delta = row.perplexity - report.rows.back().perplexity;
    report.rows.push_back(std::move(row));
  }
  return report;
}

} // namespace atomforge
