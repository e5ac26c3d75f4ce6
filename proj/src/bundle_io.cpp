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
#include "atomforge/tensors.hpp"

#include <fstream>

namespace atomforge
{

namespace fs = std::filesystem;

namespace
{

constexpr const char *kFormat = "atomforge-bundle";
constexpr int kFormatVersion = 1;

void write_json(const fs::path &path, const nlohmann::json &j)
{
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out)
    throw IoError("write failed for " + path.string());
}

nlohmann::json read_json(const fs::path &path)
{
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open " + path.string());
  try
  {
    return nlohmann::json::parse(in);
  }
  catch (const nlohmann::json::parse_error &e)
  {
    throw ParseError(ParseFailure::kMalformed, path.string() + ": " + e.what());
  }
}

nlohmann::json spec_to_json(const MixedPrecisionSpec &s)
{
  return {{"normal_bits", s.normal_bits},
          {"outlier_bits", s.outlier_bits},
          {"scheme", scheme_to_json(s.scheme)},
          {"clip", s.clip},
          {"outlier_clip", s.outlier_clip}};
}

MixedPrecisionSpec spec_from_json(const nlohmann::json &j)
{
  return MixedPrecisionSpec{j.at("normal_bits").get<int>(), j.at("outlier_bits").get<int>(),
                            scheme_from_json(j.at("scheme")), j.at("clip").get<float>(),
                            j.at("outlier_clip").get<float>()};
}

// Codes, params (groups x [scale, zero_point]) and passthrough go to tensor
// files; the small descriptive fields go into the returned JSON.
nlohmann::json save_quantized(const fs::path &dir, const std::string &stem, const QuantizedTensor &q)
{
  nlohmann::json j{{"rows", q.rows()},
                   {"cols", q.cols()},
                   {"bits", q.bit_width()},
                   {"symmetric", q.symmetric()},
                   {"scheme", scheme_to_json(q.scheme())},
                   {"axis", q.axis() == ChannelAxis::kCols ? "cols" : "rows"}};
  if (q.empty())
    return j;
  if (q.bypass())
    tensor_file::save(dir / (stem + ".passthrough.atm"), q.passthrough());
  else
    tensor_file::save(dir / (stem + ".codes.atm"), q.codes());
  Matrix params(q.group_count(), 2);
  for (std::size_t g = 0; g < q.group_count(); ++g)
  {
    params(g, 0) = q.params()[g].scale;
    params(g, 1) = static_cast<float>(q.params()[g].zero_point);
  }
  tensor_file::save(dir / (stem + ".params.atm"), params);
  return j;
}

QuantizedTensor load_quantized(const fs::path &dir, const std::string &stem, const nlohmann::json &j)
{
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const int bits = j.at("bits").get<int>();
  const bool symmetric = j.at("symmetric").get<bool>();
  const GroupScheme scheme = scheme_from_json(j.at("scheme"));
  const std::string axis_name = j.at("axis").get<std::string>();
  if (axis_name != "cols" && axis_name != "rows")
    throw ConfigError("unknown channel axis '" + axis_name + "'");
  const ChannelAxis axis = axis_name == "cols" ? ChannelAxis::kCols : ChannelAxis::kRows;
  if (rows == 0 || cols == 0)
    return QuantizedTensor(rows, cols, bits, symmetric, scheme, axis, {}, {},
                           is_bypass(bits) ? Matrix(rows, cols) : Matrix{});
  Matrix pass;
  PackedIntTensor codes;
  if (is_bypass(bits))
    pass = tensor_file::load_matrix(dir / (stem + ".passthrough.atm"));
  else
    codes = tensor_file::load_packed(dir / (stem + ".codes.atm"));
  const Matrix params_m = tensor_file::load_matrix(dir / (stem + ".params.atm"));
  if (params_m.cols() != 2)
    throw ParseError(ParseFailure::kShapeMismatch, stem + ".params.atm must have 2 columns");
  std::vector<QuantParams> params(params_m.rows());
  for (std::size_t g = 0; g < params.size(); ++g)
    params[g] = QuantParams{params_m(g, 0), static_cast<std::int32_t>(params_m(g, 1)), bits, symmetric};
  return QuantizedTensor(rows, cols, bits, symmetric, scheme, axis, std::move(codes), std::move(params),
                         std::move(pass));
}

const char *kLayerTensorNames[] = {"attn_norm", "w_qkv", "w_o", "ffn_norm", "w_gate_up", "w_down"};

std::array<Matrix *, 6> layer_tensors(LayerWeights &l)
{
  return {&l.attn_norm, &l.w_qkv, &l.w_o, &l.ffn_norm, &l.w_gate_up, &l.w_down};
}

} // namespace

void save_bundle(const ModelBundle &bundle, const fs::path &dir)
{
  fs::create_directories(dir);
  tensor_file::save(dir / "embedding.atm", bundle.fp.embedding);
  tensor_file::save(dir / "final_norm.atm", bundle.fp.final_norm);
  nlohmann::json layers_json = nlohmann::json::array();
  for (std::size_t l = 0; l < bundle.fp.layers.size(); ++l)
  {
    const fs::path ldir = dir / ("layer" + std::to_string(l));
    fs::create_directories(ldir);
    LayerWeights copy = bundle.fp.layers[l];
    const auto tensors = layer_tensors(copy);
    for (std::size_t t = 0; t < tensors.size(); ++t)
      tensor_file::save(ldir / (std::string(kLayerTensorNames[t]) + ".atm"), *tensors[t]);

    nlohmann::json sites = nlohmann::json::object();
    if (l < bundle.layers.size())
      for (Site site : kSites)
      {
        const auto &q = bundle.layers[l][static_cast<std::size_t>(site)];
        if (!q)
          continue;
        const std::string name = to_string(site);
        sites[name] = {{"plan", q->plan.to_json()},
                       {"activation", spec_to_json(q->activation)},
                       {"weight_normal", save_quantized(ldir, name + ".normal", q->weight.normal)},
                       {"weight_outlier", save_quantized(ldir, name + ".outlier", q->weight.outlier)}};
      }
    layers_json.push_back(sites);
  }
  write_json(dir / "bundle.json", {{"format", kFormat},
                                   {"version", kFormatVersion},
                                   {"config", bundle.fp.config.to_json()},
                                   {"recipe", bundle.recipe.to_json()},
                                   {"metadata", bundle.metadata},
                                   {"layers", layers_json}});
}

ModelBundle load_bundle(const fs::path &dir)
{
  const nlohmann::json j = read_json(dir / "bundle.json");
  try
  {
    if (j.at("format").get<std::string>() != kFormat || j.at("version").get<int>() != kFormatVersion)
      throw ParseError(ParseFailure::kMalformed, "unsupported bundle format or version");
    ModelBundle bundle;
    bundle.fp.config = ModelConfig::from_json(j.at("config"));
    bundle.recipe = QuantRecipe::from_json(j.at("recipe"));
    bundle.metadata = j.value("metadata", nlohmann::json::object());
    const auto &cfg = bundle.fp.config;
    bundle.fp.embedding = tensor_file::load_matrix(dir / "embedding.atm");
    bundle.fp.final_norm = tensor_file::load_matrix(dir / "final_norm.atm");
    const auto &layers_json = j.at("layers");
    if (layers_json.size() != cfg.n_layers)
      throw ParseError(ParseFailure::kShapeMismatch, "bundle layer count does not match its config");
    bundle.fp.layers.resize(cfg.n_layers);
    bundle.layers.assign(cfg.n_layers, SiteLayers{});
    for (std::size_t l = 0; l < cfg.n_layers; ++l)
    {
      const fs::path ldir = dir / ("layer" + std::to_string(l));
      const auto tensors = layer_tensors(bundle.fp.layers[l]);
      for (std::size_t t = 0; t < tensors.size(); ++t)
        *tensors[t] = tensor_file::load_matrix(ldir / (std::string(kLayerTensorNames[t]) + ".atm"));
      for (Site site : kSites)
      {
        const std::string name = to_string(site);
        if (!layers_json[l].contains(name))
          continue;
        const auto &s = layers_json[l].at(name);
        QuantizedLinearLayer q;
        q.plan = ReorderPlan::from_json(s.at("plan"));
        q.activation = spec_from_json(s.at("activation"));
        q.weight.normal = load_quantized(ldir, name + ".normal", s.at("weight_normal"));
        q.weight.outlier = load_quantized(ldir, name + ".outlier", s.at("weight_outlier"));
        bundle.layers[l][static_cast<std::size_t>(site)] = std::move(q);
      }
    }
    check_model_shapes(bundle.fp);
    return bundle;
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ParseError(ParseFailure::kMalformed, std::string("bundle.json: ") + e.what());
  }
}

} // namespace atomforge
