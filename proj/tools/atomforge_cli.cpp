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
#include "atomforge/gptq.hpp"
#include "atomforge/hashing.hpp"
#include "atomforge/model.hpp"
#include "atomforge/parallel.hpp"
#include "atomforge/perfsim.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <regex>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace atomforge;

namespace
{

#ifndef ATOMFORGE_VERSION
#define ATOMFORGE_VERSION "0.0.0"
#endif

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

struct Run
{
  std::string command;
  std::vector<std::string> argv;
  json resolved = json::object();
  std::vector<fs::path> inputs;
  std::uint64_t seed = 0;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

// ----------------------------------------------------------------- file io

void require_exists(const fs::path &p, const std::string &what)
{
  if (!fs::exists(p))
    throw ArgumentError(what + " '" + p.string() + "' does not exist");
}

std::string read_text(const fs::path &p)
{
  std::ifstream in(p, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json_file(const fs::path &p)
{
  require_exists(p, "file");
  try
  {
    return json::parse(read_text(p));
  }
  catch (const json::parse_error &e)
  {
    throw ParseError(ParseFailure::kMalformed, p.string() + ": " + e.what());
  }
}

void write_text(const fs::path &p, const std::string &text)
{
  std::ofstream out(p, std::ios::binary);
  if (!out || !(out << text))
    throw IoError("cannot write " + p.string());
}

void write_json_file(const fs::path &p, const json &j) { write_text(p, j.dump(2) + "\n"); }

std::vector<std::int32_t> read_tokens(const fs::path &p)
{
  require_exists(p, "token file");
  std::istringstream in(read_text(p));
  std::vector<std::int32_t> tokens;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line))
  {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos)
      continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::int32_t v = 0;
    const char *b = line.data() + first, *e = line.data() + last + 1;
    const auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e)
      throw ParseError(ParseFailure::kMalformed,
                       p.string() + ":" + std::to_string(line_no) + ": expected one integer token id per line");
    tokens.push_back(v);
  }
  if (tokens.empty())
    throw ArgumentError("token file '" + p.string() + "' is empty");
  return tokens;
}

std::string tokens_to_text(std::span<const std::int32_t> tokens)
{
  std::string out;
  for (auto t : tokens)
    out += std::to_string(t) + "\n";
  return out;
}

void check_vocab(std::span<const std::int32_t> tokens, std::size_t vocab)
{
  for (std::size_t i = 0; i < tokens.size(); ++i)
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab)
      throw RangeError("token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " is outside the vocabulary of " + std::to_string(vocab));
}

// One directory per run; existing results are never overwritten.
void prepare_output_dir(const fs::path &dir)
{
  if (fs::exists(dir) && (!fs::is_directory(dir) || !fs::is_empty(dir)))
    throw ArgumentError("output directory '" + dir.string() + "' already exists and is not empty");
  fs::create_directories(dir);
}

void write_manifest(const fs::path &dir, const Run &run)
{
  json inputs = json::array();
  for (const auto &p : run.inputs)
  {
    if (fs::is_directory(p))
    {
      std::vector<fs::path> files;
      for (const auto &e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
          files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto &f : files)
        inputs.push_back({{"path", f.string()}, {"sha256", sha256_file(f)}});
    }
    else
      inputs.push_back({{"path", p.string()}, {"sha256", sha256_file(p)}});
  }
  std::vector<fs::path> files;
  for (const auto &e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != "manifest.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  json outputs = json::array();
  for (const auto &f : files)
    outputs.push_back({{"path", fs::relative(f, dir).generic_string()}, {"sha256", sha256_file(f)}});
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
  write_json_file(dir / "manifest.json", {{"schema", "atomforge/manifest/v1"},
                                          {"command", run.command},
                                          {"argv", run.argv},
                                          {"resolved_config", run.resolved},
                                          {"inputs", inputs},
                                          {"outputs", outputs},
                                          {"seed", run.seed},
                                          {"threads", thread_count()},
                                          {"tool_version", ATOMFORGE_VERSION},
                                          {"wall_time_s", wall}});
}

// --------------------------------------------------------------- models

struct LoadedModel
{
  ToyModel fp;
  std::optional<ModelBundle> bundle;
  std::string kind;
};

LoadedModel load_model(const fs::path &p)
{
  require_exists(p, "model");
  LoadedModel m;
  if (fs::is_directory(p))
  {
    m.bundle = load_bundle(p);
    m.fp = m.bundle->fp;
    m.kind = "bundle";
  }
  else
  {
    const ModelConfig config = ModelConfig::from_json(read_json_file(p));
    m.fp = build_toy_model(config, config.seed);
    m.kind = "config";
  }
  return m;
}

QuantRecipe recipe_for_bits(const std::string &bits)
{
  static const std::regex pattern("w(3|4|8)a(3|4|8|16)");
  std::smatch match;
  if (!std::regex_match(bits, match, pattern) || (bits != "w4a4" && bits != "w8a8" && bits != "w4a16" && bits != "w3a3"))
    throw ArgumentError("--bits must be one of w4a4, w8a8, w4a16, w3a3 (got '" + bits + "')");
  QuantRecipe r;
  r.weight_bits = std::stoi(match[1]);
  r.activation_bits = std::stoi(match[2]);
  r.kv_bits = r.activation_bits;
  r.outlier_bits = 8;
  return r;
}

// ------------------------------------------------------------ formatting

std::string fmt(double v, int precision = 4)
{
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

void print_table(const std::vector<std::string> &header, const std::vector<std::vector<std::string>> &rows)
{
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c)
  {
    width[c] = header[c].size();
    for (const auto &r : rows)
      width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string> &cells) {
    for (std::size_t c = 0; c < cells.size(); ++c)
      std::cout << (c ? "  " : "") << std::left << std::setw(static_cast<int>(width[c])) << cells[c];
    std::cout << '\n';
  };
  line(header);
  std::size_t total = 0;
  for (auto w : width)
    total += w + 2;
  std::cout << std::string(total - 2, '-') << '\n';
  for (const auto &r : rows)
    line(r);
}

json series_stats(const ModelConfig &dims)
{
  return {{"n_layers", dims.n_layers}, {"hidden_dim", dims.hidden_dim}, {"ffn_dim", dims.ffn_dim},
          {"n_heads", dims.n_heads},   {"head_dim", dims.head_dim},     {"vocab_size", dims.vocab_size}};
}

// -------------------------------------------------------------- commands

struct CalibrateOptions
{
  std::string model, tokens, out;
  std::size_t k = 128;
  std::size_t window = 64;
};

int run_calibrate(const CalibrateOptions &o, Run &run)
{
  run.resolved = {{"model", o.model}, {"tokens", o.tokens}, {"k", o.k}, {"out", o.out}, {"window", o.window}};
  run.inputs.insert(run.inputs.end(), {fs::path(o.model), fs::path(o.tokens)});
  const LoadedModel model = load_model(o.model);
  const auto stream = read_tokens(o.tokens);
  check_vocab(stream, model.fp.config.vocab_size);
  const ModelConfig &cfg = model.fp.config;
  if (o.k > cfg.hidden_dim)
    throw ShapeError("k = " + std::to_string(o.k) + " exceeds hidden_dim " + std::to_string(cfg.hidden_dim));

  // Operator inputs of the FP model, one matrix per window.
  std::vector<std::array<std::vector<Matrix>, kSiteCount>> inputs(cfg.n_layers);
  for (auto w : split_windows(stream, o.window))
  {
    InferenceSession session(model.fp, nullptr, kBypassBits);
    session.set_observer([&](std::size_t l, Site s, const Matrix &x) { inputs[l][static_cast<std::size_t>(s)].push_back(x); });
    session.prefill(w);
  }

  const fs::path out(o.out);
  prepare_output_dir(out);
  fs::create_directories(out / "plans");
  fs::create_directories(out / "hessians");
  const auto grid = default_clip_grid();
  json sites = json::array();
  std::vector<std::vector<std::string>> rows;
  for (std::size_t l = 0; l < cfg.n_layers; ++l)
    for (Site site : kSites)
    {
      const auto &xs = inputs[l][static_cast<std::size_t>(site)];
      const std::size_t width = xs.front().cols();
      const ReorderPlan plan = calibrate_outliers(xs, o.k);
      CalibrationHessian h(width);
      for (const auto &x : xs)
        h.add(x);
      const std::string stem = "layer" + std::to_string(l) + "_" + to_string(site);
      write_json_file(out / "plans" / (stem + ".json"), plan.to_json());
      Matrix hm(width, width);
      for (std::size_t i = 0; i < width * width; ++i)
        hm.data()[i] = static_cast<float>(h.raw()[i]);
      tensor_file::save(out / "hessians" / (stem + ".atm"), hm);

      const std::size_t normal = plan.normal_count();
      const bool grouped = normal > 0 && normal % cfg.group_size == 0;
      const GroupScheme act_scheme = grouped ? GroupScheme::per_group(cfg.group_size) : GroupScheme::per_token();
      const GroupScheme w_scheme = grouped ? GroupScheme::per_group(cfg.group_size) : GroupScheme::per_channel();
      float act_clip = 1.0f, w_clip = 1.0f;
      if (normal > 0)
      {
        std::vector<Matrix> normal_x;
        for (const auto &x : xs)
          normal_x.push_back(slice_cols(reorder_activation_cols(x, plan), 0, normal));
        if (!is_bypass(cfg.activation_bits))
          act_clip = grid_search_clip(normal_x, cfg.activation_bits, act_scheme, grid, ChannelAxis::kCols);
        const Matrix nw = slice_rows(reorder_weight_rows(site_weight(model.fp.layers[l], site), plan), 0, normal);
        if (!is_bypass(cfg.weight_bits))
          w_clip = grid_search_clip(std::span(&nw, 1), cfg.weight_bits, w_scheme, grid, ChannelAxis::kRows);
      }
      double trace = 0.0;
      for (std::size_t i = 0; i < width; ++i)
        trace += h.raw(i, i);
      const auto outl = plan.outliers();
      sites.push_back({{"layer", l},
                       {"site", to_string(site)},
                       {"width", width},
                       {"outliers", std::vector<std::size_t>(outl.begin(), outl.end())},
                       {"activation_clip", act_clip},
                       {"weight_clip", w_clip},
                       {"clip_scheme", to_string(act_scheme.granularity)},
                       {"hessian_trace", trace},
                       {"plan", "plans/" + stem + ".json"},
                       {"hessian", "hessians/" + stem + ".atm"}});
      rows.push_back({std::to_string(l), to_string(site), std::to_string(width), std::to_string(outl.size()),
                      fmt(act_clip, 3), fmt(w_clip, 3)});
    }
  write_text(out / "tokens.txt", tokens_to_text(stream));
  write_json_file(out / "report.json", {{"schema", "atomforge/calibrate/v1"},
                                        {"command", "calibrate"},
                                        {"k", o.k},
                                        {"window", o.window},
                                        {"tokens", stream.size()},
                                        {"calibration_sha256", sha256_hex(std::as_bytes(std::span(stream)))},
                                        {"activation_source", "fp"},
                                        {"model", series_stats(cfg)},
                                        {"sites", sites}});
  write_manifest(out, run);
  print_table({"layer", "site", "width", "outliers", "act_clip", "w_clip"}, rows);
  return kExitOk;
}

struct QuantizeOptions
{
  std::string fp_model, calib, bits = "w4a4", out;
  std::size_t group = 128;
  bool no_gptq = false;
  bool no_clip_search = false;
  bool fp_calibration = false;
};

int run_quantize(const QuantizeOptions &o, Run &run)
{
  run.resolved = {{"fp-model", o.fp_model}, {"calib", o.calib}, {"bits", o.bits}, {"group", o.group},
                  {"out", o.out},           {"no-gptq", o.no_gptq}, {"no-clip-search", o.no_clip_search},
                  {"fp-calibration", o.fp_calibration}};
  QuantRecipe recipe = recipe_for_bits(o.bits);
  require_exists(o.calib, "calibration directory");
  const fs::path calib(o.calib);
  run.inputs.insert(run.inputs.end(), {fs::path(o.fp_model), fs::path(calib / "report.json"), fs::path(calib / "tokens.txt")});
  const json calib_report = read_json_file(calib / "report.json");
  const auto tokens = read_tokens(calib / "tokens.txt");
  std::size_t k = 0, window = 64;
  std::string recorded;
  try
  {
    k = calib_report.at("k").get<std::size_t>();
    window = calib_report.at("window").get<std::size_t>();
    recorded = calib_report.at("calibration_sha256").get<std::string>();
  }
  catch (const json::exception &e)
  {
    throw ParseError(ParseFailure::kMalformed, "calibration report: " + std::string(e.what()));
  }
  if (sha256_hex(std::as_bytes(std::span(tokens))) != recorded)
    throw ParseError(ParseFailure::kShapeMismatch, "calibration tokens do not match the recorded hash");

  const LoadedModel model = load_model(o.fp_model);
  check_vocab(tokens, model.fp.config.vocab_size);
  recipe.outlier_count = k;
  recipe.activation_scheme = recipe.weight_scheme = GroupScheme::per_group(o.group);
  recipe.clip_search = !o.no_clip_search;
  recipe.gptq = !o.no_gptq;
  recipe.sequential = !o.fp_calibration;
  recipe.calibration_window = window;
  recipe.validate(model.fp.config);

  const fs::path out(o.out);
  prepare_output_dir(out);
  ModelBundle bundle = quantize_model(model.fp, tokens, recipe);
  bundle.metadata["bits"] = o.bits;
  save_bundle(bundle, out);

  const double fp_ppl = perplexity(model.fp, tokens, window);
  const double q_ppl = perplexity(bundle, tokens, window);
  write_json_file(out / "report.json", {{"schema", "atomforge/quantize/v1"},
                                        {"command", "quantize"},
                                        {"bits", o.bits},
                                        {"group", o.group},
                                        {"k", k},
                                        {"recipe", recipe.to_json()},
                                        {"calibration_perplexity", {{"fp", fp_ppl}, {"quantized", q_ppl}}},
                                        {"sites", bundle.metadata["sites"]}});
  write_manifest(out, run);
  print_table({"bits", "group", "k", "gptq", "calib_ppl_fp", "calib_ppl_quant"},
              {{o.bits, std::to_string(o.group), std::to_string(k), recipe.gptq ? "yes" : "no", fmt(fp_ppl),
                fmt(q_ppl)}});
  return kExitOk;
}

struct EvalOptions
{
  std::string model, tokens, out, mode = "prefill";
  std::size_t window = 64;
};

int run_eval(const EvalOptions &o, Run &run)
{
  run.resolved = {{"model", o.model}, {"tokens", o.tokens}, {"window", o.window}, {"mode", o.mode}, {"out", o.out}};
  run.inputs.insert(run.inputs.end(), {fs::path(o.model), fs::path(o.tokens)});
  if (o.mode != "prefill" && o.mode != "decode")
    throw ArgumentError("--mode must be prefill or decode");
  const LoadedModel model = load_model(o.model);
  const auto stream = read_tokens(o.tokens);
  if (stream.size() < 2)
    throw ArgumentError("perplexity needs at least 2 tokens");
  check_vocab(stream, model.fp.config.vocab_size);
  const ForwardMode mode = o.mode == "decode" ? ForwardMode::kDecode : ForwardMode::kPrefill;

  double fp_nll = 0.0, q_nll = 0.0, kl = 0.0;
  std::size_t predictions = 0, positions = 0;
  const auto windows = split_windows(stream, o.window);
  for (auto w : windows)
  {
    const Matrix fp = forward_fp(model.fp, w);
    const double n = static_cast<double>(w.size() - 1);
    if (w.size() >= 2)
    {
      fp_nll += mean_nll(fp, w) * n;
      predictions += w.size() - 1;
    }
    if (model.bundle)
    {
      const Matrix q = forward_quantized(*model.bundle, w, mode);
      if (w.size() >= 2)
        q_nll += mean_nll(q, w) * n;
      kl += mean_kl(fp, q) * static_cast<double>(w.size());
      positions += w.size();
    }
  }
  json report{{"schema", "atomforge/eval-ppl/v1"},
              {"command", "eval-ppl"},
              {"model_kind", model.kind},
              {"tokens", stream.size()},
              {"windows", windows.size()},
              {"mode", o.mode},
              {"fp_perplexity", std::exp(fp_nll / static_cast<double>(predictions))}};
  report["perplexity"] = model.bundle ? std::exp(q_nll / static_cast<double>(predictions))
                                      : report["fp_perplexity"].get<double>();
  if (model.bundle)
    report["mean_kl"] = kl / static_cast<double>(positions);
  if (!o.out.empty())
  {
    prepare_output_dir(o.out);
    write_json_file(fs::path(o.out) / "report.json", report);
    write_manifest(o.out, run);
  }
  print_table({"model", "tokens", "ppl", "fp_ppl", "mean_kl"},
              {{model.kind, std::to_string(stream.size()), fmt(report["perplexity"].get<double>()),
                fmt(report["fp_perplexity"].get<double>()),
                model.bundle ? fmt(report["mean_kl"].get<double>()) : "-"}});
  return kExitOk;
}

struct AblateOptions
{
  std::string model, calib, eval, out;
  std::size_t calib_len = 1024, eval_len = 512, window = 64;
};

int run_ablate(const AblateOptions &o, Run &run)
{
  run.resolved = {{"model", o.model},         {"calib", o.calib},       {"eval", o.eval},
                  {"calib-len", o.calib_len}, {"eval-len", o.eval_len}, {"window", o.window},
                  {"out", o.out},             {"seed", run.seed}};
  run.inputs.insert(run.inputs.end(), {fs::path(o.model)});
  const LoadedModel model = load_model(o.model);
  std::vector<std::int32_t> calib, eval;
  if (!o.calib.empty())
  {
    calib = read_tokens(o.calib);
    run.inputs.push_back(o.calib);
  }
  else
    calib = sample_stream(model.fp, o.calib_len, o.window, run.seed * 2 + 1);
  if (!o.eval.empty())
  {
    eval = read_tokens(o.eval);
    run.inputs.push_back(o.eval);
  }
  else
    eval = sample_stream(model.fp, o.eval_len, o.window, run.seed * 2 + 2);
  check_vocab(calib, model.fp.config.vocab_size);
  check_vocab(eval, model.fp.config.vocab_size);

  const AblationReport report = ablation_suite(model.fp, calib, eval, o.window);
  json j = report.to_json();
  j["schema"] = "atomforge/ablate/v1";
  j["command"] = "ablate";
  j["calibration_tokens"] = calib.size();
  j["eval_tokens"] = eval.size();
  j["model"] = model.fp.config.to_json();
  if (!o.out.empty())
  {
    prepare_output_dir(o.out);
    write_json_file(fs::path(o.out) / "report.json", j);
    write_manifest(o.out, run);
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto &r : report.rows)
    rows.push_back({r.name, fmt(r.perplexity), fmt(r.delta, 3), fmt(r.kl, 3)});
  print_table({"method", "ppl", "delta", "kl_vs_fp"}, rows);
  return kExitOk;
}

struct GemmCheckOptions
{
  std::size_t trials = 200;
  double tolerance = 1e-4;
  std::string out;
};

int run_gemm_check_cmd(const GemmCheckOptions &o, Run &run)
{
  run.resolved = {{"trials", o.trials}, {"tolerance", o.tolerance}, {"out", o.out}, {"seed", run.seed}};
  const GemmCheckReport report = run_gemm_check(o.trials, run.seed, o.tolerance);
  json j = report.to_json();
  j["schema"] = "atomforge/gemm-check/v1";
  j["command"] = "gemm-check";
  if (!o.out.empty())
  {
    prepare_output_dir(o.out);
    write_json_file(fs::path(o.out) / "report.json", j);
    write_manifest(o.out, run);
  }
  print_table({"trials", "max_rel_error", "tolerance", "failures"},
              {{std::to_string(o.trials), fmt(report.max_error(), 3), fmt(o.tolerance, 3),
                std::to_string(report.failures())}});
  return report.failures() == 0 ? kExitOk : kExitFailure;
}

HardwareProfile load_hw(const std::string &path)
{
  return path.empty() ? HardwareProfile{} : HardwareProfile::from_json(read_json_file(path));
}

ModelConfig load_dims(const std::string &path)
{
  return path.empty() ? llama_7b_dims() : ModelConfig::from_json(read_json_file(path));
}

std::vector<Scheme> parse_schemes(const std::string &s)
{
  if (s == "all")
    return {Scheme::kFp16, Scheme::kW4A16, Scheme::kW8A8, Scheme::kW4A4};
  return {scheme_from_string(s)};
}

struct SimulateOptions
{
  std::string hw, model, scheme = "all", out;
  std::vector<std::size_t> batch{8, 16, 32, 64, 128, 256};
  std::size_t requests = 256, context = 1024, max_len = 2048;
  double prompt_median = 128, decode_median = 256, sigma = 0.6, arrival_rate = 0, horizon = 0, fixed_memory = 0;
};

int run_simulate(const SimulateOptions &o, Run &run)
{
  run.resolved = {{"hw", o.hw},
                  {"model", o.model},
                  {"scheme", o.scheme},
                  {"batch", o.batch},
                  {"requests", o.requests},
                  {"context", o.context},
                  {"max-len", o.max_len},
                  {"prompt-median", o.prompt_median},
                  {"decode-median", o.decode_median},
                  {"sigma", o.sigma},
                  {"arrival-rate", o.arrival_rate},
                  {"horizon", o.horizon},
                  {"fixed-memory", o.fixed_memory},
                  {"out", o.out},
                  {"seed", run.seed}};
  if (!o.hw.empty())
    run.inputs.push_back(o.hw);
  if (!o.model.empty())
    run.inputs.push_back(o.model);
  const HardwareProfile hw = load_hw(o.hw);
  const ModelConfig dims = load_dims(o.model);
  if (o.fixed_memory < 0)
    throw ArgumentError("--fixed-memory must be non-negative");
  TraceConfig tc;
  tc.requests = o.requests;
  tc.prompt_median = o.prompt_median;
  tc.decode_median = o.decode_median;
  tc.sigma = o.sigma;
  tc.max_len = o.max_len;
  tc.arrival_rate = o.arrival_rate;
  tc.seed = run.seed;
  const auto trace = generate_trace(tc);
  const double capacity = o.fixed_memory > 0 ? o.fixed_memory : hw.capacity;

  std::vector<SweepPoint> points;
  json results = json::array(), max_batch = json::object();
  std::vector<std::vector<std::string>> rows;
  for (Scheme s : parse_schemes(o.scheme))
  {
    const std::size_t feasible = max_feasible_batch(dims, s, capacity, o.context);
    max_batch[to_string(s)] = feasible;
    for (std::size_t b : o.batch)
    {
      ServingConfig sc;
      sc.dims = dims;
      sc.scheme = s;
      sc.max_batch = b;
      sc.memory_capacity = o.fixed_memory;
      const ServingReport r = simulate_serving(sc, hw, trace, o.horizon);
      points.push_back({s, b, r});
      json rj = r.to_json();
      results.push_back({{"scheme", to_string(s)}, {"batch", b}, {"report", rj}});
      rows.push_back({to_string(s), std::to_string(b), fmt(r.throughput, 6), fmt(r.mean_decode_latency * 1e3, 4),
                      fmt(r.memory_high_water / 1e9, 4), std::to_string(r.peak_batch), std::to_string(feasible)});
    }
  }
  json j{{"schema", "atomforge/simulate/v1"},
         {"command", "simulate"},
         {"hardware", hw.to_json()},
         {"model", series_stats(dims)},
         {"trace", tc.to_json()},
         {"memory_capacity", capacity},
         {"context", o.context},
         {"max_feasible_batch", max_batch},
         {"results", results}};
  if (!o.out.empty())
  {
    prepare_output_dir(o.out);
    write_json_file(fs::path(o.out) / "report.json", j);
    write_text(fs::path(o.out) / "series.csv", sweep_to_csv(points));
    write_manifest(o.out, run);
  }
  print_table({"scheme", "batch", "tokens/s", "decode_ms", "mem_GB", "peak_batch", "max_feasible"}, rows);
  return kExitOk;
}

struct RooflineOptions
{
  std::string hw, model, scheme = "all", out;
  std::size_t batch = 512, context = 1024;
};

json cost_json(const OperatorCost &c, const HardwareProfile &hw)
{
  double compute = 0.0;
  for (std::size_t p = 0; p < kPrecisionCount; ++p)
    compute += c.ops_by_precision[p] / hw.peak(static_cast<Precision>(p));
  const double memory = c.bytes / hw.bandwidth;
  return {{"ops", c.ops},
          {"bytes", c.bytes},
          {"precision", to_string(c.precision)},
          {"intensity", c.intensity()},
          {"time_s", roofline_time(c, hw)},
          {"bound", compute >= memory ? "compute" : "memory"}};
}

int run_roofline(const RooflineOptions &o, Run &run)
{
  run.resolved = {{"hw", o.hw}, {"model", o.model}, {"scheme", o.scheme}, {"batch", o.batch},
                  {"context", o.context}, {"out", o.out}};
  if (!o.hw.empty())
    run.inputs.push_back(o.hw);
  if (!o.model.empty())
    run.inputs.push_back(o.model);
  if (o.batch == 0)
    throw ArgumentError("--batch must be at least 1");
  const HardwareProfile hw = load_hw(o.hw);
  const ModelConfig dims = load_dims(o.model);
  const double fp_dense = roofline_time(dense_cost(o.batch, dims, Scheme::kFp16), hw);
  const double fp_attn = roofline_time(attention_cost(o.batch, o.context, 16, dims), hw);
  json schemes = json::array();
  std::vector<std::vector<std::string>> rows;
  for (Scheme s : parse_schemes(o.scheme))
  {
    const OperatorCost dense = dense_cost(o.batch, dims, s);
    const OperatorCost attn = attention_cost(o.batch, o.context, scheme_traits(s).kv_bits, dims);
    const Breakdown frac = breakdown(dims, s, hw, o.batch, o.context).fractions();
    const double dt = roofline_time(dense, hw), at = roofline_time(attn, hw);
    schemes.push_back({{"scheme", to_string(s)},
                       {"dense", cost_json(dense, hw)},
                       {"attention", cost_json(attn, hw)},
                       {"dense_speedup_vs_fp16", fp_dense / dt},
                       {"attention_speedup_vs_fp16", at > 0 ? fp_attn / at : 1.0},
                       {"breakdown", frac.to_json()}});
    rows.push_back({to_string(s), fmt(dense.intensity()), fmt(dt * 1e3), fmt(attn.intensity()), fmt(at * 1e3),
                    fmt(fp_dense / dt, 3), fmt(frac.dense + frac.attention, 3)});
  }
  json ridge{{"fp16", hw.peak_fp16 / hw.bandwidth}, {"int8", hw.peak_int8 / hw.bandwidth},
             {"int4", hw.peak_int4 / hw.bandwidth}};
  json j{{"schema", "atomforge/roofline/v1"},
         {"command", "roofline"},
         {"hardware", hw.to_json()},
         {"model", series_stats(dims)},
         {"batch", o.batch},
         {"context", o.context},
         {"ridge_intensity", ridge},
         {"schemes", schemes}};
  if (!o.out.empty())
  {
    prepare_output_dir(o.out);
    write_json_file(fs::path(o.out) / "report.json", j);
    write_manifest(o.out, run);
  }
  print_table({"scheme", "dense_intensity", "dense_ms", "attn_intensity", "attn_ms", "dense_speedup", "dense+attn"},
              rows);
  return kExitOk;
}

// ------------------------------------------------------- config overrides

std::string json_scalar(const json &v)
{
  if (v.is_string())
    return v.get<std::string>();
  if (v.is_boolean())
    return v.get<bool>() ? "true" : "false";
  if (v.is_number())
    return v.dump();
  throw ConfigError("config values must be strings, numbers, booleans or arrays of those");
}

// Values in the --config file replace whatever the command line said.
void apply_config(CLI::App &sub, const std::string &path)
{
  const json j = read_json_file(path);
  if (!j.is_object())
    throw ConfigError("--config file must hold a JSON object");
  for (const auto &[raw_key, value] : j.items())
  {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option *opt = key == "config" ? nullptr : sub.get_option_no_throw("--" + key);
    if (!opt)
      throw ConfigError("unknown key '" + raw_key + "' for command " + sub.get_name());
    opt->clear();
    if (value.is_array())
      for (const auto &v : value)
        opt->add_result(json_scalar(v));
    else
      opt->add_result(json_scalar(value));
    opt->run_callback();
  }
}

int exit_code_for(const Error &e)
{
  const std::string c = e.category();
  return c == "argument" || c == "config" || c == "shape" || c == "parse" || c == "range" || c == "lookup"
             ? kExitUsage
             : kExitFailure;
}

void print_error(const std::string &command, const std::string &category, const std::string &message)
{
  std::cerr << json{{"error", {{"command", command}, {"category", category}, {"message", message}}}}.dump() << '\n';
}

} // namespace

int main(int argc, char **argv)
{
  CLI::App app{"AtomForge: low-bit weight-activation quantization toolkit"};
  app.set_version_flag("--version", ATOMFORGE_VERSION);
  app.require_subcommand(1);

  Run run;
  for (int i = 0; i < argc; ++i)
    run.argv.emplace_back(argv[i]);
  std::string config_path;
  std::function<int()> action;

  auto common = [&](CLI::App *sub) {
    sub->add_option("--seed", run.seed, "Random seed")->capture_default_str();
    sub->add_option("--config", config_path, "JSON file whose keys override flags")->check(CLI::ExistingFile);
  };

  CalibrateOptions cal;
  auto *calibrate = app.add_subcommand("calibrate", "Derive reorder plans, Hessians and clip factors");
  calibrate->add_option("--model", cal.model, "Bundle directory or model config JSON")->required();
  calibrate->add_option("--tokens", cal.tokens, "Calibration tokens, one id per line")->required();
  calibrate->add_option("--k", cal.k, "Outlier channels per operator")->capture_default_str();
  calibrate->add_option("--window", cal.window, "Tokens per calibration sequence")->capture_default_str();
  calibrate->add_option("--out", cal.out, "Output directory")->required();
  common(calibrate);
  calibrate->callback([&] { action = [&] { return run_calibrate(cal, run); }; });

  QuantizeOptions qz;
  auto *quantize = app.add_subcommand("quantize", "Quantize a model into a bundle");
  quantize->add_option("--fp-model", qz.fp_model, "Bundle directory or model config JSON")->required();
  quantize->add_option("--calib", qz.calib, "Directory written by calibrate")->required();
  quantize->add_option("--bits", qz.bits, "w4a4, w8a8, w4a16 or w3a3")->capture_default_str();
  quantize->add_option("--group", qz.group, "Group size")->capture_default_str();
  quantize->add_option("--out", qz.out, "Bundle output directory")->required();
  quantize->add_flag("--no-gptq", qz.no_gptq, "Round-to-nearest weights");
  quantize->add_flag("--no-clip-search", qz.no_clip_search, "Skip the clip grid search");
  quantize->add_flag("--fp-calibration", qz.fp_calibration, "Capture inputs from the FP model only");
  common(quantize);
  quantize->callback([&] { action = [&] { return run_quantize(qz, run); }; });

  EvalOptions ev;
  auto *eval = app.add_subcommand("eval-ppl", "Perplexity of a model or bundle");
  eval->add_option("--model", ev.model, "Bundle directory or model config JSON")->required();
  eval->add_option("--tokens", ev.tokens, "Evaluation tokens")->required();
  eval->add_option("--window", ev.window, "Window length (0 = whole stream)")->capture_default_str();
  eval->add_option("--mode", ev.mode, "prefill or decode")->capture_default_str();
  eval->add_option("--out", ev.out, "Output directory");
  common(eval);
  eval->callback([&] { action = [&] { return run_eval(ev, run); }; });

  AblateOptions ab;
  auto *ablate = app.add_subcommand("ablate", "Ablation chain from RTN to the full recipe");
  ablate->add_option("--model", ab.model, "Model config JSON or bundle directory")->required();
  ablate->add_option("--calib", ab.calib, "Calibration tokens (sampled from the FP model if absent)");
  ablate->add_option("--eval", ab.eval, "Evaluation tokens (sampled from the FP model if absent)");
  ablate->add_option("--calib-len", ab.calib_len, "Sampled calibration length")->capture_default_str();
  ablate->add_option("--eval-len", ab.eval_len, "Sampled evaluation length")->capture_default_str();
  ablate->add_option("--window", ab.window, "Window length")->capture_default_str();
  ablate->add_option("--out", ab.out, "Output directory");
  common(ablate);
  ablate->callback([&] { action = [&] { return run_ablate(ab, run); }; });

  GemmCheckOptions gc;
  auto *gemm = app.add_subcommand("gemm-check", "Group GEMM against the dequantized FP product");
  gemm->add_option("--trials", gc.trials, "Random configurations")->capture_default_str();
  gemm->add_option("--tolerance", gc.tolerance, "Relative Frobenius tolerance")->capture_default_str();
  gemm->add_option("--out", gc.out, "Output directory");
  common(gemm);
  gemm->callback([&] { action = [&] { return run_gemm_check_cmd(gc, run); }; });

  SimulateOptions sim;
  auto *simulate = app.add_subcommand("simulate", "Continuous-batching serving simulation");
  simulate->add_option("--hw", sim.hw, "Hardware profile JSON (default A100-80GB)");
  simulate->add_option("--model", sim.model, "Model dims JSON (default Llama-7B)");
  simulate->add_option("--scheme", sim.scheme, "fp16, w4a16, w8a8, w4a4 or all")->capture_default_str();
  simulate->add_option("--batch", sim.batch, "Batch size caps")->capture_default_str();
  simulate->add_option("--requests", sim.requests, "Requests in the trace")->capture_default_str();
  simulate->add_option("--prompt-median", sim.prompt_median, "Median prompt length")->capture_default_str();
  simulate->add_option("--decode-median", sim.decode_median, "Median decode length")->capture_default_str();
  simulate->add_option("--sigma", sim.sigma, "Log-normal sigma of lengths")->capture_default_str();
  simulate->add_option("--max-len", sim.max_len, "Length cap")->capture_default_str();
  simulate->add_option("--arrival-rate", sim.arrival_rate, "Poisson arrivals per second (0 = all at once)")
      ->capture_default_str();
  simulate->add_option("--horizon", sim.horizon, "Stop after this many simulated seconds (0 = run out)")
      ->capture_default_str();
  simulate->add_option("--fixed-memory", sim.fixed_memory, "Memory capacity in bytes (0 = hardware)")
      ->capture_default_str();
  simulate->add_option("--context", sim.context, "Context length for the max-batch estimate")->capture_default_str();
  simulate->add_option("--out", sim.out, "Output directory");
  common(simulate);
  simulate->callback([&] { action = [&] { return run_simulate(sim, run); }; });

  RooflineOptions rf;
  auto *roofline = app.add_subcommand("roofline", "Roofline costs of dense and attention operators");
  roofline->add_option("--hw", rf.hw, "Hardware profile JSON (default A100-80GB)");
  roofline->add_option("--model", rf.model, "Model dims JSON (default Llama-7B)");
  roofline->add_option("--scheme", rf.scheme, "fp16, w4a16, w8a8, w4a4 or all")->capture_default_str();
  roofline->add_option("--batch", rf.batch, "Tokens in the batch")->capture_default_str();
  roofline->add_option("--context", rf.context, "Cached tokens per sequence")->capture_default_str();
  roofline->add_option("--out", rf.out, "Output directory");
  common(roofline);
  roofline->callback([&] { action = [&] { return run_roofline(rf, run); }; });

  try
  {
    app.parse(argc, argv);
  }
  catch (const CLI::ParseError &e)
  {
    if (e.get_exit_code() == 0)
      return app.exit(e);
    const std::string command = app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name();
    print_error(command, "argument", e.what());
    return kExitUsage;
  }

  CLI::App *sub = app.get_subcommands().front();
  run.command = sub->get_name();
  try
  {
    if (!config_path.empty())
    {
      apply_config(*sub, config_path);
      run.inputs.push_back(config_path);
    }
    return action();
  }
  catch (const CLI::ParseError &e)
  {
    print_error(run.command, "config", e.what());
    return kExitUsage;
  }
  catch (const Error &e)
  {
    print_error(run.command, e.category(), e.what());
    return exit_code_for(e);
  }
  catch (const std::exception &e)
  {
    print_error(run.command, "internal", e.what());
    return kExitFailure;
  }
}
