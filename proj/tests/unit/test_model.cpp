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
#include "atomforge/parallel.hpp"
#include "atomforge/train.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <numeric>

using namespace atomforge;

namespace
{

ModelConfig small_config()
{
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 64;
  c.n_heads = 4;
  c.head_dim = 16;
  c.ffn_dim = 128;
  c.vocab_size = 64;
  c.group_size = 16;
  c.outlier_count = 16;
  return c;
}

std::vector<std::int32_t> random_tokens(std::mt19937_64 &rng, std::size_t n, std::size_t vocab)
{
  std::uniform_int_distribution<std::int32_t> dist(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> out(n);
  for (auto &t : out)
    t = dist(rng);
  return out;
}

bool all_finite(const Matrix &m)
{
  for (float v : m.data())
    if (!std::isfinite(v))
      return false;
  return true;
}

double max_rel_diff(const Matrix &got, const Matrix &want)
{
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i)
  {
    num = std::max(num, std::abs(static_cast<double>(got.data()[i]) - want.data()[i]));
    den = std::max(den, std::abs(static_cast<double>(want.data()[i])));
  }
  return num / den;
}

} // namespace

TEST(ModelConfigTest, ValidationAndJson)
{
  ModelConfig c = small_config();
  EXPECT_NO_THROW(c.validate());
  ModelConfig bad = c;
  bad.head_dim = 8; // 4 heads x 8 != 64
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.group_size = 32; // does not divide 64 - 16 = 48
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.vocab_size = 0;
  EXPECT_THROW(bad.validate(), ConfigError);

  auto j = c.to_json();
  EXPECT_EQ(ModelConfig::from_json(j).to_json(), j);
  j["mystery"] = 1;
  EXPECT_THROW(ModelConfig::from_json(j), ConfigError);
}

TEST(BuildToyModel, SameSeedIsBitIdentical)
{
  const auto a = build_toy_model(small_config(), 5);
  const auto b = build_toy_model(small_config(), 5);
  const auto c = build_toy_model(small_config(), 6);
  EXPECT_TRUE(bit_equal(a.embedding, b.embedding));
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    for (Site s : kSites)
      EXPECT_TRUE(bit_equal(site_weight(a.layers[l], s), site_weight(b.layers[l], s)));
  EXPECT_FALSE(bit_equal(a.embedding, c.embedding));
  EXPECT_NO_THROW(check_model_shapes(a));
}

TEST(BuildToyModel, ZeroEmbeddingGivesFiniteLogits)
{
  auto m = build_toy_model(small_config(), 1);
  for (float &v : m.embedding.row(0))
    v = 0.0f;
  const std::int32_t tokens[] = {0, 0, 3};
  const Matrix logits = forward_fp(m, tokens);
  EXPECT_EQ(logits.rows(), 3u);
  EXPECT_EQ(logits.cols(), m.config.vocab_size);
  EXPECT_TRUE(all_finite(logits));
}

TEST(BuildToyModel, InjectedOutliersPreserveTheFpFunction)
{
  ModelConfig c = small_config();
  const auto plain = build_toy_model(c, 9);
  c.injected_outliers = 4;
  const auto injected = build_toy_model(c, 9);
  std::mt19937_64 rng(1);
  const auto tokens = random_tokens(rng, 24, c.vocab_size);
  EXPECT_LT(max_rel_diff(forward_fp(injected, tokens), forward_fp(plain, tokens)), 1e-4);
}

TEST(InferenceSessionTest, DecodeAfterEmptyPrefill)
{
  const auto m = build_toy_model(small_config(), 2);
  InferenceSession session(m, nullptr, kBypassBits);
  const Matrix empty = session.prefill({});
  EXPECT_EQ(empty.rows(), 0u);
  const Matrix logits = session.decode(7);
  EXPECT_EQ(logits.rows(), 1u);
  EXPECT_EQ(logits.cols(), m.config.vocab_size);
  EXPECT_TRUE(all_finite(logits));
  EXPECT_EQ(session.position(), 1u);
  EXPECT_THROW(session.decode(static_cast<std::int32_t>(m.config.vocab_size)), RangeError);
  EXPECT_THROW(session.decode(-1), RangeError);
}

TEST(QuantizeModel, BypassMatchesFpTwin)
{
  for (std::size_t k : {std::size_t{0}, std::size_t{16}})
  {
    ModelConfig c = small_config();
    c.outlier_count = k;
    c.injected_outliers = 4;
    const auto m = build_toy_model(c, 3);
    std::mt19937_64 rng(4);
    const auto calib = random_tokens(rng, 64, c.vocab_size);
    const auto bundle = quantize_model(m, calib, QuantRecipe::bypass(c));
    const auto tokens = random_tokens(rng, 40, c.vocab_size);
    const Matrix fp = forward_fp(m, tokens);
    EXPECT_LT(test_support::rel_frobenius(forward_quantized(bundle, tokens), fp), 1e-5) << "k=" << k;
    EXPECT_LT(test_support::rel_frobenius(forward_quantized(bundle, tokens, ForwardMode::kDecode), fp), 1e-5);
  }
}

TEST(QuantizeModel, PrefillDecodeConsistency)
{
  ModelConfig c = small_config();
  c.injected_outliers = 4;
  const auto m = build_toy_model(c, 8);
  std::mt19937_64 rng(5);
  const auto calib = random_tokens(rng, 128, c.vocab_size);
  const auto bundle = quantize_model(m, calib, QuantRecipe::from_config(c));
  const auto tokens = random_tokens(rng, 48, c.vocab_size);
  const Matrix prefill = forward_quantized(bundle, tokens, ForwardMode::kPrefill);
  const Matrix decode = forward_quantized(bundle, tokens, ForwardMode::kDecode);
  double worst = 0.0;
  for (std::size_t i = 0; i < prefill.size(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(prefill.data()[i] - decode.data()[i])));
  EXPECT_LE(worst, 1e-4);
}

TEST(QuantizeModel, InjectedChannelLandsInTheOutlierSet)
{
  ModelConfig c = small_config();
  c.outlier_count = 16;
  auto m = build_toy_model(c, 11);
  // Make channel 5 of the first QKV input dominate every token's square sum.
  m.layers[0].attn_norm(0, 5) = 100.0f;
  std::mt19937_64 rng(12);
  const auto calib = random_tokens(rng, 64, c.vocab_size);
  QuantRecipe r = QuantRecipe::from_config(c);
  r.gptq = false;
  r.clip_search = false;
  const auto bundle = quantize_model(m, calib, r);
  const auto outliers = bundle.layers[0][0]->plan.outliers();
  EXPECT_NE(std::find(outliers.begin(), outliers.end(), 5u), outliers.end());
  EXPECT_EQ(bundle.metadata["sites"].size(), c.n_layers * kSiteCount);
  EXPECT_EQ(bundle.metadata["calibration_sha256"].get<std::string>().size(), 64u);
}

TEST(QuantizeModel, ErrorsPropagate)
{
  const auto c = small_config();
  const auto m = build_toy_model(c, 1);
  EXPECT_THROW(quantize_model(m, {}, QuantRecipe::from_config(c)), ArgumentError);
  QuantRecipe r = QuantRecipe::from_config(c);
  r.weight_scheme = GroupScheme::per_group(32);
  const std::int32_t calib[] = {1, 2, 3};
  EXPECT_THROW(quantize_model(m, calib, r), ConfigError);
  r = QuantRecipe::from_config(c);
  r.weight_bits = 5;
  EXPECT_THROW(quantize_model(m, calib, r), ConfigError);
}

TEST(QuantizeModel, CalibrationModesAndThreadCountsAgree)
{
  ModelConfig c = small_config();
  c.injected_outliers = 2;
  const auto m = build_toy_model(c, 21);
  std::mt19937_64 rng(22);
  const auto calib = random_tokens(rng, 128, c.vocab_size);
  const auto tokens = random_tokens(rng, 32, c.vocab_size);
  QuantRecipe r = QuantRecipe::from_config(c);

  Matrix one, four;
  {
    ScopedThreadCount t(1);
    one = forward_quantized(quantize_model(m, calib, r), tokens);
  }
  {
    ScopedThreadCount t(4);
    four = forward_quantized(quantize_model(m, calib, r), tokens);
  }
  EXPECT_TRUE(bit_equal(one, four));

  r.sequential = false;
  const auto fp_mode = quantize_model(m, calib, r);
  EXPECT_EQ(fp_mode.metadata["calibration_mode"], "fp");
  EXPECT_TRUE(all_finite(forward_quantized(fp_mode, tokens)));
}

TEST(ModelBundleTest, SaveLoadGivesIdenticalOutputs)
{
  ModelConfig c = small_config();
  c.injected_outliers = 2;
  const auto m = build_toy_model(c, 31);
  std::mt19937_64 rng(32);
  const auto calib = random_tokens(rng, 96, c.vocab_size);
  const auto tokens = random_tokens(rng, 20, c.vocab_size);
  const auto dir = std::filesystem::temp_directory_path() / "atomforge_bundle_test";
  std::filesystem::remove_all(dir);

  for (QuantRecipe r : {QuantRecipe::from_config(c), QuantRecipe::bypass(c)})
  {
    const auto bundle = quantize_model(m, calib, r);
    save_bundle(bundle, dir);
    const auto loaded = load_bundle(dir);
    EXPECT_TRUE(bit_equal(forward_quantized(loaded, tokens), forward_quantized(bundle, tokens)));
    EXPECT_EQ(loaded.recipe.to_json(), bundle.recipe.to_json());
    EXPECT_EQ(loaded.metadata, bundle.metadata);
    for (std::size_t l = 0; l < c.n_layers; ++l)
      for (std::size_t s = 0; s < kSiteCount; ++s)
        EXPECT_EQ(loaded.layers[l][s]->plan, bundle.layers[l][s]->plan);
  }
  std::filesystem::remove(dir / "layer1" / "w_o.atm");
  EXPECT_THROW(load_bundle(dir), IoError);
  std::filesystem::remove(dir / "bundle.json");
  EXPECT_THROW(load_bundle(dir), IoError);
}

TEST(RecipeTest, JsonRoundTripAndAblationOrder)
{
  const auto c = small_config();
  const QuantRecipe r = QuantRecipe::from_config(c);
  EXPECT_EQ(QuantRecipe::from_json(r.to_json()).to_json(), r.to_json());
  EXPECT_THROW(QuantRecipe::from_json(nlohmann::json{{"weight_bits", 4}}), ConfigError);

  const auto chain = ablation_recipes(c);
  ASSERT_EQ(chain.size(), 7u);
  EXPECT_EQ(chain[0].second.outlier_count, 0u);
  EXPECT_EQ(chain[1].second.outlier_bits, kBypassBits);
  EXPECT_EQ(chain[2].second.outlier_bits, c.outlier_bits);
  EXPECT_EQ(chain[3].second.activation_scheme, GroupScheme::per_group(c.group_size));
  EXPECT_TRUE(chain[4].second.clip_search);
  EXPECT_FALSE(chain[4].second.gptq);
  EXPECT_TRUE(chain[5].second.gptq);
  EXPECT_EQ(chain[5].second.kv_bits, kBypassBits);
  EXPECT_EQ(chain[6].second.kv_bits, c.kv_bits);
}

TEST(Perplexity, UniformLogitsGiveVocabularySize)
{
  ModelConfig c = small_config();
  auto m = build_toy_model(c, 1);
  // A zero embedding makes every hidden state and every logit zero.
  for (float &v : m.embedding.data())
    v = 0.0f;
  std::mt19937_64 rng(2);
  const auto stream = random_tokens(rng, 50, c.vocab_size);
  EXPECT_NEAR(perplexity(m, stream), static_cast<double>(c.vocab_size), 1e-6 * c.vocab_size);
  EXPECT_NEAR(perplexity(m, stream, 16), static_cast<double>(c.vocab_size), 1e-6 * c.vocab_size);
  const std::int32_t one[] = {3};
  EXPECT_THROW(perplexity(m, one), ArgumentError);
}

TEST(Perplexity, MeanKlIsZeroForIdenticalLogitsAndPositiveOtherwise)
{
  const Matrix a = Matrix::from_rows({{1, 2, 3}, {0, 0, 0}});
  const Matrix b = Matrix::from_rows({{3, 2, 1}, {0, 0, 0}});
  EXPECT_DOUBLE_EQ(mean_kl(a, a), 0.0);
  // Row 0: KL(softmax(1,2,3) || softmax(3,2,1)) = sum p (la - lb) = 2 (p3 - p1).
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(mean_kl(a, b), 0.5 * 2.0 * (std::exp(3.0) - std::exp(1.0)) / z, 1e-6);
}

TEST(Training, GradientMatchesFiniteDifferences)
{
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 16;
  c.n_heads = 2;
  c.head_dim = 8;
  c.ffn_dim = 24;
  c.vocab_size = 12;
  c.group_size = 8;
  c.outlier_count = 8;
  auto m = build_toy_model(c, 4);
  std::mt19937_64 rng(5);
  // Non-unit norm gains so their gradients are exercised away from 1.
  for (auto &l : m.layers)
    for (float &g : l.attn_norm.data())
      g = std::uniform_real_distribution<float>(0.5f, 1.5f)(rng);
  const auto tokens = random_tokens(rng, 9, c.vocab_size);
  std::vector<double> params = flatten_parameters(m), grad;
  loss_and_gradient(c, params, tokens, &grad);
  ASSERT_EQ(grad.size(), params.size());

  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  const double h = 1e-5;
  for (int trial = 0; trial < 150; ++trial)
  {
    const std::size_t i = pick(rng);
    const double saved = params[i];
    params[i] = saved + h;
    const double up = loss_and_gradient(c, params, tokens, nullptr);
    params[i] = saved - h;
    const double down = loss_and_gradient(c, params, tokens, nullptr);
    params[i] = saved;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(grad[i], fd, 1e-6 + 1e-4 * std::abs(fd)) << "parameter " << i;
  }
}

TEST(Training, LossMatchesTheFloatForward)
{
  const auto c = small_config();
  const auto m = build_toy_model(c, 6);
  std::mt19937_64 rng(7);
  const auto tokens = random_tokens(rng, 30, c.vocab_size);
  const double loss = loss_and_gradient(c, flatten_parameters(m), tokens, nullptr);
  EXPECT_NEAR(loss, mean_nll(forward_fp(m, tokens), tokens), 1e-4);
}

TEST(Training, OverfitsARepeatingPattern)
{
  const auto c = small_config();
  auto m = build_toy_model(c, 13);
  std::mt19937_64 rng(14);
  const auto period = random_tokens(rng, 8, c.vocab_size);
  std::vector<std::int32_t> stream;
  for (int rep = 0; rep < 16; ++rep)
    stream.insert(stream.end(), period.begin(), period.end());
  const double before = perplexity(m, stream);
  TrainConfig tc;
  tc.steps = 200;
  const auto losses = train_on_stream(m, stream, tc);
  ASSERT_EQ(losses.size(), 200u);
  const double after = perplexity(m, stream, 32);
  EXPECT_GT(before, 10.0);
  EXPECT_LT(after, 1.5);
}

TEST(QuantizeModel, FourBitsBeatThreeBitsInKl)
{
  // Group 64 with 32 outliers needs hidden - 32 and ffn - 32 to be multiples of 64.
  ModelConfig c;
  c.n_layers = 2;
  c.hidden_dim = 160;
  c.n_heads = 5;
  c.head_dim = 32;
  c.ffn_dim = 288;
  c.vocab_size = 128;
  c.group_size = 64;
  c.outlier_count = 32;
  c.injected_outliers = 4;
  int wins = 0;
  double kl4_sum = 0.0, kl3_sum = 0.0;
  const int seeds = 20;
  for (int seed = 0; seed < seeds; ++seed)
  {
    const auto m = build_toy_model(c, static_cast<std::uint64_t>(seed));
    std::mt19937_64 rng(1000 + seed);
    const auto calib = sample_stream(m, 128, 64, 2000 + seed);
    const auto eval = random_tokens(rng, 256, c.vocab_size);
    auto kl_at = [&](int bits) {
      QuantRecipe r = QuantRecipe::from_config(c);
      r.weight_bits = r.activation_bits = r.kv_bits = bits;
      r.gptq = false;
      r.sequential = false;
      const auto bundle = quantize_model(m, calib, r);
      double kl = 0.0;
      const auto windows = split_windows(eval, 64);
      for (auto w : windows)
        kl += mean_kl(forward_fp(m, w), forward_quantized(bundle, w));
      return kl / static_cast<double>(windows.size());
    };
    const double kl4 = kl_at(4), kl3 = kl_at(3);
    kl4_sum += kl4;
    kl3_sum += kl3;
    wins += kl4 < kl3;
  }
  EXPECT_LT(kl4_sum, kl3_sum);
  EXPECT_LT(test_support::sign_test_p(wins, seeds), 0.05) << wins << "/" << seeds;
}
