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

#include "atomforge/train.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <random>

namespace atomforge
{

namespace
{

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstView = Eigen::Map<const Mat>;
using View = Eigen::Map<Mat>;

struct LayerShape
{
  std::size_t offset[6];
};

struct Layout
{
  std::size_t embedding = 0;
  std::vector<LayerShape> layers;
  std::size_t final_norm = 0;
  std::size_t total = 0;

  explicit Layout(const ModelConfig &c)
  {
    const std::size_t h = c.hidden_dim, f = c.ffn_dim;
    const std::size_t sizes[6] = {h, h * 3 * h, h * h, h, h * 2 * f, f * h};
    std::size_t at = c.vocab_size * h;
    for (std::size_t l = 0; l < c.n_layers; ++l)
    {
      LayerShape s{};
      for (int t = 0; t < 6; ++t)
      {
        s.offset[t] = at;
        at += sizes[t];
      }
      layers.push_back(s);
    }
    final_norm = at;
    total = at + h;
  }
};

std::array<Matrix *, 6> layer_tensors(LayerWeights &w)
{
  return {&w.attn_norm, &w.w_qkv, &w.w_o, &w.ffn_norm, &w.w_gate_up, &w.w_down};
}

struct RmsCache
{
  Mat normed;                // x * inv, before the gain
  Eigen::VectorXd inv;       // per-row 1/rms
};

Mat rms_forward(const Mat &x, const double *gain, double eps, RmsCache &cache)
{
  const auto n = x.rows(), h = x.cols();
  cache.inv.resize(n);
  cache.normed.resize(n, h);
  Mat y(n, h);
  for (Eigen::Index t = 0; t < n; ++t)
  {
    const double inv = 1.0 / std::sqrt(x.row(t).squaredNorm() / static_cast<double>(h) + eps);
    cache.inv(t) = inv;
    cache.normed.row(t) = x.row(t) * inv;
    for (Eigen::Index c = 0; c < h; ++c)
      y(t, c) = cache.normed(t, c) * gain[c];
  }
  return y;
}

Mat rms_backward(const Mat &dy, const double *gain, const RmsCache &cache, double *dgain)
{
  const auto n = dy.rows(), h = dy.cols();
  Mat dx(n, h);
  for (Eigen::Index t = 0; t < n; ++t)
  {
    Eigen::RowVectorXd dn(h);
    for (Eigen::Index c = 0; c < h; ++c)
    {
      dgain[c] += dy(t, c) * cache.normed(t, c);
      dn(c) = dy(t, c) * gain[c];
    }
    const double proj = dn.dot(cache.normed.row(t)) / static_cast<double>(h);
    dx.row(t) = cache.inv(t) * (dn - cache.normed.row(t) * proj);
  }
  return dx;
}

// Rotates pairs in every head; inverse = true applies the transpose.
void rope(Mat &m, Eigen::Index col0, const ModelConfig &c, bool inverse)
{
  const std::size_t d = c.head_dim;
  for (Eigen::Index t = 0; t < m.rows(); ++t)
    for (std::size_t head = 0; head < c.n_heads; ++head)
      for (std::size_t i = 0; i < d / 2; ++i)
      {
        const double freq = std::pow(static_cast<double>(c.rope_theta), -2.0 * static_cast<double>(i) / static_cast<double>(d));
        const double angle = static_cast<double>(t) * freq;
        const double cs = std::cos(angle), sn = inverse ? -std::sin(angle) : std::sin(angle);
        const Eigen::Index a = col0 + static_cast<Eigen::Index>(head * d + 2 * i);
        const double a0 = m(t, a), b0 = m(t, a + 1);
        m(t, a) = a0 * cs - b0 * sn;
        m(t, a + 1) = a0 * sn + b0 * cs;
      }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct LayerCache
{
  Mat x_in;
  RmsCache rms1;
  Mat a;
  Mat qkv; // q and k rotated
  std::vector<Mat> probs; // per head, n x n (lower triangle used)
  Mat attn;
  Mat x_mid;
  RmsCache rms2;
  Mat b;
  Mat gate_up;
  Mat act;
};

} // namespace

std::vector<double> flatten_parameters(const ToyModel &model)
{
  check_model_shapes(model);
  std::vector<double> out;
  auto push = [&](const Matrix &m) { out.insert(out.end(), m.data().begin(), m.data().end()); };
  push(model.embedding);
  for (LayerWeights w : model.layers)
    for (Matrix *m : layer_tensors(w))
      push(*m);
  push(model.final_norm);
  return out;
}

void assign_parameters(ToyModel &model, std::span<const double> params)
{
  check_model_shapes(model);
  const Layout layout(model.config);
  if (params.size() != layout.total)
    throw ShapeError("parameter vector has " + std::to_string(params.size()) + " entries, model needs " +
                     std::to_string(layout.total));
  std::size_t at = 0;
  auto pull = [&](Matrix &m) {
    for (float &v : m.data())
      v = static_cast<float>(params[at++]);
  };
  pull(model.embedding);
  for (auto &w : model.layers)
    for (Matrix *m : layer_tensors(w))
      pull(*m);
  pull(model.final_norm);
}

double loss_and_gradient(const ModelConfig &c, std::span<const double> params, std::span<const std::int32_t> tokens,
                         std::vector<double> *grad)
{
  c.validate();
  const Layout layout(c);
  if (params.size() != layout.total)
    throw ShapeError("parameter vector size does not match the config");
  if (tokens.size() < 2)
    throw ArgumentError("training sequence needs at least 2 tokens");
  const auto n = static_cast<Eigen::Index>(tokens.size());
  const auto h = static_cast<Eigen::Index>(c.hidden_dim), f = static_cast<Eigen::Index>(c.ffn_dim);
  const auto d = static_cast<Eigen::Index>(c.head_dim);
  const double eps = c.norm_eps;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double *p = params.data();
  auto view = [&](std::size_t off, Eigen::Index r, Eigen::Index cols) { return ConstView(p + off, r, cols); };
  const ConstView emb = view(layout.embedding, static_cast<Eigen::Index>(c.vocab_size), h);

  Mat x(n, h);
  for (Eigen::Index t = 0; t < n; ++t)
  {
    if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= c.vocab_size)
      throw RangeError("token id " + std::to_string(tokens[t]) + " outside vocabulary");
    x.row(t) = emb.row(tokens[t]);
  }

  std::vector<LayerCache> caches(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l)
  {
    const auto &off = layout.layers[l].offset;
    LayerCache &lc = caches[l];
    lc.x_in = x;
    lc.a = rms_forward(x, p + off[0], eps, lc.rms1);
    lc.qkv = lc.a * view(off[1], h, 3 * h);
    rope(lc.qkv, 0, c, false);
    rope(lc.qkv, h, c, false);
    lc.attn = Mat::Zero(n, h);
    for (std::size_t head = 0; head < c.n_heads; ++head)
    {
      const Eigen::Index qo = static_cast<Eigen::Index>(head) * d, ko = h + qo, vo = 2 * h + qo;
      Mat probs = Mat::Zero(n, n);
      for (Eigen::Index t = 0; t < n; ++t)
      {
        double mx = -INFINITY;
        for (Eigen::Index s = 0; s <= t; ++s)
        {
          probs(t, s) = lc.qkv.row(t).segment(qo, d).dot(lc.qkv.row(s).segment(ko, d)) * scale;
          mx = std::max(mx, probs(t, s));
        }
        double sum = 0.0;
        for (Eigen::Index s = 0; s <= t; ++s)
          sum += probs(t, s) = std::exp(probs(t, s) - mx);
        for (Eigen::Index s = 0; s <= t; ++s)
        {
          probs(t, s) /= sum;
          lc.attn.row(t).segment(qo, d) += probs(t, s) * lc.qkv.row(s).segment(vo, d);
        }
      }
      lc.probs.push_back(std::move(probs));
    }
    x += lc.attn * view(off[2], h, h);
    lc.x_mid = x;
    lc.b = rms_forward(x, p + off[3], eps, lc.rms2);
    lc.gate_up = lc.b * view(off[4], h, 2 * f);
    lc.act.resize(n, f);
    for (Eigen::Index t = 0; t < n; ++t)
      for (Eigen::Index j = 0; j < f; ++j)
      {
        const double g = lc.gate_up(t, j);
        lc.act(t, j) = g * sigmoid(g) * lc.gate_up(t, f + j);
      }
    x += lc.act * view(off[5], f, h);
  }

  RmsCache final_cache;
  const Mat y = rms_forward(x, p + layout.final_norm, eps, final_cache);
  const Mat logits = y * emb.transpose();
  const Eigen::Index predictions = n - 1;
  double loss = 0.0;
  Mat dlogits = Mat::Zero(n, logits.cols());
  for (Eigen::Index t = 0; t < predictions; ++t)
  {
    const double mx = logits.row(t).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(t).array() - mx).exp().matrix();
    const double sum = e.sum();
    loss += std::log(sum) + mx - logits(t, tokens[t + 1]);
    dlogits.row(t) = e / sum;
    dlogits(t, tokens[t + 1]) -= 1.0;
  }
  loss /= static_cast<double>(predictions);
  if (!grad)
    return loss;

  dlogits /= static_cast<double>(predictions);
  grad->assign(layout.total, 0.0);
  double *g = grad->data();
  auto gview = [&](std::size_t off, Eigen::Index r, Eigen::Index cols) { return View(g + off, r, cols); };
  View demb = gview(layout.embedding, static_cast<Eigen::Index>(c.vocab_size), h);
  demb += dlogits.transpose() * y;
  Mat dx = rms_backward(dlogits * emb, p + layout.final_norm, final_cache, g + layout.final_norm);

  for (std::size_t li = c.n_layers; li-- > 0;)
  {
    const auto &off = layout.layers[li].offset;
    const LayerCache &lc = caches[li];

    // MLP
    gview(off[5], f, h) += lc.act.transpose() * dx;
    const Mat dact = dx * view(off[5], f, h).transpose();
    Mat dgu(n, 2 * f);
    for (Eigen::Index t = 0; t < n; ++t)
      for (Eigen::Index j = 0; j < f; ++j)
      {
        const double gt = lc.gate_up(t, j), up = lc.gate_up(t, f + j), sg = sigmoid(gt);
        dgu(t, f + j) = dact(t, j) * gt * sg;
        dgu(t, j) = dact(t, j) * up * sg * (1.0 + gt * (1.0 - sg));
      }
    gview(off[4], h, 2 * f) += lc.b.transpose() * dgu;
    dx += rms_backward(dgu * view(off[4], h, 2 * f).transpose(), p + off[3], lc.rms2, g + off[3]);

    // Attention
    gview(off[2], h, h) += lc.attn.transpose() * dx;
    const Mat dattn = dx * view(off[2], h, h).transpose();
    Mat dqkv = Mat::Zero(n, 3 * h);
    for (std::size_t head = 0; head < c.n_heads; ++head)
    {
      const Eigen::Index qo = static_cast<Eigen::Index>(head) * d, ko = h + qo, vo = 2 * h + qo;
      const Mat &probs = lc.probs[head];
      for (Eigen::Index t = 0; t < n; ++t)
      {
        Eigen::VectorXd dp(t + 1);
        double dot = 0.0;
        for (Eigen::Index s = 0; s <= t; ++s)
        {
          dp(s) = dattn.row(t).segment(qo, d).dot(lc.qkv.row(s).segment(vo, d));
          dqkv.row(s).segment(vo, d) += probs(t, s) * dattn.row(t).segment(qo, d);
          dot += probs(t, s) * dp(s);
        }
        for (Eigen::Index s = 0; s <= t; ++s)
        {
          const double ds = probs(t, s) * (dp(s) - dot) * scale;
          dqkv.row(t).segment(qo, d) += ds * lc.qkv.row(s).segment(ko, d);
          dqkv.row(s).segment(ko, d) += ds * lc.qkv.row(t).segment(qo, d);
        }
      }
    }
    rope(dqkv, 0, c, true);
    rope(dqkv, h, c, true);
    gview(off[1], h, 3 * h) += lc.a.transpose() * dqkv;
    dx += rms_backward(dqkv * view(off[1], h, 3 * h).transpose(), p + off[0], lc.rms1, g + off[0]);
  }

  for (Eigen::Index t = 0; t < n; ++t)
    demb.row(tokens[t]) += dx.row(t);
  return loss;
}

std::vector<double> train_on_stream(ToyModel &model, std::span<const std::int32_t> stream, const TrainConfig &config)
{
  if (config.seq_len < 2 || stream.size() < config.seq_len)
    throw ArgumentError("training stream must hold at least one window of seq_len >= 2 tokens");
  std::vector<double> params = flatten_parameters(model);
  std::vector<double> m(params.size(), 0.0), v(params.size(), 0.0), grad;
  std::mt19937_64 rng(config.seed);
  std::uniform_int_distribution<std::size_t> start(0, stream.size() - config.seq_len);
  std::vector<double> losses;
  for (std::size_t step = 1; step <= config.steps; ++step)
  {
    const auto window = stream.subspan(start(rng), config.seq_len);
    losses.push_back(loss_and_gradient(model.config, params, window, &grad));
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < params.size(); ++i)
    {
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * grad[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * grad[i] * grad[i];
      params[i] -= config.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.epsilon);
    }
  }
  assign_parameters(model, params);
  return losses;
}

} // namespace atomforge
