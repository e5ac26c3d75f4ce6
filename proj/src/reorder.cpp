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

#include "atomforge/reorder.hpp"

#include <algorithm>
#include <numeric>

namespace atomforge
{

ReorderPlan::ReorderPlan(std::vector<std::size_t> permutation, std::size_t outlier_count)
  : permutation_(std::move(permutation)), outlier_count_(outlier_count)
{
  if (outlier_count_ > permutation_.size())
    throw ShapeError("outlier count " + std::to_string(outlier_count_) + " exceeds hidden dim " +
                     std::to_string(permutation_.size()));
  std::vector<bool> seen(permutation_.size(), false);
  for (std::size_t idx : permutation_)
  {
    if (idx >= permutation_.size() || seen[idx])
      throw ArgumentError("reorder permutation is not a bijection on [0, " + std::to_string(permutation_.size()) + ")");
    seen[idx] = true;
  }
}

ReorderPlan ReorderPlan::identity(std::size_t hidden_dim)
{
  std::vector<std::size_t> perm(hidden_dim);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  return ReorderPlan(std::move(perm), 0);
}

std::span<const std::size_t> ReorderPlan::outliers() const
{
  return std::span(permutation_).subspan(normal_count(), outlier_count_);
}

std::vector<std::size_t> ReorderPlan::inverse_permutation() const
{
  std::vector<std::size_t> inv(permutation_.size());
  for (std::size_t j = 0; j < permutation_.size(); ++j)
    inv[permutation_[j]] = j;
  return inv;
}

nlohmann::json ReorderPlan::to_json() const
{
  return {{"hidden_dim", hidden_dim()}, {"outlier_count", outlier_count_}, {"permutation", permutation_}};
}

ReorderPlan ReorderPlan::from_json(const nlohmann::json &j)
{
  try
  {
    auto perm = j.at("permutation").get<std::vector<std::size_t>>();
    const auto hidden = j.at("hidden_dim").get<std::size_t>();
    if (perm.size() != hidden)
      throw ShapeError("reorder plan permutation length " + std::to_string(perm.size()) + " != hidden_dim " +
                       std::to_string(hidden));
    return ReorderPlan(std::move(perm), j.at("outlier_count").get<std::size_t>());
  }
  catch (const nlohmann::json::exception &e)
  {
    throw ParseError(ParseFailure::kBadHeader, std::string("malformed reorder plan: ") + e.what());
  }
}

void OutlierStats::add(const Matrix &activations)
{
  if (scores_.empty() && tokens_ == 0)
    scores_.assign(activations.cols(), 0.0);
  if (activations.cols() != scores_.size())
    throw ShapeError("calibration matrix has " + std::to_string(activations.cols()) + " channels, expected " +
                     std::to_string(scores_.size()));
  for (std::size_t r = 0; r < activations.rows(); ++r)
  {
    auto row = activations.row(r);
    for (std::size_t c = 0; c < row.size(); ++c)
      scores_[c] += static_cast<double>(row[c]) * row[c];
  }
  tokens_ += activations.rows();
}

ReorderPlan plan_from_scores(std::span<const double> scores, std::size_t k)
{
  const std::size_t n = scores.size();
  if (k > n)
    throw ShapeError("outlier count " + std::to_string(k) + " exceeds hidden dim " + std::to_string(n));
  std::vector<std::size_t> ranked(n);
  std::iota(ranked.begin(), ranked.end(), std::size_t{0});
  std::stable_sort(ranked.begin(), ranked.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<bool> is_outlier(n, false);
  for (std::size_t i = 0; i < k; ++i)
    is_outlier[ranked[i]] = true;

  std::vector<std::size_t> perm;
  perm.reserve(n);
  for (std::size_t c = 0; c < n; ++c)
    if (!is_outlier[c])
      perm.push_back(c);
  for (std::size_t c = 0; c < n; ++c)
    if (is_outlier[c])
      perm.push_back(c);
  return ReorderPlan(std::move(perm), k);
}

ReorderPlan calibrate_outliers(std::span<const Matrix> activations, std::size_t k)
{
  if (activations.empty())
    throw ArgumentError("outlier calibration needs at least one activation matrix");
  OutlierStats stats(activations.front().cols());
  for (const auto &m : activations)
    stats.add(m);
  return plan_from_scores(stats.scores(), k);
}

namespace
{

Matrix gather_cols(const Matrix &m, std::span<const std::size_t> index)
{
  Matrix out(m.rows(), index.size());
  for (std::size_t r = 0; r < m.rows(); ++r)
  {
    auto src = m.row(r);
    auto dst = out.row(r);
    for (std::size_t j = 0; j < index.size(); ++j)
      dst[j] = src[index[j]];
  }
  return out;
}

Matrix gather_rows(const Matrix &m, std::span<const std::size_t> index)
{
  Matrix out(index.size(), m.cols());
  for (std::size_t j = 0; j < index.size(); ++j)
  {
    auto src = m.row(index[j]);
    std::copy(src.begin(), src.end(), out.row(j).begin());
  }
  return out;
}

void check_dim(std::size_t actual, const ReorderPlan &plan, const char *what)
{
  if (actual != plan.hidden_dim())
    throw ShapeError(std::string(what) + " has " + std::to_string(actual) + " channels, plan expects " +
                     std::to_string(plan.hidden_dim()));
}

} // namespace

Matrix reorder_activation_cols(const Matrix &m, const ReorderPlan &plan)
{
  check_dim(m.cols(), plan, "activation");
  return gather_cols(m, plan.permutation());
}

Matrix reorder_weight_rows(const Matrix &w, const ReorderPlan &plan)
{
  check_dim(w.rows(), plan, "weight");
  return gather_rows(w, plan.permutation());
}

Matrix restore_activation_cols(const Matrix &m, const ReorderPlan &plan)
{
  check_dim(m.cols(), plan, "activation");
  return gather_cols(m, plan.inverse_permutation());
}

Matrix restore_weight_rows(const Matrix &w, const ReorderPlan &plan)
{
  check_dim(w.rows(), plan, "weight");
  return gather_rows(w, plan.inverse_permutation());
}

MixedQuantActivation fused_reorder_quantize(const Matrix &m, const ReorderPlan &plan, const MixedPrecisionSpec &spec)
{
  check_dim(m.cols(), plan, "activation");
  std::span<const std::size_t> perm = plan.permutation();
  const Matrix normal = gather_cols(m, perm.first(plan.normal_count()));
  const Matrix outlier = gather_cols(m, perm.subspan(plan.normal_count()));
  MixedQuantActivation out;
  out.normal = quantize_matrix(normal, spec.scheme, spec.normal_bits, spec.clip, true, ChannelAxis::kCols);
  out.outlier = quantize_matrix(outlier, outlier_block_scheme(spec.scheme, plan.outlier_count()), spec.outlier_bits,
                                spec.outlier_clip, true, ChannelAxis::kCols);
  return out;
}

} // namespace atomforge
