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

#include "atomforge/mixed_precision.hpp"
#include "atomforge/tensors.hpp"

#include <json.hpp>

#include <span>
#include <vector>

namespace atomforge
{

/**
 * @brief Channel permutation that moves the k outlier channels to the tail.
 *
 * Output channel j reads input channel permutation()[j]. The first
 * hidden_dim - k entries are the normal channels in ascending original order,
 * the last k are the outliers in ascending original order.
 */
class ReorderPlan
{
public:
  ReorderPlan() = default;
  ReorderPlan(std::vector<std::size_t> permutation, std::size_t outlier_count);

  static ReorderPlan identity(std::size_t hidden_dim);

  std::size_t hidden_dim() const noexcept { return permutation_.size(); }
  std::size_t outlier_count() const noexcept { return outlier_count_; }
  std::size_t normal_count() const noexcept { return permutation_.size() - outlier_count_; }
  const std::vector<std::size_t> &permutation() const noexcept { return permutation_; }
  std::span<const std::size_t> outliers() const;
  std::vector<std::size_t> inverse_permutation() const;

  nlohmann::json to_json() const;
  static ReorderPlan from_json(const nlohmann::json &j);

  bool operator==(const ReorderPlan &) const = default;

private:
  std::vector<std::size_t> permutation_;
  std::size_t outlier_count_ = 0;
};

/// Streaming per-channel square-sum accumulator; summation order is the
/// order matrices are added in.
class OutlierStats
{
public:
  explicit OutlierStats(std::size_t hidden_dim = 0) : scores_(hidden_dim, 0.0) {}

  void add(const Matrix &activations);
  std::size_t hidden_dim() const noexcept { return scores_.size(); }
  std::size_t tokens() const noexcept { return tokens_; }
  const std::vector<double> &scores() const noexcept { return scores_; }

private:
  std::vector<double> scores_;
  std::size_t tokens_ = 0;
};

/// Top-k channels by score; ties go to the lower channel index.
ReorderPlan plan_from_scores(std::span<const double> scores, std::size_t k);

ReorderPlan calibrate_outliers(std::span<const Matrix> activations, std::size_t k);

Matrix reorder_activation_cols(const Matrix &m, const ReorderPlan &plan);
Matrix reorder_weight_rows(const Matrix &w, const ReorderPlan &plan);
// Inverse operations, mainly for checks.
Matrix restore_activation_cols(const Matrix &m, const ReorderPlan &plan);
Matrix restore_weight_rows(const Matrix &w, const ReorderPlan &plan);

/// Gathers columns through the plan and quantizes the two blocks dynamically
/// (params from m itself), without materializing the reordered matrix.
MixedQuantActivation fused_reorder_quantize(const Matrix &m, const ReorderPlan &plan,
                                            const MixedPrecisionSpec &spec);

} // namespace atomforge
