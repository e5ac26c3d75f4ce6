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
#include "atomforge/reorder.hpp"

#include <span>
#include <vector>

namespace atomforge
{

inline constexpr double kDefaultDamping = 0.01;

/**
 * @brief Running H = sum of x x^T over calibration tokens, in double.
 *
 * Damping (lambda times the mean diagonal) is added once by finalize(); the
 * raw sum stays available for proxy-loss evaluation.
 */
class CalibrationHessian
{
public:
  explicit CalibrationHessian(std::size_t dim = 0) : dim_(dim), sum_(dim * dim, 0.0) {}

  void add(const Matrix &activations);
  void finalize(double damping = kDefaultDamping);

  std::size_t dim() const noexcept { return dim_; }
  std::size_t tokens() const noexcept { return tokens_; }
  bool finalized() const noexcept { return finalized_; }
  double damping() const noexcept { return damping_; }

  double raw(std::size_t i, std::size_t j) const { return sum_[i * dim_ + j]; }
  const std::vector<double> &raw() const noexcept { return sum_; }
  /// Damped matrix; throws StateError before finalize().
  const std::vector<double> &matrix() const;

  /// H'[i][j] = H[p_i][p_j] for the plan's permutation p.
  CalibrationHessian permuted(const ReorderPlan &plan) const;

private:
  std::size_t dim_ = 0;
  std::size_t tokens_ = 0;
  std::vector<double> sum_;
  std::vector<double> damped_;
  double damping_ = 0.0;
  bool finalized_ = false;
};

CalibrationHessian accumulate_hessian(std::span<const Matrix> activations, double damping = kDefaultDamping);

/// Error-compensated quantization of w (inputs x outputs) along its rows,
/// symmetric, with group scales frozen from the updated weights on entry.
QuantizedTensor gptq_quantize_weight(const Matrix &w, const CalibrationHessian &h, const GroupScheme &scheme,
                                     int bit_width, float clip = 1.0f);

/// Mixed normal/outlier version on a reordered weight and a Hessian in the
/// same reordered order. With include_outliers off, the outlier rows are
/// rounded to nearest and compensation runs inside the normal block only.
MixedQuantWeight gptq_quantize_weight_mixed(const Matrix &reordered_weight, const CalibrationHessian &reordered_h,
                                            std::size_t outlier_count, const MixedPrecisionSpec &spec,
                                            bool include_outliers = true);

/// ||X W - X W_hat||_F^2 = tr((W - W_hat)^T H (W - W_hat)) on the undamped H.
double proxy_loss(const Matrix &w, const Matrix &w_hat, const CalibrationHessian &h);

} // namespace atomforge
