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
#include "atomforge/parallel.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <cmath>

namespace atomforge
{

void CalibrationHessian::add(const Matrix &activations)
{
  if (finalized_)
    throw StateError("cannot add calibration data to a finalized Hessian");
  if (activations.cols() != dim_)
    throw ShapeError("calibration matrix has " + std::to_string(activations.cols()) + " channels, Hessian dim is " +
                     std::to_string(dim_));
  // Rows of the upper triangle are independent, so the split is deterministic.
  parallel_for(dim_, [&](std::size_t i) {
    double *out = sum_.data() + i * dim_;
    for (std::size_t t = 0; t < activations.rows(); ++t)
    {
      auto x = activations.row(t);
      const double xi = x[i];
      if (xi == 0.0)
        continue;
      for (std::size_t j = i; j < dim_; ++j)
        out[j] += xi * static_cast<double>(x[j]);
    }
  });
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j < i; ++j)
      sum_[i * dim_ + j] = sum_[j * dim_ + i];
  tokens_ += activations.rows();
}

void CalibrationHessian::finalize(double damping)
{
  if (tokens_ == 0)
    throw ArgumentError("Hessian needs at least one calibration token");
  if (!(damping >= 0.0) || !std::isfinite(damping))
    throw ArgumentError("damping must be a finite non-negative number");
  damped_ = sum_;
  double mean_diag = 0.0;
  for (std::size_t i = 0; i < dim_; ++i)
  {
    // Channels that never fire carry no information; give them unit
    // curvature so they round to nearest.
    if (damped_[i * dim_ + i] == 0.0)
      damped_[i * dim_ + i] = 1.0;
    mean_diag += damped_[i * dim_ + i];
  }
  mean_diag /= static_cast<double>(dim_);
  for (std::size_t i = 0; i < dim_; ++i)
    damped_[i * dim_ + i] += damping * mean_diag;
  damping_ = damping;
  finalized_ = true;
}

const std::vector<double> &CalibrationHessian::matrix() const
{
  if (!finalized_)
    throw StateError("Hessian has not been finalized");
  return damped_;
}

CalibrationHessian CalibrationHessian::permuted(const ReorderPlan &plan) const
{
  if (plan.hidden_dim() != dim_)
    throw ShapeError("plan hidden dim " + std::to_string(plan.hidden_dim()) + " != Hessian dim " +
                     std::to_string(dim_));
  const auto &p = plan.permutation();
  CalibrationHessian out(dim_);
  out.tokens_ = tokens_;
  for (std::size_t i = 0; i < dim_; ++i)
    for (std::size_t j = 0; j < dim_; ++j)
      out.sum_[i * dim_ + j] = sum_[p[i] * dim_ + p[j]];
  if (finalized_)
    out.finalize(damping_);
  return out;
}

CalibrationHessian accumulate_hessian(std::span<const Matrix> activations, double damping)
{
  if (activations.empty())
    throw ArgumentError("Hessian needs at least one calibration matrix");
  CalibrationHessian h(activations.front().cols());
  for (const auto &m : activations)
    h.add(m);
  h.finalize(damping);
  return h;
}

namespace
{

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Upper Cholesky factor U of H^-1 (H^-1 = U^T U) for the leading n x n block.
RowMajor inverse_cholesky_upper(const CalibrationHessian &h, std::size_t n)
{
  const auto &full = h.matrix();
  RowMajor hm(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      hm(i, j) = full[i * h.dim() + j];
  Eigen::LLT<RowMajor> llt(hm);
  if (llt.info() != Eigen::Success)
    throw NumericalError("Cholesky of the calibration Hessian failed; increase damping (currently " +
                         std::to_string(h.damping()) + ")");
  const RowMajor inv = llt.solve(RowMajor::Identity(n, n));
  Eigen::LLT<RowMajor> inv_llt(inv);
  if (inv_llt.info() != Eigen::Success)
    throw NumericalError("Cholesky of the inverse Hessian failed; increase damping (currently " +
                         std::to_string(h.damping()) + ")");
  return inv_llt.matrixU();
}

// A contiguous run of input rows sharing one precision recipe.
struct Segment
{
  std::size_t begin = 0;
  std::size_t end = 0;
  int bits = 4;
  GroupScheme scheme;
  float clip = 1.0f;
  bool compensate = true;
};

struct SegmentResult
{
  IntMatrix codes;
  std::vector<QuantParams> params;
  Matrix values;
  std::size_t group = 0;
};

QuantizedTensor to_tensor(const Segment &s, SegmentResult &r, std::size_t cols)
{
  const std::size_t rows = s.end - s.begin;
  if (is_bypass(s.bits))
    return QuantizedTensor(rows, cols, s.bits, true, s.scheme, ChannelAxis::kRows, {}, std::move(r.params),
                           std::move(r.values));
  return QuantizedTensor(rows, cols, s.bits, true, s.scheme, ChannelAxis::kRows, pack(r.codes, s.bits, true),
                         std::move(r.params));
}

/**
 * Runs compensation over all rows of w covered by the segments. Output
 * columns never interact (their params are per column), so the columns are
 * processed independently.
 */
std::vector<QuantizedTensor> run_gptq(const Matrix &w, const RowMajor &u, const std::vector<Segment> &segments)
{
  const std::size_t cols = w.cols();
  std::vector<SegmentResult> results(segments.size());
  for (std::size_t s = 0; s < segments.size(); ++s)
  {
    const auto &seg = segments[s];
    const std::size_t rows = seg.end - seg.begin;
    auto &r = results[s];
    r.group = rows == 0 ? 0 : resolve_group_length(seg.scheme, rows, cols, ChannelAxis::kRows);
    r.codes = IntMatrix(rows, cols, 0);
    r.values = Matrix(rows, cols, 0.0f);
    const bool per_tensor = seg.scheme.granularity == Granularity::kPerTensor;
    const std::size_t groups = r.group == 0 ? 0 : rows / r.group;
    if (rows == 0)
      continue;
    if (is_bypass(seg.bits))
      r.params.assign(per_tensor ? 1 : cols * groups, QuantParams{1.0f, 0, kBypassBits, true});
    else if (per_tensor)
    {
      validate_clip(seg.clip);
      const Matrix block = slice_rows(w, seg.begin, seg.end);
      r.params.assign(1, symmetric_params(block.data(), seg.bits, seg.clip));
    }
    else
    {
      validate_clip(seg.clip);
      r.params.assign(cols * groups, QuantParams{});
    }
    if (!is_bypass(seg.bits) && !is_packable_bit_width(seg.bits))
      throw ArgumentError("GPTQ supports 3, 4, 8 or bypass(16) bits, got " + std::to_string(seg.bits));
  }

  // Compensation flows into every later row that takes part.
  std::size_t compensated_end = 0;
  for (const auto &seg : segments)
    if (seg.compensate)
      compensated_end = seg.end;

  const Matrix wt = transpose(w);
  parallel_for(cols, [&](std::size_t c) {
    std::vector<double> col(wt.row(c).begin(), wt.row(c).end());
    std::vector<float> buffer;
    for (std::size_t s = 0; s < segments.size(); ++s)
    {
      const auto &seg = segments[s];
      auto &r = results[s];
      const bool per_tensor = seg.scheme.granularity == Granularity::kPerTensor;
      const std::size_t groups = r.group == 0 ? 0 : (seg.end - seg.begin) / r.group;
      for (std::size_t k = seg.begin; k < seg.end; ++k)
      {
        const std::size_t local = k - seg.begin;
        float w_hat = 0.0f;
        if (is_bypass(seg.bits))
        {
          w_hat = static_cast<float>(col[k]);
          r.values(local, c) = w_hat;
        }
        else
        {
          const std::size_t g = local / r.group;
          QuantParams &p = per_tensor ? r.params.front() : r.params[c * groups + g];
          if (!per_tensor && local % r.group == 0)
          {
            buffer.resize(r.group);
            for (std::size_t i = 0; i < r.group; ++i)
              buffer[i] = static_cast<float>(col[k + i]);
            p = symmetric_params(buffer, seg.bits, seg.clip);
          }
          const std::int32_t q = quantize_value(static_cast<float>(col[k]), p);
          r.codes(local, c) = q;
          w_hat = dequantize_value(q, p);
        }
        if (!seg.compensate)
          continue;
        const double err = (col[k] - static_cast<double>(w_hat)) / u(k, k);
        if (err == 0.0)
          continue;
        for (std::size_t j = k + 1; j < compensated_end; ++j)
          col[j] -= err * u(k, j);
      }
    }
  });

  std::vector<QuantizedTensor> out;
  for (std::size_t s = 0; s < segments.size(); ++s)
    out.push_back(to_tensor(segments[s], results[s], cols));
  return out;
}

void check_inputs(const Matrix &w, const CalibrationHessian &h)
{
  if (w.rows() != h.dim())
    throw ShapeError("weight has " + std::to_string(w.rows()) + " input rows, Hessian dim is " +
                     std::to_string(h.dim()));
  if (!h.finalized())
    throw StateError("GPTQ needs a finalized Hessian");
}

} // namespace

QuantizedTensor gptq_quantize_weight(const Matrix &w, const CalibrationHessian &h, const GroupScheme &scheme,
                                     int bit_width, float clip)
{
  check_inputs(w, h);
  const RowMajor u = inverse_cholesky_upper(h, w.rows());
  return std::move(run_gptq(w, u, {Segment{0, w.rows(), bit_width, scheme, clip, true}}).front());
}

MixedQuantWeight gptq_quantize_weight_mixed(const Matrix &reordered_weight, const CalibrationHessian &reordered_h,
                                            std::size_t outlier_count, const MixedPrecisionSpec &spec,
                                            bool include_outliers)
{
  check_inputs(reordered_weight, reordered_h);
  if (outlier_count > reordered_weight.rows())
    throw ShapeError("outlier count exceeds weight input dim");
  const std::size_t split = reordered_weight.rows() - outlier_count;
  const GroupScheme outlier_scheme = outlier_block_scheme(spec.scheme, outlier_count);
  MixedQuantWeight out;
  if (include_outliers)
  {
    const RowMajor u = inverse_cholesky_upper(reordered_h, reordered_weight.rows());
    auto parts = run_gptq(reordered_weight, u,
                          {Segment{0, split, spec.normal_bits, spec.scheme, spec.clip, true},
                           Segment{split, reordered_weight.rows(), spec.outlier_bits, outlier_scheme,
                                   spec.outlier_clip, true}});
    out.normal = std::move(parts[0]);
    out.outlier = std::move(parts[1]);
    return out;
  }
  const Matrix normal = slice_rows(reordered_weight, 0, split);
  const RowMajor u = inverse_cholesky_upper(reordered_h, split);
  out.normal = std::move(run_gptq(normal, u, {Segment{0, split, spec.normal_bits, spec.scheme, spec.clip, true}}).front());
  out.outlier = quantize_matrix(slice_rows(reordered_weight, split, reordered_weight.rows()), outlier_scheme,
                                spec.outlier_bits, spec.outlier_clip, true, ChannelAxis::kRows);
  return out;
}

double proxy_loss(const Matrix &w, const Matrix &w_hat, const CalibrationHessian &h)
{
  if (w.rows() != h.dim() || w_hat.rows() != w.rows() || w_hat.cols() != w.cols())
    throw ShapeError("proxy loss operands disagree in shape");
  const std::size_t n = w.rows();
  double total = 0.0;
  std::vector<double> d(n);
  for (std::size_t c = 0; c < w.cols(); ++c)
  {
    for (std::size_t i = 0; i < n; ++i)
      d[i] = static_cast<double>(w(i, c)) - w_hat(i, c);
    for (std::size_t i = 0; i < n; ++i)
    {
      if (d[i] == 0.0)
        continue;
      double row = 0.0;
      for (std::size_t j = 0; j < n; ++j)
        row += h.raw(i, j) * d[j];
      total += d[i] * row;
    }
  }
  return total;
}

} // namespace atomforge
