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

#include "atomforge/qgemm.hpp"
#include "atomforge/parallel.hpp"

#include <algorithm>
#include <cstdint>
#include <limits>

namespace atomforge
{

GroupScheme outlier_block_scheme(const GroupScheme &normal, std::size_t outlier_count)
{
  if (normal.granularity != Granularity::kPerGroup || outlier_count == 0)
    return normal;
  return GroupScheme::per_group(std::min(normal.group_size, outlier_count));
}

Matrix dequantize(const MixedQuantActivation &a)
{
  if (a.outlier.cols() == 0)
    return dequantize(a.normal);
  return concat_cols(dequantize(a.normal), dequantize(a.outlier));
}

Matrix dequantize(const MixedQuantWeight &w)
{
  if (w.outlier.rows() == 0)
    return dequantize(w.normal);
  return concat_rows(dequantize(w.normal), dequantize(w.outlier));
}

std::size_t max_exact_group_length(int activation_bits, int weight_bits)
{
  const std::int64_t qa = std::int64_t{1} << (activation_bits - 1);
  const std::int64_t qw = std::int64_t{1} << (weight_bits - 1);
  return static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max() / (qa * qw));
}

namespace
{

// One aligned block pair prepared for the inner loops: activation codes
// row-major (rows x k), weight codes transposed (cols x k) so that both
// operands of an inner product are contiguous.
struct BlockOperands
{
  std::size_t k = 0;
  std::size_t group = 0;
  bool float_path = false;
  std::vector<std::int8_t> a_codes;
  std::vector<std::int8_t> w_codes;
  std::vector<float> a_values;
  std::vector<float> w_values;
  std::vector<float> a_scales; // rows x groups
  std::vector<float> w_scales; // cols x groups
};

void check_operand(const QuantizedTensor &q, const char *what)
{
  if (!q.bypass() && !q.symmetric())
    throw ArgumentError(std::string(what) + " must be symmetrically quantized for the integer GEMM");
}

BlockOperands prepare(const QuantizedTensor &a, const QuantizedTensor &w, const char *block)
{
  if (a.cols() != w.rows())
    throw ShapeError(std::string(block) + " block split mismatch: activation has " + std::to_string(a.cols()) +
                     " channels, weight has " + std::to_string(w.rows()));
  BlockOperands op;
  op.k = a.cols();
  if (op.k == 0)
    return op;
  if (a.axis() != ChannelAxis::kCols || w.axis() != ChannelAxis::kRows)
    throw ShapeError(std::string(block) + " block has wrong group axis");
  if (a.group_length() != w.group_length())
    throw ShapeError(std::string(block) + " block group boundaries misaligned: activation groups of " +
                     std::to_string(a.group_length()) + ", weight groups of " + std::to_string(w.group_length()));
  check_operand(a, "activation");
  check_operand(w, "weight");
  op.group = a.group_length();
  const std::size_t groups = op.k / op.group;
  const std::size_t rows = a.rows();
  const std::size_t cols = w.cols();

  op.float_path = a.bypass() || w.bypass();
  if (op.float_path)
  {
    const Matrix ad = dequantize(a);
    const Matrix wd = transpose(dequantize(w));
    op.a_values.assign(ad.data().begin(), ad.data().end());
    op.w_values.assign(wd.data().begin(), wd.data().end());
    return op;
  }

  if (op.group > max_exact_group_length(a.bit_width(), w.bit_width()))
    throw ShapeError("group length " + std::to_string(op.group) + " overflows the int32 accumulator");

  op.a_codes.resize(rows * op.k);
  std::vector<std::int32_t> line(op.k);
  for (std::size_t r = 0; r < rows; ++r)
  {
    a.codes().unpack_row(r, line);
    std::copy(line.begin(), line.end(), op.a_codes.begin() + r * op.k);
  }
  op.w_codes.resize(cols * op.k);
  std::vector<std::int32_t> wrow(cols);
  for (std::size_t kk = 0; kk < op.k; ++kk)
  {
    w.codes().unpack_row(kk, wrow);
    for (std::size_t c = 0; c < cols; ++c)
      op.w_codes[c * op.k + kk] = static_cast<std::int8_t>(wrow[c]);
  }
  op.a_scales.resize(rows * groups);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < groups; ++g)
      op.a_scales[r * groups + g] = a.params_at(r, g * op.group).scale;
  op.w_scales.resize(cols * groups);
  for (std::size_t c = 0; c < cols; ++c)
    for (std::size_t g = 0; g < groups; ++g)
      op.w_scales[c * groups + g] = w.params_at(g * op.group, c).scale;
  return op;
}

void accumulate_row(const BlockOperands &op, std::size_t r, std::span<float> out)
{
  if (op.k == 0)
    return;
  const std::size_t groups = op.k / op.group;
  const std::size_t cols = out.size();
  if (op.float_path)
  {
    const float *arow = op.a_values.data() + r * op.k;
    for (std::size_t c = 0; c < cols; ++c)
    {
      const float *wcol = op.w_values.data() + c * op.k;
      float acc = out[c];
      for (std::size_t g = 0; g < groups; ++g)
      {
        float partial = 0.0f;
        for (std::size_t j = g * op.group; j < (g + 1) * op.group; ++j)
          partial += arow[j] * wcol[j];
        acc += partial;
      }
      out[c] = acc;
    }
    return;
  }
  const std::int8_t *arow = op.a_codes.data() + r * op.k;
  const float *ascale = op.a_scales.data() + r * groups;
  for (std::size_t c = 0; c < cols; ++c)
  {
    const std::int8_t *wcol = op.w_codes.data() + c * op.k;
    const float *wscale = op.w_scales.data() + c * groups;
    float acc = out[c];
    for (std::size_t g = 0; g < groups; ++g)
    {
      std::int32_t isum = 0;
      const std::size_t begin = g * op.group;
      for (std::size_t j = begin; j < begin + op.group; ++j)
        isum += static_cast<std::int32_t>(arow[j]) * static_cast<std::int32_t>(wcol[j]);
      acc += (ascale[g] * wscale[g]) * static_cast<float>(isum);
    }
    out[c] = acc;
  }
}

} // namespace

Matrix group_gemm(const MixedQuantActivation &a, const MixedQuantWeight &w)
{
  if (a.normal.cols() + a.outlier.cols() != w.normal.rows() + w.outlier.rows())
    throw ShapeError("group_gemm hidden dims differ: " + std::to_string(a.hidden_dim()) + " vs " +
                     std::to_string(w.hidden_dim()));
  if (a.outlier.cols() != 0 && a.outlier.rows() != a.normal.rows())
    throw ShapeError("activation blocks have different token counts");
  if (w.outlier.rows() != 0 && w.outlier.cols() != w.normal.cols())
    throw ShapeError("weight blocks have different output widths");

  const BlockOperands normal = prepare(a.normal, w.normal, "normal");
  const BlockOperands outlier = prepare(a.outlier, w.outlier, "outlier");

  Matrix out(a.rows(), w.cols(), 0.0f);
  parallel_for(a.rows(), [&](std::size_t r) {
    accumulate_row(normal, r, out.row(r));
    accumulate_row(outlier, r, out.row(r));
  });
  return out;
}

Matrix fp_oracle_gemm(const Matrix &a, const Matrix &w)
{
  if (a.cols() != w.rows())
    throw ShapeError("matmul inner dims differ: " + std::to_string(a.cols()) + " vs " + std::to_string(w.rows()));
  const Matrix wt = transpose(w);
  Matrix out(a.rows(), w.cols());
  parallel_for(a.rows(), [&](std::size_t i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < w.cols(); ++j)
    {
      auto wcol = wt.row(j);
      float acc = 0.0f;
      for (std::size_t k = 0; k < arow.size(); ++k)
        acc += arow[k] * wcol[k];
      out(i, j) = acc;
    }
  });
  return out;
}

MixedQuantWeight quantize_weight_mixed(const Matrix &reordered_weight, std::size_t outlier_count,
                                       const MixedPrecisionSpec &spec)
{
  if (outlier_count > reordered_weight.rows())
    throw ShapeError("outlier count exceeds weight input dim");
  const std::size_t split = reordered_weight.rows() - outlier_count;
  MixedQuantWeight out;
  out.normal = quantize_matrix(slice_rows(reordered_weight, 0, split), spec.scheme, spec.normal_bits, spec.clip, true,
                               ChannelAxis::kRows);
  out.outlier = quantize_matrix(slice_rows(reordered_weight, split, reordered_weight.rows()),
                                outlier_block_scheme(spec.scheme, outlier_count), spec.outlier_bits,
                                spec.outlier_clip, true, ChannelAxis::kRows);
  return out;
}

Matrix quantized_linear(const Matrix &x, const QuantizedLinearLayer &layer)
{
  if (x.cols() != layer.plan.hidden_dim())
    throw ShapeError("linear input has " + std::to_string(x.cols()) + " channels, layer expects " +
                     std::to_string(layer.plan.hidden_dim()));
  return group_gemm(fused_reorder_quantize(x, layer.plan, layer.activation), layer.weight);
}

} // namespace atomforge
