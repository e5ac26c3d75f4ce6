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

#include "atomforge/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace atomforge
{

namespace
{

constexpr float kMinScale = std::numeric_limits<float>::min();

void check_scalar_bits(int bit_width)
{
  if (bit_width < 2 || bit_width > 16)
    throw ArgumentError("quantization bit width " + std::to_string(bit_width) + " out of [2,16]");
}

void check_values(std::span<const float> values)
{
  if (values.empty())
    throw ArgumentError("cannot derive quantization params from an empty slice");
}

float levels(int bit_width) { return static_cast<float>((1u << bit_width) - 1u); }

} // namespace

void validate(const QuantParams &p)
{
  if (!(p.scale > 0.0f) || !std::isfinite(p.scale))
    throw ArgumentError("quantization scale must be positive and finite");
  if (p.symmetric && p.zero_point != 0)
    throw ArgumentError("symmetric params must have zero_point 0");
  if (!p.symmetric && (p.zero_point < 0 || p.zero_point > (1 << p.bit_width) - 1))
    throw ArgumentError("zero point " + std::to_string(p.zero_point) + " outside [0, 2^n-1]");
}

std::string to_string(Granularity g)
{
  switch (g)
  {
    case Granularity::kPerTensor:
      return "per-tensor";
    case Granularity::kPerChannel:
      return "per-channel";
    case Granularity::kPerToken:
      return "per-token";
    case Granularity::kPerGroup:
      return "per-group";
  }
  return "unknown";
}

Granularity granularity_from_string(const std::string &s)
{
  if (s == "per-tensor")
    return Granularity::kPerTensor;
  if (s == "per-channel")
    return Granularity::kPerChannel;
  if (s == "per-token")
    return Granularity::kPerToken;
  if (s == "per-group")
    return Granularity::kPerGroup;
  throw ArgumentError("unknown granularity '" + s + "'");
}

void validate_clip(float c)
{
  if (!(c > 0.0f && c <= 1.0f))
    throw ArgumentError("clip factor " + std::to_string(c) + " outside (0, 1]");
}

QuantParams symmetric_params(std::span<const float> values, int bit_width, float clip)
{
  check_values(values);
  check_scalar_bits(bit_width);
  validate_clip(clip);
  float amax = 0.0f;
  for (float v : values)
    amax = std::max(amax, std::fabs(v));
  float scale = 2.0f * amax / levels(bit_width) * clip;
  if (!(scale >= kMinScale))
    scale = kMinScale;
  return {scale, 0, bit_width, true};
}

QuantParams asymmetric_params(std::span<const float> values, int bit_width, float clip)
{
  check_values(values);
  check_scalar_bits(bit_width);
  validate_clip(clip);
  auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  float scale = (*hi - *lo) * clip / levels(bit_width);
  if (!(scale >= kMinScale))
    scale = kMinScale;
  float z = std::nearbyint(-*lo / scale);
  z = std::clamp(z, 0.0f, levels(bit_width));
  return {scale, static_cast<std::int32_t>(z), bit_width, false};
}

std::int32_t quantize_value(float x, const QuantParams &p)
{
  float q = std::nearbyint(x / p.scale);
  if (p.symmetric)
  {
    const float lo = -static_cast<float>(1 << (p.bit_width - 1));
    const float hi = static_cast<float>((1 << (p.bit_width - 1)) - 1);
    return static_cast<std::int32_t>(std::clamp(q, lo, hi));
  }
  // Degenerate (all-equal) group: every element maps onto the zero point.
  if (p.scale == kMinScale)
    return p.zero_point;
  q += static_cast<float>(p.zero_point);
  return static_cast<std::int32_t>(std::clamp(q, 0.0f, levels(p.bit_width)));
}

float dequantize_value(std::int32_t q, const QuantParams &p)
{
  return p.scale * static_cast<float>(q - p.zero_point);
}

std::vector<std::int32_t> quantize(std::span<const float> values, const QuantParams &p)
{
  std::vector<std::int32_t> out(values.size());
  std::transform(values.begin(), values.end(), out.begin(), [&](float x) { return quantize_value(x, p); });
  return out;
}

std::vector<float> dequantize(std::span<const std::int32_t> codes, const QuantParams &p)
{
  std::vector<float> out(codes.size());
  std::transform(codes.begin(), codes.end(), out.begin(), [&](std::int32_t q) { return dequantize_value(q, p); });
  return out;
}

QuantizedTensor::QuantizedTensor(std::size_t rows, std::size_t cols, int bit_width, bool symmetric,
                                 GroupScheme scheme, ChannelAxis axis, PackedIntTensor codes,
                                 std::vector<QuantParams> params, Matrix passthrough)
  : rows_(rows), cols_(cols), bit_width_(bit_width), symmetric_(symmetric), scheme_(scheme), axis_(axis),
    codes_(std::move(codes)), params_(std::move(params)), passthrough_(std::move(passthrough))
{
  group_length_ = resolve_group_length(scheme_, rows_, cols_, axis_);
  std::size_t expected = 0;
  if (rows_ != 0 && cols_ != 0)
    expected = scheme_.granularity == Granularity::kPerTensor ? 1 : lines() * groups_per_line();
  if (params_.size() != expected)
    throw ShapeError("quantized tensor has " + std::to_string(params_.size()) + " params, scheme implies " +
                     std::to_string(expected));
  if (bypass())
  {
    if (passthrough_.rows() != rows_ || passthrough_.cols() != cols_)
      throw ShapeError("bypass tensor passthrough shape mismatch");
  }
  else if (rows_ != 0 && cols_ != 0)
  {
    if (codes_.rows() != rows_ || codes_.cols() != cols_ || codes_.bit_width() != bit_width_)
      throw ShapeError("quantized tensor codes shape mismatch");
  }
}

std::size_t QuantizedTensor::lines() const noexcept { return axis_ == ChannelAxis::kCols ? rows_ : cols_; }

std::size_t QuantizedTensor::line_length() const noexcept
{
  return axis_ == ChannelAxis::kCols ? cols_ : rows_;
}

std::size_t QuantizedTensor::groups_per_line() const noexcept
{
  return group_length_ == 0 ? 0 : line_length() / group_length_;
}

const QuantParams &QuantizedTensor::params_at(std::size_t r, std::size_t c) const
{
  if (scheme_.granularity == Granularity::kPerTensor)
    return params_.front();
  const std::size_t line = axis_ == ChannelAxis::kCols ? r : c;
  const std::size_t pos = axis_ == ChannelAxis::kCols ? c : r;
  return params_[line * groups_per_line() + pos / group_length_];
}

QuantizedTensor QuantizedTensor::scaled(float alpha) const
{
  QuantizedTensor out = *this;
  for (auto &p : out.params_)
    p.scale *= alpha;
  if (bypass())
    for (auto &v : out.passthrough_.data())
      v *= alpha;
  return out;
}

std::size_t resolve_group_length(const GroupScheme &scheme, std::size_t rows, std::size_t cols, ChannelAxis axis)
{
  const std::size_t line_length = axis == ChannelAxis::kCols ? cols : rows;
  switch (scheme.granularity)
  {
    case Granularity::kPerTensor:
    case Granularity::kPerChannel:
    case Granularity::kPerToken:
      return line_length;
    case Granularity::kPerGroup:
      if (scheme.group_size == 0)
        throw ArgumentError("group size must be positive");
      if (line_length % scheme.group_size != 0)
        throw ShapeError("group size " + std::to_string(scheme.group_size) + " does not divide channel count " +
                         std::to_string(line_length));
      return scheme.group_size;
  }
  return line_length;
}

QuantizedTensor quantize_matrix(const Matrix &m, const GroupScheme &scheme, int bit_width, float clip,
                                bool symmetric, ChannelAxis axis)
{
  const std::size_t group_length = resolve_group_length(scheme, m.rows(), m.cols(), axis);
  validate_clip(clip);
  if (m.empty())
    return QuantizedTensor(m.rows(), m.cols(), bit_width, symmetric, scheme, axis, {}, {},
                           is_bypass(bit_width) ? m : Matrix{});

  const bool by_cols = axis == ChannelAxis::kCols;
  const std::size_t lines = by_cols ? m.rows() : m.cols();
  const std::size_t line_length = by_cols ? m.cols() : m.rows();
  const std::size_t groups_per_line = line_length / group_length;
  const bool per_tensor = scheme.granularity == Granularity::kPerTensor;

  if (is_bypass(bit_width))
  {
    std::vector<QuantParams> params(per_tensor ? 1 : lines * groups_per_line,
                                    QuantParams{1.0f, 0, kBypassBits, true});
    return QuantizedTensor(m.rows(), m.cols(), bit_width, true, scheme, axis, {}, std::move(params), m);
  }
  if (!is_packable_bit_width(bit_width))
    throw ArgumentError("matrix quantization supports 3, 4, 8 or bypass(16) bits, got " + std::to_string(bit_width));

  auto derive = [&](std::span<const float> values) {
    return symmetric ? symmetric_params(values, bit_width, clip) : asymmetric_params(values, bit_width, clip);
  };

  std::vector<QuantParams> params;
  if (per_tensor)
    params.push_back(derive(m.data()));
  else
    params.reserve(lines * groups_per_line);

  IntMatrix codes(m.rows(), m.cols());
  std::vector<float> buffer(group_length);
  for (std::size_t line = 0; line < lines; ++line)
  {
    for (std::size_t g = 0; g < groups_per_line; ++g)
    {
      const std::size_t begin = g * group_length;
      for (std::size_t i = 0; i < group_length; ++i)
        buffer[i] = by_cols ? m(line, begin + i) : m(begin + i, line);
      if (!per_tensor)
        params.push_back(derive(buffer));
      const QuantParams &p = per_tensor ? params.front() : params.back();
      for (std::size_t i = 0; i < group_length; ++i)
      {
        const std::int32_t q = quantize_value(buffer[i], p);
        if (by_cols)
          codes(line, begin + i) = q;
        else
          codes(begin + i, line) = q;
      }
    }
  }
  return QuantizedTensor(m.rows(), m.cols(), bit_width, symmetric, scheme, axis,
                         pack(codes, bit_width, symmetric), std::move(params));
}

Matrix dequantize(const QuantizedTensor &q)
{
  if (q.bypass())
    return q.passthrough();
  Matrix out(q.rows(), q.cols());
  std::vector<std::int32_t> row(q.cols());
  for (std::size_t r = 0; r < q.rows(); ++r)
  {
    q.codes().unpack_row(r, row);
    for (std::size_t c = 0; c < q.cols(); ++c)
      out(r, c) = dequantize_value(row[c], q.params_at(r, c));
  }
  return out;
}

double quantization_mse(const Matrix &m, const GroupScheme &scheme, int bit_width, float clip, bool symmetric,
                        ChannelAxis axis)
{
  if (m.empty())
    return 0.0;
  const Matrix dq = dequantize(quantize_matrix(m, scheme, bit_width, clip, symmetric, axis));
  double acc = 0.0;
  for (std::size_t i = 0; i < m.size(); ++i)
  {
    const double d = static_cast<double>(m.data()[i]) - dq.data()[i];
    acc += d * d;
  }
  return acc / static_cast<double>(m.size());
}

std::vector<float> default_clip_grid()
{
  std::vector<float> grid;
  for (int i = 70; i <= 100; i += 5)
    grid.push_back(static_cast<float>(i) / 100.0f);
  return grid;
}

float grid_search_clip(std::span<const Matrix> calibration, int bit_width, const GroupScheme &scheme,
                       std::span<const float> grid, ChannelAxis axis, bool symmetric)
{
  if (grid.empty())
    throw ArgumentError("clip grid is empty");
  if (calibration.empty())
    throw ArgumentError("clip search needs at least one calibration matrix");
  for (float c : grid)
    validate_clip(c);

  float best_clip = grid.front();
  double best_err = std::numeric_limits<double>::infinity();
  for (float c : grid)
  {
    double sq = 0.0;
    std::size_t count = 0;
    for (const auto &m : calibration)
    {
      sq += quantization_mse(m, scheme, bit_width, c, symmetric, axis) * static_cast<double>(m.size());
      count += m.size();
    }
    const double err = count == 0 ? 0.0 : sq / static_cast<double>(count);
    if (err < best_err || (err == best_err && c > best_clip))
    {
      best_err = err;
      best_clip = c;
    }
  }
  return best_clip;
}

double effective_bits(std::size_t channels, std::size_t outliers, int normal_bits, int outlier_bits,
                      std::size_t group_size, int scale_bits)
{
  if (channels == 0 || outliers > channels)
    throw ArgumentError("effective_bits needs 0 <= outliers <= channels and channels > 0");
  if (group_size == 0)
    throw ArgumentError("effective_bits needs a positive group size");
  const double payload = (static_cast<double>(channels - outliers) * normal_bits +
                          static_cast<double>(outliers) * outlier_bits) /
                         static_cast<double>(channels);
  return payload + static_cast<double>(scale_bits) / static_cast<double>(group_size);
}

} // namespace atomforge
