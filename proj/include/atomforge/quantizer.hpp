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

#include "atomforge/tensors.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace atomforge
{

// A bit width of 16 means "bypass": values are carried through unquantized
// with unit scale. Used for FP-kept outliers and for plumbing tests.
inline constexpr int kBypassBits = 16;

inline bool is_bypass(int bit_width) { return bit_width == kBypassBits; }

struct QuantParams
{
  float scale = 1.0f;
  std::int32_t zero_point = 0;
  int bit_width = 8;
  bool symmetric = true;

  bool operator==(const QuantParams &) const = default;
};

// Throws ArgumentError when scale <= 0, symmetric with z != 0, or z outside
// [0, 2^n - 1] for asymmetric params.
void validate(const QuantParams &p);

enum class Granularity
{
  kPerTensor,
  kPerChannel,
  kPerToken,
  kPerGroup,
};

std::string to_string(Granularity g);
Granularity granularity_from_string(const std::string &s);

struct GroupScheme
{
  Granularity granularity = Granularity::kPerGroup;
  // Channel-contiguous elements per group; only meaningful for kPerGroup.
  std::size_t group_size = 128;

  static GroupScheme per_tensor() { return {Granularity::kPerTensor, 0}; }
  static GroupScheme per_channel() { return {Granularity::kPerChannel, 0}; }
  static GroupScheme per_token() { return {Granularity::kPerToken, 0}; }
  static GroupScheme per_group(std::size_t g) { return {Granularity::kPerGroup, g}; }

  bool operator==(const GroupScheme &) const = default;
};

/// Direction along which quantization groups are laid out.
///
/// kCols: groups are contiguous runs of columns within each row. This is the
/// activation layout (tokens x channels), where per-token means one group per
/// row. kRows: groups are contiguous runs of rows within each column. This is
/// the weight layout (in_channels x out_channels), where per-channel means one
/// group per output column.
enum class ChannelAxis
{
  kCols,
  kRows,
};

struct ClipConfig
{
  float activation = 0.9f;
  float weight = 0.85f;
};

void validate_clip(float c);

QuantParams symmetric_params(std::span<const float> values, int bit_width, float clip = 1.0f);
QuantParams asymmetric_params(std::span<const float> values, int bit_width, float clip = 1.0f);

std::int32_t quantize_value(float x, const QuantParams &p);
float dequantize_value(std::int32_t q, const QuantParams &p);

std::vector<std::int32_t> quantize(std::span<const float> values, const QuantParams &p);
std::vector<float> dequantize(std::span<const std::int32_t> codes, const QuantParams &p);

/**
 * @brief Group-quantized matrix: packed codes plus one QuantParams per group.
 *
 * Params are stored line-major: a "line" is a row for ChannelAxis::kCols and a
 * column for ChannelAxis::kRows, and each line holds groups_per_line() groups.
 * A per-tensor scheme holds exactly one QuantParams.
 */
class QuantizedTensor
{
public:
  QuantizedTensor() = default;
  QuantizedTensor(std::size_t rows, std::size_t cols, int bit_width, bool symmetric,
                  GroupScheme scheme, ChannelAxis axis, PackedIntTensor codes,
                  std::vector<QuantParams> params, Matrix passthrough = {});

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  int bit_width() const noexcept { return bit_width_; }
  bool symmetric() const noexcept { return symmetric_; }
  bool bypass() const noexcept { return is_bypass(bit_width_); }
  bool empty() const noexcept { return rows_ == 0 || cols_ == 0; }
  const GroupScheme &scheme() const noexcept { return scheme_; }
  ChannelAxis axis() const noexcept { return axis_; }

  std::size_t lines() const noexcept;
  std::size_t line_length() const noexcept;
  // Elements per group along the channel axis (line length for per-line schemes).
  std::size_t group_length() const noexcept { return group_length_; }
  std::size_t groups_per_line() const noexcept;
  std::size_t group_count() const noexcept { return params_.size(); }

  const PackedIntTensor &codes() const noexcept { return codes_; }
  const std::vector<QuantParams> &params() const noexcept { return params_; }
  const Matrix &passthrough() const noexcept { return passthrough_; }

  const QuantParams &params_at(std::size_t r, std::size_t c) const;

  /// Copy with every scale multiplied by alpha.
  QuantizedTensor scaled(float alpha) const;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  int bit_width_ = 8;
  bool symmetric_ = true;
  GroupScheme scheme_;
  ChannelAxis axis_ = ChannelAxis::kCols;
  std::size_t group_length_ = 0;
  PackedIntTensor codes_;
  std::vector<QuantParams> params_;
  Matrix passthrough_;
};

/// Number of elements per group along the axis, validating divisibility.
std::size_t resolve_group_length(const GroupScheme &scheme, std::size_t rows, std::size_t cols,
                                 ChannelAxis axis);

QuantizedTensor quantize_matrix(const Matrix &m, const GroupScheme &scheme, int bit_width, float clip,
                                bool symmetric, ChannelAxis axis);
Matrix dequantize(const QuantizedTensor &q);

/// Mean squared error of quantize-then-dequantize.
double quantization_mse(const Matrix &m, const GroupScheme &scheme, int bit_width, float clip,
                        bool symmetric, ChannelAxis axis);

/// {0.70, 0.75, ..., 1.00}.
std::vector<float> default_clip_grid();

/// Clip factor minimizing pooled dequantization MSE over the calibration set.
/// Ties go to the larger factor.
float grid_search_clip(std::span<const Matrix> calibration, int bit_width, const GroupScheme &scheme,
                       std::span<const float> grid, ChannelAxis axis = ChannelAxis::kCols,
                       bool symmetric = true);

/// Average stored bits per element including per-group scales.
double effective_bits(std::size_t channels, std::size_t outliers, int normal_bits, int outlier_bits,
                      std::size_t group_size, int scale_bits = 16);

} // namespace atomforge
