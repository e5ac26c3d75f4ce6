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

#include "atomforge/quantizer.hpp"

namespace atomforge
{

/// Precision recipe for one side (activation or weight) of a mixed GEMM.
/// The normal block is the leading hidden_dim - k reordered channels; the
/// outlier block is the trailing k channels.
struct MixedPrecisionSpec
{
  int normal_bits = 4;
  int outlier_bits = 8;
  GroupScheme scheme = GroupScheme::per_group(128);
  float clip = 1.0f;         // applied to the normal block
  float outlier_clip = 1.0f; // applied to the outlier block
};

/// Group scheme used inside the outlier block: per-group size min(g, k), or
/// the normal-block scheme for per-line granularities.
GroupScheme outlier_block_scheme(const GroupScheme &normal, std::size_t outlier_count);

/// Activation (tokens x hidden) split into normal and outlier column blocks.
struct MixedQuantActivation
{
  QuantizedTensor normal;
  QuantizedTensor outlier;

  std::size_t rows() const { return normal.rows(); }
  std::size_t hidden_dim() const { return normal.cols() + outlier.cols(); }
};

/// Weight (hidden x out) split into normal and outlier row blocks, aligned
/// with the activation split by the same reorder plan.
struct MixedQuantWeight
{
  QuantizedTensor normal;
  QuantizedTensor outlier;

  std::size_t cols() const { return normal.cols(); }
  std::size_t hidden_dim() const { return normal.rows() + outlier.rows(); }
};

/// Dequantized activation in reordered channel order.
Matrix dequantize(const MixedQuantActivation &a);
/// Dequantized weight in reordered row order.
Matrix dequantize(const MixedQuantWeight &w);

} // namespace atomforge
