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

namespace atomforge
{

/**
 * @brief Fused mixed-precision group GEMM.
 *
 * For every output element and every channel group G (normal block first,
 * then outlier block, groups in ascending channel order):
 *
 *   acc += (s_a(G) * s_w(G)) * sum_{j in G} q_a[j] * q_w[j]
 *
 * The inner sum is exact int32 arithmetic; acc is an FP32 sum over groups.
 * Blocks stored in bypass precision contribute an FP32 dot product per group
 * instead. Both operands must be symmetric and share group boundaries.
 */
Matrix group_gemm(const MixedQuantActivation &a, const MixedQuantWeight &w);

/// Plain FP32 matmul, k-inner summation order.
Matrix fp_oracle_gemm(const Matrix &a, const Matrix &w);

/// Largest group length whose int32 inner product cannot overflow.
std::size_t max_exact_group_length(int activation_bits, int weight_bits);

/// Static (RTN) quantization of an already reordered weight into the
/// normal/outlier row blocks.
MixedQuantWeight quantize_weight_mixed(const Matrix &reordered_weight, std::size_t outlier_count,
                                       const MixedPrecisionSpec &spec);

struct QuantizedLinearLayer
{
  ReorderPlan plan;
  MixedQuantWeight weight;
  MixedPrecisionSpec activation;
};

/// Reorder + dynamic quantize x, then group GEMM against the stored weight.
Matrix quantized_linear(const Matrix &x, const QuantizedLinearLayer &layer);

} // namespace atomforge
