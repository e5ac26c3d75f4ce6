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

#include "atomforge/model.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace atomforge
{

// Parameters are flattened in the order embedding, then per layer
// attn_norm, w_qkv, w_o, ffn_norm, w_gate_up, w_down, then final_norm.
std::vector<double> flatten_parameters(const ToyModel &model);
void assign_parameters(ToyModel &model, std::span<const double> params);

/// Mean next-token cross-entropy of the FP model over one sequence, in
/// double precision. Fills `grad` (same layout as the parameters) if given.
double loss_and_gradient(const ModelConfig &config, std::span<const double> params,
                         std::span<const std::int32_t> tokens, std::vector<double> *grad);

struct TrainConfig
{
  std::size_t steps = 200;
  std::size_t seq_len = 32;
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 0;
};

/// Adam on random windows of `stream`; returns the loss of every step.
std::vector<double> train_on_stream(ToyModel &model, std::span<const std::int32_t> stream, const TrainConfig &config);

} // namespace atomforge
