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

#include <json.hpp>

#include <cstdint>
#include <vector>

namespace atomforge
{

struct GemmCheckCase
{
  std::size_t tokens = 0;
  std::size_t hidden = 0;
  std::size_t out = 0;
  std::size_t outliers = 0;
  std::size_t group = 0;
  int bits = 4;
  int outlier_bits = 8;
  double rel_error = 0.0;
};

struct GemmCheckReport
{
  double tolerance = 1e-4;
  std::vector<GemmCheckCase> cases;

  double max_error() const;
  std::size_t failures() const;
  nlohmann::json to_json() const;
};

/// Random (shape, bit width, outlier count, group size) configurations run
/// through reorder + quantize + group_gemm and compared against a double
/// matmul of the dequantized operands.
GemmCheckReport run_gemm_check(std::size_t trials, std::uint64_t seed, double tolerance = 1e-4);

} // namespace atomforge
