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

#include <cstddef>
#include <functional>

namespace atomforge
{

// Worker count: the override if set, else ATOMFORGE_THREADS, else hardware
// concurrency. Always >= 1.
std::size_t thread_count();
void set_thread_count_override(std::size_t n); // 0 clears the override

// Runs fn(i) for i in [0, n) over contiguous chunks. Each index is handled
// by exactly one worker, so per-index results never depend on the worker count.
void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn);

class ScopedThreadCount
{
public:
  explicit ScopedThreadCount(std::size_t n) { set_thread_count_override(n); }
  ~ScopedThreadCount() { set_thread_count_override(0); }
  ScopedThreadCount(const ScopedThreadCount &) = delete;
  ScopedThreadCount &operator=(const ScopedThreadCount &) = delete;
};

} // namespace atomforge
