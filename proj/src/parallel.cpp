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

#include "atomforge/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace atomforge
{

namespace
{

std::atomic<std::size_t> g_override{0};

std::size_t env_threads()
{
  const char *env = std::getenv("ATOMFORGE_THREADS");
  if (env == nullptr)
    return 0;
  try
  {
    const long v = std::stol(env);
    return v > 0 ? static_cast<std::size_t>(v) : 0;
  }
  catch (const std::exception &)
  {
    return 0;
  }
}

} // namespace

std::size_t thread_count()
{
  if (const std::size_t o = g_override.load(); o != 0)
    return o;
  if (const std::size_t e = env_threads(); e != 0)
    return e;
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void set_thread_count_override(std::size_t n) { g_override.store(n); }

void parallel_for(std::size_t n, const std::function<void(std::size_t)> &fn)
{
  const std::size_t workers = std::min(thread_count(), n);
  if (workers <= 1)
  {
    for (std::size_t i = 0; i < n; ++i)
      fn(i);
    return;
  }

  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w)
  {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&, begin, end] {
      try
      {
        for (std::size_t i = begin; i < end; ++i)
          fn(i);
      }
      catch (...)
      {
        std::lock_guard lock(failure_mutex);
        if (!failure)
          failure = std::current_exception();
      }
    });
  }
  for (auto &t : pool)
    t.join();
  if (failure)
    std::rethrow_exception(failure);
}

} // namespace atomforge
