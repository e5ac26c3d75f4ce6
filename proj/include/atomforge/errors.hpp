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

#include <stdexcept>
#include <string>

namespace atomforge
{

// Every module reports failures through this hierarchy. The CLI maps the
// category onto an exit code and a structured error record.
class Error : public std::runtime_error
{
public:
  Error(std::string category, const std::string &what)
    : std::runtime_error(what), category_(std::move(category))
  {
  }

  const std::string &category() const noexcept { return category_; }

private:
  std::string category_;
};

class RangeError : public Error
{
public:
  explicit RangeError(const std::string &what) : Error("range", what) {}
};

class ShapeError : public Error
{
public:
  explicit ShapeError(const std::string &what) : Error("shape", what) {}
};

class ArgumentError : public Error
{
public:
  explicit ArgumentError(const std::string &what) : Error("argument", what) {}
};

class ConfigError : public Error
{
public:
  explicit ConfigError(const std::string &what) : Error("config", what) {}
};

class NumericalError : public Error
{
public:
  explicit NumericalError(const std::string &what) : Error("numerical", what) {}
};

class LookupError : public Error
{
public:
  explicit LookupError(const std::string &what) : Error("lookup", what) {}
};

class StateError : public Error
{
public:
  explicit StateError(const std::string &what) : Error("state", what) {}
};

class InfeasibleError : public Error
{
public:
  explicit InfeasibleError(const std::string &what) : Error("infeasible", what) {}
};

class IoError : public Error
{
public:
  explicit IoError(const std::string &what) : Error("io", what) {}
};

enum class ParseFailure
{
  kBadMagic,
  kUnsupportedVersion,
  kBadHeader,
  kTruncated,
  kShapeMismatch,
  kNonFinite,
  kMalformed,
};

class ParseError : public Error
{
public:
  ParseError(ParseFailure failure, const std::string &what) : Error("parse", what), failure_(failure)
  {
  }

  ParseFailure failure() const noexcept { return failure_; }

private:
  ParseFailure failure_;
};

} // namespace atomforge
