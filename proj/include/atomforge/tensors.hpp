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

#include "atomforge/errors.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace atomforge
{

/**
 * @brief Dense row-major 2-D array.
 *
 * Matrix (float) is the FP32 reference representation for activations and
 * weights; IntMatrix (int32) carries unpacked quantization codes.
 */
template <typename T> class BasicMatrix
{
public:
  using value_type = T;

  BasicMatrix() = default;

  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
    : rows_(rows), cols_(cols), data_(rows * cols, fill)
  {
  }

  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
    : rows_(rows), cols_(cols), data_(std::move(data))
  {
    if (data_.size() != rows_ * cols_)
    {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static BasicMatrix from_rows(std::initializer_list<std::initializer_list<T>> rows)
  {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto &row : rows)
    {
      if (row.size() != c)
        throw ShapeError("ragged initializer for matrix");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicMatrix(r, c, std::move(data));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T &operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T> &storage() const noexcept { return data_; }

  bool operator==(const BasicMatrix &) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using IntMatrix = BasicMatrix<std::int32_t>;

// Bitwise comparison; distinguishes -0.0f from 0.0f and compares NaN payloads.
bool bit_equal(const Matrix &a, const Matrix &b);

// Column slice [begin, end) of every row.
Matrix slice_cols(const Matrix &m, std::size_t begin, std::size_t end);
// Row slice [begin, end).
Matrix slice_rows(const Matrix &m, std::size_t begin, std::size_t end);
Matrix concat_cols(const Matrix &left, const Matrix &right);
Matrix concat_rows(const Matrix &top, const Matrix &bottom);
Matrix transpose(const Matrix &m);

/// Legal code interval for a packed bit width.
struct CodeRange
{
  std::int32_t lo;
  std::int32_t hi;
};

CodeRange code_range(int bit_width, bool is_signed);
bool is_packable_bit_width(int bit_width);

namespace bitpack
{

// Codes are written LSB-first into a contiguous bitstream: code j occupies
// bits [j*w, (j+1)*w). For w=4 this places the lower column in the low nibble.
std::size_t row_bytes(std::size_t cols, int bit_width);
void pack_row(std::span<const std::int32_t> codes, int bit_width, std::span<std::uint8_t> out);
void unpack_row(std::span<const std::uint8_t> in, int bit_width, bool is_signed,
                std::span<std::int32_t> codes);

} // namespace bitpack

/**
 * @brief Bit-packed integer codes, row-major, each row padded to a byte
 * boundary.
 *
 * Signed tensors hold two's-complement codes in [-2^(w-1), 2^(w-1)-1]
 * (symmetric quantization); unsigned ones hold [0, 2^w-1] (asymmetric).
 */
class PackedIntTensor
{
public:
  PackedIntTensor() = default;

  static PackedIntTensor from_payload(std::size_t rows, std::size_t cols, int bit_width,
                                      bool is_signed, std::vector<std::uint8_t> payload);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  int bit_width() const noexcept { return bit_width_; }
  bool is_signed() const noexcept { return is_signed_; }
  std::size_t row_stride() const noexcept { return row_stride_; }
  std::span<const std::uint8_t> payload() const noexcept { return payload_; }

  std::int32_t code(std::size_t r, std::size_t c) const;
  void unpack_row(std::size_t r, std::span<std::int32_t> out) const;

  bool operator==(const PackedIntTensor &) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  int bit_width_ = 8;
  bool is_signed_ = true;
  std::size_t row_stride_ = 0;
  std::vector<std::uint8_t> payload_;
};

PackedIntTensor pack(const IntMatrix &codes, int bit_width, bool is_signed = true);
IntMatrix unpack(const PackedIntTensor &t);

// TensorFile container: "ATOMTNSR", u16 version, u8 dtype, u64 rows, u64 cols,
// [u8 bit_width, u8 signed] for packed tensors, then the raw payload.
// Everything is little-endian.
namespace tensor_file
{

inline constexpr char kMagic[8] = {'A', 'T', 'O', 'M', 'T', 'N', 'S', 'R'};
inline constexpr std::uint16_t kVersion = 1;

enum class DType : std::uint8_t
{
  kFloat32 = 0,
  kPackedInt = 1,
};

using Tensor = std::variant<Matrix, PackedIntTensor>;

std::vector<std::uint8_t> encode(const Matrix &m);
std::vector<std::uint8_t> encode(const PackedIntTensor &t);
Tensor decode(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path &path, const Matrix &m);
void save(const std::filesystem::path &path, const PackedIntTensor &t);
Tensor load(const std::filesystem::path &path);
Matrix load_matrix(const std::filesystem::path &path);
PackedIntTensor load_packed(const std::filesystem::path &path);

} // namespace tensor_file

} // namespace atomforge
