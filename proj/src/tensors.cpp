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

#include "atomforge/tensors.hpp"

#include <algorithm>
#include <bit>
#include <cstring>

namespace atomforge
{

bool bit_equal(const Matrix &a, const Matrix &b)
{
  if (a.rows() != b.rows() || a.cols() != b.cols())
    return false;
  return a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

Matrix slice_cols(const Matrix &m, std::size_t begin, std::size_t end)
{
  if (begin > end || end > m.cols())
    throw ShapeError("column slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of " + std::to_string(m.cols()));
  Matrix out(m.rows(), end - begin);
  for (std::size_t r = 0; r < m.rows(); ++r)
  {
    auto src = m.row(r).subspan(begin, end - begin);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return out;
}

Matrix slice_rows(const Matrix &m, std::size_t begin, std::size_t end)
{
  if (begin > end || end > m.rows())
    throw ShapeError("row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of " + std::to_string(m.rows()));
  std::vector<float> data(m.data().begin() + begin * m.cols(), m.data().begin() + end * m.cols());
  return Matrix(end - begin, m.cols(), std::move(data));
}

Matrix concat_cols(const Matrix &left, const Matrix &right)
{
  if (left.rows() != right.rows())
    throw ShapeError("concat_cols row mismatch");
  Matrix out(left.rows(), left.cols() + right.cols());
  for (std::size_t r = 0; r < left.rows(); ++r)
  {
    auto dst = out.row(r);
    std::copy(left.row(r).begin(), left.row(r).end(), dst.begin());
    std::copy(right.row(r).begin(), right.row(r).end(), dst.begin() + left.cols());
  }
  return out;
}

Matrix concat_rows(const Matrix &top, const Matrix &bottom)
{
  if (top.cols() != bottom.cols())
    throw ShapeError("concat_rows column mismatch");
  std::vector<float> data(top.data().begin(), top.data().end());
  data.insert(data.end(), bottom.data().begin(), bottom.data().end());
  return Matrix(top.rows() + bottom.rows(), top.cols(), std::move(data));
}

Matrix transpose(const Matrix &m)
{
  Matrix out(m.cols(), m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c)
      out(c, r) = m(r, c);
  return out;
}

bool is_packable_bit_width(int bit_width)
{
  return bit_width == 3 || bit_width == 4 || bit_width == 8;
}

CodeRange code_range(int bit_width, bool is_signed)
{
  if (bit_width < 1 || bit_width > 16)
    throw ArgumentError("bit width " + std::to_string(bit_width) + " out of [1,16]");
  if (is_signed)
    return {-(1 << (bit_width - 1)), (1 << (bit_width - 1)) - 1};
  return {0, (1 << bit_width) - 1};
}

namespace bitpack
{

std::size_t row_bytes(std::size_t cols, int bit_width)
{
  return (cols * static_cast<std::size_t>(bit_width) + 7) / 8;
}

void pack_row(std::span<const std::int32_t> codes, int bit_width, std::span<std::uint8_t> out)
{
  std::fill(out.begin(), out.end(), std::uint8_t{0});
  const std::uint32_t mask = (1u << bit_width) - 1u;
  std::size_t bit = 0;
  for (std::int32_t code : codes)
  {
    std::uint32_t v = static_cast<std::uint32_t>(code) & mask;
    for (int b = 0; b < bit_width; ++b, ++bit)
    {
      if (v & (1u << b))
        out[bit >> 3] |= static_cast<std::uint8_t>(1u << (bit & 7));
    }
  }
}

void unpack_row(std::span<const std::uint8_t> in, int bit_width, bool is_signed,
                std::span<std::int32_t> codes)
{
  std::size_t bit = 0;
  const std::uint32_t sign_bit = 1u << (bit_width - 1);
  for (auto &code : codes)
  {
    std::uint32_t v = 0;
    for (int b = 0; b < bit_width; ++b, ++bit)
    {
      if (in[bit >> 3] & (1u << (bit & 7)))
        v |= 1u << b;
    }
    if (is_signed && (v & sign_bit))
      code = static_cast<std::int32_t>(v) - static_cast<std::int32_t>(1u << bit_width);
    else
      code = static_cast<std::int32_t>(v);
  }
}

} // namespace bitpack

PackedIntTensor PackedIntTensor::from_payload(std::size_t rows, std::size_t cols, int bit_width,
                                              bool is_signed, std::vector<std::uint8_t> payload)
{
  if (!is_packable_bit_width(bit_width))
    throw ArgumentError("unsupported packed bit width " + std::to_string(bit_width));
  PackedIntTensor t;
  t.rows_ = rows;
  t.cols_ = cols;
  t.bit_width_ = bit_width;
  t.is_signed_ = is_signed;
  t.row_stride_ = bitpack::row_bytes(cols, bit_width);
  if (payload.size() != rows * t.row_stride_)
    throw ShapeError("packed payload " + std::to_string(payload.size()) + " bytes, expected " +
                     std::to_string(rows * t.row_stride_));
  t.payload_ = std::move(payload);
  return t;
}

std::int32_t PackedIntTensor::code(std::size_t r, std::size_t c) const
{
  std::int32_t v = 0;
  const std::size_t first_bit = c * static_cast<std::size_t>(bit_width_);
  const std::size_t first_byte = first_bit / 8;
  const std::size_t last_byte = (first_bit + bit_width_ - 1) / 8;
  std::uint8_t window[2] = {0, 0};
  for (std::size_t b = first_byte; b <= last_byte; ++b)
    window[b - first_byte] = payload_[r * row_stride_ + b];
  std::uint32_t raw = (static_cast<std::uint32_t>(window[1]) << 8) | window[0];
  raw = (raw >> (first_bit & 7)) & ((1u << bit_width_) - 1u);
  if (is_signed_ && (raw & (1u << (bit_width_ - 1))))
    v = static_cast<std::int32_t>(raw) - static_cast<std::int32_t>(1u << bit_width_);
  else
    v = static_cast<std::int32_t>(raw);
  return v;
}

void PackedIntTensor::unpack_row(std::size_t r, std::span<std::int32_t> out) const
{
  if (out.size() != cols_)
    throw ShapeError("unpack_row output length mismatch");
  bitpack::unpack_row(std::span(payload_).subspan(r * row_stride_, row_stride_), bit_width_,
                      is_signed_, out);
}

PackedIntTensor pack(const IntMatrix &codes, int bit_width, bool is_signed)
{
  if (!is_packable_bit_width(bit_width))
    throw ArgumentError("unsupported packed bit width " + std::to_string(bit_width));
  const CodeRange range = code_range(bit_width, is_signed);
  const std::size_t stride = bitpack::row_bytes(codes.cols(), bit_width);
  std::vector<std::uint8_t> payload(codes.rows() * stride);
  for (std::size_t r = 0; r < codes.rows(); ++r)
  {
    auto row = codes.row(r);
    for (std::size_t c = 0; c < row.size(); ++c)
    {
      if (row[c] < range.lo || row[c] > range.hi)
      {
        throw RangeError("code " + std::to_string(row[c]) + " at row " + std::to_string(r) +
                         ", col " + std::to_string(c) + " outside [" + std::to_string(range.lo) +
                         ", " + std::to_string(range.hi) + "] for " + std::to_string(bit_width) +
                         "-bit storage");
      }
    }
    bitpack::pack_row(row, bit_width, std::span(payload).subspan(r * stride, stride));
  }
  return PackedIntTensor::from_payload(codes.rows(), codes.cols(), bit_width, is_signed,
                                       std::move(payload));
}

IntMatrix unpack(const PackedIntTensor &t)
{
  IntMatrix out(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    t.unpack_row(r, out.row(r));
  return out;
}

} // namespace atomforge
