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

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace atomforge::tensor_file
{

namespace
{

class Writer
{
public:
  void bytes(const void *p, std::size_t n)
  {
    auto b = static_cast<const std::uint8_t *>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v)
  {
    u8(static_cast<std::uint8_t>(v & 0xff));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v)
  {
    for (int i = 0; i < 4; ++i)
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v)
  {
    for (int i = 0; i < 8; ++i)
      u8(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

private:
  std::vector<std::uint8_t> out_;
};

class Reader
{
public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char *what) const
  {
    if (pos_ + n > in_.size())
      throw ParseError(ParseFailure::kTruncated, std::string("tensor file truncated while reading ") + what);
  }
  std::uint8_t u8(const char *what)
  {
    need(1, what);
    return in_[pos_++];
  }
  std::uint16_t u16(const char *what)
  {
    need(2, what);
    std::uint16_t v = static_cast<std::uint16_t>(in_[pos_] | (in_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(const char *what)
  {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char *what)
  {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char *what)
  {
    need(n, what);
    auto s = in_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void header(Writer &w, DType dtype, std::size_t rows, std::size_t cols)
{
  w.bytes(kMagic, sizeof(kMagic));
  w.u16(kVersion);
  w.u8(static_cast<std::uint8_t>(dtype));
  w.u64(rows);
  w.u64(cols);
}

void expect_payload(const Reader &r, std::uint64_t expected)
{
  if (r.remaining() < expected)
    throw ParseError(ParseFailure::kTruncated, "tensor payload truncated: " + std::to_string(r.remaining()) +
                                                   " of " + std::to_string(expected) + " bytes");
  if (r.remaining() > expected)
    throw ParseError(ParseFailure::kShapeMismatch, "tensor payload has " + std::to_string(r.remaining()) +
                                                       " bytes but shape implies " + std::to_string(expected));
}

} // namespace

std::vector<std::uint8_t> encode(const Matrix &m)
{
  Writer w;
  header(w, DType::kFloat32, m.rows(), m.cols());
  for (float v : m.data())
    w.u32(std::bit_cast<std::uint32_t>(v));
  return w.take();
}

std::vector<std::uint8_t> encode(const PackedIntTensor &t)
{
  Writer w;
  header(w, DType::kPackedInt, t.rows(), t.cols());
  w.u8(static_cast<std::uint8_t>(t.bit_width()));
  w.u8(t.is_signed() ? 1 : 0);
  w.bytes(t.payload().data(), t.payload().size());
  return w.take();
}

Tensor decode(std::span<const std::uint8_t> bytes)
{
  Reader r(bytes);
  auto magic = r.take(sizeof(kMagic), "magic");
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
    throw ParseError(ParseFailure::kBadMagic, "not a tensor file (bad magic)");
  const auto version = r.u16("version");
  if (version != kVersion)
    throw ParseError(ParseFailure::kUnsupportedVersion, "unsupported tensor file version " + std::to_string(version));
  const auto dtype = r.u8("dtype");
  const auto rows = r.u64("rows");
  const auto cols = r.u64("cols");
  // Guard against absurd headers before multiplying.
  if (rows > (1ull << 32) || cols > (1ull << 32))
    throw ParseError(ParseFailure::kBadHeader, "tensor shape too large");

  if (dtype == static_cast<std::uint8_t>(DType::kFloat32))
  {
    const std::uint64_t n = rows * cols;
    expect_payload(r, n * 4);
    std::vector<float> data(n);
    for (auto &v : data)
    {
      v = std::bit_cast<float>(r.u32("payload"));
      if (!std::isfinite(v))
        throw ParseError(ParseFailure::kNonFinite, "tensor file contains a non-finite value");
    }
    return Matrix(rows, cols, std::move(data));
  }
  if (dtype == static_cast<std::uint8_t>(DType::kPackedInt))
  {
    const int bits = r.u8("bit_width");
    const auto sign = r.u8("signed flag");
    if (!is_packable_bit_width(bits) || sign > 1)
      throw ParseError(ParseFailure::kBadHeader, "bad packed header (bit width " + std::to_string(bits) + ")");
    const std::uint64_t n = rows * bitpack::row_bytes(cols, bits);
    expect_payload(r, n);
    auto payload = r.take(n, "payload");
    return PackedIntTensor::from_payload(rows, cols, bits, sign == 1,
                                         std::vector<std::uint8_t>(payload.begin(), payload.end()));
  }
  throw ParseError(ParseFailure::kBadHeader, "unknown dtype tag " + std::to_string(dtype));
}

namespace
{

void write_file(const std::filesystem::path &path, const std::vector<std::uint8_t> &bytes)
{
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out)
    throw IoError("short write to " + path.string());
}

std::vector<std::uint8_t> read_file(const std::filesystem::path &path)
{
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

void save(const std::filesystem::path &path, const Matrix &m) { write_file(path, encode(m)); }
void save(const std::filesystem::path &path, const PackedIntTensor &t) { write_file(path, encode(t)); }

Tensor load(const std::filesystem::path &path)
{
  auto bytes = read_file(path);
  return decode(bytes);
}

Matrix load_matrix(const std::filesystem::path &path)
{
  auto t = load(path);
  if (auto *m = std::get_if<Matrix>(&t))
    return std::move(*m);
  throw ParseError(ParseFailure::kBadHeader, path.string() + " holds a packed tensor, expected fp32");
}

PackedIntTensor load_packed(const std::filesystem::path &path)
{
  auto t = load(path);
  if (auto *p = std::get_if<PackedIntTensor>(&t))
    return std::move(*p);
  throw ParseError(ParseFailure::kBadHeader, path.string() + " holds an fp32 tensor, expected packed");
}

} // namespace atomforge::tensor_file
