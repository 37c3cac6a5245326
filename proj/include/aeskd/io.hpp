// Copyright 2026 The aeskd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Little-endian binary containers.
//
//   .ten   "AETN" u16 version=1, u8 dtype (0 = f32), u8 rank, u32 extents...,
//          f32 payload row-major
//   ckpt   repeated { u16 name length, name bytes, .ten body }

#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>

#include "aeskd/autograd.hpp"

namespace aeskd {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

// Malformed or truncated binary input. offset() is the byte position where
// decoding failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : std::runtime_error(what + " at byte " + std::to_string(offset)),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.append(p, sizeof(U));
  }
  void put_bytes(std::string_view s) { buf_.append(s); }
  void put_floats(std::span<const float> v) {
    buf_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(float));
  }
  const std::string& bytes() const noexcept { return buf_; }
  std::string take() { return std::move(buf_); }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  template <typename U>
  U get(std::string_view what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string get_bytes(std::size_t n, std::string_view what) {
    need(n, what);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  void get_floats(float* out, std::size_t n, std::string_view what) {
    need(n * sizeof(float), what);
    std::memcpy(out, data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }
  void expect_magic(std::string_view magic) {
    const auto at = pos_;
    if (get_bytes(magic.size(), "magic") != magic) {
      throw FormatError(at, "bad magic, expected \"" + std::string(magic) + "\"");
    }
  }
  std::uint64_t offset() const noexcept { return pos_; }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  bool done() const noexcept { return pos_ == data_.size(); }

 private:
  void need(std::size_t n, std::string_view what) {
    if (data_.size() - pos_ < n) {
      throw FormatError(pos_, "truncated input reading " + std::string(what));
    }
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline constexpr std::string_view kTensorMagic = "AETN";
inline constexpr std::uint16_t kTensorVersion = 1;

inline void encode_tensor(ByteWriter& w, const Tensor<float>& t) {
  if (t.rank() > 255) throw std::invalid_argument("tensor rank exceeds 255");
  w.put_bytes(kTensorMagic);
  w.put<std::uint16_t>(kTensorVersion);
  w.put<std::uint8_t>(0);
  w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
  w.put_floats(t.data());
}

inline Tensor<float> decode_tensor(ByteReader& r) {
  r.expect_magic(kTensorMagic);
  const auto vpos = r.offset();
  if (auto v = r.get<std::uint16_t>("version"); v != kTensorVersion) {
    throw FormatError(vpos, "unsupported tensor version " + std::to_string(v));
  }
  const auto dpos = r.offset();
  if (auto d = r.get<std::uint8_t>("dtype"); d != 0) {
    throw FormatError(dpos, "unsupported dtype " + std::to_string(d));
  }
  const auto rank = r.get<std::uint8_t>("rank");
  Shape shape;
  for (std::size_t i = 0; i < rank; ++i) {
    const auto epos = r.offset();
    const auto e = r.get<std::uint32_t>("extent");
    if (e == 0) throw FormatError(epos, "zero extent");
    shape.push_back(e);
  }
  // Checked before allocating so a corrupt extent cannot request huge buffers.
  const auto ppos = r.offset();
  long double want = 1.0L;
  for (auto e : shape) want *= static_cast<long double>(e);
  if (want * sizeof(float) > static_cast<long double>(r.remaining()))
    throw FormatError(ppos, "truncated input reading tensor payload");
  std::vector<float> data(numel(shape));
  r.get_floats(data.data(), data.size(), "tensor payload");
  return Tensor<float>(std::move(shape), std::move(data));
}

inline std::string encode_tensor(const Tensor<float>& t) {
  ByteWriter w;
  encode_tensor(w, t);
  return w.take();
}

inline Tensor<float> decode_tensor(std::string_view bytes) {
  ByteReader r(bytes);
  auto t = decode_tensor(r);
  if (!r.done()) throw FormatError(r.offset(), "trailing bytes after tensor");
  return t;
}

inline void save_tensor(const std::filesystem::path& path, const Tensor<float>& t) {
  write_file(path, encode_tensor(t));
}

inline Tensor<float> load_tensor(const std::filesystem::path& path) {
  return decode_tensor(read_file(path));
}

inline std::string encode_checkpoint(const ParameterSet<float>& ps) {
  ByteWriter w;
  for (const auto& p : ps) {
    if (p.name.size() > 0xFFFF) throw std::invalid_argument("parameter name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_bytes(p.name);
    encode_tensor(w, p.value);
  }
  return w.take();
}

// Loads values by name into an existing parameter set. Every checkpoint entry
// must exist with a matching shape; entries absent from the file keep their
// current value only if allow_partial.
inline void decode_checkpoint(std::string_view bytes, ParameterSet<float>& ps,
                              bool allow_partial = false) {
  ByteReader r(bytes);
  std::size_t loaded = 0;
  while (!r.done()) {
    const auto at = r.offset();
    const auto len = r.get<std::uint16_t>("name length");
    auto name = r.get_bytes(len, "parameter name");
    auto t = decode_tensor(r);
    auto idx = ps.find(name);
    if (!idx) throw FormatError(at, "unknown parameter '" + name + "'");
    if (ps[*idx].value.shape() != t.shape()) {
      throw FormatError(at, "shape mismatch for '" + name + "': " +
                                to_string(t.shape()) + " vs " +
                                to_string(ps[*idx].value.shape()));
    }
    ps[*idx].value = std::move(t);
    ++loaded;
  }
  if (!allow_partial && loaded != ps.size()) {
    throw FormatError(r.offset(), "checkpoint holds " + std::to_string(loaded) +
                                      " of " + std::to_string(ps.size()) +
                                      " parameters");
  }
}

// FNV-1a over raw bytes; used for content hashes of caches and reports.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace aeskd
