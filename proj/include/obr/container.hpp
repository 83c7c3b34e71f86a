// Copyright (c) 2026 The OBR Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// OBRT container: a minimal binary tensor archive, little-endian throughout.
//
//   magic   "OBRT"                      4 bytes
//   version u16 = 1
//   count   u32
//   entry*  name_len u16, name bytes, dtype u8, ndim u8,
//           dims u64 * ndim, payload (product(dims) * dtype_size bytes)
//
// Entry names are unique; payloads are stored bit-exactly, so a write/read
// round trip is the identity on the file bytes.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "obr/errors.hpp"
#include "obr/matrix.hpp"

namespace obr {

enum class DType : std::uint8_t { f64 = 0, f32 = 1, i8 = 2 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f64: return 8;
    case DType::f32: return 4;
    case DType::i8: return 1;
  }
  throw FormatError("unknown dtype code");
}

inline std::string dtype_name(DType t) {
  switch (t) {
    case DType::f64: return "f64";
    case DType::f32: return "f32";
    case DType::i8: return "i8";
  }
  return "?";
}

struct TensorEntry {
  std::string name;
  DType dtype = DType::f64;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> payload;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (std::uint64_t d : shape) {
      if (d != 0 && n > UINT64_MAX / d)
        throw FormatError("entry '" + name + "': shape overflows");
      n *= d;
    }
    return n;
  }

  std::uint64_t expected_bytes() const {
    const std::uint64_t n = element_count();
    const std::uint64_t s = dtype_size(dtype);
    if (n > UINT64_MAX / s)
      throw FormatError("entry '" + name + "': payload size overflows");
    return n * s;
  }
};

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::uint8_t* data, std::size_t size)
      : data_(data), size_(size) {}

  template <typename T>
  T get_le(const std::string& what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i)
      v |= static_cast<T>(data_[pos_ + i]) << (8 * i);
    pos_ += sizeof(T);
    return v;
  }

  std::vector<std::uint8_t> get_bytes(std::size_t n, const std::string& what) {
    need(n, what);
    std::vector<std::uint8_t> out(data_ + pos_, data_ + pos_ + n);
    pos_ += n;
    return out;
  }

  std::string get_string(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return size_ - pos_; }

 private:
  void need(std::size_t n, const std::string& what) const {
    if (size_ - pos_ < n)
      throw FormatError("container truncated while reading " + what);
  }

  const std::uint8_t* data_;
  std::size_t size_;
  std::size_t pos_ = 0;
};

inline void check_payload_finite(const TensorEntry& e) {
  if (e.dtype == DType::f64) {
    for (std::size_t i = 0; i + 8 <= e.payload.size(); i += 8) {
      double v;
      std::memcpy(&v, e.payload.data() + i, 8);
      if (!std::isfinite(v))
        throw NumericError("entry '" + e.name + "': non-finite f64 payload");
    }
  } else if (e.dtype == DType::f32) {
    for (std::size_t i = 0; i + 4 <= e.payload.size(); i += 4) {
      float v;
      std::memcpy(&v, e.payload.data() + i, 4);
      if (!std::isfinite(v))
        throw NumericError("entry '" + e.name + "': non-finite f32 payload");
    }
  }
}

}  // namespace detail

/// Ordered collection of named tensors. Names are unique; entries keep
/// insertion order so serialization is deterministic.
class TensorContainer {
 public:
  void add(TensorEntry entry) {
    detail::require(!entry.name.empty(), "entry name must be non-empty");
    detail::require(entry.name.size() <= 0xffff, "entry name too long");
    detail::require(find(entry.name) == nullptr,
                    "duplicate entry name '" + entry.name + "'");
    detail::require(entry.payload.size() == entry.expected_bytes(),
                    "entry '" + entry.name +
                        "': payload length disagrees with shape");
    entries_.push_back(std::move(entry));
  }

  const TensorEntry* find(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return &e;
    return nullptr;
  }

  const TensorEntry& at(const std::string& name) const {
    const TensorEntry* e = find(name);
    if (!e) throw FormatError("container has no entry named '" + name + "'");
    return *e;
  }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const std::vector<TensorEntry>& entries() const { return entries_; }

  // -- typed helpers ---------------------------------------------------------

  void add_matrix(const std::string& name, const Matrix& m,
                  DType dtype = DType::f64) {
    m.require_finite(name);
    TensorEntry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = {m.rows(), m.cols()};
    fill_payload(e, m.data());
    add(std::move(e));
  }

  void add_vector(const std::string& name, const std::vector<double>& v,
                  DType dtype = DType::f64) {
    TensorEntry e;
    e.name = name;
    e.dtype = dtype;
    e.shape = {v.size()};
    fill_payload(e, v);
    add(std::move(e));
  }

  void add_i8_matrix(const std::string& name,
                     const std::vector<std::int8_t>& codes, std::size_t rows,
                     std::size_t cols) {
    detail::require(codes.size() == rows * cols,
                    "i8 matrix '" + name + "': size mismatch");
    TensorEntry e;
    e.name = name;
    e.dtype = DType::i8;
    e.shape = {rows, cols};
    e.payload.resize(codes.size());
    std::memcpy(e.payload.data(), codes.data(), codes.size());
    add(std::move(e));
  }

  /// Decodes a 2-D entry into a Matrix; f32 is widened, i8 promoted. The
  /// Matrix finiteness invariant is enforced here ("ingest" boundary).
  Matrix matrix_at(const std::string& name) const {
    const TensorEntry& e = at(name);
    detail::require(e.shape.size() == 2,
                    "entry '" + name + "' is not 2-D (ndim=" +
                        std::to_string(e.shape.size()) + ")");
    const std::size_t rows = static_cast<std::size_t>(e.shape[0]);
    const std::size_t cols = static_cast<std::size_t>(e.shape[1]);
    Matrix m(rows, cols);
    decode_payload(e, m.data());
    m.require_finite(name);
    return m;
  }

  std::vector<double> vector_at(const std::string& name) const {
    const TensorEntry& e = at(name);
    detail::require(e.shape.size() == 1,
                    "entry '" + name + "' is not 1-D");
    std::vector<double> v(static_cast<std::size_t>(e.shape[0]));
    decode_payload(e, v);
    return v;
  }

  std::vector<std::int8_t> i8_at(const std::string& name) const {
    const TensorEntry& e = at(name);
    detail::require(e.dtype == DType::i8,
                    "entry '" + name + "' is not i8");
    std::vector<std::int8_t> v(e.payload.size());
    std::memcpy(v.data(), e.payload.data(), e.payload.size());
    return v;
  }

  friend bool operator==(const TensorContainer& a, const TensorContainer& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.dtype != y.dtype || x.shape != y.shape ||
          x.payload != y.payload)
        return false;
    }
    return true;
  }

 private:
  static void fill_payload(TensorEntry& e, const std::vector<double>& vals) {
    static_assert(std::endian::native == std::endian::little,
                  "payload encoding assumes a little-endian host");
    if (e.dtype == DType::f64) {
      e.payload.resize(vals.size() * 8);
      std::memcpy(e.payload.data(), vals.data(), e.payload.size());
    } else if (e.dtype == DType::f32) {
      e.payload.resize(vals.size() * 4);
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const float f = static_cast<float>(vals[i]);
        std::memcpy(e.payload.data() + 4 * i, &f, 4);
      }
    } else {
      e.payload.resize(vals.size());
      for (std::size_t i = 0; i < vals.size(); ++i) {
        const double v = vals[i];
        detail::require(v == std::nearbyint(v) && v >= -128.0 && v <= 127.0,
                        "entry '" + e.name + "': value not representable as i8");
        e.payload[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(v));
      }
    }
  }

  static void decode_payload(const TensorEntry& e, std::vector<double>& out) {
    if (e.dtype == DType::f64) {
      std::memcpy(out.data(), e.payload.data(), e.payload.size());
    } else if (e.dtype == DType::f32) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        float f;
        std::memcpy(&f, e.payload.data() + 4 * i, 4);
        out[i] = static_cast<double>(f);
      }
    } else {
      for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(
            static_cast<std::int8_t>(e.payload[i]));
    }
  }

  std::vector<TensorEntry> entries_;
};

inline constexpr char kContainerMagic[4] = {'O', 'B', 'R', 'T'};
inline constexpr std::uint16_t kContainerVersion = 1;

inline std::vector<std::uint8_t> serialize_container(
    const TensorContainer& c) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kContainerMagic, kContainerMagic + 4);
  detail::put_le<std::uint16_t>(out, kContainerVersion);
  detail::put_le<std::uint32_t>(out,
                                static_cast<std::uint32_t>(c.entries().size()));
  for (const auto& e : c.entries()) {
    detail::check_payload_finite(e);
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    out.push_back(static_cast<std::uint8_t>(e.dtype));
    out.push_back(static_cast<std::uint8_t>(e.shape.size()));
    for (std::uint64_t d : e.shape) detail::put_le<std::uint64_t>(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

inline TensorContainer deserialize_container(const std::uint8_t* data,
                                             std::size_t size) {
  detail::ByteReader r(data, size);
  const std::string magic = r.get_string(4, "magic");
  if (std::memcmp(magic.data(), kContainerMagic, 4) != 0)
    throw FormatError("bad magic: not an OBRT container");
  const auto version = r.get_le<std::uint16_t>("version");
  if (version != kContainerVersion)
    throw FormatError("unsupported container version " +
                      std::to_string(version));
  const auto count = r.get_le<std::uint32_t>("entry count");
  TensorContainer c;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorEntry e;
    const auto name_len = r.get_le<std::uint16_t>("entry name length");
    e.name = r.get_string(name_len, "entry name");
    const auto dtype_code = r.get_le<std::uint8_t>("dtype of '" + e.name + "'");
    if (dtype_code > 2)
      throw FormatError("entry '" + e.name + "': unknown dtype code " +
                        std::to_string(dtype_code));
    e.dtype = static_cast<DType>(dtype_code);
    const auto ndim = r.get_le<std::uint8_t>("ndim of '" + e.name + "'");
    e.shape.resize(ndim);
    for (auto& d : e.shape)
      d = r.get_le<std::uint64_t>("shape of '" + e.name + "'");
    const std::uint64_t bytes = e.expected_bytes();
    if (bytes > r.remaining())
      throw FormatError("container truncated inside payload of entry '" +
                        e.name + "'");
    e.payload = r.get_bytes(static_cast<std::size_t>(bytes),
                            "payload of '" + e.name + "'");
    c.add(std::move(e));  // rejects duplicate names
  }
  if (r.remaining() != 0)
    throw FormatError("trailing bytes after last container entry");
  return c;
}

inline void write_container(const TensorContainer& c,
                            const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = serialize_container(c);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("short write to '" + path.string() + "'");
}

inline TensorContainer read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw IoError("cannot open '" + path.string() + "'");
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(size));
  if (size > 0) {
    f.read(reinterpret_cast<char*>(bytes.data()), size);
    if (!f) throw IoError("short read from '" + path.string() + "'");
  }
  return deserialize_container(bytes.data(), bytes.size());
}

}  // namespace obr
