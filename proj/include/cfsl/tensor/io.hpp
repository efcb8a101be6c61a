#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>

#include "cfsl/tensor/tensor.hpp"

namespace cfsl {

// Portable tensor container:
//   "EPCT" | version u32 | rank u32 | dims u64[rank] | f64 payload
// All integers and floats little-endian.
inline constexpr std::array<char, 4> kTensorMagic{'E', 'P', 'C', 'T'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(bytes.data(), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
  std::array<char, sizeof(T)> bytes;
  if (!is.read(bytes.data(), sizeof(T))) throw DataError("tensor stream truncated", DataError::Kind::kFormat);
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic.data(), kTensorMagic.size());
  detail::write_le<std::uint32_t>(os, kTensorFormatVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) detail::write_le<std::uint64_t>(os, d);
  for (double v : t.data()) detail::write_le<double>(os, v);
  if (!os) throw DataError("failed writing tensor");
}

inline Tensor read_tensor(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kTensorMagic) {
    throw DataError("bad tensor magic", DataError::Kind::kFormat);
  }
  auto version = detail::read_le<std::uint32_t>(is);
  if (version != kTensorFormatVersion) {
    throw DataError("unsupported tensor format version " + std::to_string(version), DataError::Kind::kFormat);
  }
  auto rank = detail::read_le<std::uint32_t>(is);
  if (rank > 16) throw DataError("implausible tensor rank " + std::to_string(rank), DataError::Kind::kFormat);
  Shape shape(rank);
  std::size_t count = 1;
  for (auto& d : shape) {
    d = static_cast<std::size_t>(detail::read_le<std::uint64_t>(is));
    if (d != 0 && count > (std::size_t{1} << 32) / d) {
      throw DataError("implausible tensor size in header", DataError::Kind::kFormat);
    }
    count *= d;
  }
  std::vector<double> data(count);
  for (auto& v : data) v = detail::read_le<double>(is);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open " + path + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing tensor file: " + path, DataError::Kind::kMissingFile);
  return read_tensor(is);
}

// FNV-1a over a file's bytes; used for fixture integrity checks.
inline std::uint64_t file_checksum(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("missing file: " + path, DataError::Kind::kMissingFile);
  std::uint64_t h = 1469598103934665603ULL;
  char buf[4096];
  while (is) {
    is.read(buf, sizeof(buf));
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace cfsl
