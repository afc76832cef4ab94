#pragma once

// SATF: one tensor per file.
//
//   offset  size       field
//   0       4          magic "SATF"
//   4       1          version (1)
//   5       1          dtype (0 = f32, 1 = f64, 2 = i64)
//   6       1          ndim
//   7       8 * ndim   dims, unsigned 64-bit little-endian
//   ...                payload, row-major, little-endian
//
// Encoding is done byte by byte, so files are identical on any host.

#include <algorithm>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <limits>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "selagg/error.hpp"
#include "selagg/tensor.hpp"

namespace selagg::satf {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I64 = 2 };

inline constexpr char kMagic[4] = {'S', 'A', 'T', 'F'};
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kFixedHeader = 7;

inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32: return "f32";
    case DType::F64: return "f64";
    case DType::I64: return "i64";
  }
  return "?";
}

template <typename T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::F32;
  else if constexpr (std::is_same_v<T, double>) return DType::F64;
  else {
    static_assert(std::is_same_v<T, std::int64_t>, "SATF stores f32, f64 or i64");
    return DType::I64;
  }
}

struct Header {
  DType dtype = DType::F32;
  Dims dims;

  std::size_t header_bytes() const { return kFixedHeader + 8 * dims.size(); }
  std::size_t payload_bytes() const { return dims_product(dims) * dtype_size(dtype); }
};

namespace detail {

inline void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
  for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_le(const std::uint8_t* p, std::size_t bytes) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
std::uint64_t to_bits(T v) {
  if constexpr (std::is_same_v<T, float>) return std::bit_cast<std::uint32_t>(v);
  else return std::bit_cast<std::uint64_t>(v);
}

template <typename T>
T from_bits(std::uint64_t bits) {
  if constexpr (std::is_same_v<T, float>) return std::bit_cast<float>(static_cast<std::uint32_t>(bits));
  else return std::bit_cast<T>(bits);
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  require(t.rank() <= 255, ErrorKind::Shape, "SATF supports at most 255 dims");
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) detail::put_le(out, d, 8);
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.values()) detail::put_le(out, detail::to_bits(v), sizeof(T));
  return out;
}

/// Parses and validates a header from the first bytes of a record. file_size
/// is the total record length; the declared payload must match it exactly.
inline Header parse_header(const std::uint8_t* data, std::size_t available, std::size_t file_size,
                           const std::string& what) {
  if (available < 4) fail(ErrorKind::Truncated, what + ": shorter than the SATF magic");
  if (!std::equal(kMagic, kMagic + 4, reinterpret_cast<const char*>(data)))
    fail(ErrorKind::BadMagic, what + ": missing SATF magic");
  if (available < kFixedHeader) fail(ErrorKind::Truncated, what + ": truncated header");
  if (data[4] != kVersion) fail(ErrorKind::BadMagic, what + ": unsupported SATF version " + std::to_string(data[4]));
  if (data[5] > 2) fail(ErrorKind::BadMagic, what + ": unknown dtype code " + std::to_string(data[5]));
  Header h;
  h.dtype = static_cast<DType>(data[5]);
  const std::size_t ndim = data[6];
  if (available < kFixedHeader + 8 * ndim) fail(ErrorKind::Truncated, what + ": truncated dims");
  std::size_t payload = dtype_size(h.dtype);
  bool overflow = false;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint64_t d = detail::get_le(data + kFixedHeader + 8 * i, 8);
    h.dims.push_back(static_cast<std::size_t>(d));
    overflow |= __builtin_mul_overflow(payload, static_cast<std::size_t>(d), &payload);
  }
  if (std::find(h.dims.begin(), h.dims.end(), std::size_t{0}) != h.dims.end()) {
    overflow = false;
    payload = 0;
  }
  const std::size_t need = h.header_bytes();
  if (overflow || file_size - need < payload)
    fail(ErrorKind::Truncated, what + ": payload shorter than declared dims " + dims_string(h.dims));
  if (file_size - need > payload)
    fail(ErrorKind::PayloadMismatch, what + ": payload longer than declared dims " + dims_string(h.dims));
  return h;
}

template <typename T>
Tensor<T> decode(const std::vector<std::uint8_t>& bytes, const std::string& what = "record") {
  const Header h = parse_header(bytes.data(), bytes.size(), bytes.size(), what);
  require(h.dtype == dtype_of<T>(), ErrorKind::Data,
          what + ": stored dtype " + dtype_name(h.dtype) + ", requested " + dtype_name(dtype_of<T>()));
  const std::size_t n = dims_product(h.dims);
  std::vector<T> values(n);
  const std::uint8_t* p = bytes.data() + h.header_bytes();
  for (std::size_t i = 0; i < n; ++i) values[i] = detail::from_bits<T>(detail::get_le(p + i * sizeof(T), sizeof(T)));
  return Tensor<T>(h.dims, std::move(values));
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const void* data, std::size_t size) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) fail(ErrorKind::Io, "short write to " + path.string());
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  write_file(path, text.data(), text.size());
}

/// Header only; the payload length is validated against the file size without reading it.
inline Header read_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorKind::Io, "cannot open " + path.string());
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> head(std::min<std::size_t>(size, kFixedHeader + 8 * 255));
  in.read(reinterpret_cast<char*>(head.data()), static_cast<std::streamsize>(head.size()));
  return parse_header(head.data(), head.size(), size, path.string());
}

template <typename T>
Tensor<T> read_tensor(const std::filesystem::path& path) {
  read_header(path);  // rejects corrupt dims before the payload is allocated
  return decode<T>(read_file(path), path.string());
}

template <typename T>
void write_tensor(const Tensor<T>& t, const std::filesystem::path& path) {
  const auto bytes = encode(t);
  write_file(path, bytes.data(), bytes.size());
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001B3ull;
  }
  return h;
}

/// FNV-1a of a record's payload bytes (header excluded).
inline std::uint64_t payload_checksum(const std::vector<std::uint8_t>& record) {
  const Header h = parse_header(record.data(), record.size(), record.size(), "record");
  return fnv1a64(record.data() + h.header_bytes(), h.payload_bytes());
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace selagg::satf
