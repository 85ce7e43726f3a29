#pragma once

// Binary tensor blobs: "EMTN", u32 version, u32 rank, u32 extents..., then
// row-major float32 values. Everything little-endian.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "embedmask/tensor.hpp"

namespace embedmask {

inline constexpr char kTensorMagic[4] = {'E', 'M', 'T', 'N'};
inline constexpr std::uint32_t kTensorFormatVersion = 1;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw FormatError("tensor blob truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
  os.write(kTensorMagic, 4);
  detail::put_u32(os, kTensorFormatVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
  for (T v : t.values()) detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0) throw FormatError("bad tensor magic");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kTensorFormatVersion) throw FormatError("unsupported tensor version " + std::to_string(version));
  const std::uint32_t rank = detail::get_u32(is);
  if (rank > 8) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) e = detail::get_u32(is);
  std::vector<T> values(numel_of(shape));
  for (auto& v : values) v = static_cast<T>(std::bit_cast<float>(detail::get_u32(is)));
  return Tensor<T>(std::move(shape), std::move(values));
}

template <typename T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_tensor(os, t);
  if (!os) throw std::runtime_error("write failed: " + path);
}

template <typename T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_tensor<T>(is);
}

}  // namespace embedmask
