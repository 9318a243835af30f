#pragma once

// Little-endian primitives shared by the volume, checkpoint and feature-table
// formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "voxmae/errors.hpp"

namespace voxmae::binio {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& is, const char* what) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (is.gcount() != static_cast<std::streamsize>(sizeof(T))) throw FormatError(std::string("truncated while reading ") + what);
  return value;
}

inline void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_string(std::istream& is, const char* what) {
  const auto n = get<std::uint32_t>(is, what);
  if (n > (1u << 30)) throw FormatError(std::string("implausible string length while reading ") + what);
  std::string s(n, '\0');
  is.read(s.data(), static_cast<std::streamsize>(n));
  if (is.gcount() != static_cast<std::streamsize>(n)) throw FormatError(std::string("truncated while reading ") + what);
  return s;
}

template <typename T>
void put_array(std::ostream& os, const T* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
}

template <typename T>
void get_array(std::istream& is, T* data, std::size_t n, const char* what) {
  const auto bytes = static_cast<std::streamsize>(n * sizeof(T));
  is.read(reinterpret_cast<char*>(data), bytes);
  if (is.gcount() != bytes) throw FormatError(std::string("truncated while reading ") + what);
}

}  // namespace voxmae::binio
