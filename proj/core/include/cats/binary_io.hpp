#pragma once

// Little-endian primitive encoding shared by the volume and checkpoint formats.

#include <bit>
#include <type_traits>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "cats/errors.hpp"

namespace cats::io {

template <typename U>
void write_le(std::ostream& out, U value) {
  static_assert(std::is_integral_v<U>);
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

inline void write_f32(std::ostream& out, float value) { write_le(out, std::bit_cast<std::uint32_t>(value)); }

template <typename U>
U read_le(std::istream& in, const std::string& what) {
  static_assert(std::is_integral_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError(FormatErrorKind::kTruncated, "truncated " + what);
  }
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return static_cast<U>(v);
}

inline float read_f32(std::istream& in, const std::string& what) {
  return std::bit_cast<float>(read_le<std::uint32_t>(in, what));
}

inline void read_exact(std::istream& in, char* dst, std::size_t n, const std::string& what) {
  if (!in.read(dst, static_cast<std::streamsize>(n))) {
    throw FormatError(FormatErrorKind::kTruncated, "truncated " + what);
  }
}

}  // namespace cats::io
