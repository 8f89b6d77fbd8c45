#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>

#include "sp3d/error.hpp"

namespace sp3d::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
void put_span(std::ostream& out, std::span<const T> values) {
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T value;
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T))) throw FormatError(std::string("truncated ") + what);
  return value;
}

template <typename T>
void get_span(std::istream& in, std::span<T> values, const char* what) {
  if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes())))
    throw FormatError(std::string("truncated ") + what);
}

inline void expect_magic(std::istream& in, const char (&magic)[9]) {
  char buf[8];
  if (!in.read(buf, 8)) throw FormatError("truncated header");
  if (std::memcmp(buf, magic, 8) != 0) throw FormatError(std::string("bad magic, expected ") + magic);
}

}  // namespace sp3d::detail
