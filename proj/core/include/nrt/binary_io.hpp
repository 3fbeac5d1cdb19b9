#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "nrt/error.hpp"

namespace nrt::io {

// Little-endian scalar codec for the binary file formats.
static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

template <class T>
void write_scalar(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_scalar(std::istream& is, const char* what) {
  T value;
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw Error(std::string("truncated stream while reading ") + what);
  return value;
}

inline void write_magic(std::ostream& os, const char magic[4]) { os.write(magic, 4); }

inline void expect_magic(std::istream& is, const char magic[4], const char* what) {
  char buf[4];
  is.read(buf, 4);
  if (!is || std::memcmp(buf, magic, 4) != 0)
    throw Error(std::string("bad magic for ") + what);
}

}  // namespace nrt::io
