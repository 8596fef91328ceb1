#pragma once

// Little-endian primitive I/O shared by the binary feature and checkpoint
// formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "dmrl/error.hpp"

namespace dmrl::binary {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

template <typename T>
void write(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read(std::istream& in, const char* context) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw FormatError(std::string(context) + ": truncated file");
  }
  return value;
}

inline void write_string16(std::ostream& out, const std::string& s) {
  if (s.size() > 0xFFFF) {
    throw InvalidInput("string too long for u16 length prefix: " + s.substr(0, 32));
  }
  write<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string16(std::istream& in, const char* context) {
  const auto len = read<std::uint16_t>(in, context);
  std::string s(len, '\0');
  in.read(s.data(), len);
  if (in.gcount() != static_cast<std::streamsize>(len)) {
    throw FormatError(std::string(context) + ": truncated file");
  }
  return s;
}

} // namespace dmrl::binary
