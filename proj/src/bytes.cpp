// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/bytes.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace gd {

namespace {
// Host is assumed little-endian (x86/ARM); guard in case of exotic ports.
static_assert(static_cast<unsigned char>(0x0102 & 0xFF) == 0x02);
}  // namespace

void write_bytes(std::ostream& os, const void* data, std::size_t n) {
  os.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!os) throw FormatError("write failed");
}

void write_u16(std::ostream& os, std::uint16_t v) { write_bytes(os, &v, 2); }
void write_u32(std::ostream& os, std::uint32_t v) { write_bytes(os, &v, 4); }
void write_f32(std::ostream& os, float v) { write_bytes(os, &v, 4); }

void read_bytes(std::istream& is, void* data, std::size_t n) {
  is.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n)
    throw FormatError("truncated file: expected " + std::to_string(n) + " more bytes");
}

std::uint16_t read_u16(std::istream& is) {
  std::uint16_t v;
  read_bytes(is, &v, 2);
  return v;
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  read_bytes(is, &v, 4);
  return v;
}

float read_f32(std::istream& is) {
  float v;
  read_bytes(is, &v, 4);
  return v;
}

void expect_magic(std::istream& is, const char* expect, std::size_t n) {
  std::string got(n, '\0');
  is.read(got.data(), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n || got != std::string(expect, n))
    throw FormatError(std::string("bad magic, expected \"") + std::string(expect, n) + "\"");
}

void atomic_write_file(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + tmp);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw FormatError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw FormatError("rename failed: " + path);
  }
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace gd
