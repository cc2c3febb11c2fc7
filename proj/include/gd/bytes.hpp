// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstring>
#include <iosfwd>
#include <string>
#include <vector>

#include "gd/errors.hpp"

namespace gd {

// Little-endian binary stream helpers. All project file formats are
// little-endian regardless of host order.

void write_u16(std::ostream& os, std::uint16_t v);
void write_u32(std::ostream& os, std::uint32_t v);
void write_f32(std::ostream& os, float v);
void write_bytes(std::ostream& os, const void* data, std::size_t n);

std::uint16_t read_u16(std::istream& is);
std::uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);
void read_bytes(std::istream& is, void* data, std::size_t n);

/// Reads exactly `n` chars and compares against `expect`; throws FormatError.
void expect_magic(std::istream& is, const char* expect, std::size_t n);

/// Writes `content` to `path` via a temp file + rename so a crash never
/// leaves a partial file at `path`.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

}  // namespace gd
