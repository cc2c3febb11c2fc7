// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/tensor.hpp"

#include <fstream>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {

Tensor::Tensor(std::vector<std::uint32_t> d) : dims(std::move(d)) {
  data.assign(element_count(dims), 0.0);
}

std::size_t Tensor::element_count(const std::vector<std::uint32_t>& dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void write_bundle(std::ostream& os, const TensorBundle& b) {
  write_bytes(os, "GDW1", 4);
  write_u32(os, static_cast<std::uint32_t>(b.tensors.size()));
  for (const auto& t : b.tensors) {
    if (t.data.size() != Tensor::element_count(t.dims))
      throw FormatError("tensor data size does not match its dims");
    write_u32(os, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) write_u32(os, d);
    for (double v : t.data) write_f32(os, static_cast<float>(v));
  }
}

TensorBundle read_bundle(std::istream& is) {
  expect_magic(is, "GDW1", 4);
  std::uint32_t count = read_u32(is);
  TensorBundle b;
  b.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t rank = read_u32(is);
    if (rank > 8) throw FormatError("tensor rank out of range");
    Tensor t;
    t.dims.resize(rank);
    for (auto& d : t.dims) d = read_u32(is);
    std::size_t n = Tensor::element_count(t.dims);
    t.data.resize(n);
    for (auto& v : t.data) v = static_cast<double>(read_f32(is));
    b.tensors.push_back(std::move(t));
  }
  return b;
}

void save_bundle(const std::string& path, const TensorBundle& b) {
  std::ostringstream ss(std::ios::binary);
  write_bundle(ss, b);
  atomic_write_file(path, ss.str());
}

TensorBundle load_bundle(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  return read_bundle(is);
}

}  // namespace gd
