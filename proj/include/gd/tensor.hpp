// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace gd {

/// Dense row-major tensor of doubles. Values are serialized as f32; keeping
/// the working representation in double lets finite-difference oracles hit
/// tight tolerances.
struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::uint32_t> d);

  std::size_t size() const { return data.size(); }
  static std::size_t element_count(const std::vector<std::uint32_t>& dims);
};

/// Ordered list of tensors; the on-disk "GDW1" weight bundle.
///
/// Layout (little-endian):
///   magic "GDW1" (4 bytes)
///   u32 tensor_count
///   per tensor: u32 rank, u32 dims[rank], f32 data[prod(dims)]
struct TensorBundle {
  std::vector<Tensor> tensors;
};

void write_bundle(std::ostream& os, const TensorBundle& b);
TensorBundle read_bundle(std::istream& is);

void save_bundle(const std::string& path, const TensorBundle& b);
TensorBundle load_bundle(const std::string& path);

}  // namespace gd
