// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gd/camera.hpp"
#include "gd/features.hpp"
#include "gd/tensor.hpp"
#include "gd/vec.hpp"

namespace gd {

/// Dense voxel grid of per-voxel feature vectors plus a validity counter
/// (number of views that saw the voxel). Dense storage with masking stands
/// in for a sparse structure; masked voxels hold zeros.
///
/// Layout: data[((z * dims_y + y) * dims_x + x) * channels + c], i.e. x is
/// NOT innermost in the index math above; see index(). Voxel centers sit at
/// origin + spacing * (x, y, z).
struct VoxelGrid {
  std::array<int, 3> dims{2, 2, 2};
  Vec3 origin{0, 0, 0};
  double spacing = 1.0;
  int channels = 1;
  std::vector<double> data;
  std::vector<std::uint16_t> validity;

  VoxelGrid() = default;
  VoxelGrid(std::array<int, 3> dims_, Vec3 origin_, double spacing_, int channels_)
      : dims(dims_), origin(origin_), spacing(spacing_), channels(channels_) {
    std::size_t n = voxel_count();
    data.assign(n * channels, 0.0);
    validity.assign(n, 0);
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t voxel_index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  std::size_t index(int x, int y, int z, int c) const {
    return voxel_index(x, y, z) * channels + c;
  }
  double& at(int x, int y, int z, int c) { return data[index(x, y, z, c)]; }
  double at(int x, int y, int z, int c) const { return data[index(x, y, z, c)]; }
  Vec3 center(int x, int y, int z) const {
    return origin + Vec3{static_cast<double>(x), static_cast<double>(y),
                         static_cast<double>(z)} * spacing;
  }

  /// Throws ConfigError on dims < 2 per axis, non-positive spacing or
  /// size mismatches.
  void validate() const;
};

struct GridSpec {
  std::array<int, 3> dims{150, 150, 150};
  Vec3 origin{-1.0, -1.0, -1.0};
  double spacing = 2.0 / 149.0;  // spans [-1, 1] at the default dims
  int channels = 0;              // 0 means: take the feature maps' channel count
};

/// Per-voxel population variance of features sampled from every view whose
/// projection of the voxel center is valid. Voxels seen by fewer than 2
/// views store a zero vector; validity always stores the count. Output is
/// bit-identical under permutation of the view list.
VoxelGrid aggregate_variance(const std::vector<FeatureMap>& maps,
                             const std::vector<Camera>& cameras, const GridSpec& spec);

struct Conv3dLayer {
  Tensor weight;  // (out, in, 3, 3, 3)
  Tensor bias;    // (out)
  bool relu = false;
};

/// Stride-1 zero-padded 3D convolution stack. Voxels with validity 0 are
/// zeroed after every layer, reproducing sparse-CNN behavior on the dense
/// grid.
struct Conv3dStack {
  std::vector<Conv3dLayer> layers;

  void validate(int input_channels) const;
  int output_channels(int input_channels) const;
};

VoxelGrid apply_conv3d(const VoxelGrid& raw, const Conv3dStack& f3d);

/// Trilinear interpolation over the 8 surrounding voxel centers; queries
/// outside the grid return zeros with valid=false.
struct VolumeSample {
  std::vector<double> value;
  bool valid = false;
};

VolumeSample query_volume(const VoxelGrid& grid, const Vec3& x);

/// Trilinear footprint of a query: up to 8 (voxel index, weight) pairs.
/// weight[i] is d value / d data[voxel_index * channels + c] for every c.
struct VolumeStencil {
  std::array<std::size_t, 8> voxel{};  // voxel_index values
  std::array<double, 8> weight{};
  int count = 0;  // 0 when the query fell outside the grid
};

VolumeStencil volume_stencil(const VoxelGrid& grid, const Vec3& x);

/// Spatial derivative of the trilinear interpolation, d value / d x, one
/// 3-vector per channel. Zero outside the grid.
std::vector<Vec3> query_volume_gradient(const VoxelGrid& grid, const Vec3& x);

void save_volume(const std::string& path, const VoxelGrid& grid);
VoxelGrid load_volume(const std::string& path);

// Stream forms, used when a volume is embedded inside another file.
void write_volume_stream(std::ostream& os, const VoxelGrid& grid);
VoxelGrid read_volume_stream(std::istream& is);

}  // namespace gd
