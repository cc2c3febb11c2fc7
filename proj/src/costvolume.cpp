// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/costvolume.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {

void VoxelGrid::validate() const {
  for (int a = 0; a < 3; ++a)
    if (dims[a] < 2) throw ConfigError("voxel grid needs at least 2 voxels per axis");
  if (!(spacing > 0.0)) throw ConfigError("voxel grid spacing must be positive");
  if (channels < 1) throw ConfigError("voxel grid needs at least 1 channel");
  if (data.size() != voxel_count() * channels || validity.size() != voxel_count())
    throw ConfigError("voxel grid buffer sizes do not match dims");
  for (double v : data)
    if (!std::isfinite(v)) throw NumericError("voxel grid holds a non-finite value");
}

VoxelGrid aggregate_variance(const std::vector<FeatureMap>& maps,
                             const std::vector<Camera>& cameras, const GridSpec& spec) {
  if (maps.size() != cameras.size())
    throw ConfigError("aggregate_variance: maps and cameras must be index-aligned");
  if (maps.size() < 2) throw ConfigError("aggregate_variance needs at least 2 views");
  int ch = maps[0].channels;
  for (const auto& m : maps)
    if (m.channels != ch) throw ConfigError("aggregate_variance: channel mismatch across views");
  if (spec.channels != 0 && spec.channels != ch)
    throw ConfigError("aggregate_variance: grid spec channel count mismatch");

  VoxelGrid grid(spec.dims, spec.origin, spec.spacing, ch);
  grid.validate();

  const std::size_t n_views = maps.size();
  std::vector<std::vector<double>> per_view(ch);

  for (int z = 0; z < grid.dims[2]; ++z)
    for (int y = 0; y < grid.dims[1]; ++y)
      for (int x = 0; x < grid.dims[0]; ++x) {
        Vec3 h = grid.center(x, y, z);
        for (auto& col : per_view) col.clear();
        int seen = 0;
        for (std::size_t i = 0; i < n_views; ++i) {
          Projection p = project(cameras[i], h);
          if (!p.valid) continue;
          FeatureSample f = sample_feature(maps[i], p.u, p.v);
          if (!f.valid) continue;
          ++seen;
          for (int c = 0; c < ch; ++c) per_view[c].push_back(f.value[c]);
        }
        grid.validity[grid.voxel_index(x, y, z)] = static_cast<std::uint16_t>(seen);
        if (seen < 2) continue;
        for (int c = 0; c < ch; ++c) {
          // Sorting fixes the summation order, so the result is bit-identical
          // under any permutation of the view list.
          auto& vals = per_view[c];
          std::sort(vals.begin(), vals.end());
          double mean = 0.0;
          for (double v : vals) mean += v;
          mean /= seen;
          double var = 0.0;
          for (double v : vals) var += (v - mean) * (v - mean);
          var /= seen;
          grid.at(x, y, z, c) = var;
        }
      }
  return grid;
}

void Conv3dStack::validate(int input_channels) const {
  int in_ch = input_channels;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weight.dims.size() != 5 || l.weight.dims[2] != 3 || l.weight.dims[3] != 3 ||
        l.weight.dims[4] != 3)
      throw ConfigError("conv3d layer weight must be rank 5 (out,in,3,3,3)");
    if (static_cast<int>(l.weight.dims[1]) != in_ch)
      throw ConfigError("conv3d layer " + std::to_string(i) + " input channels mismatch");
    if (l.bias.dims.size() != 1 || l.bias.dims[0] != l.weight.dims[0])
      throw ConfigError("conv3d layer " + std::to_string(i) + " bias shape mismatch");
    in_ch = static_cast<int>(l.weight.dims[0]);
  }
}

int Conv3dStack::output_channels(int input_channels) const {
  return layers.empty() ? input_channels : static_cast<int>(layers.back().weight.dims[0]);
}

namespace {

void mask_invalid(VoxelGrid& g) {
  for (std::size_t v = 0; v < g.validity.size(); ++v)
    if (g.validity[v] == 0)
      for (int c = 0; c < g.channels; ++c) g.data[v * g.channels + c] = 0.0;
}

VoxelGrid conv3d_layer(const VoxelGrid& in, const Conv3dLayer& layer) {
  int out_ch = static_cast<int>(layer.weight.dims[0]);
  int in_ch = static_cast<int>(layer.weight.dims[1]);
  VoxelGrid out(in.dims, in.origin, in.spacing, out_ch);
  out.validity = in.validity;
  for (int z = 0; z < in.dims[2]; ++z)
    for (int y = 0; y < in.dims[1]; ++y)
      for (int x = 0; x < in.dims[0]; ++x)
        for (int oc = 0; oc < out_ch; ++oc) {
          double acc = layer.bias.data[oc];
          for (int ic = 0; ic < in_ch; ++ic)
            for (int dz = -1; dz <= 1; ++dz)
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  int sx = x + dx, sy = y + dy, sz = z + dz;
                  if (sx < 0 || sx >= in.dims[0] || sy < 0 || sy >= in.dims[1] || sz < 0 ||
                      sz >= in.dims[2])
                    continue;
                  double w =
                      layer.weight
                          .data[(((static_cast<std::size_t>(oc) * in_ch + ic) * 3 + (dz + 1)) * 3 +
                                 (dy + 1)) * 3 +
                                (dx + 1)];
                  acc += w * in.at(sx, sy, sz, ic);
                }
          if (layer.relu && acc < 0.0) acc = 0.0;
          out.at(x, y, z, oc) = acc;
        }
  mask_invalid(out);
  return out;
}

}  // namespace

VoxelGrid apply_conv3d(const VoxelGrid& raw, const Conv3dStack& f3d) {
  raw.validate();
  f3d.validate(raw.channels);
  if (f3d.layers.empty()) return raw;
  VoxelGrid cur = raw;
  mask_invalid(cur);
  for (const auto& layer : f3d.layers) cur = conv3d_layer(cur, layer);
  return cur;
}

VolumeStencil volume_stencil(const VoxelGrid& grid, const Vec3& x) {
  VolumeStencil st;
  double g[3];
  for (int a = 0; a < 3; ++a) {
    g[a] = (x[a] - grid.origin[a]) / grid.spacing;
    if (!(g[a] >= 0.0 && g[a] <= grid.dims[a] - 1)) return st;
  }
  int base[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    base[a] = std::min(static_cast<int>(std::floor(g[a])), grid.dims[a] - 2);
    f[a] = g[a] - base[a];
  }
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double w = (dx ? f[0] : 1.0 - f[0]) * (dy ? f[1] : 1.0 - f[1]) * (dz ? f[2] : 1.0 - f[2]);
        st.voxel[st.count] = grid.voxel_index(base[0] + dx, base[1] + dy, base[2] + dz);
        st.weight[st.count] = w;
        ++st.count;
      }
  return st;
}

VolumeSample query_volume(const VoxelGrid& grid, const Vec3& x) {
  VolumeSample s;
  s.value.assign(grid.channels, 0.0);
  VolumeStencil st = volume_stencil(grid, x);
  if (st.count == 0) return s;
  for (int i = 0; i < st.count; ++i)
    for (int c = 0; c < grid.channels; ++c)
      s.value[c] += st.weight[i] * grid.data[st.voxel[i] * grid.channels + c];
  s.valid = true;
  return s;
}

std::vector<Vec3> query_volume_gradient(const VoxelGrid& grid, const Vec3& x) {
  std::vector<Vec3> out(grid.channels);
  double g[3];
  for (int a = 0; a < 3; ++a) {
    g[a] = (x[a] - grid.origin[a]) / grid.spacing;
    if (!(g[a] >= 0.0 && g[a] <= grid.dims[a] - 1)) return out;
  }
  int base[3];
  double f[3];
  for (int a = 0; a < 3; ++a) {
    base[a] = std::min(static_cast<int>(std::floor(g[a])), grid.dims[a] - 2);
    f[a] = g[a] - base[a];
  }
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        double wx = dx ? f[0] : 1.0 - f[0];
        double wy = dy ? f[1] : 1.0 - f[1];
        double wz = dz ? f[2] : 1.0 - f[2];
        double sx = dx ? 1.0 : -1.0;
        double sy = dy ? 1.0 : -1.0;
        double sz = dz ? 1.0 : -1.0;
        std::size_t vi = grid.voxel_index(base[0] + dx, base[1] + dy, base[2] + dz);
        for (int c = 0; c < grid.channels; ++c) {
          double v = grid.data[vi * grid.channels + c];
          out[c].x += sx * wy * wz * v / grid.spacing;
          out[c].y += wx * sy * wz * v / grid.spacing;
          out[c].z += wx * wy * sz * v / grid.spacing;
        }
      }
  return out;
}

void save_volume(const std::string& path, const VoxelGrid& grid) {
  grid.validate();
  std::ostringstream os;
  write_volume_stream(os, grid);
  atomic_write_file(path, os.str());
}

VoxelGrid load_volume(const std::string& path) {
  std::istringstream is(read_file(path));
  return read_volume_stream(is);
}

VoxelGrid read_volume_stream(std::istream& is) {
  expect_magic(is, "GDVOL1", 6);
  std::array<int, 3> dims;
  for (int a = 0; a < 3; ++a) dims[a] = static_cast<int>(read_u32(is));
  int channels = static_cast<int>(read_u32(is));
  double spacing = read_f32(is);
  Vec3 origin;
  for (int a = 0; a < 3; ++a) origin[a] = read_f32(is);
  if (dims[0] < 2 || dims[1] < 2 || dims[2] < 2 || channels < 1 || !(spacing > 0))
    throw FormatError("volume file header is out of range");
  VoxelGrid grid(dims, origin, spacing, channels);
  for (double& v : grid.data) v = read_f32(is);
  for (std::uint16_t& v : grid.validity) v = read_u16(is);
  return grid;
}

void write_volume_stream(std::ostream& os, const VoxelGrid& grid) {
  write_bytes(os, "GDVOL1", 6);
  for (int a = 0; a < 3; ++a) write_u32(os, static_cast<std::uint32_t>(grid.dims[a]));
  write_u32(os, static_cast<std::uint32_t>(grid.channels));
  write_f32(os, static_cast<float>(grid.spacing));
  for (int a = 0; a < 3; ++a) write_f32(os, static_cast<float>(grid.origin[a]));
  for (double v : grid.data) write_f32(os, static_cast<float>(v));
  for (std::uint16_t v : grid.validity) write_u16(os, v);
}

}  // namespace gd
