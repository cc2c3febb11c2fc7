// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/costvolume.hpp"

#include <algorithm>
#include <cmath>
#include <doctest.h>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "gd/rng.hpp"
#include "test_util.hpp"

using namespace gd;

namespace {

// Views on a ring around the origin, all seeing the unit cube.
std::vector<Camera> ring_cameras(int n) {
  Intrinsics intr;
  intr.focal = 64.0;
  intr.width = 64;
  intr.height = 64;
  std::vector<Camera> cams;
  for (int i = 0; i < n; ++i)
    cams.push_back(look_at_pose({360.0 * i / n, 10.0, 4.0}, Vec3{0, 0, 0}, intr));
  return cams;
}

FeatureMap constant_map(int w, int h, int ch, double v) {
  FeatureMap m(w, h, ch);
  m.data.assign(static_cast<std::size_t>(w) * h * ch, v);
  return m;
}

VoxelGrid random_grid(std::array<int, 3> dims, int ch, Rng& rng) {
  VoxelGrid g(dims, Vec3{-1, -1, -1}, 2.0 / (dims[0] - 1), ch);
  for (auto& v : g.data) v = rng.uniform(-1.0, 1.0);
  for (auto& v : g.validity) v = 1;
  return g;
}

}  // namespace

TEST_SUITE("costvolume") {

TEST_CASE("identical view features give zero variance") {
  auto cams = ring_cameras(4);
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 4; ++i) maps.push_back(constant_map(64, 64, 3, 0.7));

  GridSpec spec;
  spec.dims = {5, 5, 5};
  spec.origin = Vec3{-0.5, -0.5, -0.5};
  spec.spacing = 0.25;
  VoxelGrid grid = aggregate_variance(maps, cams, spec);

  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    CHECK(grid.validity[v] >= 2);
    for (int c = 0; c < 3; ++c) CHECK(grid.data[v * 3 + c] == doctest::Approx(0.0));
  }
}

TEST_CASE("three views with features 1,2,3 give population variance 2/3") {
  auto cams = ring_cameras(3);
  std::vector<FeatureMap> maps;
  maps.push_back(constant_map(64, 64, 2, 1.0));
  maps.push_back(constant_map(64, 64, 2, 2.0));
  maps.push_back(constant_map(64, 64, 2, 3.0));

  GridSpec spec;
  spec.dims = {3, 3, 3};
  spec.origin = Vec3{-0.2, -0.2, -0.2};
  spec.spacing = 0.2;
  VoxelGrid grid = aggregate_variance(maps, cams, spec);

  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    REQUIRE(grid.validity[v] == 3);
    for (int c = 0; c < 2; ++c)
      CHECK(grid.data[v * 2 + c] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  }
}

TEST_CASE("voxels seen by fewer than two views store zeros") {
  // Two cameras, one looking away from the grid.
  Intrinsics intr;
  intr.width = 32;
  intr.height = 32;
  intr.focal = 32.0;
  std::vector<Camera> cams;
  cams.push_back(look_at_pose({0.0, 0.0, 3.0}, Vec3{0, 0, 0}, intr));
  // Second camera sits at (0,0,-3) facing -z, so the grid is behind it.
  cams.push_back(look_at_pose({0.0, 0.0, 3.0}, Vec3{0, 0, -6.0}, intr));

  std::vector<FeatureMap> maps{constant_map(32, 32, 1, 1.0), constant_map(32, 32, 1, 5.0)};
  GridSpec spec;
  spec.dims = {3, 3, 3};
  spec.origin = Vec3{-0.1, -0.1, -0.1};
  spec.spacing = 0.1;
  VoxelGrid grid = aggregate_variance(maps, cams, spec);

  for (std::size_t v = 0; v < grid.voxel_count(); ++v) {
    CHECK(grid.validity[v] == 1);
    CHECK(grid.data[v] == 0.0);
  }
}

TEST_CASE("aggregation is bit-identical under view permutation") {
  auto cams = ring_cameras(5);
  Rng rng(77);
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 5; ++i) {
    FeatureMap m(64, 64, 3);
    for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
    maps.push_back(m);
  }

  GridSpec spec;
  spec.dims = {4, 4, 4};
  spec.origin = Vec3{-0.4, -0.4, -0.4};
  spec.spacing = 0.25;
  VoxelGrid a = aggregate_variance(maps, cams, spec);

  std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  std::vector<FeatureMap> maps2;
  std::vector<Camera> cams2;
  for (std::size_t i : perm) {
    maps2.push_back(maps[i]);
    cams2.push_back(cams[i]);
  }
  VoxelGrid b = aggregate_variance(maps2, cams2, spec);

  REQUIRE(a.data.size() == b.data.size());
  for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
  for (std::size_t i = 0; i < a.validity.size(); ++i) CHECK(a.validity[i] == b.validity[i]);
}

TEST_CASE("variance channels are never negative") {
  auto cams = ring_cameras(4);
  Rng rng(31);
  std::vector<FeatureMap> maps;
  for (int i = 0; i < 4; ++i) {
    FeatureMap m(64, 64, 2);
    for (auto& v : m.data) v = rng.uniform(-3.0, 3.0);
    maps.push_back(m);
  }
  GridSpec spec;
  spec.dims = {6, 6, 6};
  spec.origin = Vec3{-0.5, -0.5, -0.5};
  spec.spacing = 0.2;
  VoxelGrid grid = aggregate_variance(maps, cams, spec);
  for (double v : grid.data) CHECK(v >= 0.0);
}

TEST_CASE("aggregation rejects bad inputs") {
  auto cams = ring_cameras(2);
  GridSpec spec;
  spec.dims = {3, 3, 3};
  std::vector<FeatureMap> one{constant_map(64, 64, 1, 0.0)};
  std::vector<Camera> one_cam{cams[0]};
  CHECK_THROWS_AS(aggregate_variance(one, one_cam, spec), ConfigError);

  std::vector<FeatureMap> mismatched{constant_map(64, 64, 1, 0.0),
                                     constant_map(64, 64, 2, 0.0)};
  CHECK_THROWS_AS(aggregate_variance(mismatched, cams, spec), ConfigError);
}

TEST_CASE("identity kernel reproduces valid voxels") {
  Rng rng(5);
  VoxelGrid g = random_grid({4, 4, 4}, 2, rng);
  g.validity[7] = 0;

  Conv3dLayer layer;
  layer.weight.dims = {2, 2, 3, 3, 3};
  layer.weight.data.assign(2 * 2 * 27, 0.0);
  // Center weight 1 on the matching channel pair.
  for (int c = 0; c < 2; ++c)
    layer.weight.data[((static_cast<std::size_t>(c) * 2 + c) * 3 + 1) * 9 + 1 * 3 + 1] = 1.0;
  layer.bias.dims = {2};
  layer.bias.data = {0.0, 0.0};

  Conv3dStack stack;
  stack.layers = {layer};
  VoxelGrid out = apply_conv3d(g, stack);

  for (std::size_t v = 0; v < g.voxel_count(); ++v)
    for (int c = 0; c < 2; ++c) {
      double want = g.validity[v] == 0 ? 0.0 : g.data[v * 2 + c];
      CHECK(out.data[v * 2 + c] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("all-ones kernel turns an impulse into a 27-voxel box") {
  VoxelGrid g({5, 5, 5}, Vec3{0, 0, 0}, 1.0, 1);
  for (auto& v : g.validity) v = 1;
  g.at(2, 2, 2, 0) = 1.0;

  Conv3dLayer layer;
  layer.weight.dims = {1, 1, 3, 3, 3};
  layer.weight.data.assign(27, 1.0);
  layer.bias.dims = {1};
  layer.bias.data = {0.0};
  Conv3dStack stack;
  stack.layers = {layer};

  VoxelGrid out = apply_conv3d(g, stack);
  for (int z = 0; z < 5; ++z)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x) {
        bool in_box = std::abs(x - 2) <= 1 && std::abs(y - 2) <= 1 && std::abs(z - 2) <= 1;
        CHECK(out.at(x, y, z, 0) == doctest::Approx(in_box ? 1.0 : 0.0));
      }
}

TEST_CASE("empty stack returns the input unchanged") {
  Rng rng(8);
  VoxelGrid g = random_grid({3, 3, 3}, 2, rng);
  Conv3dStack stack;
  VoxelGrid out = apply_conv3d(g, stack);
  CHECK(out.data == g.data);
  CHECK(out.validity == g.validity);
}

TEST_CASE("masked voxels stay zero through the whole stack") {
  Rng rng(9);
  VoxelGrid g = random_grid({4, 4, 4}, 1, rng);
  g.validity[0] = 0;
  g.validity[13] = 0;
  g.validity[63] = 0;

  Conv3dLayer layer;
  layer.weight.dims = {1, 1, 3, 3, 3};
  layer.weight.data.assign(27, 0.0);
  Rng wr(10);
  for (auto& w : layer.weight.data) w = wr.uniform(-0.3, 0.3);
  layer.bias.dims = {1};
  layer.bias.data = {0.5};  // nonzero bias would leak into masked voxels otherwise
  Conv3dStack stack;
  stack.layers = {layer, layer, layer};

  VoxelGrid out = apply_conv3d(g, stack);
  CHECK(out.data[0] == 0.0);
  CHECK(out.data[13] == 0.0);
  CHECK(out.data[63] == 0.0);
}

TEST_CASE("conv stack rejects channel-plan mismatches") {
  Rng rng(11);
  VoxelGrid g = random_grid({3, 3, 3}, 2, rng);
  Conv3dLayer layer;
  layer.weight.dims = {1, 3, 3, 3, 3};  // expects 3 input channels, grid has 2
  layer.weight.data.assign(81, 0.0);
  layer.bias.dims = {1};
  layer.bias.data = {0.0};
  Conv3dStack stack;
  stack.layers = {layer};
  CHECK_THROWS_AS(apply_conv3d(g, stack), ConfigError);
}

TEST_CASE("volume queries: centers, cell midpoint, fractional oracle") {
  Rng rng(12);
  VoxelGrid g = random_grid({4, 5, 6}, 3, rng);

  VolumeSample s = query_volume(g, g.center(2, 3, 4));
  REQUIRE(s.valid);
  for (int c = 0; c < 3; ++c) CHECK(s.value[c] == doctest::Approx(g.at(2, 3, 4, c)));

  // Center of the cell spanned by corners (0..1)^3: mean of 8 corners.
  Vec3 mid = g.origin + Vec3{0.5, 0.5, 0.5} * g.spacing;
  VolumeSample m = query_volume(g, mid);
  REQUIRE(m.valid);
  for (int c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) mean += g.at(dx, dy, dz, c);
    mean /= 8.0;
    CHECK(m.value[c] == doctest::Approx(mean).epsilon(1e-12));
  }

  // Fractional offset (0.3, 0.7, 0.1) in cell (1,1,1): independent 8-corner sum.
  Vec3 q = g.origin + Vec3{1.3, 1.7, 1.1} * g.spacing;
  VolumeSample f = query_volume(g, q);
  REQUIRE(f.valid);
  for (int c = 0; c < 3; ++c) {
    double want = 0.0;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double w = (dx ? 0.3 : 0.7) * (dy ? 0.7 : 0.3) * (dz ? 0.1 : 0.9);
          want += w * g.at(1 + dx, 1 + dy, 1 + dz, c);
        }
    CHECK(f.value[c] == doctest::Approx(want).epsilon(1e-9));
  }

  VolumeSample outside = query_volume(g, g.origin - Vec3{1, 0, 0});
  CHECK_FALSE(outside.valid);
  for (int c = 0; c < 3; ++c) CHECK(outside.value[c] == 0.0);
}

TEST_CASE("volume stencil matches finite differences of the query") {
  Rng rng(13);
  VoxelGrid g = random_grid({4, 4, 4}, 1, rng);
  Vec3 q = g.origin + Vec3{1.37, 0.62, 2.18} * g.spacing;

  VolumeStencil st = volume_stencil(g, q);
  REQUIRE(st.count == 8);
  double wsum = 0.0;
  for (int i = 0; i < 8; ++i) wsum += st.weight[i];
  CHECK(wsum == doctest::Approx(1.0).epsilon(1e-12));

  const double h = 1e-6;
  for (int i = 0; i < 8; ++i) {
    double saved = g.data[st.voxel[i]];
    g.data[st.voxel[i]] = saved + h;
    double up = query_volume(g, q).value[0];
    g.data[st.voxel[i]] = saved - h;
    double dn = query_volume(g, q).value[0];
    g.data[st.voxel[i]] = saved;
    double fd = (up - dn) / (2 * h);
    CHECK(st.weight[i] == doctest::Approx(fd).epsilon(1e-5));
  }
}

TEST_CASE("spatial gradient matches finite differences") {
  Rng rng(14);
  VoxelGrid g = random_grid({5, 5, 5}, 2, rng);
  Rng qr(15);
  for (int trial = 0; trial < 20; ++trial) {
    Vec3 q = g.origin +
             Vec3{qr.uniform(0.1, 3.9), qr.uniform(0.1, 3.9), qr.uniform(0.1, 3.9)} * g.spacing;
    auto grad = query_volume_gradient(g, q);
    const double h = 1e-6;
    for (int a = 0; a < 3; ++a) {
      Vec3 dq = q;
      dq[a] += h;
      auto up = query_volume(g, dq).value;
      dq[a] = q[a] - h;
      auto dn = query_volume(g, dq).value;
      for (int c = 0; c < 2; ++c) {
        double fd = (up[c] - dn[c]) / (2 * h);
        CHECK(grad[c][a] == doctest::Approx(fd).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("trilinear queries reproduce a globally linear function") {
  VoxelGrid g({6, 6, 6}, Vec3{-1, -1, -1}, 0.4, 1);
  for (auto& v : g.validity) v = 1;
  auto lin = [](const Vec3& p) { return 0.3 * p.x - 1.2 * p.y + 0.7 * p.z + 0.25; };
  for (int z = 0; z < 6; ++z)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 6; ++x) g.at(x, y, z, 0) = lin(g.center(x, y, z));

  Rng rng(16);
  for (int i = 0; i < 200; ++i) {
    Vec3 q{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)};
    VolumeSample s = query_volume(g, q);
    REQUIRE(s.valid);
    CHECK(std::abs(s.value[0] - lin(q)) < 1e-6);
  }
}

TEST_CASE("volume files round-trip and reject corruption") {
  gdtest::TempDir dir;
  Rng rng(17);
  VoxelGrid g({8, 8, 8}, Vec3{-1, -1, -1}, 0.25, 2);
  // f32 on disk: keep test values exactly representable.
  for (auto& v : g.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  for (auto& v : g.validity) v = static_cast<std::uint16_t>(rng.uniform_index(5));

  save_volume(dir.file("vol.bin"), g);
  VoxelGrid back = load_volume(dir.file("vol.bin"));
  CHECK(back.dims == g.dims);
  CHECK(back.channels == g.channels);
  CHECK(back.data == g.data);
  CHECK(back.validity == g.validity);

  std::string bytes = read_file(dir.file("vol.bin"));
  bytes[0] = 'X';
  atomic_write_file(dir.file("bad.bin"), bytes);
  CHECK_THROWS_AS(load_volume(dir.file("bad.bin")), FormatError);

  atomic_write_file(dir.file("trunc.bin"), bytes.substr(0, 40));
  CHECK_THROWS_AS(load_volume(dir.file("trunc.bin")), FormatError);
}

TEST_CASE("default grid size is constructible and round-trips") {
  GridSpec spec;
  CHECK(spec.dims == std::array<int, 3>{150, 150, 150});
  VoxelGrid g(spec.dims, spec.origin, spec.spacing, 1);
  g.at(75, 75, 75, 0) = 0.5;
  g.validity[g.voxel_index(75, 75, 75)] = 3;

  gdtest::TempDir dir;
  save_volume(dir.file("big.bin"), g);
  VoxelGrid back = load_volume(dir.file("big.bin"));
  CHECK(back.dims == g.dims);
  CHECK(back.at(75, 75, 75, 0) == 0.5);
  CHECK(back.validity[back.voxel_index(75, 75, 75)] == 3);
}

}  // TEST_SUITE
