// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <doctest.h>
#include <map>
#include <set>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "gd/rng.hpp"
#include "test_util.hpp"

using namespace gd;

namespace {

// Single positively oriented tet: unit corner simplex.
TetGrid single_tet(const std::array<double, 4>& sdf) {
  TetGrid g;
  g.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
  g.tets = {{0, 1, 2, 3}};
  g.sdf = {sdf[0], sdf[1], sdf[2], sdf[3]};
  g.deformation.assign(4, Vec3{0, 0, 0});
  g.local_edge.assign(4, 1.0);
  g.resolution = 2;
  return g;
}

TetGrid sphere_grid(int res, double radius = 1.0) {
  TetGrid g = init_tetgrid(res, Vec3{-1.3, -1.3, -1.3}, Vec3{1.3, 1.3, 1.3});
  for (std::size_t i = 0; i < g.vertices.size(); ++i) g.sdf[i] = g.vertices[i].norm() - radius;
  return g;
}

// Texture rig shared with the volume-renderer tests: passthrough geometry
// decoder over a one-channel volume, small hash + texture MLP.
FieldSet tiny_fieldset(std::uint64_t seed) {
  Rng rng(seed);
  VoxelGrid g({4, 4, 4}, Vec3{-1.2, -1.2, -1.2}, 2.4 / 3.0, 1);
  for (auto& v : g.data) v = rng.uniform(-0.4, 0.6);
  for (auto& v : g.validity) v = 2;

  FieldSet fs;
  fs.encoding.levels = 1;
  int enc_dim = fs.encoding.output_dim();
  Mlp geom;
  MlpLayer layer;
  layer.weight.dims = {1, static_cast<std::uint32_t>(enc_dim + 1)};
  layer.weight.data.assign(enc_dim + 1, 0.0);
  layer.weight.data[enc_dim] = 1.0;
  layer.bias.dims = {1};
  layer.bias.data = {0.0};
  geom.layers = {layer};

  fs.volume = std::move(g);
  fs.geometry = geom;
  fs.hash = make_hash_encoding(2, 1u << 6, 2, 4, 1.5);
  Rng hr(seed + 1);
  for (auto& v : fs.hash.tables) v = hr.uniform(-0.3, 0.3);
  Rng tr(seed + 2);
  fs.texture = make_mlp({fs.hash.output_dim() + 3, 6, 3}, Activation::Relu, Activation::Sigmoid,
                        tr);
  fs.validate();
  return fs;
}

Camera front_camera(int res, double focal_scale = 1.2) {
  Intrinsics intr;
  intr.width = res;
  intr.height = res;
  intr.focal = focal_scale * res;
  return look_at_pose({0.0, 0.0, 3.0}, Vec3{0, 0, 0}, intr);
}

// Canonical cyclic form: rotate so the smallest index leads. Preserves
// orientation, unlike sorting.
std::array<int, 3> canonical_cycle(const std::array<int, 3>& f) {
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (f[i] < f[k]) k = i;
  return {f[k], f[(k + 1) % 3], f[(k + 2) % 3]};
}

}  // namespace

TEST_SUITE("mesh") {

// ---------------------------------------------------------------------------
// Tet grid construction
// ---------------------------------------------------------------------------

TEST_CASE("tetgrid: closed-form counts and orientation") {
  for (int r : {2, 3, 5}) {
    TetGrid g = init_tetgrid(r, Vec3{-1, -1, -1}, Vec3{1, 1, 1});
    std::size_t corners = static_cast<std::size_t>(r + 1) * (r + 1) * (r + 1);
    std::size_t centers = static_cast<std::size_t>(r) * r * r;
    CHECK(g.vertices.size() == corners + centers);
    CHECK(g.tets.size() == 12u * r * r * r);
    for (const auto& t : g.tets) {
      Vec3 a = g.vertices[t[0]], b = g.vertices[t[1]], c = g.vertices[t[2]],
           d = g.vertices[t[3]];
      CHECK(dot(b - a, cross(c - a, d - a)) > 0.0);
    }
    // BCC lattice: every vertex's shortest incident edge is a corner-center
    // edge of length sqrt(3)/2 * cell.
    double cell = 2.0 / r;
    for (double e : g.local_edge) CHECK(e == doctest::Approx(std::sqrt(3.0) / 2 * cell));
  }
}

TEST_CASE("tetgrid: default sdf empty, fieldset sdf sampled") {
  TetGrid g = init_tetgrid(3, Vec3{-1, -1, -1}, Vec3{1, 1, 1});
  for (double s : g.sdf) CHECK(s == 1.0);
  CHECK(marching_tetrahedra(g).empty());

  FieldSet fs = tiny_fieldset(11);
  TetGrid gs = init_tetgrid(3, Vec3{-1, -1, -1}, Vec3{1, 1, 1}, &fs);
  for (std::size_t i = 0; i < gs.vertices.size(); ++i)
    CHECK(gs.sdf[i] == decode_sdf(fs, gs.vertices[i]));
}

TEST_CASE("tetgrid: preconditions and invariants") {
  CHECK_THROWS_AS(init_tetgrid(1, Vec3{-1, -1, -1}, Vec3{1, 1, 1}), ConfigError);
  CHECK_THROWS_AS(init_tetgrid(4, Vec3{1, -1, -1}, Vec3{1, 1, 1}), ConfigError);

  TetGrid g = single_tet({-1, 1, 1, 1});
  g.validate();

  TetGrid bad_index = g;
  bad_index.tets[0][2] = 9;
  CHECK_THROWS_AS(bad_index.validate(), ConfigError);

  TetGrid flipped = g;
  std::swap(flipped.tets[0][0], flipped.tets[0][1]);
  CHECK_THROWS_AS(flipped.validate(), ConfigError);

  TetGrid stretched = g;
  stretched.deformation[0] = Vec3{0.9, 0, 0};  // bound is 0.5 * local_edge = 0.5
  CHECK_THROWS_AS(stretched.validate(), ConfigError);
  stretched.clamp_deformation();
  CHECK(stretched.deformation[0].norm() == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(stretched.deformation[0].y == 0.0);
  stretched.validate();

  TetGrid ragged = g;
  ragged.sdf.pop_back();
  CHECK_THROWS_AS(ragged.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// Marching tetrahedra
// ---------------------------------------------------------------------------

TEST_CASE("marching tets: single tet emits the midpoint triangle") {
  TetGrid g = single_tet({-1, 1, 1, 1});
  std::vector<VertexProvenance> prov;
  TriMesh m = marching_tetrahedra(g, &prov);

  REQUIRE(m.vertices.size() == 3);
  REQUIRE(m.faces.size() == 1);
  std::set<std::array<double, 3>> got;
  for (const Vec3& v : m.vertices) got.insert({v.x, v.y, v.z});
  std::set<std::array<double, 3>> want = {{0.5, 0, 0}, {0, 0.5, 0}, {0, 0, 0.5}};
  CHECK(got == want);

  for (const auto& p : prov) {
    CHECK(p.a == 0);
    CHECK(p.t == 0.5);
    CHECK_FALSE(p.snapped);
  }

  // Outward: away from the inside vertex at the origin.
  const auto& f = m.faces[0];
  Vec3 n = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
  CHECK(dot(n, Vec3{1, 1, 1}) > 0.0);
}

TEST_CASE("marching tets: trivial sign configurations") {
  CHECK(marching_tetrahedra(single_tet({1, 1, 1, 1})).empty());
  CHECK(marching_tetrahedra(single_tet({-1, -1, -1, -1})).empty());
  // All-zero counts as outside: no spurious sheet on a flat zero field.
  CHECK(marching_tetrahedra(single_tet({0, 0, 0, 0})).empty());

  // Two inside: quad split into two triangles, four distinct vertices.
  TriMesh quad = marching_tetrahedra(single_tet({-1, -2, 1, 1}));
  CHECK(quad.vertices.size() == 4);
  CHECK(quad.faces.size() == 2);

  // Three inside: single triangle again.
  TriMesh tri = marching_tetrahedra(single_tet({-1, -1, -1, 1}));
  CHECK(tri.vertices.size() == 3);
  CHECK(tri.faces.size() == 1);
  Vec3 n = cross(tri.vertices[tri.faces[0][1]] - tri.vertices[tri.faces[0][0]],
                 tri.vertices[tri.faces[0][2]] - tri.vertices[tri.faces[0][0]]);
  CHECK(dot(n, Vec3{0, 0, 1}) > 0.0);  // outside vertex sits at +z
}

TEST_CASE("marching tets: zero-sdf vertices snap and weld") {
  TetGrid g = single_tet({-1, 0, 1, 1});
  std::vector<VertexProvenance> prov;
  TriMesh m = marching_tetrahedra(g, &prov);
  REQUIRE(m.faces.size() == 1);
  REQUIRE(m.vertices.size() == 3);

  int snapped = -1;
  for (std::size_t i = 0; i < prov.size(); ++i)
    if (prov[i].snapped) snapped = static_cast<int>(i);
  REQUIRE(snapped >= 0);
  CHECK(prov[snapped].b == 1);
  CHECK((m.vertices[snapped] - Vec3{1, 0, 0}).norm() == 0.0);
}

TEST_CASE("marching tets: plane field is reconstructed exactly") {
  Vec3 n = normalized(Vec3{0.3, -0.5, 0.8});
  double d = 0.1234;
  TetGrid g = init_tetgrid(5, Vec3{-1, -1, -1}, Vec3{1, 1, 1});
  for (std::size_t i = 0; i < g.vertices.size(); ++i) g.sdf[i] = dot(n, g.vertices[i]) - d;

  TriMesh m = marching_tetrahedra(g);
  REQUIRE(!m.empty());
  for (const Vec3& v : m.vertices) CHECK(std::abs(dot(n, v) - d) < 1e-9);

  // Orientation follows the gradient, which is n everywhere.
  for (const auto& f : m.faces) {
    Vec3 fn = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
    CHECK(dot(fn, n) > 0.0);
  }
}

TEST_CASE("marching tets: sphere accuracy at resolution 24") {
  TetGrid g = sphere_grid(24);
  TriMesh m = marching_tetrahedra(g);
  REQUIRE(!m.empty());
  double cell_diag = std::sqrt(3.0) * 2.6 / 24.0;
  for (const Vec3& v : m.vertices) CHECK(std::abs(v.norm() - 1.0) < cell_diag);
  CHECK(m.watertight());

  // Outward orientation: radial direction, since the sphere is centered.
  for (const auto& f : m.faces) {
    Vec3 c = (m.vertices[f[0]] + m.vertices[f[1]] + m.vertices[f[2]]) * (1.0 / 3.0);
    Vec3 fn = cross(m.vertices[f[1]] - m.vertices[f[0]], m.vertices[f[2]] - m.vertices[f[0]]);
    CHECK(dot(fn, c) > 0.0);
  }
}

TEST_CASE("marching tets: sign flip reverses orientation and nothing else") {
  // Vertex emission order may permute (quad cases walk their edges in the
  // opposite sense), so compare position sets and position-keyed faces.
  TetGrid g = sphere_grid(6);
  TriMesh a = marching_tetrahedra(g);
  for (double& s : g.sdf) s = -s;
  TriMesh b = marching_tetrahedra(g);

  REQUIRE(a.vertices.size() == b.vertices.size());
  REQUIRE(a.faces.size() == b.faces.size());

  // Crossing positions are bit-identical: t = s/(s - s') is invariant under
  // global negation. Rank vertices by coordinates to get a shared labeling.
  auto rank_of = [](const TriMesh& m) {
    std::map<std::array<double, 3>, int> rank;
    for (const Vec3& v : m.vertices) rank.emplace(std::array<double, 3>{v.x, v.y, v.z}, 0);
    int next = 0;
    for (auto& [pos, r] : rank) r = next++;
    return rank;
  };
  auto ra = rank_of(a), rb = rank_of(b);
  REQUIRE(ra.size() == a.vertices.size());  // no duplicates
  auto keys_equal = [&]() {
    auto ia = ra.begin();
    auto ib = rb.begin();
    for (; ia != ra.end(); ++ia, ++ib)
      if (ia->first != ib->first) return false;
    return true;
  };
  CHECK(keys_equal());

  auto relabel = [](const TriMesh& m, std::map<std::array<double, 3>, int>& rank,
                    bool reversed) {
    std::multiset<std::array<int, 3>> out;
    for (const auto& f : m.faces) {
      std::array<int, 3> r;
      for (int i = 0; i < 3; ++i) {
        const Vec3& v = m.vertices[f[i]];
        r[i] = rank.at({v.x, v.y, v.z});
      }
      if (reversed) std::swap(r[1], r[2]);
      out.insert(canonical_cycle(r));
    }
    return out;
  };
  CHECK(relabel(a, ra, false) == relabel(b, rb, true));
}

TEST_CASE("marching tets: welding leaves no near-duplicate vertices") {
  TetGrid g = sphere_grid(12);
  TriMesh m = marching_tetrahedra(g);
  REQUIRE(m.vertices.size() > 100);
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    for (std::size_t j = i + 1; j < m.vertices.size(); ++j)
      CHECK((m.vertices[i] - m.vertices[j]).norm() > 1e-12);
  m.validate();
}

TEST_CASE("marching tets: deformation moves crossings") {
  TetGrid g = single_tet({-1, 1, 1, 1});
  g.deformation[0] = Vec3{0.25, 0, 0};  // within the 0.5 bound
  TriMesh m = marching_tetrahedra(g);
  // Crossing on edge (0,1): midpoint of deformed endpoints.
  bool found = false;
  for (const Vec3& v : m.vertices)
    if ((v - Vec3{0.625, 0, 0}).norm() < 1e-15) found = true;
  CHECK(found);
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

TEST_CASE("surface sampling: barycentric containment on one triangle") {
  TriMesh m;
  m.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}};
  m.faces = {{0, 1, 2}};
  SurfaceSample s = sample_surface_points(m, 500, 42);
  REQUIRE(s.points.size() == 500);
  REQUIRE(s.normals.size() == 500);
  for (const Vec3& p : s.points) {
    CHECK(p.z == 0.0);
    CHECK(p.x >= 0.0);
    CHECK(p.y >= 0.0);
    CHECK(p.x + p.y <= 1.0 + 1e-12);
  }
  for (const Vec3& n : s.normals) CHECK((n - Vec3{0, 0, 1}).norm() < 1e-15);

  SurfaceSample again = sample_surface_points(m, 500, 42);
  for (std::size_t i = 0; i < 500; ++i) CHECK((s.points[i] - again.points[i]).norm() == 0.0);
  SurfaceSample other = sample_surface_points(m, 500, 43);
  bool differs = false;
  for (std::size_t i = 0; i < 500; ++i)
    if ((s.points[i] - other.points[i]).norm() > 0) differs = true;
  CHECK(differs);
}

TEST_CASE("surface sampling: area weighting at ratio 1:3") {
  TriMesh m;
  m.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0},  Vec3{0, 1, 0},
                Vec3{2, 0, 0}, Vec3{5, 0, 0}, Vec3{2, 1, 0}};
  m.faces = {{0, 1, 2}, {3, 4, 5}};  // areas 0.5 and 1.5
  SurfaceSample s = sample_surface_points(m, 10000, 7);
  int large = 0;
  for (const Vec3& p : s.points)
    if (p.x >= 2.0) ++large;
  // Binomial 99% interval around p = 0.75 at n = 10000: 7500 +- 2.576*43.3.
  CHECK(large >= 7388);
  CHECK(large <= 7612);
}

TEST_CASE("surface sampling: rejects empty meshes and bad counts") {
  TriMesh empty;
  CHECK_THROWS_AS(sample_surface_points(empty, 10, 0), ConfigError);
  TriMesh m;
  m.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}};
  m.faces = {{0, 1, 2}};
  CHECK_THROWS_AS(sample_surface_points(m, 0, 0), ConfigError);
}

// ---------------------------------------------------------------------------
// Watertight flag
// ---------------------------------------------------------------------------

TEST_CASE("watertight: computed from edge pairing") {
  TriMesh tri;
  tri.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}};
  tri.faces = {{0, 1, 2}};
  CHECK_FALSE(tri.watertight());  // boundary edges

  // Tetrahedron surface: closed, consistently wound.
  TriMesh tet;
  tet.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
  tet.faces = {{0, 2, 1}, {0, 1, 3}, {1, 2, 3}, {0, 3, 2}};
  CHECK(tet.watertight());

  // Same closed surface with one face flipped: directed edges double up.
  TriMesh bad = tet;
  std::swap(bad.faces[0][1], bad.faces[0][2]);
  CHECK_FALSE(bad.watertight());

  TriMesh none;
  CHECK_FALSE(none.watertight());
}

// ---------------------------------------------------------------------------
// Mesh I/O
// ---------------------------------------------------------------------------

TEST_CASE("obj: export format and exact round-trip") {
  gdtest::TempDir dir;
  TetGrid g = sphere_grid(5);
  TriMesh m = marching_tetrahedra(g);
  m.colors.resize(m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i)
    m.colors[i] = (m.vertices[i] + Vec3{1.3, 1.3, 1.3}) * (1.0 / 2.6);

  std::string path = dir.file("sphere.obj");
  save_obj(path, m);

  std::string text = read_file(path);
  std::size_t nv = 0, nvn = 0, nf = 0;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.rfind("v ", 0) == 0) ++nv;
    if (line.rfind("vn ", 0) == 0) ++nvn;
    if (line.rfind("f ", 0) == 0) {
      ++nf;
      CHECK(line.find("//") != std::string::npos);
    }
  }
  CHECK(nv == m.vertices.size());
  CHECK(nvn == m.vertices.size());
  CHECK(nf == m.faces.size());

  TriMesh back = load_obj(path);
  REQUIRE(back.vertices.size() == m.vertices.size());
  REQUIRE(back.faces.size() == m.faces.size());
  REQUIRE(back.colors.size() == m.colors.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) {
    CHECK((back.vertices[i] - m.vertices[i]).norm() == 0.0);  // 17 digits round-trip
    CHECK((back.colors[i] - m.colors[i]).norm() == 0.0);
  }
  for (std::size_t i = 0; i < m.faces.size(); ++i) CHECK(back.faces[i] == m.faces[i]);
}

TEST_CASE("obj: import fans polygons and resolves negative indices") {
  gdtest::TempDir dir;
  std::string path = dir.file("quad.obj");
  atomic_write_file(path,
                    "# comment\n"
                    "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\n"
                    "f 1 2 3 4\n"
                    "f -4 -3 -2\n");
  TriMesh m = load_obj(path);
  REQUIRE(m.vertices.size() == 4);
  REQUIRE(m.faces.size() == 3);  // quad fans into 2, plus the negative-index face
  CHECK(m.faces[0] == std::array<int, 3>{0, 1, 2});
  CHECK(m.faces[1] == std::array<int, 3>{0, 2, 3});
  CHECK(m.faces[2] == std::array<int, 3>{0, 1, 2});
}

TEST_CASE("obj: malformed input names the offending line") {
  gdtest::TempDir dir;
  std::string path = dir.file("bad.obj");

  auto expect_format_error_at = [&](const std::string& marker) {
    bool threw = false;
    try {
      load_obj(path);
    } catch (const FormatError& e) {
      threw = true;
      CHECK(std::string(e.what()).find(marker) != std::string::npos);
    }
    CHECK(threw);
  };

  atomic_write_file(path, "v 0 0\n");
  expect_format_error_at(":1:");

  atomic_write_file(path, "v 0 0 0\nv 1 0 0\nf 1 2 9\n");
  expect_format_error_at(":3:");

  atomic_write_file(path, "v 0 0 0\nf 1 x 1\n");
  CHECK_THROWS_AS(load_obj(path), FormatError);
}

TEST_CASE("ply: binary little-endian layout") {
  gdtest::TempDir dir;
  TriMesh m;
  m.vertices = {Vec3{0.25, -0.5, 1.0}, Vec3{1, 0, 0}, Vec3{0, 1, 0}};
  m.faces = {{0, 1, 2}};

  SUBCASE("positions only") {
    std::string path = dir.file("plain.ply");
    save_ply(path, m);
    std::string blob = read_file(path);
    std::size_t header_end = blob.find("end_header\n");
    REQUIRE(header_end != std::string::npos);
    CHECK(blob.rfind("ply\nformat binary_little_endian 1.0\n", 0) == 0);
    CHECK(blob.find("element vertex 3\n") != std::string::npos);
    CHECK(blob.find("element face 1\n") != std::string::npos);
    std::size_t body = header_end + std::string("end_header\n").size();
    CHECK(blob.size() - body == 3 * 12 + 1 * 13);

    // First vertex: three LE f32.
    std::istringstream bs(blob.substr(body));
    CHECK(read_f32(bs) == doctest::Approx(0.25));
    CHECK(read_f32(bs) == doctest::Approx(-0.5));
    CHECK(read_f32(bs) == doctest::Approx(1.0));
  }

  SUBCASE("with vertex colors") {
    m.colors = {Vec3{1, 0, 0}, Vec3{0, 1, 0}, Vec3{0, 0, 1}};
    std::string path = dir.file("colored.ply");
    save_ply(path, m);
    std::string blob = read_file(path);
    CHECK(blob.find("property uchar red\n") != std::string::npos);
    std::size_t body = blob.find("end_header\n") + std::string("end_header\n").size();
    CHECK(blob.size() - body == 3 * 15 + 1 * 13);
    // First vertex color bytes: pure red.
    CHECK(static_cast<unsigned char>(blob[body + 12]) == 255);
    CHECK(static_cast<unsigned char>(blob[body + 13]) == 0);
    CHECK(static_cast<unsigned char>(blob[body + 14]) == 0);
  }
}

// ---------------------------------------------------------------------------
// Ray-triangle intersection and normal maps
// ---------------------------------------------------------------------------

TEST_CASE("intersect: barycentric hit, miss, nearest wins") {
  TriMesh m;
  m.vertices = {Vec3{0, 0, 0}, Vec3{1, 0, 0}, Vec3{0, 1, 0},
                Vec3{0, 0, 1}, Vec3{1, 0, 1}, Vec3{0, 1, 1}};
  m.faces = {{0, 1, 2}, {3, 4, 5}};  // two parallel copies, z = 0 and z = 1

  MeshHit hit = intersect_mesh(m, Vec3{0.2, 0.3, 3.0}, Vec3{0, 0, -1});
  REQUIRE(hit.valid());
  CHECK(hit.face == 1);  // z = 1 plane is nearer from above
  CHECK(hit.t == doctest::Approx(2.0));
  CHECK(hit.u == doctest::Approx(0.2));
  CHECK(hit.v == doctest::Approx(0.3));

  CHECK_FALSE(intersect_mesh(m, Vec3{0.9, 0.9, 3.0}, Vec3{0, 0, -1}).valid());
  CHECK_FALSE(intersect_mesh(m, Vec3{0.2, 0.3, 3.0}, Vec3{0, 0, 1}).valid());
  CHECK_FALSE(intersect_mesh(m, Vec3{0.2, 0.3, 3.0}, Vec3{1, 0, 0}).valid());

  // Equal-distance duplicate faces: the lower index wins.
  TriMesh dup;
  dup.vertices = m.vertices;
  dup.faces = {{0, 1, 2}, {0, 1, 2}};
  MeshHit tie = intersect_mesh(dup, Vec3{0.2, 0.3, 3.0}, Vec3{0, 0, -1});
  CHECK(tie.face == 0);
}

TEST_CASE("normal map: camera-facing triangle encodes (0,0,1)") {
  TriMesh m;
  m.vertices = {Vec3{-3, -3, 0}, Vec3{3, -3, 0}, Vec3{0, 4, 0}};
  m.faces = {{0, 1, 2}};
  Camera cam = front_camera(9);
  Image img = render_normal_map(m, cam, 9, 9);
  Vec3 center = img.pixel(4, 4);
  CHECK(center.x == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(center.y == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(center.z == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("normal map: empty mesh renders pure background") {
  Camera cam = front_camera(5);
  Image img = render_normal_map(TriMesh{}, cam, 5, 5);
  for (double v : img.data) CHECK(v == 128.0 / 255.0);
}

TEST_CASE("normal map: sphere center pixel faces the camera") {
  TetGrid g = sphere_grid(48);
  TriMesh m = marching_tetrahedra(g);
  Camera cam = front_camera(33);
  Image img = render_normal_map(m, cam, 33, 33);
  Vec3 n = img.pixel(16, 16) * 2.0 - Vec3{1, 1, 1};
  CHECK((n - Vec3{0, 0, 1}).norm() < 0.05);

  int background = 0;
  for (int y = 0; y < 33; ++y)
    for (int x = 0; x < 33; ++x)
      if ((img.pixel(x, y) - Vec3{128.0 / 255.0, 128.0 / 255.0, 128.0 / 255.0}).norm() < 1e-12)
        ++background;
  CHECK(background > 0);
  CHECK(background < 33 * 33);
}

TEST_CASE("normal map backward: finite differences away from silhouettes") {
  // Slightly non-planar quad covering the whole view: no background pixels,
  // so no silhouette exclusions.
  TriMesh m;
  m.vertices = {Vec3{-2, -2, 0}, Vec3{2, -2.07, 0.1}, Vec3{2.03, 2, 0}, Vec3{-2, 2.01, -0.1}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  Camera cam = front_camera(9);
  const int w = 9, h = 9;

  Rng rng(99);
  std::vector<Vec3> dpixel(w * h);
  for (auto& d : dpixel) d = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};

  auto loss = [&](const TriMesh& mesh) {
    Image img = render_normal_map(mesh, cam, w, h);
    double acc = 0.0;
    for (int p = 0; p < w * h; ++p)
      acc += dpixel[p].x * img.data[p * 3] + dpixel[p].y * img.data[p * 3 + 1] +
             dpixel[p].z * img.data[p * 3 + 2];
    return acc;
  };

  std::vector<Vec3> grad;
  normal_map_backward(m, cam, w, h, dpixel, &grad);
  REQUIRE(grad.size() == 4);

  const double eps = 1e-5;
  int checked = 0;
  for (std::size_t vi = 0; vi < m.vertices.size(); ++vi)
    for (int axis = 0; axis < 3; ++axis) {
      TriMesh plus = m, minus = m;
      plus.vertices[vi][axis] += eps;
      minus.vertices[vi][axis] -= eps;
      double fd = (loss(plus) - loss(minus)) / (2 * eps);
      double an = grad[vi][axis];
      if (std::abs(fd) < 1e-10 && std::abs(an) < 1e-10) continue;
      CHECK(std::abs(fd - an) < 1e-3 * std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }
  CHECK(checked >= 9);
}

TEST_CASE("normal map backward: silhouette pixels contribute nothing") {
  // Tiny triangle: every hit pixel borders a miss, so all gradients vanish.
  TriMesh m;
  m.vertices = {Vec3{-0.2, -0.2, 0}, Vec3{0.2, -0.2, 0}, Vec3{0, 0.25, 0}};
  m.faces = {{0, 1, 2}};
  Camera cam = front_camera(9);
  std::vector<Vec3> dpixel(81, Vec3{1, 1, 1});
  std::vector<Vec3> grad;
  normal_map_backward(m, cam, 9, 9, dpixel, &grad);

  Image img = render_normal_map(m, cam, 9, 9);
  int hits = 0;
  for (int p = 0; p < 81; ++p)
    if (img.data[p * 3] != 128.0 / 255.0) ++hits;
  REQUIRE(hits > 0);  // the triangle is visible
  for (const Vec3& gv : grad) CHECK(gv.norm() == 0.0);
}

// ---------------------------------------------------------------------------
// Mesh color rendering
// ---------------------------------------------------------------------------

TEST_CASE("mesh color: surface points through the texture field") {
  FieldSet fs = tiny_fieldset(5);
  TriMesh m;
  m.vertices = {Vec3{-0.8, -0.8, 0}, Vec3{0.8, -0.8, 0}, Vec3{0, 1, 0}};
  m.faces = {{0, 1, 2}};
  Camera cam = front_camera(7);
  Vec3 bg{0.2, 0.4, 0.6};
  Image img = render_mesh_color(m, fs, cam, 7, 7, bg);

  // Center pixel: compute the hit point independently and decode.
  Ray ray = pixel_ray(cam, 3, 3, 0.0, 1.0);
  MeshHit hit = intersect_mesh(m, ray.origin, ray.direction);
  REQUIRE(hit.valid());
  Vec3 p = m.vertices[0] + (m.vertices[1] - m.vertices[0]) * hit.u +
           (m.vertices[2] - m.vertices[0]) * hit.v;
  CHECK((img.pixel(3, 3) - decode_color(fs, p)).norm() < 1e-15);

  // Corner pixel misses the triangle: exact background.
  CHECK((img.pixel(0, 0) - bg).norm() == 0.0);
}

TEST_CASE("mesh color backward: finite differences on texture parameters") {
  FieldSet fs = tiny_fieldset(17);
  TriMesh m;
  m.vertices = {Vec3{-2, -2, 0}, Vec3{2, -2, 0}, Vec3{0, 3, 0}};
  m.faces = {{0, 1, 2}};
  Camera cam = front_camera(5);
  const int w = 5, h = 5;

  Rng rng(3);
  std::vector<Vec3> dpixel(w * h);
  for (auto& d : dpixel) d = Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};

  MlpGrads dtexture;
  dtexture.init_like(fs.texture);
  std::vector<double> dtables(fs.hash.tables.size(), 0.0);
  mesh_color_backward(m, fs, cam, w, h, dpixel, &dtexture, &dtables);

  auto loss = [&](const FieldSet& f) {
    Image img = render_mesh_color(m, f, cam, w, h, Vec3{0, 0, 0});
    double acc = 0.0;
    for (int p = 0; p < w * h; ++p)
      acc += dpixel[p].x * img.data[p * 3] + dpixel[p].y * img.data[p * 3 + 1] +
             dpixel[p].z * img.data[p * 3 + 2];
    return acc;
  };

  const double eps = 1e-6;
  int checked = 0;

  // Texture MLP weights, strided sample.
  for (std::size_t l = 0; l < fs.texture.layers.size(); ++l)
    for (std::size_t i = 0; i < fs.texture.layers[l].weight.data.size(); i += 7) {
      FieldSet plus = fs, minus = fs;
      plus.texture.layers[l].weight.data[i] += eps;
      minus.texture.layers[l].weight.data[i] -= eps;
      double fd = (loss(plus) - loss(minus)) / (2 * eps);
      double an = dtexture.dweight[l].data[i];
      CHECK(std::abs(fd - an) < 1e-4 * std::max({std::abs(fd), std::abs(an), 1e-6}));
      ++checked;
    }

  // Hash tables: check entries that received gradient.
  int table_checked = 0;
  for (std::size_t i = 0; i < dtables.size() && table_checked < 8; ++i) {
    if (dtables[i] == 0.0) continue;
    FieldSet plus = fs, minus = fs;
    plus.hash.tables[i] += eps;
    minus.hash.tables[i] -= eps;
    double fd = (loss(plus) - loss(minus)) / (2 * eps);
    CHECK(std::abs(fd - dtables[i]) < 1e-4 * std::max({std::abs(fd), std::abs(dtables[i]), 1e-6}));
    ++table_checked;
  }
  CHECK(checked >= 5);
  CHECK(table_checked >= 1);
}

// ---------------------------------------------------------------------------
// Mesh fine-tuning
// ---------------------------------------------------------------------------

namespace {

MeshFinetuneConfig tiny_finetune_config(int geo_iters, int tex_iters) {
  MeshFinetuneConfig cfg;
  cfg.geometry_iterations = geo_iters;
  cfg.texture_iterations = tex_iters;
  cfg.width = 8;
  cfg.height = 8;
  cfg.focal = 7.0;
  cfg.eta_sdf = 1e-3;
  cfg.eta_deform = 1e-3;
  cfg.eta_texture = 1e-3;
  cfg.eta_tables = 1e-3;
  cfg.seed = 21;
  return cfg;
}

}  // namespace

TEST_CASE("mesh finetune: zero iterations change nothing") {
  TetGrid grid = sphere_grid(4);
  TetGrid before = grid;
  FieldSet fs = tiny_fieldset(31);
  std::uint64_t tex_sum = fs.texture.checksum();

  DiffusionSchedule sched;
  std::vector<double> mu(8 * 8 * 3, 0.5);
  AnalyticGaussianProvider pre(mu, 0.3);
  AnalyticGaussianProvider lora(mu, 0.3);

  MeshFinetuneResult res = mesh_finetune(grid, fs, pre, lora, sched, tiny_finetune_config(0, 0));
  CHECK(res.geometry_trace.empty());
  CHECK(res.texture_trace.empty());
  for (std::size_t i = 0; i < grid.sdf.size(); ++i) {
    CHECK(grid.sdf[i] == before.sdf[i]);
    CHECK((grid.deformation[i] - before.deformation[i]).norm() == 0.0);
  }
  CHECK(fs.texture.checksum() == tex_sum);
}

TEST_CASE("mesh finetune: both phases update their blocks and respect bounds") {
  TetGrid grid = sphere_grid(4);
  TetGrid before = grid;
  FieldSet fs = tiny_fieldset(31);
  std::uint64_t geom_sum = fs.geometry.checksum();
  std::vector<double> tables_before = fs.hash.tables;

  DiffusionSchedule sched;
  std::vector<double> mu(8 * 8 * 3, 0.65);
  AnalyticGaussianProvider pre(mu, 0.3);
  TrainableNetConfig nc;
  nc.width = 8;
  nc.height = 8;
  nc.seed = 4;
  TrainableNetProvider lora(nc);

  MeshFinetuneConfig cfg = tiny_finetune_config(3, 3);
  MeshFinetuneResult res = mesh_finetune(grid, fs, pre, lora, sched, cfg);

  REQUIRE(res.geometry_trace.size() == 3);
  REQUIRE(res.texture_trace.size() == 3);
  for (const auto& row : res.geometry_trace) {
    CHECK(row.vsd_norm > 0.0);
    CHECK(row.lora_loss > 0.0);
  }

  bool sdf_moved = false;
  for (std::size_t i = 0; i < grid.sdf.size(); ++i)
    if (grid.sdf[i] != before.sdf[i]) sdf_moved = true;
  CHECK(sdf_moved);
  grid.validate();  // deformation bound holds after updates

  bool tables_moved = false;
  for (std::size_t i = 0; i < fs.hash.tables.size(); ++i)
    if (fs.hash.tables[i] != tables_before[i]) tables_moved = true;
  CHECK(tables_moved);
  CHECK(fs.geometry.checksum() == geom_sum);
}

TEST_CASE("mesh finetune: deterministic under seed") {
  DiffusionSchedule sched;
  std::vector<double> mu(8 * 8 * 3, 0.65);
  MeshFinetuneConfig cfg = tiny_finetune_config(2, 2);

  auto run = [&]() {
    TetGrid grid = sphere_grid(4);
    FieldSet fs = tiny_fieldset(31);
    AnalyticGaussianProvider pre(mu, 0.3);
    TrainableNetConfig nc;
    nc.width = 8;
    nc.height = 8;
    nc.seed = 4;
    TrainableNetProvider lora(nc);
    MeshFinetuneResult res = mesh_finetune(grid, fs, pre, lora, sched, cfg);
    return std::make_pair(grid, res);
  };

  auto [grid1, res1] = run();
  auto [grid2, res2] = run();
  for (std::size_t i = 0; i < grid1.sdf.size(); ++i) {
    CHECK(grid1.sdf[i] == grid2.sdf[i]);
    CHECK((grid1.deformation[i] - grid2.deformation[i]).norm() == 0.0);
  }
  for (std::size_t i = 0; i < res1.geometry_trace.size(); ++i) {
    CHECK(res1.geometry_trace[i].vsd_norm == res2.geometry_trace[i].vsd_norm);
    CHECK(res1.geometry_trace[i].lora_loss == res2.geometry_trace[i].lora_loss);
  }
}

TEST_CASE("mesh finetune: identity harness converges on normal-map frames") {
  // Same convergence oracle as the field refinement loop, sized like a
  // small normal map.
  DiffusionSchedule sched;
  Rng rng(12);
  std::vector<double> x0(8 * 8 * 3), mu(8 * 8 * 3);
  for (auto& v : x0) v = rng.uniform(0.0, 1.0);
  for (auto& v : mu) v = rng.uniform(0.0, 1.0);

  std::vector<double> trace = vsd_identity_harness(x0, mu, sched, 2000, 0.05, 3);
  REQUIRE(trace.size() == 2001);
  CHECK(trace.back() < 0.05 * trace.front());

  // 10-step windowed means are non-increasing.
  std::vector<double> windows;
  for (std::size_t i = 0; i + 10 <= trace.size(); i += 10) {
    double acc = 0.0;
    for (std::size_t j = i; j < i + 10; ++j) acc += trace[j];
    windows.push_back(acc / 10.0);
  }
  for (std::size_t i = 1; i < windows.size(); ++i) CHECK(windows[i] <= windows[i - 1] + 1e-12);
}

}  // TEST_SUITE
