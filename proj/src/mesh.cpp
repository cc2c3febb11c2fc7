// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/mesh.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_map>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "gd/log.hpp"
#include "gd/render.hpp"

namespace gd {

namespace {

double tet_signed_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return dot(b - a, cross(c - a, d - a)) / 6.0;
}

double face_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * cross(b - a, c - a).norm();
}

struct PairHash {
  std::size_t operator()(const std::pair<int, int>& p) const {
    return std::hash<long long>()((static_cast<long long>(p.first) << 32) ^
                                  static_cast<unsigned>(p.second));
  }
};

double vec3_block_norm(const std::vector<Vec3>& v) {
  double acc = 0.0;
  for (const auto& g : v) acc += g.x * g.x + g.y * g.y + g.z * g.z;
  return std::sqrt(acc);
}

bool vec3_block_finite(const std::vector<Vec3>& v) {
  for (const auto& g : v)
    if (!std::isfinite(g.x) || !std::isfinite(g.y) || !std::isfinite(g.z)) return false;
  return true;
}

double scalar_block_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

bool scalar_block_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

void clip_block(std::vector<double>& v, double clip, const char* block) {
  double n = scalar_block_norm(v);
  if (std::isfinite(n) && n > clip)
    for (double& x : v) x *= clip / n;
  if (!scalar_block_finite(v))
    throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
}

void clip_block(std::vector<Vec3>& v, double clip, const char* block) {
  double n = vec3_block_norm(v);
  if (std::isfinite(n) && n > clip)
    for (auto& g : v) g = g * (clip / n);
  if (!vec3_block_finite(v))
    throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
}

void clip_block(MlpGrads& g, double clip, const char* block) {
  double acc = 0.0;
  for (const auto& t : g.dweight)
    for (double x : t.data) acc += x * x;
  for (const auto& t : g.dbias)
    for (double x : t.data) acc += x * x;
  double n = std::sqrt(acc);
  if (std::isfinite(n) && n > clip) g.scale(clip / n);
  for (const auto& t : g.dweight)
    if (!scalar_block_finite(t.data))
      throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
  for (const auto& t : g.dbias)
    if (!scalar_block_finite(t.data))
      throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// TetGrid
// ---------------------------------------------------------------------------

void TetGrid::clamp_deformation() {
  for (std::size_t i = 0; i < deformation.size(); ++i) {
    double bound = 0.5 * local_edge[i];
    double n = deformation[i].norm();
    if (n > bound) deformation[i] = deformation[i] * (bound / n);
  }
}

void TetGrid::validate() const {
  std::size_t nv = vertices.size();
  if (sdf.size() != nv || deformation.size() != nv || local_edge.size() != nv)
    throw ConfigError("tet grid per-vertex arrays disagree in size");
  for (const auto& t : tets) {
    for (int i : t)
      if (i < 0 || static_cast<std::size_t>(i) >= nv)
        throw ConfigError("tet vertex index out of range");
    if (tet_signed_volume(vertices[t[0]], vertices[t[1]], vertices[t[2]], vertices[t[3]]) <= 0.0)
      throw ConfigError("tet grid holds a non-positively-oriented tet");
  }
  for (std::size_t i = 0; i < nv; ++i)
    if (deformation[i].norm() > 0.5 * local_edge[i] + 1e-12)
      throw ConfigError("vertex deformation exceeds half the local edge length");
}

TetGrid init_tetgrid(int resolution, const Vec3& lo, const Vec3& hi, const FieldSet* fs) {
  if (resolution < 2) throw ConfigError("tet grid resolution must be >= 2");
  for (int a = 0; a < 3; ++a)
    if (!(lo[a] < hi[a])) throw ConfigError("tet grid bounds must satisfy lo < hi");

  TetGrid grid;
  grid.resolution = resolution;
  grid.bounds_lo = lo;
  grid.bounds_hi = hi;

  const int r = resolution;
  const int rc = r + 1;
  auto corner = [&](int i, int j, int k) { return (k * rc + j) * rc + i; };
  const int ncorner = rc * rc * rc;
  auto center = [&](int i, int j, int k) { return ncorner + (k * r + j) * r + i; };

  grid.vertices.resize(static_cast<std::size_t>(ncorner) + static_cast<std::size_t>(r) * r * r);
  Vec3 span = hi - lo;
  for (int k = 0; k <= r; ++k)
    for (int j = 0; j <= r; ++j)
      for (int i = 0; i <= r; ++i)
        grid.vertices[corner(i, j, k)] =
            Vec3{lo.x + span.x * i / r, lo.y + span.y * j / r, lo.z + span.z * k / r};
  for (int k = 0; k < r; ++k)
    for (int j = 0; j < r; ++j)
      for (int i = 0; i < r; ++i)
        grid.vertices[center(i, j, k)] = Vec3{lo.x + span.x * (i + 0.5) / r,
                                              lo.y + span.y * (j + 0.5) / r,
                                              lo.z + span.z * (k + 0.5) / r};

  grid.tets.reserve(static_cast<std::size_t>(12) * r * r * r);
  // Each cell: two tets per face, through the cell center. Face quads are
  // ordered by the face's own geometry, so the shared diagonal (p00, p11)
  // is identical for both cells adjacent to the face and the mesh conforms.
  auto emit = [&](int c, int p0, int p1, int p2) {
    std::array<int, 4> t{c, p0, p1, p2};
    if (tet_signed_volume(grid.vertices[t[0]], grid.vertices[t[1]], grid.vertices[t[2]],
                          grid.vertices[t[3]]) < 0.0)
      std::swap(t[2], t[3]);
    grid.tets.push_back(t);
  };
  for (int k = 0; k < r; ++k)
    for (int j = 0; j < r; ++j)
      for (int i = 0; i < r; ++i) {
        int c = center(i, j, k);
        int v[2][2][2];
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) v[dz][dy][dx] = corner(i + dx, j + dy, k + dz);
        // x faces: quad axes (y, z)
        for (int side = 0; side < 2; ++side) {
          int p00 = v[0][0][side], p10 = v[0][1][side], p11 = v[1][1][side], p01 = v[1][0][side];
          emit(c, p00, p10, p11);
          emit(c, p00, p11, p01);
        }
        // y faces: quad axes (x, z)
        for (int side = 0; side < 2; ++side) {
          int p00 = v[0][side][0], p10 = v[0][side][1], p11 = v[1][side][1], p01 = v[1][side][0];
          emit(c, p00, p10, p11);
          emit(c, p00, p11, p01);
        }
        // z faces: quad axes (x, y)
        for (int side = 0; side < 2; ++side) {
          int p00 = v[side][0][0], p10 = v[side][0][1], p11 = v[side][1][1], p01 = v[side][1][0];
          emit(c, p00, p10, p11);
          emit(c, p00, p11, p01);
        }
      }

  grid.local_edge.assign(grid.vertices.size(), std::numeric_limits<double>::infinity());
  for (const auto& t : grid.tets)
    for (int a = 0; a < 4; ++a)
      for (int b = a + 1; b < 4; ++b) {
        double len = (grid.vertices[t[a]] - grid.vertices[t[b]]).norm();
        grid.local_edge[t[a]] = std::min(grid.local_edge[t[a]], len);
        grid.local_edge[t[b]] = std::min(grid.local_edge[t[b]], len);
      }

  grid.deformation.assign(grid.vertices.size(), Vec3{0, 0, 0});
  grid.sdf.resize(grid.vertices.size());
  for (std::size_t i = 0; i < grid.vertices.size(); ++i)
    grid.sdf[i] = fs ? decode_sdf(*fs, grid.vertices[i]) : 1.0;

  grid.validate();
  return grid;
}

// ---------------------------------------------------------------------------
// TriMesh
// ---------------------------------------------------------------------------

bool TriMesh::watertight() const {
  if (faces.empty()) return false;
  std::unordered_map<std::pair<int, int>, int, PairHash> directed;
  for (const auto& f : faces)
    for (int e = 0; e < 3; ++e) {
      auto key = std::make_pair(f[e], f[(e + 1) % 3]);
      if (++directed[key] > 1) return false;  // same directed edge twice
    }
  for (const auto& [edge, count] : directed) {
    auto rev = directed.find({edge.second, edge.first});
    if (rev == directed.end() || rev->second != 1) return false;
  }
  return true;
}

void TriMesh::validate() const {
  if (!colors.empty() && colors.size() != vertices.size())
    throw ConfigError("per-vertex colors must match the vertex count");
  for (const auto& f : faces) {
    for (int i : f)
      if (i < 0 || static_cast<std::size_t>(i) >= vertices.size())
        throw ConfigError("face index out of range");
    if (face_area(vertices[f[0]], vertices[f[1]], vertices[f[2]]) <= 1e-12)
      throw ConfigError("mesh holds a degenerate face");
  }
}

// ---------------------------------------------------------------------------
// Marching tetrahedra
// ---------------------------------------------------------------------------

namespace {

// Linear SDF gradient inside a tet (Cramer solve of the 3x3 system built
// from edge vectors and sdf differences). Falls back to the inside->outside
// centroid axis when the tet is numerically flat.
Vec3 tet_sdf_gradient(const Vec3 p[4], const double s[4]) {
  Vec3 e1 = p[1] - p[0], e2 = p[2] - p[0], e3 = p[3] - p[0];
  double d1 = s[1] - s[0], d2 = s[2] - s[0], d3 = s[3] - s[0];
  double det = dot(e1, cross(e2, e3));
  if (std::abs(det) > 1e-18) {
    Vec3 g{dot(Vec3{d1, d2, d3}, Vec3{cross(e2, e3).x, cross(e3, e1).x, cross(e1, e2).x}),
           dot(Vec3{d1, d2, d3}, Vec3{cross(e2, e3).y, cross(e3, e1).y, cross(e1, e2).y}),
           dot(Vec3{d1, d2, d3}, Vec3{cross(e2, e3).z, cross(e3, e1).z, cross(e1, e2).z})};
    return g * (1.0 / det);
  }
  Vec3 in{0, 0, 0}, out{0, 0, 0};
  int nin = 0, nout = 0;
  for (int i = 0; i < 4; ++i) {
    if (s[i] < 0) {
      in = in + p[i];
      ++nin;
    } else {
      out = out + p[i];
      ++nout;
    }
  }
  if (nin == 0 || nout == 0) return Vec3{0, 0, 1};
  return out * (1.0 / nout) - in * (1.0 / nin);
}

}  // namespace

TriMesh marching_tetrahedra(const TetGrid& grid, std::vector<VertexProvenance>* provenance) {
  grid.validate();
  TriMesh mesh;
  std::vector<VertexProvenance> prov;
  // Weld map: crossing on edge (lo, hi), or (v, -1) when the crossing snaps
  // onto grid vertex v because its sdf is exactly zero.
  std::unordered_map<std::pair<int, int>, int, PairHash> weld;

  auto crossing = [&](int va, int vb) -> int {
    int lo = std::min(va, vb), hi = std::max(va, vb);
    double slo = grid.sdf[lo], shi = grid.sdf[hi];
    std::pair<int, int> key;
    Vec3 pos;
    VertexProvenance p;
    if (slo == 0.0 || shi == 0.0) {
      int snap = (slo == 0.0) ? lo : hi;
      key = {snap, -1};
      pos = grid.deformed(snap);
      p = {snap, snap, 1.0, true};
    } else {
      key = {lo, hi};
      double t = slo / (slo - shi);
      pos = grid.deformed(lo) + (grid.deformed(hi) - grid.deformed(lo)) * t;
      p = {lo, hi, t, false};
    }
    auto it = weld.find(key);
    if (it != weld.end()) return it->second;
    int idx = static_cast<int>(mesh.vertices.size());
    mesh.vertices.push_back(pos);
    prov.push_back(p);
    weld.emplace(key, idx);
    return idx;
  };

  auto push_face = [&](int i0, int i1, int i2, const Vec3& outward) {
    const Vec3 &a = mesh.vertices[i0], &b = mesh.vertices[i1], &c = mesh.vertices[i2];
    if (face_area(a, b, c) <= 1e-12) return;
    if (dot(cross(b - a, c - a), outward) < 0.0) std::swap(i1, i2);
    mesh.faces.push_back({i0, i1, i2});
  };

  for (const auto& t : grid.tets) {
    double s[4];
    Vec3 p[4];
    int mask = 0;
    for (int i = 0; i < 4; ++i) {
      s[i] = grid.sdf[t[i]];
      p[i] = grid.deformed(t[i]);
      // Strictly negative counts as inside; an all-zero tet is all outside
      // and emits nothing.
      if (s[i] < 0.0) mask |= 1 << i;
    }
    if (mask == 0 || mask == 15) continue;

    Vec3 outward = tet_sdf_gradient(p, s);

    int inside[4], outside[4], nin = 0, nout = 0;
    for (int i = 0; i < 4; ++i)
      (s[i] < 0.0 ? inside[nin++] : outside[nout++]) = i;

    if (nin == 1 || nin == 3) {
      int apex = (nin == 1) ? inside[0] : outside[0];
      int others[3], n = 0;
      for (int i = 0; i < 4; ++i)
        if (i != apex) others[n++] = i;
      int e0 = crossing(t[apex], t[others[0]]);
      int e1 = crossing(t[apex], t[others[1]]);
      int e2 = crossing(t[apex], t[others[2]]);
      push_face(e0, e1, e2, outward);
    } else {  // nin == 2: quad across the four crossing edges
      int i0 = inside[0], i1 = inside[1], o0 = outside[0], o1 = outside[1];
      int q0 = crossing(t[i0], t[o0]);
      int q1 = crossing(t[i0], t[o1]);
      int q2 = crossing(t[i1], t[o1]);
      int q3 = crossing(t[i1], t[o0]);
      push_face(q0, q1, q2, outward);
      push_face(q0, q2, q3, outward);
    }
  }

  if (provenance) *provenance = std::move(prov);
  return mesh;
}

// ---------------------------------------------------------------------------
// Surface sampling
// ---------------------------------------------------------------------------

SurfaceSample sample_surface_points(const TriMesh& mesh, int n, std::uint64_t seed) {
  if (mesh.empty()) throw ConfigError("cannot sample points on an empty mesh");
  if (n < 1) throw ConfigError("sample count must be >= 1");

  std::vector<double> cum(mesh.faces.size());
  double total = 0.0;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    total += face_area(mesh.vertices[face[0]], mesh.vertices[face[1]], mesh.vertices[face[2]]);
    cum[f] = total;
  }
  if (total <= 0.0) throw ConfigError("mesh has zero total area");

  SurfaceSample out;
  out.points.reserve(n);
  out.normals.reserve(n);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    double u = rng.uniform() * total;
    std::size_t f = std::lower_bound(cum.begin(), cum.end(), u) - cum.begin();
    if (f >= mesh.faces.size()) f = mesh.faces.size() - 1;
    const auto& face = mesh.faces[f];
    const Vec3 &a = mesh.vertices[face[0]], &b = mesh.vertices[face[1]],
               &c = mesh.vertices[face[2]];
    double u1 = rng.uniform(), u2 = rng.uniform();
    if (u1 + u2 > 1.0) {
      u1 = 1.0 - u1;
      u2 = 1.0 - u2;
    }
    out.points.push_back(a + (b - a) * u1 + (c - a) * u2);
    out.normals.push_back(normalized(cross(b - a, c - a)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mesh I/O
// ---------------------------------------------------------------------------

namespace {

std::vector<Vec3> vertex_normals(const TriMesh& mesh) {
  std::vector<Vec3> vn(mesh.vertices.size(), Vec3{0, 0, 0});
  for (const auto& f : mesh.faces) {
    // Unnormalized cross product: area weighting for free.
    Vec3 n = cross(mesh.vertices[f[1]] - mesh.vertices[f[0]],
                   mesh.vertices[f[2]] - mesh.vertices[f[0]]);
    for (int i : f) vn[i] = vn[i] + n;
  }
  for (auto& n : vn) {
    double len = n.norm();
    n = len > 1e-20 ? n * (1.0 / len) : Vec3{0, 0, 1};
  }
  return vn;
}

}  // namespace

void save_obj(const std::string& path, const TriMesh& mesh) {
  mesh.validate();
  std::ostringstream os;
  os.precision(17);
  std::vector<Vec3> vn = vertex_normals(mesh);
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    const Vec3& v = mesh.vertices[i];
    os << "v " << v.x << ' ' << v.y << ' ' << v.z;
    if (!mesh.colors.empty()) {
      const Vec3& c = mesh.colors[i];
      os << ' ' << c.x << ' ' << c.y << ' ' << c.z;
    }
    os << '\n';
  }
  for (const Vec3& n : vn) os << "vn " << n.x << ' ' << n.y << ' ' << n.z << '\n';
  for (const auto& f : mesh.faces)
    os << "f " << f[0] + 1 << "//" << f[0] + 1 << ' ' << f[1] + 1 << "//" << f[1] + 1 << ' '
       << f[2] + 1 << "//" << f[2] + 1 << '\n';
  atomic_write_file(path, os.str());
}

TriMesh load_obj(const std::string& path) {
  std::string text = read_file(path);
  TriMesh mesh;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;

  auto fail = [&](const std::string& msg) -> FormatError {
    return FormatError(path + ":" + std::to_string(lineno) + ": " + msg);
  };

  while (std::getline(is, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag.empty() || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v.x >> v.y >> v.z)) throw fail("vertex line needs three coordinates");
      mesh.vertices.push_back(v);
      Vec3 c;
      if (ls >> c.x >> c.y >> c.z) {
        mesh.colors.resize(mesh.vertices.size() - 1, Vec3{1, 1, 1});
        mesh.colors.push_back(c);
      } else if (!mesh.colors.empty()) {
        mesh.colors.push_back(Vec3{1, 1, 1});
      }
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string ref;
      while (ls >> ref) {
        std::size_t slash = ref.find('/');
        std::string head = slash == std::string::npos ? ref : ref.substr(0, slash);
        int v = 0;
        try {
          v = std::stoi(head);
        } catch (const std::exception&) {
          throw fail("face reference '" + ref + "' is not an index");
        }
        if (v < 0) v = static_cast<int>(mesh.vertices.size()) + v + 1;
        if (v < 1 || static_cast<std::size_t>(v) > mesh.vertices.size())
          throw fail("face index out of range");
        idx.push_back(v - 1);
      }
      if (idx.size() < 3) throw fail("face needs at least three corners");
      for (std::size_t i = 1; i + 1 < idx.size(); ++i)
        mesh.faces.push_back({idx[0], idx[i], idx[i + 1]});
    }
    // vn, vt, o, g, s, usemtl, mtllib: ignored on import.
  }
  return mesh;
}

void save_ply(const std::string& path, const TriMesh& mesh) {
  mesh.validate();
  std::ostringstream os;
  bool colored = !mesh.colors.empty();
  os << "ply\nformat binary_little_endian 1.0\n";
  os << "element vertex " << mesh.vertices.size() << "\n";
  os << "property float x\nproperty float y\nproperty float z\n";
  if (colored) os << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  os << "element face " << mesh.faces.size() << "\n";
  os << "property list uchar int vertex_indices\nend_header\n";
  for (std::size_t i = 0; i < mesh.vertices.size(); ++i) {
    write_f32(os, static_cast<float>(mesh.vertices[i].x));
    write_f32(os, static_cast<float>(mesh.vertices[i].y));
    write_f32(os, static_cast<float>(mesh.vertices[i].z));
    if (colored) {
      const Vec3& c = mesh.colors[i];
      auto byte = [](double v) {
        return static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      };
      char rgb[3] = {byte(c.x), byte(c.y), byte(c.z)};
      write_bytes(os, rgb, 3);
    }
  }
  for (const auto& f : mesh.faces) {
    char n = 3;
    write_bytes(os, &n, 1);
    for (int i : f) write_u32(os, static_cast<std::uint32_t>(i));
  }
  atomic_write_file(path, os.str());
}

// ---------------------------------------------------------------------------
// Ray-triangle rendering
// ---------------------------------------------------------------------------

MeshHit intersect_mesh(const TriMesh& mesh, const Vec3& origin, const Vec3& dir) {
  MeshHit best;
  double best_t = std::numeric_limits<double>::infinity();
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& face = mesh.faces[f];
    const Vec3 &a = mesh.vertices[face[0]], &b = mesh.vertices[face[1]],
               &c = mesh.vertices[face[2]];
    Vec3 e1 = b - a, e2 = c - a;
    Vec3 pv = cross(dir, e2);
    double det = dot(e1, pv);
    if (std::abs(det) < 1e-14) continue;
    double inv = 1.0 / det;
    Vec3 sv = origin - a;
    double u = dot(sv, pv) * inv;
    if (u < -1e-12 || u > 1.0 + 1e-12) continue;
    Vec3 qv = cross(sv, e1);
    double v = dot(dir, qv) * inv;
    if (v < -1e-12 || u + v > 1.0 + 1e-12) continue;
    double t = dot(e2, qv) * inv;
    if (t <= 1e-9 || t >= best_t) continue;
    best_t = t;
    best = {static_cast<int>(f), t, u, v};
  }
  return best;
}

namespace {

constexpr double kNormalBg = 128.0 / 255.0;

Vec3 hit_normal(const TriMesh& mesh, const MeshHit& hit, const Vec3& dir) {
  const auto& f = mesh.faces[hit.face];
  Vec3 n = normalized(cross(mesh.vertices[f[1]] - mesh.vertices[f[0]],
                            mesh.vertices[f[2]] - mesh.vertices[f[0]]));
  return dot(n, dir) > 0.0 ? n * -1.0 : n;
}

std::vector<MeshHit> hit_buffer(const TriMesh& mesh, const Camera& cam, int width, int height) {
  std::vector<MeshHit> hits(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
      hits[static_cast<std::size_t>(y) * width + x] = intersect_mesh(mesh, ray.origin,
                                                                     ray.direction);
    }
  return hits;
}

}  // namespace

Image render_normal_map(const TriMesh& mesh, const Camera& cam, int width, int height) {
  if (width < 1 || height < 1) throw ConfigError("normal map resolution must be >= 1");
  Image img(width, height, kNormalBg);
  if (mesh.empty()) return img;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
      MeshHit hit = intersect_mesh(mesh, ray.origin, ray.direction);
      if (!hit.valid()) continue;
      Vec3 n = hit_normal(mesh, hit, ray.direction);
      img.set_pixel(x, y, (n + Vec3{1, 1, 1}) * 0.5);
    }
  return img;
}

void normal_map_backward(const TriMesh& mesh, const Camera& cam, int width, int height,
                         const std::vector<Vec3>& dpixel, std::vector<Vec3>* dvertices) {
  if (dpixel.size() != static_cast<std::size_t>(width) * height)
    throw ConfigError("pixel gradient size mismatch");
  dvertices->assign(mesh.vertices.size(), Vec3{0, 0, 0});
  if (mesh.empty()) return;

  std::vector<MeshHit> hits = hit_buffer(mesh, cam, width, height);
  auto hit_at = [&](int x, int y) -> const MeshHit& {
    return hits[static_cast<std::size_t>(y) * width + x];
  };

  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const MeshHit& hit = hit_at(x, y);
      if (!hit.valid()) continue;
      // Mesh/background boundary pixels flip visibility under perturbation;
      // their gradients are zeroed rather than smoothed.
      bool silhouette = (x > 0 && !hit_at(x - 1, y).valid()) ||
                        (x + 1 < width && !hit_at(x + 1, y).valid()) ||
                        (y > 0 && !hit_at(x, y - 1).valid()) ||
                        (y + 1 < height && !hit_at(x, y + 1).valid());
      if (silhouette) continue;

      Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
      const auto& f = mesh.faces[hit.face];
      Vec3 a = mesh.vertices[f[0]], b = mesh.vertices[f[1]], c = mesh.vertices[f[2]];
      Vec3 e1 = b - a, e2 = c - a;
      Vec3 raw = cross(e1, e2);
      double len = raw.norm();
      if (len < 1e-18) continue;
      Vec3 nhat = raw * (1.0 / len);
      double sign = dot(nhat, ray.direction) > 0.0 ? -1.0 : 1.0;

      // rgb = (sign*nhat + 1)/2
      Vec3 dn_hat = dpixel[static_cast<std::size_t>(y) * width + x] * (0.5 * sign);
      // Through normalization: d(raw/|raw|) = (I - nhat nhat^T)/|raw|.
      Vec3 draw = (dn_hat - nhat * dot(nhat, dn_hat)) * (1.0 / len);
      // raw = e1 x e2: dL/de1 = e2 x draw, dL/de2 = draw x e1.
      Vec3 de1 = cross(e2, draw);
      Vec3 de2 = cross(draw, e1);
      (*dvertices)[f[1]] = (*dvertices)[f[1]] + de1;
      (*dvertices)[f[2]] = (*dvertices)[f[2]] + de2;
      (*dvertices)[f[0]] = (*dvertices)[f[0]] - de1 - de2;
    }
}

Image render_mesh_color(const TriMesh& mesh, const FieldSet& fs, const Camera& cam, int width,
                        int height, const Vec3& background) {
  if (width < 1 || height < 1) throw ConfigError("render resolution must be >= 1");
  Image img(width, height);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
      MeshHit hit = mesh.empty() ? MeshHit{} : intersect_mesh(mesh, ray.origin, ray.direction);
      if (!hit.valid()) {
        img.set_pixel(x, y, background);
        continue;
      }
      const auto& f = mesh.faces[hit.face];
      Vec3 p = mesh.vertices[f[0]] + (mesh.vertices[f[1]] - mesh.vertices[f[0]]) * hit.u +
               (mesh.vertices[f[2]] - mesh.vertices[f[0]]) * hit.v;
      img.set_pixel(x, y, decode_color(fs, p));
    }
  return img;
}

void mesh_color_backward(const TriMesh& mesh, const FieldSet& fs, const Camera& cam, int width,
                         int height, const std::vector<Vec3>& dpixel, MlpGrads* dtexture,
                         std::vector<double>* dtables) {
  if (dpixel.size() != static_cast<std::size_t>(width) * height)
    throw ConfigError("pixel gradient size mismatch");
  if (mesh.empty()) return;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const Vec3& g = dpixel[static_cast<std::size_t>(y) * width + x];
      if (g.x == 0.0 && g.y == 0.0 && g.z == 0.0) continue;
      Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
      MeshHit hit = intersect_mesh(mesh, ray.origin, ray.direction);
      if (!hit.valid()) continue;
      const auto& f = mesh.faces[hit.face];
      Vec3 p = mesh.vertices[f[0]] + (mesh.vertices[f[1]] - mesh.vertices[f[0]]) * hit.u +
               (mesh.vertices[f[2]] - mesh.vertices[f[0]]) * hit.v;
      ColorTrace trace;
      decode_color_traced(fs, p, &trace);
      decode_color_backward(fs, trace, g, dtexture, dtables);
    }
}

// ---------------------------------------------------------------------------
// Mesh fine-tuning
// ---------------------------------------------------------------------------

void MeshFinetuneConfig::validate() const {
  if (geometry_iterations < 0 || texture_iterations < 0)
    throw ConfigError("finetune iteration counts must be >= 0");
  if (eta_sdf <= 0 || eta_deform <= 0 || eta_texture <= 0 || eta_tables <= 0 || eta4 <= 0)
    throw ConfigError("finetune learning rates must be > 0");
  if (grad_clip <= 0) throw ConfigError("gradient clip must be > 0");
  if (width < 1 || height < 1) throw ConfigError("finetune resolution must be >= 1");
  if (focal <= 0) throw ConfigError("focal length must be > 0");
  poses.validate();
}

namespace {

struct NoisyFrame {
  ScoreQuery query;
  std::vector<double> eps;
  std::vector<double> g;  // w(t) (eps_pre - eps_lora)
  double vsd_norm = 0.0;
};

NoisyFrame score_frame(const Image& frame, ScoreProvider& pre, ScoreProvider& lora,
                       const DiffusionSchedule& sched, const SphericalPose& pose,
                       int condition_id, Rng& rng) {
  NoisyFrame nf;
  double t = sched.sample_t(rng);
  nf.eps.resize(frame.data.size());
  for (double& e : nf.eps) e = rng.normal();

  nf.query.x = add_noise(frame.data, t, nf.eps, sched);
  nf.query.width = frame.width;
  nf.query.height = frame.height;
  nf.query.channels = 3;
  nf.query.t = t;
  nf.query.condition_id = condition_id;
  nf.query.azimuth_deg = pose.azimuth_deg;
  nf.query.elevation_deg = pose.elevation_deg;

  std::vector<double> eps_pre = pre.epsilon(nf.query, sched);
  std::vector<double> eps_lora = lora.epsilon(nf.query, sched);
  nf.g = vsd_pixel_gradient(t, eps_pre, eps_lora, sched);
  nf.vsd_norm = scalar_block_norm(nf.g);
  return nf;
}

std::vector<Vec3> as_pixel_grads(const std::vector<double>& g) {
  std::vector<Vec3> d(g.size() / 3);
  for (std::size_t p = 0; p < d.size(); ++p) d[p] = Vec3{g[p * 3], g[p * 3 + 1], g[p * 3 + 2]};
  return d;
}

}  // namespace

MeshFinetuneResult mesh_finetune(TetGrid& grid, FieldSet& fs, ScoreProvider& pre,
                                 ScoreProvider& lora, const DiffusionSchedule& sched,
                                 const MeshFinetuneConfig& cfg) {
  cfg.validate();
  sched.validate();
  grid.validate();
  fs.validate();
  const std::uint64_t geometry_sum = fs.geometry.checksum();

  Intrinsics intr;
  intr.focal = cfg.focal;
  intr.width = cfg.width;
  intr.height = cfg.height;

  MeshFinetuneResult res;

  // Phase A: per-vertex sdf and deformation through the normal map.
  for (int step = 0; step < cfg.geometry_iterations; ++step) {
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step)));
    SphericalPose pose = sample_refine_pose(cfg.poses, rng);
    Camera cam = look_at_pose(pose, Vec3{0, 0, 0}, intr);

    std::vector<VertexProvenance> prov;
    TriMesh mesh = marching_tetrahedra(grid, &prov);
    Image frame = render_normal_map(mesh, cam, cfg.width, cfg.height);
    NoisyFrame nf = score_frame(frame, pre, lora, sched, pose, cfg.condition_id, rng);

    std::vector<Vec3> dvertices;
    normal_map_backward(mesh, cam, cfg.width, cfg.height, as_pixel_grads(nf.g), &dvertices);

    std::vector<double> dsdf(grid.sdf.size(), 0.0);
    std::vector<Vec3> ddeform(grid.deformation.size(), Vec3{0, 0, 0});
    for (std::size_t m = 0; m < dvertices.size(); ++m) {
      const Vec3& gv = dvertices[m];
      const VertexProvenance& pv = prov[m];
      if (pv.snapped) {
        // Vertex sits exactly on a grid vertex; sdf subgradient taken as 0.
        ddeform[pv.b] = ddeform[pv.b] + gv;
        continue;
      }
      ddeform[pv.a] = ddeform[pv.a] + gv * (1.0 - pv.t);
      ddeform[pv.b] = ddeform[pv.b] + gv * pv.t;
      double sa = grid.sdf[pv.a], sb = grid.sdf[pv.b];
      double denom = (sa - sb) * (sa - sb);
      Vec3 dir = grid.deformed(pv.b) - grid.deformed(pv.a);
      double gt = dot(gv, dir);
      dsdf[pv.a] += gt * (-sb / denom);
      dsdf[pv.b] += gt * (sa / denom);
    }

    clip_block(dsdf, cfg.grad_clip, "tet-sdf");
    clip_block(ddeform, cfg.grad_clip, "tet-deformation");

    for (std::size_t i = 0; i < grid.sdf.size(); ++i) grid.sdf[i] -= cfg.eta_sdf * dsdf[i];
    for (std::size_t i = 0; i < grid.deformation.size(); ++i)
      grid.deformation[i] = grid.deformation[i] - ddeform[i] * cfg.eta_deform;
    grid.clamp_deformation();

    double lora_loss = lora.trainable() ? lora.regression_step(nf.query, sched, nf.eps, cfg.eta4)
                                        : 0.0;
    res.geometry_trace.push_back({step, cfg.eta_sdf, cfg.eta_deform, nf.vsd_norm, lora_loss});
  }

  // Phase B: geometry frozen, texture field through color renders.
  TriMesh mesh = marching_tetrahedra(grid);
  for (int step = 0; step < cfg.texture_iterations; ++step) {
    Rng rng(derive_seed(cfg.seed ^ 0x74657874ull, static_cast<std::uint64_t>(step)));
    SphericalPose pose = sample_refine_pose(cfg.poses, rng);
    Camera cam = look_at_pose(pose, Vec3{0, 0, 0}, intr);

    Image frame = render_mesh_color(mesh, fs, cam, cfg.width, cfg.height, cfg.background);
    NoisyFrame nf = score_frame(frame, pre, lora, sched, pose, cfg.condition_id, rng);

    MlpGrads dtexture;
    dtexture.init_like(fs.texture);
    std::vector<double> dtables(fs.hash.tables.size(), 0.0);
    mesh_color_backward(mesh, fs, cam, cfg.width, cfg.height, as_pixel_grads(nf.g), &dtexture,
                        &dtables);

    clip_block(dtexture, cfg.grad_clip, "texture");
    clip_block(dtables, cfg.grad_clip, "hash");

    for (std::size_t l = 0; l < fs.texture.layers.size(); ++l) {
      auto& layer = fs.texture.layers[l];
      for (std::size_t i = 0; i < layer.weight.data.size(); ++i)
        layer.weight.data[i] -= cfg.eta_texture * dtexture.dweight[l].data[i];
      for (std::size_t i = 0; i < layer.bias.data.size(); ++i)
        layer.bias.data[i] -= cfg.eta_texture * dtexture.dbias[l].data[i];
    }
    for (std::size_t i = 0; i < fs.hash.tables.size(); ++i)
      fs.hash.tables[i] -= cfg.eta_tables * dtables[i];

    double lora_loss = lora.trainable() ? lora.regression_step(nf.query, sched, nf.eps, cfg.eta4)
                                        : 0.0;
    res.texture_trace.push_back({step, cfg.eta_texture, cfg.eta_tables, nf.vsd_norm, lora_loss});
  }

  if (fs.geometry.checksum() != geometry_sum)
    throw NumericError("geometry decoder changed during mesh fine-tuning");
  return res;
}

}  // namespace gd
