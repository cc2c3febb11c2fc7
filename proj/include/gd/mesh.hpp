// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "gd/camera.hpp"
#include "gd/fields.hpp"
#include "gd/image.hpp"
#include "gd/refine.hpp"
#include "gd/rng.hpp"

namespace gd {

// ---------------------------------------------------------------------------
// Tetrahedral grid
// ---------------------------------------------------------------------------

/// Body-centered tetrahedralization of an axis-aligned box: cube corners plus
/// cell centers, 12 tets per cell (2 per face, all through the center). Face
/// quads split along the (p00, p11) diagonal so neighboring cells agree and
/// the mesh is conforming.
///
/// Carries the extraction parameter block: per-vertex sdf and a per-vertex
/// offset bounded by half the shortest incident edge.
struct TetGrid {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> tets;  // positively oriented
  std::vector<double> sdf;
  std::vector<Vec3> deformation;
  std::vector<double> local_edge;  // shortest incident edge per vertex
  int resolution = 0;              // cells per axis
  Vec3 bounds_lo{-1.0, -1.0, -1.0};
  Vec3 bounds_hi{1.0, 1.0, 1.0};

  Vec3 deformed(int i) const { return vertices[i] + deformation[i]; }
  /// Scales any offset exceeding half the local edge back onto the bound.
  void clamp_deformation();
  /// Throws ConfigError on inconsistent sizes, orientation, index range, or
  /// deformation bound violations. Hand-built grids (any resolution field)
  /// are admitted; only init_tetgrid requires resolution >= 2.
  void validate() const;
};

/// resolution = cells per axis (>= 2). Vertex count is the closed form
/// (r+1)^3 + r^3; tet count 12 r^3. When `fs` is given, per-vertex sdf is
/// initialized by sampling decode_sdf at the (undeformed) vertices;
/// otherwise sdf starts at +1 (empty).
TetGrid init_tetgrid(int resolution, const Vec3& lo, const Vec3& hi,
                     const FieldSet* fs = nullptr);

// ---------------------------------------------------------------------------
// Triangle mesh
// ---------------------------------------------------------------------------

struct TriMesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;  // CCW, normals outward
  std::vector<Vec3> colors;               // optional, per vertex

  bool empty() const { return faces.empty(); }
  /// Computed, never assumed: every undirected edge borders exactly two
  /// faces with opposite directions.
  bool watertight() const;
  /// Throws ConfigError on out-of-range indices or faces with area <= 1e-12.
  void validate() const;
};

/// Where an extracted vertex came from: the crossing on grid edge (a, b) at
/// parameter t, or a snap onto grid vertex b when its sdf is exactly zero.
struct VertexProvenance {
  int a = -1;
  int b = -1;
  double t = 0.0;
  bool snapped = false;
};

/// Marching tetrahedra over the deformed grid. Vertices classify as inside
/// strictly below zero, so an all-zero tet is entirely "outside" and emits
/// no surface. Crossing vertices v = p_a + t (p_b - p_a), t = s_a/(s_a-s_b),
/// are computed on the canonical (low index, high index) edge order and
/// welded by edge key; zero-sdf endpoints snap to the grid vertex so
/// coincident crossings weld too. Triangles are oriented so the geometric
/// normal points along the tet's linear SDF gradient (outward); faces with
/// area <= 1e-12 are dropped.
TriMesh marching_tetrahedra(const TetGrid& grid,
                            std::vector<VertexProvenance>* provenance = nullptr);

struct SurfaceSample {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
};

/// Area-weighted triangle pick, uniform barycentric placement, deterministic
/// under seed. Throws ConfigError on an empty mesh or n < 1.
SurfaceSample sample_surface_points(const TriMesh& mesh, int n, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Mesh I/O
// ---------------------------------------------------------------------------

/// OBJ with v / vn / f lines, 1-based indices; vn are area-weighted vertex
/// normals. Vertex colors, when present, ride the common "v x y z r g b"
/// extension.
void save_obj(const std::string& path, const TriMesh& mesh);
/// Parses v / vn / f records; faces of more than three corners are fanned.
/// Throws FormatError naming the offending line.
TriMesh load_obj(const std::string& path);
/// Binary little-endian PLY; per-vertex uchar RGB when colors are present.
void save_ply(const std::string& path, const TriMesh& mesh);

// ---------------------------------------------------------------------------
// Normal-map and color rendering
// ---------------------------------------------------------------------------

struct MeshHit {
  int face = -1;
  double t = 0.0;  // ray parameter
  double u = 0.0;  // barycentric toward vertex 1
  double v = 0.0;  // barycentric toward vertex 2
  bool valid() const { return face >= 0; }
};

/// Nearest intersection with t > eps; barycentric parametric test
/// (u, v >= 0, u + v <= 1).
MeshHit intersect_mesh(const TriMesh& mesh, const Vec3& origin, const Vec3& dir);

/// Geometric normals of the nearest hit, flipped toward the camera, encoded
/// (n+1)/2 into RGB. Misses take the mid-gray background 128/255.
Image render_normal_map(const TriMesh& mesh, const Camera& cam, int width, int height);

/// Accumulates d(sum over pixels dot(dpixel, encoded rgb))/d(vertex
/// positions). Pixels on the mesh/background boundary carry discontinuous
/// visibility and are skipped.
void normal_map_backward(const TriMesh& mesh, const Camera& cam, int width, int height,
                         const std::vector<Vec3>& dpixel, std::vector<Vec3>* dvertices);

/// Per-pixel hit position pushed through the texture field; misses take
/// `background`.
Image render_mesh_color(const TriMesh& mesh, const FieldSet& fs, const Camera& cam, int width,
                        int height, const Vec3& background);

/// Texture-parameter transpose of render_mesh_color: scatters per-pixel
/// color gradients into hash-table and texture-MLP gradients at the hit
/// points. Geometry is fixed; misses contribute nothing.
void mesh_color_backward(const TriMesh& mesh, const FieldSet& fs, const Camera& cam, int width,
                         int height, const std::vector<Vec3>& dpixel, MlpGrads* dtexture,
                         std::vector<double>* dtables);

// ---------------------------------------------------------------------------
// Mesh fine-tuning
// ---------------------------------------------------------------------------

struct MeshFinetuneConfig {
  int geometry_iterations = 200;
  int texture_iterations = 200;
  double eta_sdf = 1e-3;
  double eta_deform = 1e-3;
  double eta_texture = 1e-3;  // texture MLP
  double eta_tables = 1e-3;   // hash tables
  double eta4 = 1e-3;         // trainable denoiser
  double grad_clip = 10.0;
  int width = 64;
  int height = 64;
  Vec3 background{1.0, 1.0, 1.0};
  double focal = 96.0;
  PoseDistribution poses;
  int condition_id = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct MeshFinetuneResult {
  std::vector<RefineTraceRow> geometry_trace;
  std::vector<RefineTraceRow> texture_trace;
};

/// Two-phase loop. Phase A updates per-vertex sdf and deformation through
/// the normal map; phase B freezes geometry and updates the texture field
/// (hash tables + texture MLP) through color renders of the fixed mesh.
/// Both phases share the refine loop's structure: score difference as the
/// pixel gradient, per-block clip at grad_clip, non-finite gradients abort
/// with the block name, and the trainable denoiser takes a regression step
/// per iteration.
MeshFinetuneResult mesh_finetune(TetGrid& grid, FieldSet& fs, ScoreProvider& pre,
                                 ScoreProvider& lora, const DiffusionSchedule& sched,
                                 const MeshFinetuneConfig& cfg);

}  // namespace gd
