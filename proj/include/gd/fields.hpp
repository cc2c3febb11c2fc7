// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gd/costvolume.hpp"
#include "gd/mlp.hpp"
#include "gd/vec.hpp"

namespace gd {

/// Sin/cos frequency encoding, axis-major: for each axis, [x if include_input],
/// then per level k in [0, levels): sin(2^k pi x), cos(2^k pi x).
struct PositionalEncoding {
  int levels = 6;
  bool include_input = true;

  int per_axis_dim() const { return (include_input ? 1 : 0) + 2 * levels; }
  int output_dim() const { return 3 * per_axis_dim(); }
};

std::vector<double> positional_encode(const Vec3& x, const PositionalEncoding& enc);

/// d output[i] / d x[axis(i)]; every output depends on exactly one axis,
/// axis(i) = i / per_axis_dim().
std::vector<double> positional_encode_derivative(const Vec3& x, const PositionalEncoding& enc);

/// Multiresolution hash table encoding over [0,1]^3. Level resolutions are
/// floor(base_resolution * growth^level); corners hash by XOR of
/// coordinate*prime (primes 1, 2654435761, 805459861) masked to table_size-1.
struct HashEncoding {
  int levels = 8;
  std::uint32_t table_size = 1u << 14;  // power of two
  int features_per_level = 2;
  int base_resolution = 16;
  double growth = 1.5;
  std::vector<double> tables;  // levels * table_size * features_per_level

  int output_dim() const { return levels * features_per_level; }
  int resolution(int level) const;
  std::size_t table_entries() const {
    return static_cast<std::size_t>(levels) * table_size * features_per_level;
  }
  void validate() const;
};

/// Allocates zero tables sized for the configuration.
HashEncoding make_hash_encoding(int levels, std::uint32_t table_size, int features_per_level,
                                int base_resolution, double growth);

std::uint32_t hash_corner(int cx, int cy, int cz, std::uint32_t table_size);

/// Trilinear footprint into the hash tables: 8 corners per level. Each entry's
/// table_base indexes the first feature of an F-vector inside `tables`;
/// d output[level*F + f] / d tables[table_base + f] = weight.
struct HashStencil {
  struct Entry {
    std::size_t table_base = 0;
    double weight = 0.0;
  };
  std::vector<Entry> entries;  // levels * 8, level-major
};

std::vector<double> hash_encode(const Vec3& x01, const HashEncoding& enc,
                                HashStencil* stencil = nullptr);

/// Full neural-field bundle. Parameter blocks: volume data (block 1), hash
/// tables (block 2), texture MLP (block 3); the geometry decoder stays frozen
/// through all optimization.
struct FieldSet {
  VoxelGrid volume;
  PositionalEncoding encoding;
  Mlp geometry;  // input |E(x)| + C_v, output 1
  HashEncoding hash;
  Mlp texture;     // input levels*F + 3, output 3 (sigmoid)
  Mlp mv_texture;  // per-view blending logits; empty = disabled

  void validate() const;

  /// World position mapped to the hash domain [0,1]^3 using the volume's
  /// bounding box, clamped.
  Vec3 to_hash_domain(const Vec3& x) const;
};

/// Geometry MLP sized for the given volume; softplus hidden layers, linear
/// output. Texture MLP relu hidden, sigmoid output.
FieldSet make_fieldset(VoxelGrid volume, std::uint64_t seed);

double decode_sdf(const FieldSet& fs, const Vec3& x);

/// Backward products of one SDF evaluation.
struct SdfGradients {
  Vec3 dx;                      // ds/dx (analytic, for normals)
  VolumeStencil stencil;        // trilinear footprint into the volume
  std::vector<double> dvolume;  // ds/dV(x), one per volume channel
};

double decode_sdf_grad(const FieldSet& fs, const Vec3& x, SdfGradients* grad);

struct ColorGradients {
  HashStencil stencil;          // footprint into hash tables
  std::vector<double> dhash;    // dL/d(hash output), levels*F — filled by backward
  MlpGrads texture;             // dL/d(texture MLP params)
};

Vec3 decode_color(const FieldSet& fs, const Vec3& x);

/// Forward with recorded trace; backward scatters dL/dc into hash-table and
/// texture-MLP gradients. `grad->texture` must be init_like(fs.texture).
struct ColorTrace {
  MlpTrace mlp;
  HashStencil stencil;
};

Vec3 decode_color_traced(const FieldSet& fs, const Vec3& x, ColorTrace* trace);

/// Accumulates into dtexture and dtables (size table_entries). dtables may be
/// null when only MLP grads are wanted.
void decode_color_backward(const FieldSet& fs, const ColorTrace& trace, const Vec3& dcolor,
                           MlpGrads* dtexture, std::vector<double>* dtables);

/// Multi-view texture decoding: per-view logits from (feature_i, V(x), delta_i)
/// through the blending MLP, softmax over views, then a logit-space blend of
/// the per-view colors (first 3 feature channels) so agreeing views pass
/// through exactly.
Vec3 decode_color_mv(const FieldSet& fs, const Vec3& x,
                     const std::vector<std::vector<double>>& view_features,
                     const std::vector<Vec3>& view_dirs);

void save_fieldset(const std::string& path, const FieldSet& fs);
FieldSet load_fieldset(const std::string& path);

}  // namespace gd
