// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/fields.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {

std::vector<double> positional_encode(const Vec3& x, const PositionalEncoding& enc) {
  std::vector<double> out;
  out.reserve(enc.output_dim());
  for (int a = 0; a < 3; ++a) {
    double v = x[a];
    if (enc.include_input) out.push_back(v);
    double freq = kPi;
    for (int k = 0; k < enc.levels; ++k) {
      out.push_back(std::sin(freq * v));
      out.push_back(std::cos(freq * v));
      freq *= 2.0;
    }
  }
  return out;
}

std::vector<double> positional_encode_derivative(const Vec3& x, const PositionalEncoding& enc) {
  std::vector<double> out;
  out.reserve(enc.output_dim());
  for (int a = 0; a < 3; ++a) {
    double v = x[a];
    if (enc.include_input) out.push_back(1.0);
    double freq = kPi;
    for (int k = 0; k < enc.levels; ++k) {
      out.push_back(freq * std::cos(freq * v));
      out.push_back(-freq * std::sin(freq * v));
      freq *= 2.0;
    }
  }
  return out;
}

int HashEncoding::resolution(int level) const {
  return static_cast<int>(std::floor(base_resolution * std::pow(growth, level)));
}

void HashEncoding::validate() const {
  if (levels < 1) throw ConfigError("hash encoding needs at least 1 level");
  if (table_size == 0 || (table_size & (table_size - 1)) != 0)
    throw ConfigError("hash table size must be a power of two");
  if (features_per_level < 1) throw ConfigError("hash features_per_level must be >= 1");
  if (base_resolution < 1) throw ConfigError("hash base resolution must be >= 1");
  if (!(growth > 1.0)) throw ConfigError("hash growth factor must exceed 1");
  if (tables.size() != table_entries())
    throw ConfigError("hash table buffer size does not match configuration");
  for (double v : tables)
    if (!std::isfinite(v)) throw NumericError("hash table holds a non-finite value");
}

HashEncoding make_hash_encoding(int levels, std::uint32_t table_size, int features_per_level,
                                int base_resolution, double growth) {
  HashEncoding enc;
  enc.levels = levels;
  enc.table_size = table_size;
  enc.features_per_level = features_per_level;
  enc.base_resolution = base_resolution;
  enc.growth = growth;
  enc.tables.assign(enc.table_entries(), 0.0);
  enc.validate();
  return enc;
}

std::uint32_t hash_corner(int cx, int cy, int cz, std::uint32_t table_size) {
  std::uint32_t h = static_cast<std::uint32_t>(cx) * 1u ^
                    static_cast<std::uint32_t>(cy) * 2654435761u ^
                    static_cast<std::uint32_t>(cz) * 805459861u;
  return h & (table_size - 1);
}

std::vector<double> hash_encode(const Vec3& x01, const HashEncoding& enc, HashStencil* stencil) {
  const int F = enc.features_per_level;
  std::vector<double> out(enc.output_dim(), 0.0);
  if (stencil) {
    stencil->entries.clear();
    stencil->entries.reserve(static_cast<std::size_t>(enc.levels) * 8);
  }

  Vec3 p{std::clamp(x01.x, 0.0, 1.0), std::clamp(x01.y, 0.0, 1.0), std::clamp(x01.z, 0.0, 1.0)};

  for (int level = 0; level < enc.levels; ++level) {
    int res = enc.resolution(level);
    // res cells span [0,1]; corner coordinates run 0..res.
    double gx = p.x * res, gy = p.y * res, gz = p.z * res;
    int bx = std::min(static_cast<int>(gx), res - 1);
    int by = std::min(static_cast<int>(gy), res - 1);
    int bz = std::min(static_cast<int>(gz), res - 1);
    double fx = gx - bx, fy = gy - by, fz = gz - bz;

    std::size_t level_base = static_cast<std::size_t>(level) * enc.table_size * F;
    for (int dz = 0; dz < 2; ++dz)
      for (int dy = 0; dy < 2; ++dy)
        for (int dx = 0; dx < 2; ++dx) {
          double w = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy) * (dz ? fz : 1.0 - fz);
          std::uint32_t idx = hash_corner(bx + dx, by + dy, bz + dz, enc.table_size);
          std::size_t base = level_base + static_cast<std::size_t>(idx) * F;
          for (int f = 0; f < F; ++f) out[level * F + f] += w * enc.tables[base + f];
          if (stencil) stencil->entries.push_back({base, w});
        }
  }
  return out;
}

void FieldSet::validate() const {
  volume.validate();
  geometry.validate();
  hash.validate();
  texture.validate();
  if (geometry.input_dim() != encoding.output_dim() + volume.channels)
    throw ConfigError("geometry decoder input dim must equal |E(x)| + C_v");
  if (geometry.output_dim() != 1) throw ConfigError("geometry decoder must output one SDF value");
  if (texture.input_dim() != hash.output_dim() + 3)
    throw ConfigError("texture decoder input dim must equal levels*F + 3");
  if (texture.output_dim() != 3) throw ConfigError("texture decoder must output RGB");
  if (!mv_texture.layers.empty()) {
    if (mv_texture.output_dim() != 1)
      throw ConfigError("multi-view blending decoder must output one logit");
  }
}

Vec3 FieldSet::to_hash_domain(const Vec3& x) const {
  Vec3 out;
  for (int a = 0; a < 3; ++a) {
    double span = volume.spacing * (volume.dims[a] - 1);
    out[a] = std::clamp((x[a] - volume.origin[a]) / span, 0.0, 1.0);
  }
  return out;
}

FieldSet make_fieldset(VoxelGrid volume, std::uint64_t seed) {
  FieldSet fs;
  fs.volume = std::move(volume);
  Rng rng(seed);
  Rng geom_rng = rng.fork(1);
  Rng tex_rng = rng.fork(2);
  Rng hash_rng = rng.fork(3);

  int enc_dim = fs.encoding.output_dim();
  fs.geometry = make_mlp({enc_dim + fs.volume.channels, 64, 64, 1}, Activation::Softplus,
                         Activation::None, geom_rng);
  fs.hash = make_hash_encoding(8, 1u << 14, 2, 16, 1.5);
  // Small random tables so early renders are not exactly flat.
  for (auto& v : fs.hash.tables) v = hash_rng.uniform(-1e-4, 1e-4);
  fs.texture = make_mlp({fs.hash.output_dim() + 3, 64, 3}, Activation::Relu, Activation::Sigmoid,
                        tex_rng);
  fs.validate();
  return fs;
}

double decode_sdf(const FieldSet& fs, const Vec3& x) {
  std::vector<double> input = positional_encode(x, fs.encoding);
  VolumeSample v = query_volume(fs.volume, x);
  input.insert(input.end(), v.value.begin(), v.value.end());
  return mlp_forward(fs.geometry, input)[0];
}

double decode_sdf_grad(const FieldSet& fs, const Vec3& x, SdfGradients* grad) {
  std::vector<double> enc = positional_encode(x, fs.encoding);
  int enc_dim = static_cast<int>(enc.size());
  VolumeSample v = query_volume(fs.volume, x);

  std::vector<double> input = enc;
  input.insert(input.end(), v.value.begin(), v.value.end());

  MlpTrace trace;
  double s = mlp_forward(fs.geometry, input, &trace)[0];
  if (!grad) return s;

  std::vector<double> dinput = mlp_backward(fs.geometry, trace, {1.0});

  // Chain through the positional encoding (each output touches one axis).
  std::vector<double> denc = positional_encode_derivative(x, fs.encoding);
  int per_axis = fs.encoding.per_axis_dim();
  grad->dx = Vec3{};
  for (int i = 0; i < enc_dim; ++i) grad->dx[i / per_axis] += dinput[i] * denc[i];

  // Volume contribution: spatial part plus the trilinear footprint.
  grad->dvolume.assign(fs.volume.channels, 0.0);
  for (int c = 0; c < fs.volume.channels; ++c) grad->dvolume[c] = dinput[enc_dim + c];
  std::vector<Vec3> vgrad = query_volume_gradient(fs.volume, x);
  for (int c = 0; c < fs.volume.channels; ++c) grad->dx += vgrad[c] * grad->dvolume[c];
  grad->stencil = volume_stencil(fs.volume, x);
  return s;
}

Vec3 decode_color(const FieldSet& fs, const Vec3& x) { return decode_color_traced(fs, x, nullptr); }

Vec3 decode_color_traced(const FieldSet& fs, const Vec3& x, ColorTrace* trace) {
  Vec3 h01 = fs.to_hash_domain(x);
  std::vector<double> input = hash_encode(h01, fs.hash, trace ? &trace->stencil : nullptr);
  input.push_back(h01.x);
  input.push_back(h01.y);
  input.push_back(h01.z);
  std::vector<double> rgb = mlp_forward(fs.texture, input, trace ? &trace->mlp : nullptr);
  return Vec3{rgb[0], rgb[1], rgb[2]};
}

void decode_color_backward(const FieldSet& fs, const ColorTrace& trace, const Vec3& dcolor,
                           MlpGrads* dtexture, std::vector<double>* dtables) {
  std::vector<double> dout{dcolor.x, dcolor.y, dcolor.z};
  std::vector<double> dinput = mlp_backward(fs.texture, trace.mlp, dout, dtexture);
  if (!dtables) return;
  const int F = fs.hash.features_per_level;
  for (int level = 0; level < fs.hash.levels; ++level)
    for (int corner = 0; corner < 8; ++corner) {
      const auto& e = trace.stencil.entries[static_cast<std::size_t>(level) * 8 + corner];
      for (int f = 0; f < F; ++f) (*dtables)[e.table_base + f] += e.weight * dinput[level * F + f];
    }
}

namespace {

double clamped_logit(double c) {
  const double eps = 1e-7;
  double v = std::clamp(c, eps, 1.0 - eps);
  return std::log(v / (1.0 - v));
}

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

}  // namespace

Vec3 decode_color_mv(const FieldSet& fs, const Vec3& x,
                     const std::vector<std::vector<double>>& view_features,
                     const std::vector<Vec3>& view_dirs) {
  if (fs.mv_texture.layers.empty())
    throw ConfigError("multi-view texture decoder is not configured");
  if (view_features.empty()) throw ConfigError("decode_color_mv needs at least one view");
  if (view_features.size() != view_dirs.size())
    throw ConfigError("decode_color_mv: features and directions misaligned");
  for (const auto& f : view_features)
    if (f.size() < 3 || f.size() != view_features[0].size())
      throw ConfigError("decode_color_mv: per-view features must agree and carry RGB");

  VolumeSample v = query_volume(fs.volume, x);
  const std::size_t n = view_features.size();

  std::vector<double> logits(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> input = view_features[i];
    input.insert(input.end(), v.value.begin(), v.value.end());
    input.push_back(view_dirs[i].x);
    input.push_back(view_dirs[i].y);
    input.push_back(view_dirs[i].z);
    logits[i] = mlp_forward(fs.mv_texture, input)[0];
  }

  double lmax = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l - lmax);

  // Blend per-view colors in logit space: agreeing views pass through exactly
  // and the sigmoid keeps the result inside [min, max] of the inputs.
  Vec3 blended_logit{};
  for (std::size_t i = 0; i < n; ++i) {
    double w = std::exp(logits[i] - lmax) / denom;
    for (int c = 0; c < 3; ++c) blended_logit[c] += w * clamped_logit(view_features[i][c]);
  }
  return Vec3{stable_sigmoid(blended_logit.x), stable_sigmoid(blended_logit.y),
              stable_sigmoid(blended_logit.z)};
}

namespace {

void write_mlp(std::ostream& os, const Mlp& mlp) {
  write_u32(os, static_cast<std::uint32_t>(mlp.layers.size()));
  TensorBundle bundle;
  for (const auto& layer : mlp.layers) {
    write_u32(os, static_cast<std::uint32_t>(layer.act));
    bundle.tensors.push_back(layer.weight);
    bundle.tensors.push_back(layer.bias);
  }
  write_bundle(os, bundle);
}

Mlp read_mlp(std::istream& is) {
  std::uint32_t count = read_u32(is);
  if (count > 1024) throw FormatError("mlp layer count out of range");
  std::vector<Activation> acts(count);
  for (auto& a : acts) {
    std::uint32_t code = read_u32(is);
    if (code > 3) throw FormatError("unknown activation code");
    a = static_cast<Activation>(code);
  }
  TensorBundle bundle = read_bundle(is);
  if (bundle.tensors.size() != static_cast<std::size_t>(count) * 2)
    throw FormatError("mlp tensor count does not match layer count");
  Mlp mlp;
  for (std::uint32_t l = 0; l < count; ++l) {
    MlpLayer layer;
    layer.weight = bundle.tensors[2 * l];
    layer.bias = bundle.tensors[2 * l + 1];
    layer.act = acts[l];
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

}  // namespace

void save_fieldset(const std::string& path, const FieldSet& fs) {
  fs.validate();
  std::ostringstream os;
  write_bytes(os, "GDFLD1", 6);
  write_u32(os, static_cast<std::uint32_t>(fs.encoding.levels));
  write_u32(os, fs.encoding.include_input ? 1 : 0);
  write_volume_stream(os, fs.volume);
  write_mlp(os, fs.geometry);
  write_mlp(os, fs.texture);
  write_u32(os, fs.mv_texture.layers.empty() ? 0 : 1);
  if (!fs.mv_texture.layers.empty()) write_mlp(os, fs.mv_texture);
  write_u32(os, static_cast<std::uint32_t>(fs.hash.levels));
  write_u32(os, fs.hash.table_size);
  write_u32(os, static_cast<std::uint32_t>(fs.hash.features_per_level));
  write_u32(os, static_cast<std::uint32_t>(fs.hash.base_resolution));
  write_f32(os, static_cast<float>(fs.hash.growth));
  for (double v : fs.hash.tables) write_f32(os, static_cast<float>(v));
  atomic_write_file(path, os.str());
}

FieldSet load_fieldset(const std::string& path) {
  std::istringstream is(read_file(path));
  expect_magic(is, "GDFLD1", 6);
  FieldSet fs;
  fs.encoding.levels = static_cast<int>(read_u32(is));
  fs.encoding.include_input = read_u32(is) != 0;
  fs.volume = read_volume_stream(is);
  fs.geometry = read_mlp(is);
  fs.texture = read_mlp(is);
  if (read_u32(is) != 0) fs.mv_texture = read_mlp(is);
  HashEncoding hash;
  hash.levels = static_cast<int>(read_u32(is));
  hash.table_size = read_u32(is);
  hash.features_per_level = static_cast<int>(read_u32(is));
  hash.base_resolution = static_cast<int>(read_u32(is));
  hash.growth = read_f32(is);
  if (hash.levels < 1 || hash.levels > 64 || hash.features_per_level < 1 ||
      hash.features_per_level > 64 || hash.table_size > (1u << 26))
    throw FormatError("hash encoding header is out of range");
  hash.tables.resize(hash.table_entries());
  for (double& v : hash.tables) v = read_f32(is);
  fs.hash = std::move(hash);
  fs.validate();
  return fs;
}

}  // namespace gd
