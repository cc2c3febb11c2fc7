// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <vector>

#include "gd/camera.hpp"
#include "gd/fields.hpp"
#include "gd/image.hpp"
#include "gd/rng.hpp"
#include "gd/vec.hpp"

namespace gd {

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit length
  double near = 0.5;
  double far = 4.5;
};

struct RenderConfig {
  int samples_per_ray = 64;  // M
  double sharpness = 64.0;   // logistic CDF inverse scale on the SDF
  int width = 64;
  int height = 64;
  Vec3 background{1.0, 1.0, 1.0};
  bool stratified = false;
  std::uint64_t seed = 0;
  double near = 0.5;
  double far = 4.5;
  int threads = 1;

  void validate() const;

  /// 512 / 1024 square presets.
  static RenderConfig preset(int resolution);
};

/// One ray per pixel, through the pixel center, row-major.
std::vector<Ray> generate_rays(const Camera& cam, const RenderConfig& cfg);
Ray pixel_ray(const Camera& cam, double px, double py, double near, double far);

/// M strictly increasing depths in [near, far]. Uniform places the endpoints
/// exactly; stratified draws one point per stratum of width (far-near)/M.
std::vector<double> sample_points(const Ray& ray, int samples, bool stratified, Rng& rng);

/// Logistic-CDF opacity chain: alpha_j = max((phi_j - phi_{j+1}) /
/// max(phi_j, 1e-6), 0), w_j = alpha_j * prod_{k<j}(1 - alpha_k).
/// M sdf values produce M-1 weights.
std::vector<double> neus_weights(const std::vector<double>& sdf, double sharpness);

struct PixelSample {
  Vec3 color;
  double depth = 0.0;
  Vec3 normal;
  double opacity = 0.0;
};

/// weights/colors/depths/sdf_gradients index-aligned; depth is weight-averaged
/// with an epsilon-guarded denominator, the normal is the normalized
/// weight-blended SDF gradient.
PixelSample composite(const std::vector<double>& weights, const std::vector<Vec3>& colors,
                      const std::vector<double>& depths, const std::vector<Vec3>& sdf_gradients,
                      const Vec3& background);

struct RenderOutput {
  int width = 0;
  int height = 0;
  Image color;                 // 3-channel
  std::vector<double> depth;   // per pixel
  std::vector<Vec3> normal;    // per pixel, unit where opacity is meaningful
  std::vector<double> opacity; // per pixel

  Image normal_image() const;  // [-1,1] mapped to [0,1] for PNG export
};

RenderOutput render_image(const FieldSet& fs, const Camera& cam, const RenderConfig& cfg);

/// Gradient buffers for the three trainable parameter blocks.
struct FieldGrads {
  std::vector<double> dvolume;  // aligned with VoxelGrid::data
  std::vector<double> dtables;  // aligned with HashEncoding::tables
  MlpGrads dtexture;

  void init_like(const FieldSet& fs);
  void add(const FieldGrads& other);
  bool finite() const;
  double max_abs() const;
  void scale(double s);
};

/// Reverse-mode product: accumulates d(sum_p dot(dcolor[p], color[p]))/dtheta
/// into grads for theta1 (volume), theta2 (hash tables), theta3 (texture MLP).
/// The geometry decoder is frozen and receives no gradient. Recomputes the
/// forward pass internally; dcolor is row-major, one entry per pixel.
void render_backward(const FieldSet& fs, const Camera& cam, const RenderConfig& cfg,
                     const std::vector<Vec3>& dcolor, FieldGrads* grads);

/// Euclidean norm over all channel differences; gradient w.r.t. the rendered
/// image is (rendered - target) / loss (zero at exact match).
double rgb_loss(const Image& target, const Image& rendered);
Image rgb_loss_gradient(const Image& target, const Image& rendered);

}  // namespace gd
