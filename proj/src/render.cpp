// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/render.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "gd/errors.hpp"

namespace gd {

void RenderConfig::validate() const {
  if (samples_per_ray < 2) throw ConfigError("render needs at least 2 samples per ray");
  if (!(sharpness > 0.0)) throw ConfigError("render sharpness must be positive");
  if (width < 1 || height < 1) throw ConfigError("render resolution must be positive");
  if (!(near >= 0.0) || !(near < far)) throw ConfigError("render needs 0 <= near < far");
  if (threads < 1) throw ConfigError("render thread count must be >= 1");
}

RenderConfig RenderConfig::preset(int resolution) {
  if (resolution != 512 && resolution != 1024)
    throw ConfigError("render presets are 512 and 1024");
  RenderConfig cfg;
  cfg.width = resolution;
  cfg.height = resolution;
  return cfg;
}

Ray pixel_ray(const Camera& cam, double px, double py, double near, double far) {
  // Camera frame: x right, y down, z forward; rotation rows are those axes.
  Vec3 dir_cam{(px - cam.principal_x) / cam.focal, (py - cam.principal_y) / cam.focal, 1.0};
  Vec3 dir_world = cam.rotation.transposed() * dir_cam;
  Ray ray;
  ray.origin = cam.position();
  ray.direction = normalized(dir_world);
  ray.near = near;
  ray.far = far;
  return ray;
}

std::vector<Ray> generate_rays(const Camera& cam, const RenderConfig& cfg) {
  cam.validate();
  cfg.validate();
  std::vector<Ray> rays;
  rays.reserve(static_cast<std::size_t>(cfg.width) * cfg.height);
  for (int y = 0; y < cfg.height; ++y)
    for (int x = 0; x < cfg.width; ++x)
      rays.push_back(pixel_ray(cam, x, y, cfg.near, cfg.far));
  return rays;
}

std::vector<double> sample_points(const Ray& ray, int samples, bool stratified, Rng& rng) {
  if (samples < 2) throw ConfigError("sample_points needs at least 2 samples");
  std::vector<double> t(samples);
  if (!stratified) {
    double step = (ray.far - ray.near) / (samples - 1);
    for (int j = 0; j < samples; ++j) t[j] = ray.near + step * j;
    t[samples - 1] = ray.far;
  } else {
    double width = (ray.far - ray.near) / samples;
    for (int j = 0; j < samples; ++j) t[j] = ray.near + width * (j + rng.uniform());
  }
  return t;
}

namespace {

double stable_sigmoid(double x) {
  return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}

constexpr double kDenEps = 1e-6;

}  // namespace

std::vector<double> neus_weights(const std::vector<double>& sdf, double sharpness) {
  if (sdf.size() < 2) throw ConfigError("neus_weights needs at least 2 sdf samples");
  const int m = static_cast<int>(sdf.size());
  std::vector<double> w(m - 1, 0.0);
  double transmittance = 1.0;
  double phi_next = stable_sigmoid(sharpness * sdf[0]);
  for (int j = 0; j + 1 < m; ++j) {
    double phi_j = phi_next;
    phi_next = stable_sigmoid(sharpness * sdf[j + 1]);
    double alpha = std::max((phi_j - phi_next) / std::max(phi_j, kDenEps), 0.0);
    w[j] = alpha * transmittance;
    transmittance *= 1.0 - alpha;
  }
  return w;
}

PixelSample composite(const std::vector<double>& weights, const std::vector<Vec3>& colors,
                      const std::vector<double>& depths, const std::vector<Vec3>& sdf_gradients,
                      const Vec3& background) {
  if (weights.size() != colors.size() || weights.size() != depths.size() ||
      weights.size() != sdf_gradients.size())
    throw ConfigError("composite: input lengths misaligned");
  PixelSample out;
  double wsum = 0.0;
  double dsum = 0.0;
  Vec3 gsum;
  for (std::size_t j = 0; j < weights.size(); ++j) {
    out.color += colors[j] * weights[j];
    dsum += depths[j] * weights[j];
    gsum += sdf_gradients[j] * weights[j];
    wsum += weights[j];
  }
  out.color += background * (1.0 - wsum);
  out.depth = dsum / std::max(wsum, kDenEps);
  out.normal = normalized(gsum);
  out.opacity = wsum;
  return out;
}

Image RenderOutput::normal_image() const {
  Image img(width, height);
  for (int i = 0; i < width * height; ++i)
    for (int c = 0; c < 3; ++c) img.data[static_cast<std::size_t>(i) * 3 + c] =
        0.5 * (normal[i][c] + 1.0);
  return img;
}

namespace {

template <typename Fn>
void parallel_rows(int height, int threads, Fn&& fn) {
  if (threads <= 1) {
    for (int y = 0; y < height; ++y) fn(y);
    return;
  }
  std::vector<std::thread> pool;
  std::size_t n = std::min(threads, height);
  for (std::size_t k = 0; k < n; ++k)
    pool.emplace_back([&fn, k, n, height] {
      for (int y = static_cast<int>(k); y < height; y += static_cast<int>(n)) fn(y);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

RenderOutput render_image(const FieldSet& fs, const Camera& cam, const RenderConfig& cfg) {
  fs.validate();
  cam.validate();
  cfg.validate();

  const int w = cfg.width, h = cfg.height, m = cfg.samples_per_ray;
  RenderOutput out;
  out.width = w;
  out.height = h;
  out.color = Image(w, h);
  out.depth.assign(static_cast<std::size_t>(w) * h, 0.0);
  out.normal.assign(static_cast<std::size_t>(w) * h, Vec3{});
  out.opacity.assign(static_cast<std::size_t>(w) * h, 0.0);

  parallel_rows(h, cfg.threads, [&](int y) {
    std::vector<double> sdf(m);
    std::vector<Vec3> grads(m - 1);
    std::vector<Vec3> colors(m - 1);
    std::vector<double> depths(m - 1);
    for (int x = 0; x < w; ++x) {
      std::size_t pix = static_cast<std::size_t>(y) * w + x;
      Ray ray = pixel_ray(cam, x, y, cfg.near, cfg.far);
      Rng prng(derive_seed(cfg.seed, pix));
      std::vector<double> t = sample_points(ray, m, cfg.stratified, prng);

      for (int j = 0; j < m; ++j) {
        Vec3 p = ray.origin + ray.direction * t[j];
        if (j + 1 < m) {
          SdfGradients sg;
          sdf[j] = decode_sdf_grad(fs, p, &sg);
          grads[j] = sg.dx;
          colors[j] = decode_color(fs, p);
          depths[j] = t[j];
        } else {
          sdf[j] = decode_sdf(fs, p);
        }
      }
      std::vector<double> weights = neus_weights(sdf, cfg.sharpness);
      PixelSample ps = composite(weights, colors, depths, grads, cfg.background);
      out.color.set_pixel(x, y, ps.color);
      out.depth[pix] = ps.depth;
      out.normal[pix] = ps.normal;
      out.opacity[pix] = ps.opacity;
    }
  });
  return out;
}

void FieldGrads::init_like(const FieldSet& fs) {
  dvolume.assign(fs.volume.data.size(), 0.0);
  dtables.assign(fs.hash.table_entries(), 0.0);
  dtexture.init_like(fs.texture);
}

void FieldGrads::add(const FieldGrads& other) {
  for (std::size_t i = 0; i < dvolume.size(); ++i) dvolume[i] += other.dvolume[i];
  for (std::size_t i = 0; i < dtables.size(); ++i) dtables[i] += other.dtables[i];
  for (std::size_t l = 0; l < dtexture.dweight.size(); ++l) {
    for (std::size_t i = 0; i < dtexture.dweight[l].data.size(); ++i)
      dtexture.dweight[l].data[i] += other.dtexture.dweight[l].data[i];
    for (std::size_t i = 0; i < dtexture.dbias[l].data.size(); ++i)
      dtexture.dbias[l].data[i] += other.dtexture.dbias[l].data[i];
  }
}

bool FieldGrads::finite() const {
  for (double v : dvolume)
    if (!std::isfinite(v)) return false;
  for (double v : dtables)
    if (!std::isfinite(v)) return false;
  for (const auto& t : dtexture.dweight)
    for (double v : t.data)
      if (!std::isfinite(v)) return false;
  for (const auto& t : dtexture.dbias)
    for (double v : t.data)
      if (!std::isfinite(v)) return false;
  return true;
}

double FieldGrads::max_abs() const {
  double m = 0.0;
  for (double v : dvolume) m = std::max(m, std::abs(v));
  for (double v : dtables) m = std::max(m, std::abs(v));
  for (const auto& t : dtexture.dweight)
    for (double v : t.data) m = std::max(m, std::abs(v));
  for (const auto& t : dtexture.dbias)
    for (double v : t.data) m = std::max(m, std::abs(v));
  return m;
}

void FieldGrads::scale(double s) {
  for (double& v : dvolume) v *= s;
  for (double& v : dtables) v *= s;
  dtexture.scale(s);
}

namespace {

// Backward of one ray's color against the three trainable blocks.
void ray_backward(const FieldSet& fs, const Ray& ray, const std::vector<double>& t,
                  double sharpness, const Vec3& background, const Vec3& gC, FieldGrads* grads) {
  const int m = static_cast<int>(t.size());

  // Forward pass, keeping everything the chain rule needs.
  std::vector<double> sdf(m);
  std::vector<SdfGradients> sgrads(m);
  std::vector<Vec3> colors(m - 1);
  std::vector<ColorTrace> ctraces(m - 1);
  for (int j = 0; j < m; ++j) {
    Vec3 p = ray.origin + ray.direction * t[j];
    sdf[j] = decode_sdf_grad(fs, p, &sgrads[j]);
    if (j + 1 < m) colors[j] = decode_color_traced(fs, p, &ctraces[j]);
  }

  std::vector<double> phi(m), alpha(m - 1), trans(m);
  for (int j = 0; j < m; ++j) phi[j] = stable_sigmoid(sharpness * sdf[j]);
  trans[0] = 1.0;
  for (int j = 0; j + 1 < m; ++j) {
    alpha[j] = std::max((phi[j] - phi[j + 1]) / std::max(phi[j], kDenEps), 0.0);
    trans[j + 1] = trans[j] * (1.0 - alpha[j]);
  }

  // Color contributions: dL/dc_j = w_j * gC.
  for (int j = 0; j + 1 < m; ++j) {
    double wj = alpha[j] * trans[j];
    if (wj != 0.0) {
      decode_color_backward(fs, ctraces[j], gC * wj, &grads->dtexture, &grads->dtables);
    }
  }

  // Weight gradients via the transmittance recurrence, scanning back to front.
  // G tracks dL/dT_{j+1}; the final transmittance multiplies the background.
  // C = sum_j alpha_j T_j c_j + T_final * bg, so dL/dalpha_j = T_j (gw_j - G_{j+1})
  // with gw_j = <gC, c_j> and G_j = dL/dT_j accumulated back to front.
  double G = dot(gC, background);
  std::vector<double> dalpha(m - 1, 0.0);
  for (int j = m - 2; j >= 0; --j) {
    double gw = dot(gC, colors[j]);
    dalpha[j] = trans[j] * (gw - G);
    G = alpha[j] * gw + (1.0 - alpha[j]) * G;
  }

  // alpha -> phi -> sdf.
  std::vector<double> dsdf(m, 0.0);
  for (int j = 0; j + 1 < m; ++j) {
    if (dalpha[j] == 0.0) continue;
    double num = phi[j] - phi[j + 1];
    double den = std::max(phi[j], kDenEps);
    if (num <= 0.0) continue;  // clamped branch: zero subgradient
    double dphi_j = dalpha[j] * (1.0 / den - (phi[j] > kDenEps ? num / (den * den) : 0.0));
    double dphi_n = dalpha[j] * (-1.0 / den);
    dsdf[j] += dphi_j * sharpness * phi[j] * (1.0 - phi[j]);
    dsdf[j + 1] += dphi_n * sharpness * phi[j + 1] * (1.0 - phi[j + 1]);
  }

  // sdf -> volume data through the trilinear stencil (geometry MLP frozen).
  for (int j = 0; j < m; ++j) {
    if (dsdf[j] == 0.0) continue;
    const auto& sg = sgrads[j];
    for (int i = 0; i < sg.stencil.count; ++i)
      for (int c = 0; c < fs.volume.channels; ++c)
        grads->dvolume[sg.stencil.voxel[i] * fs.volume.channels + c] +=
            dsdf[j] * sg.stencil.weight[i] * sg.dvolume[c];
  }
}

}  // namespace

void render_backward(const FieldSet& fs, const Camera& cam, const RenderConfig& cfg,
                     const std::vector<Vec3>& dcolor, FieldGrads* grads) {
  fs.validate();
  cam.validate();
  cfg.validate();
  if (dcolor.size() != static_cast<std::size_t>(cfg.width) * cfg.height)
    throw ConfigError("render_backward: dcolor size mismatch");
  if (!grads) throw ConfigError("render_backward: grads output is required");
  if (grads->dvolume.size() != fs.volume.data.size())
    throw ConfigError("render_backward: grads not initialized for this fieldset");

  const int w = cfg.width, h = cfg.height, m = cfg.samples_per_ray;
  int threads = std::max(1, std::min(cfg.threads, h));

  // Per-block buffers merged in fixed order keep a given thread count
  // deterministic; thread counts differ only by summation order (1e-10 doc).
  std::vector<FieldGrads> partial(threads);
  for (auto& p : partial) p.init_like(fs);

  parallel_rows(h, threads, [&](int y) {
    FieldGrads* target = &partial[y % threads];
    for (int x = 0; x < w; ++x) {
      std::size_t pix = static_cast<std::size_t>(y) * w + x;
      const Vec3& gC = dcolor[pix];
      if (gC.x == 0.0 && gC.y == 0.0 && gC.z == 0.0) continue;
      Ray ray = pixel_ray(cam, x, y, cfg.near, cfg.far);
      Rng prng(derive_seed(cfg.seed, pix));
      std::vector<double> t = sample_points(ray, m, cfg.stratified, prng);
      ray_backward(fs, ray, t, cfg.sharpness, cfg.background, gC, target);
    }
  });
  for (const auto& p : partial) grads->add(p);
}

double rgb_loss(const Image& target, const Image& rendered) {
  if (target.width != rendered.width || target.height != rendered.height)
    throw ConfigError("rgb_loss: image dimensions differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < target.data.size(); ++i) {
    double d = rendered.data[i] - target.data[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

Image rgb_loss_gradient(const Image& target, const Image& rendered) {
  double loss = rgb_loss(target, rendered);
  Image grad(rendered.width, rendered.height);
  grad.data.assign(rendered.data.size(), 0.0);
  if (loss == 0.0) return grad;
  for (std::size_t i = 0; i < grad.data.size(); ++i)
    grad.data[i] = (rendered.data[i] - target.data[i]) / loss;
  return grad;
}

}  // namespace gd
