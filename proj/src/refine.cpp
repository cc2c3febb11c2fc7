// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/refine.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "gd/log.hpp"

namespace gd {

namespace {

double block_norm(const std::vector<double>& v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

bool block_finite(const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double mlp_grads_norm(const MlpGrads& g) {
  double acc = 0.0;
  for (const auto& t : g.dweight)
    for (double x : t.data) acc += x * x;
  for (const auto& t : g.dbias)
    for (double x : t.data) acc += x * x;
  return std::sqrt(acc);
}

bool mlp_grads_finite(const MlpGrads& g) {
  for (const auto& t : g.dweight)
    if (!block_finite(t.data)) return false;
  for (const auto& t : g.dbias)
    if (!block_finite(t.data)) return false;
  return true;
}

void scale_vector(std::vector<double>& v, double s) {
  for (double& x : v) x *= s;
}

// Clip a block to L2 norm `clip` and reject non-finite values. The check
// runs after clipping so an Inf norm cannot mask NaN entries.
void clip_and_check(std::vector<double>& v, double clip, const char* block) {
  double n = block_norm(v);
  if (std::isfinite(n) && n > clip) scale_vector(v, clip / n);
  if (!block_finite(v))
    throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
}

void clip_and_check(MlpGrads& g, double clip, const char* block) {
  double n = mlp_grads_norm(g);
  if (std::isfinite(n) && n > clip) g.scale(clip / n);
  if (!mlp_grads_finite(g))
    throw NumericError(std::string("non-finite gradient in parameter block '") + block + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// DiffusionSchedule
// ---------------------------------------------------------------------------

double DiffusionSchedule::alpha(double t) const { return std::cos(0.5 * kPi * t / steps); }

double DiffusionSchedule::sigma(double t) const { return std::sin(0.5 * kPi * t / steps); }

double DiffusionSchedule::weight(double t) const {
  double s = sigma(t);
  return s * s;
}

double DiffusionSchedule::sample_t(Rng& rng) const {
  return rng.uniform(t_lo * steps, t_hi * steps);
}

void DiffusionSchedule::validate() const {
  if (steps < 1) throw ConfigError("diffusion schedule needs steps >= 1");
  if (!(t_lo > 0.0 && t_lo < t_hi && t_hi < 1.0))
    throw ConfigError("diffusion t range must satisfy 0 < t_lo < t_hi < 1");
}

std::vector<double> add_noise(const std::vector<double>& x, double t,
                              const std::vector<double>& eps, const DiffusionSchedule& sched) {
  if (x.size() != eps.size()) throw ConfigError("add_noise: image and noise sizes differ");
  double a = sched.alpha(t), s = sched.sigma(t);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + s * eps[i];
  return out;
}

std::vector<double> eps_to_v(const std::vector<double>& eps, const std::vector<double>& x_t,
                             double t, const DiffusionSchedule& sched) {
  if (eps.size() != x_t.size()) throw ConfigError("eps_to_v: size mismatch");
  double a = sched.alpha(t), s = sched.sigma(t);
  // x0 = (x_t - s*eps)/a, v = a*eps - s*x0.
  std::vector<double> out(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    double x0 = (x_t[i] - s * eps[i]) / a;
    out[i] = a * eps[i] - s * x0;
  }
  return out;
}

std::vector<double> v_to_eps(const std::vector<double>& v, const std::vector<double>& x_t,
                             double t, const DiffusionSchedule& sched) {
  if (v.size() != x_t.size()) throw ConfigError("v_to_eps: size mismatch");
  double a = sched.alpha(t), s = sched.sigma(t);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = a * v[i] + s * x_t[i];
  return out;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

double ScoreProvider::regression_step(const ScoreQuery&, const DiffusionSchedule&,
                                      const std::vector<double>&, double) {
  throw ConfigError("score provider is not trainable");
}

std::vector<double> ScoreProvider::epsilon(const ScoreQuery& q, const DiffusionSchedule& sched) {
  std::vector<double> out = predict(q, sched);
  if (out.size() != q.x.size()) throw ConfigError("score provider output shape mismatch");
  if (parameterization() == Parameterization::V) return v_to_eps(out, q.x, q.t, sched);
  return out;
}

AnalyticGaussianProvider::AnalyticGaussianProvider(std::vector<double> mu, double s2,
                                                   Parameterization param)
    : mu_(std::move(mu)), s2_(s2), param_(param) {
  if (s2_ < 0.0) throw ConfigError("gaussian score variance must be >= 0");
}

std::vector<double> AnalyticGaussianProvider::predict(const ScoreQuery& q,
                                                      const DiffusionSchedule& sched) {
  if (q.x.size() != mu_.size()) throw ConfigError("gaussian score: query/mean size mismatch");
  double a = sched.alpha(q.t), s = sched.sigma(q.t);
  double den = a * a * s2_ + s * s;
  std::vector<double> eps(q.x.size());
  for (std::size_t i = 0; i < q.x.size(); ++i) eps[i] = s * (q.x[i] - a * mu_[i]) / den;
  if (param_ == Parameterization::V) return eps_to_v(eps, q.x, q.t, sched);
  return eps;
}

void TrainableNetConfig::validate() const {
  if (width < 1 || height < 1 || channels < 1) throw ConfigError("denoiser image dims must be >= 1");
  if (down < 1 || width % down != 0 || height % down != 0)
    throw ConfigError("downsample factor must divide width and height");
  if (hidden < 1) throw ConfigError("denoiser hidden width must be >= 1");
  if (t_embed_pairs < 0) throw ConfigError("t_embed_pairs must be >= 0");
}

int TrainableNetConfig::input_dim() const {
  // Downsampled image + timestep embedding + condition scalar + pose sin/cos.
  return (width / down) * (height / down) * channels + 2 * t_embed_pairs + 1 + 4;
}

TrainableNetProvider::TrainableNetProvider(const TrainableNetConfig& cfg, Parameterization param)
    : cfg_(cfg), param_(param) {
  cfg_.validate();
  Rng rng(cfg_.seed);
  net_ = make_mlp({cfg_.input_dim(), cfg_.hidden, cfg_.output_dim()}, Activation::Relu,
                  Activation::None, rng);
}

std::vector<double> TrainableNetProvider::embed(const ScoreQuery& q) const {
  if (q.width != cfg_.width || q.height != cfg_.height || q.channels != cfg_.channels)
    throw ConfigError("denoiser query shape does not match its configuration");
  if (q.x.size() != static_cast<std::size_t>(cfg_.output_dim()))
    throw ConfigError("denoiser query payload size mismatch");

  std::vector<double> in;
  in.reserve(cfg_.input_dim());

  int dw = cfg_.width / cfg_.down, dh = cfg_.height / cfg_.down;
  double inv = 1.0 / (cfg_.down * cfg_.down);
  for (int by = 0; by < dh; ++by)
    for (int bx = 0; bx < dw; ++bx)
      for (int c = 0; c < cfg_.channels; ++c) {
        double acc = 0.0;
        for (int dy = 0; dy < cfg_.down; ++dy)
          for (int dx = 0; dx < cfg_.down; ++dx) {
            int x = bx * cfg_.down + dx, y = by * cfg_.down + dy;
            acc += q.x[(static_cast<std::size_t>(y) * cfg_.width + x) * cfg_.channels + c];
          }
        in.push_back(acc * inv);
      }

  double u = q.t;  // normalized below; embedding wants a bounded argument
  for (int k = 0; k < cfg_.t_embed_pairs; ++k) {
    double f = kPi * std::ldexp(1.0, k);
    in.push_back(std::sin(f * u));
    in.push_back(std::cos(f * u));
  }
  in.push_back(static_cast<double>(q.condition_id));
  double az = q.azimuth_deg * kPi / 180.0, el = q.elevation_deg * kPi / 180.0;
  in.push_back(std::sin(az));
  in.push_back(std::cos(az));
  in.push_back(std::sin(el));
  in.push_back(std::cos(el));
  return in;
}

std::vector<double> TrainableNetProvider::predict(const ScoreQuery& q,
                                                  const DiffusionSchedule& sched) {
  ScoreQuery norm = q;
  norm.t = q.t / sched.steps;
  // embed() reads t directly; pass the normalized value through the query.
  std::vector<double> in = embed(norm);
  return mlp_forward(net_, in);
}

double TrainableNetProvider::regression_step(const ScoreQuery& q, const DiffusionSchedule& sched,
                                             const std::vector<double>& eps, double eta4) {
  if (eps.size() != static_cast<std::size_t>(cfg_.output_dim()))
    throw ConfigError("regression target size mismatch");
  ScoreQuery norm = q;
  norm.t = q.t / sched.steps;
  std::vector<double> in = embed(norm);

  MlpTrace trace;
  std::vector<double> pred = mlp_forward(net_, in, &trace);
  double loss = 0.0;
  std::vector<double> dout(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - eps[i];
    loss += d * d;
    dout[i] = 2.0 * d;
  }

  MlpGrads grads;
  grads.init_like(net_);
  mlp_backward(net_, trace, dout, &grads);
  for (std::size_t l = 0; l < net_.layers.size(); ++l) {
    auto& layer = net_.layers[l];
    for (std::size_t i = 0; i < layer.weight.data.size(); ++i)
      layer.weight.data[i] -= eta4 * grads.dweight[l].data[i];
    for (std::size_t i = 0; i < layer.bias.data.size(); ++i)
      layer.bias.data[i] -= eta4 * grads.dbias[l].data[i];
  }
  return loss;
}

// ---------------------------------------------------------------------------
// External provider protocol
// ---------------------------------------------------------------------------

void write_score_request(std::ostream& os, const ScoreRequest& req) {
  std::size_t count = static_cast<std::size_t>(req.width) * req.height * req.channels;
  if (req.payload.size() != count) throw ConfigError("score request payload size mismatch");
  write_u32(os, static_cast<std::uint32_t>(4 + 4 * 3 + 4 + 4 + 4 * count));
  write_bytes(os, "GDSP", 4);
  write_u32(os, static_cast<std::uint32_t>(req.width));
  write_u32(os, static_cast<std::uint32_t>(req.height));
  write_u32(os, static_cast<std::uint32_t>(req.channels));
  write_f32(os, static_cast<float>(req.t));
  write_u32(os, static_cast<std::uint32_t>(req.condition_id));
  for (double v : req.payload) write_f32(os, static_cast<float>(v));
}

ScoreRequest read_score_request(std::istream& is) {
  std::uint32_t len = read_u32(is);
  expect_magic(is, "GDSP", 4);
  ScoreRequest req;
  req.width = static_cast<int>(read_u32(is));
  req.height = static_cast<int>(read_u32(is));
  req.channels = static_cast<int>(read_u32(is));
  req.t = read_f32(is);
  req.condition_id = static_cast<int>(read_u32(is));
  if (req.width < 1 || req.height < 1 || req.channels < 1 || req.width > 1 << 16 ||
      req.height > 1 << 16 || req.channels > 64)
    throw FormatError("score request header out of range");
  std::size_t count = static_cast<std::size_t>(req.width) * req.height * req.channels;
  if (len != 4 + 4 * 3 + 4 + 4 + 4 * count)
    throw FormatError("score request length prefix disagrees with header");
  req.payload.resize(count);
  for (double& v : req.payload) v = read_f32(is);
  return req;
}

void write_score_response(std::ostream& os, const std::vector<double>& payload) {
  write_u32(os, static_cast<std::uint32_t>(4 * payload.size()));
  for (double v : payload) write_f32(os, static_cast<float>(v));
}

std::vector<double> read_score_response(std::istream& is, std::size_t expect) {
  std::uint32_t len = read_u32(is);
  if (len != 4 * expect) throw FormatError("score response has unexpected length");
  std::vector<double> out(expect);
  for (double& v : out) v = read_f32(is);
  return out;
}

ExternalScoreProvider::ExternalScoreProvider(std::istream& in, std::ostream& out,
                                             Parameterization param)
    : in_(in), out_(out), param_(param) {}

std::vector<double> ExternalScoreProvider::predict(const ScoreQuery& q,
                                                   const DiffusionSchedule&) {
  ScoreRequest req;
  req.width = q.width;
  req.height = q.height;
  req.channels = q.channels;
  req.t = q.t;
  req.condition_id = q.condition_id;
  req.payload = q.x;
  write_score_request(out_, req);
  out_.flush();
  return read_score_response(in_, q.x.size());
}

// ---------------------------------------------------------------------------
// Gradient assembly
// ---------------------------------------------------------------------------

std::vector<double> vsd_pixel_gradient(double t, const std::vector<double>& eps_pre,
                                       const std::vector<double>& eps_lora,
                                       const DiffusionSchedule& sched) {
  if (eps_pre.size() != eps_lora.size())
    throw ConfigError("vsd gradient: score shapes differ");
  double w = sched.weight(t);
  std::vector<double> g(eps_pre.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = w * (eps_pre[i] - eps_lora[i]);
  return g;
}

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

void LRSchedule::validate() const {
  if (!(volume.lo <= volume.hi) || volume.lo <= 0.0)
    throw ConfigError("volume LR ramp needs 0 < lo <= hi");
  if (!(texture.lo <= texture.hi) || texture.lo <= 0.0)
    throw ConfigError("texture LR decay needs 0 < lo <= hi");
  if (!(volume.ramp_fraction > 0.0 && volume.ramp_fraction <= 1.0))
    throw ConfigError("ramp_fraction must lie in (0, 1]");
}

LRPair lr_schedule(int step, int total, const LRSchedule& sched) {
  if (step < 0 || step >= total) throw ConfigError("lr_schedule step out of range");
  LRPair lr;
  if (total == 1) {
    lr.eta1 = sched.volume.lo;
    lr.eta2 = sched.texture.hi;
    return lr;
  }
  double ramp_steps = sched.volume.ramp_fraction * total;
  double u = std::min(step / ramp_steps, 1.0);
  lr.eta1 = sched.volume.lo + (sched.volume.hi - sched.volume.lo) * u;
  double c = 0.5 * (1.0 + std::cos(kPi * step / (total - 1)));
  lr.eta2 = sched.texture.lo + (sched.texture.hi - sched.texture.lo) * c;
  return lr;
}

// ---------------------------------------------------------------------------
// Refinement loop
// ---------------------------------------------------------------------------

void RefineConfig::validate() const {
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (particles < 1) throw ConfigError("particle count must be >= 1");
  if (eta3 <= 0.0 || eta4 <= 0.0) throw ConfigError("learning rates must be > 0");
  if (grad_clip <= 0.0) throw ConfigError("gradient clip must be > 0");
  lr.validate();
  render.validate();
  poses.validate();
  if (intrinsics.width != render.width || intrinsics.height != render.height)
    throw ConfigError("refine intrinsics resolution must match the render config");
}

double vsd_step_gradient(const FieldSet& fs, const Camera& cam, const RenderConfig& rc,
                         ScoreProvider& pre, ScoreProvider& lora, double t,
                         const std::vector<double>& eps, int condition_id,
                         const SphericalPose& pose, const DiffusionSchedule& sched,
                         FieldGrads* grads, ScoreQuery* query_out) {
  RenderOutput frame = render_image(fs, cam, rc);
  std::vector<double> x = frame.color.data;

  ScoreQuery q;
  q.x = add_noise(x, t, eps, sched);
  q.width = rc.width;
  q.height = rc.height;
  q.channels = 3;
  q.t = t;
  q.condition_id = condition_id;
  q.azimuth_deg = pose.azimuth_deg;
  q.elevation_deg = pose.elevation_deg;

  std::vector<double> eps_pre = pre.epsilon(q, sched);
  std::vector<double> eps_lora = lora.epsilon(q, sched);
  std::vector<double> g = vsd_pixel_gradient(t, eps_pre, eps_lora, sched);

  if (grads) {
    std::vector<Vec3> dcolor(static_cast<std::size_t>(rc.width) * rc.height);
    for (std::size_t p = 0; p < dcolor.size(); ++p)
      dcolor[p] = Vec3{g[p * 3 + 0], g[p * 3 + 1], g[p * 3 + 2]};
    render_backward(fs, cam, rc, dcolor, grads);
  }
  if (query_out) *query_out = q;
  return block_norm(g);
}

RefineResult refine_loop(FieldSet& fs, ScoreProvider& pre, ScoreProvider& lora,
                         const DiffusionSchedule& sched, const RefineConfig& cfg) {
  cfg.validate();
  sched.validate();
  fs.validate();
  const std::uint64_t geometry_sum = fs.geometry.checksum();

  std::size_t pixels = static_cast<std::size_t>(cfg.render.width) * cfg.render.height;
  RefineResult res;
  res.trace.reserve(cfg.iterations);

  for (int step = 0; step < cfg.iterations; ++step) {
    LRPair lr = lr_schedule(step, std::max(cfg.iterations, 1), cfg.lr);

    FieldGrads grads;
    grads.init_like(fs);
    double vsd_norm = 0.0, lora_loss = 0.0;

    for (int particle = 0; particle < cfg.particles; ++particle) {
      Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(step) * cfg.particles + particle));
      SphericalPose pose = sample_refine_pose(cfg.poses, rng);
      Camera cam = look_at_pose(pose, Vec3{0, 0, 0}, cfg.intrinsics);
      RenderConfig rc = cfg.render;
      rc.seed = derive_seed(cfg.seed ^ 0x7261795fu, static_cast<std::uint64_t>(step));

      double t = sched.sample_t(rng);
      std::vector<double> eps(pixels * 3);
      for (double& e : eps) e = rng.normal();

      FieldGrads sample;
      sample.init_like(fs);
      ScoreQuery q;
      vsd_norm += vsd_step_gradient(fs, cam, rc, pre, lora, t, eps, cfg.condition_id, pose,
                                    sched, &sample, &q);
      sample.scale(1.0 / cfg.particles);
      grads.add(sample);

      if (lora.trainable()) lora_loss += lora.regression_step(q, sched, eps, cfg.eta4);
    }
    vsd_norm /= cfg.particles;
    lora_loss /= cfg.particles;

    clip_and_check(grads.dvolume, cfg.grad_clip, "volume");
    clip_and_check(grads.dtables, cfg.grad_clip, "hash");
    clip_and_check(grads.dtexture, cfg.grad_clip, "texture");

    for (std::size_t i = 0; i < fs.volume.data.size(); ++i)
      fs.volume.data[i] -= lr.eta1 * grads.dvolume[i];
    for (std::size_t i = 0; i < fs.hash.tables.size(); ++i)
      fs.hash.tables[i] -= lr.eta2 * grads.dtables[i];
    for (std::size_t l = 0; l < fs.texture.layers.size(); ++l) {
      auto& layer = fs.texture.layers[l];
      for (std::size_t i = 0; i < layer.weight.data.size(); ++i)
        layer.weight.data[i] -= cfg.eta3 * grads.dtexture.dweight[l].data[i];
      for (std::size_t i = 0; i < layer.bias.data.size(); ++i)
        layer.bias.data[i] -= cfg.eta3 * grads.dtexture.dbias[l].data[i];
    }

    res.trace.push_back({step, lr.eta1, lr.eta2, vsd_norm, lora_loss});
    if (step % 50 == 0)
      GD_LOG_DEBUG << "refine step " << step << " vsd_norm " << vsd_norm << " lora_loss "
                   << lora_loss;
  }

  if (fs.geometry.checksum() != geometry_sum)
    throw NumericError("geometry decoder changed during refinement; it must stay frozen");
  return res;
}

void write_trace_csv(const std::string& path, const std::vector<RefineTraceRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,eta1,eta2,vsd_norm,lora_loss\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.eta1 << ',' << r.eta2 << ',' << r.vsd_norm << ',' << r.lora_loss
       << '\n';
  atomic_write_file(path, os.str());
}

std::vector<double> vsd_identity_harness(std::vector<double> x0, const std::vector<double>& mu,
                                         const DiffusionSchedule& sched, int steps, double eta,
                                         std::uint64_t seed) {
  if (x0.size() != mu.size()) throw ConfigError("harness image/target size mismatch");
  AnalyticGaussianProvider pre(mu, 0.0);

  auto residual = [&](const std::vector<double>& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - mu[i]) * (x[i] - mu[i]);
    return std::sqrt(acc);
  };

  std::vector<double> trace;
  trace.reserve(steps + 1);
  trace.push_back(residual(x0));

  for (int step = 0; step < steps; ++step) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(step)));
    double t = sched.sample_t(rng);
    std::vector<double> eps(x0.size());
    for (double& e : eps) e = rng.normal();

    ScoreQuery q;
    q.x = add_noise(x0, t, eps, sched);
    q.width = static_cast<int>(x0.size());
    q.height = 1;
    q.channels = 1;
    q.t = t;

    std::vector<double> eps_pre = pre.epsilon(q, sched);
    // Exact-noise oracle in the adapter role: (x_t - alpha*x)/sigma == eps.
    std::vector<double> g = vsd_pixel_gradient(t, eps_pre, eps, sched);
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] -= eta * g[i];
    trace.push_back(residual(x0));
  }
  return trace;
}

}  // namespace gd
