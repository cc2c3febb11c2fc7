// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gd/camera.hpp"
#include "gd/fields.hpp"
#include "gd/mlp.hpp"
#include "gd/render.hpp"
#include "gd/rng.hpp"

namespace gd {

// ---------------------------------------------------------------------------
// Diffusion schedule
// ---------------------------------------------------------------------------

enum class Parameterization { Epsilon, V };

/// Variance-preserving cosine schedule on t in [0, steps]:
/// alpha = cos(pi/2 * t/steps), sigma = sin(pi/2 * t/steps), so
/// alpha^2 + sigma^2 = 1 identically and alpha is non-increasing.
struct DiffusionSchedule {
  int steps = 1000;
  double t_lo = 0.02;  // sampled range as fractions of `steps`
  double t_hi = 0.98;
  Parameterization parameterization = Parameterization::Epsilon;

  double alpha(double t) const;
  double sigma(double t) const;
  /// Per-timestep gradient weight w(t) = sigma(t)^2.
  double weight(double t) const;
  /// Uniform draw from [t_lo, t_hi] * steps.
  double sample_t(Rng& rng) const;

  /// Throws ConfigError unless steps >= 1 and 0 < t_lo < t_hi < 1.
  void validate() const;
};

/// x_t = alpha_t * x + sigma_t * eps. Throws ConfigError on length mismatch.
std::vector<double> add_noise(const std::vector<double>& x, double t,
                              const std::vector<double>& eps,
                              const DiffusionSchedule& sched);

/// v = alpha_t * eps - sigma_t * x0 with x0 recovered from (x_t, eps).
std::vector<double> eps_to_v(const std::vector<double>& eps, const std::vector<double>& x_t,
                             double t, const DiffusionSchedule& sched);

/// Inverse of eps_to_v: eps = alpha_t * v + sigma_t * x_t.
std::vector<double> v_to_eps(const std::vector<double>& v, const std::vector<double>& x_t,
                             double t, const DiffusionSchedule& sched);

// ---------------------------------------------------------------------------
// Score providers
// ---------------------------------------------------------------------------

/// One denoiser query. `x` is the noisy image x_t, flattened row-major
/// (y, x, channel). Pose angles condition the prediction where supported.
struct ScoreQuery {
  std::vector<double> x;
  int width = 0;
  int height = 0;
  int channels = 3;
  double t = 0.0;
  int condition_id = 0;
  double azimuth_deg = 0.0;
  double elevation_deg = 0.0;
};

/// Denoiser interface. `predict` returns the provider's native
/// parameterization; `epsilon` normalizes to an eps-prediction so the
/// gradient assembly never branches on provider kind.
class ScoreProvider {
 public:
  virtual ~ScoreProvider() = default;

  virtual std::vector<double> predict(const ScoreQuery& q, const DiffusionSchedule& sched) = 0;
  virtual Parameterization parameterization() const { return Parameterization::Epsilon; }
  virtual bool trainable() const { return false; }

  /// One SGD step on ||predict(q) - eps||^2 at rate eta4; returns the
  /// pre-update loss. Throws ConfigError unless trainable().
  virtual double regression_step(const ScoreQuery& q, const DiffusionSchedule& sched,
                                 const std::vector<double>& eps, double eta4);

  std::vector<double> epsilon(const ScoreQuery& q, const DiffusionSchedule& sched);
};

/// Exact eps-prediction when the data distribution is N(mu, s2 * I):
/// eps_hat = sigma_t * (x_t - alpha_t * mu) / (alpha_t^2 s2 + sigma_t^2).
class AnalyticGaussianProvider : public ScoreProvider {
 public:
  AnalyticGaussianProvider(std::vector<double> mu, double s2,
                           Parameterization param = Parameterization::Epsilon);

  std::vector<double> predict(const ScoreQuery& q, const DiffusionSchedule& sched) override;
  Parameterization parameterization() const override { return param_; }

 private:
  std::vector<double> mu_;
  double s2_;
  Parameterization param_;
};

/// Two-layer MLP denoiser standing in for the trainable low-rank adapter.
/// Input: area-downsampled image, sinusoidal timestep embedding, the
/// condition id as a scalar, and (sin, cos) of azimuth and elevation.
struct TrainableNetConfig {
  int width = 8;
  int height = 8;
  int channels = 3;
  int down = 1;          // area-average downsample factor; must divide W and H
  int hidden = 64;
  int t_embed_pairs = 4; // sin/cos pairs at frequencies pi * 2^k
  std::uint64_t seed = 0;

  void validate() const;
  int input_dim() const;
  int output_dim() const { return width * height * channels; }
};

class TrainableNetProvider : public ScoreProvider {
 public:
  explicit TrainableNetProvider(const TrainableNetConfig& cfg,
                                Parameterization param = Parameterization::Epsilon);

  std::vector<double> predict(const ScoreQuery& q, const DiffusionSchedule& sched) override;
  Parameterization parameterization() const override { return param_; }
  bool trainable() const override { return true; }
  double regression_step(const ScoreQuery& q, const DiffusionSchedule& sched,
                         const std::vector<double>& eps, double eta4) override;

  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  std::vector<double> embed(const ScoreQuery& q) const;

 private:
  TrainableNetConfig cfg_;
  Parameterization param_;
  Mlp net_;
};

// ---------------------------------------------------------------------------
// External provider protocol
// ---------------------------------------------------------------------------

struct ScoreRequest {
  int width = 0;
  int height = 0;
  int channels = 0;
  double t = 0.0;
  int condition_id = 0;
  std::vector<double> payload;
};

// Length-prefixed little-endian frames. Request body: magic "GDSP",
// u32 W, u32 H, u32 C, f32 t, u32 condition_id, then W*H*C f32 values.
// Response body: W*H*C f32 values, same shape as the request.
void write_score_request(std::ostream& os, const ScoreRequest& req);
ScoreRequest read_score_request(std::istream& is);
void write_score_response(std::ostream& os, const std::vector<double>& payload);
std::vector<double> read_score_response(std::istream& is, std::size_t expect);

/// Bridges to an out-of-process denoiser over a byte channel (socket or
/// subprocess pipe). The caller owns the streams.
class ExternalScoreProvider : public ScoreProvider {
 public:
  ExternalScoreProvider(std::istream& in, std::ostream& out,
                        Parameterization param = Parameterization::Epsilon);

  std::vector<double> predict(const ScoreQuery& q, const DiffusionSchedule& sched) override;
  Parameterization parameterization() const override { return param_; }

 private:
  std::istream& in_;
  std::ostream& out_;
  Parameterization param_;
};

// ---------------------------------------------------------------------------
// Gradient assembly
// ---------------------------------------------------------------------------

/// g = w(t) * (eps_pre - eps_lora). Throws ConfigError on length mismatch.
std::vector<double> vsd_pixel_gradient(double t, const std::vector<double>& eps_pre,
                                       const std::vector<double>& eps_lora,
                                       const DiffusionSchedule& sched);

// ---------------------------------------------------------------------------
// Learning-rate schedules
// ---------------------------------------------------------------------------

struct LRSchedule {
  struct Ramp {
    double lo = 1e-3;
    double hi = 1e-2;
    double ramp_fraction = 0.3;  // fraction of total steps spent ramping
  } volume;
  struct Decay {
    double hi = 1e-2;
    double lo = 1e-3;
  } texture;

  void validate() const;
};

struct LRPair {
  double eta1 = 0.0;  // volume
  double eta2 = 0.0;  // hash/texture encoder
};

/// eta1 ramps linearly lo->hi over ramp_fraction*total steps, then holds.
/// eta2 follows cosine decay hi->lo across all steps.
LRPair lr_schedule(int step, int total, const LRSchedule& sched);

// ---------------------------------------------------------------------------
// Refinement loop
// ---------------------------------------------------------------------------

struct RefineConfig {
  int iterations = 400;
  int particles = 1;
  double eta3 = 1e-3;       // texture decoder rate
  double eta4 = 1e-3;       // trainable denoiser rate
  double grad_clip = 10.0;  // L2 clip per parameter block
  LRSchedule lr;
  RenderConfig render;
  PoseDistribution poses;
  Intrinsics intrinsics;
  int condition_id = 0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RefineTraceRow {
  int step = 0;
  double eta1 = 0.0;
  double eta2 = 0.0;
  double vsd_norm = 0.0;
  double lora_loss = 0.0;
};

struct RefineResult {
  std::vector<RefineTraceRow> trace;
};

/// One optimization step's parameter gradient: render at `cam`, noise the
/// frame with (t, eps), query both providers, and chain
/// w(t) * (eps_pre - eps_lora) through the renderer transpose.
/// Returns the pixel-gradient L2 norm; fills `grads`.
double vsd_step_gradient(const FieldSet& fs, const Camera& cam, const RenderConfig& rc,
                         ScoreProvider& pre, ScoreProvider& lora, double t,
                         const std::vector<double>& eps, int condition_id,
                         const SphericalPose& pose, const DiffusionSchedule& sched,
                         FieldGrads* grads, ScoreQuery* query_out = nullptr);

/// Priors refinement: per iteration sample a pose, render, noise, assemble
/// the score-difference gradient, update the volume, hash tables, and
/// texture decoder, then fit the trainable denoiser to the drawn noise.
/// The geometry decoder is never touched (checksum-asserted).
/// Throws NumericError naming the parameter block if a gradient is not
/// finite after clipping.
RefineResult refine_loop(FieldSet& fs, ScoreProvider& pre, ScoreProvider& lora,
                         const DiffusionSchedule& sched, const RefineConfig& cfg);

/// CSV loss trace: header step,eta1,eta2,vsd_norm,lora_loss.
void write_trace_csv(const std::string& path, const std::vector<RefineTraceRow>& rows);

/// Degenerate-renderer convergence rig: the optimized parameters are the
/// pixels themselves. eps_pre is the exact Gaussian score for a point mass
/// at `mu`, the adapter oracle returns the drawn noise, so each step pulls
/// x toward mu by w(t) * alpha_t / sigma_t * (x - mu). Returns ||x - mu||
/// per step (index 0 = before any update).
std::vector<double> vsd_identity_harness(std::vector<double> x0, const std::vector<double>& mu,
                                         const DiffusionSchedule& sched, int steps, double eta,
                                         std::uint64_t seed);

}  // namespace gd
