// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gd {

/// Run configuration shared by every CLI subcommand.
///
/// Stored on disk as a small TOML subset: `key = value` pairs grouped under
/// one-level `[section]` headers, with `#` comments. Values are integers,
/// floats, booleans, quoted strings, or single-line arrays of quoted strings.
///
/// Contract:
///   - `version` is mandatory and must equal 1.
///   - Unknown keys or sections are rejected by name (ConfigError), so a
///     typoed knob never silently falls back to a default.
///   - Emission is canonical: fixed section and key order, floats at
///     round-trip precision. parse(emit(parse(text))) == parse(text) and
///     emit(parse(emit(cfg))) == emit(cfg).
struct PipelineConfig {
  int version = 1;
  std::uint64_t seed = 0;
  int threads = 1;

  /// Source pose sampling for the cost volume inputs.
  struct Views {
    std::string mode = "sd_front";  ///< "sd_front" or "mvdream_four".
    int count = 8;
    double azimuth_limit = 180.0;
    double elevation_limit = 30.0;
    double radius = 2.5;
    int width = 256;
    int height = 256;
    double focal = 0.0;  ///< <= 0 means 1.2 * width.
  } views;

  /// Cost volume aggregation.
  struct Volume {
    int dims = 150;                          ///< Per-axis voxel count.
    double extent = 1.0;                     ///< Grid spans [-extent, extent]^3.
    std::string extractor = "gradient_aug";  ///< "identity" or "gradient_aug".
  } volume;

  /// Volume renderer settings used by refine, render, and eval.
  struct Render {
    int width = 64;
    int height = 64;
    int samples_per_ray = 64;
    double sharpness = 64.0;
    double near = 0.5;
    double far = 4.5;
    bool stratified = false;
    double focal_scale = 1.2;  ///< Focal length = focal_scale * width.
  } render;

  /// Score distillation loop.
  struct Refine {
    int iterations = 400;
    int particles = 1;
    double eta1_lo = 1e-3;  ///< Geometry LR ramp floor.
    double eta1_hi = 1e-2;  ///< Geometry LR ramp ceiling.
    double ramp_fraction = 0.3;
    double eta2_hi = 1e-2;  ///< Texture LR decay start.
    double eta2_lo = 1e-3;  ///< Texture LR decay floor.
    double eta3 = 1e-3;
    double eta4 = 1e-3;
    double grad_clip = 10.0;
    int condition_id = 0;
  } refine;

  /// Tetrahedral mesh extraction and finetuning.
  struct Mesh {
    int resolution = 96;
    double extent = 1.0;
    int geometry_iterations = 200;
    int texture_iterations = 200;
    double eta_sdf = 1e-3;
    double eta_deform = 1e-3;
    double eta_texture = 1e-3;
    double eta_tables = 1e-3;
    double grad_clip = 10.0;
    int width = 64;
    int height = 64;
  } mesh;

  /// Noise and score model used by refine and finetune-mesh.
  struct Providers {
    std::string score = "analytic";  ///< "analytic" or "trainable".
    double analytic_mu = 0.5;
    double analytic_s2 = 0.25;
    int schedule_steps = 1000;
  } providers;

  /// Evaluation protocol.
  struct Metrics {
    int views = 120;
    double elevation_deg = 0.0;
    double radius = 2.5;
    int resolution = 64;
    int dimension = 16;  ///< Toy embedding dimensionality.
    std::vector<std::string> captions = {"a photo of an object"};
    int correct = 0;  ///< Index of the matching caption.
  } metrics;

  /// Range and enum checks; throws ConfigError naming the offending key.
  void validate() const;
};

/// Parses the TOML subset. Syntax errors throw FormatError with a
/// "<name>:<line>:" prefix; semantic errors (unknown key, wrong type, missing
/// version) throw ConfigError. `name` is only used in messages.
PipelineConfig config_from_toml(const std::string& text,
                                const std::string& name = "<config>");

/// Canonical emission; see PipelineConfig for the fixed-point guarantee.
std::string config_to_toml(const PipelineConfig& cfg);

/// File wrappers around config_from_toml / config_to_toml. load_config uses
/// the path as the message prefix; save_config writes atomically.
PipelineConfig load_config(const std::string& path);
void save_config(const std::string& path, const PipelineConfig& cfg);

/// FNV-1a over the canonical emission, so equivalent configs hash equal.
std::uint64_t config_hash(const PipelineConfig& cfg);

}  // namespace gd
