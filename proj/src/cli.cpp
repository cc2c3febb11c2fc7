// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "gd/bytes.hpp"
#include "gd/camera.hpp"
#include "gd/config.hpp"
#include "gd/costvolume.hpp"
#include "gd/errors.hpp"
#include "gd/features.hpp"
#include "gd/fields.hpp"
#include "gd/image.hpp"
#include "gd/log.hpp"
#include "gd/mesh.hpp"
#include "gd/metrics.hpp"
#include "gd/refine.hpp"
#include "gd/render.hpp"

namespace gd::cli {
namespace {

namespace fs = std::filesystem;

// Options shared by every subcommand. The CLI11 option handles let us tell
// "flag given" apart from "flag left at its default".
struct Common {
  std::string config;
  std::string out = ".";
  std::uint64_t seed = 0;
  int threads = 0;
  CLI::Option* seed_opt = nullptr;
  CLI::Option* threads_opt = nullptr;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config,
                  "TOML run configuration; built-in defaults when omitted");
  sub->add_option("--out", c.out, "Output directory")->capture_default_str();
  c.seed_opt = sub->add_option("--seed", c.seed, "Override the config seed");
  c.threads_opt =
      sub->add_option("--threads", c.threads, "Override the config threads");
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

// Loads (or defaults) the config, applies flag overrides, and logs the
// canonical config hash plus the effective seed so runs are attributable.
PipelineConfig resolve(const Common& c) {
  PipelineConfig cfg =
      c.config.empty() ? PipelineConfig{} : load_config(c.config);
  if (c.seed_opt->count() > 0) cfg.seed = c.seed;
  if (c.threads_opt->count() > 0) cfg.threads = c.threads;
  cfg.validate();
  fs::create_directories(c.out);
  char hash[24];
  std::snprintf(hash, sizeof hash, "%016llx",
                static_cast<unsigned long long>(config_hash(cfg)));
  GD_LOG_INFO << "config " << hash << " seed " << cfg.seed;
  return cfg;
}

Intrinsics view_intrinsics(const PipelineConfig& cfg) {
  Intrinsics intr;
  intr.width = cfg.views.width;
  intr.height = cfg.views.height;
  intr.focal =
      cfg.views.focal > 0.0 ? cfg.views.focal : 1.2 * cfg.views.width;
  return intr;
}

RenderConfig render_config(const PipelineConfig& cfg) {
  RenderConfig rc;
  rc.width = cfg.render.width;
  rc.height = cfg.render.height;
  rc.samples_per_ray = cfg.render.samples_per_ray;
  rc.sharpness = cfg.render.sharpness;
  rc.near = cfg.render.near;
  rc.far = cfg.render.far;
  rc.stratified = cfg.render.stratified;
  rc.seed = cfg.seed;
  rc.threads = cfg.threads;
  return rc;
}

DiffusionSchedule schedule(const PipelineConfig& cfg) {
  DiffusionSchedule sched;
  sched.steps = cfg.providers.schedule_steps;
  return sched;
}

// Largest power-of-two downsample that divides the frame and keeps the
// denoiser input at >= 8x8.
int pick_down(int w, int h) {
  int down = 1;
  for (int d = 2; d <= 64; d *= 2) {
    if (w % d == 0 && h % d == 0 && w / d >= 8 && h / d >= 8) down = d;
  }
  return down;
}

struct Providers {
  std::unique_ptr<ScoreProvider> pre;
  std::unique_ptr<ScoreProvider> lora;
};

// The frozen prior is the exact score of N(mu, s2 I). The adapter either
// starts from the same family with doubled variance (their difference pulls
// renders toward mu) or is the small trainable denoiser.
Providers make_providers(const PipelineConfig& cfg, int width, int height) {
  Providers p;
  std::size_t n = static_cast<std::size_t>(width) * height * 3;
  std::vector<double> mu(n, cfg.providers.analytic_mu);
  p.pre = std::make_unique<AnalyticGaussianProvider>(mu,
                                                     cfg.providers.analytic_s2);
  if (cfg.providers.score == "trainable") {
    TrainableNetConfig nc;
    nc.width = width;
    nc.height = height;
    nc.channels = 3;
    nc.down = pick_down(width, height);
    nc.seed = cfg.seed ^ 0x6c6f7261ull;
    p.lora = std::make_unique<TrainableNetProvider>(nc);
  } else {
    p.lora = std::make_unique<AnalyticGaussianProvider>(
        mu, 2.0 * cfg.providers.analytic_s2);
  }
  return p;
}

FieldSet load_or_build_fieldset(const std::string& fieldset_path,
                                const std::string& volume_path,
                                const PipelineConfig& cfg) {
  if (fieldset_path.empty() == volume_path.empty()) {
    throw ConfigError(
        "exactly one of --fieldset and --volume must be given");
  }
  if (!fieldset_path.empty()) return load_fieldset(fieldset_path);
  return make_fieldset(load_volume(volume_path), cfg.seed);
}

std::vector<Vec3> vertex_colors(const FieldSet& fs, const TriMesh& mesh) {
  std::vector<Vec3> colors;
  colors.reserve(mesh.vertices.size());
  for (const Vec3& v : mesh.vertices) colors.push_back(decode_color(fs, v));
  return colors;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_sample_views(const Common& c) {
  PipelineConfig cfg = resolve(c);
  SamplingStrategy strat;
  strat.mode = cfg.views.mode == "mvdream_four" ? SamplingMode::MvdreamFour
                                                : SamplingMode::SdFront;
  strat.count = cfg.views.count;
  strat.rng_seed = cfg.seed;
  strat.azimuth_limit = cfg.views.azimuth_limit;
  strat.elevation_limit = cfg.views.elevation_limit;
  strat.radius = cfg.views.radius;
  std::vector<PosedView> views =
      sample_source_poses(strat, view_intrinsics(cfg));
  std::string path = join(c.out, "cameras.json");
  save_views(path, views);
  GD_LOG_INFO << "wrote " << views.size() << " posed views to " << path;
}

void cmd_build_volume(const Common& c, const std::string& views_path,
                      const std::string& images_dir) {
  PipelineConfig cfg = resolve(c);
  std::vector<PosedView> views = load_views(views_path);
  if (views.size() < 2) {
    throw ConfigError("build-volume: variance needs at least 2 views, got " +
                      std::to_string(views.size()));
  }
  FeatureExtractor ex;
  ex.kind = cfg.volume.extractor == "identity" ? ExtractorKind::Identity
                                               : ExtractorKind::GradientAug;
  std::vector<FeatureMap> maps;
  std::vector<Camera> cams;
  maps.reserve(views.size());
  cams.reserve(views.size());
  for (std::size_t i = 0; i < views.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "view_%03zu.png", i);
    maps.push_back(extract_features(load_png(join(images_dir, name)), ex));
    cams.push_back(views[i].camera);
  }
  GridSpec spec;
  int d = cfg.volume.dims;
  double e = cfg.volume.extent;
  spec.dims = {d, d, d};
  spec.origin = Vec3{-e, -e, -e};
  spec.spacing = 2.0 * e / (d - 1);
  VoxelGrid grid = aggregate_variance(maps, cams, spec);
  std::size_t valid = 0;
  for (std::uint16_t v : grid.validity) valid += v >= 2 ? 1 : 0;
  GD_LOG_INFO << "aggregated " << views.size() << " views into " << d << "^3 x "
              << grid.channels << " volume; valid voxel fraction "
              << static_cast<double>(valid) / grid.voxel_count();
  save_volume(join(c.out, "volume.gdvol"), grid);
}

void cmd_refine(const Common& c, const std::string& fieldset_path,
                const std::string& volume_path) {
  PipelineConfig cfg = resolve(c);
  FieldSet field_set = load_or_build_fieldset(fieldset_path, volume_path, cfg);

  RefineConfig rc;
  rc.iterations = cfg.refine.iterations;
  rc.particles = cfg.refine.particles;
  rc.eta3 = cfg.refine.eta3;
  rc.eta4 = cfg.refine.eta4;
  rc.grad_clip = cfg.refine.grad_clip;
  rc.lr.volume = {cfg.refine.eta1_lo, cfg.refine.eta1_hi,
                  cfg.refine.ramp_fraction};
  rc.lr.texture = {cfg.refine.eta2_hi, cfg.refine.eta2_lo};
  rc.render = render_config(cfg);
  rc.poses.radius_lo = rc.poses.radius_hi = cfg.views.radius;
  rc.intrinsics.width = rc.render.width;
  rc.intrinsics.height = rc.render.height;
  rc.intrinsics.focal = cfg.render.focal_scale * rc.render.width;
  rc.condition_id = cfg.refine.condition_id;
  rc.seed = cfg.seed;

  DiffusionSchedule sched = schedule(cfg);
  Providers p = make_providers(cfg, rc.render.width, rc.render.height);
  RefineResult res = refine_loop(field_set, *p.pre, *p.lora, sched, rc);

  save_fieldset(join(c.out, "fieldset.gdfld"), field_set);
  write_trace_csv(join(c.out, "refine_trace.csv"), res.trace);
  GD_LOG_INFO << "refine finished after " << res.trace.size() << " steps";
}

void cmd_render(const Common& c, const std::string& fieldset_path,
                double azimuth, double elevation, double radius) {
  PipelineConfig cfg = resolve(c);
  FieldSet field_set = load_fieldset(fieldset_path);
  RenderConfig rc = render_config(cfg);
  Intrinsics intr;
  intr.width = rc.width;
  intr.height = rc.height;
  intr.focal = cfg.render.focal_scale * rc.width;
  double r = radius > 0.0 ? radius : cfg.views.radius;
  Camera cam =
      look_at_pose({azimuth, elevation, r}, Vec3{0.0, 0.0, 0.0}, intr);
  RenderOutput out = render_image(field_set, cam, rc);
  save_png(join(c.out, "color.png"), out.color);
  save_png(join(c.out, "normal.png"), out.normal_image());
  save_pfm(join(c.out, "depth.pfm"), out.width, out.height, out.depth);
  GD_LOG_INFO << "rendered " << out.width << "x" << out.height << " at az "
              << azimuth << " el " << elevation << " r " << r;
}

void write_mesh_outputs(const Common& c, const FieldSet& field_set,
                        const TriMesh& mesh_in) {
  TriMesh mesh = mesh_in;
  mesh.colors = vertex_colors(field_set, mesh);
  save_obj(join(c.out, "mesh.obj"), mesh);
  save_ply(join(c.out, "mesh.ply"), mesh);
  GD_LOG_INFO << "mesh: " << mesh.vertices.size() << " vertices, "
              << mesh.faces.size() << " faces"
              << (mesh.watertight() ? ", watertight" : "");
}

void cmd_extract_mesh(const Common& c, const std::string& fieldset_path) {
  PipelineConfig cfg = resolve(c);
  FieldSet field_set = load_fieldset(fieldset_path);
  double e = cfg.mesh.extent;
  TetGrid grid = init_tetgrid(cfg.mesh.resolution, Vec3{-e, -e, -e},
                              Vec3{e, e, e}, &field_set);
  TriMesh mesh = marching_tetrahedra(grid);
  if (mesh.empty()) GD_LOG_INFO << "level set is empty at this resolution";
  write_mesh_outputs(c, field_set, mesh);
}

void cmd_finetune_mesh(const Common& c, const std::string& fieldset_path) {
  PipelineConfig cfg = resolve(c);
  FieldSet field_set = load_fieldset(fieldset_path);
  double e = cfg.mesh.extent;
  TetGrid grid = init_tetgrid(cfg.mesh.resolution, Vec3{-e, -e, -e},
                              Vec3{e, e, e}, &field_set);

  MeshFinetuneConfig mc;
  mc.geometry_iterations = cfg.mesh.geometry_iterations;
  mc.texture_iterations = cfg.mesh.texture_iterations;
  mc.eta_sdf = cfg.mesh.eta_sdf;
  mc.eta_deform = cfg.mesh.eta_deform;
  mc.eta_texture = cfg.mesh.eta_texture;
  mc.eta_tables = cfg.mesh.eta_tables;
  mc.eta4 = cfg.refine.eta4;
  mc.grad_clip = cfg.mesh.grad_clip;
  mc.width = cfg.mesh.width;
  mc.height = cfg.mesh.height;
  mc.focal = cfg.render.focal_scale * mc.width;
  mc.poses.radius_lo = mc.poses.radius_hi = cfg.views.radius;
  mc.condition_id = cfg.refine.condition_id;
  mc.seed = cfg.seed;

  DiffusionSchedule sched = schedule(cfg);
  Providers p = make_providers(cfg, mc.width, mc.height);
  MeshFinetuneResult res =
      mesh_finetune(grid, field_set, *p.pre, *p.lora, sched, mc);

  TriMesh mesh = marching_tetrahedra(grid);
  write_mesh_outputs(c, field_set, mesh);
  save_fieldset(join(c.out, "fieldset.gdfld"), field_set);
  write_trace_csv(join(c.out, "finetune_geometry.csv"), res.geometry_trace);
  write_trace_csv(join(c.out, "finetune_texture.csv"), res.texture_trace);
}

void cmd_eval(const Common& c, const std::string& fieldset_path,
              const std::string& mesh_path, const std::string& reference_dir) {
  PipelineConfig cfg = resolve(c);
  if (fieldset_path.empty() && mesh_path.empty())
    throw ConfigError("eval: need --fieldset and/or --mesh");

  CircleConfig cc;
  cc.count = cfg.metrics.views;
  cc.elevation_deg = cfg.metrics.elevation_deg;
  cc.radius = cfg.metrics.radius;
  cc.render = render_config(cfg);
  cc.render.width = cfg.metrics.resolution;
  cc.render.height = cfg.metrics.resolution;

  TriMesh mesh;
  if (!mesh_path.empty()) mesh = load_obj(mesh_path);

  std::vector<Image> frames;
  if (!fieldset_path.empty()) {
    frames = eval_circle(load_fieldset(fieldset_path), cc);
  } else {
    frames = eval_circle(mesh, cc);
  }

  ToyEmbeddingProvider image_provider(Modality::Image, cfg.metrics.dimension,
                                      cfg.seed);
  ToyEmbeddingProvider text_provider(Modality::Text, cfg.metrics.dimension,
                                     cfg.seed);
  ToyEmbeddingProvider cloud_provider(Modality::Pointcloud,
                                      cfg.metrics.dimension, cfg.seed);

  std::vector<std::vector<double>> caption_embeds;
  for (const std::string& cap : cfg.metrics.captions)
    caption_embeds.push_back(text_provider.embed(text_input(cap)));
  const std::vector<double>& target = caption_embeds[cfg.metrics.correct];

  std::vector<std::vector<double>> frame_embeds;
  frame_embeds.reserve(frames.size());
  EvalReport report;
  for (const Image& f : frames) {
    frame_embeds.push_back(image_provider.embed(image_input(f)));
    const std::vector<double>& fe = frame_embeds.back();
    double dot = 0.0;
    for (std::size_t i = 0; i < fe.size(); ++i) dot += fe[i] * target[i];
    report.per_view_scores.push_back(dot);
  }

  report.r_score =
      r_score(frame_embeds, caption_embeds,
              std::vector<int>(frame_embeds.size(), cfg.metrics.correct));

  if (reference_dir.empty()) {
    GD_LOG_INFO << "no --reference given; fid is the self distance (0)";
    report.fid = fid_from_images(frames, frames, image_provider);
  } else {
    std::vector<std::string> paths;
    for (const auto& entry : fs::directory_iterator(reference_dir)) {
      if (entry.path().extension() == ".png")
        paths.push_back(entry.path().string());
    }
    std::sort(paths.begin(), paths.end());
    if (paths.size() < 2)
      throw ConfigError("eval: --reference needs at least 2 .png images");
    std::vector<Image> reference;
    reference.reserve(paths.size());
    for (const std::string& p : paths) reference.push_back(load_png(p));
    report.fid = fid_from_images(frames, reference, image_provider);
  }

  if (!mesh_path.empty()) {
    report.uni3d_score =
        uni3d_score(mesh, cfg.metrics.captions, cloud_provider, text_provider,
                    cfg.metrics.correct, cfg.seed);
  } else {
    GD_LOG_INFO << "no --mesh given; uni3d score reported as 0";
  }

  save_report(join(c.out, "report.json"), report);
  atomic_write_file(join(c.out, "report.csv"), report_to_csv(report));
  GD_LOG_INFO << "eval: fid " << report.fid << " r " << report.r_score
              << " uni3d " << report.uni3d_score << " over " << frames.size()
              << " views";
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"geodistill: multi-view 3D priors, refinement, and evaluation"};
  app.require_subcommand(1);

  Common sample_c;
  CLI::App* sample = app.add_subcommand(
      "sample-views", "Sample source camera poses to cameras.json");
  add_common(sample, sample_c);

  Common build_c;
  std::string build_views;
  std::string build_images;
  CLI::App* build = app.add_subcommand(
      "build-volume", "Aggregate per-view features into a variance volume");
  add_common(build, build_c);
  build->add_option("--views", build_views, "cameras.json from sample-views")
      ->required();
  build
      ->add_option("--images", build_images,
                   "Directory holding view_NNN.png, one per posed view")
      ->required();

  Common refine_c;
  std::string refine_fieldset;
  std::string refine_volume;
  CLI::App* refine = app.add_subcommand(
      "refine", "Score-distillation refinement of the neural fields");
  add_common(refine, refine_c);
  refine->add_option("--fieldset", refine_fieldset,
                     "Resume from a fieldset checkpoint");
  refine->add_option("--volume", refine_volume,
                     "Initialize fresh fields from a cost volume");

  Common render_c;
  std::string render_fieldset;
  double render_az = 0.0;
  double render_el = 0.0;
  double render_r = 0.0;
  CLI::App* render = app.add_subcommand(
      "render", "Render color, normal, and depth maps from a fieldset");
  add_common(render, render_c);
  render->add_option("--fieldset", render_fieldset, "Fieldset checkpoint")
      ->required();
  render->add_option("--azimuth", render_az, "Azimuth in degrees")
      ->capture_default_str();
  render->add_option("--elevation", render_el, "Elevation in degrees")
      ->capture_default_str();
  render->add_option("--radius", render_r,
                     "Camera distance; <= 0 uses views.radius");

  Common extract_c;
  std::string extract_fieldset;
  CLI::App* extract = app.add_subcommand(
      "extract-mesh", "March the SDF into a triangle mesh (OBJ and PLY)");
  add_common(extract, extract_c);
  extract->add_option("--fieldset", extract_fieldset, "Fieldset checkpoint")
      ->required();

  Common finetune_c;
  std::string finetune_fieldset;
  CLI::App* finetune = app.add_subcommand(
      "finetune-mesh", "Finetune tet-grid geometry, then mesh texture");
  add_common(finetune, finetune_c);
  finetune->add_option("--fieldset", finetune_fieldset, "Fieldset checkpoint")
      ->required();

  Common eval_c;
  std::string eval_fieldset;
  std::string eval_mesh;
  std::string eval_reference;
  CLI::App* eval = app.add_subcommand(
      "eval", "Circle-render a model and report retrieval/distribution scores");
  add_common(eval, eval_c);
  eval->add_option("--fieldset", eval_fieldset,
                   "Fieldset checkpoint to render");
  eval->add_option("--mesh", eval_mesh,
                   "OBJ mesh; rendered when no fieldset is given");
  eval->add_option("--reference", eval_reference,
                   "Directory of reference .png images for the fid");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(sample)) cmd_sample_views(sample_c);
    if (app.got_subcommand(build)) cmd_build_volume(build_c, build_views, build_images);
    if (app.got_subcommand(refine)) cmd_refine(refine_c, refine_fieldset, refine_volume);
    if (app.got_subcommand(render))
      cmd_render(render_c, render_fieldset, render_az, render_el, render_r);
    if (app.got_subcommand(extract)) cmd_extract_mesh(extract_c, extract_fieldset);
    if (app.got_subcommand(finetune)) cmd_finetune_mesh(finetune_c, finetune_fieldset);
    if (app.got_subcommand(eval)) cmd_eval(eval_c, eval_fieldset, eval_mesh, eval_reference);
    return 0;
  } catch (const NumericError& e) {
    GD_LOG_ERROR << "numerical failure: " << e.what();
    return 1;
  } catch (const ConfigError& e) {
    GD_LOG_ERROR << e.what();
    return 2;
  } catch (const FormatError& e) {
    GD_LOG_ERROR << e.what();
    return 2;
  } catch (const std::exception& e) {
    GD_LOG_ERROR << e.what();
    return 2;
  }
}

}  // namespace gd::cli
