// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <sstream>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"
#include "gd/rng.hpp"

namespace gd {

// ---------------------------------------------------------------------------
// Embedding inputs
// ---------------------------------------------------------------------------

void EmbedInput::validate() const {
  if (width < 1 || height < 1 || channels < 1)
    throw ConfigError("embed input dimensions must be >= 1");
  if (values.size() != static_cast<std::size_t>(width) * height * channels)
    throw ConfigError("embed input value count disagrees with its dimensions");
}

EmbedInput image_input(const Image& img) {
  EmbedInput in;
  in.width = static_cast<std::uint32_t>(img.width);
  in.height = static_cast<std::uint32_t>(img.height);
  in.channels = static_cast<std::uint32_t>(img.channels);
  in.values = img.data;
  in.validate();
  return in;
}

EmbedInput pointcloud_input(const std::vector<Vec3>& points) {
  if (points.empty()) throw ConfigError("point cloud is empty");
  EmbedInput in;
  in.width = static_cast<std::uint32_t>(points.size());
  in.height = 1;
  in.channels = 3;
  in.values.reserve(points.size() * 3);
  for (const Vec3& p : points) {
    in.values.push_back(p.x);
    in.values.push_back(p.y);
    in.values.push_back(p.z);
  }
  return in;
}

EmbedInput text_input(const std::string& text) {
  if (text.empty()) throw ConfigError("text input is empty");
  EmbedInput in;
  in.width = static_cast<std::uint32_t>(text.size());
  in.height = 1;
  in.channels = 1;
  in.values.reserve(text.size());
  for (unsigned char c : text) in.values.push_back(c / 255.0);
  return in;
}

// ---------------------------------------------------------------------------
// Providers
// ---------------------------------------------------------------------------

EmbeddingProvider::EmbeddingProvider(EmbeddingKind kind, Modality modality, int dimension)
    : kind_(kind), modality_(modality), dimension_(dimension) {
  if (dimension < 1) throw ConfigError("embedding dimension must be >= 1");
}

std::vector<double> EmbeddingProvider::embed(const EmbedInput& input) {
  input.validate();
  std::vector<double> e = embed_impl(input);
  if (e.size() != static_cast<std::size_t>(dimension_))
    throw NumericError("embedding has the wrong dimension");
  double norm2 = 0.0;
  for (double v : e) {
    if (!std::isfinite(v)) throw NumericError("embedding holds a non-finite value");
    norm2 += v * v;
  }
  if (std::abs(std::sqrt(norm2) - 1.0) > 1e-6)
    throw NumericError("embedding is not unit-normalized");
  return e;
}

ToyEmbeddingProvider::ToyEmbeddingProvider(Modality modality, int dimension, std::uint64_t seed)
    : EmbeddingProvider(EmbeddingKind::ToyDeterministic, modality, dimension), seed_(seed) {}

std::vector<double> ToyEmbeddingProvider::embed_impl(const EmbedInput& input) {
  // Row d of the projection is the seeded Gaussian stream derive_seed(seed, d),
  // so the matrix is fixed across calls regardless of the input's content.
  std::vector<double> out(dimension());
  for (int d = 0; d < dimension(); ++d) {
    Rng row(derive_seed(seed_, static_cast<std::uint64_t>(d)));
    double acc = 0.0;
    for (double v : input.values) acc += row.normal() * v;
    acc += row.normal();  // affine term: constant inputs keep a direction
    out[d] = acc;
  }
  double norm = 0.0;
  for (double v : out) norm += v * v;
  norm = std::sqrt(norm);
  if (norm < 1e-12) {  // measure-zero cancellation: fall back to a fixed axis
    std::fill(out.begin(), out.end(), 0.0);
    out[0] = 1.0;
    return out;
  }
  for (double& v : out) v /= norm;
  return out;
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

void write_embed_request(std::ostream& os, const EmbedRequest& req) {
  std::size_t count = static_cast<std::size_t>(req.width) * req.height * req.channels;
  if (req.payload.size() != count) throw ConfigError("embed request payload size mismatch");
  write_u32(os, static_cast<std::uint32_t>(4 + 4 + 4 * 3 + 4 * count));
  write_bytes(os, "GDSP", 4);
  write_u32(os, static_cast<std::uint32_t>(req.modality));
  write_u32(os, req.width);
  write_u32(os, req.height);
  write_u32(os, req.channels);
  for (double v : req.payload) write_f32(os, static_cast<float>(v));
}

EmbedRequest read_embed_request(std::istream& is) {
  std::uint32_t len = read_u32(is);
  expect_magic(is, "GDSP", 4);
  std::uint32_t modality = read_u32(is);
  if (modality > 2) throw FormatError("embed request modality out of range");
  EmbedRequest req;
  req.modality = static_cast<Modality>(modality);
  req.width = read_u32(is);
  req.height = read_u32(is);
  req.channels = read_u32(is);
  if (req.width < 1 || req.height < 1 || req.channels < 1 || req.width > 1u << 20 ||
      req.height > 1u << 16 || req.channels > 64)
    throw FormatError("embed request header out of range");
  std::size_t count = static_cast<std::size_t>(req.width) * req.height * req.channels;
  if (len != 4 + 4 + 4 * 3 + 4 * count)
    throw FormatError("embed request length prefix disagrees with header");
  req.payload.resize(count);
  for (double& v : req.payload) v = read_f32(is);
  return req;
}

void write_embed_response(std::ostream& os, const std::vector<double>& embedding) {
  write_u32(os, static_cast<std::uint32_t>(4 * embedding.size()));
  for (double v : embedding) write_f32(os, static_cast<float>(v));
}

std::vector<double> read_embed_response(std::istream& is, std::size_t expect) {
  std::uint32_t len = read_u32(is);
  if (len != 4 * expect) throw FormatError("embed response has unexpected length");
  std::vector<double> out(expect);
  for (double& v : out) v = read_f32(is);
  return out;
}

ExternalEmbeddingProvider::ExternalEmbeddingProvider(std::istream& in, std::ostream& out,
                                                     Modality modality, int dimension)
    : EmbeddingProvider(EmbeddingKind::External, modality, dimension), in_(in), out_(out) {}

std::vector<double> ExternalEmbeddingProvider::embed_impl(const EmbedInput& input) {
  EmbedRequest req;
  req.modality = modality();
  req.width = input.width;
  req.height = input.height;
  req.channels = input.channels;
  req.payload = input.values;
  write_embed_request(out_, req);
  out_.flush();
  return read_embed_response(in_, static_cast<std::size_t>(dimension()));
}

// ---------------------------------------------------------------------------
// Gaussian fits
// ---------------------------------------------------------------------------

void GaussianFit::validate() const {
  std::size_t d = mean.size();
  if (d == 0) throw ConfigError("gaussian fit has empty mean");
  if (covariance.size() != d * d)
    throw ConfigError("gaussian fit covariance size disagrees with the mean");
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j)
      if (std::abs(covariance[i * d + j] - covariance[j * d + i]) > 1e-9)
        throw ConfigError("gaussian fit covariance is not symmetric");
}

GaussianFit fit_gaussian(const std::vector<std::vector<double>>& samples) {
  if (samples.size() < 2) throw ConfigError("gaussian fit needs at least 2 samples");
  std::size_t d = samples[0].size();
  if (d == 0) throw ConfigError("gaussian fit samples are empty");
  for (const auto& s : samples)
    if (s.size() != d) throw ConfigError("gaussian fit samples disagree in dimension");

  GaussianFit fit;
  fit.mean.assign(d, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < d; ++i) fit.mean[i] += s[i];
  for (double& m : fit.mean) m /= static_cast<double>(samples.size());

  fit.covariance.assign(d * d, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        fit.covariance[i * d + j] += (s[i] - fit.mean[i]) * (s[j] - fit.mean[j]);
  double div = static_cast<double>(samples.size() - 1);
  for (double& c : fit.covariance) c /= div;

  // Enforce exact symmetry: (S + S^T) / 2.
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j) {
      double s = 0.5 * (fit.covariance[i * d + j] + fit.covariance[j * d + i]);
      fit.covariance[i * d + j] = s;
      fit.covariance[j * d + i] = s;
    }
  return fit;
}

namespace {

Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianFit& a, const GaussianFit& b) {
  a.validate();
  b.validate();
  if (a.dimension() != b.dimension())
    throw ConfigError("frechet distance: dimension mismatch");
  const int d = a.dimension();

  Eigen::Map<const Eigen::VectorXd> mu_a(a.mean.data(), d), mu_b(b.mean.data(), d);
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>
      sa(a.covariance.data(), d, d), sb(b.covariance.data(), d, d);

  Eigen::MatrixXd root_a = psd_sqrt(sa);
  Eigen::MatrixXd inner = root_a * sb * root_a;
  // inner is similar to a PSD product; symmetrize before the second root.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()));
  if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
  double tr_root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();

  double dist = (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * tr_root;
  if (dist < -1e-6) throw NumericError("frechet distance is negative beyond tolerance");
  return std::max(dist, 0.0);
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

namespace {

double cosine(const std::vector<double>& x, const std::vector<double>& y) {
  double dot = 0.0, nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    dot += x[i] * y[i];
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  double denom = std::sqrt(nx) * std::sqrt(ny);
  if (denom < 1e-300) return 0.0;
  return dot / denom;
}

}  // namespace

double r_score(const std::vector<std::vector<double>>& items,
               const std::vector<std::vector<double>>& captions,
               const std::vector<int>& correct) {
  if (items.empty() || captions.empty()) throw ConfigError("r_score needs items and captions");
  if (correct.size() != items.size())
    throw ConfigError("r_score needs one correct index per item");
  std::size_t d = captions[0].size();
  for (const auto& c : captions)
    if (c.size() != d) throw ConfigError("caption embeddings disagree in dimension");

  int hits = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].size() != d) throw ConfigError("item embedding dimension mismatch");
    if (correct[i] < 0 || static_cast<std::size_t>(correct[i]) >= captions.size())
      throw ConfigError("correct caption index out of range");
    int arg = 0;
    double best = cosine(items[i], captions[0]);
    for (std::size_t j = 1; j < captions.size(); ++j) {
      double s = cosine(items[i], captions[j]);
      if (s > best) {  // strict: ties keep the lowest index
        best = s;
        arg = static_cast<int>(j);
      }
    }
    if (arg == correct[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(items.size());
}

double uni3d_score(const TriMesh& mesh, const std::vector<std::string>& captions,
                   EmbeddingProvider& pointcloud_provider, EmbeddingProvider& text_provider,
                   int correct, std::uint64_t seed) {
  if (pointcloud_provider.modality() != Modality::Pointcloud)
    throw ConfigError("uni3d_score needs a POINTCLOUD provider for the mesh");
  if (text_provider.modality() != Modality::Text)
    throw ConfigError("uni3d_score needs a TEXT provider for the captions");
  if (captions.empty()) throw ConfigError("uni3d_score needs captions");
  if (correct < 0 || static_cast<std::size_t>(correct) >= captions.size())
    throw ConfigError("correct caption index out of range");

  SurfaceSample sample = sample_surface_points(mesh, kUni3dPoints, seed);
  std::vector<std::vector<double>> items{
      pointcloud_provider.embed(pointcloud_input(sample.points))};
  std::vector<std::vector<double>> caption_embeddings;
  caption_embeddings.reserve(captions.size());
  for (const std::string& c : captions)
    caption_embeddings.push_back(text_provider.embed(text_input(c)));
  return r_score(items, caption_embeddings, {correct});
}

// ---------------------------------------------------------------------------
// Circular protocol
// ---------------------------------------------------------------------------

void CircleConfig::validate() const {
  if (count < 1) throw ConfigError("circle view count must be >= 1");
  if (radius <= 0.0) throw ConfigError("circle radius must be > 0");
  render.validate();
}

std::vector<SphericalPose> circle_poses(const CircleConfig& cfg) {
  cfg.validate();
  std::vector<SphericalPose> poses;
  poses.reserve(cfg.count);
  double spacing = 360.0 / cfg.count;
  for (int i = 0; i < cfg.count; ++i) {
    double az = std::fmod(cfg.start_azimuth_deg + spacing * i, 360.0);
    if (az < 0.0) az += 360.0;
    poses.push_back({az, cfg.elevation_deg, cfg.radius});
  }
  return poses;
}

namespace {

Intrinsics circle_intrinsics(const CircleConfig& cfg) {
  Intrinsics intr;
  intr.width = cfg.render.width;
  intr.height = cfg.render.height;
  intr.focal = cfg.focal > 0.0 ? cfg.focal : 1.2 * cfg.render.width;
  return intr;
}

}  // namespace

std::vector<Image> eval_circle(const FieldSet& fs, const CircleConfig& cfg) {
  Intrinsics intr = circle_intrinsics(cfg);
  std::vector<Image> frames;
  for (const SphericalPose& pose : circle_poses(cfg)) {
    Camera cam = look_at_pose(pose, Vec3{0, 0, 0}, intr);
    frames.push_back(render_image(fs, cam, cfg.render).color);
  }
  return frames;
}

std::vector<Image> eval_circle(const TriMesh& mesh, const CircleConfig& cfg) {
  Intrinsics intr = circle_intrinsics(cfg);
  std::vector<Image> frames;
  for (const SphericalPose& pose : circle_poses(cfg)) {
    Camera cam = look_at_pose(pose, Vec3{0, 0, 0}, intr);
    if (mesh.colors.empty()) {
      frames.push_back(render_normal_map(mesh, cam, cfg.render.width, cfg.render.height));
      continue;
    }
    Image img(cfg.render.width, cfg.render.height);
    for (int y = 0; y < cfg.render.height; ++y)
      for (int x = 0; x < cfg.render.width; ++x) {
        Ray ray = pixel_ray(cam, x, y, 0.0, 1.0);
        MeshHit hit = intersect_mesh(mesh, ray.origin, ray.direction);
        if (!hit.valid()) {
          img.set_pixel(x, y, cfg.render.background);
          continue;
        }
        const auto& f = mesh.faces[hit.face];
        Vec3 c = mesh.colors[f[0]] * (1.0 - hit.u - hit.v) + mesh.colors[f[1]] * hit.u +
                 mesh.colors[f[2]] * hit.v;
        img.set_pixel(x, y, c);
      }
    frames.push_back(std::move(img));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

double fid_from_images(const std::vector<Image>& a, const std::vector<Image>& b,
                       EmbeddingProvider& image_provider) {
  if (image_provider.modality() != Modality::Image)
    throw ConfigError("fid needs an IMAGE provider");
  auto embed_all = [&](const std::vector<Image>& set) {
    std::vector<std::vector<double>> e;
    e.reserve(set.size());
    for (const Image& img : set) e.push_back(image_provider.embed(image_input(img)));
    return e;
  };
  return frechet_distance(fit_gaussian(embed_all(a)), fit_gaussian(embed_all(b)));
}

std::string report_to_json(const EvalReport& report) {
  nlohmann::json j;
  j["fid"] = report.fid;
  j["r_score"] = report.r_score;
  j["uni3d_score"] = report.uni3d_score;
  j["per_view_scores"] = report.per_view_scores;
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report is not valid JSON: ") + e.what());
  }
  EvalReport r;
  try {
    r.fid = j.at("fid").get<double>();
    r.r_score = j.at("r_score").get<double>();
    r.uni3d_score = j.at("uni3d_score").get<double>();
    r.per_view_scores = j.at("per_view_scores").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report is missing fields: ") + e.what());
  }
  return r;
}

std::string report_to_csv(const EvalReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "metric,value\n";
  os << "fid," << report.fid << "\n";
  os << "r_score," << report.r_score << "\n";
  os << "uni3d_score," << report.uni3d_score << "\n";
  for (std::size_t i = 0; i < report.per_view_scores.size(); ++i)
    os << "view_" << i << "," << report.per_view_scores[i] << "\n";
  return os.str();
}

void save_report(const std::string& path, const EvalReport& report) {
  atomic_write_file(path, report_to_json(report));
}

}  // namespace gd
