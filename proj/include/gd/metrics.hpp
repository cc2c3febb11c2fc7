// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gd/camera.hpp"
#include "gd/fields.hpp"
#include "gd/image.hpp"
#include "gd/mesh.hpp"
#include "gd/render.hpp"

namespace gd {

// ---------------------------------------------------------------------------
// Embedding providers
// ---------------------------------------------------------------------------

enum class Modality { Image, Text, Pointcloud };
enum class EmbeddingKind { ToyDeterministic, External };

/// One item handed to an embedding provider. Images use width x height x
/// channels; point clouds use width = point count, height = 1, channels = 3;
/// text uses width = byte count, height = channels = 1.
struct EmbedInput {
  std::uint32_t width = 0;
  std::uint32_t height = 1;
  std::uint32_t channels = 1;
  std::vector<double> values;

  void validate() const;
};

EmbedInput image_input(const Image& img);
EmbedInput pointcloud_input(const std::vector<Vec3>& points);
EmbedInput text_input(const std::string& text);

/// Maps items of one modality to unit-length embedding vectors. The public
/// entry point enforces the unit-norm contract (L2 = 1 within 1e-6) on
/// whatever the implementation returns.
class EmbeddingProvider {
 public:
  EmbeddingProvider(EmbeddingKind kind, Modality modality, int dimension);
  virtual ~EmbeddingProvider() = default;

  EmbeddingKind kind() const { return kind_; }
  Modality modality() const { return modality_; }
  int dimension() const { return dimension_; }

  /// Throws NumericError when the implementation breaks the unit-norm
  /// contract or returns a non-finite value.
  std::vector<double> embed(const EmbedInput& input);

 protected:
  virtual std::vector<double> embed_impl(const EmbedInput& input) = 0;

 private:
  EmbeddingKind kind_;
  Modality modality_;
  int dimension_;
};

/// Offline stand-in: a fixed seeded Gaussian projection of the raw values
/// (plus a constant affine term so constant inputs keep a direction), then
/// L2 normalization. Deterministic in (seed, dimension, input).
class ToyEmbeddingProvider : public EmbeddingProvider {
 public:
  ToyEmbeddingProvider(Modality modality, int dimension, std::uint64_t seed);

 protected:
  std::vector<double> embed_impl(const EmbedInput& input) override;

 private:
  std::uint64_t seed_;
};

// Wire format shared with the score-provider protocol: length-prefixed
// little-endian frames tagged "GDSP", with a modality word in place of the
// diffusion header.
struct EmbedRequest {
  Modality modality = Modality::Image;
  std::uint32_t width = 0;
  std::uint32_t height = 1;
  std::uint32_t channels = 1;
  std::vector<double> payload;
};

void write_embed_request(std::ostream& os, const EmbedRequest& req);
EmbedRequest read_embed_request(std::istream& is);
void write_embed_response(std::ostream& os, const std::vector<double>& embedding);
std::vector<double> read_embed_response(std::istream& is, std::size_t expect);

/// Bridges to an out-of-process encoder over paired streams. Blocking,
/// one request per embed call.
class ExternalEmbeddingProvider : public EmbeddingProvider {
 public:
  ExternalEmbeddingProvider(std::istream& in, std::ostream& out, Modality modality,
                            int dimension);

 protected:
  std::vector<double> embed_impl(const EmbedInput& input) override;

 private:
  std::istream& in_;
  std::ostream& out_;
};

// ---------------------------------------------------------------------------
// Gaussian fits and the Frechet distance
// ---------------------------------------------------------------------------

struct GaussianFit {
  std::vector<double> mean;
  std::vector<double> covariance;  // D x D, row-major

  int dimension() const { return static_cast<int>(mean.size()); }
  /// Throws ConfigError on size mismatch or asymmetry beyond 1e-9.
  void validate() const;
};

/// Sample mean and unbiased covariance (divisor n-1), symmetrized as
/// (S + S^T)/2. Throws ConfigError on fewer than 2 samples or ragged input.
GaussianFit fit_gaussian(const std::vector<std::vector<double>>& samples);

/// ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^(1/2) Sb Sa^(1/2))^(1/2)). Matrix
/// square roots go through symmetric eigendecomposition with eigenvalues
/// clipped at 0. Rounding may leave a tiny negative total; anything above
/// -1e-6 clips to 0 and anything below it throws NumericError.
double frechet_distance(const GaussianFit& a, const GaussianFit& b);

// ---------------------------------------------------------------------------
// Retrieval scores
// ---------------------------------------------------------------------------

/// Fraction of items whose cosine-similarity argmax over the captions hits
/// the item's correct index. Ties resolve to the lowest caption index.
double r_score(const std::vector<std::vector<double>>& items,
               const std::vector<std::vector<double>>& captions,
               const std::vector<int>& correct);

/// Surface points drawn per mesh for the point-cloud retrieval score.
inline constexpr int kUni3dPoints = 10000;

/// Samples exactly kUni3dPoints surface points, embeds the cloud with the
/// POINTCLOUD provider, embeds each caption with the TEXT provider, and
/// returns the single-item r_score (1.0 or 0.0).
double uni3d_score(const TriMesh& mesh, const std::vector<std::string>& captions,
                   EmbeddingProvider& pointcloud_provider, EmbeddingProvider& text_provider,
                   int correct, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Circular evaluation protocol
// ---------------------------------------------------------------------------

struct CircleConfig {
  int count = 120;                // full circle, 360/count degrees apart
  double elevation_deg = 0.0;
  double radius = 2.5;
  double start_azimuth_deg = 0.0;
  double focal = 0.0;             // <= 0: 1.2 x render width
  RenderConfig render;

  void validate() const;
};

/// Equally spaced azimuths over one full circle; azimuths are reduced
/// modulo 360 so a relabeled start (same circle shifted by 360) reproduces
/// identical poses.
std::vector<SphericalPose> circle_poses(const CircleConfig& cfg);

/// Volume-rendered color frames at each circle pose.
std::vector<Image> eval_circle(const FieldSet& fs, const CircleConfig& cfg);
/// Mesh frames at each circle pose: interpolated vertex colors when the
/// mesh carries them, normal-map shading otherwise.
std::vector<Image> eval_circle(const TriMesh& mesh, const CircleConfig& cfg);

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
  double fid = 0.0;
  double r_score = 0.0;
  double uni3d_score = 0.0;
  std::vector<double> per_view_scores;
};

/// Frechet distance between Gaussian fits of the two image sets under one
/// image-modality provider.
double fid_from_images(const std::vector<Image>& a, const std::vector<Image>& b,
                       EmbeddingProvider& image_provider);

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
std::string report_to_csv(const EvalReport& report);
/// Atomic (write-temp-then-rename) JSON dump.
void save_report(const std::string& path, const EvalReport& report);

}  // namespace gd
