// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/camera.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {

namespace {

bool nearly_orthonormal(const Mat3& r, double tol) {
  Mat3 rtr = r.transposed() * r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double want = i == j ? 1.0 : 0.0;
      if (std::abs(rtr.m[i][j] - want) > tol) return false;
    }
  return std::abs(r.determinant() - 1.0) <= tol * 10.0;
}

}  // namespace

void Camera::validate() const {
  if (!nearly_orthonormal(rotation, 1e-6))
    throw ConfigError("camera rotation is not orthonormal with det +1");
  if (!(focal > 0.0)) throw ConfigError("camera focal must be > 0");
  if (width < 1 || height < 1) throw ConfigError("camera width/height must be >= 1");
}

Vec3 Camera::position() const {
  // p_cam = R p + T; center satisfies R c + T = 0.
  return rotation.transposed() * (-translation);
}

Vec3 Camera::forward_axis() const { return rotation.row(2); }

void SphericalPose::validate() const {
  if (azimuth_deg < 0.0 || azimuth_deg >= 360.0)
    throw ConfigError("azimuth must be in [0, 360)");
  if (!(elevation_deg > -90.0 && elevation_deg < 90.0))
    throw ConfigError("elevation must be in (-90, 90)");
  if (!(radius > 0.0)) throw ConfigError("radius must be > 0");
}

void SamplingStrategy::validate() const {
  if (count < 2) throw ConfigError("sampling strategy count must be >= 2");
  if (!(azimuth_limit > 0.0) || !(elevation_limit > 0.0))
    throw ConfigError("sampling strategy limits must be positive");
  if (!(radius > 0.0)) throw ConfigError("sampling strategy radius must be > 0");
}

Camera look_at_pose(const SphericalPose& pose, const Vec3& target, const Intrinsics& intr) {
  if (std::abs(pose.elevation_deg) >= 90.0)
    throw ConfigError("look_at_pose: elevation +-90 makes the up vector degenerate");
  double az = deg_to_rad(pose.azimuth_deg);
  double el = deg_to_rad(pose.elevation_deg);
  Vec3 offset{std::cos(el) * std::sin(az), std::sin(el), std::cos(el) * std::cos(az)};
  Vec3 position = target + pose.radius * offset;

  Vec3 forward = normalized(target - position);
  Vec3 up{0.0, 1.0, 0.0};
  Vec3 right = cross(forward, up);
  double rn = right.norm();
  if (rn < 1e-12) throw ConfigError("look_at_pose: view direction parallel to world up");
  right = right / rn;
  Vec3 down = cross(forward, right);  // camera y points down in image space

  Camera cam;
  cam.rotation = Mat3::from_rows(right, down, forward);
  cam.translation = -(cam.rotation * position);
  cam.focal = intr.focal;
  cam.principal_x = (intr.width - 1) / 2.0;
  cam.principal_y = (intr.height - 1) / 2.0;
  cam.width = intr.width;
  cam.height = intr.height;
  cam.validate();
  return cam;
}

Projection project(const Camera& cam, const Vec3& point) {
  Vec3 pc = cam.world_to_camera(point);
  Projection pr;
  pr.depth = pc.z;
  if (pc.z <= 0.0) return pr;  // behind (or on) the camera plane: invalid, never an error
  pr.u = cam.focal * pc.x / pc.z + cam.principal_x;
  pr.v = cam.focal * pc.y / pc.z + cam.principal_y;
  pr.valid = pr.u >= 0.0 && pr.u <= cam.width - 1 && pr.v >= 0.0 && pr.v <= cam.height - 1;
  return pr;
}

namespace {

double wrap_azimuth(double deg) {
  double a = std::fmod(deg, 360.0);
  if (a < 0.0) a += 360.0;
  return a;
}

PosedView make_view(double az, double el, double radius, ViewRole role, const Intrinsics& intr) {
  PosedView v;
  v.pose = SphericalPose{wrap_azimuth(az), el, radius};
  v.pose.validate();
  v.camera = look_at_pose(v.pose, Vec3{}, intr);
  v.role = role;
  return v;
}

}  // namespace

std::vector<PosedView> sample_source_poses(const SamplingStrategy& s, const Intrinsics& intr) {
  s.validate();
  Rng rng(s.rng_seed);
  std::vector<PosedView> out;

  if (s.mode == SamplingMode::SdFront) {
    // Front reference plus count source views; the last source slot is the
    // mandatory back view at relative (180, 0).
    out.push_back(make_view(0.0, 0.0, s.radius, ViewRole::Reference, intr));
    for (int i = 0; i < s.count - 1; ++i) {
      double raz = rng.uniform(-s.azimuth_limit, s.azimuth_limit);
      while (std::abs(raz) >= s.azimuth_limit) raz = rng.uniform(-s.azimuth_limit, s.azimuth_limit);
      double rel = rng.uniform(-s.elevation_limit, s.elevation_limit);
      while (std::abs(rel) >= s.elevation_limit)
        rel = rng.uniform(-s.elevation_limit, s.elevation_limit);
      out.push_back(make_view(raz, rel, s.radius, ViewRole::Source, intr));
    }
    out.push_back(make_view(180.0, 0.0, s.radius, ViewRole::Back, intr));
  } else {
    // MVDream reference ring: elevation 15, azimuths 0/90/180/270; the back
    // reference keeps its Back tag and receives no sampled neighbors.
    const double ref_el = 15.0;
    const double ref_az[4] = {0.0, 90.0, 180.0, 270.0};
    for (double az : ref_az) {
      ViewRole role = az == 180.0 ? ViewRole::Back : ViewRole::Reference;
      out.push_back(make_view(az, ref_el, s.radius, role, intr));
    }
    const double anchors[3] = {0.0, 90.0, 270.0};  // front, left, right
    for (int i = 0; i < s.count; ++i) {
      double anchor = anchors[i % 3];
      double raz = rng.uniform(-s.azimuth_limit, s.azimuth_limit);
      double rel = rng.uniform(-s.elevation_limit, s.elevation_limit);
      double el = std::clamp(ref_el + rel, -89.0, 89.0);
      out.push_back(make_view(anchor + raz, el, s.radius, ViewRole::Source, intr));
    }
  }
  return out;
}

void PoseDistribution::validate() const {
  // azimuth_hi is an exclusive endpoint; 360 means the full circle.
  if (azimuth_lo < 0.0 || azimuth_hi > 360.0 || azimuth_lo > azimuth_hi)
    throw ConfigError("pose distribution azimuth range must be ordered within [0, 360)");
  if (elevation_lo <= -90.0 || elevation_hi >= 90.0 || elevation_lo > elevation_hi)
    throw ConfigError("pose distribution elevation range must be ordered within (-90, 90)");
  if (!(radius_lo > 0.0) || radius_lo > radius_hi)
    throw ConfigError("pose distribution radius range must be positive and ordered");
}

SphericalPose sample_refine_pose(const PoseDistribution& d, Rng& rng) {
  d.validate();
  SphericalPose p;
  p.azimuth_deg = d.azimuth_lo == d.azimuth_hi ? d.azimuth_lo
                                               : rng.uniform(d.azimuth_lo, d.azimuth_hi);
  p.elevation_deg = d.elevation_lo == d.elevation_hi
                        ? d.elevation_lo
                        : rng.uniform(d.elevation_lo, d.elevation_hi);
  p.radius = d.radius_lo == d.radius_hi ? d.radius_lo : rng.uniform(d.radius_lo, d.radius_hi);
  return p;
}

Camera sample_refine_camera(const PoseDistribution& d, const Intrinsics& intr, Rng& rng) {
  return look_at_pose(sample_refine_pose(d, rng), Vec3{}, intr);
}

std::string to_string(ViewRole role) {
  switch (role) {
    case ViewRole::Reference: return "reference";
    case ViewRole::Source: return "source";
    case ViewRole::Back: return "back";
  }
  return "source";
}

ViewRole view_role_from_string(const std::string& s) {
  if (s == "reference") return ViewRole::Reference;
  if (s == "source") return ViewRole::Source;
  if (s == "back") return ViewRole::Back;
  throw FormatError("unknown view role: " + s);
}

std::string views_to_json(const std::vector<PosedView>& views) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& v : views) {
    nlohmann::json o;
    o["azimuth_deg"] = v.pose.azimuth_deg;
    o["elevation_deg"] = v.pose.elevation_deg;
    o["radius"] = v.pose.radius;
    o["focal_px"] = v.camera.focal;
    o["width"] = v.camera.width;
    o["height"] = v.camera.height;
    o["role"] = to_string(v.role);
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

std::vector<PosedView> views_from_json(const std::string& text) {
  nlohmann::json arr;
  try {
    arr = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("cameras.json parse error: ") + e.what());
  }
  if (!arr.is_array()) throw FormatError("cameras.json must be an array");
  std::vector<PosedView> out;
  for (const auto& o : arr) {
    PosedView v;
    try {
      v.pose.azimuth_deg = o.at("azimuth_deg").get<double>();
      v.pose.elevation_deg = o.at("elevation_deg").get<double>();
      v.pose.radius = o.at("radius").get<double>();
      Intrinsics intr;
      intr.focal = o.at("focal_px").get<double>();
      intr.width = o.at("width").get<int>();
      intr.height = o.at("height").get<int>();
      v.role = view_role_from_string(o.at("role").get<std::string>());
      v.camera = look_at_pose(v.pose, Vec3{}, intr);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("cameras.json entry error: ") + e.what());
    }
    out.push_back(std::move(v));
  }
  return out;
}

void save_views(const std::string& path, const std::vector<PosedView>& views) {
  atomic_write_file(path, views_to_json(views));
}

std::vector<PosedView> load_views(const std::string& path) {
  return views_from_json(read_file(path));
}

}  // namespace gd
