// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gd/rng.hpp"
#include "gd/vec.hpp"

namespace gd {

/// Pinhole camera, no distortion.
///
/// World convention (fixed so that every angle constant in the pipeline is
/// unambiguous): right-handed, +y up, azimuth 0 along +z. Camera frame is
/// the usual CV one: x right, y down, z forward; `rotation` maps world
/// directions into that frame and `translation` completes the world->camera
/// transform p_cam = R * p_world + T.
struct Camera {
  Mat3 rotation;
  Vec3 translation;
  double focal = 1.0;        // pixels
  double principal_x = 0.0;  // pixels
  double principal_y = 0.0;
  int width = 1;
  int height = 1;

  /// Throws ConfigError unless rotation is orthonormal with det +1
  /// (tolerance 1e-6), focal > 0 and width, height >= 1.
  void validate() const;

  Vec3 position() const;           // camera center in world coordinates
  Vec3 forward_axis() const;       // +z camera axis in world coordinates
  Vec3 world_to_camera(const Vec3& p) const { return rotation * p + translation; }
};

struct SphericalPose {
  double azimuth_deg = 0.0;    // [0, 360)
  double elevation_deg = 0.0;  // (-90, 90)
  double radius = 2.5;         // > 0

  void validate() const;
};

struct Intrinsics {
  double focal = 256.0;
  int width = 256;
  int height = 256;
};

enum class ViewRole { Reference, Source, Back };

std::string to_string(ViewRole role);
ViewRole view_role_from_string(const std::string& s);

struct PosedView {
  SphericalPose pose;
  Camera camera;
  ViewRole role = ViewRole::Source;
};

enum class SamplingMode { SdFront, MvdreamFour };

/// Source-view pose sampler configuration.
///
/// SdFront: one front reference at (0, 0), `count` source views of which the
/// last is the mandatory back view at relative (180, 0); the remaining
/// count-1 are drawn uniformly within (+-azimuth_limit, +-elevation_limit).
/// MvdreamFour: four reference poses at elevation 15 and azimuths
/// {0, 90, 180, 270}; the azimuth-180 one is tagged Back; `count` source
/// views are drawn round-robin around the front/left/right references within
/// (+-azimuth_limit, +-elevation_limit) of each.
struct SamplingStrategy {
  SamplingMode mode = SamplingMode::SdFront;
  int count = 8;              // number of source views
  std::uint64_t rng_seed = 0;
  double azimuth_limit = 180.0;
  double elevation_limit = 30.0;
  double radius = 2.5;        // sphere radius for all generated poses

  void validate() const;
};

/// Camera positioned at target + radius*(cos el sin az, sin el, cos el cos az),
/// looking at `target`, world up +y. Throws ConfigError at elevation +-90
/// (degenerate up).
Camera look_at_pose(const SphericalPose& pose, const Vec3& target, const Intrinsics& intr);

struct Projection {
  double u = 0.0;
  double v = 0.0;
  double depth = 0.0;   // camera-frame z
  bool valid = false;   // depth > 0 and (u, v) inside [0, W-1] x [0, H-1]
};

Projection project(const Camera& cam, const Vec3& point);

std::vector<PosedView> sample_source_poses(const SamplingStrategy& strategy,
                                           const Intrinsics& intr);

/// Uniform pose distribution for the refinement loop.
struct PoseDistribution {
  double azimuth_lo = 0.0, azimuth_hi = 360.0;     // subset of [0, 360)
  double elevation_lo = -30.0, elevation_hi = 30.0;  // subset of (-90, 90)
  double radius_lo = 2.5, radius_hi = 2.5;

  void validate() const;
};

SphericalPose sample_refine_pose(const PoseDistribution& dist, Rng& rng);
Camera sample_refine_camera(const PoseDistribution& dist, const Intrinsics& intr, Rng& rng);

/// cameras.json I/O. Array of objects
/// {azimuth_deg, elevation_deg, radius, focal_px, width, height, role};
/// numbers round-trip exactly as decimal text.
std::string views_to_json(const std::vector<PosedView>& views);
std::vector<PosedView> views_from_json(const std::string& json_text);

void save_views(const std::string& path, const std::vector<PosedView>& views);
std::vector<PosedView> load_views(const std::string& path);

}  // namespace gd
