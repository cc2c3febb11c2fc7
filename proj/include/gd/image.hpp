// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "gd/vec.hpp"

namespace gd {

/// Row-major RGB image with values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  static constexpr int channels = 3;
  std::vector<double> data;  // width * height * 3

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * channels, fill) {}

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double at(int x, int y, int c) const { return data[index(x, y, c)]; }
  double& at(int x, int y, int c) { return data[index(x, y, c)]; }

  Vec3 pixel(int x, int y) const {
    return {at(x, y, 0), at(x, y, 1), at(x, y, 2)};
  }
  void set_pixel(int x, int y, const Vec3& rgb) {
    at(x, y, 0) = rgb.x; at(x, y, 1) = rgb.y; at(x, y, 2) = rgb.z;
  }

  /// Clamps every value into [0, 1].
  void clamp01();
};

/// 8-bit RGB PNG. Values map to [0,1] by /255 on load and are rounded to the
/// nearest byte on save. Gray and RGBA inputs are expanded/flattened to RGB.
Image load_png(const std::string& path);
void save_png(const std::string& path, const Image& img);

/// Grayscale PFM ("Pf", little-endian, bottom-to-top rows) used for depth.
void save_pfm(const std::string& path, int width, int height, const std::vector<double>& values);
std::vector<double> load_pfm(const std::string& path, int& width, int& height);

}  // namespace gd
