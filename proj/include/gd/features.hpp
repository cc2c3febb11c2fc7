// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "gd/camera.hpp"
#include "gd/image.hpp"
#include "gd/tensor.hpp"

namespace gd {

struct FeatureMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> data;  // row-major, channel innermost

  FeatureMap() = default;
  FeatureMap(int w, int h, int c)
      : width(w), height(h), channels(c),
        data(static_cast<std::size_t>(w) * h * c, 0.0) {}

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double at(int x, int y, int c) const { return data[index(x, y, c)]; }
  double& at(int x, int y, int c) { return data[index(x, y, c)]; }
};

enum class ExtractorKind { Identity, GradientAug, ConvStack };

/// One 2D convolution layer: weight tensor (out, in, kh, kw) + bias (out),
/// stride 1, zero padding, optional ReLU.
struct Conv2dLayer {
  Tensor weight;
  Tensor bias;
  bool relu = false;
};

/// Pluggable 2D feature network.
///  - Identity: features are the RGB values themselves (3 channels).
///  - GradientAug: RGB plus central-difference x/y luminance gradients (5).
///  - ConvStack: the configured convolution stack with loaded weights.
struct FeatureExtractor {
  ExtractorKind kind = ExtractorKind::GradientAug;
  std::vector<Conv2dLayer> layers;  // ConvStack only

  int output_channels() const;
  void validate() const;
};

FeatureMap extract_features(const Image& image, const FeatureExtractor& extractor);

struct FeatureSample {
  std::vector<double> value;
  bool valid = false;
};

/// Bilinear lookup with pixel centers at integer coordinates. Queries outside
/// [0, W-1] x [0, H-1] return a validity-flagged zero vector.
FeatureSample sample_feature(const FeatureMap& map, double u, double v);

struct ViewSet {
  std::vector<Image> images;
  std::vector<PosedView> views;

  std::size_t size() const { return images.size(); }
};

/// Loads view_NNN.png files plus cameras.json from `dir`. Throws on count
/// mismatch, unreadable files, or fewer than 2 views.
ViewSet load_view_set(const std::string& dir);

/// Writes images as view_000.png.. plus cameras.json (test/tooling helper,
/// the inverse of load_view_set).
void save_view_set(const std::string& dir, const ViewSet& set);

}  // namespace gd
