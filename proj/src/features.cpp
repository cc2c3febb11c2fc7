// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/features.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "gd/errors.hpp"

namespace gd {

int FeatureExtractor::output_channels() const {
  switch (kind) {
    case ExtractorKind::Identity: return 3;
    case ExtractorKind::GradientAug: return 5;
    case ExtractorKind::ConvStack:
      return layers.empty() ? 3 : static_cast<int>(layers.back().weight.dims[0]);
  }
  return 3;
}

void FeatureExtractor::validate() const {
  if (kind != ExtractorKind::ConvStack) return;
  if (layers.empty()) throw ConfigError("ConvStack extractor needs at least one layer");
  int in_ch = 3;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weight.dims.size() != 4)
      throw ConfigError("conv layer weight must be rank 4 (out,in,kh,kw)");
    if (static_cast<int>(l.weight.dims[1]) != in_ch)
      throw ConfigError("conv layer " + std::to_string(i) + " input channels mismatch");
    if (l.bias.dims.size() != 1 || l.bias.dims[0] != l.weight.dims[0])
      throw ConfigError("conv layer " + std::to_string(i) + " bias shape mismatch");
    in_ch = static_cast<int>(l.weight.dims[0]);
  }
}

namespace {

double luminance(const Image& img, int x, int y) {
  // Rec. 601 luma.
  return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
}

FeatureMap convolve(const FeatureMap& in, const Conv2dLayer& layer) {
  int out_ch = static_cast<int>(layer.weight.dims[0]);
  int in_ch = static_cast<int>(layer.weight.dims[1]);
  int kh = static_cast<int>(layer.weight.dims[2]);
  int kw = static_cast<int>(layer.weight.dims[3]);
  int py = kh / 2, px = kw / 2;
  FeatureMap out(in.width, in.height, out_ch);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int oc = 0; oc < out_ch; ++oc) {
        double acc = layer.bias.data[oc];
        for (int ic = 0; ic < in_ch; ++ic)
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx) {
              int sy = y + dy - py;
              int sx = x + dx - px;
              if (sy < 0 || sy >= in.height || sx < 0 || sx >= in.width) continue;
              double w = layer.weight.data[((static_cast<std::size_t>(oc) * in_ch + ic) * kh + dy) * kw + dx];
              acc += w * in.at(sx, sy, ic);
            }
        if (layer.relu && acc < 0.0) acc = 0.0;
        out.at(x, y, oc) = acc;
      }
  return out;
}

}  // namespace

FeatureMap extract_features(const Image& image, const FeatureExtractor& extractor) {
  extractor.validate();
  switch (extractor.kind) {
    case ExtractorKind::Identity: {
      FeatureMap out(image.width, image.height, 3);
      out.data = image.data;
      return out;
    }
    case ExtractorKind::GradientAug: {
      FeatureMap out(image.width, image.height, 5);
      for (int y = 0; y < image.height; ++y)
        for (int x = 0; x < image.width; ++x) {
          for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(x, y, c);
          int xm = std::max(x - 1, 0), xp = std::min(x + 1, image.width - 1);
          int ym = std::max(y - 1, 0), yp = std::min(y + 1, image.height - 1);
          out.at(x, y, 3) = 0.5 * (luminance(image, xp, y) - luminance(image, xm, y));
          out.at(x, y, 4) = 0.5 * (luminance(image, x, yp) - luminance(image, x, ym));
        }
      return out;
    }
    case ExtractorKind::ConvStack: {
      FeatureMap cur(image.width, image.height, 3);
      cur.data = image.data;
      for (const auto& layer : extractor.layers) cur = convolve(cur, layer);
      return cur;
    }
  }
  throw ConfigError("unknown extractor kind");
}

FeatureSample sample_feature(const FeatureMap& map, double u, double v) {
  FeatureSample s;
  s.value.assign(map.channels, 0.0);
  if (!(u >= 0.0 && u <= map.width - 1 && v >= 0.0 && v <= map.height - 1)) return s;

  int x0 = std::min(static_cast<int>(std::floor(u)), map.width - 2);
  int y0 = std::min(static_cast<int>(std::floor(v)), map.height - 2);
  if (map.width == 1) x0 = 0;
  if (map.height == 1) y0 = 0;
  int x1 = std::min(x0 + 1, map.width - 1);
  int y1 = std::min(y0 + 1, map.height - 1);
  double fx = u - x0, fy = v - y0;

  for (int c = 0; c < map.channels; ++c) {
    double top = (1.0 - fx) * map.at(x0, y0, c) + fx * map.at(x1, y0, c);
    double bot = (1.0 - fx) * map.at(x0, y1, c) + fx * map.at(x1, y1, c);
    s.value[c] = (1.0 - fy) * top + fy * bot;
  }
  s.valid = true;
  return s;
}

namespace {

std::string view_filename(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "view_%03zu.png", i);
  return buf;
}

}  // namespace

ViewSet load_view_set(const std::string& dir) {
  namespace fs = std::filesystem;
  ViewSet set;
  set.views = load_views((fs::path(dir) / "cameras.json").string());

  std::size_t n = 0;
  while (fs::exists(fs::path(dir) / view_filename(n))) ++n;
  if (n != set.views.size())
    throw FormatError("view count mismatch: " + std::to_string(n) + " images vs " +
                      std::to_string(set.views.size()) + " camera entries");
  if (n < 2) throw ConfigError("a view set needs at least 2 views");

  set.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    set.images.push_back(load_png((fs::path(dir) / view_filename(i)).string()));
  return set;
}

void save_view_set(const std::string& dir, const ViewSet& set) {
  namespace fs = std::filesystem;
  if (set.images.size() != set.views.size())
    throw ConfigError("save_view_set: image/camera count mismatch");
  fs::create_directories(dir);
  for (std::size_t i = 0; i < set.images.size(); ++i)
    save_png((fs::path(dir) / view_filename(i)).string(), set.images[i]);
  save_views((fs::path(dir) / "cameras.json").string(), set.views);
}

}  // namespace gd
