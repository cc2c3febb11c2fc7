// Copyright Contributors to the geodistill Project
// SPDX-License-Identifier: Apache-2.0

#include "gd/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

#include <png.h>

#include "gd/bytes.hpp"
#include "gd/errors.hpp"

namespace gd {

void Image::clamp01() {
  for (double& v : data) v = std::clamp(v, 0.0, 1.0);
}

namespace {

struct PngReadCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadCloser() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

struct PngWriteCloser {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngWriteCloser() {
    if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
    if (fp) std::fclose(fp);
  }
};

}  // namespace

Image load_png(const std::string& path) {
  PngReadCloser h;
  h.fp = std::fopen(path.c_str(), "rb");
  if (!h.fp) throw FormatError("cannot open PNG: " + path);

  unsigned char sig[8];
  if (std::fread(sig, 1, 8, h.fp) != 8 || png_sig_cmp(sig, 0, 8))
    throw FormatError("not a PNG file: " + path);

  h.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!h.png) throw FormatError("png_create_read_struct failed");
  h.info = png_create_info_struct(h.png);
  if (!h.info) throw FormatError("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(h.png))) throw FormatError("PNG decode error: " + path);

  png_init_io(h.png, h.fp);
  png_set_sig_bytes(h.png, 8);
  png_read_info(h.png, h.info);

  png_uint_32 w, ht;
  int bit_depth, color_type;
  png_get_IHDR(h.png, h.info, &w, &ht, &bit_depth, &color_type, nullptr, nullptr, nullptr);

  // Normalize everything to 8-bit RGB.
  if (bit_depth == 16) png_set_strip_16(h.png);
  if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(h.png);
  if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(h.png);
  if (png_get_valid(h.png, h.info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(h.png);
  if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(h.png);
  png_set_strip_alpha(h.png);
  png_read_update_info(h.png, h.info);

  Image img(static_cast<int>(w), static_cast<int>(ht));
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (png_uint_32 y = 0; y < ht; ++y) {
    png_read_row(h.png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(static_cast<int>(x), static_cast<int>(y), c) = row[x * 3 + c] / 255.0;
  }
  png_read_end(h.png, nullptr);
  return img;
}

void save_png(const std::string& path, const Image& img) {
  if (img.width < 1 || img.height < 1) throw ConfigError("save_png: empty image");
  std::string tmp = path + ".tmp";
  {
    PngWriteCloser h;
    h.fp = std::fopen(tmp.c_str(), "wb");
    if (!h.fp) throw FormatError("cannot open for writing: " + tmp);
    h.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!h.png) throw FormatError("png_create_write_struct failed");
    h.info = png_create_info_struct(h.png);
    if (!h.info) throw FormatError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(h.png))) throw FormatError("PNG encode error: " + path);

    png_init_io(h.png, h.fp);
    png_set_IHDR(h.png, h.info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(h.png, h.info);

    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x)
        for (int c = 0; c < 3; ++c) {
          double v = std::clamp(img.at(x, y, c), 0.0, 1.0);
          row[static_cast<std::size_t>(x) * 3 + c] =
              static_cast<unsigned char>(std::lround(v * 255.0));
        }
      png_write_row(h.png, row.data());
    }
    png_write_end(h.png, nullptr);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::remove(tmp.c_str());
    throw FormatError("rename failed: " + path);
  }
}

void save_pfm(const std::string& path, int width, int height, const std::vector<double>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height)
    throw ConfigError("save_pfm: value count does not match dimensions");
  std::ostringstream ss(std::ios::binary);
  ss << "Pf\n" << width << " " << height << "\n-1.0\n";
  // PFM stores rows bottom-to-top.
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width; ++x)
      write_f32(ss, static_cast<float>(values[static_cast<std::size_t>(y) * width + x]));
  atomic_write_file(path, ss.str());
}

std::vector<double> load_pfm(const std::string& path, int& width, int& height) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path);
  std::string magic;
  is >> magic;
  if (magic != "Pf") throw FormatError("not a grayscale PFM: " + path);
  double scale;
  is >> width >> height >> scale;
  if (!is || width < 1 || height < 1) throw FormatError("bad PFM header: " + path);
  is.get();  // single whitespace after the header
  if (scale > 0) throw FormatError("big-endian PFM not supported");
  std::vector<double> out(static_cast<std::size_t>(width) * height);
  for (int y = height - 1; y >= 0; --y)
    for (int x = 0; x < width; ++x)
      out[static_cast<std::size_t>(y) * width + x] = static_cast<double>(read_f32(is));
  return out;
}

}  // namespace gd
