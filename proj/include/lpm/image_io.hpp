#pragma once

// 8-bit PNG read/write for [C, H, W] tensors with values in [0, 1].
// C = 1 writes grayscale, C = 3 writes RGB. Reading always yields 3 channels.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "lpm/tensor.hpp"

namespace lpm {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

inline void write_png(const std::filesystem::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw Error("write_png: expected [1|3, H, W], got " + to_string(image.shape()));
  }
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw Error("write_png: cannot open '" + path.string() + "' for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("write_png: libpng initialisation failed");
  }
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(h) * w * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) rows[(static_cast<std::size_t>(y) * w + x) * c + ch] = detail::to_byte(image(ch, y, x));
  std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) row_ptrs[y] = rows.data() + static_cast<std::size_t>(y) * w * c;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("write_png: libpng error while writing '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, row_ptrs.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes any PNG to 8-bit RGB and returns [3, H, W] in [0, 1].
inline Tensor<float> read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw Error("read_png: cannot open '" + path.string() + "'");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw Error("read_png: '" + path.string() + "' is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw Error("read_png: libpng initialisation failed");
  }
  std::vector<std::uint8_t> rows;
  std::vector<png_bytep> row_ptrs;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("read_png: corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  rows.resize(stride * static_cast<std::size_t>(h));
  row_ptrs.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) row_ptrs[y] = rows.data() + stride * y;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<float> out({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) out(c, y, x) = rows[stride * y + static_cast<std::size_t>(x) * 3 + c] / 255.0f;
  return out;
}

}  // namespace lpm
