#pragma once

// 8-bit RGB PNG read/write. Images are (1, 3, H, W) tensors in [0, 1].

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "fpanet/tensor.hpp"

namespace fpanet {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

/// Reads any PNG and converts it to 8-bit RGB (palette, gray, alpha and 16-bit are
/// normalized by libpng transforms).
inline Tensor<double> read_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.c_str(), "rb"));
  if (!f) throw IngestionError("cannot open " + path.string());
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8)) throw IngestionError("not a PNG: " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IngestionError("libpng init failed");
  }
  std::vector<png_byte> buf;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("corrupt PNG: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int W = static_cast<int>(png_get_image_width(png, info));
  const int H = static_cast<int>(png_get_image_height(png, info));
  const int ct = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (ct == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (ct == PNG_COLOR_TYPE_GRAY || ct == PNG_COLOR_TYPE_GRAY_ALPHA) {
    if (png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
  }
  if (ct & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t stride = png_get_rowbytes(png, info);
  buf.resize(stride * H);
  rows.resize(H);
  for (int y = 0; y < H; ++y) rows[y] = buf.data() + stride * y;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<double> t(Shape{1, 3, H, W});
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = rows[y][3 * x + c] / 255.0;
  return t;
}

/// Quantizes to 8 bits (round half up after clamping to [0, 1]).
inline std::uint8_t to_u8(double v) {
  if (!(v > 0)) return 0;
  if (v >= 1) return 255;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

/// Writes batch item `n` of an RGB tensor as an 8-bit PNG. Output bytes depend only on
/// the pixel values (no timestamps or text chunks).
template <typename T>
void write_png(const std::filesystem::path& path, const Tensor<T>& img, int n = 0) {
  if (img.c() != 3) throw ShapeError("write_png expects 3 channels, got " + img.shape().str());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  detail::FilePtr f(std::fopen(path.c_str(), "wb"));
  if (!f) throw Error("cannot write " + path.string());
  const int H = img.h(), W = img.w();
  std::vector<png_byte> buf(static_cast<std::size_t>(H) * W * 3);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        buf[(static_cast<std::size_t>(y) * W + x) * 3 + c] = to_u8(static_cast<double>(img.at(n, c, y, x)));
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("PNG encode failed: " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, W, H, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) png_write_row(png, buf.data() + static_cast<std::size_t>(y) * W * 3);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Rounds every value to the nearest 8-bit level, as a write/read round trip would.
template <typename T>
Tensor<T> quantize8(Tensor<T> t) {
  for (auto& v : t.vec()) v = static_cast<T>(to_u8(static_cast<double>(v)) / 255.0);
  return t;
}

}  // namespace fpanet
