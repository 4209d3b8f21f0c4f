#pragma once

// Thin RAII wrappers over libpng and libjpeg. Samples are kept as integers;
// scaling to reals happens in dataset_io.

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "macnn/error.hpp"

namespace macnn {

struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;  // 1 (gray) or 3 (RGB)
  int bit_depth = 8;         // 8 or 16
  std::vector<std::uint16_t> samples;  // interleaved, row-major
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr file(std::fopen(path.c_str(), mode));
  if (!file) fail(ErrorKind::io, "cannot open '" + path.string() + "'");
  return file;
}

[[noreturn]] inline void png_error_handler(png_structp png, png_const_charp) {
  png_longjmp(png, 1);
}
inline void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace detail

inline bool has_png_signature(const std::filesystem::path& path) {
  auto file = detail::open_file(path, "rb");
  unsigned char sig[8] = {};
  return std::fread(sig, 1, 8, file.get()) == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

/// Reads a PNG. Palette images are expanded to RGB, alpha is stripped,
/// sub-byte grayscale is expanded to 8 bits.
inline RawImage read_png(const std::filesystem::path& path) {
  auto file = detail::open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_handler,
                                           detail::png_warning_handler);
  if (!png) fail(ErrorKind::io, "libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  RawImage image;
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::io, "corrupt or unreadable PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png), png_set_strip_alpha(png);
  if (png_get_bit_depth(png, info) == 16) png_set_swap(png);  // little-endian host order
  png_read_update_info(png, info);

  image.width = png_get_image_width(png, info);
  image.height = png_get_image_height(png, info);
  image.channels = png_get_channels(png, info);
  image.bit_depth = png_get_bit_depth(png, info);
  const std::size_t row_bytes = png_get_rowbytes(png, info);
  buffer.resize(row_bytes * image.height);
  rows.resize(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * row_bytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t count = image.width * image.height * image.channels;
  image.samples.resize(count);
  if (image.bit_depth == 16) {
    for (std::size_t n = 0; n < count; ++n)
      image.samples[n] = static_cast<std::uint16_t>(buffer[2 * n] | (buffer[2 * n + 1] << 8));
  } else {
    for (std::size_t n = 0; n < count; ++n) image.samples[n] = buffer[n];
  }
  return image;
}

inline void write_png(const std::filesystem::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) fail(ErrorKind::format, "PNG writer supports 1 or 3 channels");
  if (image.bit_depth != 8 && image.bit_depth != 16) fail(ErrorKind::format, "PNG writer supports 8 or 16 bits");
  auto file = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, detail::png_error_handler,
                                            detail::png_warning_handler);
  if (!png) fail(ErrorKind::io, "libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  const std::size_t bytes = image.bit_depth / 8;
  const std::size_t row_bytes = image.width * image.channels * bytes;
  std::vector<unsigned char> buffer(row_bytes * image.height);
  for (std::size_t n = 0; n < image.samples.size(); ++n) {
    if (bytes == 2) {
      buffer[2 * n] = static_cast<unsigned char>(image.samples[n] >> 8);  // PNG is big-endian
      buffer[2 * n + 1] = static_cast<unsigned char>(image.samples[n] & 0xff);
    } else {
      buffer[n] = static_cast<unsigned char>(image.samples[n]);
    }
  }
  std::vector<png_bytep> rows(image.height);
  for (std::size_t y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * row_bytes;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               image.bit_depth, image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

namespace detail {

struct JpegError {
  jpeg_error_mgr base;
  std::jmp_buf jump;
};

[[noreturn]] inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1);
}

}  // namespace detail

/// Reads an 8-bit baseline or progressive JPEG. Grayscale JPEGs are rejected.
inline RawImage read_jpeg(const std::filesystem::path& path) {
  auto file = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo{};
  detail::JpegError err{};
  cinfo.err = jpeg_std_error(&err.base);
  err.base.error_exit = detail::jpeg_error_exit;
  RawImage image;
  bool grayscale = false;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    fail(ErrorKind::io, "corrupt or unreadable JPEG '" + path.string() + "'");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, file.get());
  jpeg_read_header(&cinfo, TRUE);
  grayscale = cinfo.jpeg_color_space == JCS_GRAYSCALE;
  if (!grayscale) {
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);
    image.width = cinfo.output_width;
    image.height = cinfo.output_height;
    image.channels = 3;
    image.samples.resize(image.width * image.height * 3);
    std::vector<JSAMPLE> row(image.width * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
      JSAMPROW ptr = row.data();
      const std::size_t y = cinfo.output_scanline;
      jpeg_read_scanlines(&cinfo, &ptr, 1);
      for (std::size_t n = 0; n < row.size(); ++n) image.samples[y * row.size() + n] = row[n];
    }
    jpeg_finish_decompress(&cinfo);
  }
  jpeg_destroy_decompress(&cinfo);
  if (grayscale) fail(ErrorKind::format, "'" + path.string() + "' is a grayscale JPEG, expected RGB");
  return image;
}

}  // namespace macnn
