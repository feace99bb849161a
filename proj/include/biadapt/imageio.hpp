#pragma once

// PNG/JPEG codec wrappers. Decoded images are normalized to RGB doubles in
// [0,1]; encode quantizes to 8 bits.

#include <csetjmp>
#include <cstdio>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "biadapt/image.hpp"

namespace biadapt::io {

namespace detail {

struct FileHandle {
  std::FILE* f = nullptr;
  explicit FileHandle(std::FILE* fp) : f(fp) {}
  ~FileHandle() {
    if (f != nullptr) std::fclose(f);
  }
  FileHandle(const FileHandle&) = delete;
  FileHandle& operator=(const FileHandle&) = delete;
};

struct JpegErrorMgr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErrorMgr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

inline Image rgb8_to_image(const std::vector<unsigned char>& buf, int h,
                           int w) {
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) =
            buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return img;
}

inline Image read_png(const std::string& path) {
  FileHandle fh(std::fopen(path.c_str(), "rb"));
  if (fh.f == nullptr) throw IngestionError("cannot open " + path);
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IngestionError("png init failed for " + path);
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IngestionError("png init failed for " + path);
  }
  std::vector<unsigned char> buf;
  std::vector<png_bytep> rows;
  int h = 0, w = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestionError("undecodable PNG: " + path);
  }
  png_init_io(png, fh.f);
  png_read_info(png, info);
  w = static_cast<int>(png_get_image_width(png, info));
  h = static_cast<int>(png_get_image_height(png, info));
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA)
    png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  buf.resize(static_cast<std::size_t>(h) * w * 3);
  rows.resize(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y)
    rows[static_cast<std::size_t>(y)] = buf.data() + static_cast<std::size_t>(y) * w * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return rgb8_to_image(buf, h, w);
}

inline Image read_jpeg(const std::string& path) {
  FileHandle fh(std::fopen(path.c_str(), "rb"));
  if (fh.f == nullptr) throw IngestionError("cannot open " + path);
  jpeg_decompress_struct cinfo;
  JpegErrorMgr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_error_exit;
  std::vector<unsigned char> buf;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IngestionError("undecodable JPEG: " + path);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, fh.f);
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  int w = static_cast<int>(cinfo.output_width);
  int h = static_cast<int>(cinfo.output_height);
  buf.resize(static_cast<std::size_t>(h) * w * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row =
        buf.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return rgb8_to_image(buf, h, w);
}

}  // namespace detail

inline Image read_image(const std::string& path) {
  std::FILE* probe = std::fopen(path.c_str(), "rb");
  if (probe == nullptr) throw IngestionError("cannot open " + path);
  unsigned char sig[8] = {0};
  std::size_t got = std::fread(sig, 1, 8, probe);
  std::fclose(probe);
  if (got >= 8 && png_sig_cmp(sig, 0, 8) == 0) return detail::read_png(path);
  if (got >= 2 && sig[0] == 0xFF && sig[1] == 0xD8)
    return detail::read_jpeg(path);
  throw IngestionError("unrecognized image format: " + path);
}

inline void write_png(const std::string& path, const Image& img) {
  detail::FileHandle fh(std::fopen(path.c_str(), "wb"));
  if (fh.f == nullptr) throw IoError("cannot write " + path);
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("png init failed for " + path);
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png init failed for " + path);
  }
  std::vector<unsigned char> buf(static_cast<std::size_t>(img.h) * img.w * 3);
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.h));
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed for " + path);
  }
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = std::min(1.0, std::max(0.0, img.at(y, x, c)));
        buf[(static_cast<std::size_t>(y) * img.w + x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
  for (int y = 0; y < img.h; ++y)
    rows[static_cast<std::size_t>(y)] =
        buf.data() + static_cast<std::size_t>(y) * img.w * 3;
  png_init_io(png, fh.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.w),
               static_cast<png_uint_32>(img.h), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// single-channel map in [0,1] rendered as 8-bit grayscale
inline void write_png_gray(const std::string& path, const Mat& map) {
  Image img(static_cast<int>(map.rows()), static_cast<int>(map.cols()));
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = map(y, x);
  write_png(path, img);
}

}  // namespace biadapt::io
