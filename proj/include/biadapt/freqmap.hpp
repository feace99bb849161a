#pragma once

// Frequency-domain preprocessing: full-range BT.601 YCbCr conversion followed
// by orthonormal 8x8 blockwise DCT-II per channel. Both steps are linear and
// exactly invertible, so the composite map round-trips.

#include "biadapt/image.hpp"

namespace biadapt::freq {

// ycc = rgb * M^T + offset, channels in [0,1], chroma centered at 0.5
inline const Mat& ycbcr_matrix() {
  static const Mat m = [] {
    const double kr = 0.299, kg = 0.587, kb = 0.114;
    const double cb = 0.564, cr = 0.713;
    Mat a(3, 3);
    a << kr, kg, kb,
        -cb * kr, -cb * kg, cb * (1.0 - kb),
        cr * (1.0 - kr), -cr * kg, -cr * kb;
    return a;
  }();
  return m;
}

inline const Eigen::RowVector3d& ycbcr_offset() {
  static const Eigen::RowVector3d off(0.0, 0.5, 0.5);
  return off;
}

inline const Mat& ycbcr_inverse_matrix() {
  static const Mat inv = ycbcr_matrix().inverse().eval();
  return inv;
}

inline Mat ycbcr_rows(const Mat& rgb) {
  if (rgb.cols() != 3) throw ShapeError("ycbcr_rows: expected 3 channels");
  return (rgb * ycbcr_matrix().transpose()).rowwise() + ycbcr_offset();
}

inline Mat ycbcr_rows_inverse(const Mat& ycc) {
  if (ycc.cols() != 3) throw ShapeError("ycbcr_rows_inverse: expected 3 channels");
  return (ycc.rowwise() - ycbcr_offset()) * ycbcr_inverse_matrix().transpose();
}

inline Image rgb_to_ycbcr(const Image& img) {
  return image_from_rows(ycbcr_rows(image_rows(img)), img.h, img.w);
}

inline Image ycbcr_to_rgb(const Image& img) {
  return image_from_rows(ycbcr_rows_inverse(image_rows(img)), img.h, img.w);
}

// orthonormal DCT-II basis: A(k,n) = s(k) cos(pi (2n+1) k / 16)
inline const Mat& dct_matrix8() {
  static const Mat a = [] {
    Mat m(8, 8);
    for (int k = 0; k < 8; ++k) {
      double s = k == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int n = 0; n < 8; ++n)
        m(k, n) = s * std::cos(M_PI * (2.0 * n + 1.0) * k / 16.0);
    }
    return m;
  }();
  return a;
}

// in-place per-block transform of one plane; inverse uses the transpose
inline void dct8_plane(Mat& plane, bool inverse = false) {
  if (plane.rows() % 8 != 0 || plane.cols() % 8 != 0)
    throw ShapeError("dct8_plane: dims must be divisible by 8");
  const Mat& a = dct_matrix8();
  for (long by = 0; by < plane.rows(); by += 8)
    for (long bx = 0; bx < plane.cols(); bx += 8) {
      Mat blk = plane.block(by, bx, 8, 8);
      if (inverse)
        plane.block(by, bx, 8, 8) = a.transpose() * blk * a;
      else
        plane.block(by, bx, 8, 8) = a * blk * a.transpose();
    }
}

// packed (b*h*w) x c form used inside the networks
inline Mat dct8_rows(const Mat& rows, int b, int h, int w,
                     bool inverse = false) {
  if (rows.rows() != static_cast<long>(b) * h * w)
    throw ShapeError("dct8_rows: row count mismatch");
  if (h % 8 != 0 || w % 8 != 0)
    throw ShapeError("dct8_rows: dims must be divisible by 8");
  Mat out = rows;
  Mat plane(h, w);
  for (int bi = 0; bi < b; ++bi)
    for (long c = 0; c < rows.cols(); ++c) {
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          plane(y, x) = rows(static_cast<long>(bi) * h * w + y * w + x, c);
      dct8_plane(plane, inverse);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          out(static_cast<long>(bi) * h * w + y * w + x, c) = plane(y, x);
    }
  return out;
}

inline Image block_dct8(const Image& img) {
  return image_from_rows(dct8_rows(image_rows(img), 1, img.h, img.w, false),
                         img.h, img.w);
}

inline Image block_idct8(const Image& img) {
  return image_from_rows(dct8_rows(image_rows(img), 1, img.h, img.w, true),
                         img.h, img.w);
}

inline Image frequency_map(const Image& img) {
  return block_dct8(rgb_to_ycbcr(img));
}

inline Image inverse_frequency_map(const Image& img) {
  return ycbcr_to_rgb(block_idct8(img));
}

}  // namespace biadapt::freq
