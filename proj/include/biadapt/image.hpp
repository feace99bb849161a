#pragma once

#include <vector>

#include "biadapt/common.hpp"

namespace biadapt {

// dense row-major RGB raster, values nominally in [0, 1]
struct Image {
  int h = 0;
  int w = 0;
  std::vector<double> data;  // index = (y * w + x) * 3 + c

  Image() = default;
  Image(int height, int width)
      : h(height), w(width),
        data(static_cast<std::size_t>(height) * width * 3, 0.0) {
    if (height <= 0 || width <= 0) throw SizeError("image: non-positive dims");
  }

  double& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * w + x) * 3 + c];
  }
};

// packed matrix form used by the networks: (h*w) rows, 3 cols
inline Mat image_rows(const Image& img) {
  Mat m(static_cast<long>(img.h) * img.w, 3);
  for (int y = 0; y < img.h; ++y)
    for (int x = 0; x < img.w; ++x)
      for (int c = 0; c < 3; ++c)
        m(static_cast<long>(y) * img.w + x, c) = img.at(y, x, c);
  return m;
}

inline Image image_from_rows(const Mat& m, int h, int w) {
  if (m.rows() != static_cast<long>(h) * w || m.cols() != 3)
    throw ShapeError("image_from_rows: geometry mismatch");
  Image img(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = m(static_cast<long>(y) * w + x, c);
  return img;
}

// edge-clamped bilinear lookup
inline double bilinear_sample(const Image& img, double y, double x, int c) {
  double yc = std::min(std::max(y, 0.0), static_cast<double>(img.h - 1));
  double xc = std::min(std::max(x, 0.0), static_cast<double>(img.w - 1));
  int y0 = static_cast<int>(std::floor(yc));
  int x0 = static_cast<int>(std::floor(xc));
  int y1 = std::min(y0 + 1, img.h - 1);
  int x1 = std::min(x0 + 1, img.w - 1);
  double fy = yc - y0, fx = xc - x0;
  double top = (1.0 - fx) * img.at(y0, x0, c) + fx * img.at(y0, x1, c);
  double bot = (1.0 - fx) * img.at(y1, x0, c) + fx * img.at(y1, x1, c);
  return (1.0 - fy) * top + fy * bot;
}

// bilinear resize of a single-channel map, align-corners style sampling
inline Mat bilinear_resize_map(const Mat& src, int oh, int ow) {
  if (src.rows() < 1 || src.cols() < 1 || oh < 1 || ow < 1)
    throw SizeError("bilinear_resize_map: empty input or output");
  Mat out(oh, ow);
  double sy = oh > 1 ? double(src.rows() - 1) / double(oh - 1) : 0.0;
  double sx = ow > 1 ? double(src.cols() - 1) / double(ow - 1) : 0.0;
  for (int y = 0; y < oh; ++y) {
    double fy = y * sy;
    int y0 = static_cast<int>(std::floor(fy));
    int y1 = std::min<int>(y0 + 1, static_cast<int>(src.rows()) - 1);
    double ry = fy - y0;
    for (int x = 0; x < ow; ++x) {
      double fx = x * sx;
      int x0 = static_cast<int>(std::floor(fx));
      int x1 = std::min<int>(x0 + 1, static_cast<int>(src.cols()) - 1);
      double rx = fx - x0;
      double top = (1.0 - rx) * src(y0, x0) + rx * src(y0, x1);
      double bot = (1.0 - rx) * src(y1, x0) + rx * src(y1, x1);
      out(y, x) = (1.0 - ry) * top + ry * bot;
    }
  }
  return out;
}

inline void clamp01(Image& img) {
  for (double& v : img.data) v = std::min(1.0, std::max(0.0, v));
}

inline std::uint64_t content_hash(const Image& img) {
  std::uint64_t h = fnv1a(&img.h, sizeof(img.h));
  h = fnv1a(&img.w, sizeof(img.w), h);
  h = fnv1a(img.data.data(), img.data.size() * sizeof(double), h);
  return h;
}

}  // namespace biadapt
