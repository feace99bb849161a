#pragma once

// Synthetic forgery-domain generator. Reals are smoothed-noise textures with
// per-image palettes drawn from a per-domain hue family; fakes apply one of
// four manipulations to a fresh real (or resynthesize outright). Per-domain
// palette and texture-scale differences create the domain shift; the
// manipulations leave localized statistical artifacts that a detector can
// transfer across domains.

#include <string>

#include "biadapt/data.hpp"

namespace biadapt::synth {

enum class ManipKind { patch_swap, local_warp, region_noise, full_synth };

inline ManipKind parse_manip_kind(const std::string& s) {
  if (s == "patch_swap") return ManipKind::patch_swap;
  if (s == "local_warp") return ManipKind::local_warp;
  if (s == "region_noise") return ManipKind::region_noise;
  if (s == "full_synth") return ManipKind::full_synth;
  throw ConfigError("unknown manipulation kind: " + s);
}

inline std::string manip_kind_name(ManipKind k) {
  switch (k) {
    case ManipKind::patch_swap: return "patch_swap";
    case ManipKind::local_warp: return "local_warp";
    case ManipKind::region_noise: return "region_noise";
    case ManipKind::full_synth: return "full_synth";
  }
  throw ConfigError("unknown manipulation kind");
}

struct DomainStyle {
  double hue_center = 0.0;
  double hue_width = 0.06;
  int blur_passes = 3;
  double grain = 0.02;
};

inline DomainStyle domain_style(ManipKind k) {
  switch (k) {
    case ManipKind::patch_swap: return {0.08, 0.06, 4, 0.010};
    case ManipKind::local_warp: return {0.58, 0.06, 2, 0.030};
    case ManipKind::region_noise: return {0.33, 0.06, 3, 0.020};
    case ManipKind::full_synth: return {0.83, 0.06, 4, 0.015};
  }
  throw ConfigError("unknown manipulation kind");
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  if (hp < 1)      { r = c; g = x; }
  else if (hp < 2) { r = x; g = c; }
  else if (hp < 3) { g = c; b = x; }
  else if (hp < 4) { g = x; b = c; }
  else if (hp < 5) { r = x; b = c; }
  else             { r = c; b = x; }
  double m = v - c;
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

// separable [1,2,1]/4 smoothing with mirrored edges
inline void blur_field(Mat& f) {
  long h = f.rows(), w = f.cols();
  Mat tmp(h, w);
  auto refl = [](long i, long n) {
    if (i < 0) return -i;
    if (i >= n) return 2 * n - 2 - i;
    return i;
  };
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      tmp(y, x) = 0.25 * f(y, refl(x - 1, w)) + 0.5 * f(y, x) +
                  0.25 * f(y, refl(x + 1, w));
  for (long y = 0; y < h; ++y)
    for (long x = 0; x < w; ++x)
      f(y, x) = 0.25 * tmp(refl(y - 1, h), x) + 0.5 * tmp(y, x) +
                0.25 * tmp(refl(y + 1, h), x);
}

inline Mat noise_field(Rng& rng, int side, int blur_passes) {
  Mat f(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) f(y, x) = rng.uniform();
  for (int i = 0; i < blur_passes; ++i) blur_field(f);
  double lo = f.minCoeff(), hi = f.maxCoeff();
  if (hi - lo < 1e-12)
    f.setConstant(0.5);
  else
    f = ((f.array() - lo) / (hi - lo)).matrix();
  return f;
}

}  // namespace detail

inline Image make_real(const DomainStyle& style, Rng& rng, int side) {
  Mat field = detail::noise_field(rng, side, style.blur_passes);
  double hue0 = style.hue_center + rng.uniform(-style.hue_width, style.hue_width);
  double hue1 = style.hue_center + rng.uniform(-style.hue_width, style.hue_width);
  double sat0 = rng.uniform(0.35, 0.75), sat1 = rng.uniform(0.35, 0.75);
  double val0 = rng.uniform(0.20, 0.42), val1 = rng.uniform(0.62, 0.92);
  double a[3], b[3];
  detail::hsv_to_rgb(hue0, sat0, val0, a);
  detail::hsv_to_rgb(hue1, sat1, val1, b);
  Image img(side, side);
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double t = field(y, x);
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = (1.0 - t) * a[c] + t * b[c] +
                          style.grain * (rng.uniform() - 0.5);
    }
  clamp01(img);
  return img;
}

// central square from the donor blended in with a raised-cosine border
inline Image apply_patch_swap(const Image& base, const Image& donor, Rng& rng,
                              int border = 2) {
  int side = base.h;
  int ps = side / 2;
  int jit = std::max(1, side / 16);
  int y0 = (side - ps) / 2 + static_cast<int>(rng.uniform_int(-jit, jit));
  int x0 = (side - ps) / 2 + static_cast<int>(rng.uniform_int(-jit, jit));
  y0 = std::min(std::max(y0, 0), side - ps);
  x0 = std::min(std::max(x0, 0), side - ps);
  auto ramp = [&](int t, int extent) {
    double d = std::min(t, extent - 1 - t);
    if (d >= border) return 1.0;
    return 0.5 * (1.0 - std::cos(M_PI * (d + 0.5) / border));
  };
  Image out = base;
  for (int y = 0; y < ps; ++y)
    for (int x = 0; x < ps; ++x) {
      double m = ramp(y, ps) * ramp(x, ps);
      for (int c = 0; c < 3; ++c)
        out.at(y0 + y, x0 + x, c) = m * donor.at(y0 + y, x0 + x, c) +
                                    (1.0 - m) * base.at(y0 + y, x0 + x, c);
    }
  clamp01(out);
  return out;
}

// sinusoidal displacement inside a central disk, raised-cosine envelope
inline Image apply_local_warp(const Image& base, Rng& rng) {
  int side = base.h;
  double radius = 0.34 * side;
  double cy = side / 2.0 + rng.uniform(-side / 16.0, side / 16.0);
  double cx = side / 2.0 + rng.uniform(-side / 16.0, side / 16.0);
  double amp = rng.uniform(1.4, 2.4);
  double cycles = rng.uniform(1.2, 2.0);
  double p1 = rng.uniform(0.0, 2.0 * M_PI), p2 = rng.uniform(0.0, 2.0 * M_PI);
  Image out = base;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      double dy0 = y - cy, dx0 = x - cx;
      double r = std::sqrt(dy0 * dy0 + dx0 * dx0);
      if (r >= radius) continue;
      double env = 0.5 * (1.0 + std::cos(M_PI * r / radius));
      double k = 2.0 * M_PI * cycles / radius;
      double dy = amp * env * std::sin(k * dx0 + p1);
      double dx = amp * env * std::sin(k * dy0 + p2);
      for (int c = 0; c < 3; ++c)
        out.at(y, x, c) = bilinear_sample(base, y + dy, x + dx, c);
    }
  clamp01(out);
  return out;
}

struct Region {
  int y0 = 0, x0 = 0, h = 0, w = 0;
};

// band-limited additive noise confined to a rectangle; pixels outside are
// bitwise untouched
inline Image apply_region_noise(const Image& base, Rng& rng,
                                Region* out_region = nullptr) {
  int side = base.h;
  int half = side / 4;
  int jit = std::max(1, side / 16);
  int cy = side / 2 + static_cast<int>(rng.uniform_int(-jit, jit));
  int cx = side / 2 + static_cast<int>(rng.uniform_int(-jit, jit));
  Region reg;
  reg.y0 = std::min(std::max(cy - half, 0), side - 2 * half);
  reg.x0 = std::min(std::max(cx - half, 0), side - 2 * half);
  reg.h = 2 * half;
  reg.w = 2 * half;
  if (out_region != nullptr) *out_region = reg;

  Mat white(reg.h, reg.w);
  for (int y = 0; y < reg.h; ++y)
    for (int x = 0; x < reg.w; ++x) white(y, x) = rng.uniform() - 0.5;
  Mat lowpass = white;
  detail::blur_field(lowpass);
  Mat verylow = lowpass;
  detail::blur_field(verylow);
  detail::blur_field(verylow);
  Mat band = lowpass - verylow;
  double sd = std::sqrt(band.array().square().mean());
  double target = rng.uniform(0.06, 0.10);
  if (sd > 1e-12) band *= target / sd;

  Image out = base;
  for (int y = 0; y < reg.h; ++y)
    for (int x = 0; x < reg.w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = out.at(reg.y0 + y, reg.x0 + x, c) + band(y, x);
        out.at(reg.y0 + y, reg.x0 + x, c) = std::min(1.0, std::max(0.0, v));
      }
  return out;
}

// whole-image resynthesis with shifted texture statistics
inline Image make_full_synth(const DomainStyle& style, Rng& rng, int side) {
  DomainStyle shifted = style;
  shifted.hue_center += 0.09;
  shifted.blur_passes = std::max(1, style.blur_passes - 1);
  shifted.grain = style.grain + 0.015;
  return make_real(shifted, rng, side);
}

inline Image make_fake(ManipKind kind, const DomainStyle& style, Rng& rng,
                       int side) {
  switch (kind) {
    case ManipKind::patch_swap: {
      Image base = make_real(style, rng, side);
      Image donor = make_real(style, rng, side);
      return apply_patch_swap(base, donor, rng);
    }
    case ManipKind::local_warp: {
      Image base = make_real(style, rng, side);
      return apply_local_warp(base, rng);
    }
    case ManipKind::region_noise: {
      Image base = make_real(style, rng, side);
      return apply_region_noise(base, rng);
    }
    case ManipKind::full_synth:
      return make_full_synth(style, rng, side);
  }
  throw ConfigError("unknown manipulation kind");
}

inline DomainDataset generate_domain(ManipKind kind, std::uint64_t seed,
                                     int n_real, int n_fake, int side) {
  if (n_real < 4 || n_fake < 4)
    throw SizeError("generate_domain: need at least 4 samples per class");
  if (side != 32 && side != 64 && side != 224)
    throw ConfigError("generate_domain: side must be 32, 64, or 224");
  const DomainStyle style = domain_style(kind);
  const std::string id = manip_kind_name(kind);
  Rng root(seed ^ fnv1a(id));
  DomainDataset d;
  d.domain_id = id;
  d.labeled = true;
  d.train.resize(static_cast<std::size_t>(n_real) + n_fake);
  parallel_for(static_cast<std::size_t>(n_real) + n_fake, [&](std::size_t i) {
    if (i < static_cast<std::size_t>(n_real)) {
      Rng rng = root.fork("real:" + std::to_string(i));
      d.train[i] = LabeledSample(make_real(style, rng, side), 0, id);
    } else {
      Rng rng = root.fork("fake:" + std::to_string(i - n_real));
      d.train[i] = LabeledSample(make_fake(kind, style, rng, side), 1, id);
    }
  });
  return d;
}

inline DomainDataset generate_domain(const std::string& kind,
                                     std::uint64_t seed, int n_real, int n_fake,
                                     int side) {
  return generate_domain(parse_manip_kind(kind), seed, n_real, n_fake, side);
}

}  // namespace biadapt::synth
