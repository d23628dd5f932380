#pragma once

// Synthetic ground truth: ellipse phantoms with a smooth phase, Gaussian-lobe
// coil maps, and noisy multi-coil k-space.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "k2recon/linops.hpp"
#include "k2recon/rng.hpp"

namespace k2recon {

enum class PhantomKind { shepp_logan, random_ellipses };

inline const char* to_string(PhantomKind k) { return k == PhantomKind::shepp_logan ? "shepp-logan" : "random-ellipses"; }

inline PhantomKind parse_phantom_kind(const std::string& s) {
  if (s == "shepp-logan") return PhantomKind::shepp_logan;
  if (s == "random-ellipses") return PhantomKind::random_ellipses;
  throw ConfigError("unknown phantom kind '" + s + "' (expected shepp-logan or random-ellipses)");
}

namespace detail {

struct Ellipse {
  double value, a, b, cx, cy, angle_deg;
};

// Modified Shepp-Logan (Toft).
inline constexpr std::array<Ellipse, 10> kSheppLogan{{
    {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},
    {-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0},
    {-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0},
    {-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0},
    {0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0},
    {0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0},
    {0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0},
    {0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0},
    {0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0},
    {0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0},
}};

/// Normalized pixel-center coordinates in [-1,1]; y points up.
inline double coord_x(std::size_t c, std::size_t w) { return (2.0 * (static_cast<double>(c) + 0.5) / static_cast<double>(w)) - 1.0; }
inline double coord_y(std::size_t r, std::size_t h) { return 1.0 - (2.0 * (static_cast<double>(r) + 0.5) / static_cast<double>(h)); }

inline void rasterize(std::vector<double>& img, std::size_t h, std::size_t w, const Ellipse& e) {
  const double th = e.angle_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th), st = std::sin(th);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = coord_x(c, w) - e.cx, y = coord_y(r, h) - e.cy;
      const double u = x * ct + y * st, v = -x * st + y * ct;
      if ((u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0) img[r * w + c] += e.value;
    }
  }
}

}  // namespace detail

/// Complex phantom: magnitude in [0,1] times a smooth random phase. Deterministic per seed.
inline ComplexTensor make_phantom(std::size_t h, std::size_t w, PhantomKind kind, std::uint64_t seed) {
  if (h < 32 || w < 32) throw ConfigError("make_phantom: H and W must be >= 32, got " + std::to_string(h) + "x" + std::to_string(w));
  std::vector<double> mag(h * w, 0.0);
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };

  if (kind == PhantomKind::shepp_logan) {
    for (const auto& e : detail::kSheppLogan) detail::rasterize(mag, h, w, e);
  } else {
    // Body outline, then internal structures of mixed contrast.
    detail::rasterize(mag, h, w, {uni(0.45, 0.65), uni(0.6, 0.85), uni(0.7, 0.9), uni(-0.05, 0.05), uni(-0.05, 0.05), uni(-20, 20)});
    const int count = 6 + static_cast<int>(u01(rng) * 7.0);
    for (int i = 0; i < count; ++i) {
      const double rad = uni(0.0, 0.55), ang = uni(0.0, 2.0 * std::numbers::pi);
      const double value = u01(rng) < 0.35 ? uni(-0.4, -0.1) : uni(0.1, 0.5);
      detail::rasterize(mag, h, w, {value, uni(0.04, 0.3), uni(0.04, 0.3), rad * std::cos(ang), rad * std::sin(ang), uni(0, 180)});
    }
  }
  double peak = 0.0;
  for (auto& v : mag) {
    v = std::clamp(v, 0.0, 1.0);
    peak = std::max(peak, v);
  }
  if (kind == PhantomKind::shepp_logan && peak > 0.0) {
    for (auto& v : mag) v /= peak;
  }

  // Smooth phase: low-order polynomial with random coefficients.
  const double p0 = uni(-std::numbers::pi, std::numbers::pi);
  const double px = uni(-0.6, 0.6), py = uni(-0.6, 0.6), pxy = uni(-0.3, 0.3), pq = uni(-0.3, 0.3);
  ComplexTensor img({h, w});
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const double x = detail::coord_x(c, w), y = detail::coord_y(r, h);
      const double phi = p0 + px * x + py * y + pxy * x * y + pq * (x * x - y * y);
      img.set(r * w + c, std::polar(mag[r * w + c], phi));
    }
  }
  return img;
}

/// Gaussian-lobe maps centered around the field of view, normalized so that
/// sum_i |C_i|^2 == 1 and coil 0 carries zero phase.
inline CoilSensitivities make_coils(std::size_t h, std::size_t w, std::size_t ncoil, std::uint64_t seed) {
  if (ncoil < 1) throw ConfigError("make_coils: ncoil must be >= 1");
  Rng rng = make_rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t n = h * w;
  ComplexTensor maps({ncoil, h, w});
  const double width = 0.9;
  for (std::size_t i = 0; i < ncoil; ++i) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(ncoil);
    const double cx = 1.1 * std::cos(ang), cy = 1.1 * std::sin(ang);
    const double ph0 = (u01(rng) * 2.0 - 1.0) * std::numbers::pi;
    const double phx = (u01(rng) * 2.0 - 1.0) * 0.5, phy = (u01(rng) * 2.0 - 1.0) * 0.5;
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const double x = detail::coord_x(c, w), y = detail::coord_y(r, h);
        const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
        maps.set(i * n + r * w + c, std::polar(std::exp(-d2 / (2.0 * width * width)), ph0 + phx * x + phy * y));
      }
    }
  }
  for (std::size_t p = 0; p < n; ++p) {
    double ss = 0.0;
    for (std::size_t i = 0; i < ncoil; ++i) ss += std::norm(maps.at(i * n + p));
    const double inv = 1.0 / std::sqrt(ss);
    const cplx ref = std::polar(1.0, -std::arg(maps.at(p)));
    for (std::size_t i = 0; i < ncoil; ++i) maps.set(i * n + p, maps.at(i * n + p) * inv * ref);
  }
  return {std::move(maps)};
}

/// Largest |C(r) - C(r')| over horizontally or vertically adjacent pixels.
inline double max_neighbor_difference(const CoilSensitivities& coils) {
  const std::size_t h = coils.height(), w = coils.width(), n = h * w;
  double worst = 0.0;
  for (std::size_t i = 0; i < coils.ncoil(); ++i) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t c = 0; c < w; ++c) {
        const cplx v = coils.maps.at(i * n + r * w + c);
        if (c + 1 < w) worst = std::max(worst, std::abs(coils.maps.at(i * n + r * w + c + 1) - v));
        if (r + 1 < h) worst = std::max(worst, std::abs(coils.maps.at(i * n + (r + 1) * w + c) - v));
      }
    }
  }
  return worst;
}

/// to_kspace(gt) plus complex white Gaussian noise, sigma per real/imag component.
inline ComplexTensor simulate_kspace(const ComplexTensor& gt, const CoilSensitivities& coils, double noise_sigma,
                                     std::uint64_t seed) {
  if (!(noise_sigma >= 0.0)) throw ConfigError("simulate_kspace: noise_sigma must be >= 0");
  ComplexTensor k = to_kspace(gt, coils);
  if (noise_sigma > 0.0) {
    Rng rng = make_rng(seed);
    std::normal_distribution<double> noise(0.0, noise_sigma);
    for (std::size_t i = 0; i < k.size(); ++i) {
      k.re()[i] += noise(rng);
      k.im()[i] += noise(rng);
    }
  }
  return k;
}

}  // namespace k2recon
