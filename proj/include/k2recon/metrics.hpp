#pragma once

// PSNR and SSIM on magnitude images.
//
// PSNR peak is the maximum magnitude of the reference. SSIM uses the Wang et al.
// parameterization (11x11 Gaussian window, sigma 1.5, k1 = 0.01, k2 = 0.03) over
// magnitudes scaled by the larger of the two peaks (dynamic range 1), averaged
// over all window positions that fit inside the image. Taking the larger peak
// equals the reference peak whenever x does not overshoot it, and keeps the
// index symmetric in its arguments.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "k2recon/complex_tensor.hpp"

namespace k2recon {

/// Returns +infinity for an exact match.
inline double psnr(const ComplexTensor& x, const ComplexTensor& ref) {
  x.require_same(ref, "psnr");
  const auto mx = magnitude(x);
  const auto mr = magnitude(ref);
  double peak = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < mr.size(); ++i) {
    peak = std::max(peak, mr[i]);
    const double d = mx[i] - mr[i];
    mse += d * d;
  }
  mse /= static_cast<double>(mr.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

inline double ssim(const ComplexTensor& x, const ComplexTensor& ref, SsimOptions opts = {}) {
  x.require_same(ref, "ssim");
  const auto& s = ref.shape();
  if (s.size() != 2) throw ContractViolation("ssim expects [H,W] images, got " + ndgrad::to_string(s));
  const std::size_t h = s[0], w = s[1], win = opts.window;
  if (h < win || w < win) {
    throw ConfigError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " is smaller than the " +
                      std::to_string(win) + "x" + std::to_string(win) + " window");
  }
  auto a = magnitude(x);
  auto b = magnitude(ref);
  double peak = std::max(*std::max_element(a.begin(), a.end()), *std::max_element(b.begin(), b.end()));
  if (peak <= 0.0) peak = 1.0;
  for (auto& v : a) v /= peak;
  for (auto& v : b) v /= peak;

  std::vector<double> g(win);
  const double c = static_cast<double>(win - 1) / 2.0;
  double gsum = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    g[i] = std::exp(-((static_cast<double>(i) - c) * (static_cast<double>(i) - c)) / (2.0 * opts.sigma * opts.sigma));
    gsum += g[i];
  }
  for (auto& v : g) v /= gsum;

  const double c1 = opts.k1 * opts.k1, c2 = opts.k2 * opts.k2;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t y0 = 0; y0 + win <= h; ++y0) {
    for (std::size_t x0 = 0; x0 + win <= w; ++x0) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (std::size_t i = 0; i < win; ++i) {
        for (std::size_t j = 0; j < win; ++j) {
          const double wt = g[i] * g[j];
          const double va = a[(y0 + i) * w + x0 + j];
          const double vb = b[(y0 + i) * w + x0 + j];
          ma += wt * va;
          mb += wt * vb;
          saa += wt * va * va;
          sbb += wt * vb * vb;
          sab += wt * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      total += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

}  // namespace k2recon
