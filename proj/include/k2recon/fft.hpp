#pragma once

// Centered, orthonormal 2-D DFT over the trailing two axes. Backed by FFTW
// (any extent, no power-of-two requirement).

#include <fftw3.h>

#include <complex>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "k2recon/complex_tensor.hpp"

namespace k2recon {

namespace detail {

class FftPlans {
 public:
  static FftPlans& instance() {
    static FftPlans plans;
    return plans;
  }

  FftPlans(const FftPlans&) = delete;
  FftPlans& operator=(const FftPlans&) = delete;

  /// Planning is not thread-safe in FFTW; execution of an existing plan is.
  fftw_plan get(int h, int w, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(h, w, sign);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    std::vector<std::complex<double>> scratch(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
    auto* buf = reinterpret_cast<fftw_complex*>(scratch.data());
    fftw_plan p = fftw_plan_dft_2d(h, w, buf, buf, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    plans_.emplace(key, p);
    return p;
  }

 private:
  FftPlans() = default;
  ~FftPlans() {
    for (auto& [k, p] : plans_) fftw_destroy_plan(p);
  }

  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

inline void centered_dft(ComplexTensor& x, int sign) {
  const auto& s = x.shape();
  if (s.size() < 2) throw ContractViolation("fft2 needs at least two axes, got " + ndgrad::to_string(s));
  const std::size_t h = s[s.size() - 2], w = s[s.size() - 1];
  const std::size_t plane = h * w;
  const std::size_t batches = x.size() / plane;
  fftw_plan plan = FftPlans::instance().get(static_cast<int>(h), static_cast<int>(w), sign);
  const double scale = 1.0 / std::sqrt(static_cast<double>(plane));
  const std::size_t hh = h / 2, hw = w / 2;
  std::vector<std::complex<double>> buf(plane);
  for (std::size_t b = 0; b < batches; ++b) {
    double* re = x.re().data() + b * plane;
    double* im = x.im().data() + b * plane;
    // ifftshift on the way in: element at the center moves to the origin.
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t sy = (y + hh) % h;
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t sx = (c + hw) % w;
        buf[y * w + c] = {re[sy * w + sx], im[sy * w + sx]};
      }
    }
    auto* p = reinterpret_cast<fftw_complex*>(buf.data());
    fftw_execute_dft(plan, p, p);
    // fftshift on the way out: origin moves back to the center.
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t dy = (y + hh) % h;
      for (std::size_t c = 0; c < w; ++c) {
        const std::size_t dx = (c + hw) % w;
        re[dy * w + dx] = buf[y * w + c].real() * scale;
        im[dy * w + dx] = buf[y * w + c].imag() * scale;
      }
    }
  }
}

}  // namespace detail

inline ComplexTensor fft2(ComplexTensor x) {
  detail::centered_dft(x, FFTW_FORWARD);
  return x;
}

inline ComplexTensor ifft2(ComplexTensor x) {
  detail::centered_dft(x, FFTW_BACKWARD);
  return x;
}

}  // namespace k2recon
