#pragma once

#include <cmath>
#include <complex>
#include <span>
#include <vector>

#include "k2recon/error.hpp"
#include "k2recon/ndgrad.hpp"

namespace k2recon {

using cplx = std::complex<double>;
using ndgrad::Shape;
using ndgrad::Tensor;

/// Dense complex array stored as separate real and imaginary planes.
class ComplexTensor {
 public:
  ComplexTensor() = default;

  explicit ComplexTensor(Shape shape) : shape_(std::move(shape)) {
    const auto n = ndgrad::numel(shape_);
    re_.assign(n, 0.0);
    im_.assign(n, 0.0);
  }

  ComplexTensor(Shape shape, std::vector<double> re, std::vector<double> im)
      : shape_(std::move(shape)), re_(std::move(re)), im_(std::move(im)) {
    if (re_.size() != im_.size() || re_.size() != ndgrad::numel(shape_)) {
      throw ContractViolation("complex tensor planes do not match shape " + ndgrad::to_string(shape_));
    }
  }

  /// Inverse of to_tensor(): expects [2, ...] with channel 0 real, channel 1 imaginary.
  static ComplexTensor from_tensor(const Tensor& t) {
    if (t.rank() < 2 || t.shape()[0] != 2) {
      throw ContractViolation("expected a 2-channel tensor [2,...], got " + ndgrad::to_string(t.shape()));
    }
    Shape inner(t.shape().begin() + 1, t.shape().end());
    const auto n = ndgrad::numel(inner);
    auto d = t.data();
    return ComplexTensor(std::move(inner), std::vector<double>(d.begin(), d.begin() + static_cast<long>(n)),
                         std::vector<double>(d.begin() + static_cast<long>(n), d.end()));
  }

  Tensor to_tensor() const {
    Shape s{2};
    s.insert(s.end(), shape_.begin(), shape_.end());
    std::vector<double> d;
    d.reserve(2 * re_.size());
    d.insert(d.end(), re_.begin(), re_.end());
    d.insert(d.end(), im_.begin(), im_.end());
    return Tensor(std::move(s), std::move(d));
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return re_.size(); }
  bool empty() const { return re_.empty(); }

  std::span<double> re() { return re_; }
  std::span<const double> re() const { return re_; }
  std::span<double> im() { return im_; }
  std::span<const double> im() const { return im_; }

  cplx at(std::size_t i) const { return {re_[i], im_[i]}; }
  void set(std::size_t i, cplx v) {
    re_[i] = v.real();
    im_[i] = v.imag();
  }

  /// Slice along the leading dimension (e.g. coil i of [ncoil,H,W]).
  ComplexTensor slice(std::size_t i) const {
    Shape inner(shape_.begin() + 1, shape_.end());
    const auto n = ndgrad::numel(inner);
    const auto off = static_cast<long>(i * n);
    return ComplexTensor(std::move(inner), std::vector<double>(re_.begin() + off, re_.begin() + off + static_cast<long>(n)),
                         std::vector<double>(im_.begin() + off, im_.begin() + off + static_cast<long>(n)));
  }

  ComplexTensor& operator+=(const ComplexTensor& o) {
    require_same(o, "+=");
    for (std::size_t i = 0; i < re_.size(); ++i) {
      re_[i] += o.re_[i];
      im_[i] += o.im_[i];
    }
    return *this;
  }

  ComplexTensor& operator-=(const ComplexTensor& o) {
    require_same(o, "-=");
    for (std::size_t i = 0; i < re_.size(); ++i) {
      re_[i] -= o.re_[i];
      im_[i] -= o.im_[i];
    }
    return *this;
  }

  ComplexTensor& operator*=(double s) {
    for (std::size_t i = 0; i < re_.size(); ++i) {
      re_[i] *= s;
      im_[i] *= s;
    }
    return *this;
  }

  /// this += a * x
  void axpy(double a, const ComplexTensor& x) {
    require_same(x, "axpy");
    for (std::size_t i = 0; i < re_.size(); ++i) {
      re_[i] += a * x.re_[i];
      im_[i] += a * x.im_[i];
    }
  }

  friend ComplexTensor operator+(ComplexTensor a, const ComplexTensor& b) { return a += b; }
  friend ComplexTensor operator-(ComplexTensor a, const ComplexTensor& b) { return a -= b; }
  friend ComplexTensor operator*(double s, ComplexTensor a) { return a *= s; }

  friend bool operator==(const ComplexTensor& a, const ComplexTensor& b) {
    return a.shape_ == b.shape_ && a.re_ == b.re_ && a.im_ == b.im_;
  }

  void require_same(const ComplexTensor& o, const char* op) const {
    if (shape_ != o.shape_) {
      throw ContractViolation(std::string(op) + ": shape mismatch " + ndgrad::to_string(shape_) + " vs " +
                              ndgrad::to_string(o.shape_));
    }
  }

 private:
  Shape shape_;
  std::vector<double> re_, im_;
};

/// <a, b> = sum conj(a_i) b_i
inline cplx inner(const ComplexTensor& a, const ComplexTensor& b) {
  a.require_same(b, "inner");
  double r = 0.0, i = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    r += a.re()[k] * b.re()[k] + a.im()[k] * b.im()[k];
    i += a.re()[k] * b.im()[k] - a.im()[k] * b.re()[k];
  }
  return {r, i};
}

inline double norm(const ComplexTensor& a) { return std::sqrt(inner(a, a).real()); }

inline double max_abs_diff(const ComplexTensor& a, const ComplexTensor& b) {
  a.require_same(b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a.at(k) - b.at(k)));
  return m;
}

inline std::vector<double> magnitude(const ComplexTensor& a) {
  std::vector<double> out(a.size());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = std::abs(a.at(k));
  return out;
}

inline bool all_finite(const ComplexTensor& a) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    if (!std::isfinite(a.re()[k]) || !std::isfinite(a.im()[k])) return false;
  }
  return true;
}

}  // namespace k2recon
