#pragma once

// Encoding operator A = S F C, its adjoint, the conjugate-gradient solver and
// the data-consistency layer (with an implicit-differentiation backward).

#include <functional>
#include <memory>
#include <vector>

#include "k2recon/complex_tensor.hpp"
#include "k2recon/fft.hpp"
#include "k2recon/mask_grid.hpp"
#include "k2recon/ndgrad.hpp"

namespace k2recon {

/// Coil maps [ncoil,H,W]. Normalized maps satisfy sum_i |C_i(r)|^2 == 1.
struct CoilSensitivities {
  ComplexTensor maps;

  std::size_t ncoil() const { return maps.shape().at(0); }
  std::size_t height() const { return maps.shape().at(1); }
  std::size_t width() const { return maps.shape().at(2); }

  /// Single coil, C == 1.
  static CoilSensitivities uniform(std::size_t h, std::size_t w) {
    ComplexTensor m({1, h, w});
    std::fill(m.re().begin(), m.re().end(), 1.0);
    return {std::move(m)};
  }

  /// max over pixels of |sum_i |C_i|^2 - 1|
  double normalization_error() const {
    const std::size_t plane = height() * width();
    double worst = 0.0;
    for (std::size_t p = 0; p < plane; ++p) {
      double acc = 0.0;
      for (std::size_t c = 0; c < ncoil(); ++c) acc += std::norm(maps.at(c * plane + p));
      worst = std::max(worst, std::abs(acc - 1.0));
    }
    return worst;
  }

  void require_image(const ComplexTensor& x, const char* what) const {
    if (x.shape() != Shape{height(), width()}) {
      throw ContractViolation(std::string(what) + ": image shape " + ndgrad::to_string(x.shape()) +
                              " does not match coil maps " + ndgrad::to_string(maps.shape()));
    }
  }

  void require_kspace(const ComplexTensor& k, const char* what) const {
    if (k.shape() != maps.shape()) {
      throw ContractViolation(std::string(what) + ": k-space shape " + ndgrad::to_string(k.shape()) +
                              " does not match coil maps " + ndgrad::to_string(maps.shape()));
    }
  }
};

/// Per-coil fft2(C_i * z): unmasked coil k-space [ncoil,H,W].
inline ComplexTensor to_kspace(const ComplexTensor& z, const CoilSensitivities& coils) {
  coils.require_image(z, "to_kspace");
  const std::size_t plane = z.size();
  ComplexTensor k(coils.maps.shape());
  for (std::size_t c = 0; c < coils.ncoil(); ++c) {
    for (std::size_t p = 0; p < plane; ++p) k.set(c * plane + p, coils.maps.at(c * plane + p) * z.at(p));
  }
  return fft2(std::move(k));
}

/// sum_i conj(C_i) * ifft2(k_i): adjoint of to_kspace.
inline ComplexTensor from_kspace(const ComplexTensor& k, const CoilSensitivities& coils) {
  coils.require_kspace(k, "from_kspace");
  const ComplexTensor img = ifft2(k);
  const std::size_t plane = coils.height() * coils.width();
  ComplexTensor out({coils.height(), coils.width()});
  for (std::size_t c = 0; c < coils.ncoil(); ++c) {
    for (std::size_t p = 0; p < plane; ++p) {
      out.set(p, out.at(p) + std::conj(coils.maps.at(c * plane + p)) * img.at(c * plane + p));
    }
  }
  return out;
}

/// Zeros every coil's k-space outside `mask`.
inline void apply_mask_inplace(ComplexTensor& k, const MaskGrid& mask) {
  const auto& s = k.shape();
  mask.require_shape(s[s.size() - 2], s[s.size() - 1], "mask");
  const std::size_t plane = mask.size();
  for (std::size_t i = 0; i < k.size(); ++i) {
    if (!mask.cells[i % plane]) {
      k.re()[i] = 0.0;
      k.im()[i] = 0.0;
    }
  }
}

/// A = S F C with centered orthonormal FFT. Coil maps are shared between copies.
class EncodingOperator {
 public:
  EncodingOperator(CoilSensitivities coils, MaskGrid mask)
      : coils_(std::make_shared<const CoilSensitivities>(std::move(coils))), mask_(std::move(mask)) {
    mask_.require_shape(coils_->height(), coils_->width(), "EncodingOperator");
  }

  EncodingOperator(std::shared_ptr<const CoilSensitivities> coils, MaskGrid mask)
      : coils_(std::move(coils)), mask_(std::move(mask)) {
    mask_.require_shape(coils_->height(), coils_->width(), "EncodingOperator");
  }

  const CoilSensitivities& coils() const { return *coils_; }
  const std::shared_ptr<const CoilSensitivities>& shared_coils() const { return coils_; }
  const MaskGrid& mask() const { return mask_; }
  EncodingOperator with_mask(MaskGrid mask) const { return EncodingOperator(coils_, std::move(mask)); }

  ComplexTensor forward(const ComplexTensor& x) const {
    ComplexTensor k = to_kspace(x, *coils_);
    apply_mask_inplace(k, mask_);
    return k;
  }

  ComplexTensor adjoint(const ComplexTensor& y) const {
    coils_->require_kspace(y, "adjoint");
    ComplexTensor k = y;
    apply_mask_inplace(k, mask_);
    return from_kspace(k, *coils_);
  }

  /// A^H A x
  ComplexTensor normal(const ComplexTensor& x) const { return adjoint(forward(x)); }

 private:
  std::shared_ptr<const CoilSensitivities> coils_;
  MaskGrid mask_;
};

inline ComplexTensor encode(const EncodingOperator& op, const ComplexTensor& x) { return op.forward(x); }
inline ComplexTensor adjoint(const EncodingOperator& op, const ComplexTensor& y) { return op.adjoint(y); }

struct CgOptions {
  double tol = 1e-6;
  int max_iter = 15;

  /// Bounded-cost profile used inside the unrolled network.
  static CgOptions network() { return {1e-6, 15}; }
  /// High-accuracy profile for baselines and oracles.
  static CgOptions accurate() { return {1e-10, 200}; }
};

struct CgResult {
  ComplexTensor x;
  int iterations = 0;
  double residual = 0.0;                 // final ||apply(x) - rhs|| / ||rhs||
  std::vector<double> residual_history;  // relative residual after each iteration, index 0 = start
};

using LinearMap = std::function<ComplexTensor(const ComplexTensor&)>;

/// Conjugate-residual iteration (the CG variant that minimizes ||r|| over the
/// Krylov space) for a Hermitian positive-definite `apply`, started from zero.
/// The residual norm is non-increasing by construction.
inline CgResult cg_solve(const LinearMap& apply, const ComplexTensor& rhs, CgOptions opts) {
  if (!(opts.tol > 0.0)) throw ConfigError("cg_solve: tol must be positive");
  if (!all_finite(rhs)) throw NumericalBreakdown("cg_solve: right-hand side contains non-finite values");
  CgResult res;
  res.x = ComplexTensor(rhs.shape());
  const double bnorm = norm(rhs);
  res.residual_history.push_back(bnorm > 0.0 ? 1.0 : 0.0);
  if (bnorm == 0.0) return res;

  ComplexTensor r = rhs;
  ComplexTensor ar = apply(r);
  ComplexTensor p = r;
  ComplexTensor ap = ar;
  double rar = inner(r, ar).real();
  for (int it = 1; it <= opts.max_iter; ++it) {
    const double apap = inner(ap, ap).real();
    if (!std::isfinite(rar) || !std::isfinite(apap) || rar <= 0.0 || apap <= 0.0) {
      throw NumericalBreakdown("cg_solve: operator not positive definite or non-finite (r^H A r = " + std::to_string(rar) +
                               ") at iteration " + std::to_string(it));
    }
    const double alpha = rar / apap;
    res.x.axpy(alpha, p);
    r.axpy(-alpha, ap);
    const double rnorm = norm(r);
    if (!std::isfinite(rnorm)) throw NumericalBreakdown("cg_solve: non-finite residual at iteration " + std::to_string(it));
    res.iterations = it;
    res.residual = rnorm / bnorm;
    res.residual_history.push_back(res.residual);
    if (res.residual <= opts.tol) break;
    ar = apply(r);
    const double rar_new = inner(r, ar).real();
    const double beta = rar_new / rar;
    rar = rar_new;
    // p = r + beta p, Ap = Ar + beta Ap
    p *= beta;
    p += r;
    ap *= beta;
    ap += ar;
  }
  return res;
}

/// Normal operator of the DC subproblem: (A^H A + lambda I).
inline LinearMap dc_system(const EncodingOperator& op, double lambda) {
  return [&op, lambda](const ComplexTensor& v) {
    ComplexTensor out = op.normal(v);
    out.axpy(lambda, v);
    return out;
  };
}

/// Solves (A^H A + lambda I) x = A^H y + lambda z.
inline CgResult dc_solve(const EncodingOperator& op, const ComplexTensor& y, const ComplexTensor& z, double lambda,
                         CgOptions opts = CgOptions::network()) {
  if (!(lambda > 0.0)) throw ConfigError("dc_layer: lambda must be positive, got " + std::to_string(lambda));
  op.coils().require_image(z, "dc_layer");
  ComplexTensor rhs = op.adjoint(y);
  rhs.axpy(lambda, z);
  return cg_solve(dc_system(op, lambda), rhs, opts);
}

// ---------------------------------------------------------------------------
// Differentiable wrappers. Complex images travel on the tape as [2,H,W]
// tensors; coil k-space as [2,ncoil,H,W].

/// Data-consistency layer. Backward solves the same Hermitian system against the
/// incoming gradient v = M^-1 g, giving dL/dz = lambda v and dL/dlambda = Re<v, z - x>.
inline ndgrad::Var dc_layer(const EncodingOperator& op, const ComplexTensor& y, ndgrad::Var z, ndgrad::Var lambda,
                            CgOptions opts = CgOptions::network(), CgResult* info = nullptr) {
  const double lam = lambda.value().item();
  CgResult fwd = dc_solve(op, y, ComplexTensor::from_tensor(z.value()), lam, opts);
  Tensor out = fwd.x.to_tensor();
  if (info) *info = std::move(fwd);
  return z.tape()->record("dc_layer", std::move(out), {z, lambda}, [op, opts, lam](const ndgrad::BackwardContext& c) {
    const ComplexTensor g = ComplexTensor::from_tensor(c.grad_out);
    const CgResult back = cg_solve(dc_system(op, lam), g, opts);
    std::vector<Tensor> grads(2);
    if (c.needs[0]) {
      ComplexTensor gz = back.x;
      gz *= lam;
      grads[0] = gz.to_tensor();
    }
    if (c.needs[1]) {
      const ComplexTensor zc = ComplexTensor::from_tensor(*c.inputs[0]);
      const ComplexTensor xc = ComplexTensor::from_tensor(c.output);
      grads[1] = Tensor::scalar(inner(back.x, zc - xc).real());
    }
    return grads;
  });
}

inline ndgrad::Var to_kspace(ndgrad::Var z, std::shared_ptr<const CoilSensitivities> coils) {
  Tensor out = to_kspace(ComplexTensor::from_tensor(z.value()), *coils).to_tensor();
  return z.tape()->record("to_kspace", std::move(out), {z}, [coils](const ndgrad::BackwardContext& c) {
    return std::vector<Tensor>{from_kspace(ComplexTensor::from_tensor(c.grad_out), *coils).to_tensor()};
  });
}

inline ndgrad::Var from_kspace(ndgrad::Var k, std::shared_ptr<const CoilSensitivities> coils) {
  Tensor out = from_kspace(ComplexTensor::from_tensor(k.value()), *coils).to_tensor();
  return k.tape()->record("from_kspace", std::move(out), {k}, [coils](const ndgrad::BackwardContext& c) {
    return std::vector<Tensor>{to_kspace(ComplexTensor::from_tensor(c.grad_out), *coils).to_tensor()};
  });
}

/// A^H A v on the tape (self-adjoint, so backward applies the same map).
inline ndgrad::Var normal_op(const EncodingOperator& op, ndgrad::Var v) {
  Tensor out = op.normal(ComplexTensor::from_tensor(v.value())).to_tensor();
  return v.tape()->record("normal_op", std::move(out), {v}, [op](const ndgrad::BackwardContext& c) {
    return std::vector<Tensor>{op.normal(ComplexTensor::from_tensor(c.grad_out)).to_tensor()};
  });
}

/// Constant 0/1 tensor that repeats `mask` over every leading plane of `shape`.
inline Tensor mask_tensor(const MaskGrid& mask, const Shape& shape) {
  Tensor t(shape);
  const std::size_t plane = mask.size();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = mask.cells[i % plane] ? 1.0 : 0.0;
  return t;
}

}  // namespace k2recon
