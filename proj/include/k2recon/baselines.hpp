#pragma once

// Conventional reconstructions that need no training: zero-filled adjoint,
// CG-SENSE and isotropic total variation.

#include <cmath>
#include <vector>

#include "k2recon/linops.hpp"

namespace k2recon {

inline ComplexTensor zero_filled(const EncodingOperator& op, const ComplexTensor& y) { return op.adjoint(y); }

/// Solves (A^H A + l2_reg I) x = A^H y with the high-accuracy CG profile.
inline ComplexTensor cg_sense(const EncodingOperator& op, const ComplexTensor& y, double l2_reg,
                              CgOptions opts = CgOptions::accurate()) {
  if (!(l2_reg >= 0.0)) throw ConfigError("cg_sense: l2_reg must be >= 0");
  auto apply = [&op, l2_reg](const ComplexTensor& v) {
    ComplexTensor out = op.normal(v);
    if (l2_reg > 0.0) out.axpy(l2_reg, v);
    return out;
  };
  return cg_solve(apply, op.adjoint(y), opts).x;
}

namespace tv {

/// Forward differences with zero flux at the far boundary. Output holds four
/// fields per pixel: (dx re, dx im, dy re, dy im), each as an [H,W] plane.
inline std::vector<double> gradient(const ComplexTensor& x) {
  const std::size_t h = x.shape()[0], w = x.shape()[1], n = h * w;
  std::vector<double> g(4 * n, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = y * w + c;
      if (c + 1 < w) {
        g[p] = x.re()[p + 1] - x.re()[p];
        g[n + p] = x.im()[p + 1] - x.im()[p];
      }
      if (y + 1 < h) {
        g[2 * n + p] = x.re()[p + w] - x.re()[p];
        g[3 * n + p] = x.im()[p + w] - x.im()[p];
      }
    }
  }
  return g;
}

/// Adjoint of gradient() (negative divergence).
inline ComplexTensor gradient_adjoint(const std::vector<double>& g, std::size_t h, std::size_t w) {
  const std::size_t n = h * w;
  ComplexTensor out({h, w});
  auto re = out.re();
  auto im = out.im();
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = y * w + c;
      if (c + 1 < w) {
        re[p] -= g[p];
        re[p + 1] += g[p];
        im[p] -= g[n + p];
        im[p + 1] += g[n + p];
      }
      if (y + 1 < h) {
        re[p] -= g[2 * n + p];
        re[p + w] += g[2 * n + p];
        im[p] -= g[3 * n + p];
        im[p + w] += g[3 * n + p];
      }
    }
  }
  return out;
}

/// Isotropic TV with real and imaginary channels coupled in one norm per pixel.
inline double total_variation(const ComplexTensor& x) {
  const auto g = gradient(x);
  const std::size_t n = x.size();
  double tv = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    tv += std::sqrt(g[p] * g[p] + g[n + p] * g[n + p] + g[2 * n + p] * g[2 * n + p] + g[3 * n + p] * g[3 * n + p]);
  }
  return tv;
}

/// prox of gamma*TV at v by the fast gradient projection on the dual; `dual`
/// carries the dual field between calls as a warm start.
inline ComplexTensor prox(const ComplexTensor& v, double gamma, std::vector<double>& dual, int iters) {
  const std::size_t h = v.shape()[0], w = v.shape()[1], n = h * w;
  if (dual.size() != 4 * n) dual.assign(4 * n, 0.0);
  if (gamma <= 0.0) return v;
  std::vector<double> p = dual, r = dual, p_prev;
  double t = 1.0;
  const double step = 1.0 / (8.0 * gamma);  // ||grad||^2 <= 8
  for (int it = 0; it < iters; ++it) {
    ComplexTensor u = v;
    u.axpy(-gamma, gradient_adjoint(r, h, w));
    const auto gu = gradient(u);
    p_prev = p;
    for (std::size_t q = 0; q < n; ++q) {
      double c[4];
      double nrm = 0.0;
      for (int k = 0; k < 4; ++k) {
        c[k] = r[k * n + q] + step * gu[k * n + q];
        nrm += c[k] * c[k];
      }
      nrm = std::max(1.0, std::sqrt(nrm));
      for (int k = 0; k < 4; ++k) p[k * n + q] = c[k] / nrm;
    }
    const double t_next = (1.0 + std::sqrt(1.0 + 4.0 * t * t)) / 2.0;
    for (std::size_t i = 0; i < p.size(); ++i) r[i] = p[i] + (t - 1.0) / t_next * (p[i] - p_prev[i]);
    t = t_next;
  }
  dual = p;
  ComplexTensor u = v;
  u.axpy(-gamma, gradient_adjoint(p, h, w));
  return u;
}

}  // namespace tv

struct TvResult {
  ComplexTensor x;
  std::vector<double> objective;  // objective[0] at the start, then one per iteration
};

inline double tv_objective(const EncodingOperator& op, const ComplexTensor& y, const ComplexTensor& x, double tv_weight) {
  ComplexTensor r = op.forward(x);
  r -= y;
  // Only sampled entries of y contribute; forward() already zeroes the rest of Ax.
  apply_mask_inplace(r, op.mask());
  const double dn = norm(r);
  return dn * dn + tv_weight * tv::total_variation(x);
}

/// Proximal gradient on ||Ax - y||^2 + tv_weight TV(x). Step 1/L with
/// L = 2||A||^2 <= 2 for normalized coils; a step is halved until the objective
/// does not increase (the TV prox is inexact), and rejected if that fails.
inline TvResult tv_reconstruct_traced(const EncodingOperator& op, const ComplexTensor& y, double tv_weight, int iters,
                                      int prox_iters = 40) {
  if (!(tv_weight > 0.0)) throw ConfigError("tv_reconstruct: tv_weight must be positive");
  TvResult res;
  res.x = op.adjoint(y);
  double f = tv_objective(op, y, res.x, tv_weight);
  res.objective.push_back(f);
  std::vector<double> dual;
  for (int it = 0; it < iters; ++it) {
    ComplexTensor resid = op.forward(res.x);
    resid -= y;
    const ComplexTensor grad = 2.0 * op.adjoint(resid);
    double step = 0.5;
    bool accepted = false;
    for (int bt = 0; bt < 8 && !accepted; ++bt, step *= 0.5) {
      ComplexTensor v = res.x;
      v.axpy(-step, grad);
      std::vector<double> trial_dual = dual;
      ComplexTensor cand = tv::prox(v, step * tv_weight, trial_dual, prox_iters);
      const double fc = tv_objective(op, y, cand, tv_weight);
      if (fc <= f) {
        res.x = std::move(cand);
        f = fc;
        dual = std::move(trial_dual);
        accepted = true;
      }
    }
    res.objective.push_back(f);
  }
  return res;
}

inline ComplexTensor tv_reconstruct(const EncodingOperator& op, const ComplexTensor& y, double tv_weight, int iters) {
  return tv_reconstruct_traced(op, y, tv_weight, iters).x;
}

}  // namespace k2recon
