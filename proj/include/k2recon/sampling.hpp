#pragma once

// Cartesian undersampling masks, the Theta/Lambda self-supervision split and the
// per-step Bernoulli calibration masks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "k2recon/linops.hpp"
#include "k2recon/mask_grid.hpp"
#include "k2recon/rng.hpp"

namespace k2recon {

enum class MaskKind { random_1d, uniform_1d };

inline const char* to_string(MaskKind k) { return k == MaskKind::random_1d ? "random-1d" : "uniform-1d"; }

inline MaskKind parse_mask_kind(const std::string& s) {
  if (s == "random-1d") return MaskKind::random_1d;
  if (s == "uniform-1d") return MaskKind::uniform_1d;
  throw ConfigError("unknown mask kind '" + s + "' (expected random-1d or uniform-1d)");
}

/// Acquired set Omega. Phase-encode lines are columns; each column is fully
/// sampled along the readout (rows) when selected.
struct SamplingMask {
  MaskGrid grid;
  double acceleration = 1.0;
  std::size_t acs_lines = 0;
  std::uint64_t seed = 0;
  MaskKind kind = MaskKind::random_1d;
};

/// First column of the centered ACS block.
inline std::size_t acs_begin(std::size_t width, std::size_t acs_lines) {
  return width / 2 - std::min(acs_lines, width) / 2;
}

/// Grid with only the central ACS columns set.
inline MaskGrid acs_grid(std::size_t height, std::size_t width, std::size_t acs_lines) {
  MaskGrid g(height, width);
  const std::size_t n = std::min(acs_lines, width);
  const std::size_t b = acs_begin(width, n);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = b; x < b + n; ++x) g.at(y, x) = 1;
  }
  return g;
}

/// Default ACS width: 24 lines at R <= 4 and 16 beyond for a 320-wide matrix,
/// scaled proportionally for other widths and capped by the line budget.
inline std::size_t default_acs_lines(std::size_t width, double acceleration) {
  const double base = acceleration <= 4.0 ? 24.0 : 16.0;
  const auto preferred =
      std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(base * static_cast<double>(width) / 320.0)));
  const auto budget = static_cast<std::size_t>(std::lround(static_cast<double>(width) / acceleration));
  // Keep at least half of the line budget for non-ACS lines.
  return std::min(preferred, std::max<std::size_t>(2, budget / 2));
}

inline SamplingMask make_mask(std::size_t height, std::size_t width, double acceleration, std::size_t acs_lines,
                              MaskKind kind, std::uint64_t seed) {
  if (!(acceleration >= 1.0)) throw ConfigError("make_mask: acceleration must be >= 1, got " + std::to_string(acceleration));
  if (height == 0 || width == 0) throw ConfigError("make_mask: empty grid");
  SamplingMask m{MaskGrid(height, width), acceleration, acs_lines, seed, kind};
  const auto budget = static_cast<std::size_t>(std::lround(static_cast<double>(width) / acceleration));
  if (acceleration == 1.0 || budget >= width) {
    m.grid = MaskGrid::ones(height, width);
    return m;
  }
  if (acs_lines > budget) {
    throw ConfigError("make_mask: infeasible budget, " + std::to_string(acs_lines) + " ACS lines exceed the " +
                      std::to_string(budget) + " lines allowed at R=" + std::to_string(acceleration));
  }
  std::vector<char> selected(width, 0);
  const std::size_t b = acs_begin(width, acs_lines);
  for (std::size_t x = b; x < b + acs_lines; ++x) selected[x] = 1;
  std::vector<std::size_t> candidates;
  for (std::size_t x = 0; x < width; ++x) {
    if (!selected[x]) candidates.push_back(x);
  }
  const std::size_t needed = budget - acs_lines;
  if (kind == MaskKind::random_1d) {
    Rng rng = make_rng(seed);
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < needed; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, candidates.size() - 1);
      std::swap(candidates[i], candidates[pick(rng)]);
      selected[candidates[i]] = 1;
    }
  } else {
    for (std::size_t j = 0; j < needed; ++j) {
      const auto idx = static_cast<std::size_t>((static_cast<double>(j) + 0.5) * static_cast<double>(candidates.size()) /
                                                static_cast<double>(needed));
      selected[candidates[std::min(idx, candidates.size() - 1)]] = 1;
    }
  }
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) m.grid.at(y, x) = selected[x];
  }
  return m;
}

/// Omega = Theta (network input and DC) + Lambda (loss target), disjoint.
struct SplitMasks {
  MaskGrid theta;
  MaskGrid lambda;
  double rho = 0.4;
  std::uint64_t seed = 0;
};

inline SplitMasks split_mask(const SamplingMask& omega, double rho, std::uint64_t seed) {
  if (!(rho > 0.0 && rho < 1.0)) throw ConfigError("split_mask: rho must be in (0,1), got " + std::to_string(rho));
  const MaskGrid& g = omega.grid;
  const MaskGrid acs = acs_grid(g.height, g.width, omega.acs_lines);
  SplitMasks s{MaskGrid(g.height, g.width), MaskGrid(g.height, g.width), rho, seed};
  Rng rng = make_rng(seed);
  std::bernoulli_distribution to_lambda(rho);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!g.cells[i]) continue;
    if (acs.cells[i]) {
      s.theta.cells[i] = 1;
    } else if (to_lambda(rng)) {
      s.lambda.cells[i] = 1;
    } else {
      s.theta.cells[i] = 1;
    }
  }
  return s;
}

enum class Mode { train, eval };

/// When and how strongly the denoiser output is recalibrated in k-space.
/// Steps 0..enabled_steps-1 of the unroll are calibrated; the rest pass through.
struct CalibrationSchedule {
  double keep_prob = 0.5;
  std::size_t enabled_steps = 0;
  bool resample_each_batch = true;
  std::uint64_t seed = 0;

  void validate(std::size_t unroll_depth) const {
    if (!(keep_prob >= 0.0 && keep_prob <= 1.0)) {
      throw ConfigError("calibration keep_prob must be in [0,1], got " + std::to_string(keep_prob));
    }
    if (enabled_steps > unroll_depth) {
      throw ConfigError("calibration enabled_steps (" + std::to_string(enabled_steps) + ") exceeds unroll depth " +
                        std::to_string(unroll_depth));
    }
  }

  bool active(std::size_t step, Mode mode) const { return mode == Mode::train && step < enabled_steps; }
};

/// Calibration mask for unroll step `step`. Disabled steps (and eval mode) get an
/// all-ones grid; enabled steps keep theta and each remaining location with
/// probability keep_prob. With resample_each_batch off, the draw depends only on
/// (schedule.seed, step) and `batch_rng` is left untouched.
inline MaskGrid calib_mask(const MaskGrid& theta, const CalibrationSchedule& schedule, std::size_t step, Mode mode,
                           Rng& batch_rng) {
  if (!schedule.active(step, mode)) return MaskGrid::ones(theta.height, theta.width);
  Rng fixed = make_rng(derive_seed(schedule.seed, step));
  Rng& rng = schedule.resample_each_batch ? batch_rng : fixed;
  std::bernoulli_distribution keep(schedule.keep_prob);
  MaskGrid out = theta;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!theta.cells[i]) out.cells[i] = keep(rng) ? 1 : 0;
  }
  return out;
}

/// from_kspace(mask * to_kspace(z)): zeroes the coil k-space of z outside `mask`.
inline ComplexTensor apply_kspace_mask(const ComplexTensor& z, const MaskGrid& mask, const CoilSensitivities& coils) {
  mask.require_shape(coils.height(), coils.width(), "apply_kspace_mask");
  ComplexTensor k = to_kspace(z, coils);
  apply_mask_inplace(k, mask);
  return from_kspace(k, coils);
}

/// Differentiable form; the mask is a constant.
inline ndgrad::Var apply_kspace_mask(ndgrad::Var z, const MaskGrid& mask, std::shared_ptr<const CoilSensitivities> coils) {
  mask.require_shape(coils->height(), coils->width(), "apply_kspace_mask");
  ndgrad::Var k = to_kspace(z, coils);
  ndgrad::Var m = k.tape()->constant(mask_tensor(mask, k.shape()));
  return from_kspace(ndgrad::mul(k, m), std::move(coils));
}

}  // namespace k2recon
