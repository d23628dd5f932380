#pragma once

// MoDL-style unrolled reconstruction: a shared residual CNN denoiser alternating
// with data-consistency solves, with optional k-space calibration of the
// denoiser output in the first unroll steps during training.

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "k2recon/linops.hpp"
#include "k2recon/ndgrad.hpp"
#include "k2recon/rng.hpp"
#include "k2recon/sampling.hpp"

namespace k2recon {

struct ConvLayer {
  Tensor weight;  // [out, in, 3, 3]
  Tensor bias;    // [out]

  friend bool operator==(const ConvLayer&, const ConvLayer&) = default;
};

struct DenoiserParams {
  std::vector<ConvLayer> layers;
  /// One entry (shared lambda) or one per unroll step. lambda = softplus(raw).
  std::vector<double> raw_lambda;
  double leaky_slope = 0.01;

  static constexpr std::size_t kDefaultDepth = 9;
  static constexpr std::size_t kDefaultFeatures = 64;
  static constexpr double kInitialLambda = 0.05;

  static double raw_for_lambda(double lambda) { return std::log(std::expm1(lambda)); }

  /// Kaiming-uniform (fan-in) weights, zero biases, lambda = 0.05.
  static DenoiserParams init(std::uint64_t seed, std::size_t features = kDefaultFeatures, std::size_t depth = kDefaultDepth,
                             std::size_t lambda_count = 1, double leaky_slope = 0.01) {
    if (depth < 2) throw ConfigError("denoiser depth must be >= 2, got " + std::to_string(depth));
    if (features < 1) throw ConfigError("denoiser features must be >= 1");
    if (lambda_count < 1) throw ConfigError("lambda_count must be >= 1");
    DenoiserParams p;
    p.leaky_slope = leaky_slope;
    Rng rng = make_rng(seed);
    for (std::size_t l = 0; l < depth; ++l) {
      const std::size_t cin = l == 0 ? 2 : features;
      const std::size_t cout = l + 1 == depth ? 2 : features;
      const double fan_in = static_cast<double>(cin * 9);
      const double bound = std::sqrt(6.0 / fan_in);
      std::uniform_real_distribution<double> u(-bound, bound);
      ConvLayer layer{Tensor({cout, cin, 3, 3}), Tensor({cout})};
      for (double& w : layer.weight.data()) w = u(rng);
      p.layers.push_back(std::move(layer));
    }
    p.raw_lambda.assign(lambda_count, raw_for_lambda(kInitialLambda));
    return p;
  }

  std::size_t depth() const { return layers.size(); }
  std::size_t features() const { return layers.empty() ? 0 : layers.front().weight.shape()[0]; }

  double lambda(std::size_t step) const {
    return ndgrad::softplus_value(raw_lambda.at(raw_lambda.size() == 1 ? 0 : step));
  }

  /// Checks the layer chain: 2 -> F -> ... -> F -> 2, all 3x3.
  void validate() const {
    if (layers.size() < 2) throw ContractViolation("denoiser needs at least 2 layers");
    std::size_t cin = 2;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& ws = layers[l].weight.shape();
      if (ws.size() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3) {
        throw ContractViolation("denoiser layer " + std::to_string(l) + " has weight shape " + ndgrad::to_string(ws));
      }
      if (l + 1 == layers.size() && ws[0] != 2) throw ContractViolation("final denoiser layer must output 2 channels");
      if (layers[l].bias.shape() != Shape{ws[0]}) {
        throw ContractViolation("denoiser layer " + std::to_string(l) + " bias does not match output channels");
      }
      cin = ws[0];
    }
    if (raw_lambda.empty()) throw ContractViolation("denoiser has no lambda parameter");
  }

  /// Stable names for every trainable tensor, used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      out.emplace_back("conv" + std::to_string(l) + ".weight", layers[l].weight);
      out.emplace_back("conv" + std::to_string(l) + ".bias", layers[l].bias);
    }
    out.emplace_back("raw_lambda", Tensor({raw_lambda.size()}, raw_lambda));
    return out;
  }

  /// Inverse of named_tensors(); shapes must match.
  void assign_named(const std::vector<std::pair<std::string, Tensor>>& named) {
    auto expected = named_tensors();
    if (named.size() != expected.size()) throw ContractViolation("parameter count mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (named[i].first != expected[i].first || named[i].second.shape() != expected[i].second.shape()) {
        throw ContractViolation("parameter '" + named[i].first + "' does not match '" + expected[i].first + "'");
      }
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].weight = named[2 * l].second;
      layers[l].bias = named[2 * l + 1].second;
    }
    auto d = named.back().second.data();
    raw_lambda.assign(d.begin(), d.end());
  }

  friend bool operator==(const DenoiserParams&, const DenoiserParams&) = default;
};

/// Parameters bound to one tape. Every unroll step reads the same Vars.
struct DenoiserVars {
  std::vector<ndgrad::Var> weights;
  std::vector<ndgrad::Var> biases;
  ndgrad::Var raw_lambda;
  std::vector<ndgrad::Var> lambdas;  // softplus(raw_lambda) per entry
  double leaky_slope = 0.01;

  /// Parameters become requires_grad leaves when `trainable`, constants otherwise.
  static DenoiserVars bind(ndgrad::Tape& tape, const DenoiserParams& p, bool trainable) {
    p.validate();
    DenoiserVars v;
    v.leaky_slope = p.leaky_slope;
    auto leaf = [&](const Tensor& t) { return trainable ? tape.parameter(t) : tape.constant(t); };
    for (const auto& l : p.layers) {
      v.weights.push_back(leaf(l.weight));
      v.biases.push_back(leaf(l.bias));
    }
    v.raw_lambda = leaf(Tensor({p.raw_lambda.size()}, p.raw_lambda));
    if (p.raw_lambda.size() == 1) {
      v.lambdas.push_back(ndgrad::softplus(v.raw_lambda));
    } else {
      // Per-step lambdas: pick entry i with a one-hot dot product.
      ndgrad::Var all = ndgrad::softplus(v.raw_lambda);
      for (std::size_t i = 0; i < p.raw_lambda.size(); ++i) {
        Tensor onehot({p.raw_lambda.size()});
        onehot[i] = 1.0;
        v.lambdas.push_back(ndgrad::dot(all, tape.constant(std::move(onehot))));
      }
    }
    return v;
  }

  ndgrad::Var lambda(std::size_t step) const { return lambdas.size() == 1 ? lambdas[0] : lambdas.at(step); }

  /// Gradients in the same order as DenoiserParams::named_tensors(); zeros where
  /// a parameter did not influence the loss.
  std::vector<Tensor> collect(const ndgrad::Gradients& g) const {
    std::vector<Tensor> out;
    auto grab = [&](ndgrad::Var v) {
      out.push_back(g.contains(v) ? g[v] : Tensor(v.shape()));
    };
    for (std::size_t l = 0; l < weights.size(); ++l) {
      grab(weights[l]);
      grab(biases[l]);
    }
    grab(raw_lambda);
    return out;
  }
};

/// z = x - N_w(x): the CNN estimates the artifact/noise component.
inline ndgrad::Var denoise(const DenoiserVars& vars, ndgrad::Var x) {
  ndgrad::Var h = x;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    h = ndgrad::conv2d(h, vars.weights[l], vars.biases[l]);
    if (l + 1 < vars.weights.size()) h = ndgrad::leaky_relu(h, vars.leaky_slope);
  }
  return ndgrad::sub(x, h);
}

/// Convenience: evaluate the denoiser on a complex image without gradients.
inline ComplexTensor denoise(const DenoiserParams& params, const ComplexTensor& x) {
  ndgrad::Tape tape;
  auto vars = DenoiserVars::bind(tape, params, false);
  return ComplexTensor::from_tensor(denoise(vars, tape.constant(x.to_tensor())).value());
}

struct UnrollConfig {
  std::size_t depth = 5;  // K
  Mode mode = Mode::train;
  CalibrationSchedule schedule;
  CgOptions cg = CgOptions::network();
  bool keep_trace = false;

  void validate() const {
    if (depth < 1) throw ConfigError("unroll depth K must be >= 1");
    schedule.validate(depth);
    if (!(cg.tol > 0.0) || cg.max_iter < 1) throw ConfigError("invalid CG settings");
  }
};

struct StepTrace {
  std::size_t step = 0;
  bool calibrated = false;
  MaskGrid calibration_mask;  // empty unless calibrated
  int cg_iterations = 0;
  double cg_residual = 0.0;
};

struct UnrollResult {
  ndgrad::Var x;
  std::vector<StepTrace> trace;  // filled only with keep_trace
};

/// x0 = A^H y_in; for each step: z = denoise(x), optionally calibrate z in
/// k-space (training, step < enabled_steps), then x = DC(z). `op` must carry the
/// support of y_in (Theta while training, Omega at evaluation).
inline UnrollResult unrolled_forward(const DenoiserVars& vars, const UnrollConfig& cfg, const EncodingOperator& op,
                                     const ComplexTensor& y_in, Rng& batch_rng) {
  cfg.validate();
  if (vars.lambdas.size() != 1 && vars.lambdas.size() != cfg.depth) {
    throw ConfigError("per-step lambda count " + std::to_string(vars.lambdas.size()) + " does not match K=" +
                      std::to_string(cfg.depth));
  }
  ndgrad::Tape& tape = *vars.raw_lambda.tape();
  UnrollResult res;
  ndgrad::Var x = tape.constant(op.adjoint(y_in).to_tensor());
  for (std::size_t k = 0; k < cfg.depth; ++k) {
    StepTrace st;
    st.step = k;
    ndgrad::Var z = denoise(vars, x);
    if (cfg.schedule.active(k, cfg.mode)) {
      MaskGrid m = calib_mask(op.mask(), cfg.schedule, k, cfg.mode, batch_rng);
      z = apply_kspace_mask(z, m, op.shared_coils());
      st.calibrated = true;
      if (cfg.keep_trace) st.calibration_mask = std::move(m);
    }
    CgResult info;
    x = dc_layer(op, y_in, z, vars.lambda(k), cfg.cg, &info);
    st.cg_iterations = info.iterations;
    st.cg_residual = info.residual;
    if (cfg.keep_trace) res.trace.push_back(std::move(st));
  }
  res.x = x;
  return res;
}

/// Evaluation-mode reconstruction (calibration bypassed, no gradients kept).
inline ComplexTensor reconstruct(const DenoiserParams& params, UnrollConfig cfg, const EncodingOperator& op,
                                 const ComplexTensor& y) {
  cfg.mode = Mode::eval;
  cfg.keep_trace = false;
  ndgrad::Tape tape;
  auto vars = DenoiserVars::bind(tape, params, false);
  Rng unused = make_rng(0);
  return ComplexTensor::from_tensor(unrolled_forward(vars, cfg, op, y, unused).x.value());
}

struct NoiseEnergy {
  double sampled = 0.0;    // mean |error|^2 over theta locations, all coils
  double unsampled = 0.0;  // same over the complement
};

/// Splits the coil k-space energy of (x - reference) into sampled and unsampled parts.
inline NoiseEnergy noise_energy_report(const ComplexTensor& x, const ComplexTensor& reference, const MaskGrid& theta,
                                       const CoilSensitivities& coils) {
  const ComplexTensor k = to_kspace(x - reference, coils);
  theta.require_shape(coils.height(), coils.width(), "noise_energy_report");
  const std::size_t plane = theta.size();
  double es = 0.0, eu = 0.0;
  std::size_t ns = 0, nu = 0;
  for (std::size_t i = 0; i < k.size(); ++i) {
    const double e = std::norm(k.at(i));
    if (theta.cells[i % plane]) {
      es += e;
      ++ns;
    } else {
      eu += e;
      ++nu;
    }
  }
  return {ns ? es / static_cast<double>(ns) : 0.0, nu ? eu / static_cast<double>(nu) : 0.0};
}

}  // namespace k2recon
