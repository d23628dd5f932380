#include <gtest/gtest.h>

#include <random>

#include "k2recon/phantom.hpp"
#include "k2recon/unrolled.hpp"
#include "oracles.hpp"

namespace k2recon {
namespace {

using testing::numeric_gradient;
using testing::random_complex;
using testing::random_mask;
using testing::relative_error;

DenoiserParams zero_params(std::size_t features = 4, std::size_t depth = 3) {
  auto p = DenoiserParams::init(0, features, depth);
  for (auto& l : p.layers) {
    l.weight = Tensor(l.weight.shape());
    l.bias = Tensor(l.bias.shape());
  }
  return p;
}

TEST(DenoiserParams, DefaultLayout) {
  const auto p = DenoiserParams::init(1);
  ASSERT_EQ(p.depth(), 9u);
  for (std::size_t l = 0; l < 9; ++l) {
    const auto& s = p.layers[l].weight.shape();
    EXPECT_EQ(s[0], l == 8 ? 2u : 64u);
    EXPECT_EQ(s[1], l == 0 ? 2u : 64u);
    EXPECT_EQ(s[2], 3u);
    EXPECT_EQ(s[3], 3u);
  }
  EXPECT_NEAR(p.lambda(0), 0.05, 1e-15);
  // Kaiming-uniform bound sqrt(6 / fan_in) for the first layer (fan_in = 18).
  const double bound = std::sqrt(6.0 / 18.0);
  for (double w : p.layers[0].weight.data()) EXPECT_LE(std::abs(w), bound);
  EXPECT_EQ(DenoiserParams::init(1), p);
}

TEST(Denoise, ZeroWeightsAreIdentity) {
  std::mt19937_64 rng(1);
  const ComplexTensor x = random_complex({9, 7}, rng);
  EXPECT_EQ(denoise(zero_params(), x), x);
}

TEST(Denoise, ShapePreserved) {
  std::mt19937_64 rng(2);
  const auto p = DenoiserParams::init(3, 4, 3);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{3, 3}, {5, 11}, {16, 8}}) {
    EXPECT_EQ(denoise(p, random_complex({h, w}, rng)).shape(), (Shape{h, w}));
  }
}

TEST(Denoise, FirstLayerGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  const auto p = DenoiserParams::init(4, 8, 4);
  const Tensor x = random_complex({8, 8}, rng).to_tensor();
  auto loss = [&](const Tensor& w0) {
    auto q = p;
    q.layers[0].weight = w0;
    const ComplexTensor z = denoise(q, ComplexTensor::from_tensor(x));
    return inner(z, z).real();
  };
  ndgrad::Tape t;
  auto vars = DenoiserVars::bind(t, p, true);
  ndgrad::Var z = denoise(vars, t.constant(x));
  auto g = t.backward(ndgrad::dot(z, z));
  EXPECT_LT(relative_error(g[vars.weights[0]], numeric_gradient(loss, p.layers[0].weight)), 1e-4);
}

TEST(Unrolled, SingleStepClosedForm) {
  std::mt19937_64 rng(4);
  EncodingOperator op(CoilSensitivities::uniform(8, 8), MaskGrid::ones(8, 8));
  const ComplexTensor y = random_complex({1, 8, 8}, rng);
  auto p = zero_params();
  p.raw_lambda = {DenoiserParams::raw_for_lambda(1.0)};
  UnrollConfig cfg;
  cfg.depth = 1;
  cfg.cg = CgOptions::accurate();
  const ComplexTensor x = reconstruct(p, cfg, op, y);
  EXPECT_LT(max_abs_diff(x, ifft2(y.slice(0))), 1e-10);
}

TEST(Unrolled, SmallLambdaGivesAdjoint) {
  std::mt19937_64 rng(5);
  EncodingOperator op(make_coils(8, 8, 3, 2), MaskGrid::ones(8, 8));
  const ComplexTensor gt = random_complex({8, 8}, rng);
  const ComplexTensor y = op.forward(gt);
  auto p = DenoiserParams::init(6, 4, 3);
  UnrollConfig cfg;
  cfg.depth = 3;
  cfg.cg = CgOptions::accurate();
  double prev = 1e300;
  for (double lam : {1e-2, 1e-4, 1e-6}) {
    p.raw_lambda = {DenoiserParams::raw_for_lambda(lam)};
    const double err = norm(reconstruct(p, cfg, op, y) - op.adjoint(y));
    EXPECT_LT(err, prev);
    prev = err;
  }
  EXPECT_LT(prev / norm(gt), 1e-5);
}

struct Problem {
  EncodingOperator op;
  ComplexTensor y;
};

Problem make_problem(std::uint64_t seed, std::size_t n = 8, std::size_t ncoil = 2) {
  std::mt19937_64 rng(seed);
  const MaskGrid theta = make_mask(n, n, 2.0, 2, MaskKind::random_1d, seed).grid;
  EncodingOperator op(make_coils(n, n, ncoil, seed), theta);
  return {op, op.forward(random_complex({n, n}, rng))};
}

ComplexTensor run(const DenoiserParams& p, const UnrollConfig& cfg, const Problem& pb, std::uint64_t rng_seed,
                  std::vector<StepTrace>* trace = nullptr) {
  ndgrad::Tape t;
  auto vars = DenoiserVars::bind(t, p, false);
  Rng rng = make_rng(rng_seed);
  auto res = unrolled_forward(vars, cfg, pb.op, pb.y, rng);
  if (trace) *trace = res.trace;
  return ComplexTensor::from_tensor(res.x.value());
}

TEST(Unrolled, EvalModeIgnoresSchedule) {
  const auto pb = make_problem(7);
  const auto p = DenoiserParams::init(7, 4, 3);
  UnrollConfig cfg;
  cfg.depth = 4;
  cfg.mode = Mode::eval;
  cfg.schedule = {0.5, 0, true, 1};
  const ComplexTensor a = run(p, cfg, pb, 1);
  cfg.schedule.enabled_steps = 4;
  EXPECT_EQ(run(p, cfg, pb, 2), a);
  // m = 0 makes train mode identical to eval mode.
  cfg.mode = Mode::train;
  cfg.schedule.enabled_steps = 0;
  EXPECT_EQ(run(p, cfg, pb, 3), a);
}

TEST(Unrolled, KeepAllCalibrationIsIdentity) {
  const auto pb = make_problem(8, 8, 1);
  const auto p = DenoiserParams::init(8, 4, 3);
  UnrollConfig cfg;
  cfg.depth = 3;
  cfg.cg = CgOptions::accurate();
  const ComplexTensor plain = run(p, cfg, pb, 1);
  cfg.schedule = {1.0, 3, true, 0};
  EXPECT_LT(max_abs_diff(run(p, cfg, pb, 1), plain), 1e-10);
  cfg.schedule.keep_prob = 0.5;
  EXPECT_GT(max_abs_diff(run(p, cfg, pb, 1), plain), 1e-6);
}

TEST(Unrolled, TraceShowsCalibrationOnlyInFirstSteps) {
  const auto pb = make_problem(9);
  const auto p = DenoiserParams::init(9, 4, 3);
  UnrollConfig cfg;
  cfg.depth = 5;
  cfg.keep_trace = true;
  cfg.schedule = {0.5, 2, true, 0};
  std::vector<StepTrace> trace;
  run(p, cfg, pb, 4, &trace);
  ASSERT_EQ(trace.size(), 5u);
  for (const auto& st : trace) {
    EXPECT_EQ(st.calibrated, st.step < 2);
    if (st.calibrated) EXPECT_TRUE(is_subset(pb.op.mask(), st.calibration_mask));
    EXPECT_GE(st.cg_iterations, 1);
  }
}

TEST(Unrolled, PerStepLambdaCountChecked) {
  const auto pb = make_problem(10);
  auto p = DenoiserParams::init(10, 4, 3, 3);
  UnrollConfig cfg;
  cfg.depth = 4;
  EXPECT_THROW(run(p, cfg, pb, 0), ConfigError);
  cfg.depth = 3;
  EXPECT_NO_THROW(run(p, cfg, pb, 0));
}

/// Loss sum |x_K|^2 against every parameter, K = 2, with calibration active
/// through fixed per-step masks so repeated forwards see the same masks.
void end_to_end_check(std::size_t lambda_count) {
  const auto pb = make_problem(11);
  auto p = DenoiserParams::init(11, 4, 3, lambda_count);
  for (std::size_t i = 0; i < p.raw_lambda.size(); ++i) p.raw_lambda[i] = DenoiserParams::raw_for_lambda(0.3 + 0.2 * i);
  UnrollConfig cfg;
  cfg.depth = 2;
  cfg.cg = CgOptions::accurate();
  cfg.schedule = {0.5, 1, false, 5};

  auto loss_of = [&](const DenoiserParams& q) {
    const ComplexTensor x = run(q, cfg, pb, 0);
    return inner(x, x).real();
  };
  ndgrad::Tape t;
  auto vars = DenoiserVars::bind(t, p, true);
  Rng rng = make_rng(0);
  ndgrad::Var x = unrolled_forward(vars, cfg, pb.op, pb.y, rng).x;
  const auto grads = vars.collect(t.backward(ndgrad::dot(x, x)));
  const auto named = p.named_tensors();
  ASSERT_EQ(grads.size(), named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto fd = numeric_gradient(
        [&](const Tensor& v) {
          auto q = p;
          auto nt = q.named_tensors();
          nt[i].second = v;
          q.assign_named(nt);
          return loss_of(q);
        },
        named[i].second);
    EXPECT_LT(relative_error(grads[i], fd), 1e-3) << named[i].first;
  }
}

TEST(Unrolled, EndToEndGradientSharedLambda) { end_to_end_check(1); }
TEST(Unrolled, EndToEndGradientPerStepLambda) { end_to_end_check(2); }

TEST(NoiseEnergy, Examples) {
  std::mt19937_64 rng(12);
  const auto coils = make_coils(32, 32, 4, 1);
  const ComplexTensor gt = make_phantom(32, 32, PhantomKind::shepp_logan, 1);
  const MaskGrid theta = make_mask(32, 32, 4.0, 4, MaskKind::random_1d, 3).grid;
  const auto zero = noise_energy_report(gt, gt, theta, coils);
  EXPECT_EQ(zero.sampled, 0.0);
  EXPECT_EQ(zero.unsampled, 0.0);

  // Error living only on unsampled coil k-space lines. Single coil keeps it
  // exactly confined after the image-domain round trip.
  const auto c1 = make_coils(32, 32, 1, 1);
  ComplexTensor k = random_complex({1, 32, 32}, rng);
  MaskGrid comp(32, 32);
  for (std::size_t i = 0; i < comp.size(); ++i) comp.cells[i] = !theta.cells[i];
  apply_mask_inplace(k, comp);
  const auto confined = noise_energy_report(gt + from_kspace(k, c1), gt, theta, c1);
  EXPECT_LT(confined.sampled, 1e-28);
  EXPECT_GT(confined.unsampled, 0.1);

  // DC output with exact data.
  EncodingOperator op(coils, theta);
  const ComplexTensor y = op.forward(gt);
  const ComplexTensor x = dc_solve(op, y, ComplexTensor({32, 32}), 0.05, CgOptions::network()).x;
  const auto e = noise_energy_report(x, gt, theta, coils);
  EXPECT_LT(e.sampled, e.unsampled);
}

}  // namespace
}  // namespace k2recon
