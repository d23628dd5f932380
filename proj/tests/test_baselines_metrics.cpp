#include <gtest/gtest.h>

#include <random>

#include "k2recon/baselines.hpp"
#include "k2recon/metrics.hpp"
#include "k2recon/phantom.hpp"
#include "k2recon/sampling.hpp"
#include "oracles.hpp"

namespace k2recon {
namespace {

using testing::random_complex;

ComplexTensor add_noise(ComplexTensor x, double sigma, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sigma);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x.re()[i] += n(rng);
    x.im()[i] += n(rng);
  }
  return x;
}

ComplexTensor rotate(ComplexTensor x, double phase) {
  for (std::size_t i = 0; i < x.size(); ++i) x.set(i, x.at(i) * std::polar(1.0, phase));
  return x;
}

TEST(Psnr, TwentyDecibels) {
  // Peak 1, every magnitude off by 0.1: MSE = 0.01.
  ComplexTensor ref({4, 4}), x({4, 4});
  for (std::size_t i = 0; i < ref.size(); ++i) {
    ref.set(i, 0.5);
    x.set(i, 0.6);
  }
  ref.set(0, 1.0);
  x.set(0, 0.9);
  EXPECT_NEAR(psnr(x, ref), 10.0 * std::log10(1.0 / 0.01), 1e-10);
  EXPECT_NEAR(psnr(x, ref), 20.0, 1e-10);
}

TEST(Psnr, ExactMatchIsInfinite) {
  const auto p = make_phantom(32, 32, PhantomKind::shepp_logan, 0);
  EXPECT_TRUE(std::isinf(psnr(p, p)));
  EXPECT_GT(psnr(p, p), 0.0);
}

TEST(Psnr, MoreNoiseLowerPsnr) {
  const auto p = make_phantom(64, 64, PhantomKind::shepp_logan, 0);
  EXPECT_GT(psnr(add_noise(p, 0.01, 1), p), psnr(add_noise(p, 0.02, 1), p));
}

TEST(Ssim, IdentityAndSymmetry) {
  const auto p = make_phantom(64, 64, PhantomKind::shepp_logan, 0);
  EXPECT_NEAR(ssim(p, p), 1.0, 1e-12);
  const auto q = add_noise(p, 0.05, 3);
  EXPECT_NEAR(ssim(q, p), ssim(p, q), 1e-12);
  const double s = ssim(q, p);
  EXPECT_GE(s, -1.0);
  EXPECT_LE(s, 1.0);
  EXPECT_THROW(ssim(ComplexTensor({8, 8}), ComplexTensor({8, 8})), ConfigError);
}

/// SSIM of an all-zero image, written out from the per-window formula with
/// mu_x = var_x = cov = 0: c1 c2 / ((mu_r^2 + c1)(var_r + c2)).
double ssim_of_zero_oracle(const ComplexTensor& ref) {
  const std::size_t h = ref.shape()[0], w = ref.shape()[1];
  auto m = magnitude(ref);
  const double peak = *std::max_element(m.begin(), m.end());
  double g[11], gs = 0.0;
  for (int i = 0; i < 11; ++i) gs += g[i] = std::exp(-(i - 5.0) * (i - 5.0) / 4.5);
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0.0;
  int count = 0;
  for (std::size_t y = 0; y + 11 <= h; ++y) {
    for (std::size_t x = 0; x + 11 <= w; ++x) {
      double mu = 0.0, sq = 0.0;
      for (int i = 0; i < 11; ++i) {
        for (int j = 0; j < 11; ++j) {
          const double v = m[(y + i) * w + x + j] / peak, wt = g[i] * g[j] / (gs * gs);
          mu += wt * v;
          sq += wt * v * v;
        }
      }
      total += c1 * c2 / ((mu * mu + c1) * (sq - mu * mu + c2));
      ++count;
    }
  }
  return total / count;
}

TEST(Ssim, ZeroImage) {
  // Windows lying entirely in the zero background of a phantom score 1, so the
  // mean stays well above 0 there (0.147 for this phantom).
  const auto p = make_phantom(64, 64, PhantomKind::shepp_logan, 0);
  EXPECT_NEAR(ssim(ComplexTensor({64, 64}), p), ssim_of_zero_oracle(p), 1e-12);
  // Without empty background the zero image is near 0.
  ComplexTensor lifted = p;
  for (std::size_t i = 0; i < lifted.size(); ++i) lifted.set(i, lifted.at(i) + 0.5);
  EXPECT_LT(ssim(ComplexTensor({64, 64}), lifted), 0.05);
}

TEST(Metrics, GlobalPhaseInvariance) {
  const auto p = make_phantom(32, 32, PhantomKind::random_ellipses, 1);
  const auto q = add_noise(p, 0.03, 2);
  EXPECT_NEAR(psnr(rotate(q, 1.1), rotate(p, 1.1)), psnr(q, p), 1e-9);
  EXPECT_NEAR(ssim(rotate(q, 1.1), rotate(p, 1.1)), ssim(q, p), 1e-9);
}

TEST(CgSense, ExactInverseUnderFullSampling) {
  const auto gt = make_phantom(32, 32, PhantomKind::shepp_logan, 0);
  EncodingOperator op(make_coils(32, 32, 4, 1), MaskGrid::ones(32, 32));
  EXPECT_LT(max_abs_diff(cg_sense(op, op.forward(gt), 0.0), gt), 1e-8);
}

TEST(CgSense, LargeRegularizationShrinksToZero) {
  const auto gt = make_phantom(32, 32, PhantomKind::shepp_logan, 0);
  EncodingOperator op(make_coils(32, 32, 4, 1), make_mask(32, 32, 4.0, 4, MaskKind::random_1d, 0).grid);
  const auto y = op.forward(gt);
  double prev = norm(cg_sense(op, y, 1.0));
  for (double reg : {1e2, 1e4, 1e8}) {
    const double n = norm(cg_sense(op, y, reg));
    EXPECT_LT(n, prev);
    prev = n;
  }
  EXPECT_LT(prev, 1e-6 * norm(gt));
  EXPECT_THROW(cg_sense(op, y, -1.0), ConfigError);
}

struct Scene {
  ComplexTensor gt;
  EncodingOperator op;
  ComplexTensor y;
};

Scene scene(PhantomKind kind, double r, std::uint64_t seed) {
  auto gt = make_phantom(64, 64, kind, seed);
  auto coils = make_coils(64, 64, 4, seed);
  auto om = make_mask(64, 64, r, default_acs_lines(64, r), MaskKind::random_1d, seed);
  EncodingOperator op(coils, om.grid);
  ComplexTensor k = simulate_kspace(gt, coils, 0.002, seed);
  apply_mask_inplace(k, om.grid);
  return {gt, op, k};
}

TEST(CgSense, BeatsZeroFilledAtR4) {
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto sc = scene(PhantomKind::random_ellipses, 4.0, s);
    EXPECT_GT(psnr(cg_sense(sc.op, sc.y, 1e-3), sc.gt), psnr(zero_filled(sc.op, sc.y), sc.gt)) << s;
  }
}

TEST(Tv, ObjectiveNonIncreasing) {
  const auto sc = scene(PhantomKind::shepp_logan, 4.0, 1);
  const auto res = tv_reconstruct_traced(sc.op, sc.y, 0.01, 30);
  ASSERT_EQ(res.objective.size(), 31u);
  for (std::size_t i = 1; i < res.objective.size(); ++i) EXPECT_LE(res.objective[i], res.objective[i - 1]) << i;
  EXPECT_LT(res.objective.back(), res.objective.front());
}

TEST(Tv, SmallWeightApproachesLeastSquares) {
  const auto gt = make_phantom(32, 32, PhantomKind::shepp_logan, 0);
  EncodingOperator op(make_coils(32, 32, 4, 2), MaskGrid::ones(32, 32));
  const auto y = simulate_kspace(gt, op.coils(), 0.01, 3);
  const auto ls = cg_sense(op, y, 0.0);
  EXPECT_LT(max_abs_diff(tv_reconstruct(op, y, 1e-8, 20), ls), 1e-3);
}

TEST(Tv, BeatsZeroFilledOnPiecewiseConstantPhantom) {
  const auto sc = scene(PhantomKind::shepp_logan, 4.0, 2);
  EXPECT_GT(psnr(tv_reconstruct(sc.op, sc.y, 0.01, 50), sc.gt), psnr(zero_filled(sc.op, sc.y), sc.gt));
  EXPECT_THROW(tv_reconstruct(sc.op, sc.y, 0.0, 1), ConfigError);
}

TEST(TvOperators, GradientAdjointness) {
  std::mt19937_64 rng(4);
  const auto x = random_complex({7, 9}, rng);
  std::vector<double> g(4 * 63);
  std::normal_distribution<double> n;
  for (auto& v : g) v = n(rng);
  const auto dx = tv::gradient(x);
  double lhs = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) lhs += dx[i] * g[i];
  const double rhs = inner(x, tv::gradient_adjoint(g, 7, 9)).real();
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

}  // namespace
}  // namespace k2recon
