#include <gtest/gtest.h>

#include <random>

#include "k2recon/ndgrad.hpp"
#include "oracles.hpp"

namespace k2recon {
namespace {

using ndgrad::ReduceKind;
using ndgrad::Tape;
using ndgrad::Tensor;
using ndgrad::Var;
using testing::numeric_gradient;
using testing::random_tensor;
using testing::relative_error;

Tensor vec(std::vector<double> v) {
  const auto n = v.size();
  return Tensor({n}, std::move(v));
}

TEST(Tensor, RejectsInconsistentShape) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ContractViolation);
  EXPECT_THROW(Tensor({0, 3}), ContractViolation);
  EXPECT_EQ(Tensor({2, 3}).size(), 6u);
}

TEST(Elementwise, AddAndMul) {
  Tape t;
  Var a = t.constant(vec({1, 2}));
  Var b = t.constant(vec({3, 4}));
  EXPECT_EQ(ndgrad::add(a, b).value(), vec({4, 6}));

  Var x = t.parameter(vec({2, 3}));
  Var z = t.constant(vec({0, 0}));
  Var p = ndgrad::mul(x, z);
  EXPECT_EQ(p.value(), vec({0, 0}));
  auto g = t.backward(ndgrad::reduce(p, ReduceKind::sum));
  EXPECT_EQ(g[x], vec({0, 0}));
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.constant(Tensor({2}));
  Var b = t.constant(Tensor({3}));
  try {
    ndgrad::add(a, b);
    FAIL() << "expected ContractViolation";
  } catch (const ContractViolation& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("[2]"), std::string::npos);
    EXPECT_NE(msg.find("[3]"), std::string::npos);
  }
}

TEST(Elementwise, SquareGradientMatchesFiniteDifferences) {
  Tape t;
  Var a = t.parameter(vec({1, 2, 3}));
  auto g = t.backward(ndgrad::reduce(ndgrad::mul(a, a), ReduceKind::sum));
  // Frozen from central differences (step 1e-5) of sum(a*a) at [1,2,3].
  const Tensor fd = numeric_gradient(
      [](const Tensor& x) {
        double s = 0;
        for (double v : x.data()) s += v * v;
        return s;
      },
      vec({1, 2, 3}));
  EXPECT_LT(relative_error(g[a], fd), 1e-8);
  EXPECT_LT(relative_error(g[a], vec({2, 4, 6})), 1e-12);
}

TEST(LeakyRelu, Definition) {
  Tape t;
  Var x = t.parameter(vec({-1, 2}));
  Var y = ndgrad::leaky_relu(x, 0.1);
  EXPECT_DOUBLE_EQ(y.value()[0], -0.1);
  EXPECT_DOUBLE_EQ(y.value()[1], 2.0);
  EXPECT_EQ(ndgrad::leaky_relu(t.constant(Tensor({4})), 0.1).value(), Tensor({4}));

  Var w = t.parameter(vec({-3, 5}));
  auto g = t.backward(ndgrad::reduce(ndgrad::leaky_relu(w, 0.1), ReduceKind::sum));
  EXPECT_DOUBLE_EQ(g[w][0], 0.1);
  EXPECT_DOUBLE_EQ(g[w][1], 1.0);
}

TEST(Reduce, Norms) {
  Tape t;
  EXPECT_DOUBLE_EQ(ndgrad::reduce(t.constant(vec({3, -4})), ReduceKind::l1norm).value().item(), 7.0);
  EXPECT_DOUBLE_EQ(ndgrad::reduce(t.constant(vec({3, 4})), ReduceKind::l2norm).value().item(), 5.0);
  EXPECT_DOUBLE_EQ(ndgrad::reduce(t.constant(vec({3, 4})), ReduceKind::mean).value().item(), 3.5);

  Var a = t.parameter(vec({3, 4}));
  auto g = t.backward(ndgrad::reduce(a, ReduceKind::l2norm));
  const Tensor fd = numeric_gradient([](const Tensor& x) { return std::hypot(x[0], x[1]); }, vec({3, 4}));
  EXPECT_LT(relative_error(g[a], fd), 1e-8);
  EXPECT_NEAR(g[a][0], 0.6, 1e-12);
  EXPECT_NEAR(g[a][1], 0.8, 1e-12);
}

TEST(Reduce, L2NormAtZeroHasZeroGradient) {
  Tape t;
  Var a = t.parameter(Tensor({3}));
  auto g = t.backward(ndgrad::reduce(a, ReduceKind::l2norm));
  EXPECT_EQ(g[a], Tensor({3}));
}

TEST(Conv2d, OneByOneScales) {
  Tape t;
  Var in = t.constant(Tensor({1, 4, 5}, 1.0));
  Var w = t.constant(Tensor({1, 1, 1, 1}, 2.0));
  Var b = t.constant(Tensor({1}));
  EXPECT_EQ(ndgrad::conv2d(in, w, b).value(), Tensor({1, 4, 5}, 2.0));
}

TEST(Conv2d, IdentityKernel) {
  std::mt19937_64 rng(1);
  Tape t;
  Tensor x = random_tensor({1, 6, 7}, rng);
  Tensor k({1, 1, 3, 3});
  k[4] = 1.0;
  EXPECT_EQ(ndgrad::conv2d(t.constant(x), t.constant(k), t.constant(Tensor({1}))).value(), x);
}

TEST(Conv2d, ContractViolations) {
  Tape t;
  Var in = t.constant(Tensor({2, 4, 4}));
  EXPECT_THROW(ndgrad::conv2d(in, t.constant(Tensor({1, 3, 3, 3})), t.constant(Tensor({1}))), ContractViolation);
  EXPECT_THROW(ndgrad::conv2d(in, t.constant(Tensor({1, 2, 2, 2})), t.constant(Tensor({1}))), ContractViolation);
}

TEST(Conv2d, AllGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(7);
  const Tensor x0 = random_tensor({2, 8, 8}, rng);
  const Tensor w0 = random_tensor({4, 2, 3, 3}, rng);
  const Tensor b0 = random_tensor({4}, rng);
  const Tensor probe = random_tensor({4, 8, 8}, rng);
  // Loss = <probe, conv(x,w,b)>, evaluated with a fresh tape per call.
  auto loss = [&](const Tensor& x, const Tensor& w, const Tensor& b) {
    Tape t;
    return ndgrad::dot(ndgrad::conv2d(t.constant(x), t.constant(w), t.constant(b)), t.constant(probe)).value().item();
  };
  Tape t;
  Var x = t.parameter(x0), w = t.parameter(w0), b = t.parameter(b0);
  auto g = t.backward(ndgrad::dot(ndgrad::conv2d(x, w, b), t.constant(probe)));
  EXPECT_LT(relative_error(g[x], numeric_gradient([&](const Tensor& v) { return loss(v, w0, b0); }, x0)), 1e-4);
  EXPECT_LT(relative_error(g[w], numeric_gradient([&](const Tensor& v) { return loss(x0, v, b0); }, w0)), 1e-4);
  EXPECT_LT(relative_error(g[b], numeric_gradient([&](const Tensor& v) { return loss(x0, w0, v); }, b0)), 1e-4);
}

TEST(Backward, SumAndFanOut) {
  Tape t;
  Var a = t.parameter(Tensor({3}, 1.0));
  EXPECT_EQ(t.backward(ndgrad::reduce(a, ReduceKind::sum))[a], Tensor({3}, 1.0));

  Tape t2;
  Var c = t2.parameter(Tensor({4}, 1.0));
  Var d = ndgrad::add(c, c);
  EXPECT_EQ(t2.backward(ndgrad::reduce(d, ReduceKind::sum))[c], Tensor({4}, 2.0));
}

TEST(Backward, NonScalarLossRejected) {
  Tape t;
  Var a = t.parameter(Tensor({3}, 1.0));
  EXPECT_THROW(t.backward(a), ContractViolation);
}

TEST(Backward, ConstantsReceiveNoEntry) {
  Tape t;
  Var a = t.parameter(Tensor({2}, 1.0));
  Var c = t.constant(Tensor({2}, 3.0));
  auto g = t.backward(ndgrad::reduce(ndgrad::mul(a, c), ReduceKind::sum));
  EXPECT_TRUE(g.contains(a));
  EXPECT_FALSE(g.contains(c));
}

/// Three-layer random conv net; every parameter checked against finite differences.
TEST(Backward, ThreeLayerConvNet) {
  std::mt19937_64 rng(11);
  std::vector<Tensor> params{random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng), random_tensor({3, 3, 3, 3}, rng),
                             random_tensor({3}, rng),          random_tensor({2, 3, 3, 3}, rng), random_tensor({2}, rng)};
  const Tensor x0 = random_tensor({2, 6, 6}, rng);
  auto forward = [&](Tape& t, const std::vector<Var>& p) {
    Var h = t.constant(x0);
    for (int l = 0; l < 3; ++l) {
      h = ndgrad::conv2d(h, p[2 * l], p[2 * l + 1]);
      if (l < 2) h = ndgrad::leaky_relu(h, 0.01);
    }
    return ndgrad::reduce(ndgrad::mul(h, h), ReduceKind::sum);
  };
  Tape t;
  std::vector<Var> vars;
  for (const auto& p : params) vars.push_back(t.parameter(p));
  auto g = t.backward(forward(t, vars));
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto fd = numeric_gradient(
        [&](const Tensor& v) {
          Tape t2;
          std::vector<Var> pv;
          for (std::size_t j = 0; j < params.size(); ++j) pv.push_back(t2.constant(j == i ? v : params[j]));
          return forward(t2, pv).value().item();
        },
        params[i]);
    worst = std::max(worst, relative_error(g[vars[i]], fd));
  }
  EXPECT_LT(worst, 1e-4);
}

TEST(Properties, GradientCheckForEveryDifferentiableOp) {
  std::mt19937_64 rng(3);
  const Tensor a0 = random_tensor({5}, rng, 0.5, 1.5);
  const Tensor b0 = random_tensor({5}, rng, 0.5, 1.5);
  using Op = std::function<Var(Var, Var)>;
  const std::vector<std::pair<const char*, Op>> ops{
      {"add", [](Var a, Var b) { return ndgrad::add(a, b); }},
      {"sub", [](Var a, Var b) { return ndgrad::sub(a, b); }},
      {"mul", [](Var a, Var b) { return ndgrad::mul(a, b); }},
      {"div", [](Var a, Var b) { return ndgrad::div(a, b); }},
      {"scale", [](Var a, Var) { return ndgrad::scale(a, -2.5); }},
      {"softplus", [](Var a, Var) { return ndgrad::softplus(a); }},
      {"leaky", [](Var a, Var b) { return ndgrad::leaky_relu(ndgrad::sub(a, b), 0.2); }},
      {"mul_scalar", [](Var a, Var b) { return ndgrad::mul_scalar(a, ndgrad::reduce(b, ReduceKind::mean)); }},
      {"reshape", [](Var a, Var) { return ndgrad::reshape(a, {5, 1}); }},
  };
  const std::vector<ReduceKind> reductions{ReduceKind::sum, ReduceKind::mean, ReduceKind::l2norm, ReduceKind::l1norm};
  for (const auto& [name, op] : ops) {
    for (auto kind : reductions) {
      auto eval = [&](const Tensor& a, const Tensor& b) {
        Tape t;
        return ndgrad::reduce(op(t.constant(a), t.constant(b)), kind).value().item();
      };
      Tape t;
      Var a = t.parameter(a0), b = t.parameter(b0);
      auto g = t.backward(ndgrad::reduce(op(a, b), kind));
      const Tensor fa = numeric_gradient([&](const Tensor& v) { return eval(v, b0); }, a0);
      const Tensor fb = numeric_gradient([&](const Tensor& v) { return eval(a0, v); }, b0);
      const Tensor ga = g.contains(a) ? g[a] : Tensor(a0.shape());
      const Tensor gb = g.contains(b) ? g[b] : Tensor(b0.shape());
      EXPECT_LT(relative_error(ga, fa), 1e-4) << name;
      EXPECT_LT(relative_error(gb, fb), 1e-4) << name;
    }
  }
}

TEST(Properties, BackwardIsLinearInTheLoss) {
  std::mt19937_64 rng(5);
  const Tensor a0 = random_tensor({6}, rng);
  Tape t;
  Var a = t.parameter(a0);
  Var l1 = ndgrad::reduce(ndgrad::mul(a, a), ReduceKind::sum);
  Var l2 = ndgrad::reduce(ndgrad::softplus(a), ReduceKind::sum);
  auto g1 = t.backward(l1);
  auto g2 = t.backward(l2);
  auto g12 = t.backward(ndgrad::add(l1, l2));
  for (std::size_t i = 0; i < a0.size(); ++i) EXPECT_NEAR(g12[a][i], g1[a][i] + g2[a][i], 1e-14);
}

TEST(Properties, ReplayIsBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(9);
    Tape t;
    Var x = t.parameter(random_tensor({2, 5, 5}, rng));
    Var w = t.parameter(random_tensor({3, 2, 3, 3}, rng));
    Var b = t.parameter(random_tensor({3}, rng));
    Var y = ndgrad::leaky_relu(ndgrad::conv2d(x, w, b));
    Var loss = ndgrad::reduce(y, ReduceKind::l2norm);
    auto g = t.backward(loss);
    return std::make_tuple(loss.value(), g[x], g[w], g[b]);
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace k2recon
