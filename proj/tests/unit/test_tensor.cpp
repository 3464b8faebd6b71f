#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "apf/autodiff.hpp"
#include "apf/errors.hpp"
#include "apf/gradcheck.hpp"
#include "apf/gradcheck_suites.hpp"
#include "oracles.hpp"

namespace apf {
namespace {

TEST(Tensor, RejectsShapeMismatchAndNonFinite) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({0, 2}), DimensionError);
  EXPECT_THROW(Tensor::checked({2}, {1.0, std::nan("")}), NumericError);
  EXPECT_THROW(Tensor::checked({1}, {INFINITY}), NumericError);
  EXPECT_NO_THROW(Tensor::checked({2}, {1.0, -2.0}));
}

TEST(Tensor, MatmulFixtures) {
  const Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  const Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  EXPECT_EQ(matmul(eye, eye), eye);
  EXPECT_EQ(matmul(a, eye), a);
  EXPECT_EQ(matmul(a, Tensor::matrix({{5}, {6}})), Tensor::matrix({{17}, {39}}));
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Tensor, MatmulAssociativity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = oracle::random_tensor({4, 4}, rng), b = oracle::random_tensor({4, 4}, rng);
    const Tensor c = oracle::random_tensor({4, 4}, rng), d = oracle::random_tensor({4, 4}, rng);
    const Tensor left = matmul(matmul(matmul(a, b), c), d);
    const Tensor right = matmul(a, matmul(b, matmul(c, d)));
    for (std::size_t i = 0; i < left.size(); ++i) EXPECT_NEAR(left[i], right[i], 1e-9);
  }
}

TEST(Softmax, Fixtures) {
  const Tensor a = softmax_lastdim(Tensor::vector({0, 0, 0}));
  for (double v : a.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
  const Tensor b = softmax_lastdim(Tensor::vector({1000, 1000}));
  EXPECT_DOUBLE_EQ(b[0], 0.5);
  EXPECT_DOUBLE_EQ(b[1], 0.5);
  const Tensor c = softmax_lastdim(Tensor::vector({0, std::log(3.0)}));
  EXPECT_NEAR(c[0], 0.25, 1e-15);
  EXPECT_NEAR(c[1], 0.75, 1e-15);
}

TEST(Softmax, RowsSumToOneAndMaskedEntriesAreZero) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor x = oracle::random_tensor({5, 7}, rng, -20.0, 20.0);
    std::vector<std::uint8_t> keep(x.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = (i % 7 == 3) || (rng() % 2 == 0);
    const Tensor y = softmax_lastdim(x, keep);
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) {
        if (!keep[r * 7 + c]) EXPECT_EQ(y.at(r, c), 0.0);
        total += y.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, FullyMaskedRowIsAnError) {
  const std::vector<std::uint8_t> keep = {1, 1, 0, 0};
  EXPECT_THROW(softmax_lastdim(Tensor({2, 2}, 1.0), keep), ContractError);
}

TEST(LayerNorm, Fixtures) {
  Graph g;
  Var gamma = g.constant(Tensor({2}, 1.0)), beta = g.constant(Tensor({2}, 0.0));
  const Tensor constant = layer_norm(g.constant(Tensor({1, 2}, 4.0)), gamma, beta).value();
  EXPECT_EQ(constant[0], 0.0);
  EXPECT_EQ(constant[1], 0.0);
  const Tensor pair = layer_norm(g.constant(Tensor::matrix({{1, 3}})), gamma, beta, 1e-15).value();
  EXPECT_NEAR(pair[0], -1.0, 1e-12);
  EXPECT_NEAR(pair[1], 1.0, 1e-12);
  const Tensor over = layer_norm(g.constant(Tensor::matrix({{1, 3}, {-2, 7}})), g.constant(Tensor({2}, 0.0)),
                                 g.constant(Tensor({2}, 5.0)))
                          .value();
  for (double v : over.data()) EXPECT_EQ(v, 5.0);
}

TEST(LayerNorm, NormalizesEachRow) {
  std::mt19937_64 rng(5);
  Graph g;
  const Tensor x = oracle::random_tensor({6, 16}, rng, -3.0, 3.0);
  const Tensor y = layer_norm(g.constant(x), g.constant(Tensor({16}, 1.0)), g.constant(Tensor({16}, 0.0))).value();
  for (std::size_t r = 0; r < 6; ++r) {
    double mean = 0.0, var_in = 0.0, mean_in = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean_in += x.at(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) var_in += (x.at(r, c) - mean_in) * (x.at(r, c) - mean_in) / 16.0;
    ASSERT_GE(var_in, 0.1);
    double var = 0.0;
    for (std::size_t c = 0; c < 16; ++c) mean += y.at(r, c) / 16.0;
    for (std::size_t c = 0; c < 16; ++c) var += (y.at(r, c) - mean) * (y.at(r, c) - mean) / 16.0;
    EXPECT_LT(std::abs(mean), 1e-10);
    // eps inside the square root scales the variance by var/(var+eps) exactly.
    EXPECT_NEAR(var, var_in / (var_in + 1e-5), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-5 / var_in);
  }
}

TEST(Activation, GeluFixtures) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(30.0), 30.0, 1e-12);
  EXPECT_NEAR(gelu(1.0), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
  EXPECT_NEAR(gelu(1.0), 0.8413, 1e-4);
}

TEST(Backward, SumAndQuadraticGradients) {
  ParameterSet params;
  Parameter& p = params.add("p", Tensor::matrix({{1, -2, 3}, {0.5, 4, -1}}));
  {
    Graph g;
    g.backward(sum(g.param(p)));
  }
  for (double v : p.grad.data()) EXPECT_EQ(v, 1.0);
  params.zero_grad();
  {
    Graph g;
    Var x = g.param(p);
    g.backward(sum(mul(x, x)));
  }
  for (std::size_t i = 0; i < p.value.size(); ++i) EXPECT_EQ(p.grad[i], 2.0 * p.value[i]);
  EXPECT_EQ(p.grad.shape(), p.value.shape());
}

TEST(Backward, RepeatedCallsAccumulate) {
  ParameterSet params;
  Parameter& p = params.add("p", Tensor::vector({1, 2}));
  for (int i = 0; i < 3; ++i) {
    Graph g;
    g.backward(sum(scale(g.param(p), 2.0)));
  }
  EXPECT_EQ(p.grad[0], 6.0);
  EXPECT_EQ(p.grad[1], 6.0);
}

TEST(Backward, NonScalarLossIsAContractError) {
  ParameterSet params;
  Parameter& p = params.add("p", Tensor::vector({1, 2}));
  Graph g;
  EXPECT_THROW(g.backward(g.param(p)), ContractError);
}

TEST(FiniteDiff, Fixtures) {
  const Tensor p = Tensor::vector({1, 2});
  const Tensor ones = finite_diff_grad([](const Tensor& t) { return t[0] + t[1]; }, p);
  EXPECT_NEAR(ones[0], 1.0, 1e-9);
  EXPECT_NEAR(ones[1], 1.0, 1e-9);
  const Tensor sq = finite_diff_grad([](const Tensor& t) { return t[0] * t[0] + t[1] * t[1]; }, p);
  EXPECT_NEAR(sq[0], 2.0, 1e-8);
  EXPECT_NEAR(sq[1], 4.0, 1e-8);
  EXPECT_THROW(finite_diff_grad([](const Tensor&) { return 0.0; }, p, 0.0), ContractError);
}

TEST(FiniteDiff, SoftmaxCrossEntropyMatchesAnalytic) {
  // d/dz of -log softmax(z)[y] is softmax(z) - onehot(y).
  const Tensor z = Tensor::vector({0.3, -1.2, 2.0, 0.7});
  const std::size_t y = 2;
  auto f = [&](const Tensor& t) { return -std::log(softmax_lastdim(t)[y]); };
  const Tensor numeric = finite_diff_grad(f, z);
  Tensor analytic = softmax_lastdim(z);
  analytic[y] -= 1.0;
  EXPECT_LT(max_relative_error(analytic, numeric), 1e-4);
}

TEST(GradCheck, SuiteCoversEveryOpOverTwentySeeds) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    GradSuiteOptions options;
    options.seed = seed;
    for (const GradCheckResult& r : run_gradcheck_suite("tensor-core", options)) {
      EXPECT_TRUE(r.passed) << r.name << " seed " << seed << " rel err " << r.max_rel_error;
    }
  }
}

TEST(GradCheck, DetectsInjectedSignFlip) {
  set_gradient_fault("matmul");
  bool caught = false;
  for (const GradCheckResult& r : run_gradcheck_suite("tensor-core")) {
    if (r.name == "tensor-core/matmul") caught = !r.passed;
  }
  set_gradient_fault("");
  EXPECT_TRUE(caught);
}

}  // namespace
}  // namespace apf
