#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "apf/errors.hpp"
#include "apf/gradcheck_suites.hpp"
#include "apf/matching.hpp"
#include "oracles.hpp"

namespace apf {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Prediction pred(double s, double e, std::vector<double> logits) { return {s, e, std::move(logits)}; }

TEST(Tiou, Fixtures) {
  EXPECT_EQ(tiou_1d({0.1, 0.4}, {0.1, 0.4}), 1.0);
  EXPECT_EQ(tiou_1d({0.0, 0.2}, {0.5, 0.7}), 0.0);
  EXPECT_EQ(tiou_1d({0.0, 0.2}, {0.2, 0.7}), 0.0);
  EXPECT_NEAR(tiou_1d({0.2, 0.6}, {0.4, 0.8}), 1.0 / 3.0, 1e-15);
  EXPECT_EQ(tiou_1d({0.3, 0.3}, {0.3, 0.3}), 1.0);
  EXPECT_EQ(tiou_1d({0.3, 0.3}, {0.2, 0.5}), 0.0);
}

TEST(Diou, Fixtures) {
  EXPECT_EQ(diou_1d({0.1, 0.4}, {0.1, 0.4}), 1.0);
  EXPECT_NEAR(diou_1d({0.0, 0.2}, {0.8, 1.0}), -0.64, 1e-15);
  EXPECT_EQ(diou_1d({0.4, 0.6}, {0.3, 0.7}), tiou_1d({0.4, 0.6}, {0.3, 0.7}));
  EXPECT_EQ(diou_1d({0.5, 0.5}, {0.5, 0.5}), 1.0);
}

TEST(Diou, BoundsAndShiftInvariance) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 0.5);
  for (int i = 0; i < 2000; ++i) {
    double a0 = u(rng), a1 = u(rng), b0 = u(rng), b1 = u(rng);
    if (a0 > a1) std::swap(a0, a1);
    if (b0 > b1) std::swap(b0, b1);
    if (a1 - a0 < 1e-6 || b1 - b0 < 1e-6) continue;
    const Segment a{a0, a1}, b{b0, b1};
    const double d = diou_1d(a, b);
    EXPECT_GT(d, -1.0);
    EXPECT_LE(d, 1.0);
    EXPECT_LE(d, tiou_1d(a, b) + 1e-15);
    const double off = 0.37;
    EXPECT_NEAR(tiou_1d({a0 + off, a1 + off}, {b0 + off, b1 + off}), tiou_1d(a, b), 1e-12);
    EXPECT_NEAR(diou_1d({a0 + off, a1 + off}, {b0 + off, b1 + off}), d, 1e-12);
  }
}

TEST(FocalLoss, Fixtures) {
  const std::vector<double> zero = {0.0};
  EXPECT_NEAR(focal_loss(zero, 0), 0.25 * 0.25 * std::log(2.0), 1e-15);
  EXPECT_NEAR(focal_loss(zero, 0), 0.0433, 5e-5);
  const std::vector<double> perfect = {60.0, -60.0, -60.0};
  EXPECT_LT(focal_loss(perfect, 0), 1e-20);
  const std::vector<double> logits = {0.3, -1.2, 2.0};
  for (int target : {-1, 0, 2}) {
    double bce = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double p = sigmoid(logits[c]);
      bce += c == target ? -std::log(p) : -std::log(1.0 - p);
    }
    EXPECT_NEAR(focal_loss(logits, target, 0.0, 0.5), 0.5 * bce, 1e-14);
  }
}

TEST(CostMatrix, HandFixture) {
  const std::vector<Prediction> preds = {pred(0.1, 0.3, {0.0, 1.0}), pred(0.5, 0.9, {2.0, -1.0}),
                                         pred(0.0, 1.0, {-0.5, 0.5})};
  GroundTruth gts;
  gts.segments = {{0.1, 0.3, 1}, {0.6, 0.8, 0}};
  const CostWeights w{1.0, 2.0, 0.5};
  const auto cost = cost_matrix(preds, gts, w);
  ASSERT_EQ(cost.size(), 3u);
  ASSERT_EQ(cost[0].size(), 2u);
  // Pred 0 exactly on gt 0.
  EXPECT_NEAR(cost[0][0], -sigmoid(1.0), 1e-15);
  // Pred 1 vs gt 1: nested, same center, tIoU 0.5.
  EXPECT_NEAR(cost[1][1], -sigmoid(2.0) + 2.0 * 0.2 + 0.5 * 0.5, 1e-15);
  // Pred 2 vs gt 0: tIoU 0.2, centers 0.5 vs 0.2 over enclosure 1.
  EXPECT_NEAR(cost[2][0], -sigmoid(0.5) + 2.0 * (0.1 + 0.7) + 0.5 * (1.0 - (0.2 - 0.09)), 1e-15);
  // Pred 0 vs gt 1: disjoint, enclosure [0.1, 0.8], centers 0.2 and 0.7.
  EXPECT_NEAR(cost[0][1], -sigmoid(0.0) + 2.0 * (0.5 + 0.5) + 0.5 * (1.0 + 0.25 / 0.49), 1e-14);
}

TEST(CostMatrix, PerfectPredictionAndMonotonicity) {
  GroundTruth gts;
  gts.segments = {{0.2, 0.5, 0}};
  EXPECT_NEAR(cost_matrix({pred(0.2, 0.5, {80.0})}, gts)[0][0], -1.0, 1e-15);
  double prev = -2.0;
  for (double err = 0.0; err < 0.2; err += 0.01) {
    const double c = cost_matrix({pred(0.2 + err, 0.5 + err, {1.0})}, gts)[0][0];
    EXPECT_GT(c, prev);
    prev = c;
  }
  EXPECT_TRUE(cost_matrix({pred(0.2, 0.5, {1.0})}, GroundTruth{})[0].empty());
}

TEST(Hungarian, Fixtures) {
  const MatchResult diag = hungarian_match({{1, 5, 5}, {5, 1, 5}, {5, 5, 1}});
  ASSERT_EQ(diag.pairs.size(), 3u);
  for (std::size_t m = 0; m < 3; ++m) EXPECT_EQ(diag.pairs[m], std::make_pair(m, m));
  const MatchResult perm = hungarian_match({{3, 0, 3}, {3, 3, 0}, {0, 3, 3}});
  EXPECT_EQ(perm.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{2, 0}, {0, 1}, {1, 2}}));
  const MatchResult tall = hungarian_match({{4.0}, {1.0}, {2.0}});
  EXPECT_EQ(tall.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{1, 0}}));
  EXPECT_EQ(tall.unmatched, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(tall.targets(3, GroundTruth{{{0.1, 0.2, 4}}}), (std::vector<int>{-1, 4, -1}));
}

TEST(Hungarian, TiesPreferLowestIndices) {
  const MatchResult flat = hungarian_match({{1, 1}, {1, 1}, {1, 1}});
  EXPECT_EQ(flat.pairs, (std::vector<std::pair<std::size_t, std::size_t>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(flat.unmatched, (std::vector<std::size_t>{2}));
  const MatchResult again = hungarian_match({{1, 1}, {1, 1}, {1, 1}});
  EXPECT_EQ(again.pairs, flat.pairs);
}

TEST(Hungarian, RejectsTooFewQueries) {
  try {
    hungarian_match({{1, 2, 3}, {4, 5, 6}});
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("raise the query count"), std::string::npos) << e.what();
  }
}

TEST(Hungarian, RejectsNonFiniteCosts) {
  EXPECT_THROW(hungarian_match({{1.0}, {std::nan("")}}), NumericError);
  EXPECT_THROW(hungarian_match({{1.0, 2.0}, {3.0}}), DimensionError);
}

TEST(Hungarian, MatchesPermutationBruteForce) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> real(-3.0, 3.0);
  std::uniform_int_distribution<int> small(0, 4);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t rows = 6;
    const std::size_t cols = 1 + static_cast<std::size_t>(trial % 6);
    const bool integer = trial % 2 == 1;
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols));
    for (auto& row : cost)
      for (double& c : row) c = integer ? small(rng) : real(rng);
    const MatchResult match = hungarian_match(cost);
    ASSERT_EQ(match.pairs.size(), cols);
    ASSERT_EQ(match.unmatched.size(), rows - cols);
    ASSERT_NEAR(assignment_cost(cost, match), oracle::brute_force_assignment(cost), 1e-9) << "trial " << trial;
  }
}

TEST(TotalLoss, TwoQueryOneGtHandFixture) {
  Graph g;
  Tensor logits({2, 2});
  logits.at(0, 0) = 1.0;
  logits.at(0, 1) = -1.0;
  logits.at(1, 0) = -2.0;
  logits.at(1, 1) = 0.5;
  Tensor bounds({2, 2});
  bounds.at(0, 0) = 0.1;
  bounds.at(0, 1) = 0.5;
  bounds.at(1, 0) = 0.6;
  bounds.at(1, 1) = 0.9;
  const HeadOutputs out{g.constant(logits), g.constant(bounds)};
  GroundTruth gts;
  gts.segments = {{0.2, 0.6, 0}};
  MatchResult match;
  match.pairs = {{0, 0}};
  match.unmatched = {1};
  LossConfig cfg;
  cfg.lambda = 0.7;
  const LossTerms terms = total_loss(out, gts, match, cfg);

  const std::vector<double> l0 = {1.0, -1.0}, l1 = {-2.0, 0.5};
  const double cls = 0.5 * (focal_loss(l0, 0) + focal_loss(l1, -1));
  const double reg = 1.0 - (0.6 - 0.01 / 0.25);
  const double l1_term = 0.2;
  EXPECT_NEAR(terms.cls, cls, 1e-12);
  EXPECT_NEAR(terms.reg, reg, 1e-12);
  EXPECT_NEAR(terms.l1, l1_term, 1e-12);
  EXPECT_EQ(terms.positives, 1u);
  EXPECT_NEAR(terms.total.value()[0], cls + 0.7 * (reg + l1_term), 1e-12);
}

TEST(TotalLoss, NoGroundTruthIsBackgroundFocalOnly) {
  std::mt19937_64 rng(3);
  const Tensor logits = oracle::random_tensor({4, 3}, rng);
  Graph g;
  const HeadOutputs out{g.constant(logits), g.constant(Tensor({4, 2}, 0.5))};
  const LossTerms terms = match_and_loss(out, GroundTruth{}, LossConfig{});
  double expected = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    const std::vector<double> row(logits.data().begin() + i * 3, logits.data().begin() + (i + 1) * 3);
    expected += focal_loss(row, -1);
  }
  EXPECT_EQ(terms.positives, 0u);
  EXPECT_EQ(terms.reg, 0.0);
  EXPECT_EQ(terms.l1, 0.0);
  EXPECT_NEAR(terms.total.value()[0], expected / 4.0, 1e-12);
}

TEST(TotalLoss, PerfectMatchesLeaveOnlyClassification) {
  Graph g;
  Tensor logits({2, 2}, -50.0);
  logits.at(0, 1) = 50.0;
  Tensor bounds({2, 2});
  bounds.at(0, 0) = 0.3;
  bounds.at(0, 1) = 0.45;
  bounds.at(1, 0) = 0.0;
  bounds.at(1, 1) = 1.0;
  const LossTerms terms =
      match_and_loss({g.constant(logits), g.constant(bounds)}, GroundTruth{{{0.3, 0.45, 1}}}, LossConfig{});
  EXPECT_EQ(terms.positives, 1u);
  EXPECT_NEAR(terms.reg, 0.0, 1e-15);
  EXPECT_NEAR(terms.l1, 0.0, 1e-15);
  EXPECT_LT(terms.total.value()[0], 1e-20);
}

TEST(TotalLoss, TermsAreNonNegativeAndShiftInvariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 0.6);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor bounds({5, 2});
    for (std::size_t i = 0; i < 5; ++i) {
      double a = u(rng), b = u(rng);
      if (a > b) std::swap(a, b);
      bounds.at(i, 0) = a;
      bounds.at(i, 1) = b + 1e-3;
    }
    GroundTruth gts;
    for (int m = 0; m < 3; ++m) {
      double a = u(rng), b = u(rng);
      if (a > b) std::swap(a, b);
      gts.segments.push_back({a, b + 1e-3, m % 2});
    }
    const Tensor logits = oracle::random_tensor({5, 2}, rng);
    Graph g;
    const LossTerms terms = match_and_loss({g.constant(logits), g.constant(bounds)}, gts, LossConfig{});
    EXPECT_GE(terms.cls, 0.0);
    EXPECT_GE(terms.reg, 0.0);
    EXPECT_GE(terms.l1, 0.0);

    const double off = 0.3;
    Tensor shifted = bounds;
    for (double& v : shifted.data()) v += off;
    GroundTruth gts_shifted = gts;
    for (Segment& s : gts_shifted.segments) {
      s.start += off;
      s.end += off;
    }
    auto predictions = [](const Tensor& lg, const Tensor& b) { return decode_predictions(lg, b); };
    const MatchResult m0 = hungarian_match(cost_matrix(predictions(logits, bounds), gts));
    const MatchResult m1 = hungarian_match(cost_matrix(predictions(logits, shifted), gts_shifted));
    EXPECT_EQ(m0.pairs, m1.pairs);
  }
}

TEST(GradCheck, MatchingSuitePasses) {
  for (const GradCheckResult& r : run_gradcheck_suite("matching")) {
    EXPECT_TRUE(r.passed) << r.name << " rel err " << r.max_rel_error;
  }
}

}  // namespace
}  // namespace apf
