#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "occnl/loss.hpp"
#include "oracles.hpp"

using namespace occnl;

namespace {

std::vector<double> row_of(const Matrix& m, std::size_t v) { return {m.row(v).begin(), m.row(v).end()}; }

LogitField field(const Matrix& z) { return {z, LogitRole::Student}; }

double pll_oracle(const Matrix& z, const CandidateSet& c) {
  long double total = 0;
  for (std::size_t v = 0; v < z.rows; ++v) {
    const auto p = oracle::softmax(row_of(z, v));
    long double t = 0;
    for (auto k : c.candidates(v)) t -= std::log(p[k]);
    total += t / c.pl_size[v];
  }
  return static_cast<double>(total / z.rows);
}

double nl_oracle(const Matrix& z, const CandidateSet& c) {
  long double total = 0;
  for (std::size_t v = 0; v < z.rows; ++v) {
    const auto comp = c.complement(v);
    if (comp.empty()) continue;
    const auto p = oracle::softmax(row_of(z, v));
    long double t = 0;
    for (auto k : comp) t -= std::log1p(-p[k]);
    total += t / comp.size();
  }
  return static_cast<double>(total / z.rows);
}

// Not-true softmax by deleting the masked entry and re-inserting a zero.
std::vector<long double> not_true_oracle(const std::vector<double>& z, Label y, double tau) {
  std::vector<double> rest;
  for (std::size_t k = 0; k < z.size(); ++k) {
    if (k != y) rest.push_back(z[k]);
  }
  const auto q = oracle::softmax(rest, tau);
  std::vector<long double> out;
  for (std::size_t k = 0, j = 0; k < z.size(); ++k) out.push_back(k == y ? 0.0L : q[j++]);
  return out;
}

double sntd_oracle(const Matrix& zs, const Matrix& zt, const VoxelGrid& y, double tau) {
  long double total = 0;
  for (std::size_t v = 0; v < zs.rows; ++v) {
    const auto ps = not_true_oracle(row_of(zs, v), y.labels[v], tau);
    const auto pt = not_true_oracle(row_of(zt, v), y.labels[v], tau);
    for (std::size_t k = 0; k < ps.size(); ++k) {
      if (pt[k] > 0) total += pt[k] * std::log(pt[k] / ps[k]);
    }
  }
  return static_cast<double>(tau * tau * total / zs.rows);
}

CandidateSet random_candidates(std::mt19937_64& rng, std::size_t n, std::size_t K) {
  CandidateSet c(n, K);
  std::uniform_int_distribution<std::size_t> u(0, K - 1);
  for (std::size_t v = 0; v < n; ++v) {
    const std::size_t m = 1 + u(rng) % 5;
    while (c.pl_size[v] < m) c.add(v, u(rng));
  }
  return c;
}

VoxelGrid random_labels(std::mt19937_64& rng, std::size_t n, std::size_t K) {
  VoxelGrid g(Dims{static_cast<std::uint32_t>(n), 1, 1});
  std::uniform_int_distribution<int> u(0, static_cast<int>(K) - 1);
  for (auto& l : g.labels) l = static_cast<Label>(u(rng));
  return g;
}

}  // namespace

TEST(Pll, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(1);
  const Matrix z = oracle::random_matrix(rng, 6, 20, 2.0);
  const auto c = random_candidates(rng, 6, 20);
  const auto e = pll_loss(field(z), c);
  EXPECT_NEAR(e.value, pll_oracle(z, c), 1e-12);
  const auto fd = oracle::finite_difference([&](const Matrix& m) { return pll_oracle(m, c); }, z);
  EXPECT_LT(oracle::relative_error(e.grad, fd), 1e-5);
}

TEST(Pll, UniformLogitsGiveLogTwenty) {
  std::mt19937_64 rng(2);
  const auto c = random_candidates(rng, 4, 20);
  EXPECT_NEAR(pll_loss(field(Matrix(4, 20, 0.3)), c).value, std::log(20.0), 1e-12);
}

TEST(Pll, EmptyCandidateSetIsArgumentError) {
  CandidateSet c(1, 3);
  EXPECT_THROW(pll_loss(field(Matrix(1, 3)), c), std::invalid_argument);
  EXPECT_THROW(pll_loss(field(Matrix(2, 3)), c), std::invalid_argument);
}

TEST(Nl, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(3);
  const Matrix z = oracle::random_matrix(rng, 6, 20, 2.0);
  const auto c = random_candidates(rng, 6, 20);
  const auto e = nl_loss(field(z), c);
  EXPECT_NEAR(e.value, nl_oracle(z, c), 1e-12);
  const auto fd = oracle::finite_difference([&](const Matrix& m) { return nl_oracle(m, c); }, z);
  EXPECT_LT(oracle::relative_error(e.grad, fd), 1e-5);
  EXPECT_EQ(e.saturation_count, 0u);
}

TEST(Nl, UniformLogits) {
  CandidateSet c(1, 20);
  c.add(0, 3);
  EXPECT_NEAR(nl_loss(field(Matrix(1, 20, 0.0)), c).value, -std::log(19.0 / 20.0), 1e-14);
}

TEST(Nl, EmptyComplementContributesZero) {
  CandidateSet c(2, 3);
  for (std::size_t k = 0; k < 3; ++k) c.add(0, k);
  c.add(1, 0);
  Matrix z(2, 3, std::vector<double>{1, 2, 3, 0.5, -1, 2});
  const auto e = nl_loss(field(z), c);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(e.grad(0, k), 0.0);
  EXPECT_NEAR(e.value, nl_oracle(z, c), 1e-12);
}

TEST(Nl, SaturatesOnConfidentWrongClass) {
  CandidateSet c(1, 3);
  c.add(0, 0);
  Matrix z(1, 3, std::vector<double>{0.0, 100.0, 0.0});
  const auto e = nl_loss(field(z), c);
  EXPECT_TRUE(std::isfinite(e.value));
  EXPECT_EQ(e.saturation_count, 1u);
  EXPECT_NEAR(e.value, 0.5 * (-std::log(1e-12) - std::log1p(-std::exp(-100.0))), 1e-9);
  for (double g : e.grad.data) EXPECT_TRUE(std::isfinite(g));
}

TEST(NotTrue, RowsAreDistributionsWithMaskedZero) {
  std::mt19937_64 rng(4);
  const Matrix z = oracle::random_matrix(rng, 10, 20, 3.0);
  const auto y = random_labels(rng, 10, 20);
  const Matrix p = not_true_distribution(field(z), y, {});
  for (std::size_t v = 0; v < 10; ++v) {
    double s = 0.0;
    for (double x : p.row(v)) s += x;
    EXPECT_NEAR(s, 1.0, 1e-12);
    EXPECT_EQ(p(v, y.labels[v]), 0.0);
    const auto o = not_true_oracle(row_of(z, v), y.labels[v], 3.0);
    for (std::size_t k = 0; k < 20; ++k) EXPECT_NEAR(p(v, k), static_cast<double>(o[k]), 1e-14);
  }
}

TEST(NotTrue, HigherTemperatureFlattens) {
  std::mt19937_64 rng(5);
  const Matrix z = oracle::random_matrix(rng, 1, 20, 2.0);
  const VoxelGrid y(Dims{1, 1, 1}, Label{4});
  double prev = 2.0;
  for (double tau : {1.0, 3.0, 10.0}) {
    const Matrix p = not_true_distribution(field(z), y, {tau, false});
    double mx = 0.0;
    for (double x : p.data) mx = std::max(mx, x);
    EXPECT_LT(mx, prev);
    prev = mx;
  }
  EXPECT_THROW(not_true_distribution(field(z), y, {0.0, false}), std::invalid_argument);
}

TEST(Sntd, MatchesOracleAndFiniteDifferences) {
  std::mt19937_64 rng(6);
  const Matrix zs = oracle::random_matrix(rng, 5, 20, 2.0);
  const Matrix zt = oracle::random_matrix(rng, 5, 20, 2.0);
  const auto y = random_labels(rng, 5, 20);
  for (double tau : {1.0, 3.0}) {
    const SNTDConfig cfg{tau, false};
    const auto e = sntd_loss(field(zs), {zt, LogitRole::Teacher}, y, cfg);
    EXPECT_NEAR(e.value, sntd_oracle(zs, zt, y, tau), 1e-11);
    const auto fd = oracle::finite_difference([&](const Matrix& m) { return sntd_oracle(m, zt, y, tau); }, zs);
    EXPECT_LT(oracle::relative_error(e.grad, fd), 1e-5);
  }
}

TEST(Sntd, SumVariantScalesByVoxelCount) {
  std::mt19937_64 rng(7);
  const Matrix zs = oracle::random_matrix(rng, 8, 20), zt = oracle::random_matrix(rng, 8, 20);
  const auto y = random_labels(rng, 8, 20);
  const double mean = sntd_loss(field(zs), field(zt), y, {3.0, false}).value;
  const double sum = sntd_loss(field(zs), field(zt), y, {3.0, true}).value;
  EXPECT_NEAR(sum, 8.0 * mean, 1e-12);
}

TEST(Sntd, ZeroForIdenticalLogitsAndNonNegative) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const Matrix zs = oracle::random_matrix(rng, 4, 20, 3.0), zt = oracle::random_matrix(rng, 4, 20, 3.0);
    const auto y = random_labels(rng, 4, 20);
    EXPECT_NEAR(sntd_loss(field(zs), field(zs), y, {}).value, 0.0, 1e-14);
    EXPECT_GE(sntd_loss(field(zs), field(zt), y, {}).value, 0.0);
  }
}

TEST(Sntd, InvariantToPerVoxelShift) {
  std::mt19937_64 rng(9);
  const Matrix zs = oracle::random_matrix(rng, 4, 20), zt = oracle::random_matrix(rng, 4, 20);
  const auto y = random_labels(rng, 4, 20);
  Matrix shifted = zs;
  for (std::size_t v = 0; v < 4; ++v) {
    for (double& x : shifted.row(v)) x += 5.0 * static_cast<double>(v) - 3.0;
  }
  EXPECT_NEAR(sntd_loss(field(zs), field(zt), y, {}).value, sntd_loss(field(shifted), field(zt), y, {}).value, 1e-12);
}

TEST(Sntd, ShapeMismatchIsArgumentError) {
  const VoxelGrid y(Dims{2, 1, 1});
  EXPECT_THROW(sntd_loss(field(Matrix(2, 3)), field(Matrix(2, 4)), y, {}), std::invalid_argument);
}

TEST(CrossEntropy, MatchesOracleAndGradientRowsSumToZero) {
  std::mt19937_64 rng(10);
  const Matrix z = oracle::random_matrix(rng, 6, 20, 2.0);
  const auto y = random_labels(rng, 6, 20);
  const auto e = cross_entropy_loss(field(z), y);
  long double expect = 0;
  for (std::size_t v = 0; v < 6; ++v) expect -= std::log(oracle::softmax(row_of(z, v))[y.labels[v]]);
  EXPECT_NEAR(e.value, static_cast<double>(expect / 6), 1e-12);
  for (std::size_t v = 0; v < 6; ++v) {
    double s = 0.0;
    for (double g : e.grad.row(v)) s += g;
    EXPECT_NEAR(s, 0.0, 1e-15);
  }
}

TEST(Gradients, RowsSumToZeroForEveryLoss) {
  std::mt19937_64 rng(11);
  const Matrix zs = oracle::random_matrix(rng, 7, 20, 2.0), zt = oracle::random_matrix(rng, 7, 20);
  const auto c = random_candidates(rng, 7, 20);
  const auto y = random_labels(rng, 7, 20);
  for (const auto& e : {pll_loss(field(zs), c), nl_loss(field(zs), c), sntd_loss(field(zs), field(zt), y, {})}) {
    for (std::size_t v = 0; v < 7; ++v) {
      double s = 0.0;
      for (double g : e.grad.row(v)) s += g;
      EXPECT_NEAR(s, 0.0, 1e-14);
    }
  }
}

TEST(TotalLoss, WarmupIgnoresRobustTerms) {
  LossEvaluation base{1.5, Matrix(1, 2, 0.1)};
  LossEvaluation pll{0.25, Matrix(1, 2, 1.0)}, nl{0.5, Matrix(1, 2, 2.0)}, sntd{0.125, Matrix(1, 2, 4.0)};
  const auto warm = total_loss(base, &pll, &nl, &sntd, 12, 12);
  EXPECT_EQ(warm.value, 1.5);
  EXPECT_FALSE(warm.robust_active);
  EXPECT_EQ(warm.grad, base.grad);
  const auto robust = total_loss(base, &pll, &nl, &sntd, 13, 12);
  EXPECT_DOUBLE_EQ(robust.value, 1.5 + 0.25 + 0.5 + 0.125);
  EXPECT_DOUBLE_EQ(robust.grad(0, 0), 0.1 + 7.0);
  const auto ablated = total_loss(base, &pll, nullptr, nullptr, 13, 12, {2.0, 1.0, 1.0});
  EXPECT_DOUBLE_EQ(ablated.value, 2.0);
  EXPECT_EQ(ablated.nl, 0.0);
}

TEST(TotalLoss, ShapeMismatchIsArgumentError) {
  LossEvaluation base{0.0, Matrix(1, 2)}, bad{0.0, Matrix(2, 2)};
  EXPECT_THROW(total_loss(base, &bad, nullptr, nullptr, 5, 1), std::invalid_argument);
}

TEST(RobustLoss, ExtensionCanBeEvaluatedThroughContext) {
  struct L2 : RobustLoss {
    std::string name() const override { return "l2"; }
    LossEvaluation evaluate(const LossContext& ctx) const override {
      LossEvaluation e{0.0, ctx.student.logits};
      for (double x : ctx.student.logits.data) e.value += 0.5 * x * x;
      return e;
    }
  };
  const LogitField s = field(Matrix(1, 2, std::vector<double>{1.0, -2.0}));
  const CandidateSet c(1, 2);
  const VoxelGrid y(Dims{1, 1, 1});
  const L2 l;
  const auto e = l.evaluate({s, s, c, y, 13});
  EXPECT_EQ(l.name(), "l2");
  EXPECT_DOUBLE_EQ(e.value, 2.5);
}

TEST(Losses, RejectNonFiniteLogits) {
  Matrix z(1, 3, 0.0);
  z(0, 1) = std::nan("");
  CandidateSet c(1, 3);
  c.add(0, 0);
  EXPECT_THROW(pll_loss(field(z), c), std::invalid_argument);
  EXPECT_THROW(nl_loss(field(z), c), std::invalid_argument);
}
