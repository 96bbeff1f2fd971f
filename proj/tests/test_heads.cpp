#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "emunet/errors.hpp"
#include "emunet/heads.hpp"
#include "oracles.hpp"

using namespace emunet;

namespace {

// Raw Gaussian outputs for given mean and Cholesky factor.
Vector gaussian_raw(const Vector& mu, const Matrix& L) {
  const int d = static_cast<int>(mu.size());
  Vector raw(d + d + d * (d - 1) / 2);
  raw.head(d) = mu;
  for (int i = 0; i < d; ++i) raw(d + i) = oracle::inverse_softplus(L(i, i) - kScaleFloor);
  int k = 2 * d;
  for (int i = 1; i < d; ++i)
    for (int j = 0; j < i; ++j) raw(k++) = L(i, j);
  return raw;
}

double log_binom_pmf_direct(int n, int k, double p) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) + k * std::log(p) +
         (n - k) * std::log1p(-p);
}

}  // namespace

TEST(GaussianHead, StandardNormalLogProbAtZero) {
  const HeadSpec s = HeadSpec::gaussian(1);
  const Vector raw = gaussian_raw(Vector::Zero(1), Matrix::Identity(1, 1));
  EXPECT_NEAR(log_prob(s, raw, Vector::Zero(1)), -0.5 * std::log(2 * std::numbers::pi), 1e-12);
}

TEST(GaussianHead, MatchesDenseMultivariateDensity) {
  const HeadSpec s = HeadSpec::gaussian(3);
  Matrix L(3, 3);
  L << 1.2, 0, 0, 0.3, 0.7, 0, -0.5, 0.2, 2.0;
  const Vector mu{{0.5, -1.0, 2.0}};
  const Vector x{{0.1, 0.4, 3.0}};
  const Matrix S = L * L.transpose();
  const Vector r = x - mu;
  const double expected =
      -0.5 * r.dot(S.inverse() * r) - 0.5 * std::log(S.determinant()) - 1.5 * std::log(2 * std::numbers::pi);
  EXPECT_NEAR(log_prob(s, gaussian_raw(mu, L), x), expected, 1e-10);
}

TEST(GaussianHead, EntropyOfUnitVariance) {
  const HeadSpec s = HeadSpec::gaussian(1);
  EXPECT_NEAR(entropy(s, gaussian_raw(Vector::Zero(1), Matrix::Identity(1, 1))),
              0.5 * std::log(2 * std::numbers::pi * std::numbers::e), 1e-12);
}

TEST(GaussianHead, MomentsAreMeanAndLLt) {
  const HeadSpec s = HeadSpec::gaussian(2);
  Matrix L(2, 2);
  L << 0.5, 0, -1.0, 2.0;
  const Vector mu{{1.0, -3.0}};
  const Moments m = moments(s, gaussian_raw(mu, L));
  EXPECT_TRUE(m.mean.isApprox(mu));
  EXPECT_TRUE(m.cov.isApprox(L * L.transpose(), 1e-10));
}

TEST(GaussianHead, DiagonalStaysAboveFloor) {
  const HeadSpec s = HeadSpec::gaussian(2);
  Vector raw = Vector::Zero(s.raw_size());
  raw(2) = -800.0;
  raw(3) = 50.0;
  const GaussianParams g = gaussian_params(s, raw);
  EXPECT_GE(g.chol(0, 0), kScaleFloor);
  EXPECT_GT(g.chol(1, 1), 0.0);
  EXPECT_TRUE(std::isfinite(log_prob(s, raw, Vector::Zero(2))));
}

TEST(BinomialHead, FairCoinAllFailures) {
  const HeadSpec s = HeadSpec::binomial(1, 255);
  EXPECT_NEAR(log_prob(s, Vector::Zero(1), Vector::Zero(1)), -255 * std::log(2.0), 1e-9);
}

TEST(BinomialHead, MatchesLgammaFormula) {
  const HeadSpec s = HeadSpec::binomial(3, 255);
  const Vector raw{{-1.3, 0.2, 2.5}};
  const Vector x{{10, 140, 254}};
  double expected = 0.0;
  for (int i = 0; i < 3; ++i) expected += log_binom_pmf_direct(255, static_cast<int>(x(i)), sigmoid(raw(i)));
  EXPECT_NEAR(log_prob(s, raw, x), expected, 1e-9);
}

TEST(BinomialHead, EntropyMatchesBruteForce) {
  const HeadSpec s = HeadSpec::binomial(1, 255);
  for (double z : {0.0, -2.0, 3.5}) {
    double h = 0.0;
    for (int k = 0; k <= 255; ++k) {
      const double lp = log_binom_pmf_direct(255, k, sigmoid(z));
      h -= std::exp(lp) * lp;
    }
    EXPECT_NEAR(entropy(s, Vector::Constant(1, z)), h, 1e-10);
  }
}

TEST(BinomialHead, MomentsOfFairCoin) {
  const Moments m = moments(HeadSpec::binomial(1, 255), Vector::Zero(1));
  EXPECT_DOUBLE_EQ(m.mean(0), 127.5);
  EXPECT_DOUBLE_EQ(m.cov(0, 0), 63.75);
}

TEST(BinomialHead, SmallNNormalizes) {
  for (int n : {1, 4, 9}) {
    const HeadSpec s = HeadSpec::binomial(1, n);
    for (double z : {-3.0, 0.4, 2.2}) {
      double total = 0.0;
      for (int k = 0; k <= n; ++k) total += std::exp(log_prob(s, Vector::Constant(1, z), Vector::Constant(1, k)));
      EXPECT_NEAR(total, 1.0, 1e-10);
    }
  }
}

TEST(BinomialHead, OutOfSupportIsDomainError) {
  const HeadSpec s = HeadSpec::binomial(2, 255);
  EXPECT_THROW(log_prob(s, Vector::Zero(2), Vector{{0, 256}}), DomainError);
  EXPECT_THROW(log_prob(s, Vector::Zero(2), Vector{{-1, 3}}), DomainError);
  EXPECT_THROW(log_prob(s, Vector::Zero(2), Vector{{1.5, 3}}), DomainError);
}

TEST(CategoricalHead, UniformLogProb) {
  const HeadSpec s = HeadSpec::categorical(6);
  for (int c = 0; c < 6; ++c)
    EXPECT_NEAR(log_prob(s, Vector::Zero(6), Vector::Constant(1, c)), -std::log(6.0), 1e-12);
}

TEST(CategoricalHead, OneHotEntropyIsZero) {
  Vector raw = Vector::Constant(6, -1e4);
  raw(2) = 0.0;
  EXPECT_NEAR(entropy(HeadSpec::categorical(6), raw), 0.0, 1e-12);
}

TEST(CategoricalHead, NormalizesAndRejectsOutOfRange) {
  const HeadSpec s = HeadSpec::categorical(6);
  const Vector raw{{0.3, -1.0, 2.0, 0.0, 0.5, -4.0}};
  double total = 0.0;
  for (int c = 0; c < 6; ++c) total += std::exp(log_prob(s, raw, Vector::Constant(1, c)));
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_THROW(log_prob(s, raw, Vector::Constant(1, 6)), DomainError);
  EXPECT_THROW(log_prob(s, raw, Vector::Constant(1, -1)), DomainError);
  EXPECT_THROW(log_prob(s, raw, Vector::Constant(1, 0.5)), DomainError);
}

TEST(CategoricalHead, TwoClassMomentsMatchEnumeration) {
  const HeadSpec s = HeadSpec::categorical(2);
  const Vector raw{{std::log(0.3), std::log(0.7)}};
  const Moments m = moments(s, raw);
  // Enumerate the two one-hot outcomes.
  const double pr[2] = {0.3, 0.7};
  Vector mean = Vector::Zero(2);
  Matrix second = Matrix::Zero(2, 2);
  for (int c = 0; c < 2; ++c) {
    Vector e = Vector::Zero(2);
    e(c) = 1.0;
    mean += pr[c] * e;
    second += pr[c] * e * e.transpose();
  }
  EXPECT_TRUE(m.mean.isApprox(mean, 1e-12));
  EXPECT_TRUE(m.cov.isApprox(second - mean * mean.transpose(), 1e-12));
}

TEST(Heads, DimensionMismatchThrows) {
  EXPECT_THROW(log_prob(HeadSpec::gaussian(2), Vector::Zero(4), Vector::Zero(2)), DimensionError);
  EXPECT_THROW(log_prob(HeadSpec::gaussian(2), Vector::Zero(5), Vector::Zero(3)), DimensionError);
  EXPECT_THROW(entropy(HeadSpec::categorical(6), Vector::Zero(5)), DimensionError);
}

// d log q / d raw and d H / d raw against central differences, every head.
TEST(Heads, GradientsMatchFiniteDifferences) {
  struct Case {
    HeadSpec spec;
    Vector x;
  };
  const std::vector<Case> cases = {
      {HeadSpec::gaussian(1), Vector{{0.7}}},
      {HeadSpec::gaussian(3), Vector{{0.2, -1.0, 1.5}}},
      {HeadSpec::binomial(4, 255), Vector{{0, 17, 200, 255}}},
      {HeadSpec::binomial(2, 7), Vector{{3, 7}}},
      {HeadSpec::categorical(6), Vector{{4}}},
  };
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (const auto& c : cases) {
      Rng rng = stream(seed, "head-fd");
      std::normal_distribution<double> n01;
      Vector raw(c.spec.raw_size());
      for (Eigen::Index i = 0; i < raw.size(); ++i) raw(i) = n01(rng);
      Vector g;
      log_prob(c.spec, raw, c.x, &g);
      const Vector fd = oracle::fd_gradient([&](const Vector& r) { return log_prob(c.spec, r, c.x); }, raw);
      EXPECT_LT(oracle::max_rel_error(g, fd), 1e-4) << to_string(c.spec.kind);
      Vector gh;
      entropy(c.spec, raw, &gh);
      const Vector fdh = oracle::fd_gradient([&](const Vector& r) { return entropy(c.spec, r); }, raw);
      EXPECT_LT(oracle::max_rel_error(gh, fdh), 1e-4) << to_string(c.spec.kind);
    }
  }
}

// Empirical moments of 1e5 draws within 3 standard errors of moments().
TEST(Heads, SampleMomentsMatch) {
  const int n = 100000;
  struct Case {
    HeadSpec spec;
    Vector raw;
  };
  Matrix L(2, 2);
  L << 0.8, 0, 0.5, 1.3;
  const std::vector<Case> cases = {
      {HeadSpec::gaussian(1), gaussian_raw(Vector::Constant(1, 2.0), Matrix::Constant(1, 1, 0.5))},
      {HeadSpec::gaussian(1), gaussian_raw(Vector::Constant(1, -7.0), Matrix::Constant(1, 1, 3.0))},
      {HeadSpec::gaussian(2), gaussian_raw(Vector{{1.0, -1.0}}, L)},
      {HeadSpec::binomial(2, 255), Vector{{0.0, -2.0}}},
      {HeadSpec::binomial(1, 10), Vector{{1.5}}},
      {HeadSpec::binomial(3, 255), Vector{{4.0, -4.0, 0.3}}},
      {HeadSpec::categorical(6), Vector::Zero(6)},
      {HeadSpec::categorical(3), Vector{{1.0, 0.0, -1.0}}},
      {HeadSpec::categorical(6), Vector{{2.0, 0.1, -0.5, 0.0, 1.0, -3.0}}},
  };
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& c = cases[ci];
    const Moments m = moments(c.spec, c.raw);
    const Eigen::Index k = m.mean.size();
    Rng rng = stream(ci, "sample");
    Matrix draws(k, n);
    for (int i = 0; i < n; ++i) {
      const Vector x = sample(c.spec, c.raw, rng);
      if (c.spec.kind == HeadKind::Categorical) {
        draws.col(i).setZero();
        draws(static_cast<Eigen::Index>(x(0)), i) = 1.0;
      } else {
        draws.col(i) = x;
      }
    }
    const Vector mean = draws.rowwise().mean();
    const Matrix centred = draws.colwise() - mean;
    const Matrix cov = centred * centred.transpose() / (n - 1);
    for (Eigen::Index a = 0; a < k; ++a) {
      const double se_mean = std::sqrt(m.cov(a, a) / n);
      EXPECT_LE(std::abs(mean(a) - m.mean(a)), 3 * se_mean + 1e-12) << "case " << ci;
      // Standard error of a sample (co)variance from the fourth moments of the draws.
      for (Eigen::Index b = 0; b < k; ++b) {
        const Eigen::ArrayXd prod = centred.row(a).array() * centred.row(b).array();
        const double se = std::sqrt(((prod - prod.mean()).square().sum() / (n - 1)) / n);
        EXPECT_LE(std::abs(cov(a, b) - m.cov(a, b)), 3 * se + 1e-12) << "case " << ci << " (" << a << "," << b << ")";
      }
    }
  }
}
