#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "deltami/outcome.hpp"
#include "test_support.hpp"

using namespace deltami;

namespace {

struct ClusteredData {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  std::vector<int> cluster;
  int G = 0;
  std::vector<std::string> names;
};

// Intercept, one binary and one three-level covariate; cluster intercepts N(0, sd^2).
ClusteredData clustered_logistic(std::size_t n, int G, double sd, unsigned seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> effect(static_cast<std::size_t>(G));
  for (auto& e : effect) e = sd * z(gen);
  ClusteredData d;
  d.G = G;
  d.X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), 4);
  d.y.resize(static_cast<Eigen::Index>(n));
  d.names = {"(Intercept)", "A2", "B2", "B3"};
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int g = static_cast<int>(i * static_cast<std::size_t>(G) / n);
    d.cluster.push_back(g + 1);
    d.X(r, 0) = 1.0;
    d.X(r, 1) = u(gen) < 0.5 ? 1.0 : 0.0;
    const int b = static_cast<int>(i % 3);
    if (b > 0) d.X(r, 1 + b) = 1.0;
    const double eta = -0.5 + 0.8 * d.X(r, 1) - 0.6 * d.X(r, 2) + 0.4 * d.X(r, 3) + effect[static_cast<std::size_t>(g)];
    d.y[r] = u(gen) < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0;
  }
  return d;
}

// Marginal log-likelihood by a fine trapezoid rule over each cluster's intercept.
double brute_force_marginal(const ClusteredData& d, const Eigen::VectorXd& beta, double sd) {
  const Eigen::VectorXd eta = d.X * beta;
  double total = 0.0;
  const int points = 4001;
  const double lo = -10 * sd, hi = 10 * sd, h = (hi - lo) / (points - 1);
  for (int g = 1; g <= d.G; ++g) {
    std::vector<double> logs;
    for (int k = 0; k < points; ++k) {
      const double u = lo + k * h;
      double v = -0.5 * (u / sd) * (u / sd) - std::log(sd * std::sqrt(2 * std::numbers::pi));
      for (Eigen::Index i = 0; i < d.y.size(); ++i) {
        if (d.cluster[static_cast<std::size_t>(i)] != g) continue;
        const double p = 1.0 / (1.0 + std::exp(-(eta[i] + u)));
        v += d.y[i] > 0.5 ? std::log(p) : std::log(1 - p);
      }
      logs.push_back(v + std::log((k == 0 || k == points - 1) ? 0.5 * h : h));
    }
    const double top = *std::max_element(logs.begin(), logs.end());
    double s = 0;
    for (double v : logs) s += std::exp(v - top);
    total += top + std::log(s);
  }
  return total;
}

// Plain Newton on the logistic log-likelihood with a finite-difference Hessian.
Eigen::VectorXd newton_oracle(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, Eigen::MatrixXd* hessian) {
  auto gradient = [&](const Eigen::VectorXd& b) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(b.size());
    for (Eigen::Index i = 0; i < X.rows(); ++i) g += (y[i] - 1.0 / (1.0 + std::exp(-X.row(i).dot(b)))) * X.row(i).transpose();
    return g;
  };
  Eigen::VectorXd b = Eigen::VectorXd::Zero(X.cols());
  Eigen::MatrixXd H(X.cols(), X.cols());
  for (int it = 0; it < 100; ++it) {
    for (Eigen::Index j = 0; j < b.size(); ++j) {
      Eigen::VectorXd bp = b, bm = b;
      bp[j] += 1e-6;
      bm[j] -= 1e-6;
      H.col(j) = (gradient(bp) - gradient(bm)) / 2e-6;
    }
    const Eigen::VectorXd step = H.fullPivLu().solve(-gradient(b));
    b += step;
    if (step.cwiseAbs().maxCoeff() < 1e-13) break;
  }
  *hessian = H;
  return b;
}

OutcomeFit fake_fit(std::vector<double> est, std::vector<double> se) {
  OutcomeFit f;
  for (std::size_t j = 0; j < est.size(); ++j) f.names.push_back("b" + std::to_string(j));
  f.coefficients = Eigen::Map<Eigen::VectorXd>(est.data(), static_cast<Eigen::Index>(est.size()));
  f.se = Eigen::Map<Eigen::VectorXd>(se.data(), static_cast<Eigen::Index>(se.size()));
  return f;
}

}  // namespace

TEST(OutcomeDesign, DummyCodingAndNames) {
  const Dataset d("Y", OutcomeKind::binary, {0, 1, 1, 0}, "X1", 3, {1, 2, 3, 2}, {{"X2", 2, {1, 1, 2, 2}}});
  const auto design = outcome_design(d);
  EXPECT_EQ(design.names, (std::vector<std::string>{"(Intercept)", "X12", "X13", "X22"}));
  Eigen::MatrixXd expected(4, 4);
  expected << 1, 0, 0, 0, 1, 1, 0, 0, 1, 0, 1, 1, 1, 1, 0, 1;
  EXPECT_EQ(design.X, expected);
  const auto shifted = outcome_design(d, {{"X1", 2}});
  EXPECT_EQ(shifted.names, (std::vector<std::string>{"(Intercept)", "X11", "X13", "X22"}));
  EXPECT_THROW(outcome_design(d, {{"Z", 1}}), DataError);
  EXPECT_THROW(outcome_design(d, {{"X1", 4}}), DataError);
  const Dataset incomplete("Y", OutcomeKind::binary, {0, 1, 1, 0}, "X1", 3, {1, 0, 3, 2}, {{"X2", 2, {1, 1, 2, 2}}});
  EXPECT_THROW(outcome_design(incomplete), DataError);
}

TEST(Logistic, MatchesBruteForceNewton) {
  std::mt19937_64 gen(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd X(40, 3);
  Eigen::VectorXd y(40);
  for (int i = 0; i < 40; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = i % 2;
    X(i, 2) = u(gen) * 2 - 1;
    y[i] = u(gen) < 1.0 / (1.0 + std::exp(-(0.3 + 0.7 * X(i, 1) - X(i, 2)))) ? 1.0 : 0.0;
  }
  Eigen::MatrixXd H;
  const Eigen::VectorXd oracle_beta = newton_oracle(X, y, &H);
  const auto fit = fit_logistic(X, y, {"a", "b", "c"});
  EXPECT_LT((fit.coefficients - oracle_beta).cwiseAbs().maxCoeff(), 1e-8);
  const Eigen::MatrixXd oracle_vcov = (-H).inverse();
  EXPECT_LT((fit.vcov - oracle_vcov).cwiseAbs().maxCoeff(), 1e-5);
  for (Eigen::Index j = 0; j < 3; ++j) EXPECT_DOUBLE_EQ(fit.se[j], std::sqrt(fit.vcov(j, j)));
}

TEST(Logistic, NullModelCoefficientsNearZero) {
  std::mt19937_64 gen(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(2000, 4);
  Eigen::VectorXd y(2000);
  for (int i = 0; i < 2000; ++i) {
    X(i, 0) = 1;
    if (i % 4) X(i, i % 4) = 1;
    y[i] = u(gen) < 0.5;
  }
  const auto fit = fit_logistic(X, y, {"a", "b", "c", "d"});
  for (Eigen::Index j = 1; j < 4; ++j) EXPECT_LT(std::abs(fit.coefficients[j]), 4 * fit.se[j]);
}

TEST(Logistic, Errors) {
  Eigen::MatrixXd X(6, 2);
  X << 1, 0, 1, 0, 1, 0, 1, 1, 1, 1, 1, 1;
  Eigen::VectorXd separated(6);
  separated << 0, 0, 0, 1, 1, 1;
  EXPECT_THROW(fit_logistic(X, separated, {"a", "b"}), FitError);
  Eigen::VectorXd not_binary(6);
  not_binary << 0, 2, 0, 1, 1, 0;
  EXPECT_THROW(fit_logistic(X, not_binary, {"a", "b"}), DataError);
  Eigen::MatrixXd collinear(6, 3);
  collinear << X, X.col(1);
  Eigen::VectorXd y(6);
  y << 0, 1, 0, 1, 0, 1;
  EXPECT_THROW(fit_logistic(collinear, y, {"a", "b", "c"}), FitError);
}

TEST(Linear, ExactInterpolation) {
  Eigen::MatrixXd X(10, 3);
  Eigen::VectorXd y(10);
  for (int i = 0; i < 10; ++i) {
    X.row(i) << 1, i % 2, i % 3 == 0;
    y[i] = 2 - X(i, 1) + 0.5 * X(i, 2);
  }
  const auto fit = fit_linear(X, y, {"a", "b", "c"});
  EXPECT_LT((y - X * fit.coefficients).squaredNorm(), 1e-20);
}

TEST(Linear, MatchesNormalEquations) {
  std::mt19937_64 gen(6);
  std::normal_distribution<double> z;
  Eigen::MatrixXd X(30, 3);
  Eigen::VectorXd y(30);
  for (int i = 0; i < 30; ++i) {
    X.row(i) << 1, z(gen), i % 2;
    y[i] = 1 + 2 * X(i, 1) - X(i, 2) + z(gen);
  }
  const Eigen::MatrixXd xtx = X.transpose() * X;
  const Eigen::VectorXd beta = xtx.inverse() * X.transpose() * y;
  const double s2 = (y - X * beta).squaredNorm() / 27.0;
  const auto fit = fit_linear(X, y, {"a", "b", "c"});
  EXPECT_LT((fit.coefficients - beta).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((fit.vcov - s2 * xtx.inverse()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(GaussHermite, IntegratesPolynomialsExactly) {
  const GaussHermite rule(15);
  // Integral of x^(2k) exp(-x^2) = Gamma(k + 1/2).
  for (int k = 0; k < 15; ++k) {
    double sum = 0;
    for (Eigen::Index q = 0; q < 15; ++q) sum += rule.weights[q] * std::pow(rule.nodes[q], 2 * k);
    EXPECT_NEAR(sum / std::tgamma(k + 0.5), 1.0, 1e-10) << "moment " << 2 * k;
  }
}

TEST(RandomIntercept, LikelihoodMatchesGridIntegration) {
  const auto d = clustered_logistic(600, 8, 0.7, 1);
  const auto fit = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names);
  ASSERT_TRUE(fit.ri_sd.has_value());
  EXPECT_NEAR(fit.loglik, brute_force_marginal(d, fit.coefficients, *fit.ri_sd), 1e-6);
  // A local maximum of the exact marginal likelihood.
  const double best = brute_force_marginal(d, fit.coefficients, *fit.ri_sd);
  for (Eigen::Index j = 0; j < 4; ++j)
    for (double h : {-1e-2, 1e-2}) {
      Eigen::VectorXd b = fit.coefficients;
      b[j] += h;
      EXPECT_LT(brute_force_marginal(d, b, *fit.ri_sd), best);
    }
  EXPECT_LT(brute_force_marginal(d, fit.coefficients, *fit.ri_sd * 1.05), best);
  EXPECT_LT(brute_force_marginal(d, fit.coefficients, *fit.ri_sd * 0.95), best);
}

TEST(RandomIntercept, StandardErrorsMatchNumericalInformation) {
  const auto d = clustered_logistic(600, 8, 0.7, 2);
  const auto fit = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names);
  // Hessian of the exact marginal likelihood in (beta, log sd) by second differences.
  Eigen::VectorXd theta(5);
  theta << fit.coefficients, std::log(*fit.ri_sd);
  auto f = [&](const Eigen::VectorXd& t) { return brute_force_marginal(d, t.head(4), std::exp(t[4])); };
  const double h = 1e-3;
  Eigen::MatrixXd H(5, 5);
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b) {
      Eigen::VectorXd pp = theta, pm = theta, mp = theta, mm = theta;
      pp[a] += h; pp[b] += h;
      pm[a] += h; pm[b] -= h;
      mp[a] -= h; mp[b] += h;
      mm[a] -= h; mm[b] -= h;
      H(a, b) = (f(pp) - f(pm) - f(mp) + f(mm)) / (4 * h * h);
    }
  const Eigen::MatrixXd cov = (-H).inverse();
  for (Eigen::Index j = 0; j < 4; ++j) EXPECT_NEAR(fit.se[j], std::sqrt(cov(j, j)), 1e-3 * std::sqrt(cov(j, j)) + 1e-4);
}

TEST(RandomIntercept, ZeroClusterVarianceGivesSmallSd) {
  const auto d = clustered_logistic(2000, 10, 0.0, 3);
  const auto fit = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names);
  EXPECT_LT(*fit.ri_sd, 0.05);
}

TEST(RandomIntercept, RecoversClusterSd) {
  const auto d = clustered_logistic(4000, 40, 0.8, 4);
  const auto fit = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names);
  EXPECT_NEAR(*fit.ri_sd, 0.8, 0.3);
  EXPECT_FALSE(fit.boundary);
}

TEST(RandomIntercept, QuadratureRefinementIsStable) {
  const auto d = clustered_logistic(2000, 10, 0.45, 5);
  GlmmOptions five, many;
  five.quadrature_nodes = 5;
  many.quadrature_nodes = 25;
  const auto a = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names, five);
  const auto b = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names, many);
  EXPECT_LT((a.coefficients - b.coefficients).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(RandomIntercept, ConvergesToGlmWhenClustersAreIdentical) {
  // Every cluster holds the same rows, so the between-cluster variance is exactly zero.
  const auto base = clustered_logistic(200, 1, 0.0, 6);
  ClusteredData d;
  d.G = 10;
  d.names = base.names;
  d.X.resize(2000, 4);
  d.y.resize(2000);
  for (int g = 0; g < 10; ++g) {
    d.X.middleRows(g * 200, 200) = base.X;
    d.y.segment(g * 200, 200) = base.y;
    for (int i = 0; i < 200; ++i) d.cluster.push_back(g + 1);
  }
  const auto glmm = fit_logistic_random_intercept(d.X, d.y, d.cluster, d.G, d.names);
  const auto glm = fit_logistic(d.X, d.y, d.names);
  EXPECT_LT((glmm.coefficients - glm.coefficients).cwiseAbs().maxCoeff(), 1e-3);
  EXPECT_TRUE(glmm.boundary);
  EXPECT_EQ(*glmm.ri_sd, 0.0);
}

TEST(RandomIntercept, NeedsTwoClusters) {
  const auto d = clustered_logistic(100, 1, 0.0, 7);
  EXPECT_THROW(fit_logistic_random_intercept(d.X, d.y, d.cluster, 1, d.names), DataError);
}

TEST(PoolRubin, HandExample) {
  const std::vector<OutcomeFit> fits{fake_fit({1.0}, {0.2}), fake_fit({1.2}, {0.2}), fake_fit({1.4}, {0.2})};
  const auto pooled = pool_rubin(fits);
  const auto& c = pooled.coefficients[0];
  EXPECT_NEAR(c.qbar, 1.2, 1e-12);
  EXPECT_NEAR(c.W, 0.04, 1e-12);
  EXPECT_NEAR(c.B, 0.04, 1e-12);
  EXPECT_NEAR(c.T, 0.04 + (4.0 / 3.0) * 0.04, 1e-12);
  EXPECT_NEAR(c.df, 6.125, 1e-12);
  const double half = boost::math::quantile(boost::math::students_t(6.125), 0.975) * std::sqrt(c.T);
  EXPECT_NEAR(c.ci_low, 1.2 - half, 1e-12);
  EXPECT_NEAR(c.ci_high, 1.2 + half, 1e-12);
}

TEST(PoolRubin, IdenticalFitsUseNormalQuantile) {
  const std::vector<OutcomeFit> fits(4, fake_fit({0.5, -1.0}, {0.1, 0.3}));
  const auto pooled = pool_rubin(fits);
  for (const auto& c : pooled.coefficients) {
    EXPECT_EQ(c.B, 0.0);
    EXPECT_FALSE(std::isfinite(c.df));
  }
  EXPECT_NEAR(pooled.coefficients[0].T, 0.01, 1e-15);
  EXPECT_NEAR(pooled.coefficients[0].ci_high - 0.5, 1.959963984540054 * 0.1, 1e-12);
  EXPECT_NEAR(pooled.coefficients[1].p_value, 2 * oracle::phi_cdf(-1.0 / 0.3), 1e-12);
}

TEST(PoolRubin, PropertiesOverRandomInputs) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> z;
  std::uniform_int_distribution<int> count(2, 20);
  for (int rep = 0; rep < 10000; ++rep) {
    const int M = count(gen);
    std::vector<OutcomeFit> fits;
    for (int m = 0; m < M; ++m) fits.push_back(fake_fit({z(gen)}, {std::abs(z(gen)) + 1e-3}));
    const auto a = pool_rubin(fits).coefficients[0];
    ASSERT_GE(a.T, a.W);
    ASSERT_GE(a.T, (1 + 1.0 / M) * a.B);
    ASSERT_GE(a.B, 0.0);
    std::shuffle(fits.begin(), fits.end(), gen);
    const auto b = pool_rubin(fits).coefficients[0];
    ASSERT_NEAR(a.qbar, b.qbar, 1e-12);
    ASSERT_NEAR(a.T, b.T, 1e-12);
    ASSERT_LT(a.ci_low, a.qbar);
    ASSERT_GT(a.ci_high, a.qbar);
    ASSERT_EQ(a.odds_ratio() < 1.0, a.qbar < 0.0);
  }
}

TEST(PoolRubin, Errors) {
  EXPECT_THROW(pool_rubin({fake_fit({1.0}, {0.1})}), DataError);
  auto other = fake_fit({1.0}, {0.1});
  other.names = {"zz"};
  EXPECT_THROW(pool_rubin({fake_fit({1.0}, {0.1}), other}), DataError);
  EXPECT_THROW(pool_rubin({fake_fit({1.0}, {0.1}), fake_fit({1.0, 2.0}, {0.1, 0.1})}), DataError);
}

TEST(Icc, Values) {
  EXPECT_EQ(compute_icc(0.0), 0.0);
  EXPECT_NEAR(compute_icc(0.45), 0.2025 / (0.2025 + std::numbers::pi * std::numbers::pi / 3), 1e-15);
  EXPECT_NEAR(compute_icc(0.45), 0.0580, 1e-4);
  EXPECT_THROW(compute_icc(-0.1), DataError);
}

TEST(FitCopies, NamesTheFailingCopy) {
  const Dataset d("Y", OutcomeKind::binary, {0, 1, 0, 1, 0, 1}, "X1", 3, {1, 0, 3, 0, 2, 1}, {{"X2", 2, {1, 2, 1, 2, 1, 2}}});
  const std::vector<std::vector<int>> copies{{1, 2, 3, 3, 2, 1}, {1, 1, 3, 1, 1, 1}};
  try {
    fit_copies(d, copies, OutcomeModel::logistic);
    FAIL();
  } catch (const FitError& e) {
    EXPECT_NE(std::string(e.what()).find("imputation"), std::string::npos);
  }
}
