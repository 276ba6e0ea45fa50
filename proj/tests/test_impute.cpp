#include <algorithm>
#include <map>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "deltami/impute.hpp"
#include "test_support.hpp"

using namespace deltami;

namespace {

std::vector<double> imputed_counts(const ImputationSet& set, const Dataset& d) {
  std::vector<double> counts(static_cast<std::size_t>(d.K()), 0.0);
  for (const auto& copy : set.copies)
    for (std::size_t i : d.missing_rows()) counts[static_cast<std::size_t>(copy[i] - 1)] += 1.0;
  return counts;
}

void expect_observed_untouched(const ImputationSet& set, const Dataset& d) {
  ASSERT_EQ(static_cast<int>(set.copies.size()), set.M);
  for (const auto& copy : set.copies)
    for (std::size_t i = 0; i < d.n(); ++i) {
      if (d.missing(i)) {
        EXPECT_GE(copy[i], 1);
        EXPECT_LE(copy[i], d.K());
      } else {
        EXPECT_EQ(copy[i], d.x1()[i]);
      }
    }
}

// Same table with the contents of the missing rows shuffled among the
// missing positions.
Dataset shuffle_missing_rows(const Dataset& d, unsigned seed) {
  auto missing = d.missing_rows();
  auto source = missing;
  std::mt19937 gen(seed);
  std::shuffle(source.begin(), source.end(), gen);
  std::vector<std::size_t> order(d.n());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t j = 0; j < missing.size(); ++j) order[missing[j]] = source[j];
  return d.subset(order);
}

// Rows with identical (Y, X2, cluster) are interchangeable, so imputations
// are compared by (content, occurrence among missing rows with that content).
std::map<std::pair<std::vector<double>, int>, int> by_content(const Dataset& d, const std::vector<int>& copy) {
  std::map<std::vector<double>, int> seen;
  std::map<std::pair<std::vector<double>, int>, int> out;
  for (std::size_t i : d.missing_rows()) {
    std::vector<double> content{d.outcome()[i]};
    for (const auto& c : d.covariates()) content.push_back(c.codes[i]);
    if (d.cluster()) content.push_back(d.cluster()->codes[i]);
    const int occurrence = seen[content]++;
    out[{content, occurrence}] = copy[i];
  }
  return out;
}

GibbsConfig quick_gibbs() {
  GibbsConfig g;
  g.burn_in = 200;
  g.between = 10;
  return g;
}

}  // namespace

TEST(ImputeFlat, NoMissingRowsGivesObservedCopies) {
  oracle::SyntheticSpec s;
  s.missing = 0.0;
  const auto d = oracle::synthetic_dataset(s);
  const auto set = impute_mar_flat(d, 3, Link::probit, 1);
  for (const auto& copy : set.copies) EXPECT_EQ(copy, d.x1());
}

TEST(ImputeFlat, ObservedEntriesUntouched) {
  const auto d = oracle::synthetic_dataset({});
  const auto set = impute_mar_flat(d, 5, Link::probit, 2);
  EXPECT_EQ(set.M, 5);
  EXPECT_EQ(set.K, 4);
  expect_observed_untouched(set, d);
}

TEST(ImputeFlat, RejectsFewerThanTwoImputations) {
  const auto d = oracle::synthetic_dataset({});
  EXPECT_THROW(impute_mar_flat(d, 1, Link::probit, 2), DataError);
}

TEST(ImputeFlat, IndependentX1MatchesObservedMarginal) {
  oracle::SyntheticSpec s;
  s.x1_effect = 0.0;
  s.n = 2000;
  s.seed = 11;
  const auto d = oracle::synthetic_dataset(s);
  const int M = 50;
  const auto set = impute_mar_flat(d, M, Link::probit, 3);
  const auto counts = imputed_counts(set, d);
  const double n_mis = static_cast<double>(d.missing_count());
  const double n_obs = static_cast<double>(d.n()) - n_mis;
  for (int k = 1; k <= d.K(); ++k) {
    const double p_obs = std::count(d.x1().begin(), d.x1().end(), k) / n_obs;
    const double p_imp = counts[static_cast<std::size_t>(k - 1)] / (M * n_mis);
    const double se = std::sqrt(p_obs * (1 - p_obs) * (1.0 / n_obs + 1.0 / (M * n_mis)));
    EXPECT_NEAR(p_imp, p_obs, 4 * se) << "category " << k;
  }
}

TEST(ImputeFlat, ImputedFrequenciesMatchModelProbabilities) {
  oracle::SyntheticSpec s;
  s.n = 1500;
  s.seed = 5;
  const auto d = oracle::synthetic_dataset(s);
  const auto fit = fit_cumulative(d, Link::probit);
  // Expected imputed distribution under the MLE, from a direct normal-CDF
  // evaluation of each missing row's intervals.
  const auto X = ordinal_design(d);
  std::vector<double> expected(static_cast<std::size_t>(d.K()), 0.0);
  for (std::size_t i : d.missing_rows()) {
    const double eta = X.row(static_cast<Eigen::Index>(i)).dot(fit.beta);
    double prev = 0.0;
    for (int k = 1; k <= d.K(); ++k) {
      const double cum = k < d.K() ? oracle::phi_cdf(fit.zeta[k - 1] - eta) : 1.0;
      expected[static_cast<std::size_t>(k - 1)] += cum - prev;
      prev = cum;
    }
  }
  const int M = 200;
  const auto set = impute_mar_flat(d, M, Link::probit, 4);
  const double n_mis = static_cast<double>(d.missing_count());
  for (int k = 1; k <= d.K(); ++k) {
    std::vector<double> per_copy;
    for (const auto& copy : set.copies) {
      double c = 0;
      for (std::size_t i : d.missing_rows()) c += copy[i] == k;
      per_copy.push_back(c / n_mis);
    }
    const double mean = std::accumulate(per_copy.begin(), per_copy.end(), 0.0) / M;
    double var = 0;
    for (double v : per_copy) var += (v - mean) * (v - mean);
    const double se = std::sqrt(var / (M - 1) / M);
    EXPECT_NEAR(mean, expected[static_cast<std::size_t>(k - 1)] / n_mis, 4 * se + 1e-3) << "category " << k;
  }
}

TEST(ImputeFlat, SameSeedIsBitIdentical) {
  const auto d = oracle::synthetic_dataset({});
  const auto a = impute_mar_flat(d, 4, Link::logit, 99);
  const auto b = impute_mar_flat(d, 4, Link::logit, 99);
  const auto c = impute_mar_flat(d, 4, Link::logit, 100);
  EXPECT_EQ(a.copies, b.copies);
  EXPECT_NE(a.copies, c.copies);
}

TEST(ImputeFlat, ThreadCountDoesNotChangeResults) {
  const auto d = oracle::synthetic_dataset({});
  EXPECT_EQ(impute_mar_flat(d, 6, Link::probit, 7, 1).copies, impute_mar_flat(d, 6, Link::probit, 7, 4).copies);
}

TEST(ImputeFlat, CopiesDiffer) {
  const auto d = oracle::synthetic_dataset({});
  const auto set = impute_mar_flat(d, 10, Link::probit, 8);
  for (int m = 1; m < 10; ++m) EXPECT_NE(set.copies[0], set.copies[static_cast<std::size_t>(m)]);
}

TEST(ImputeFlat, PermutingMissingRowsPermutesImputations) {
  const auto d = oracle::synthetic_dataset({});
  const auto shuffled = shuffle_missing_rows(d, 3);
  const auto a = impute_mar_flat(d, 5, Link::probit, 21);
  const auto b = impute_mar_flat(shuffled, 5, Link::probit, 21);
  for (int m = 0; m < 5; ++m)
    EXPECT_EQ(by_content(shuffled, b.copies[static_cast<std::size_t>(m)]),
              by_content(d, a.copies[static_cast<std::size_t>(m)]));
}

TEST(ImputeFlat, ProvenanceRecordsDrawnParameters) {
  const auto d = oracle::synthetic_dataset({});
  const auto set = impute_mar_flat(d, 3, Link::probit, 1);
  ASSERT_EQ(set.provenance.size(), 3u);
  for (const auto& p : set.provenance) {
    EXPECT_EQ(p.zeta.size(), d.K() - 1);
    EXPECT_TRUE(strictly_increasing(p.zeta));
  }
  EXPECT_NE(set.provenance[0].stream, set.provenance[1].stream);
}

TEST(ImputeHier, RequiresClusters) {
  const auto flat = oracle::synthetic_dataset({});
  EXPECT_THROW(impute_mar_hier(flat, 3, quick_gibbs(), 1), DataError);
  oracle::SyntheticSpec s;
  s.clusters = 1;
  const auto one = oracle::synthetic_dataset(s);
  EXPECT_THROW(impute_mar_hier(one, 3, quick_gibbs(), 1), DataError);
}

TEST(ImputeHier, ValidatesConfig) {
  oracle::SyntheticSpec s;
  s.clusters = 4;
  const auto d = oracle::synthetic_dataset(s);
  GibbsConfig bad;
  bad.between = 0;
  EXPECT_THROW(impute_mar_hier(d, 3, bad, 1), DataError);
  bad = GibbsConfig{};
  bad.burn_in = -1;
  EXPECT_THROW(impute_mar_hier(d, 3, bad, 1), DataError);
  EXPECT_THROW(impute_mar_hier(d, 1, quick_gibbs(), 1), DataError);
}

TEST(ImputeHier, ObservedEntriesUntouchedAndDeterministic) {
  oracle::SyntheticSpec s;
  s.clusters = 6;
  s.cluster_sd = 0.5;
  const auto d = oracle::synthetic_dataset(s);
  const auto a = impute_mar_hier(d, 4, quick_gibbs(), 5);
  expect_observed_untouched(a, d);
  EXPECT_EQ(a.copies, impute_mar_hier(d, 4, quick_gibbs(), 5).copies);
  EXPECT_NE(a.copies, impute_mar_hier(d, 4, quick_gibbs(), 6).copies);
}

TEST(ImputeHier, PermutingMissingRowsPermutesImputations) {
  oracle::SyntheticSpec s;
  s.clusters = 5;
  s.cluster_sd = 0.4;
  const auto d = oracle::synthetic_dataset(s);
  const auto shuffled = shuffle_missing_rows(d, 9);
  const auto a = impute_mar_hier(d, 3, quick_gibbs(), 31);
  const auto b = impute_mar_hier(shuffled, 3, quick_gibbs(), 31);
  for (int m = 0; m < 3; ++m)
    EXPECT_EQ(by_content(shuffled, b.copies[static_cast<std::size_t>(m)]),
              by_content(d, a.copies[static_cast<std::size_t>(m)]));
}

TEST(ImputeHier, NoClusterVarianceMatchesFlatImputer) {
  oracle::SyntheticSpec s;
  s.n = 2000;
  s.clusters = 10;
  s.cluster_sd = 0.0;
  s.seed = 17;
  const auto d = oracle::synthetic_dataset(s);
  const auto flat = impute_mar_flat(d, 50, Link::probit, 40);
  const auto hier = impute_mar_hier(d, 50, quick_gibbs(), 41);
  EXPECT_GT(oracle::two_sample_chisq_p(imputed_counts(flat, d), imputed_counts(hier, d)), 0.01);
}

TEST(ImputeHier, PosteriorMeanTracksMaximumLikelihood) {
  oracle::SyntheticSpec s;
  s.n = 2000;
  s.clusters = 10;
  s.cluster_sd = 0.0;
  s.seed = 23;
  const auto d = oracle::synthetic_dataset(s);
  const auto fit = fit_cumulative(d, Link::probit);
  GibbsConfig g;
  g.burn_in = 300;
  g.between = 5;
  const auto set = impute_mar_hier(d, 200, g, 2);
  Eigen::VectorXd beta_mean = Eigen::VectorXd::Zero(set.provenance[0].beta.size());
  Eigen::VectorXd zeta_mean = Eigen::VectorXd::Zero(d.K() - 1);
  for (const auto& p : set.provenance) {
    beta_mean += p.beta / set.M;
    zeta_mean += p.zeta / set.M;
  }
  // The sampler fixes the first threshold at 0 and carries an intercept.
  const Eigen::VectorXd se = fit.vcov.diagonal().cwiseSqrt();
  for (Eigen::Index j = 0; j < fit.beta.size(); ++j) EXPECT_NEAR(beta_mean[j + 1], fit.beta[j], se[j]) << "beta " << j;
  EXPECT_NEAR(beta_mean[0], -fit.zeta[0], 1.5 * se[fit.beta.size()]);
  for (Eigen::Index k = 1; k < fit.zeta.size(); ++k)
    EXPECT_NEAR(zeta_mean[k], fit.zeta[k] - fit.zeta[0], 1.5 * se[fit.beta.size() + k]) << "zeta " << k;
  EXPECT_DOUBLE_EQ(zeta_mean[0], 0.0);
}
