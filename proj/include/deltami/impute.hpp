#pragma once

#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include "deltami/csv.hpp"
#include "deltami/dataset.hpp"
#include "deltami/distributions.hpp"
#include "deltami/errors.hpp"
#include "deltami/ordinal.hpp"
#include "deltami/parallel.hpp"
#include "deltami/rng.hpp"

namespace deltami {

struct CopyProvenance {
  std::uint64_t stream = 0;  // seed of the copy's random stream
  Eigen::VectorXd beta;      // parameter state used for the copy
  Eigen::VectorXd zeta;
};

/// M completed versions of X1. Observed entries are identical in every copy.
struct ImputationSet {
  int M = 0;
  int K = 0;
  std::vector<std::vector<int>> copies;
  std::vector<CopyProvenance> provenance;
};

/// Latent probit Gibbs sampler settings for the clustered imputer.
struct GibbsConfig {
  int burn_in = 1000;
  int between = 100;
  double tau_shape = 0.5;  // inverse-gamma prior on the cluster-intercept variance
  double tau_scale = 0.5;

  void validate() const {
    if (burn_in < 0) throw DataError("gibbs burn-in must be >= 0");
    if (between < 1) throw DataError("gibbs thinning interval must be >= 1");
    if (!(tau_shape > 0) || !(tau_scale > 0)) throw DataError("gibbs prior shape and scale must be positive");
  }
};

/// Checks that a set of copies is consistent with the dataset it completes.
inline void check_consistent(const ImputationSet& set, const Dataset& d) {
  if (set.K != d.K()) throw DataError("imputation set has K=" + std::to_string(set.K) + ", dataset has K=" + std::to_string(d.K()));
  if (static_cast<int>(set.copies.size()) != set.M) throw DataError("imputation set size does not match M");
  for (std::size_t m = 0; m < set.copies.size(); ++m) {
    const auto& c = set.copies[m];
    if (c.size() != d.n()) throw DataError("imputation " + std::to_string(m + 1) + " has the wrong number of rows");
    for (std::size_t i = 0; i < d.n(); ++i) {
      if (c[i] < 1 || c[i] > d.K())
        throw DataError("imputation " + std::to_string(m + 1) + ", row " + std::to_string(i + 1) + ": value outside 1..K");
      if (!d.missing(i) && c[i] != d.x1()[i])
        throw DataError("imputation " + std::to_string(m + 1) + ", row " + std::to_string(i + 1) +
                        ": observed entry was altered");
    }
  }
}

/// Per-row keys for counter-based draws. A key depends on the row's own
/// content (outcome, covariates, cluster) and on how many earlier rows in
/// `rows` share that content, so permuting rows permutes their draws.
inline std::vector<std::uint64_t> row_keys(const Dataset& d, const std::vector<std::size_t>& rows) {
  std::map<std::uint64_t, std::uint64_t> seen;
  std::vector<std::uint64_t> keys;
  keys.reserve(rows.size());
  for (std::size_t i : rows) {
    std::uint64_t h = mix64(std::bit_cast<std::uint64_t>(d.outcome()[i]));
    for (const auto& c : d.covariates()) h = mix64(h ^ static_cast<std::uint64_t>(c.codes[i]));
    if (d.cluster()) h = mix64(h ^ (static_cast<std::uint64_t>(d.cluster()->codes[i]) << 32));
    const std::uint64_t occurrence = seen[h]++;
    keys.push_back(mix64(h ^ mix64(occurrence + 0x51ed270b27b5e3a1ULL)));
  }
  return keys;
}

/// Category with cumulative probability first reaching u, i.e. inverse-CDF
/// sampling from category_probs(zeta, eta).
inline int sample_category(const Eigen::VectorXd& zeta, double eta, Link link, double u) {
  const Eigen::Index q = zeta.size();
  for (Eigen::Index k = 0; k < q; ++k)
    if (u <= link_cdf(link, zeta[k] - eta)) return static_cast<int>(k) + 1;
  return static_cast<int>(q) + 1;
}

/// Proper MAR imputation without clustering: fit the X1 model on observed
/// rows, then for each copy draw parameters from the approximate posterior
/// and sample each missing cell from the implied category probabilities.
inline ImputationSet impute_mar_flat(const Dataset& d, int M, Link link, std::uint64_t seed, unsigned threads = 1) {
  if (M < 2) throw DataError("need at least M = 2 imputations");
  ImputationSet set;
  set.M = M;
  set.K = d.K();
  set.copies.assign(static_cast<std::size_t>(M), d.x1());
  set.provenance.resize(static_cast<std::size_t>(M));
  const auto missing = d.missing_rows();
  if (missing.empty()) return set;

  const OrdinalFit fit = fit_cumulative(d, link);
  const ParamSampler sampler(fit);
  const Eigen::MatrixXd X = ordinal_design(d);
  const auto keys = row_keys(d, missing);

  parallel_for(static_cast<std::size_t>(M), threads, [&](std::size_t m) {
    const std::uint64_t stream = derive_seed(seed, {m, tag("impute-flat")});
    Rng rng(stream);
    const ParamDraw draw = sampler.draw(rng);
    auto& copy = set.copies[m];
    for (std::size_t r = 0; r < missing.size(); ++r) {
      const auto i = static_cast<Eigen::Index>(missing[r]);
      const double eta = X.row(i).dot(draw.beta);
      copy[missing[r]] = sample_category(draw.zeta, eta, link, keyed_uniform(stream ^ keys[r], 0));
    }
    set.provenance[m] = {stream, draw.beta, draw.zeta};
  });
  return set;
}

namespace detail {

/// State and data of the random-intercept latent probit sampler. The latent
/// scale has unit residual variance; location is fixed by zeta_1 = 0 and an
/// explicit intercept.
class LatentProbitChain {
 public:
  LatentProbitChain(const Dataset& d, const GibbsConfig& cfg, std::uint64_t seed)
      : cfg_(cfg), K_(d.K()), G_(d.G()), rng_(derive_seed(seed, {tag("impute-hier-chain")})) {
    const Eigen::MatrixXd full = ordinal_design(d);
    const auto obs = d.observed_rows();
    const auto n = static_cast<Eigen::Index>(obs.size());
    X_.resize(n, full.cols() + 1);
    y_.resize(obs.size());
    cluster_.resize(obs.size());
    cluster_size_ = Eigen::VectorXd::Zero(G_);
    for (Eigen::Index r = 0; r < n; ++r) {
      const std::size_t i = obs[static_cast<std::size_t>(r)];
      X_(r, 0) = 1.0;
      X_.row(r).tail(full.cols()) = full.row(static_cast<Eigen::Index>(i));
      y_[static_cast<std::size_t>(r)] = d.x1()[i];
      cluster_[static_cast<std::size_t>(r)] = d.cluster()->codes[i] - 1;
      cluster_size_[cluster_[static_cast<std::size_t>(r)]] += 1.0;
    }
    const Eigen::MatrixXd xtx = X_.transpose() * X_;
    xtx_llt_.compute(xtx);
    if (xtx_llt_.info() != Eigen::Success) throw FitError("hierarchical imputer: design matrix is rank deficient");

    // Start from the single-level probit fit, re-expressed with zeta_1 = 0.
    const OrdinalFit start = fit_cumulative(d, Link::probit);
    beta_.resize(X_.cols());
    beta_[0] = -start.zeta[0];
    beta_.tail(start.beta.size()) = start.beta;
    zeta_ = (start.zeta.array() - start.zeta[0]).matrix();
    u_ = Eigen::VectorXd::Zero(G_);
    tau2_ = 0.1;
    latent_ = Eigen::VectorXd::Zero(n);
    update_mean();
    draw_latents();
  }

  void sweep(bool adapting) {
    update_mean();
    update_thresholds(adapting);
    draw_latents();
    update_beta();
    update_intercepts();
    update_tau2();
  }

  /// Linear predictor of a design row (without intercept column) in a cluster.
  double mean_of(const Eigen::Ref<const Eigen::RowVectorXd>& design_row, int cluster_index) const {
    return beta_[0] + design_row.dot(beta_.tail(beta_.size() - 1)) + u_[cluster_index];
  }
  const Eigen::VectorXd& zeta() const { return zeta_; }
  const Eigen::VectorXd& beta() const { return beta_; }
  double tau2() const { return tau2_; }

 private:
  void update_mean() {
    mean_ = X_ * beta_;
    for (std::size_t r = 0; r < cluster_.size(); ++r) mean_[static_cast<Eigen::Index>(r)] += u_[cluster_[r]];
  }

  double bound(int k) const {  // zeta_k with zeta_0 = -inf, zeta_K = +inf
    if (k <= 0) return -kInf;
    if (k >= K_) return kInf;
    return zeta_[k - 1];
  }

  void draw_latents() {
    auto uniform = [this] { return rng_.uniform(); };
    for (Eigen::Index r = 0; r < latent_.size(); ++r) {
      const int y = y_[static_cast<std::size_t>(r)];
      const double v = truncated_normal(mean_[r], 1.0, bound(y - 1), bound(y), uniform);
      if (!(std::abs(v) <= 40.0)) throw FitError("hierarchical imputer diverged (latent value beyond 40)");
      latent_[r] = v;
    }
  }

  double threshold_loglik(const Eigen::VectorXd& zeta) const {
    double total = 0.0;
    for (Eigen::Index r = 0; r < latent_.size(); ++r) {
      const int y = y_[static_cast<std::size_t>(r)];
      if (y == 1) continue;  // depends only on the fixed first threshold
      const double hi = y < K_ ? zeta[y - 1] - mean_[r] : kInf;
      const double lo = zeta[y - 2] - mean_[r];
      total += std::log(link_interval(Link::probit, lo, hi));
    }
    return total;
  }

  // Metropolis-Hastings update of the free thresholds with the latent values
  // integrated out, using ordered truncated-normal proposals.
  void update_thresholds(bool adapting) {
    if (K_ < 3) return;
    auto uniform = [this] { return rng_.uniform(); };
    Eigen::VectorXd prop = zeta_;
    double log_q = 0.0;
    const double s = step_;
    for (int k = 1; k < K_ - 1; ++k) {
      const double lo = prop[k - 1];
      const double hi = k + 1 < K_ - 1 ? zeta_[k + 1] : kInf;
      prop[k] = truncated_normal(zeta_[k], s, lo, hi, uniform);
    }
    for (int k = 1; k < K_ - 1; ++k) {
      const double cur_hi = k + 1 < K_ - 1 ? zeta_[k + 1] : kInf;
      const double new_hi = k + 1 < K_ - 1 ? prop[k + 1] : kInf;
      log_q += std::log(norm_cdf((cur_hi - zeta_[k]) / s) - norm_cdf((prop[k - 1] - zeta_[k]) / s));
      log_q -= std::log(norm_cdf((new_hi - prop[k]) / s) - norm_cdf((zeta_[k - 1] - prop[k]) / s));
    }
    const double log_ratio = threshold_loglik(prop) - threshold_loglik(zeta_) + log_q;
    const bool accept = std::log(rng_.uniform()) <= log_ratio;
    if (accept) zeta_ = prop;
    if (adapting) {
      ++proposals_;
      accepted_ += accept ? 1 : 0;
      if (proposals_ == 50) {
        const double rate = static_cast<double>(accepted_) / proposals_;
        if (rate > 0.45) step_ *= 1.3;
        if (rate < 0.2) step_ *= 0.7;
        proposals_ = accepted_ = 0;
      }
    }
  }

  void update_beta() {
    Eigen::VectorXd resid = latent_;
    for (std::size_t r = 0; r < cluster_.size(); ++r) resid[static_cast<Eigen::Index>(r)] -= u_[cluster_[r]];
    const Eigen::VectorXd mean = xtx_llt_.solve(X_.transpose() * resid);
    Eigen::VectorXd z(mean.size());
    for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng_.normal();
    // (L L')^{-1} = L'^{-1} L^{-1}, so L'^{-1} z has the posterior covariance.
    beta_ = mean + xtx_llt_.matrixU().solve(z);
  }

  void update_intercepts() {
    Eigen::VectorXd sums = Eigen::VectorXd::Zero(G_);
    const Eigen::VectorXd fixed = X_ * beta_;
    for (std::size_t r = 0; r < cluster_.size(); ++r)
      sums[cluster_[r]] += latent_[static_cast<Eigen::Index>(r)] - fixed[static_cast<Eigen::Index>(r)];
    for (int g = 0; g < G_; ++g) {
      const double precision = cluster_size_[g] + 1.0 / tau2_;
      u_[g] = sums[g] / precision + rng_.normal() / std::sqrt(precision);
    }
  }

  void update_tau2() {
    const double shape = cfg_.tau_shape + 0.5 * G_;
    const double rate = cfg_.tau_scale + 0.5 * u_.squaredNorm();
    tau2_ = 1.0 / rng_.gamma(shape, 1.0 / rate);
  }

  GibbsConfig cfg_;
  int K_;
  int G_;
  Rng rng_;
  Eigen::MatrixXd X_;  // observed rows, intercept first
  std::vector<int> y_;
  std::vector<int> cluster_;
  Eigen::VectorXd cluster_size_;
  Eigen::LLT<Eigen::MatrixXd> xtx_llt_;
  Eigen::VectorXd beta_, zeta_, u_, latent_, mean_;
  double tau2_ = 0.1;
  double step_ = 0.05;
  int proposals_ = 0, accepted_ = 0;
};

}  // namespace detail

/// Proper MAR imputation with a cluster random intercept: a latent probit
/// Gibbs sampler over observed rows. After burn-in, every `between` sweeps
/// each missing cell gets a latent draw from the current state, classified
/// through the current thresholds.
inline ImputationSet impute_mar_hier(const Dataset& d, int M, const GibbsConfig& cfg, std::uint64_t seed) {
  if (M < 2) throw DataError("need at least M = 2 imputations");
  cfg.validate();
  if (!d.cluster()) throw DataError("hierarchical imputation needs a cluster column");
  if (d.G() < 2) throw DataError("hierarchical imputation needs at least 2 clusters");

  ImputationSet set;
  set.M = M;
  set.K = d.K();
  set.copies.assign(static_cast<std::size_t>(M), d.x1());
  set.provenance.resize(static_cast<std::size_t>(M));
  const auto missing = d.missing_rows();
  if (missing.empty()) return set;

  const Eigen::MatrixXd X = ordinal_design(d);
  const auto keys = row_keys(d, missing);
  detail::LatentProbitChain chain(d, cfg, seed);
  for (int s = 0; s < cfg.burn_in; ++s) chain.sweep(true);
  for (int m = 0; m < M; ++m) {
    for (int s = 0; s < cfg.between; ++s) chain.sweep(false);
    const std::uint64_t stream = derive_seed(seed, {static_cast<std::uint64_t>(m), tag("impute-hier-draw")});
    auto& copy = set.copies[static_cast<std::size_t>(m)];
    for (std::size_t r = 0; r < missing.size(); ++r) {
      const std::size_t i = missing[r];
      const double mu = chain.mean_of(X.row(static_cast<Eigen::Index>(i)), d.cluster()->codes[i] - 1);
      const double latent = mu + keyed_normal(stream ^ keys[r], 0);
      if (!(std::abs(latent) <= 40.0)) throw FitError("hierarchical imputer diverged (latent value beyond 40)");
      int k = 1;
      while (k < d.K() && latent > chain.zeta()[k - 1]) ++k;
      copy[i] = k;
    }
    set.provenance[static_cast<std::size_t>(m)] = {stream, chain.beta(), chain.zeta()};
  }
  return set;
}

/// Long format: one line per (imputation, row), rows numbered from 1.
inline void write_imputations_long_csv(std::ostream& out, const ImputationSet& set, const Dataset& d) {
  check_consistent(set, d);
  csv::write_row(out, std::vector<std::string>{"imputation", "row", d.x1_name()});
  for (std::size_t m = 0; m < set.copies.size(); ++m)
    for (std::size_t i = 0; i < d.n(); ++i)
      csv::write_row(out, std::vector<std::string>{std::to_string(m + 1), std::to_string(i + 1),
                                                   std::to_string(set.copies[m][i])});
}

inline ImputationSet parse_imputations_long_csv(std::string_view text, const Dataset& d) {
  const auto rows = csv::parse(text);
  if (rows.empty()) throw DataError("imputation file is empty");
  if (rows[0].size() != 3 || rows[0][0] != "imputation" || rows[0][1] != "row")
    throw DataError("imputation file needs columns imputation,row,<X1>");
  auto number = [](const std::string& s, std::size_t line) {
    long v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size())
      throw DataError("imputation file line " + std::to_string(line) + ": '" + s + "' is not an integer");
    return v;
  };
  ImputationSet set;
  set.K = d.K();
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.size() != 3) throw DataError("imputation file line " + std::to_string(r + 1) + " has the wrong width");
    const long m = number(row[0], r + 1), i = number(row[1], r + 1);
    const long v = number(row[2], r + 1);
    if (m < 1 || i < 1 || static_cast<std::size_t>(i) > d.n())
      throw DataError("imputation file line " + std::to_string(r + 1) + " is out of range");
    if (static_cast<std::size_t>(m) > set.copies.size()) set.copies.resize(static_cast<std::size_t>(m), std::vector<int>(d.n(), 0));
    set.copies[static_cast<std::size_t>(m - 1)][static_cast<std::size_t>(i - 1)] = static_cast<int>(v);
  }
  set.M = static_cast<int>(set.copies.size());
  for (std::size_t m = 0; m < set.copies.size(); ++m)
    for (std::size_t i = 0; i < d.n(); ++i)
      if (set.copies[m][i] == 0)
        throw DataError("imputation " + std::to_string(m + 1) + " has no value for row " + std::to_string(i + 1));
  check_consistent(set, d);
  return set;
}

}  // namespace deltami
