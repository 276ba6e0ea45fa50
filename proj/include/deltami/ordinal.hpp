#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "deltami/dataset.hpp"
#include "deltami/distributions.hpp"
#include "deltami/errors.hpp"
#include "deltami/rng.hpp"

namespace deltami {

// ---------------------------------------------------------------------------
// Design of the X1 model: outcome first, then treatment-coded nominal
// covariates (first level is the reference). No intercept column; the
// thresholds play that role.

inline Eigen::MatrixXd ordinal_design(const Dataset& d) {
  Eigen::Index p = 1;
  for (const auto& c : d.covariates()) p += c.levels - 1;
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d.n()), p);
  for (std::size_t i = 0; i < d.n(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    X(r, 0) = d.outcome()[i];
    Eigen::Index col = 1;
    for (const auto& c : d.covariates()) {
      if (c.codes[i] > 1) X(r, col + c.codes[i] - 2) = 1.0;
      col += c.levels - 1;
    }
  }
  return X;
}

inline std::vector<std::string> ordinal_design_names(const Dataset& d) {
  std::vector<std::string> names{d.outcome_name()};
  for (const auto& c : d.covariates())
    for (int k = 2; k <= c.levels; ++k) names.push_back(c.name + "_" + std::to_string(k));
  return names;
}

// ---------------------------------------------------------------------------

/// Fitted cumulative-link model P(X1 <= k) = F(zeta_k - x'beta).
struct OrdinalFit {
  Eigen::VectorXd beta;
  Eigen::VectorXd zeta;  // K-1 strictly increasing thresholds
  Link link = Link::probit;
  Eigen::MatrixXd vcov;  // over (beta, zeta)
  double loglik = 0.0;
  bool converged = false;
  int iterations = 0;

  int K() const { return static_cast<int>(zeta.size()) + 1; }
  Eigen::Index p() const { return beta.size(); }
  Eigen::VectorXd params() const {
    Eigen::VectorXd theta(beta.size() + zeta.size());
    theta << beta, zeta;
    return theta;
  }
};

/// One stochastic draw of (beta, zeta) around a fit.
struct ParamDraw {
  Eigen::VectorXd beta;
  Eigen::VectorXd zeta;
};

struct OrdinalOptions {
  int max_iterations = 100;
  double gradient_tolerance = 1e-8;
  double divergence_bound = 30.0;  // |param| beyond this on the latent scale means separation
  bool require_convergence = true;
};

inline bool strictly_increasing(const Eigen::VectorXd& v) {
  for (Eigen::Index k = 1; k < v.size(); ++k)
    if (!(v[k] > v[k - 1])) return false;
  return true;
}

/// Category probabilities F(zeta_k - eta) - F(zeta_{k-1} - eta), with
/// zeta_0 = -inf and zeta_K = +inf.
inline Eigen::VectorXd category_probs(const Eigen::VectorXd& zeta, double eta, Link link) {
  const Eigen::Index K = zeta.size() + 1;
  Eigen::VectorXd p(K);
  double lower = -kInf;
  for (Eigen::Index k = 0; k < K; ++k) {
    const double upper = k + 1 < K ? zeta[k] - eta : kInf;
    p[k] = std::max(0.0, link_interval(link, lower, upper));
    lower = upper;
  }
  return p;
}

inline double linear_predictor(const OrdinalFit& fit, const Eigen::Ref<const Eigen::VectorXd>& row) {
  if (row.size() != fit.beta.size())
    throw DataError("design row has " + std::to_string(row.size()) + " entries, fit expects " +
                    std::to_string(fit.beta.size()));
  return fit.beta.dot(row);
}

inline Eigen::VectorXd category_probs(const OrdinalFit& fit, const Eigen::Ref<const Eigen::VectorXd>& row) {
  return category_probs(fit.zeta, linear_predictor(fit, row), fit.link);
}

// ---------------------------------------------------------------------------
// Log-likelihood with analytic derivatives

struct LogLikelihood {
  double value = 0.0;
  Eigen::VectorXd gradient;
  Eigen::MatrixXd hessian;  // empty unless requested
};

/// Log-likelihood of params = (beta, zeta) for responses y in 1..K.
inline LogLikelihood cumulative_loglik(const Eigen::VectorXd& params, const Eigen::MatrixXd& X, std::span<const int> y,
                                       int K, Link link, bool with_hessian = false) {
  const Eigen::Index p = X.cols();
  const Eigen::Index q = K - 1;
  if (params.size() != p + q) throw DataError("parameter vector has wrong length");
  if (static_cast<Eigen::Index>(y.size()) != X.rows()) throw DataError("response and design lengths differ");
  const Eigen::VectorXd beta = params.head(p);
  const Eigen::VectorXd zeta = params.tail(q);
  if (!strictly_increasing(zeta)) throw DataError("thresholds must be strictly increasing");

  const Eigen::VectorXd eta = X * beta;
  const Eigen::Index n = X.rows();
  LogLikelihood out;
  out.gradient = Eigen::VectorXd::Zero(p + q);
  Eigen::VectorXd d_eta(n);                                  // dl/d eta_i
  Eigen::VectorXd c_eta;                                     // d2l/d eta_i^2
  Eigen::MatrixXd c_cross;                                   // d2l/(d eta_i d zeta_k)
  Eigen::MatrixXd h_zeta = Eigen::MatrixXd::Zero(q, q);
  if (with_hessian) {
    c_eta.resize(n);
    c_cross = Eigen::MatrixXd::Zero(n, q);
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const int yi = y[static_cast<std::size_t>(i)];
    if (yi < 1 || yi > K) throw DataError("response outside 1..K");
    const double a = yi < K ? zeta[yi - 1] - eta[i] : kInf;
    const double b = yi > 1 ? zeta[yi - 2] - eta[i] : -kInf;
    const double P = link_interval(link, b, a);
    out.value += std::log(P);
    const double fa = link_pdf(link, a), fb = link_pdf(link, b);
    const double ga = fa / P, gb = fb / P;
    d_eta[i] = -(ga - gb);
    if (yi < K) out.gradient[p + yi - 1] += ga;
    if (yi > 1) out.gradient[p + yi - 2] -= gb;
    if (with_hessian) {
      const double haa = link_dpdf(link, a) / P - ga * ga;
      const double hbb = -link_dpdf(link, b) / P - gb * gb;
      const double hab = ga * gb;
      c_eta[i] = haa + hbb + 2.0 * hab;
      if (yi < K) {
        c_cross(i, yi - 1) = -(haa + hab);
        h_zeta(yi - 1, yi - 1) += haa;
      }
      if (yi > 1) {
        c_cross(i, yi - 2) = -(hbb + hab);
        h_zeta(yi - 2, yi - 2) += hbb;
      }
      if (yi > 1 && yi < K) {
        h_zeta(yi - 1, yi - 2) += hab;
        h_zeta(yi - 2, yi - 1) += hab;
      }
    }
  }
  out.gradient.head(p) = X.transpose() * d_eta;
  if (with_hessian) {
    out.hessian.resize(p + q, p + q);
    out.hessian.topLeftCorner(p, p) = X.transpose() * c_eta.asDiagonal() * X;
    out.hessian.topRightCorner(p, q) = X.transpose() * c_cross;
    out.hessian.bottomLeftCorner(q, p) = out.hessian.topRightCorner(p, q).transpose();
    out.hessian.bottomRightCorner(q, q) = h_zeta;
  }
  return out;
}

inline std::pair<double, Eigen::VectorXd> loglik_and_gradient(const Eigen::VectorXd& params, const Eigen::MatrixXd& X,
                                                              std::span<const int> y, int K, Link link) {
  auto ll = cumulative_loglik(params, X, y, K, link, false);
  return {ll.value, std::move(ll.gradient)};
}

// ---------------------------------------------------------------------------

/// Maximum likelihood by Newton-Raphson with step halving. Starts at beta = 0
/// and thresholds at the link quantiles of the empirical cumulative
/// proportions (the intercept-only solution).
inline OrdinalFit fit_cumulative(const Eigen::MatrixXd& X, std::span<const int> y, int K, Link link = Link::probit,
                                 const OrdinalOptions& opt = {}) {
  const Eigen::Index p = X.cols();
  const Eigen::Index q = K - 1;
  const Eigen::Index n = X.rows();
  if (K < 2) throw DataError("ordinal response needs at least two categories");

  std::vector<double> counts(static_cast<std::size_t>(K), 0.0);
  for (int v : y) {
    if (v < 1 || v > K) throw DataError("response outside 1..K");
    counts[static_cast<std::size_t>(v - 1)] += 1.0;
  }
  int present = 0;
  for (double c : counts) present += c > 0 ? 1 : 0;
  if (present < 2) throw FitError("ordinal fit needs observations in at least two categories");
  for (int k = 0; k < K; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw FitError("ordinal fit: category " + std::to_string(k + 1) + " has no observations");

  {
    Eigen::MatrixXd Z(n, p + 1);
    Z << Eigen::VectorXd::Ones(n), X;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Z);
    qr.setThreshold(1e-10);
    if (qr.rank() < p + 1) throw FitError("ordinal fit: design matrix is rank deficient");
  }

  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p + q);
  double cum = 0.0;
  for (Eigen::Index k = 0; k < q; ++k) {
    cum += counts[static_cast<std::size_t>(k)];
    theta[p + k] = link_quantile(link, cum / static_cast<double>(n));
  }

  OrdinalFit fit;
  fit.link = link;
  LogLikelihood ll = cumulative_loglik(theta, X, y, K, link, true);
  int iter = 0;
  for (; iter < opt.max_iterations; ++iter) {
    Eigen::MatrixXd info = -ll.hessian;
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    double ridge = 0.0;
    while (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0.0) {
      ridge = ridge == 0.0 ? 1e-8 * std::max(1.0, info.diagonal().cwiseAbs().maxCoeff()) : ridge * 10.0;
      ldlt.compute(info + ridge * Eigen::MatrixXd::Identity(p + q, p + q));
      if (ridge > 1e12) throw FitError("ordinal fit: information matrix cannot be regularized");
    }
    const Eigen::VectorXd step = ldlt.solve(ll.gradient);
    // A flat gradient with a large Newton step means the optimum is at
    // infinity (separation); keep stepping so the divergence check fires.
    if (ll.gradient.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance && step.lpNorm<Eigen::Infinity>() < 1e-4) {
      fit.converged = true;
      break;
    }
    double t = 1.0;
    bool accepted = false;
    for (int h = 0; h < 40; ++h, t *= 0.5) {
      const Eigen::VectorXd cand = theta + t * step;
      if (!strictly_increasing(cand.tail(q))) continue;
      LogLikelihood cl = cumulative_loglik(cand, X, y, K, link, true);
      if (std::isfinite(cl.value) && cl.value >= ll.value - 1e-10 * std::max(1.0, std::abs(ll.value))) {
        theta = cand;
        ll = std::move(cl);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;
    if (theta.cwiseAbs().maxCoeff() > opt.divergence_bound)
      throw FitError("ordinal fit: complete separation (a parameter diverged past the latent-scale bound)");
  }
  if (!fit.converged && opt.require_convergence)
    throw FitError("ordinal fit did not converge (gradient sup-norm " +
                   std::to_string(ll.gradient.lpNorm<Eigen::Infinity>()) + ")");

  fit.iterations = iter;
  fit.beta = theta.head(p);
  fit.zeta = theta.tail(q);
  fit.loglik = ll.value;
  Eigen::LDLT<Eigen::MatrixXd> info(-ll.hessian);
  if (info.info() != Eigen::Success || !info.isPositive()) throw FitError("ordinal fit: singular information matrix");
  fit.vcov = info.solve(Eigen::MatrixXd::Identity(p + q, p + q));
  fit.vcov = 0.5 * (fit.vcov + fit.vcov.transpose()).eval();
  return fit;
}

/// X1 model over the observed rows of a dataset.
inline OrdinalFit fit_cumulative(const Dataset& d, Link link = Link::probit, const OrdinalOptions& opt = {}) {
  const auto rows = d.observed_rows();
  const Eigen::MatrixXd full = ordinal_design(d);
  Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), full.cols());
  std::vector<int> y(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    X.row(static_cast<Eigen::Index>(r)) = full.row(static_cast<Eigen::Index>(rows[r]));
    y[r] = d.x1()[rows[r]];
  }
  return fit_cumulative(X, y, d.K(), link, opt);
}

// ---------------------------------------------------------------------------

/// Multivariate normal sampler centred on a fit with covariance vcov.
/// Draws whose thresholds are not strictly increasing are rejected.
class ParamSampler {
 public:
  explicit ParamSampler(const OrdinalFit& fit) : mean_(fit.params()), p_(fit.p()) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.vcov);
    if (es.info() != Eigen::Success) throw FitError("parameter covariance decomposition failed");
    const Eigen::VectorXd root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    factor_ = es.eigenvectors() * root.asDiagonal();
  }

  ParamDraw draw(Rng& rng, int max_tries = 100) const {
    Eigen::VectorXd z(mean_.size());
    for (int attempt = 0; attempt < max_tries; ++attempt) {
      for (Eigen::Index j = 0; j < z.size(); ++j) z[j] = rng.normal();
      const Eigen::VectorXd theta = mean_ + factor_ * z;
      if (strictly_increasing(theta.tail(mean_.size() - p_))) return {theta.head(p_), theta.tail(mean_.size() - p_)};
    }
    throw FitError("parameter draw: thresholds not increasing after " + std::to_string(max_tries) + " attempts");
  }

 private:
  Eigen::VectorXd mean_;
  Eigen::Index p_;
  Eigen::MatrixXd factor_;
};

inline ParamDraw draw_params(const OrdinalFit& fit, Rng& rng) { return ParamSampler(fit).draw(rng); }

}  // namespace deltami
