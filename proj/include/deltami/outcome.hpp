#pragma once

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "deltami/dataset.hpp"
#include "deltami/distributions.hpp"
#include "deltami/errors.hpp"
#include "deltami/parallel.hpp"

namespace deltami {

enum class OutcomeModel { logistic, logistic_ri, linear };

inline std::string to_string(OutcomeModel m) {
  switch (m) {
    case OutcomeModel::logistic: return "glm-logit";
    case OutcomeModel::logistic_ri: return "glmm-logit-ri";
    case OutcomeModel::linear: return "linear";
  }
  return "?";
}

inline OutcomeModel parse_outcome_model(const std::string& s) {
  if (s == "glm-logit" || s == "logistic") return OutcomeModel::logistic;
  if (s == "glmm-logit-ri" || s == "glmm") return OutcomeModel::logistic_ri;
  if (s == "linear") return OutcomeModel::linear;
  throw DataError("unknown outcome model '" + s + "' (expected glm-logit, glmm-logit-ri or linear)");
}

/// Reference category per variable name; variables not listed use category 1.
using ReferenceCategories = std::map<std::string, int>;

struct OutcomeDesign {
  Eigen::MatrixXd X;  // intercept, X1 dummies, covariate dummies
  Eigen::VectorXd y;
  std::vector<std::string> names;
};

/// Dummy-coded outcome-model design for a dataset whose X1 is complete.
/// Coefficient names are the variable name followed by the category code,
/// e.g. X13 for X1 = 3.
inline OutcomeDesign outcome_design(const Dataset& d, const ReferenceCategories& reference = {}) {
  if (d.missing_count() > 0) throw DataError("outcome model needs a completed X1 column");
  for (const auto& [name, code] : reference) {
    bool known = name == d.x1_name();
    int levels = d.K();
    for (const auto& c : d.covariates())
      if (c.name == name) {
        known = true;
        levels = c.levels;
      }
    if (!known) throw DataError("reference category given for unknown variable '" + name + "'");
    if (code < 1 || code > levels) throw DataError("reference category for '" + name + "' is out of range");
  }
  auto ref = [&](const std::string& name) {
    auto it = reference.find(name);
    return it == reference.end() ? 1 : it->second;
  };

  struct Block {
    std::string name;
    int levels;
    const std::vector<int>* codes;
  };
  std::vector<Block> blocks{{d.x1_name(), d.K(), &d.x1()}};
  for (const auto& c : d.covariates()) blocks.push_back({c.name, c.levels, &c.codes});

  OutcomeDesign out;
  out.names.push_back("(Intercept)");
  std::vector<std::pair<std::size_t, int>> columns;  // block index, category
  for (std::size_t b = 0; b < blocks.size(); ++b)
    for (int k = 1; k <= blocks[b].levels; ++k)
      if (k != ref(blocks[b].name)) {
        columns.emplace_back(b, k);
        out.names.push_back(blocks[b].name + std::to_string(k));
      }
  const auto n = static_cast<Eigen::Index>(d.n());
  out.X = Eigen::MatrixXd::Zero(n, static_cast<Eigen::Index>(columns.size()) + 1);
  out.X.col(0).setOnes();
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const auto& [b, k] = columns[c];
    const auto& codes = *blocks[b].codes;
    for (Eigen::Index i = 0; i < n; ++i)
      if (codes[static_cast<std::size_t>(i)] == k) out.X(i, static_cast<Eigen::Index>(c) + 1) = 1.0;
  }
  out.y = Eigen::Map<const Eigen::VectorXd>(d.outcome().data(), n);
  return out;
}

struct OutcomeFit {
  OutcomeModel model = OutcomeModel::logistic;
  std::vector<std::string> names;
  Eigen::VectorXd coefficients;
  Eigen::VectorXd se;
  Eigen::MatrixXd vcov;
  double loglik = 0.0;
  int iterations = 0;
  std::optional<double> ri_sd;  // random-intercept SD, GLMM only
  bool boundary = false;        // SD estimate at zero
};

namespace detail {

inline void check_rank(const Eigen::MatrixXd& X, const char* what) {
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  qr.setThreshold(1e-10);
  if (qr.rank() < X.cols())
    throw FitError(std::string(what) + ": design matrix is rank deficient (an empty category or collinear columns)");
}

inline Eigen::MatrixXd inverse_spd(const Eigen::MatrixXd& A, const char* what) {
  Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
  if (ldlt.info() != Eigen::Success || !ldlt.isPositive() || ldlt.vectorD().minCoeff() <= 0)
    throw FitError(std::string(what) + ": information matrix is not positive definite");
  Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
  return 0.5 * (inv + inv.transpose());
}

inline double binary_loglik(double y, double eta, double weight = 1.0) {
  // log p for y = 1, log(1 - p) for y = 0
  return -weight * (y > 0.5 ? log1pexp(-eta) : log1pexp(eta));
}

}  // namespace detail

struct LogisticOptions {
  int max_iterations = 50;
  double tolerance = 1e-8;  // sup-norm of the coefficient change
  double divergence_bound = 30.0;
};

/// Logistic regression by iteratively reweighted least squares.
inline OutcomeFit fit_logistic(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::vector<std::string> names,
                               const LogisticOptions& opt = {}) {
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] != 0.0 && y[i] != 1.0) throw DataError("logistic model needs a 0/1 outcome");
  detail::check_rank(X, "logistic fit");
  const Eigen::Index p = X.cols();
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(p);
  OutcomeFit fit;
  fit.model = OutcomeModel::logistic;
  fit.names = std::move(names);
  bool converged = false;
  Eigen::MatrixXd info(p, p);
  for (int it = 1; it <= opt.max_iterations && !converged; ++it) {
    const Eigen::VectorXd eta = X * beta;
    Eigen::VectorXd w(eta.size()), score_terms(eta.size());
    for (Eigen::Index i = 0; i < eta.size(); ++i) {
      const double pi = logistic(eta[i]);
      w[i] = pi * (1.0 - pi);
      score_terms[i] = y[i] - pi;
    }
    info = X.transpose() * w.asDiagonal() * X;
    const Eigen::VectorXd step = info.ldlt().solve(X.transpose() * score_terms);
    if (!step.allFinite()) throw FitError("logistic fit: numerical failure (possible separation)");
    beta += step;
    fit.iterations = it;
    if (beta.cwiseAbs().maxCoeff() > opt.divergence_bound)
      throw FitError("logistic fit: complete or quasi-complete separation (a coefficient diverged)");
    converged = step.cwiseAbs().maxCoeff() < opt.tolerance;
  }
  if (!converged) throw FitError("logistic fit did not converge in " + std::to_string(opt.max_iterations) + " iterations");
  const Eigen::VectorXd eta = X * beta;
  Eigen::VectorXd w(eta.size());
  fit.loglik = 0.0;
  for (Eigen::Index i = 0; i < eta.size(); ++i) {
    const double pi = logistic(eta[i]);
    w[i] = pi * (1.0 - pi);
    fit.loglik += detail::binary_loglik(y[i], eta[i]);
  }
  fit.coefficients = beta;
  fit.vcov = detail::inverse_spd(X.transpose() * w.asDiagonal() * X, "logistic fit");
  fit.se = fit.vcov.diagonal().cwiseSqrt();
  return fit;
}

inline OutcomeFit fit_logistic(const Dataset& d, const ReferenceCategories& reference = {}) {
  if (d.outcome_kind() != OutcomeKind::binary) throw DataError("logistic model needs a binary outcome");
  auto design = outcome_design(d, reference);
  return fit_logistic(design.X, design.y, std::move(design.names));
}

/// Ordinary least squares with the classical covariance estimate.
inline OutcomeFit fit_linear(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, std::vector<std::string> names) {
  detail::check_rank(X, "linear fit");
  if (X.rows() <= X.cols()) throw FitError("linear fit: no residual degrees of freedom");
  OutcomeFit fit;
  fit.model = OutcomeModel::linear;
  fit.names = std::move(names);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  fit.coefficients = qr.solve(y);
  const Eigen::VectorXd resid = y - X * fit.coefficients;
  const double n = static_cast<double>(X.rows());
  const double rss = resid.squaredNorm();
  const double sigma2 = rss / (n - static_cast<double>(X.cols()));
  fit.vcov = sigma2 * detail::inverse_spd(X.transpose() * X, "linear fit");
  fit.se = fit.vcov.diagonal().cwiseSqrt();
  const double s2_ml = rss / n;
  fit.loglik = -0.5 * n * (std::log(2.0 * std::numbers::pi * s2_ml) + 1.0);
  fit.iterations = 1;
  return fit;
}

inline OutcomeFit fit_linear(const Dataset& d, const ReferenceCategories& reference = {}) {
  if (d.outcome_kind() != OutcomeKind::continuous) throw DataError("linear model needs a continuous outcome");
  auto design = outcome_design(d, reference);
  return fit_linear(design.X, design.y, std::move(design.names));
}

// ---------------------------------------------------------------------------
// Random-intercept logistic regression

/// Gauss-Hermite rule for the weight exp(-x^2), by the Golub-Welsch method.
struct GaussHermite {
  Eigen::VectorXd nodes;
  Eigen::VectorXd weights;

  explicit GaussHermite(int n) {
    if (n < 1) throw DataError("quadrature needs at least one node");
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) J(k, k - 1) = J(k - 1, k) = std::sqrt(k / 2.0);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(J);
    nodes = es.eigenvalues();
    weights = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square();
  }
};

struct GlmmOptions {
  int quadrature_nodes = 15;
  double gradient_tolerance = 1e-6;
  int max_iterations = 500;  // quasi-Newton iterations per recentring
  int max_recentrings = 30;
  double log_sd_floor = -10.0;
  double boundary_sd = 1e-3;
};

namespace detail {

/// Clustered binary data with identical (design row, outcome) rows merged
/// into weighted patterns.
struct ClusteredPatterns {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd weight;
  std::vector<Eigen::Index> start;  // cluster g owns patterns [start[g], start[g+1])
};

inline ClusteredPatterns collapse_patterns(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                           const std::vector<int>& cluster, int G) {
  std::vector<std::vector<Eigen::Index>> members(static_cast<std::size_t>(G));
  for (Eigen::Index i = 0; i < X.rows(); ++i) members[static_cast<std::size_t>(cluster[static_cast<std::size_t>(i)] - 1)].push_back(i);
  std::vector<Eigen::Index> rows;
  std::vector<double> weights;
  ClusteredPatterns out;
  for (int g = 0; g < G; ++g) {
    out.start.push_back(static_cast<Eigen::Index>(rows.size()));
    std::map<std::vector<double>, std::size_t> index;
    for (Eigen::Index i : members[static_cast<std::size_t>(g)]) {
      std::vector<double> key;
      key.reserve(static_cast<std::size_t>(X.cols()) + 1);
      for (Eigen::Index j = 0; j < X.cols(); ++j) key.push_back(X(i, j));
      key.push_back(y[i]);
      auto [it, inserted] = index.emplace(std::move(key), rows.size());
      if (inserted) {
        rows.push_back(i);
        weights.push_back(1.0);
      } else {
        weights[it->second] += 1.0;
      }
    }
  }
  out.start.push_back(static_cast<Eigen::Index>(rows.size()));
  out.X.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
  out.y.resize(static_cast<Eigen::Index>(rows.size()));
  out.weight = Eigen::Map<Eigen::VectorXd>(weights.data(), static_cast<Eigen::Index>(weights.size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.X.row(static_cast<Eigen::Index>(r)) = X.row(rows[r]);
    out.y[static_cast<Eigen::Index>(r)] = y[rows[r]];
  }
  return out;
}

/// Marginal log-likelihood of the random-intercept logistic model with the
/// quadrature locations of each cluster held fixed. Parameters are
/// (beta, log sd).
class AghqObjective {
 public:
  AghqObjective(const ClusteredPatterns& data, const GaussHermite& rule, double log_sd_floor)
      : data_(data), rule_(rule), floor_(log_sd_floor) {
    const auto G = static_cast<Eigen::Index>(data.start.size()) - 1;
    mode_ = Eigen::VectorXd::Zero(G);
    scale_ = Eigen::VectorXd::Ones(G);
  }

  Eigen::Index clusters() const { return mode_.size(); }

  /// Moves each cluster's nodes to the mode and curvature of its integrand.
  void recentre(const Eigen::VectorXd& params) {
    const Eigen::Index p = params.size() - 1;
    const Eigen::VectorXd eta = data_.X * params.head(p);
    const double sd = std::exp(std::max(params[p], floor_));
    const double prec = 1.0 / (sd * sd);
    for (Eigen::Index g = 0; g < clusters(); ++g) {
      double u = mode_[g];
      double curvature = prec;
      for (int it = 0; it < 100; ++it) {
        double grad = -u * prec;
        curvature = prec;
        for (Eigen::Index r = data_.start[static_cast<std::size_t>(g)]; r < data_.start[static_cast<std::size_t>(g) + 1]; ++r) {
          const double pi = logistic(eta[r] + u);
          grad += data_.weight[r] * (data_.y[r] - pi);
          curvature += data_.weight[r] * pi * (1.0 - pi);
        }
        const double step = grad / curvature;
        u += step;
        if (std::abs(step) < 1e-10) break;
      }
      mode_[g] = u;
      scale_[g] = 1.0 / std::sqrt(curvature);
    }
  }

  /// Value and gradient at params.
  double evaluate(const Eigen::VectorXd& params, Eigen::VectorXd* gradient) const {
    const Eigen::Index p = params.size() - 1;
    const Eigen::Index q = rule_.nodes.size();
    const Eigen::VectorXd eta = data_.X * params.head(p);
    const bool floored = params[p] < floor_;
    const double log_sd = floored ? floor_ : params[p];
    const double sd = std::exp(log_sd);
    double total = 0.0;
    if (gradient) gradient->setZero(params.size());
    std::vector<double> a(static_cast<std::size_t>(q));
    Eigen::MatrixXd node_score(p, q);
    for (Eigen::Index g = 0; g < clusters(); ++g) {
      const auto lo = data_.start[static_cast<std::size_t>(g)], hi = data_.start[static_cast<std::size_t>(g) + 1];
      const double s = std::sqrt(2.0) * scale_[g];
      for (Eigen::Index k = 0; k < q; ++k) {
        const double x = rule_.nodes[k];
        const double u = mode_[g] + s * x;
        double value = std::log(rule_.weights[k]) + x * x - 0.5 * std::log(2.0 * std::numbers::pi) - log_sd -
                       0.5 * (u / sd) * (u / sd);
        if (gradient) node_score.col(k).setZero();
        for (Eigen::Index r = lo; r < hi; ++r) {
          const double e = eta[r] + u;
          value += binary_loglik(data_.y[r], e, data_.weight[r]);
          if (gradient) node_score.col(k) += (data_.weight[r] * (data_.y[r] - logistic(e))) * data_.X.row(r).transpose();
        }
        a[static_cast<std::size_t>(k)] = value;
      }
      const double top = *std::max_element(a.begin(), a.end());
      double sum = 0.0;
      for (double v : a) sum += std::exp(v - top);
      total += std::log(s) + top + std::log(sum);
      if (gradient) {
        for (Eigen::Index k = 0; k < q; ++k) {
          const double weight = std::exp(a[static_cast<std::size_t>(k)] - top) / sum;
          const double u = mode_[g] + s * rule_.nodes[k];
          gradient->head(p) += weight * node_score.col(k);
          if (!floored) (*gradient)[p] += weight * ((u / sd) * (u / sd) - 1.0);
        }
      }
    }
    return total;
  }

 private:
  const ClusteredPatterns& data_;
  const GaussHermite& rule_;
  double floor_;
  Eigen::VectorXd mode_;
  Eigen::VectorXd scale_;
};

/// Maximizes f by BFGS with a backtracking line search. Returns the number
/// of iterations, or -1 when the gradient tolerance was not reached.
template <class F>
int maximize_bfgs(F&& f, Eigen::VectorXd& x, double tolerance, int max_iterations) {
  const Eigen::Index n = x.size();
  Eigen::VectorXd g(n);
  double fx = f(x, &g);
  if (!std::isfinite(fx)) throw FitError("random-intercept fit: non-finite likelihood at the start");
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n) / std::max(1.0, g.cwiseAbs().maxCoeff());  // inverse Hessian of -f
  int stalls = 0;
  for (int it = 0; it < max_iterations; ++it) {
    if (g.cwiseAbs().maxCoeff() < tolerance) return it;
    Eigen::VectorXd dir = H * g;
    if (dir.dot(g) <= 0) {
      H = Eigen::MatrixXd::Identity(n, n) / std::max(1.0, g.cwiseAbs().maxCoeff());
      dir = H * g;
    }
    double t = 1.0;
    Eigen::VectorXd x_new(n), g_new(n);
    double f_new = -kInf;
    for (int half = 0; half < 60; ++half, t *= 0.5) {
      x_new = x + t * dir;
      f_new = f(x_new, &g_new);
      if (std::isfinite(f_new) && f_new >= fx + 1e-4 * t * dir.dot(g)) break;
    }
    // Progress below the resolution of f: accept if the gradient is small.
    const bool stalled = !(f_new - fx > 1e-13 * (1.0 + std::abs(fx)));
    stalls = stalled ? stalls + 1 : 0;
    if (!(f_new >= fx) || stalls >= 3) return g.cwiseAbs().maxCoeff() < 1e4 * tolerance ? it : -1;
    const Eigen::VectorXd s = x_new - x;
    const Eigen::VectorXd yv = g - g_new;  // gradient change of -f
    const double sy = s.dot(yv);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * s * yv.transpose()) * H * (I - rho * yv * s.transpose()) + rho * s * s.transpose();
    }
    x = x_new;
    g = g_new;
    fx = f_new;
  }
  return g.cwiseAbs().maxCoeff() < tolerance ? max_iterations : -1;
}

}  // namespace detail

/// Random-intercept logistic regression. The marginal likelihood integrates
/// each cluster's intercept by adaptive Gauss-Hermite quadrature; parameters
/// are (beta, log sd), maximized by BFGS. An SD estimate that collapses to
/// zero is reported as 0 with the boundary flag set, together with the
/// ordinary logistic fit that the model reduces to there.
inline OutcomeFit fit_logistic_random_intercept(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                                const std::vector<int>& cluster, int G, std::vector<std::string> names,
                                                const GlmmOptions& opt = {}) {
  if (G < 2) throw DataError("random-intercept model needs at least 2 clusters");
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (y[i] != 0.0 && y[i] != 1.0) throw DataError("logistic model needs a 0/1 outcome");
  const OutcomeFit glm = fit_logistic(X, y, names);
  const auto data = detail::collapse_patterns(X, y, cluster, G);
  const GaussHermite rule(opt.quadrature_nodes);
  detail::AghqObjective objective(data, rule, opt.log_sd_floor);

  const Eigen::Index p = X.cols();
  Eigen::VectorXd params(p + 1);
  params.head(p) = glm.coefficients;
  params[p] = std::log(0.5);
  auto f = [&](const Eigen::VectorXd& x, Eigen::VectorXd* grad) { return objective.evaluate(x, grad); };

  int iterations = 0;
  bool converged = false;
  for (int round = 0; round < opt.max_recentrings && !converged; ++round) {
    objective.recentre(params);
    const Eigen::VectorXd before = params;
    const double f_before = objective.evaluate(params, nullptr);
    const int used = detail::maximize_bfgs(f, params, opt.gradient_tolerance, opt.max_iterations);
    if (used < 0) throw FitError("random-intercept fit: quasi-Newton search did not converge");
    iterations += used;
    if (!params.allFinite() || params.head(p).cwiseAbs().maxCoeff() > 30.0)
      throw FitError("random-intercept fit diverged (possible separation)");
    if (params[p] <= opt.log_sd_floor || std::exp(params[p]) < opt.boundary_sd) {
      // The SD collapsed: the maximum is on the boundary, where the model
      // reduces to ordinary logistic regression.
      OutcomeFit fit = glm;
      fit.model = OutcomeModel::logistic_ri;
      fit.iterations = iterations + glm.iterations;
      fit.ri_sd = 0.0;
      fit.boundary = true;
      return fit;
    }
    const double gain = objective.evaluate(params, nullptr) - f_before;
    converged = (params - before).cwiseAbs().maxCoeff() < 1e-6 || (round > 0 && gain < 1e-9 * (1.0 + std::abs(f_before)));
  }
  if (!converged) throw FitError("random-intercept fit: quadrature recentring did not settle");

  OutcomeFit fit;
  fit.model = OutcomeModel::logistic_ri;
  fit.names = std::move(names);
  fit.iterations = iterations;
  fit.coefficients = params.head(p);
  fit.ri_sd = std::exp(params[p]);
  fit.loglik = objective.evaluate(params, nullptr);

  // Observed information by central differences of the analytic gradient.
  const Eigen::Index m = p + 1;
  Eigen::MatrixXd hess(m, m);
  Eigen::VectorXd g_plus(p + 1), g_minus(p + 1);
  for (Eigen::Index j = 0; j < m; ++j) {
    const double h = 1e-4 * std::max(1.0, std::abs(params[j]));
    Eigen::VectorXd xp = params, xm = params;
    xp[j] += h;
    xm[j] -= h;
    objective.evaluate(xp, &g_plus);
    objective.evaluate(xm, &g_minus);
    hess.col(j) = (g_plus.head(m) - g_minus.head(m)) / (2.0 * h);
  }
  hess = 0.5 * (hess + hess.transpose());
  const Eigen::MatrixXd cov = detail::inverse_spd(-hess, "random-intercept fit");
  fit.vcov = cov.topLeftCorner(p, p);
  fit.se = fit.vcov.diagonal().cwiseSqrt();
  return fit;
}

inline OutcomeFit fit_logistic_random_intercept(const Dataset& d, const ReferenceCategories& reference = {},
                                                const GlmmOptions& opt = {}) {
  if (d.outcome_kind() != OutcomeKind::binary) throw DataError("logistic model needs a binary outcome");
  if (!d.cluster()) throw DataError("random-intercept model needs a cluster column");
  auto design = outcome_design(d, reference);
  return fit_logistic_random_intercept(design.X, design.y, d.cluster()->codes, d.G(), std::move(design.names), opt);
}

inline OutcomeFit fit_outcome(const Dataset& d, OutcomeModel model, const ReferenceCategories& reference = {},
                              const GlmmOptions& glmm = {}) {
  switch (model) {
    case OutcomeModel::logistic: return fit_logistic(d, reference);
    case OutcomeModel::logistic_ri: return fit_logistic_random_intercept(d, reference, glmm);
    case OutcomeModel::linear: return fit_linear(d, reference);
  }
  throw DataError("unknown outcome model");
}

/// Fits the outcome model to each completed copy of X1. A failing copy
/// aborts the whole analysis with a message naming it.
inline std::vector<OutcomeFit> fit_copies(const Dataset& d, const std::vector<std::vector<int>>& copies, OutcomeModel model,
                                          const ReferenceCategories& reference = {}, unsigned threads = 1,
                                          const GlmmOptions& glmm = {}) {
  std::vector<OutcomeFit> fits(copies.size());
  parallel_for(copies.size(), threads, [&](std::size_t m) {
    try {
      fits[m] = fit_outcome(d.with_x1(copies[m]), model, reference, glmm);
    } catch (const FitError& e) {
      throw FitError("analysis of imputation " + std::to_string(m + 1) + " failed: " + e.what());
    }
  });
  return fits;
}

// ---------------------------------------------------------------------------
// Pooling

struct PooledCoefficient {
  std::string name;
  double qbar = 0.0;
  double W = 0.0;
  double B = 0.0;
  double T = 0.0;
  double df = kInf;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double p_value = 1.0;

  double se() const { return std::sqrt(T); }
  double odds_ratio() const { return std::exp(qbar); }
  double or_low() const { return std::exp(ci_low); }
  double or_high() const { return std::exp(ci_high); }
};

struct PooledEstimate {
  OutcomeModel model = OutcomeModel::logistic;
  int M = 0;
  std::vector<PooledCoefficient> coefficients;

  const PooledCoefficient& at(const std::string& name) const {
    for (const auto& c : coefficients)
      if (c.name == name) return c;
    throw DataError("no pooled coefficient named '" + name + "'");
  }
};

/// Combines per-copy estimates with Rubin's rules. Intervals and p-values
/// use a t reference distribution with the classic degrees of freedom, or
/// the normal when the between-imputation variance is zero.
inline PooledEstimate pool_rubin(const std::vector<OutcomeFit>& fits) {
  if (fits.size() < 2) throw DataError("pooling needs at least M = 2 fits");
  const auto& names = fits.front().names;
  for (std::size_t m = 1; m < fits.size(); ++m)
    if (fits[m].names != names || fits[m].coefficients.size() != fits.front().coefficients.size())
      throw DataError("fit " + std::to_string(m + 1) + " has a different coefficient layout");
  const double M = static_cast<double>(fits.size());
  PooledEstimate out;
  out.model = fits.front().model;
  out.M = static_cast<int>(fits.size());
  for (std::size_t j = 0; j < names.size(); ++j) {
    const auto idx = static_cast<Eigen::Index>(j);
    PooledCoefficient c;
    c.name = names[j];
    // Offsets from the first fit keep identical fits exact.
    const double q0 = fits.front().coefficients[idx];
    const double w0 = fits.front().se[idx] * fits.front().se[idx];
    double dq = 0.0, dw = 0.0;
    for (const auto& f : fits) {
      dq += f.coefficients[idx] - q0;
      dw += f.se[idx] * f.se[idx] - w0;
    }
    c.qbar = q0 + dq / M;
    c.W = w0 + dw / M;
    for (const auto& f : fits) c.B += (f.coefficients[idx] - c.qbar) * (f.coefficients[idx] - c.qbar);
    c.B /= M - 1.0;
    const double inflated = (1.0 + 1.0 / M) * c.B;
    c.T = c.W + inflated;
    if (c.B > 0.0) {
      const double r = 1.0 + c.W / inflated;
      c.df = (M - 1.0) * r * r;
    }
    const double half = t_quantile(0.975, c.df) * std::sqrt(c.T);
    c.ci_low = c.qbar - half;
    c.ci_high = c.qbar + half;
    c.p_value = c.T > 0.0 ? 2.0 * t_sf(std::abs(c.qbar) / std::sqrt(c.T), c.df) : (c.qbar == 0.0 ? 1.0 : 0.0);
    out.coefficients.push_back(c);
  }
  return out;
}

/// Intraclass correlation on the latent logistic scale.
inline double compute_icc(double random_intercept_sd) {
  if (!(random_intercept_sd >= 0.0)) throw DataError("random-intercept SD must be >= 0");
  const double v = random_intercept_sd * random_intercept_sd;
  return v / (v + std::numbers::pi * std::numbers::pi / 3.0);
}

inline nlohmann::json to_json(const PooledEstimate& pooled) {
  nlohmann::json j;
  j["model"] = to_string(pooled.model);
  j["M"] = pooled.M;
  j["interval"] = "t(df) quantiles; normal when B = 0";
  j["coefficients"] = nlohmann::json::array();
  for (const auto& c : pooled.coefficients) {
    nlohmann::json r{{"name", c.name}, {"estimate", c.qbar}, {"se", c.se()}, {"ci_low", c.ci_low}, {"ci_high", c.ci_high},
                     {"p", c.p_value},  {"W", c.W},        {"B", c.B},       {"T", c.T}};
    r["df"] = std::isfinite(c.df) ? nlohmann::json(c.df) : nlohmann::json("inf");
    if (pooled.model != OutcomeModel::linear) {
      r["or"] = c.odds_ratio();
      r["or_low"] = c.or_low();
      r["or_high"] = c.or_high();
    }
    j["coefficients"].push_back(std::move(r));
  }
  return j;
}

inline void write_pooled_csv(std::ostream& out, const PooledEstimate& pooled) {
  const bool odds = pooled.model != OutcomeModel::linear;
  std::vector<std::string> header{"coefficient", "estimate", "se", "ci_low", "ci_high", "p"};
  if (odds) header.insert(header.end(), {"or", "or_low", "or_high"});
  header.insert(header.end(), {"W", "B", "T", "df"});
  csv::write_row(out, header);
  for (const auto& c : pooled.coefficients) {
    std::vector<std::string> row{c.name, detail::format_real(c.qbar), detail::format_real(c.se()),
                                 detail::format_real(c.ci_low), detail::format_real(c.ci_high),
                                 detail::format_real(c.p_value)};
    if (odds)
      row.insert(row.end(), {detail::format_real(c.odds_ratio()), detail::format_real(c.or_low()),
                             detail::format_real(c.or_high())});
    row.insert(row.end(), {detail::format_real(c.W), detail::format_real(c.B), detail::format_real(c.T),
                           std::isfinite(c.df) ? detail::format_real(c.df) : std::string("Inf")});
    csv::write_row(out, row);
  }
}

/// Odds-ratio comparison across methods: per method an OR, CI and p-value
/// row, one column per requested coefficient.
inline void write_or_table(std::ostream& out, const std::vector<std::pair<std::string, PooledEstimate>>& methods,
                           const std::vector<std::string>& coefficients, int digits = 2) {
  auto fmt = [&](double v) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(digits) << v;
    return ss.str();
  };
  std::vector<std::string> header{"method", "statistic"};
  header.insert(header.end(), coefficients.begin(), coefficients.end());
  csv::write_row(out, header);
  for (const auto& [label, pooled] : methods) {
    std::vector<std::string> odds{label, "OR"}, ci{label, "CI"}, p{label, "P-value"};
    for (const auto& name : coefficients) {
      const auto& c = pooled.at(name);
      odds.push_back(fmt(c.odds_ratio()));
      ci.push_back("(" + fmt(c.or_low()) + ", " + fmt(c.or_high()) + ")");
      p.push_back(fmt(c.p_value));
    }
    csv::write_row(out, odds);
    csv::write_row(out, ci);
    csv::write_row(out, p);
  }
}

}  // namespace deltami
