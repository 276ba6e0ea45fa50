#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "deltami/dataset.hpp"
#include "deltami/errors.hpp"
#include "deltami/impute.hpp"
#include "deltami/ordinal.hpp"
#include "deltami/parallel.hpp"
#include "deltami/rng.hpp"

namespace deltami {

/// Threshold shifts for one MNAR scenario. Strata are written "NAME=CODE"
/// and resolved against a dataset when the spec is applied.
struct DeltaSpec {
  std::vector<double> default_delta;
  std::map<std::string, std::vector<double>> per_stratum;
  double sigma2 = 1.2;

  static DeltaSpec from_json(const nlohmann::json& j) {
    DeltaSpec s;
    if (!j.is_object() || !j.contains("default")) throw DataError("delta spec needs a 'default' vector");
    try {
      s.default_delta = j.at("default").get<std::vector<double>>();
      if (j.contains("strata"))
        for (const auto& [label, v] : j.at("strata").items()) s.per_stratum[label] = v.get<std::vector<double>>();
      if (j.contains("sigma2")) s.sigma2 = j.at("sigma2").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed delta spec: ") + e.what());
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["default"] = default_delta;
    if (!per_stratum.empty()) {
      j["strata"] = nlohmann::json::object();
      for (const auto& [label, v] : per_stratum) j["strata"][label] = v;
    }
    j["sigma2"] = sigma2;
    return j;
  }

  /// Uniform spec with no strata.
  static DeltaSpec uniform(std::vector<double> delta, double sigma2 = 1.2) {
    DeltaSpec s;
    s.default_delta = std::move(delta);
    s.sigma2 = sigma2;
    return s;
  }
};

/// A spec checked against a dataset: one resolved delta vector per row group.
class ResolvedDelta {
 public:
  ResolvedDelta(const DeltaSpec& spec, const Dataset& d) : default_(spec.default_delta) {
    const auto q = static_cast<std::size_t>(d.K() - 1);
    if (!(spec.sigma2 > 0) || !std::isfinite(spec.sigma2)) throw DataError("delta spec: sigma2 must be positive");
    auto check = [&](const std::vector<double>& v, const std::string& where) {
      if (v.size() != q)
        throw DataError("delta spec: " + where + " has length " + std::to_string(v.size()) + ", expected K-1 = " +
                        std::to_string(q));
      for (double x : v)
        if (!std::isfinite(x)) throw DataError("delta spec: " + where + " has a non-finite entry");
    };
    check(spec.default_delta, "default vector");
    for (const auto& [label, v] : spec.per_stratum) {
      check(v, "stratum " + label);
      const StratumKey key = d.parse_stratum(label);
      if (covariate_ && *covariate_ != key.covariate)
        throw DataError("delta spec: strata must all use the same covariate");
      covariate_ = key.covariate;
      if (!by_code_.emplace(key.code, v).second) throw DataError("delta spec: stratum " + label + " given twice");
    }
  }

  const std::vector<double>& for_row(const Dataset& d, std::size_t i) const {
    if (covariate_) {
      const int code = d.covariates()[static_cast<std::size_t>(*covariate_)].codes[i];
      if (auto it = by_code_.find(code); it != by_code_.end()) return it->second;
    }
    return default_;
  }

 private:
  std::vector<double> default_;
  std::optional<int> covariate_;
  std::map<int, std::vector<double>> by_code_;
};

/// Smallest k with theta <= zeta*_k, else K. Shifted thresholds are used as
/// given, even when no longer increasing.
inline int classify_latent(double theta, std::span<const double> zeta_star) {
  for (std::size_t k = 0; k < zeta_star.size(); ++k)
    if (theta <= zeta_star[k]) return static_cast<int>(k) + 1;
  return static_cast<int>(zeta_star.size()) + 1;
}

struct AdjustedCopyAudit {
  Eigen::VectorXd beta_hat;  // refit on the completed copy
  Eigen::VectorXd zeta_hat;
  std::map<std::string, std::vector<double>> zeta_star;  // "default" or stratum label
};

struct AdjustedImputationSet {
  int M = 0;
  int K = 0;
  std::vector<std::vector<int>> copies;
  DeltaSpec spec;
  std::vector<AdjustedCopyAudit> audit;

  ImputationSet as_imputations() const {
    ImputationSet s;
    s.M = M;
    s.K = K;
    s.copies = copies;
    return s;
  }

  nlohmann::json audit_json() const {
    nlohmann::json j;
    j["spec"] = spec.to_json();
    j["copies"] = nlohmann::json::array();
    for (std::size_t m = 0; m < audit.size(); ++m) {
      const auto& a = audit[m];
      nlohmann::json c;
      c["imputation"] = m + 1;
      c["zeta_hat"] = std::vector<double>(a.zeta_hat.data(), a.zeta_hat.data() + a.zeta_hat.size());
      c["beta_hat"] = std::vector<double>(a.beta_hat.data(), a.beta_hat.data() + a.beta_hat.size());
      c["zeta_star"] = a.zeta_star;
      j["copies"].push_back(std::move(c));
    }
    return j;
  }
};

/// Turns MAR imputations into MNAR-scenario imputations. Each completed copy
/// is refit on all rows; missing rows get a perturbed latent value around
/// their refit linear predictor and are reclassified through thresholds
/// shifted by the row's delta vector.
inline AdjustedImputationSet adjust(const ImputationSet& imputations, const Dataset& d, const DeltaSpec& spec, Link link,
                                    std::uint64_t seed, unsigned threads = 1) {
  check_consistent(imputations, d);
  const ResolvedDelta deltas(spec, d);
  AdjustedImputationSet out;
  out.M = imputations.M;
  out.K = imputations.K;
  out.copies = imputations.copies;
  out.spec = spec;
  out.audit.resize(static_cast<std::size_t>(out.M));

  const auto missing = d.missing_rows();
  const Eigen::MatrixXd X = ordinal_design(d);
  const auto keys = row_keys(d, missing);
  const double sd = std::sqrt(spec.sigma2);
  OrdinalOptions options;

  parallel_for(static_cast<std::size_t>(out.M), threads, [&](std::size_t m) {
    const auto& completed = imputations.copies[m];
    OrdinalFit fit;
    try {
      fit = fit_cumulative(X, completed, d.K(), link, options);
    } catch (const FitError& e) {
      throw FitError("adjust: refit of imputation " + std::to_string(m + 1) + " failed: " + e.what());
    }
    const std::uint64_t stream = derive_seed(seed, {m, tag("adjust")});
    auto& copy = out.copies[m];
    auto shifted = [&](const std::vector<double>& delta) {
      std::vector<double> z(delta.size());
      for (std::size_t k = 0; k < delta.size(); ++k) z[k] = fit.zeta[static_cast<Eigen::Index>(k)] + delta[k];
      return z;
    };
    auto& audit = out.audit[m];
    audit.beta_hat = fit.beta;
    audit.zeta_hat = fit.zeta;
    audit.zeta_star["default"] = shifted(spec.default_delta);
    for (const auto& [label, v] : spec.per_stratum) audit.zeta_star[label] = shifted(v);

    std::vector<double> zeta_star(static_cast<std::size_t>(d.K() - 1));
    for (std::size_t r = 0; r < missing.size(); ++r) {
      const std::size_t i = missing[r];
      const double eta = X.row(static_cast<Eigen::Index>(i)).dot(fit.beta);
      const double theta = eta + sd * keyed_normal(stream ^ keys[r], 0);
      const auto& delta = deltas.for_row(d, i);
      for (std::size_t k = 0; k < delta.size(); ++k) zeta_star[k] = fit.zeta[static_cast<Eigen::Index>(k)] + delta[k];
      copy[i] = classify_latent(theta, zeta_star);
    }
  });
  return out;
}

}  // namespace deltami
