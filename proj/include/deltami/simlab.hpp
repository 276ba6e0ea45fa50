#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deltami/adjust.hpp"
#include "deltami/dataset.hpp"
#include "deltami/diagnostics.hpp"
#include "deltami/impute.hpp"
#include "deltami/ordinal.hpp"
#include "deltami/outcome.hpp"
#include "deltami/parallel.hpp"
#include "deltami/rng.hpp"

namespace deltami {

enum class Design { nonhier_extreme, hier_extreme, nonhier_intermediate, nonhier_continuous };

inline std::string to_string(Design d) {
  switch (d) {
    case Design::nonhier_extreme: return "nonhier-extreme";
    case Design::hier_extreme: return "hier-extreme";
    case Design::nonhier_intermediate: return "nonhier-intermediate";
    case Design::nonhier_continuous: return "nonhier-continuous";
  }
  return "?";
}

inline Design parse_design(const std::string& s) {
  for (auto d : {Design::nonhier_extreme, Design::hier_extreme, Design::nonhier_intermediate, Design::nonhier_continuous})
    if (to_string(d) == s) return d;
  throw DataError("unknown design '" + s +
                  "' (expected nonhier-extreme, hier-extreme, nonhier-intermediate or nonhier-continuous)");
}

// ---------------------------------------------------------------------------
// Masking rules

enum class YCondition { eq1, eq0, positive, negative };

inline std::string to_string(YCondition c) {
  switch (c) {
    case YCondition::eq1: return "Y=1";
    case YCondition::eq0: return "Y=0";
    case YCondition::positive: return "Y>0";
    case YCondition::negative: return "Y<0";
  }
  return "?";
}

inline YCondition parse_condition(const std::string& s) {
  for (auto c : {YCondition::eq1, YCondition::eq0, YCondition::positive, YCondition::negative})
    if (to_string(c) == s) return c;
  throw DataError("unknown outcome condition '" + s + "' (expected Y=1, Y=0, Y>0 or Y<0)");
}

inline bool satisfies(YCondition c, double y) {
  switch (c) {
    case YCondition::eq1: return y == 1.0;
    case YCondition::eq0: return y == 0.0;
    case YCondition::positive: return y > 0.0;
    case YCondition::negative: return y < 0.0;
  }
  return false;
}

/// True when some outcome value satisfies both conditions.
inline bool conditions_overlap(YCondition a, YCondition b) {
  if (a == b) return true;
  auto pair = [&](YCondition x, YCondition y) { return (a == x && b == y) || (a == y && b == x); };
  return pair(YCondition::eq1, YCondition::positive);
}

/// "Within `stratum`, when the outcome meets `when`, mask each X1 cell equal
/// to `category` with probability `proportion`."
struct MnarRule {
  std::optional<std::string> stratum;  // "NAME=CODE"
  YCondition when = YCondition::eq1;
  int category = 1;
  double proportion = 0.0;

  static MnarRule from_json(const nlohmann::json& j) {
    MnarRule r;
    try {
      if (j.contains("stratum") && !j.at("stratum").is_null()) r.stratum = j.at("stratum").get<std::string>();
      r.when = parse_condition(j.at("when").get<std::string>());
      r.category = j.at("category").get<int>();
      r.proportion = j.at("proportion").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed masking rule: ") + e.what());
    }
    return r;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    if (stratum) j["stratum"] = *stratum;
    j["when"] = to_string(when);
    j["category"] = category;
    j["proportion"] = proportion;
    return j;
  }

  std::string describe() const {
    return (stratum ? *stratum + ", " : std::string()) + to_string(when) + ", category " + std::to_string(category);
  }
};

/// Rejects malformed rules and rules that could mask the same cell.
inline void validate_rules(const std::vector<MnarRule>& rules, int K) {
  for (const auto& r : rules) {
    if (!(r.proportion >= 0.0 && r.proportion <= 1.0))
      throw DataError("masking rule (" + r.describe() + "): proportion must lie in [0, 1]");
    if (r.category < 1 || r.category > K)
      throw DataError("masking rule (" + r.describe() + "): category outside 1.." + std::to_string(K));
  }
  for (std::size_t a = 0; a < rules.size(); ++a)
    for (std::size_t b = a + 1; b < rules.size(); ++b) {
      const auto& x = rules[a];
      const auto& y = rules[b];
      const bool strata = !x.stratum || !y.stratum || *x.stratum == *y.stratum;
      if (x.category == y.category && strata && conditions_overlap(x.when, y.when))
        throw DataError("masking rules (" + x.describe() + ") and (" + y.describe() + ") target the same cells");
    }
}

/// Masks X1 cells of a complete dataset. By default each eligible cell is
/// masked independently; with `exact`, round(proportion * eligible) cells
/// are chosen without replacement.
inline Dataset apply_mnar(const Dataset& full, const std::vector<MnarRule>& rules, Rng& rng, bool exact = false) {
  validate_rules(rules, full.K());
  if (full.missing_count() > 0) throw DataError("masking needs a dataset with X1 complete");
  std::vector<int> x1 = full.x1();
  for (const auto& rule : rules) {
    const auto key = rule.stratum ? std::optional<StratumKey>(full.parse_stratum(*rule.stratum)) : std::nullopt;
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < full.n(); ++i)
      if (full.x1()[i] == rule.category && satisfies(rule.when, full.outcome()[i]) && (!key || full.in_stratum(i, *key)))
        eligible.push_back(i);
    if (exact) {
      const auto take = static_cast<std::size_t>(std::llround(rule.proportion * static_cast<double>(eligible.size())));
      for (std::size_t j = 0; j < take; ++j) {
        const std::size_t pick = j + rng.below(eligible.size() - j);
        std::swap(eligible[j], eligible[pick]);
        x1[eligible[j]] = 0;
      }
    } else {
      for (std::size_t i : eligible)
        if (rng.uniform() < rule.proportion) x1[i] = 0;
    }
  }
  return full.with_x1(std::move(x1));
}

// ---------------------------------------------------------------------------
// Scenario configuration

struct ScenarioConfig {
  Design design = Design::nonhier_extreme;
  std::size_t n = 2000;
  int K = 5;
  int x2_levels = 4;
  int clusters = 0;  // hier only; rows are split into equal contiguous blocks
  double beta0 = -1.5;
  std::vector<double> beta_x1;  // K-1 effects, category 1 is the reference
  std::vector<double> beta_x2;  // x2_levels-1 effects
  double ri_sd = 0.0;
  double noise_sd = 1.0;  // continuous outcome only
  // Multinomial-logit linear predictors of X1 given X2: one row per X2
  // level, K entries, category 1 fixed at 0.
  std::vector<std::vector<double>> x1_logits;
  std::vector<MnarRule> mnar;
  bool exact_masking = false;
  std::vector<NamedDelta> scenarios;  // MNAR1, MNAR2, ...
  Link link = Link::probit;
  GibbsConfig gibbs;
  int R = 200;
  int M = 10;
  std::uint64_t seed = 1;

  bool hierarchical() const { return design == Design::hier_extreme; }
  OutcomeKind outcome_kind() const {
    return design == Design::nonhier_continuous ? OutcomeKind::continuous : OutcomeKind::binary;
  }
  OutcomeModel outcome_model() const {
    if (hierarchical()) return OutcomeModel::logistic_ri;
    return design == Design::nonhier_continuous ? OutcomeModel::linear : OutcomeModel::logistic;
  }

  /// Coefficient names in outcome-model order with their true values.
  std::vector<std::pair<std::string, double>> truth() const {
    std::vector<std::pair<std::string, double>> t{{"(Intercept)", beta0}};
    for (int k = 2; k <= K; ++k) t.emplace_back("X1" + std::to_string(k), beta_x1[static_cast<std::size_t>(k - 2)]);
    for (int k = 2; k <= x2_levels; ++k) t.emplace_back("X2" + std::to_string(k), beta_x2[static_cast<std::size_t>(k - 2)]);
    return t;
  }

  void validate() const {
    auto fail = [&](const std::string& what) { throw DataError("scenario " + to_string(design) + ": " + what); };
    if (K < 3) fail("K must be at least 3");
    if (x2_levels < 2) fail("X2 needs at least 2 levels");
    if (beta_x1.size() != static_cast<std::size_t>(K - 1)) fail("beta_x1 needs K-1 entries");
    if (beta_x2.size() != static_cast<std::size_t>(x2_levels - 1)) fail("beta_x2 needs one entry per non-reference X2 level");
    if (x1_logits.size() != static_cast<std::size_t>(x2_levels)) fail("x1_logits needs one row per X2 level");
    for (const auto& row : x1_logits) {
      if (row.size() != static_cast<std::size_t>(K)) fail("each x1_logits row needs K entries");
      for (double v : row)
        if (!std::isfinite(v)) fail("x1_logits must be finite");
    }
    if (hierarchical()) {
      if (clusters < 2) fail("hierarchical design needs at least 2 clusters");
      if (n % static_cast<std::size_t>(clusters) != 0) fail("n must be a multiple of the cluster count");
      if (!(ri_sd >= 0.0)) fail("random-intercept SD must be nonnegative");
    } else if (clusters != 0) {
      fail("clusters are only used by the hierarchical design");
    }
    if (!(noise_sd > 0.0)) fail("noise_sd must be positive");
    if (R < 1) fail("R must be at least 1");
    if (M < 2) fail("M must be at least 2");
    validate_rules(mnar, K);
    for (const auto& s : scenarios)
      if (s.spec.default_delta.size() != static_cast<std::size_t>(K - 1))
        fail("delta scenario " + s.name + " needs K-1 entries");
    gibbs.validate();
  }

  static ScenarioConfig defaults(Design design);

  static ScenarioConfig from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("design")) throw DataError("scenario config needs a 'design' field");
    ScenarioConfig c = defaults(parse_design(j.at("design").get<std::string>()));
    try {
      if (j.contains("n")) c.n = j.at("n").get<std::size_t>();
      if (j.contains("K")) c.K = j.at("K").get<int>();
      if (j.contains("x2_levels")) c.x2_levels = j.at("x2_levels").get<int>();
      if (j.contains("clusters")) c.clusters = j.at("clusters").get<int>();
      if (j.contains("beta")) {
        const auto& b = j.at("beta");
        c.beta0 = b.at("intercept").get<double>();
        c.beta_x1 = b.at("x1").get<std::vector<double>>();
        c.beta_x2 = b.at("x2").get<std::vector<double>>();
      }
      if (j.contains("ri_sd")) c.ri_sd = j.at("ri_sd").get<double>();
      if (j.contains("noise_sd")) c.noise_sd = j.at("noise_sd").get<double>();
      if (j.contains("x1_logits")) c.x1_logits = j.at("x1_logits").get<std::vector<std::vector<double>>>();
      if (j.contains("mnar")) {
        c.mnar.clear();
        for (const auto& r : j.at("mnar")) c.mnar.push_back(MnarRule::from_json(r));
      }
      if (j.contains("exact_masking")) c.exact_masking = j.at("exact_masking").get<bool>();
      if (j.contains("scenarios")) {
        c.scenarios.clear();
        for (const auto& s : j.at("scenarios"))
          c.scenarios.push_back({s.at("name").get<std::string>(), DeltaSpec::from_json(s.at("delta"))});
      }
      if (j.contains("link")) c.link = parse_link(j.at("link").get<std::string>());
      if (j.contains("gibbs")) {
        const auto& g = j.at("gibbs");
        c.gibbs.burn_in = g.value("burn_in", c.gibbs.burn_in);
        c.gibbs.between = g.value("between", c.gibbs.between);
      }
      if (j.contains("R")) c.R = j.at("R").get<int>();
      if (j.contains("M")) c.M = j.at("M").get<int>();
      if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed scenario config: ") + e.what());
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["design"] = to_string(design);
    j["n"] = n;
    j["K"] = K;
    j["x2_levels"] = x2_levels;
    if (hierarchical()) j["clusters"] = clusters;
    j["beta"] = {{"intercept", beta0}, {"x1", beta_x1}, {"x2", beta_x2}};
    if (hierarchical()) j["ri_sd"] = ri_sd;
    if (outcome_kind() == OutcomeKind::continuous) j["noise_sd"] = noise_sd;
    j["x1_logits"] = x1_logits;
    j["mnar"] = nlohmann::json::array();
    for (const auto& r : mnar) j["mnar"].push_back(r.to_json());
    j["exact_masking"] = exact_masking;
    j["scenarios"] = nlohmann::json::array();
    for (const auto& s : scenarios) j["scenarios"].push_back({{"name", s.name}, {"delta", s.spec.to_json()}});
    j["link"] = to_string(link);
    if (hierarchical()) j["gibbs"] = {{"burn_in", gibbs.burn_in}, {"between", gibbs.between}};
    j["R"] = R;
    j["M"] = M;
    j["seed"] = seed;
    return j;
  }
};

namespace detail {

/// Category log-odds against category 1 for X1 given X2 = 1..4.
inline std::vector<std::vector<double>> x1_logits_from(std::vector<double> base,
                                                       const std::vector<std::vector<double>>& shifts) {
  std::vector<std::vector<double>> out;
  for (const auto& s : shifts) {
    std::vector<double> row(base.size());
    for (std::size_t k = 0; k < base.size(); ++k) row[k] = base[k] + s[k];
    for (std::size_t k = 1; k < row.size(); ++k) row[k] -= row[0];
    row[0] = 0.0;
    out.push_back(row);
  }
  return out;
}

inline std::vector<MnarRule> outcome_rules(YCondition a, int ca, double pa, YCondition b, int cb, double pb) {
  return {{std::nullopt, a, ca, pa}, {std::nullopt, b, cb, pb}};
}

inline std::vector<NamedDelta> uniform_scenarios(const std::vector<std::vector<double>>& deltas) {
  std::vector<NamedDelta> out;
  for (std::size_t i = 0; i < deltas.size(); ++i)
    out.push_back({"MNAR" + std::to_string(i + 1), DeltaSpec::uniform(deltas[i])});
  return out;
}

}  // namespace detail

inline ScenarioConfig ScenarioConfig::defaults(Design design) {
  ScenarioConfig c;
  c.design = design;
  const std::vector<std::vector<double>> small_shifts{
      {0.0, 0.0, 0.0, 0.0, 0.0}, {0.0, 0.1, 0.0, -0.1, 0.2}, {0.2, 0.0, -0.1, 0.1, 0.0}, {0.0, -0.1, 0.1, 0.0, 0.1}};
  switch (design) {
    case Design::nonhier_extreme:
    case Design::nonhier_continuous:
      c.K = 5;
      c.beta0 = -1.5;
      c.beta_x1 = {1.0, -2.0, 1.5, 2.0};
      c.beta_x2 = {2.0, 1.0, 2.0};
      c.x1_logits = detail::x1_logits_from({0.0, -1.2, -1.2, -0.6, 0.9}, small_shifts);
      c.scenarios = detail::uniform_scenarios({{0, 0, 0, 0}, {0, 0, 0, -1}, {0, 0, 0, -2}});
      if (design == Design::nonhier_extreme) {
        c.n = 2000;
        c.mnar = detail::outcome_rules(YCondition::eq1, 1, 0.3, YCondition::eq0, 5, 0.3);
      } else {
        c.n = 1000;
        c.mnar = detail::outcome_rules(YCondition::positive, 1, 0.3, YCondition::negative, 5, 0.3);
      }
      break;
    case Design::nonhier_intermediate:
      c.K = 5;
      c.n = 2000;
      c.beta0 = -1.0;
      c.beta_x1 = {1.0, -1.0, -1.5, -2.0};
      c.beta_x2 = {2.0, 1.0, 2.0};
      c.x1_logits = detail::x1_logits_from({0.0, 1.2, 0.0, 1.0, 0.0}, small_shifts);
      c.mnar = detail::outcome_rules(YCondition::eq1, 2, 0.4, YCondition::eq0, 4, 0.3);
      c.scenarios = detail::uniform_scenarios({{0, 0, 0, 0}, {-3, 1, 0, 0}, {-3, 1, 0, 1}});
      break;
    case Design::hier_extreme: {
      c.K = 3;
      c.n = 2000;
      c.clusters = 10;
      c.ri_sd = 0.45;
      c.beta0 = -1.0;
      c.beta_x1 = {1.0, -2.0};
      c.beta_x2 = {2.0, 1.0, 2.0};
      c.x1_logits = detail::x1_logits_from(
          {0.0, -1.3, -0.1}, {{0.0, 0.0, 0.0}, {0.0, 0.1, 0.2}, {0.2, 0.0, -0.1}, {0.0, -0.1, 0.1}});
      const double pa[] = {0.2, 0.1, 0.4, 0.1};
      const double pb[] = {0.3, 0.4, 0.1, 0.3};
      for (int s = 0; s < 4; ++s) {
        const std::string label = "X2=" + std::to_string(s + 1);
        c.mnar.push_back({label, YCondition::eq1, 1, pa[s]});
        c.mnar.push_back({label, YCondition::eq0, 3, pb[s]});
      }
      const std::vector<double> d1{0.5, 0.0}, d2{0.0, -0.5}, d3{0.0, -1.5}, d4{0.0, -2.0};
      auto stratified = [](std::vector<std::vector<double>> per) {
        DeltaSpec s;
        s.default_delta = {0.0, 0.0};
        for (std::size_t i = 0; i < per.size(); ++i) s.per_stratum["X2=" + std::to_string(i + 1)] = per[i];
        return s;
      };
      c.scenarios = {{"MNAR1", stratified({d4, d3, d1, d3})},
                     {"MNAR2", stratified({d2, d4, d1, d4})},
                     {"MNAR3", DeltaSpec::uniform(d4)}};
      break;
    }
  }
  c.M = 10;
  c.R = design == Design::hier_extreme ? 100 : 200;
  return c;
}

// ---------------------------------------------------------------------------
// Data generation

inline int draw_category(std::span<const double> logits, double u) {
  double total = 0.0;
  for (double v : logits) total += std::exp(v);
  double acc = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    acc += std::exp(logits[k]) / total;
    if (u < acc) return static_cast<int>(k) + 1;
  }
  return static_cast<int>(logits.size());
}

/// One complete dataset (X1 fully observed) from the design's model.
/// `effects` receives the cluster intercepts of the hierarchical design.
inline Dataset generate(const ScenarioConfig& c, Rng& rng, std::vector<double>* effects = nullptr) {
  c.validate();
  const std::size_t n = c.n;
  std::vector<int> x2(n), x1(n), cl;
  std::vector<double> y(n);
  std::vector<double> u;
  if (c.hierarchical()) {
    u.resize(static_cast<std::size_t>(c.clusters));
    for (auto& v : u) v = rng.normal(0.0, c.ri_sd);
    cl.resize(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    x2[i] = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(c.x2_levels)));
    x1[i] = draw_category(c.x1_logits[static_cast<std::size_t>(x2[i] - 1)], rng.uniform());
    double eta = c.beta0;
    if (x1[i] > 1) eta += c.beta_x1[static_cast<std::size_t>(x1[i] - 2)];
    if (x2[i] > 1) eta += c.beta_x2[static_cast<std::size_t>(x2[i] - 2)];
    if (c.hierarchical()) {
      cl[i] = 1 + static_cast<int>(i / (n / static_cast<std::size_t>(c.clusters)));
      eta += u[static_cast<std::size_t>(cl[i] - 1)];
    }
    if (c.outcome_kind() == OutcomeKind::binary) y[i] = rng.uniform() < logistic(eta) ? 1.0 : 0.0;
    else y[i] = eta + c.noise_sd * rng.normal();
  }
  if (effects) *effects = u;
  std::optional<NominalColumn> cluster;
  if (c.hierarchical()) cluster = NominalColumn{"cluster", c.clusters, std::move(cl)};
  return Dataset("Y", c.outcome_kind(), std::move(y), "X1", c.K, std::move(x1), {{"X2", c.x2_levels, std::move(x2)}},
                 std::move(cluster));
}

/// Full data for replication `rep`, from its own stream.
inline Dataset generate(const ScenarioConfig& c, std::size_t rep) {
  Rng rng(derive_seed(c.seed, {rep, tag("generate")}));
  return generate(c, rng);
}

/// Full data for replication `rep` and its masked version.
inline std::pair<Dataset, Dataset> generate_masked(const ScenarioConfig& c, std::size_t rep) {
  Dataset full = generate(c, rep);
  Rng rng(derive_seed(c.seed, {rep, tag("mask")}));
  Dataset masked = apply_mnar(full, c.mnar, rng, c.exact_masking);
  return {std::move(full), std::move(masked)};
}

// ---------------------------------------------------------------------------
// Monte Carlo

struct CoefficientSummary {
  std::string name;
  double truth = 0.0;
  double mean = 0.0;
  double rel_bias_pct = 0.0;
  double emp_sd = 0.0;
  double coverage = 0.0;
  double mean_se = 0.0;
};

struct MethodSummary {
  std::string method;
  std::vector<CoefficientSummary> coefficients;

  const CoefficientSummary& at(const std::string& name) const {
    for (const auto& c : coefficients)
      if (c.name == name) return c;
    throw DataError("no coefficient named '" + name + "' in method " + method);
  }
};

/// X1-model coefficient averaged over replications: full data versus the
/// mean over MAR-completed copies.
struct ImputationModelRow {
  std::string coefficient;
  double simulated = 0.0;
  double mar = 0.0;
  double rel_bias_pct = 0.0;
};

struct MonteCarloReport {
  std::string design;
  int R = 0;
  int R_used = 0;
  int failures = 0;
  std::vector<std::string> failure_messages;
  int M = 0;
  std::uint64_t seed = 0;
  double runtime_seconds = 0.0;
  std::vector<MethodSummary> methods;
  std::vector<CategoryProfile> profiles;
  std::vector<ImputationModelRow> imputation_model;

  const MethodSummary& method(const std::string& name) const {
    for (const auto& m : methods)
      if (m.method == name) return m;
    throw DataError("no method named '" + name + "' in report");
  }

  /// Long table: one row per (method, coefficient).
  void write_csv(std::ostream& out) const {
    csv::write_row(out, {"method", "coefficient", "rel_bias_pct", "emp_sd", "coverage"});
    for (const auto& m : methods)
      for (const auto& c : m.coefficients)
        csv::write_row(out, {m.method, c.name, detail::format_real(c.rel_bias_pct), detail::format_real(c.emp_sd),
                             detail::format_real(c.coverage)});
  }

  /// Wide table laid out like a published bias table: three blocks
  /// (relative bias, empirical SD, coverage), methods as columns.
  void write_table(std::ostream& out, int digits = 2) const {
    std::vector<std::string> header{"block", "coefficient"};
    for (const auto& m : methods) header.push_back(m.method);
    csv::write_row(out, header);
    auto fmt = [&](double v) {
      std::ostringstream ss;
      ss << std::fixed << std::setprecision(digits) << v;
      return ss.str();
    };
    const std::pair<const char*, double CoefficientSummary::*> blocks[] = {
        {"Relative bias (%)", &CoefficientSummary::rel_bias_pct},
        {"Empirical standard deviation", &CoefficientSummary::emp_sd},
        {"Coverage rate", &CoefficientSummary::coverage}};
    if (methods.empty()) return;
    for (const auto& [label, field] : blocks)
      for (std::size_t j = 0; j < methods.front().coefficients.size(); ++j) {
        std::vector<std::string> row{label, methods.front().coefficients[j].name};
        for (const auto& m : methods) row.push_back(fmt(m.coefficients[j].*field));
        csv::write_row(out, row);
      }
  }

  void write_imputation_model_csv(std::ostream& out) const {
    csv::write_row(out, {"coefficient", "simulated", "mar", "rel_bias_pct"});
    for (const auto& r : imputation_model)
      csv::write_row(out, {r.coefficient, detail::format_real(r.simulated), detail::format_real(r.mar),
                           detail::format_real(r.rel_bias_pct)});
  }

  /// Everything except wall time, which lives in the run manifest.
  nlohmann::json to_json() const {
    nlohmann::json j;
    j["design"] = design;
    j["R"] = R;
    j["R_used"] = R_used;
    j["failures"] = failures;
    j["failure_messages"] = failure_messages;
    j["M"] = M;
    j["seed"] = seed;
    j["methods"] = nlohmann::json::array();
    for (const auto& m : methods) {
      nlohmann::json mj{{"method", m.method}, {"coefficients", nlohmann::json::array()}};
      for (const auto& c : m.coefficients)
        mj["coefficients"].push_back({{"name", c.name},
                                      {"truth", c.truth},
                                      {"mean", c.mean},
                                      {"rel_bias_pct", c.rel_bias_pct},
                                      {"emp_sd", c.emp_sd},
                                      {"coverage", c.coverage},
                                      {"mean_se", c.mean_se}});
      j["methods"].push_back(std::move(mj));
    }
    j["imputation_model"] = nlohmann::json::array();
    for (const auto& r : imputation_model)
      j["imputation_model"].push_back(
          {{"coefficient", r.coefficient}, {"simulated", r.simulated}, {"mar", r.mar}, {"rel_bias_pct", r.rel_bias_pct}});
    j["profiles"] = nlohmann::json::array();
    for (const auto& p : profiles)
      j["profiles"].push_back({{"scenario", p.scenario}, {"stratum", p.stratum_label}, {"proportions", p.proportions}});
    return j;
  }
};

struct MonteCarloOptions {
  unsigned threads = 0;          // 0: DELTAMI_THREADS or hardware
  double max_failure_rate = 0.02;
  bool profiles = true;
  bool imputation_model = true;
};

namespace detail {

struct MethodEstimate {
  std::vector<double> estimate;
  std::vector<double> se;
  std::vector<double> low;
  std::vector<double> high;
};

struct ReplicationResult {
  bool ok = false;
  std::string error;
  std::vector<MethodEstimate> methods;
  std::vector<CategoryProfile> profiles;
  std::vector<double> x1_full;  // X1-model coefficients on full data
  std::vector<double> x1_mar;   // mean over MAR copies
};

inline MethodEstimate from_fit(const OutcomeFit& fit, const std::vector<std::pair<std::string, double>>& truth) {
  if (fit.names.size() != truth.size()) throw FitError("outcome fit has an unexpected coefficient layout");
  MethodEstimate e;
  const double z = norm_quantile(0.975);
  for (std::size_t j = 0; j < truth.size(); ++j) {
    const auto jj = static_cast<Eigen::Index>(j);
    e.estimate.push_back(fit.coefficients(jj));
    e.se.push_back(fit.se(jj));
    e.low.push_back(fit.coefficients(jj) - z * fit.se(jj));
    e.high.push_back(fit.coefficients(jj) + z * fit.se(jj));
  }
  return e;
}

inline MethodEstimate from_pooled(const PooledEstimate& pooled, const std::vector<std::pair<std::string, double>>& truth) {
  MethodEstimate e;
  for (const auto& [name, value] : truth) {
    const auto& c = pooled.at(name);
    e.estimate.push_back(c.qbar);
    e.se.push_back(c.se());
    e.low.push_back(c.ci_low);
    e.high.push_back(c.ci_high);
  }
  return e;
}

inline std::vector<double> x1_coefficients(const Dataset& d, Link link) {
  const auto fit = fit_cumulative(d, link);
  std::vector<double> v(fit.beta.data(), fit.beta.data() + fit.beta.size());
  v.insert(v.end(), fit.zeta.data(), fit.zeta.data() + fit.zeta.size());
  return v;
}

inline ReplicationResult run_replication(const ScenarioConfig& c, std::size_t rep, const MonteCarloOptions& opt) {
  ReplicationResult out;
  const auto truth = c.truth();
  const OutcomeModel model = c.outcome_model();
  try {
    auto [full, masked] = generate_masked(c, rep);
    out.methods.push_back(from_fit(fit_outcome(full, model), truth));
    out.methods.push_back(from_fit(fit_outcome(masked.subset(masked.observed_rows()), model), truth));

    const std::uint64_t impute_seed = derive_seed(c.seed, {rep, tag("impute")});
    ImputationSet mar;
    if (masked.missing_count() == 0) {
      mar.M = c.M;
      mar.K = c.K;
      mar.copies.assign(static_cast<std::size_t>(c.M), masked.x1());
    } else {
      mar = c.hierarchical() ? impute_mar_hier(masked, c.M, c.gibbs, impute_seed)
                             : impute_mar_flat(masked, c.M, c.link, impute_seed);
    }
    out.methods.push_back(from_pooled(pool_rubin(fit_copies(masked, mar.copies, model)), truth));

    const std::optional<int> stratum = 0;  // X2
    const bool profile = opt.profiles && masked.missing_count() > 0;
    if (profile) {
      std::vector<int> truth_copy = full.x1();
      auto sim = missing_category_profile(std::vector<std::vector<int>>{truth_copy}, masked, "SIMULATED", stratum);
      auto marp = missing_category_profile(mar, masked, "MAR", stratum);
      out.profiles.insert(out.profiles.end(), sim.begin(), sim.end());
      out.profiles.insert(out.profiles.end(), marp.begin(), marp.end());
    }

    const std::uint64_t adjust_seed = derive_seed(c.seed, {rep, tag("adjust")});
    for (const auto& s : c.scenarios) {
      const auto adjusted = adjust(mar, masked, s.spec, c.link, adjust_seed);
      out.methods.push_back(from_pooled(pool_rubin(fit_copies(masked, adjusted.copies, model)), truth));
      if (profile) {
        auto p = missing_category_profile(adjusted, masked, s.name, stratum);
        out.profiles.insert(out.profiles.end(), p.begin(), p.end());
      }
    }

    if (opt.imputation_model) {
      out.x1_full = x1_coefficients(full, c.link);
      out.x1_mar.assign(out.x1_full.size(), 0.0);
      for (const auto& copy : mar.copies) {
        const auto v = x1_coefficients(masked.with_x1(copy), c.link);
        for (std::size_t j = 0; j < v.size(); ++j) out.x1_mar[j] += v[j] / static_cast<double>(mar.copies.size());
      }
    }
    out.ok = true;
  } catch (const FitError& e) {
    out = ReplicationResult{};
    out.error = "replication " + std::to_string(rep + 1) + ": " + e.what();
  }
  return out;
}

}  // namespace detail

inline std::vector<std::string> method_names(const ScenarioConfig& c) {
  std::vector<std::string> names{"SIMULATED", "CC", "MAR"};
  for (const auto& s : c.scenarios) names.push_back(s.name);
  return names;
}

/// Runs every replication, then aggregates in replication order so the
/// report does not depend on the thread count. Failed replications are
/// excluded and counted; more than `max_failure_rate` of R aborts.
inline MonteCarloReport run_monte_carlo(const ScenarioConfig& c, const MonteCarloOptions& opt = {}) {
  c.validate();
  const auto start = std::chrono::steady_clock::now();
  const auto R = static_cast<std::size_t>(c.R);
  std::vector<detail::ReplicationResult> results(R);
  parallel_for(R, opt.threads, [&](std::size_t r) { results[r] = detail::run_replication(c, r, opt); });

  MonteCarloReport report;
  report.design = to_string(c.design);
  report.R = c.R;
  report.M = c.M;
  report.seed = c.seed;
  for (const auto& res : results)
    if (!res.ok) {
      ++report.failures;
      report.failure_messages.push_back(res.error);
    }
  report.R_used = c.R - report.failures;
  if (report.failures > opt.max_failure_rate * c.R || report.R_used == 0)
    throw FitError("monte carlo aborted: " + std::to_string(report.failures) + " of " + std::to_string(c.R) +
                   " replications failed; first: " + report.failure_messages.front());

  const auto truth = c.truth();
  const auto names = method_names(c);
  const double used = report.R_used;
  for (std::size_t m = 0; m < names.size(); ++m) {
    MethodSummary summary{names[m], {}};
    for (std::size_t j = 0; j < truth.size(); ++j) {
      CoefficientSummary s;
      s.name = truth[j].first;
      s.truth = truth[j].second;
      double sum = 0.0, se_sum = 0.0, covered = 0.0;
      for (const auto& res : results) {
        if (!res.ok) continue;
        const auto& e = res.methods[m];
        sum += e.estimate[j];
        se_sum += e.se[j];
        if (e.low[j] <= s.truth && s.truth <= e.high[j]) covered += 1.0;
      }
      s.mean = sum / used;
      s.mean_se = se_sum / used;
      s.coverage = covered / used;
      double ss = 0.0;
      for (const auto& res : results)
        if (res.ok) ss += (res.methods[m].estimate[j] - s.mean) * (res.methods[m].estimate[j] - s.mean);
      s.emp_sd = used > 1 ? std::sqrt(ss / (used - 1)) : 0.0;
      s.rel_bias_pct = 100.0 * (s.mean - s.truth) / s.truth;
      summary.coefficients.push_back(s);
    }
    report.methods.push_back(std::move(summary));
  }

  if (opt.profiles) {
    std::vector<std::vector<CategoryProfile>> runs;
    for (const auto& res : results)
      if (res.ok && !res.profiles.empty()) runs.push_back(res.profiles);
    if (!runs.empty()) report.profiles = average_profiles(runs);
  }

  if (opt.imputation_model) {
    std::vector<std::string> labels{"Y"};
    for (int k = 2; k <= c.x2_levels; ++k) labels.push_back("X2_" + std::to_string(k));
    for (int k = 1; k < c.K; ++k) labels.push_back("zeta" + std::to_string(k));
    for (std::size_t j = 0; j < labels.size(); ++j) {
      ImputationModelRow row{labels[j]};
      for (const auto& res : results)
        if (res.ok) {
          row.simulated += res.x1_full[j] / used;
          row.mar += res.x1_mar[j] / used;
        }
      row.rel_bias_pct = 100.0 * (row.mar - row.simulated) / row.simulated;
      report.imputation_model.push_back(row);
    }
  }
  report.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

}  // namespace deltami
