#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deltami/adjust.hpp"
#include "deltami/csv.hpp"
#include "deltami/dataset.hpp"
#include "deltami/errors.hpp"
#include "deltami/impute.hpp"

namespace deltami {

/// Average category distribution of the imputed cells, for one scenario
/// and optionally one stratum.
struct CategoryProfile {
  std::string scenario;
  std::optional<StratumKey> stratum;
  std::string stratum_label = "overall";
  std::vector<double> proportions;
  std::size_t count_basis = 0;  // missing cells per copy
};

/// Profiles of the missing cells: one overall profile, then one per
/// category of `stratum_covariate` if given. Each is the mean over copies of
/// the within-copy category frequencies.
inline std::vector<CategoryProfile> missing_category_profile(const std::vector<std::vector<int>>& copies, const Dataset& d,
                                                             const std::string& scenario,
                                                             std::optional<int> stratum_covariate = std::nullopt) {
  const auto missing = d.missing_rows();
  if (missing.empty()) throw DataError("no missing X1 values to profile");
  if (copies.empty()) throw DataError("no imputations to profile");
  for (const auto& c : copies)
    if (c.size() != d.n()) throw DataError("imputation has the wrong number of rows");

  auto profile_of = [&](const std::vector<std::size_t>& rows) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(d.K()), 0);
    for (const auto& copy : copies)
      for (std::size_t i : rows) {
        const int v = copy[i];
        if (v < 1 || v > d.K()) throw DataError("imputed value outside 1..K");
        ++counts[static_cast<std::size_t>(v - 1)];
      }
    std::vector<double> p(counts.size());
    const double total = static_cast<double>(rows.size() * copies.size());
    for (std::size_t k = 0; k < p.size(); ++k) p[k] = static_cast<double>(counts[k]) / total;
    return p;
  };

  std::vector<CategoryProfile> out;
  out.push_back({scenario, std::nullopt, "overall", profile_of(missing), missing.size()});
  if (stratum_covariate) {
    const auto& cov = d.covariates().at(static_cast<std::size_t>(*stratum_covariate));
    for (int code = 1; code <= cov.levels; ++code) {
      std::vector<std::size_t> rows;
      for (std::size_t i : missing)
        if (cov.codes[i] == code) rows.push_back(i);
      if (rows.empty()) continue;
      const StratumKey key{*stratum_covariate, code};
      out.push_back({scenario, key, d.stratum_label(key), profile_of(rows), rows.size()});
    }
  }
  return out;
}

inline std::vector<CategoryProfile> missing_category_profile(const ImputationSet& set, const Dataset& d,
                                                             const std::string& scenario,
                                                             std::optional<int> stratum_covariate = std::nullopt) {
  check_consistent(set, d);
  return missing_category_profile(set.copies, d, scenario, stratum_covariate);
}

inline std::vector<CategoryProfile> missing_category_profile(const AdjustedImputationSet& set, const Dataset& d,
                                                             const std::string& scenario,
                                                             std::optional<int> stratum_covariate = std::nullopt) {
  return missing_category_profile(set.as_imputations(), d, scenario, stratum_covariate);
}

/// Equal-weight average of matching profiles from several replications.
inline std::vector<CategoryProfile> average_profiles(const std::vector<std::vector<CategoryProfile>>& runs) {
  if (runs.empty()) return {};
  std::vector<CategoryProfile> out = runs.front();
  for (auto& p : out) {
    std::fill(p.proportions.begin(), p.proportions.end(), 0.0);
    p.count_basis = 0;
  }
  const double w = 1.0 / static_cast<double>(runs.size());
  for (const auto& run : runs) {
    if (run.size() != out.size()) throw DataError("replications produced different profile layouts");
    for (std::size_t j = 0; j < run.size(); ++j) {
      if (run[j].stratum_label != out[j].stratum_label || run[j].scenario != out[j].scenario)
        throw DataError("replications produced different profile layouts");
      for (std::size_t k = 0; k < out[j].proportions.size(); ++k) out[j].proportions[k] += w * run[j].proportions[k];
      out[j].count_basis += run[j].count_basis;
    }
  }
  return out;
}

struct NamedDelta {
  std::string name;
  DeltaSpec spec;
};

/// Adjusts the same MAR imputations under each candidate spec (common random
/// numbers) and profiles the result. The MAR profile comes first, labelled "MAR".
inline std::vector<CategoryProfile> delta_grid_scan(const Dataset& d, const ImputationSet& mar,
                                                    const std::vector<NamedDelta>& candidates, Link link,
                                                    std::uint64_t seed, std::optional<int> stratum_covariate = std::nullopt,
                                                    unsigned threads = 1) {
  auto out = missing_category_profile(mar, d, "MAR", stratum_covariate);
  for (const auto& c : candidates) {
    const auto adjusted = adjust(mar, d, c.spec, link, seed, threads);
    auto profiles = missing_category_profile(adjusted, d, c.name, stratum_covariate);
    out.insert(out.end(), profiles.begin(), profiles.end());
  }
  return out;
}

inline double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw DataError("profiles have different numbers of categories");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return 0.5 * s;
}

// ---------------------------------------------------------------------------
// Plausibility rules

/// A linear comparison between category proportions of a scenario profile
/// ("prop[k]") and of the MAR profile ("mar[k]"), e.g.
/// "prop[2]+prop[3]+prop[4] < mar[2]+mar[3]+mar[4]".
class ProportionRule {
 public:
  explicit ProportionRule(std::string text) : text_(std::move(text)) { parse(); }

  const std::string& text() const { return text_; }
  bool uses_mar() const { return uses_mar_; }

  bool holds(const std::vector<double>& prop, const std::vector<double>* mar) const {
    if (uses_mar_ && !mar) throw DataError("rule '" + text_ + "' needs a MAR profile");
    const double diff = side_value(lhs_, prop, mar) - side_value(rhs_, prop, mar);
    if (op_ == "<") return diff < 0;
    if (op_ == "<=") return diff <= 0;
    if (op_ == ">") return diff > 0;
    return diff >= 0;
  }

  int max_category() const { return max_category_; }

 private:
  struct Term {
    double sign = 1.0;
    bool mar = false;
    int category = 0;      // 0 for a constant
    double constant = 0.0;
  };

  static double side_value(const std::vector<Term>& side, const std::vector<double>& prop, const std::vector<double>* mar) {
    double v = 0.0;
    for (const auto& t : side) {
      if (t.category == 0) {
        v += t.sign * t.constant;
        continue;
      }
      const auto& src = t.mar ? *mar : prop;
      if (static_cast<std::size_t>(t.category) > src.size())
        throw DataError("rule refers to category " + std::to_string(t.category) + " but profiles have " +
                        std::to_string(src.size()));
      v += t.sign * src[static_cast<std::size_t>(t.category - 1)];
    }
    return v;
  }

  [[noreturn]] void fail(const std::string& why) const { throw DataError("malformed rule '" + text_ + "': " + why); }

  std::vector<Term> parse_side(const std::string& s) {
    std::vector<Term> terms;
    std::size_t i = 0;
    auto skip = [&] {
      while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    };
    double sign = 1.0;
    bool expect_term = true;
    skip();
    while (i < s.size()) {
      if (!expect_term) {
        if (s[i] == '+') sign = 1.0;
        else if (s[i] == '-') sign = -1.0;
        else fail("expected + or -");
        ++i;
        expect_term = true;
        skip();
        continue;
      }
      Term t;
      t.sign = sign;
      if (s.compare(i, 5, "prop[") == 0 || s.compare(i, 4, "mar[") == 0) {
        t.mar = s[i] == 'm';
        i += t.mar ? 4 : 5;
        const auto close = s.find(']', i);
        if (close == std::string::npos) fail("missing ]");
        try {
          std::size_t used = 0;
          t.category = std::stoi(s.substr(i, close - i), &used);
          if (used != close - i) fail("category index is not an integer");
        } catch (const std::logic_error&) {
          fail("category index is not an integer");
        }
        if (t.category < 1) fail("categories are numbered from 1");
        max_category_ = std::max(max_category_, t.category);
        uses_mar_ = uses_mar_ || t.mar;
        i = close + 1;
      } else {
        std::size_t used = 0;
        try {
          t.constant = std::stod(s.substr(i), &used);
        } catch (const std::logic_error&) {
          fail("expected prop[k], mar[k] or a number");
        }
        i += used;
      }
      terms.push_back(t);
      sign = 1.0;
      expect_term = false;
      skip();
    }
    if (terms.empty() || expect_term) fail("incomplete expression");
    return terms;
  }

  void parse() {
    for (const char* op : {"<=", ">=", "<", ">"}) {
      const auto at = text_.find(op);
      if (at == std::string::npos) continue;
      op_ = op;
      const std::string rest = text_.substr(at + op_.size());
      if (rest.find_first_of("<>") != std::string::npos) fail("more than one comparison");
      lhs_ = parse_side(text_.substr(0, at));
      rhs_ = parse_side(rest);
      return;
    }
    fail("no comparison operator");
  }

  std::string text_;
  std::string op_;
  std::vector<Term> lhs_, rhs_;
  bool uses_mar_ = false;
  int max_category_ = 0;
};

struct PlausibilityRules {
  double degenerate_mass = 0.995;
  double near_mar_tv = 0.02;
  std::vector<std::string> constraints;

  static PlausibilityRules from_json(const nlohmann::json& j) {
    PlausibilityRules r;
    try {
      if (j.contains("degenerate_mass")) r.degenerate_mass = j.at("degenerate_mass").get<double>();
      if (j.contains("near_mar_tv")) r.near_mar_tv = j.at("near_mar_tv").get<double>();
      if (j.contains("constraints")) r.constraints = j.at("constraints").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed rules file: ") + e.what());
    }
    for (const auto& c : r.constraints) ProportionRule{c};
    return r;
  }

  nlohmann::json to_json() const {
    return {{"degenerate_mass", degenerate_mass}, {"near_mar_tv", near_mar_tv}, {"constraints", constraints}};
  }
};

enum class FlagKind { degenerate, near_mar, rule_violation };

inline std::string to_string(FlagKind k) {
  switch (k) {
    case FlagKind::degenerate: return "DEGENERATE";
    case FlagKind::near_mar: return "NEAR_MAR";
    case FlagKind::rule_violation: return "RULE_VIOLATION";
  }
  return "?";
}

struct PlausibilityFlag {
  FlagKind kind;
  std::string scenario;
  std::string stratum_label;
  std::string detail;
};

/// Flags profiles that put nearly all mass on one category, that barely
/// differ from the matching MAR profile, or that break a user rule. Profiles
/// labelled "MAR" serve as the reference and are only checked for
/// degeneracy.
inline std::vector<PlausibilityFlag> plausibility_flags(const std::vector<CategoryProfile>& profiles,
                                                        const PlausibilityRules& rules,
                                                        const std::string& mar_label = "MAR") {
  std::vector<ProportionRule> parsed;
  for (const auto& c : rules.constraints) parsed.emplace_back(c);
  std::map<std::string, const CategoryProfile*> mar;
  for (const auto& p : profiles)
    if (p.scenario == mar_label) mar[p.stratum_label] = &p;

  std::vector<PlausibilityFlag> flags;
  for (const auto& p : profiles) {
    double top = 0.0;
    std::size_t top_k = 0;
    for (std::size_t k = 0; k < p.proportions.size(); ++k)
      if (p.proportions[k] > top) {
        top = p.proportions[k];
        top_k = k;
      }
    if (top >= rules.degenerate_mass)
      flags.push_back({FlagKind::degenerate, p.scenario, p.stratum_label,
                       "category " + std::to_string(top_k + 1) + " holds " + detail::format_real(top) + " of the mass"});
    if (p.scenario == mar_label) continue;
    const auto it = mar.find(p.stratum_label);
    const std::vector<double>* reference = it == mar.end() ? nullptr : &it->second->proportions;
    if (reference) {
      const double tv = total_variation(p.proportions, *reference);
      if (tv < rules.near_mar_tv)
        flags.push_back({FlagKind::near_mar, p.scenario, p.stratum_label,
                         "total-variation distance to MAR is " + detail::format_real(tv)});
    }
    for (const auto& rule : parsed) {
      if (rule.max_category() > static_cast<int>(p.proportions.size()))
        throw DataError("rule '" + rule.text() + "' refers to a category beyond K");
      if (rule.uses_mar() && !reference)
        throw DataError("rule '" + rule.text() + "' needs a MAR profile for " + p.stratum_label);
      if (!rule.holds(p.proportions, reference))
        flags.push_back({FlagKind::rule_violation, p.scenario, p.stratum_label, rule.text()});
    }
  }
  return flags;
}

// ---------------------------------------------------------------------------
// Output

/// One row per profile: scenario, stratum, n_missing, p1..pK.
inline void write_profiles_csv(std::ostream& out, const std::vector<CategoryProfile>& profiles, const std::string& x1_name) {
  if (profiles.empty()) return;
  std::vector<std::string> header{"scenario", "stratum", "n_missing"};
  for (std::size_t k = 1; k <= profiles.front().proportions.size(); ++k) header.push_back(x1_name + std::to_string(k));
  csv::write_row(out, header);
  for (const auto& p : profiles) {
    std::vector<std::string> row{p.scenario, p.stratum_label, std::to_string(p.count_basis)};
    for (double v : p.proportions) row.push_back(detail::format_real(v));
    csv::write_row(out, row);
  }
}

/// Side-by-side percentages: one row per (stratum, category), one column per
/// scenario in order of first appearance.
inline void write_profiles_table(std::ostream& out, const std::vector<CategoryProfile>& profiles,
                                 const std::string& x1_name, int digits = 2) {
  std::vector<std::string> scenarios, strata;
  for (const auto& p : profiles) {
    if (std::find(scenarios.begin(), scenarios.end(), p.scenario) == scenarios.end()) scenarios.push_back(p.scenario);
    if (std::find(strata.begin(), strata.end(), p.stratum_label) == strata.end()) strata.push_back(p.stratum_label);
  }
  std::vector<std::string> header{"stratum", "category"};
  header.insert(header.end(), scenarios.begin(), scenarios.end());
  csv::write_row(out, header);
  if (profiles.empty()) return;
  const std::size_t K = profiles.front().proportions.size();
  for (const auto& stratum : strata)
    for (std::size_t k = 0; k < K; ++k) {
      std::vector<std::string> row{stratum, x1_name + std::to_string(k + 1)};
      for (const auto& sc : scenarios) {
        std::string cell;
        for (const auto& p : profiles)
          if (p.scenario == sc && p.stratum_label == stratum) {
            std::ostringstream ss;
            ss << std::fixed << std::setprecision(digits) << 100.0 * p.proportions[k];
            cell = ss.str();
          }
        row.push_back(cell);
      }
      csv::write_row(out, row);
    }
}

/// Plot-ready long format: scenario, stratum, category, proportion.
inline void write_profiles_long_csv(std::ostream& out, const std::vector<CategoryProfile>& profiles) {
  csv::write_row(out, std::vector<std::string>{"scenario", "stratum", "category", "proportion"});
  for (const auto& p : profiles)
    for (std::size_t k = 0; k < p.proportions.size(); ++k)
      csv::write_row(out, std::vector<std::string>{p.scenario, p.stratum_label, std::to_string(k + 1),
                                                   detail::format_real(p.proportions[k])});
}

inline nlohmann::json to_json(const std::vector<PlausibilityFlag>& flags) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& f : flags)
    j.push_back({{"flag", to_string(f.kind)}, {"scenario", f.scenario}, {"stratum", f.stratum_label}, {"detail", f.detail}});
  return j;
}

}  // namespace deltami
