#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deltami/csv.hpp"
#include "deltami/errors.hpp"

namespace deltami {

enum class OutcomeKind { binary, continuous };

/// Nominal column with dense codes 1..levels.
struct NominalColumn {
  std::string name;
  int levels = 0;
  std::vector<int> codes;
};

/// One category of one nominal covariate, e.g. X2 = 1.
struct StratumKey {
  int covariate = 0;  // index into Dataset::covariates()
  int code = 0;
  auto operator<=>(const StratumKey&) const = default;
};

/// Column roles of a CSV file.
struct Schema {
  struct Nominal {
    std::string name;
    int levels = 0;  // 0: infer from the data
  };
  std::string outcome;
  OutcomeKind outcome_kind = OutcomeKind::binary;
  std::string ordinal;
  int ordinal_levels = 0;  // 0: infer from the data
  std::vector<Nominal> nominal;
  std::optional<std::string> cluster;

  static Schema from_json(const nlohmann::json& j) {
    Schema s;
    try {
      const auto& out = j.at("outcome");
      s.outcome = out.at("name").get<std::string>();
      const auto kind = out.at("kind").get<std::string>();
      if (kind == "binary") s.outcome_kind = OutcomeKind::binary;
      else if (kind == "continuous") s.outcome_kind = OutcomeKind::continuous;
      else throw DataError("schema: outcome kind must be binary or continuous");
      const auto& ord = j.at("ordinal");
      s.ordinal = ord.at("name").get<std::string>();
      s.ordinal_levels = ord.value("levels", 0);
      for (const auto& c : j.value("nominal", nlohmann::json::array()))
        s.nominal.push_back({c.at("name").get<std::string>(), c.value("levels", 0)});
      if (j.contains("cluster") && !j.at("cluster").is_null())
        s.cluster = j.at("cluster").at("name").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("schema: ") + e.what());
    }
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["outcome"] = {{"name", outcome}, {"kind", outcome_kind == OutcomeKind::binary ? "binary" : "continuous"}};
    j["ordinal"] = {{"name", ordinal}};
    if (ordinal_levels > 0) j["ordinal"]["levels"] = ordinal_levels;
    j["nominal"] = nlohmann::json::array();
    for (const auto& c : nominal) {
      nlohmann::json cj = {{"name", c.name}};
      if (c.levels > 0) cj["levels"] = c.levels;
      j["nominal"].push_back(cj);
    }
    if (cluster) j["cluster"] = {{"name", *cluster}};
    return j;
  }
};

/// Columnar table: outcome Y, partially observed ordinal X1 (code 0 marks a
/// missing cell), fully observed nominal covariates, optional cluster labels.
/// Immutable once built; derived tables are new objects.
class Dataset {
 public:
  struct Passthrough {
    std::string name;
    std::vector<std::string> values;
  };

  Dataset() = default;

  Dataset(std::string outcome_name, OutcomeKind kind, std::vector<double> outcome, std::string x1_name, int levels,
          std::vector<int> x1, std::vector<NominalColumn> covariates, std::optional<NominalColumn> cluster = {})
      : outcome_name_(std::move(outcome_name)),
        kind_(kind),
        outcome_(std::move(outcome)),
        x1_name_(std::move(x1_name)),
        levels_(levels),
        x1_(std::move(x1)),
        covariates_(std::move(covariates)),
        cluster_(std::move(cluster)) {
    validate();
  }

  std::size_t n() const { return x1_.size(); }
  int K() const { return levels_; }
  OutcomeKind outcome_kind() const { return kind_; }
  const std::string& outcome_name() const { return outcome_name_; }
  const std::string& x1_name() const { return x1_name_; }
  const std::vector<double>& outcome() const { return outcome_; }
  const std::vector<int>& x1() const { return x1_; }
  bool missing(std::size_t i) const { return x1_[i] == 0; }
  const std::vector<NominalColumn>& covariates() const { return covariates_; }
  const std::optional<NominalColumn>& cluster() const { return cluster_; }
  int G() const { return cluster_ ? cluster_->levels : 0; }
  const std::vector<Passthrough>& passthrough() const { return passthrough_; }
  const std::vector<std::string>& column_order() const { return column_order_; }

  std::size_t missing_count() const { return static_cast<std::size_t>(std::count(x1_.begin(), x1_.end(), 0)); }

  /// 1 where X1 is missing, 0 where observed (the complement of R).
  std::vector<std::uint8_t> missing_mask() const {
    std::vector<std::uint8_t> m(n());
    for (std::size_t i = 0; i < n(); ++i) m[i] = missing(i) ? 1 : 0;
    return m;
  }

  std::vector<std::size_t> missing_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n(); ++i)
      if (missing(i)) rows.push_back(i);
    return rows;
  }

  std::vector<std::size_t> observed_rows() const {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n(); ++i)
      if (!missing(i)) rows.push_back(i);
    return rows;
  }

  int covariate_index(const std::string& name) const {
    for (std::size_t j = 0; j < covariates_.size(); ++j)
      if (covariates_[j].name == name) return static_cast<int>(j);
    throw DataError("unknown nominal covariate '" + name + "'");
  }

  bool in_stratum(std::size_t i, const StratumKey& key) const {
    return covariates_.at(static_cast<std::size_t>(key.covariate)).codes[i] == key.code;
  }

  /// Parses "NAME=CODE" against this dataset's covariates.
  StratumKey parse_stratum(const std::string& text) const {
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw DataError("stratum '" + text + "' must look like NAME=CODE");
    StratumKey key{covariate_index(text.substr(0, eq)), 0};
    const std::string code = text.substr(eq + 1);
    auto [ptr, ec] = std::from_chars(code.data(), code.data() + code.size(), key.code);
    if (ec != std::errc() || ptr != code.data() + code.size())
      throw DataError("stratum '" + text + "': code is not an integer");
    if (key.code < 1 || key.code > covariates_[static_cast<std::size_t>(key.covariate)].levels)
      throw DataError("stratum '" + text + "' references an absent category");
    return key;
  }

  std::string stratum_label(const StratumKey& key) const {
    return covariates_.at(static_cast<std::size_t>(key.covariate)).name + "=" + std::to_string(key.code);
  }

  /// Same table with X1 replaced (e.g. a completed copy).
  Dataset with_x1(std::vector<int> x1) const {
    if (x1.size() != n()) throw DataError("replacement X1 column has wrong length");
    Dataset d = *this;
    d.x1_ = std::move(x1);
    d.validate();
    return d;
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset d = *this;
    auto pick = [&](const auto& src) {
      std::remove_cvref_t<decltype(src)> out;
      out.reserve(rows.size());
      for (std::size_t i : rows) out.push_back(src.at(i));
      return out;
    };
    d.outcome_ = pick(outcome_);
    d.x1_ = pick(x1_);
    for (std::size_t j = 0; j < covariates_.size(); ++j) d.covariates_[j].codes = pick(covariates_[j].codes);
    if (cluster_) d.cluster_->codes = pick(cluster_->codes);
    for (std::size_t j = 0; j < passthrough_.size(); ++j) d.passthrough_[j].values = pick(passthrough_[j].values);
    return d;
  }

  Dataset with_passthrough(std::vector<Passthrough> extra, std::vector<std::string> order = {}) const {
    Dataset d = *this;
    for (const auto& p : extra)
      if (p.values.size() != n()) throw DataError("passthrough column '" + p.name + "' has wrong length");
    d.passthrough_ = std::move(extra);
    d.column_order_ = std::move(order);
    return d;
  }

  Schema schema() const {
    Schema s;
    s.outcome = outcome_name_;
    s.outcome_kind = kind_;
    s.ordinal = x1_name_;
    s.ordinal_levels = levels_;
    for (const auto& c : covariates_) s.nominal.push_back({c.name, c.levels});
    if (cluster_) s.cluster = cluster_->name;
    return s;
  }

 private:
  void validate() const {
    const std::size_t rows = x1_.size();
    if (levels_ <= 2) throw DataError("ordinal covariate needs K > 2 categories, got " + std::to_string(levels_));
    if (outcome_.size() != rows) throw DataError("outcome column has wrong length");
    for (int v : x1_)
      if (v < 0 || v > levels_) throw DataError("X1 code " + std::to_string(v) + " outside 1.." + std::to_string(levels_));
    if (kind_ == OutcomeKind::binary)
      for (double y : outcome_)
        if (y != 0.0 && y != 1.0) throw DataError("binary outcome must be 0 or 1");
    auto check_nominal = [&](const NominalColumn& c) {
      if (c.codes.size() != rows) throw DataError("column '" + c.name + "' has wrong length");
      if (c.levels < 1) throw DataError("column '" + c.name + "' needs at least one level");
      for (int v : c.codes)
        if (v < 1 || v > c.levels)
          throw DataError("column '" + c.name + "': code " + std::to_string(v) + " outside 1.." + std::to_string(c.levels));
    };
    for (const auto& c : covariates_) check_nominal(c);
    if (cluster_) check_nominal(*cluster_);
  }

  std::string outcome_name_;
  OutcomeKind kind_ = OutcomeKind::binary;
  std::vector<double> outcome_;
  std::string x1_name_;
  int levels_ = 0;
  std::vector<int> x1_;
  std::vector<NominalColumn> covariates_;
  std::optional<NominalColumn> cluster_;
  std::vector<Passthrough> passthrough_;
  std::vector<std::string> column_order_;
};

namespace detail {

inline bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

inline int parse_code(const std::string& s, const std::string& column, std::size_t line) {
  int v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError("line " + std::to_string(line) + ", column '" + column + "': '" + s + "' is not an integer code");
  return v;
}

inline double parse_real(const std::string& s, const std::string& column, std::size_t line) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError("line " + std::to_string(line) + ", column '" + column + "': '" + s + "' is not a number");
  return v;
}

/// Every code 1..levels must appear; a gap would silently collapse a category.
inline int dense_levels(const std::vector<int>& codes, int declared, const std::string& column) {
  int max_code = 0;
  for (int c : codes) max_code = std::max(max_code, c);
  const int levels = declared > 0 ? declared : max_code;
  if (max_code > levels)
    throw DataError("column '" + column + "': unknown category code " + std::to_string(max_code));
  std::vector<bool> seen(static_cast<std::size_t>(levels) + 1, false);
  for (int c : codes) {
    if (c < 1) throw DataError("column '" + column + "': unknown category code " + std::to_string(c));
    seen[static_cast<std::size_t>(c)] = true;
  }
  for (int k = 1; k <= levels; ++k)
    if (!seen[static_cast<std::size_t>(k)])
      throw DataError("column '" + column + "': category " + std::to_string(k) + " never observed (codes must be dense 1.." +
                      std::to_string(levels) + ")");
  return levels;
}

inline std::string format_real(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace detail

/// Builds a Dataset from CSV text. Missing X1 cells are NA or empty; any
/// other column with a missing cell is rejected.
inline Dataset parse_csv(std::string_view text, const Schema& schema) {
  const auto rows = csv::parse(text);
  if (rows.empty()) throw DataError("csv: missing header");
  const auto& header = rows.front();
  auto find = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw DataError("csv: column '" + name + "' not found");
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t y_col = find(schema.outcome);
  const std::size_t x1_col = find(schema.ordinal);
  std::vector<std::size_t> nom_cols;
  for (const auto& c : schema.nominal) nom_cols.push_back(find(c.name));
  const std::optional<std::size_t> clus_col = schema.cluster ? std::optional(find(*schema.cluster)) : std::nullopt;

  std::vector<bool> used(header.size(), false);
  used[y_col] = used[x1_col] = true;
  for (auto c : nom_cols) used[c] = true;
  if (clus_col) used[*clus_col] = true;

  const std::size_t n = rows.size() - 1;
  std::vector<double> y(n);
  std::vector<int> x1(n);
  std::vector<std::vector<int>> nominal(nom_cols.size(), std::vector<int>(n));
  std::vector<int> clus(clus_col ? n : 0);
  std::vector<Dataset::Passthrough> extra;
  for (std::size_t j = 0; j < header.size(); ++j)
    if (!used[j]) extra.push_back({header[j], std::vector<std::string>(n)});

  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = rows[i + 1];
    const std::size_t line = i + 2;
    if (row.size() != header.size())
      throw DataError("line " + std::to_string(line) + ": expected " + std::to_string(header.size()) + " fields, got " +
                      std::to_string(row.size()));
    auto require = [&](std::size_t col) -> const std::string& {
      if (detail::is_missing_token(row[col]))
        throw DataError("line " + std::to_string(line) + ": non-x1 missingness in column '" + header[col] + "'");
      return row[col];
    };
    y[i] = detail::parse_real(require(y_col), header[y_col], line);
    if (detail::is_missing_token(row[x1_col])) {
      x1[i] = 0;
    } else {
      x1[i] = detail::parse_code(row[x1_col], header[x1_col], line);
      if (x1[i] < 1) throw DataError("line " + std::to_string(line) + ": unknown category code " + row[x1_col]);
    }
    for (std::size_t j = 0; j < nom_cols.size(); ++j) {
      nominal[j][i] = detail::parse_code(require(nom_cols[j]), header[nom_cols[j]], line);
      if (nominal[j][i] < 1)
        throw DataError("line " + std::to_string(line) + ": unknown category code in '" + header[nom_cols[j]] + "'");
    }
    if (clus_col) {
      clus[i] = detail::parse_code(require(*clus_col), header[*clus_col], line);
      if (clus[i] < 1) throw DataError("line " + std::to_string(line) + ": cluster codes start at 1");
    }
    std::size_t e = 0;
    for (std::size_t j = 0; j < header.size(); ++j)
      if (!used[j]) extra[e++].values[i] = row[j];
  }

  std::vector<int> x1_observed;
  for (int v : x1)
    if (v != 0) x1_observed.push_back(v);
  const int K = detail::dense_levels(x1_observed, schema.ordinal_levels, schema.ordinal);
  std::vector<NominalColumn> covs;
  for (std::size_t j = 0; j < nom_cols.size(); ++j) {
    const int L = detail::dense_levels(nominal[j], schema.nominal[j].levels, schema.nominal[j].name);
    covs.push_back({schema.nominal[j].name, L, std::move(nominal[j])});
  }
  std::optional<NominalColumn> cluster;
  if (clus_col) {
    const int G = detail::dense_levels(clus, 0, *schema.cluster);
    cluster = NominalColumn{*schema.cluster, G, std::move(clus)};
  }
  Dataset d(schema.outcome, schema.outcome_kind, std::move(y), schema.ordinal, K, std::move(x1), std::move(covs),
            std::move(cluster));
  return d.with_passthrough(std::move(extra), header);
}

inline Dataset load_csv(const std::string& path, const Schema& schema) { return parse_csv(csv::read_file(path), schema); }

/// Writes the table, keeping the original column order when the dataset came
/// from a file. Missing X1 cells are written as NA.
inline void write_csv(std::ostream& out, const Dataset& d) {
  std::vector<std::string> order = d.column_order();
  if (order.empty()) {
    order.push_back(d.outcome_name());
    order.push_back(d.x1_name());
    for (const auto& c : d.covariates()) order.push_back(c.name);
    if (d.cluster()) order.push_back(d.cluster()->name);
    for (const auto& p : d.passthrough()) order.push_back(p.name);
  }
  std::map<std::string, std::function<std::string(std::size_t)>> getters;
  getters[d.outcome_name()] = [&](std::size_t i) {
    return d.outcome_kind() == OutcomeKind::binary ? std::string(d.outcome()[i] != 0.0 ? "1" : "0")
                                                   : detail::format_real(d.outcome()[i]);
  };
  getters[d.x1_name()] = [&](std::size_t i) { return d.missing(i) ? std::string("NA") : std::to_string(d.x1()[i]); };
  for (const auto& c : d.covariates()) getters[c.name] = [&c](std::size_t i) { return std::to_string(c.codes[i]); };
  if (d.cluster()) getters[d.cluster()->name] = [&](std::size_t i) { return std::to_string(d.cluster()->codes[i]); };
  for (const auto& p : d.passthrough()) getters[p.name] = [&p](std::size_t i) { return p.values[i]; };

  csv::write_row(out, order);
  csv::Row row(order.size());
  for (std::size_t i = 0; i < d.n(); ++i) {
    for (std::size_t j = 0; j < order.size(); ++j) row[j] = getters.at(order[j])(i);
    csv::write_row(out, row);
  }
}

inline std::string to_csv(const Dataset& d) {
  std::ostringstream ss;
  write_csv(ss, d);
  return ss.str();
}

/// Fraction of rows with X1 missing, optionally within one stratum.
inline double missing_rate(const Dataset& d, std::optional<StratumKey> stratum = std::nullopt) {
  std::size_t total = 0, miss = 0;
  for (std::size_t i = 0; i < d.n(); ++i) {
    if (stratum && !d.in_stratum(i, *stratum)) continue;
    ++total;
    if (d.missing(i)) ++miss;
  }
  if (total == 0) throw DataError(stratum ? "empty stratum " + d.stratum_label(*stratum) : std::string("empty dataset"));
  return static_cast<double>(miss) / static_cast<double>(total);
}

}  // namespace deltami
