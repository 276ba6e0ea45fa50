#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deltami/dataset.hpp"
#include "deltami/distributions.hpp"
#include "deltami/errors.hpp"
#include "deltami/outcome.hpp"
#include "deltami/rng.hpp"

namespace deltami {

/// Synthetic registry shaped like a provincial trauma cohort: in-hospital
/// death, a 3-level Glasgow Coma Scale grouping (1 severe .. 3 mild) with
/// missing values concentrated in provinces and in the severe and mild
/// groups, six provinces, sex, inter-hospital transfer, and patients
/// clustered in hospitals nested within provinces.
struct TraumaConfig {
  std::size_t n = 54354;
  std::vector<double> province_share{3.81, 35.02, 2.00, 22.09, 11.64, 25.44};   // percent, A..F
  std::vector<double> missing_rate{33.85, 13.30, 6.54, 10.83, 16.48, 19.98};    // percent of each province
  std::vector<double> transfer_rate{49.73, 38.66, 45.16, 37.62, 51.10, 33.44};  // percent
  double male_rate = 29.92;
  // GCS1/GCS2/GCS3 frequencies per province (any scale).
  std::vector<std::vector<double>> gcs{{5.70, 3.43, 57.03}, {8.79, 5.05, 72.86}, {8.20, 5.81, 79.45},
                                       {9.52, 5.51, 74.15}, {8.50, 4.68, 70.33}, {8.55, 4.61, 66.85}};
  // Relative chance of a GCS value going missing, by true group.
  std::vector<double> missing_weight{3.0, 1.0, 2.0};
  int hospitals_per_province = 5;
  double hospital_sd = 0.28;
  // Log odds of death.
  double intercept = -2.22;
  std::vector<double> gcs_effect{std::log(0.87), std::log(1.19)};
  std::vector<double> province_effect{std::log(1.32), 0.0, std::log(1.77), std::log(0.67), std::log(1.02), std::log(0.90)};
  double male_effect = 0.25;
  double transfer_effect = -0.20;
  std::uint64_t seed = 2013;

  int provinces() const { return static_cast<int>(province_share.size()); }
  int hospitals() const { return provinces() * hospitals_per_province; }

  void validate() const {
    auto fail = [](const std::string& what) { throw DataError("trauma config: " + what); };
    const auto P = province_share.size();
    if (P < 2) fail("need at least 2 provinces");
    if (missing_rate.size() != P || transfer_rate.size() != P || gcs.size() != P || province_effect.size() != P)
      fail("per-province vectors must all have one entry per province");
    for (const auto& row : gcs)
      if (row.size() != 3) fail("each GCS row needs 3 entries");
    if (missing_weight.size() != 3 || gcs_effect.size() != 2) fail("GCS has 3 groups");
    for (double v : missing_rate)
      if (!(v >= 0.0 && v <= 100.0)) fail("missing rates are percentages");
    for (double v : missing_weight)
      if (!(v > 0.0)) fail("missing weights must be positive");
    if (hospitals_per_province < 1) fail("need at least one hospital per province");
    if (!(hospital_sd >= 0.0)) fail("hospital_sd must be nonnegative");
  }

  static TraumaConfig from_json(const nlohmann::json& j) {
    TraumaConfig c;
    try {
      c.n = j.value("n", c.n);
      c.province_share = j.value("province_share", c.province_share);
      c.missing_rate = j.value("missing_rate", c.missing_rate);
      c.transfer_rate = j.value("transfer_rate", c.transfer_rate);
      c.male_rate = j.value("male_rate", c.male_rate);
      c.gcs = j.value("gcs", c.gcs);
      c.missing_weight = j.value("missing_weight", c.missing_weight);
      c.hospitals_per_province = j.value("hospitals_per_province", c.hospitals_per_province);
      c.hospital_sd = j.value("hospital_sd", c.hospital_sd);
      c.intercept = j.value("intercept", c.intercept);
      c.gcs_effect = j.value("gcs_effect", c.gcs_effect);
      c.province_effect = j.value("province_effect", c.province_effect);
      c.male_effect = j.value("male_effect", c.male_effect);
      c.transfer_effect = j.value("transfer_effect", c.transfer_effect);
      c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("malformed trauma config: ") + e.what());
    }
    c.validate();
    return c;
  }

  nlohmann::json to_json() const {
    return {{"design", "trauma-lookalike"},
            {"n", n},
            {"province_share", province_share},
            {"missing_rate", missing_rate},
            {"transfer_rate", transfer_rate},
            {"male_rate", male_rate},
            {"gcs", gcs},
            {"missing_weight", missing_weight},
            {"hospitals_per_province", hospitals_per_province},
            {"hospital_sd", hospital_sd},
            {"intercept", intercept},
            {"gcs_effect", gcs_effect},
            {"province_effect", province_effect},
            {"male_effect", male_effect},
            {"transfer_effect", transfer_effect},
            {"seed", seed}};
  }
};

/// Province B is the usual reference in analyses of this table.
inline ReferenceCategories trauma_reference() { return {{"province", 2}}; }

namespace detail {

/// Integer counts proportional to `share` summing to `total` (largest remainder).
inline std::vector<std::size_t> apportion(const std::vector<double>& share, std::size_t total) {
  const double sum = std::accumulate(share.begin(), share.end(), 0.0);
  std::vector<std::size_t> out(share.size());
  std::vector<std::pair<double, std::size_t>> rest;
  std::size_t used = 0;
  for (std::size_t p = 0; p < share.size(); ++p) {
    const double exact = share[p] / sum * static_cast<double>(total);
    out[p] = static_cast<std::size_t>(std::floor(exact));
    used += out[p];
    rest.emplace_back(exact - std::floor(exact), p);
  }
  std::stable_sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < total; ++k, ++used) ++out[rest[k % rest.size()].second];
  return out;
}

}  // namespace detail

/// The registry before masking, plus the masked copy.
struct TraumaData {
  Dataset full;
  Dataset observed;
  std::vector<double> hospital_effects;
};

inline TraumaData generate_trauma(const TraumaConfig& c) {
  c.validate();
  Rng rng(derive_seed(c.seed, {tag("trauma")}));
  const int P = c.provinces();
  const int H = c.hospitals_per_province;
  const auto sizes = detail::apportion(c.province_share, c.n);

  // Hospital intercepts: evenly spaced normal scores, centred and scaled to
  // hospital_sd within each province, in random order.
  std::vector<double> scores(static_cast<std::size_t>(H));
  for (int h = 0; h < H; ++h) scores[static_cast<std::size_t>(h)] = norm_quantile((h + 0.5) / H);
  double rms = 0.0;
  for (double s : scores) rms += s * s / H;
  rms = std::sqrt(rms);
  std::vector<double> effects;
  for (int p = 0; p < P; ++p) {
    std::vector<double> v = scores;
    for (auto& x : v) x = rms > 0.0 ? c.hospital_sd * x / rms : 0.0;
    std::shuffle(v.begin(), v.end(), rng.engine());
    effects.insert(effects.end(), v.begin(), v.end());
  }

  std::vector<double> death;
  std::vector<int> gcs, province, sex, transfer, hospital;
  std::vector<std::size_t> masked;
  for (int p = 0; p < P; ++p) {
    const auto pi = static_cast<std::size_t>(p);
    const std::size_t first = death.size();
    const double total = c.gcs[pi][0] + c.gcs[pi][1] + c.gcs[pi][2];
    const double cut1 = c.gcs[pi][0] / total, cut2 = (c.gcs[pi][0] + c.gcs[pi][1]) / total;
    for (std::size_t i = 0; i < sizes[pi]; ++i) {
      const int g = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(H)));
      const int h = p * H + g;
      const double u = rng.uniform();
      const int k = u < cut1 ? 1 : (u < cut2 ? 2 : 3);
      const int male = rng.uniform() < c.male_rate / 100.0 ? 2 : 1;
      const int moved = rng.uniform() < c.transfer_rate[pi] / 100.0 ? 2 : 1;
      double eta = c.intercept + c.province_effect[pi] + effects[static_cast<std::size_t>(h - 1)];
      if (k > 1) eta += c.gcs_effect[static_cast<std::size_t>(k - 2)];
      if (male == 2) eta += c.male_effect;
      if (moved == 2) eta += c.transfer_effect;
      death.push_back(rng.uniform() < logistic(eta) ? 1.0 : 0.0);
      gcs.push_back(k);
      province.push_back(p + 1);
      sex.push_back(male);
      transfer.push_back(moved);
      hospital.push_back(h);
    }
    // Exactly round(rate * size) missing values per province, drawn with
    // probability proportional to the GCS group's weight (weighted sampling
    // without replacement by exponential keys).
    const auto want = static_cast<std::size_t>(std::llround(c.missing_rate[pi] / 100.0 * static_cast<double>(sizes[pi])));
    std::vector<std::pair<double, std::size_t>> keys;
    for (std::size_t i = first; i < death.size(); ++i)
      keys.emplace_back(-std::log(rng.uniform()) / c.missing_weight[static_cast<std::size_t>(gcs[i] - 1)], i);
    std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(want), keys.end());
    for (std::size_t j = 0; j < want; ++j) masked.push_back(keys[j].second);
  }

  std::vector<NominalColumn> cov{{"province", P, province}, {"sex", 2, sex}, {"transfer", 2, transfer}};
  Dataset full("death", OutcomeKind::binary, death, "GCS", 3, gcs, cov, NominalColumn{"hospital", c.hospitals(), hospital});
  std::vector<int> partial = gcs;
  for (std::size_t i : masked) partial[i] = 0;
  Dataset observed = full.with_x1(std::move(partial));
  return {std::move(full), std::move(observed), std::move(effects)};
}

}  // namespace deltami
