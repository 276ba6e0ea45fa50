// Acceptance run: one PASS/FAIL line per criterion. Exits 1 if any fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include <boost/math/distributions/normal.hpp>
#include <nlohmann/json.hpp>

#include "deltami/deltami.hpp"
#include "test_support.hpp"

using namespace deltami;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int digits = 4) {
  std::ostringstream ss;
  ss.precision(digits);
  ss << std::fixed << v;
  return ss.str();
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

const MonteCarloReport& nonhier_report() {
  static const MonteCarloReport r = [] {
    auto c = ScenarioConfig::defaults(Design::nonhier_extreme);
    c.R = 200;
    c.M = 10;
    c.n = 2000;
    return run_monte_carlo(c);
  }();
  return r;
}

Outcome estimator_sanity() {
  const auto& r = nonhier_report();
  const auto& sim = r.method("SIMULATED");
  double worst_bias = 0.0, lo = 1.0, hi = 0.0;
  for (const auto& c : sim.coefficients) {
    worst_bias = std::max(worst_bias, std::abs(c.rel_bias_pct));
    lo = std::min(lo, c.coverage);
    hi = std::max(hi, c.coverage);
  }
  const bool pass = worst_bias < 2.5 && lo >= 0.91 && hi <= 0.98 && r.runtime_seconds < 600.0 && r.R_used == 200;
  return {pass, "max |rel bias| " + fmt(worst_bias, 2) + "%, coverage " + fmt(lo, 3) + ".." + fmt(hi, 3) + ", " +
                    fmt(r.runtime_seconds, 1) + " s, R used " + std::to_string(r.R_used)};
}

Outcome directional_mnar() {
  const auto& r = nonhier_report();
  const auto& mar = r.method("MAR");
  const auto& mnar = r.method("MNAR3");
  bool pass = true;
  std::string detail;
  for (const char* name : {"X13", "X15", "X22", "X23", "X24"}) {
    const auto& a = mar.at(name);
    const auto& b = mnar.at(name);
    const bool ok = std::abs(b.rel_bias_pct) < std::abs(a.rel_bias_pct) && b.coverage >= a.coverage;
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : "; ") + name + " " + fmt(a.rel_bias_pct, 2) + "->" +
              fmt(b.rel_bias_pct, 2) + "% cov " + fmt(a.coverage, 3) + "->" + fmt(b.coverage, 3);
  }
  return {pass, detail};
}

Outcome hierarchical_failure() {
  auto c = ScenarioConfig::defaults(Design::hier_extreme);
  c.R = 100;
  c.M = 10;
  MonteCarloOptions opt;
  opt.imputation_model = false;
  const auto r = run_monte_carlo(c, opt);
  const auto& mar = r.method("MAR").at("(Intercept)");
  bool pass = mar.rel_bias_pct > 100.0 && mar.coverage < 0.05;
  std::string detail = "MAR intercept " + fmt(mar.rel_bias_pct, 2) + "% cov " + fmt(mar.coverage, 3);
  for (const auto& s : c.scenarios) {
    const auto& m = r.method(s.name).at("(Intercept)");
    pass = pass && std::abs(m.rel_bias_pct) < 10.0;
    detail += "; " + s.name + " " + fmt(m.rel_bias_pct, 2) + "%";
  }
  return {pass, detail + "; R used " + std::to_string(r.R_used)};
}

Outcome mar_imputation_bias() {
  const auto& r = nonhier_report();
  for (const auto& row : r.imputation_model)
    if (row.coefficient == "Y")
      return {row.rel_bias_pct >= 20.0 && row.rel_bias_pct <= 35.0,
              "Y coefficient " + fmt(row.simulated) + " full vs " + fmt(row.mar) + " MAR, bias " +
                  fmt(row.rel_bias_pct, 2) + "%"};
  return {false, "no Y row in the imputation-model table"};
}

OutcomeFit fake_fit(double estimate, double se) {
  OutcomeFit f;
  f.names = {"b"};
  f.coefficients = Eigen::VectorXd::Constant(1, estimate);
  f.se = Eigen::VectorXd::Constant(1, se);
  return f;
}

Outcome rubin_oracle() {
  const auto c = pool_rubin({fake_fit(1.0, 0.2), fake_fit(1.2, 0.2), fake_fit(1.4, 0.2)}).coefficients[0];
  // By hand: W = 0.04, B = 0.04, T = W + (1 + 1/3) B, df = (M-1)(1 + W/((1+1/M)B))^2.
  const double W = 0.04, B = 0.04, T = W + (4.0 / 3.0) * B;
  const double r = (4.0 / 3.0) * B / W;
  const double df = 2.0 * std::pow(1.0 + 1.0 / r, 2.0);
  const double err = std::max({std::abs(c.qbar - 1.2), std::abs(c.W - W), std::abs(c.B - B), std::abs(c.T - T),
                               std::abs(c.df - df), std::abs(c.df - 6.125), std::abs(T - 0.09333333333333334)});
  return {err < 1e-12, "qbar " + fmt(c.qbar, 6) + " B " + fmt(c.B, 6) + " T " + fmt(c.T, 6) + " df " + fmt(c.df, 6) +
                           ", max error " + sci(err)};
}

Outcome ordinal_mle() {
  // Gradient against central differences of an independent log-likelihood.
  std::mt19937_64 gen(3);
  std::normal_distribution<double> z;
  double worst_grad = 0.0;
  for (int point = 0; point < 20; ++point) {
    const auto data = oracle::latent_probit_data(80, 0.5, {-1.0, 0.0, 0.7, 1.5}, 100 + point, 3);
    const auto X = oracle::to_matrix(data.X);
    Eigen::VectorXd theta(7);
    theta << z(gen), z(gen), z(gen), -1.2 + 0.3 * z(gen), 0.0 + 0.1 * z(gen), 0.6, 1.4;
    const auto grad = loglik_and_gradient(theta, X, data.y, 5, Link::probit).second;
    const double h = 1e-6;
    for (Eigen::Index j = 0; j < theta.size(); ++j) {
      Eigen::VectorXd up = theta, dn = theta;
      up[j] += h;
      dn[j] -= h;
      const double fd = (oracle::cumulative_loglik(to_std(up), data.X, data.y, 5) -
                         oracle::cumulative_loglik(to_std(dn), data.X, data.y, 5)) /
                        (2 * h);
      worst_grad = std::max(worst_grad, std::abs(grad[j] - fd) / std::max(1.0, std::abs(fd)));
    }
  }

  // Intercept-only thresholds against normal quantiles of cumulative shares.
  const Eigen::MatrixXd X0(100, 0);
  std::vector<int> y;
  const int counts[] = {7, 31, 12, 50};
  for (int k = 0; k < 4; ++k) y.insert(y.end(), counts[k], k + 1);
  const auto fit0 = fit_cumulative(X0, y, 4, Link::probit);
  double worst_zeta = 0.0, cum = 0.0;
  for (int k = 0; k < 3; ++k) {
    cum += counts[k] / 100.0;
    worst_zeta = std::max(worst_zeta, std::abs(fit0.zeta[k] - boost::math::quantile(boost::math::normal(), cum)));
  }

  // Grid search never beats the returned maximum.
  const auto data = oracle::latent_probit_data(50, 0.8, {-0.3, 0.6}, 5);
  const auto fit = fit_cumulative(oracle::to_matrix(data.X), data.y, 3, Link::probit);
  auto ll = [&](double b, double z1, double z2) {
    return z2 > z1 ? oracle::cumulative_loglik({b, z1, z2}, data.X, data.y, 3) : -1e300;
  };
  double best = -1e300, cb = 0, c1 = 0, c2 = 0;
  for (double b = -3; b <= 3; b += 0.1)
    for (double z1 = -3; z1 <= 3; z1 += 0.1)
      for (double z2 = z1 + 0.1; z2 <= 3; z2 += 0.1)
        if (const double v = ll(b, z1, z2); v > best) best = v, cb = b, c1 = z1, c2 = z2;
  for (double b = cb - 0.15; b <= cb + 0.15; b += 0.01)
    for (double z1 = c1 - 0.15; z1 <= c1 + 0.15; z1 += 0.01)
      for (double z2 = c2 - 0.15; z2 <= c2 + 0.15; z2 += 0.01) best = std::max(best, ll(b, z1, z2));
  const double excess = best - fit.loglik;

  const bool pass = worst_grad < 1e-6 && worst_zeta < 1e-8 && excess <= 1e-6;
  return {pass, "gradient rel err " + sci(worst_grad) + ", threshold err " + sci(worst_zeta) +
                    ", grid excess " + sci(excess)};
}

Outcome delta_zero_near_mar() {
  const auto c = ScenarioConfig::defaults(Design::nonhier_extreme);
  const int R = 100;
  std::vector<std::vector<CategoryProfile>> runs(R);
  parallel_for(R, 0, [&](std::size_t rep) {
    const auto masked = generate_masked(c, rep).second;
    const auto mar = impute_mar_flat(masked, c.M, c.link, derive_seed(c.seed, {rep, tag("impute")}));
    runs[rep] = delta_grid_scan(masked, mar, {{"delta0", DeltaSpec::uniform(std::vector<double>(c.K - 1, 0.0))}}, c.link,
                                derive_seed(c.seed, {rep, tag("adjust")}));
  });
  const auto avg = average_profiles(runs);
  const double tv = total_variation(avg[0].proportions, avg[1].proportions);
  std::string detail = "TV " + fmt(tv, 4) + " over " + std::to_string(R) + " replications; MAR";
  for (double p : avg[0].proportions) detail += " " + fmt(p, 3);
  detail += " vs delta=0";
  for (double p : avg[1].proportions) detail += " " + fmt(p, 3);
  return {tv < 0.02, detail};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  std::vector<std::string> broken;
  // Library stages, repeated and under different thread counts.
  const auto d = oracle::synthetic_dataset({.n = 400, .clusters = 8, .cluster_sd = 0.5});
  const auto a = impute_mar_flat(d, 5, Link::probit, 42, 1);
  if (a.copies != impute_mar_flat(d, 5, Link::probit, 42, 4).copies) broken.push_back("impute-flat");
  GibbsConfig g{.burn_in = 50, .between = 5};
  if (impute_mar_hier(d, 3, g, 42).copies != impute_mar_hier(d, 3, g, 42).copies) broken.push_back("impute-hier");
  const auto spec = DeltaSpec::uniform({0.0, 0.0, -1.0});
  if (adjust(a, d, spec, Link::probit, 7, 1).copies != adjust(a, d, spec, Link::probit, 7, 3).copies)
    broken.push_back("adjust");
  auto small = ScenarioConfig::defaults(Design::nonhier_extreme);
  small.R = 6;
  small.M = 3;
  small.n = 500;
  MonteCarloOptions one, many;
  one.threads = 1;
  many.threads = 4;
  if (run_monte_carlo(small, one).to_json() != run_monte_carlo(small, many).to_json()) broken.push_back("simulate");

  // Every CLI subcommand run twice into separate directories.
  const fs::path root = fs::temp_directory_path() / ("deltami_accept_" + std::to_string(::getpid()));
  fs::remove_all(root);
  const std::string cli = DELTAMI_CLI_PATH;
  const std::string cfg = DELTAMI_CONFIG_DIR;
  auto sh = [&](const std::string& args) {
    return std::system((cli + " " + args + " > /dev/null 2>&1").c_str()) == 0;
  };
  fs::create_directories(root);
  std::ofstream(root / "delta.json") << R"({"default":[0,0,0,-2]})";
  bool ran = sh("simulate --design nonhier-extreme --generate-only --n 800 --seed 3 --out " + (root / "gen").string());
  const std::string data = " --data " + (root / "gen/dataset.csv").string() + " --schema " + (root / "gen/schema.json").string();
  for (const std::string run : {"a", "b"}) {
    const std::string o = " --out " + (root / run).string();
    const std::string imps = (root / run / "impute/imputations.csv").string();
    ran = ran && sh("fit" + data + o + "/fit") && sh("impute --M 4 --seed 5" + data + o + "/impute") &&
          sh("adjust --seed 6 --delta " + (root / "delta.json").string() + " --imputations " + imps + data + o + "/adjust") &&
          sh("analyze --imputations " + (root / run / "adjust/adjusted.csv").string() + data + o + "/analyze") &&
          sh("pool --fits " + (root / run / "analyze/fits.json").string() + o + "/pool") &&
          sh("diagnose --stratum X2 --scenarios " + cfg + "/deltas/nonhier-extreme-grid.json --imputations " + imps + data +
             o + "/diagnose") &&
          sh("simulate --design nonhier-intermediate --R 3 --M 2 --n 400 --seed 5" + o + "/simulate") &&
          sh("replicate-table --design nonhier-continuous --R 3 --M 2 --n 300 --seed 5" + o + "/table");
  }
  if (!ran) broken.push_back("cli run failed");
  std::size_t compared = 0;
  if (ran)
    for (const auto& e : fs::recursive_directory_iterator(root / "a")) {
      if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
      const auto other = root / "b" / fs::relative(e.path(), root / "a");
      ++compared;
      if (slurp(e.path()) != slurp(other)) broken.push_back(fs::relative(e.path(), root / "a").string());
    }
  fs::remove_all(root);
  std::string detail = std::to_string(compared) + " CLI outputs and 4 library stages compared";
  for (const auto& b : broken) detail += "; differs: " + b;
  return {broken.empty() && compared > 0, detail};
}

Outcome icc() {
  const double pi2 = std::numbers::pi * std::numbers::pi;
  const double oracle_icc = 0.45 * 0.45 / (0.45 * 0.45 + pi2 / 3.0);
  const double value = compute_icc(0.45);
  const auto t = generate_trauma(TraumaConfig{});
  const auto fit = fit_logistic_random_intercept(t.full, trauma_reference());
  const double trauma = compute_icc(*fit.ri_sd);
  const bool pass = std::abs(value - 0.0580) < 1e-4 && std::abs(value - oracle_icc) < 1e-15 && trauma >= 0.0219 &&
                    trauma <= 0.0286;
  return {pass, "ICC(0.45) " + fmt(value, 5) + ", trauma look-alike SD " + fmt(*fit.ri_sd, 4) + " ICC " + fmt(trauma, 4)};
}

Outcome invariants() {
  const int cases = 10000;
  std::mt19937_64 gen(2024);
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> u(-3.0, 3.0);
  std::vector<std::string> broken;

  // Simplex sums: model probabilities and imputed-category profiles.
  for (int t = 0; t < cases; ++t) {
    const int K = 3 + static_cast<int>(gen() % 5);
    Eigen::VectorXd zeta(K - 1);
    double c = -2 + z(gen);
    for (int k = 0; k < K - 1; ++k) zeta[k] = (c += 0.05 + std::abs(z(gen)));
    const auto p = category_probs(zeta, 2 * z(gen), t % 2 ? Link::logit : Link::probit);
    if (std::abs(p.sum() - 1.0) > 1e-12 || p.minCoeff() < 0.0) {
      broken.push_back("simplex");
      break;
    }
  }

  // T >= W for random per-copy estimates.
  for (int t = 0; t < cases; ++t) {
    const int M = 2 + static_cast<int>(gen() % 19);
    std::vector<OutcomeFit> fits;
    for (int m = 0; m < M; ++m) fits.push_back(fake_fit(z(gen), std::abs(z(gen)) + 1e-3));
    const auto c = pool_rubin(fits).coefficients[0];
    if (!(c.T >= c.W) || !(c.B >= 0.0)) {
      broken.push_back("T>=W");
      break;
    }
  }

  // Observed entries survive imputation and adjustment.
  int immutability = 0;
  for (int t = 0; immutability < cases && t < 3 * cases; ++t) {
    const auto d = oracle::synthetic_dataset({.n = 40, .K = 3, .x2_levels = 2, .missing = 0.3, .seed = static_cast<unsigned>(t)});
    try {
      const auto set = impute_mar_flat(d, 2, Link::probit, static_cast<std::uint64_t>(t), 1);
      const auto adj = adjust(set, d, DeltaSpec::uniform({u(gen), u(gen)}), Link::probit, static_cast<std::uint64_t>(t), 1);
      check_consistent(set, d);
      check_consistent(adj.as_imputations(), d);
    } catch (const FitError&) {
      continue;  // tiny samples can separate; those cases are redrawn
    } catch (const DataError&) {
      broken.push_back("immutability");
      break;
    }
    ++immutability;
  }
  if (immutability < cases && std::find(broken.begin(), broken.end(), "immutability") == broken.end())
    broken.push_back("immutability: only " + std::to_string(immutability) + " cases");

  // Constant shift of all thresholds equals the opposite latent shift.
  std::uniform_int_distribution<int> grid(-4096, 4096);
  for (int t = 0; t < cases; ++t) {
    const double c = grid(gen) / 1024.0, theta = grid(gen) / 1024.0;
    std::vector<double> zz(3), shifted(3);
    for (std::size_t k = 0; k < 3; ++k) {
      zz[k] = grid(gen) / 1024.0;
      shifted[k] = zz[k] + c;
    }
    if (classify_latent(theta, shifted) != classify_latent(theta - c, zz)) {
      broken.push_back("constant shift");
      break;
    }
  }

  // Smallest-k classification is total and picks the first threshold at or above theta.
  for (int t = 0; t < cases; ++t) {
    std::vector<double> zz(1 + static_cast<std::size_t>(t % 6));
    for (auto& v : zz) v = u(gen);  // not necessarily increasing
    const double theta = t % 50 == 0 ? (t % 100 == 0 ? HUGE_VAL : -HUGE_VAL) : u(gen);
    const int k = classify_latent(theta, zz);
    int expect = static_cast<int>(zz.size()) + 1;
    for (std::size_t j = zz.size(); j-- > 0;)
      if (theta <= zz[j]) expect = static_cast<int>(j) + 1;
    if (k < 1 || k > static_cast<int>(zz.size()) + 1 || k != expect) {
      broken.push_back("smallest-k");
      break;
    }
  }

  std::string detail = "5 properties x " + std::to_string(cases) + " cases";
  for (const auto& b : broken) detail += "; broken: " + b;
  return {broken.empty(), detail};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"C1 estimator sanity (nonhier-extreme SIMULATED, R=200)", estimator_sanity},
      {"C2 directional MNAR superiority (delta=(0,0,0,-2) vs MAR)", directional_mnar},
      {"C3 hierarchical MAR failure (hier-extreme, R=100, M=10)", hierarchical_failure},
      {"C4 MAR imputation-model bias on Y in [20%, 35%]", mar_imputation_bias},
      {"C5 Rubin pooling hand example", rubin_oracle},
      {"C6 ordinal MLE gradient, thresholds and grid oracle", ordinal_mle},
      {"C7 delta=0 profile near MAR (TV < 0.02)", delta_zero_near_mar},
      {"C8 determinism", determinism},
      {"C9 ICC formula and trauma look-alike ICC", icc},
      {"C10 invariant suite", invariants},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failed;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " | " << o.detail << " | " << fmt(secs, 1) << " s" << std::endl;
  }
  std::cout << (10 - failed) << "/10 criteria passed" << std::endl;
  return failed == 0 ? 0 : 1;
}
