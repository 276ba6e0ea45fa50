#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include "deltami/deltami.hpp"

using namespace deltami;
using nlohmann::json;

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(what + " is not valid JSON: " + e.what());
  }
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> r(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) r[static_cast<std::size_t>(j)] = m(i, j);
    rows.push_back(r);
  }
  return rows;
}

std::vector<double> vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

/// Per-run state: resolved configuration, outputs written, manifest.
struct Run {
  std::string subcommand;
  json config = json::object();
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = ".";
  std::vector<std::string> outputs;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  // Input files enter the configuration by content, not by path.
  std::string read(const std::string& key, const std::string& path) {
    std::string text = csv::read_file(path);
    config["inputs"][key] = hex64(tag(text));
    return text;
  }

  std::ofstream open(const std::string& name) {
    std::filesystem::create_directories(out_dir);
    const auto path = out_dir / name;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    outputs.push_back(name);
    return out;
  }

  void write_json(const std::string& name, const json& j) { open(name) << j.dump(2) << '\n'; }

  void write_manifest() {
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    json m;
    m["subcommand"] = subcommand;
    m["config"] = config;
    m["config_hash"] = hex64(tag(config.dump()));
    m["seed"] = seed;
    m["versions"] = {{"deltami", DELTAMI_VERSION},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"boost", BOOST_LIB_VERSION},
                     {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
                     {"cli11", CLI11_VERSION}};
    m["wall_time_seconds"] = wall;
    m["outputs"] = outputs;
    std::ofstream out(out_dir / "manifest.json", std::ios::binary);
    if (!out) throw DataError("cannot write manifest");
    out << m.dump(2) << '\n';
  }
};

struct DataArgs {
  std::string data;
  std::string schema;
};

void add_data_options(CLI::App* app, DataArgs& a) {
  app->add_option("--data", a.data, "Input CSV")->required();
  app->add_option("--schema", a.schema, "Column roles (JSON)")->required();
}

Dataset load(Run& run, const DataArgs& a) {
  const auto schema = Schema::from_json(parse_json(run.read("schema", a.schema), "schema"));
  return parse_csv(run.read("data", a.data), schema);
}

ImputationSet load_imputations(Run& run, const std::string& path, const Dataset& d) {
  return parse_imputations_long_csv(run.read("imputations", path), d);
}

ReferenceCategories parse_references(const Dataset& d, const std::vector<std::string>& items) {
  ReferenceCategories ref;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw DataError("reference '" + item + "' must look like NAME=CODE");
    const std::string name = item.substr(0, eq);
    int code = 0;
    try {
      code = std::stoi(item.substr(eq + 1));
    } catch (const std::exception&) {
      throw DataError("reference '" + item + "': code is not an integer");
    }
    if (name != d.x1_name()) d.covariate_index(name);
    ref[name] = code;
  }
  return ref;
}

std::vector<NamedDelta> parse_scenarios(const json& j) {
  const json& list = j.is_object() && j.contains("scenarios") ? j.at("scenarios") : j;
  if (!list.is_array()) throw DataError("scenario file needs an array of {name, delta}");
  std::vector<NamedDelta> out;
  for (const auto& s : list) {
    if (!s.is_object() || !s.contains("name") || !s.contains("delta"))
      throw DataError("each scenario needs 'name' and 'delta'");
    out.push_back({s.at("name").get<std::string>(), DeltaSpec::from_json(s.at("delta"))});
  }
  return out;
}

json fits_json(const std::vector<OutcomeFit>& fits) {
  json j;
  j["model"] = to_string(fits.front().model);
  j["fits"] = json::array();
  for (const auto& f : fits) {
    json r{{"names", f.names}, {"estimate", vec(f.coefficients)}, {"se", vec(f.se)}};
    if (f.ri_sd) r["ri_sd"] = *f.ri_sd;
    j["fits"].push_back(std::move(r));
  }
  return j;
}

std::vector<OutcomeFit> fits_from_json(const json& j) {
  std::vector<OutcomeFit> fits;
  try {
    const auto model = parse_outcome_model(j.at("model").get<std::string>());
    for (const auto& r : j.at("fits")) {
      OutcomeFit f;
      f.model = model;
      f.names = r.at("names").get<std::vector<std::string>>();
      const auto est = r.at("estimate").get<std::vector<double>>();
      const auto se = r.at("se").get<std::vector<double>>();
      if (est.size() != f.names.size() || se.size() != f.names.size())
        throw DataError("fit entry has mismatched names, estimate and se lengths");
      f.coefficients = Eigen::Map<const Eigen::VectorXd>(est.data(), static_cast<Eigen::Index>(est.size()));
      f.se = Eigen::Map<const Eigen::VectorXd>(se.data(), static_cast<Eigen::Index>(se.size()));
      fits.push_back(std::move(f));
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed fits file: ") + e.what());
  }
  return fits;
}

void write_pooled(Run& run, const PooledEstimate& pooled) {
  run.write_json("pooled.json", to_json(pooled));
  auto out = run.open("pooled.csv");
  write_pooled_csv(out, pooled);
}

void write_dataset(Run& run, const std::string& stem, const Dataset& d) {
  auto out = run.open(stem + ".csv");
  write_csv(out, d);
}

struct SimArgs {
  std::string design;
  std::string config;
  std::optional<int> R, M;
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
};

void add_sim_options(CLI::App* app, SimArgs& a) {
  app->add_option("--design", a.design, "nonhier-extreme, hier-extreme, nonhier-intermediate, nonhier-continuous");
  app->add_option("--config", a.config, "Scenario config (JSON); --design and the flags below override it");
  app->add_option("--R", a.R, "Replications");
  app->add_option("--M", a.M, "Imputations per replication");
  app->add_option("--n", a.n, "Rows per dataset");
  app->add_option("--seed", a.seed, "Master seed");
}

json sim_json(Run& run, const SimArgs& a) {
  json j = a.config.empty() ? json::object() : parse_json(run.read("config", a.config), "scenario config");
  if (!j.is_object()) throw DataError("scenario config must be a JSON object");
  if (!a.design.empty()) j["design"] = a.design;
  if (!j.contains("design")) throw DataError("give --design or a config with a 'design' field");
  if (a.R) j["R"] = *a.R;
  if (a.M) j["M"] = *a.M;
  if (a.n) j["n"] = *a.n;
  if (a.seed) j["seed"] = *a.seed;
  return j;
}

int fail(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", {{"kind", kind}, {"message", message}, {"exit_code", code}}}}.dump() << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Delta-adjusted multiple imputation for an ordinal covariate missing not at random", "deltami"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", DELTAMI_VERSION);
  Run run;
  std::string out_dir = ".";
  unsigned threads = 0;
  app.add_option("--out", out_dir, "Output directory")->capture_default_str();
  app.add_option("--threads", threads, "Worker threads (0: DELTAMI_THREADS or all cores)");

  DataArgs data;
  std::string link_name = "probit";
  std::string imputations_path;
  std::uint64_t seed = 1;

  auto* fit = app.add_subcommand("fit", "Fit the ordinal X1 model on the observed rows");
  add_data_options(fit, data);
  fit->add_option("--link", link_name, "probit or logit")->capture_default_str();

  auto* impute = app.add_subcommand("impute", "MAR imputation of the missing X1 values");
  int M = 10;
  bool hierarchical = false, per_copy = false;
  GibbsConfig gibbs;
  add_data_options(impute, data);
  impute->add_option("--M", M, "Number of imputations")->capture_default_str();
  impute->add_option("--link", link_name, "probit or logit (flat imputer)")->capture_default_str();
  impute->add_flag("--hierarchical", hierarchical, "Latent probit Gibbs sampler with cluster intercepts");
  impute->add_option("--burn-in", gibbs.burn_in, "Gibbs burn-in sweeps")->capture_default_str();
  impute->add_option("--between", gibbs.between, "Gibbs sweeps between kept copies")->capture_default_str();
  impute->add_option("--seed", seed, "Master seed")->capture_default_str();
  impute->add_flag("--per-copy", per_copy, "Also write one completed CSV per imputation");

  auto* adjust_cmd = app.add_subcommand("adjust", "Shift thresholds of MAR imputations under a delta spec");
  std::string delta_path;
  add_data_options(adjust_cmd, data);
  adjust_cmd->add_option("--imputations", imputations_path, "Long-format imputations")->required();
  adjust_cmd->add_option("--delta", delta_path, "Delta spec (JSON)")->required();
  adjust_cmd->add_option("--link", link_name, "probit or logit")->capture_default_str();
  adjust_cmd->add_option("--seed", seed, "Master seed")->capture_default_str();

  auto* analyze = app.add_subcommand("analyze", "Fit the outcome model to each copy and pool");
  std::string model_name;
  std::vector<std::string> references;
  add_data_options(analyze, data);
  analyze->add_option("--imputations", imputations_path, "Long-format imputations")->required();
  analyze->add_option("--model", model_name, "glm-logit, glmm-logit-ri or linear (default from the outcome)");
  analyze->add_option("--reference", references, "Reference category NAME=CODE (repeatable)");

  auto* pool = app.add_subcommand("pool", "Pool per-copy estimates with Rubin's rules");
  std::string fits_path;
  pool->add_option("--fits", fits_path, "Per-copy estimates (JSON, as written by analyze)")->required();

  auto* diagnose = app.add_subcommand("diagnose", "Imputed-category profiles across delta scenarios");
  std::string scenarios_path, rules_path, stratum;
  add_data_options(diagnose, data);
  diagnose->add_option("--imputations", imputations_path, "Long-format MAR imputations")->required();
  diagnose->add_option("--scenarios", scenarios_path, "Delta scenarios (JSON array of {name, delta})")->required();
  diagnose->add_option("--stratum", stratum, "Nominal covariate to stratify by");
  diagnose->add_option("--rules", rules_path, "Plausibility rules (JSON)");
  diagnose->add_option("--link", link_name, "probit or logit")->capture_default_str();
  diagnose->add_option("--seed", seed, "Master seed")->capture_default_str();

  auto* simulate = app.add_subcommand("simulate", "Monte Carlo study, or generate synthetic data");
  SimArgs sim;
  bool generate_only = false;
  std::size_t rep = 0;
  add_sim_options(simulate, sim);
  simulate->add_flag("--generate-only", generate_only, "Write one generated dataset instead of running replications");
  simulate->add_option("--rep", rep, "Replication index for --generate-only")->capture_default_str();

  auto* table = app.add_subcommand("replicate-table", "Monte Carlo study written as a comparison table");
  SimArgs table_args;
  add_sim_options(table, table_args);

  if (argc <= 1) {
    std::cerr << app.help();
    return 1;
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what(), 1);
  }

  try {
    run.out_dir = out_dir;
    run.subcommand = app.get_subcommands().front()->get_name();
    const unsigned workers = resolve_threads(threads);

    if (fit->parsed()) {
      const Link link = parse_link(link_name);
      run.config["link"] = to_string(link);
      const auto d = load(run, data);
      const auto f = fit_cumulative(d, link);
      json j{{"link", to_string(link)},
             {"names", ordinal_design_names(d)},
             {"beta", vec(f.beta)},
             {"zeta", vec(f.zeta)},
             {"vcov", matrix_json(f.vcov)},
             {"loglik", f.loglik},
             {"converged", f.converged},
             {"iterations", f.iterations},
             {"n_observed", d.n() - d.missing_count()}};
      run.write_json("fit.json", j);
    } else if (impute->parsed()) {
      run.seed = seed;
      const Link link = parse_link(link_name);
      run.config = {{"M", M}, {"hierarchical", hierarchical}, {"seed", seed}};
      if (hierarchical) run.config["gibbs"] = {{"burn_in", gibbs.burn_in}, {"between", gibbs.between}};
      else run.config["link"] = to_string(link);
      const auto d = load(run, data);
      const auto set = hierarchical ? impute_mar_hier(d, M, gibbs, seed) : impute_mar_flat(d, M, link, seed, workers);
      {
        auto out = run.open("imputations.csv");
        write_imputations_long_csv(out, set, d);
      }
      if (per_copy)
        for (std::size_t m = 0; m < set.copies.size(); ++m)
          write_dataset(run, "imputation_" + std::to_string(m + 1), d.with_x1(set.copies[m]));
    } else if (adjust_cmd->parsed()) {
      run.seed = seed;
      const Link link = parse_link(link_name);
      run.config = {{"link", to_string(link)}, {"seed", seed}};
      const auto d = load(run, data);
      const auto set = load_imputations(run, imputations_path, d);
      const auto spec = DeltaSpec::from_json(parse_json(run.read("delta", delta_path), "delta spec"));
      const auto adjusted = adjust(set, d, spec, link, seed, workers);
      {
        auto out = run.open("adjusted.csv");
        write_imputations_long_csv(out, adjusted.as_imputations(), d);
      }
      run.write_json("adjust_audit.json", adjusted.audit_json());
    } else if (analyze->parsed()) {
      const auto d = load(run, data);
      const auto set = load_imputations(run, imputations_path, d);
      OutcomeModel model = d.outcome_kind() == OutcomeKind::binary ? OutcomeModel::logistic : OutcomeModel::linear;
      if (!model_name.empty()) model = parse_outcome_model(model_name);
      const auto ref = parse_references(d, references);
      run.config["model"] = to_string(model);
      run.config["reference"] = ref;
      const auto fits = fit_copies(d, set.copies, model, ref, workers);
      run.write_json("fits.json", fits_json(fits));
      write_pooled(run, pool_rubin(fits));
    } else if (pool->parsed()) {
      const auto fits = fits_from_json(parse_json(run.read("fits", fits_path), "fits file"));
      write_pooled(run, pool_rubin(fits));
    } else if (diagnose->parsed()) {
      run.seed = seed;
      const Link link = parse_link(link_name);
      run.config = {{"link", to_string(link)}, {"seed", seed}, {"stratum", stratum}};
      const auto d = load(run, data);
      const auto set = load_imputations(run, imputations_path, d);
      const auto scenarios = parse_scenarios(parse_json(run.read("scenarios", scenarios_path), "scenario file"));
      PlausibilityRules rules;
      if (!rules_path.empty()) rules = PlausibilityRules::from_json(parse_json(run.read("rules", rules_path), "rules file"));
      std::optional<int> by;
      if (!stratum.empty()) by = d.covariate_index(stratum);
      const auto profiles = delta_grid_scan(d, set, scenarios, link, seed, by, workers);
      {
        auto out = run.open("profiles.csv");
        write_profiles_table(out, profiles, d.x1_name(), 4);
      }
      {
        auto out = run.open("profiles_long.csv");
        write_profiles_long_csv(out, profiles);
      }
      run.write_json("flags.json", to_json(plausibility_flags(profiles, rules)));
    } else if (simulate->parsed() || table->parsed()) {
      const auto& args = simulate->parsed() ? sim : table_args;
      json j = sim_json(run, args);
      if (j.at("design") == "trauma-lookalike") {
        if (!simulate->parsed() || !generate_only) throw DataError("trauma-lookalike only supports simulate --generate-only");
        j.erase("design");
        j.erase("R");
        j.erase("M");
        const auto c = TraumaConfig::from_json(j);
        run.config = c.to_json();
        run.seed = c.seed;
        const auto t = generate_trauma(c);
        write_dataset(run, "dataset", t.observed);
        write_dataset(run, "dataset_full", t.full);
        run.write_json("schema.json", t.observed.schema().to_json());
      } else {
        const auto c = ScenarioConfig::from_json(j);
        run.config = c.to_json();
        run.seed = c.seed;
        if (simulate->parsed() && generate_only) {
          const auto [full, observed] = generate_masked(c, rep);
          run.config["rep"] = rep;
          write_dataset(run, "dataset", observed);
          write_dataset(run, "dataset_full", full);
          run.write_json("schema.json", observed.schema().to_json());
        } else {
          MonteCarloOptions opt;
          opt.threads = workers;
          const auto report = run_monte_carlo(c, opt);
          if (simulate->parsed()) {
            {
              auto out = run.open("report.csv");
              report.write_csv(out);
            }
            run.write_json("report.json", report.to_json());
            auto out = run.open("imputation_model.csv");
            report.write_imputation_model_csv(out);
          } else {
            auto out = run.open("table.csv");
            report.write_table(out);
          }
          auto prof = run.open("profiles_long.csv");
          write_profiles_long_csv(prof, report.profiles);
        }
      }
    }
    run.write_manifest();
  } catch (const FitError& e) {
    return fail("FitError", e.what(), 2);
  } catch (const DataError& e) {
    return fail("DataError", e.what(), 1);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("IOError", e.what(), 1);
  }
  return 0;
}
