// Command-line front end: dynmatch <estimate|simulate|diagnose|costbenefit|validate> [options]

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynmatch/panel.hpp"
#include "dynmatch/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::string input;
  std::string covariates;
  int window = 0;
  int neighbors = 0;
  double trim = 0;
  std::string estimands;
  int tau_min = 0;
  int tau_max = 0;
  std::uint64_t seed = 0;
  int bootstrap = 0;
  std::string out;
  std::string subgroup;
  bool refit_subgroup = false;
  std::string scenario;
  std::size_t n_workers = 0;
  int reps = 0;
};

// Options shared by the subcommands; only flags actually given override the
// config file.
struct Registered {
  CLI::Option* config = nullptr;
  CLI::Option* input = nullptr;
  CLI::Option* covariates = nullptr;
  CLI::Option* window = nullptr;
  CLI::Option* neighbors = nullptr;
  CLI::Option* trim = nullptr;
  CLI::Option* estimands = nullptr;
  CLI::Option* tau_min = nullptr;
  CLI::Option* tau_max = nullptr;
  CLI::Option* seed = nullptr;
  CLI::Option* bootstrap = nullptr;
  CLI::Option* out = nullptr;
  CLI::Option* subgroup = nullptr;
  CLI::Option* refit_subgroup = nullptr;
  CLI::Option* scenario = nullptr;
  CLI::Option* n_workers = nullptr;
  CLI::Option* reps = nullptr;
};

bool given(const CLI::Option* o) { return o && o->count() > 0; }

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic propensity-score matching estimators, simulation and diagnostics"};
  app.set_version_flag("--version", dynmatch::kVersion);
  app.require_subcommand(1);

  Flags f;
  std::map<std::string, Registered> reg;
  auto add_common = [&](CLI::App* sub, bool panel, bool estimate) {
    auto& r = reg[sub->get_name()];
    r.config = sub->add_option("--config", f.config, "INI configuration file")->check(CLI::ExistingFile);
    r.out = sub->add_option("--out", f.out, "Output directory");
    r.seed = sub->add_option("--seed", f.seed, "Root random seed");
    if (panel) {
      r.input = sub->add_option("--input", f.input, "Wide panel CSV");
      r.covariates = sub->add_option("--covariates", f.covariates, "Covariate spec, e.g. y_m2:lag,y_m1:lag,y_m0:lag");
      r.window = sub->add_option("--window", f.window, "Enrollment window length S");
      r.trim = sub->add_option("--trim", f.trim, "Trimming threshold for both scores");
      r.neighbors = sub->add_option("--neighbors", f.neighbors, "Nearest neighbours K");
      r.tau_min = sub->add_option("--tau-min", f.tau_min, "First event time");
      r.tau_max = sub->add_option("--tau-max", f.tau_max, "Last event time");
      r.subgroup = sub->add_option("--subgroup", f.subgroup, "Restrict to workers matching e.g. 'female==1 && age<40'");
      r.refit_subgroup = sub->add_flag("--refit-subgroup", f.refit_subgroup, "Refit scores inside the subgroup");
    }
    if (estimate) {
      r.estimands = sub->add_option("--estimands", f.estimands, "lb,ub,lechner,ipw,nvl,did,completer");
      r.bootstrap = sub->add_option("--bootstrap", f.bootstrap, "Bootstrap replicates for lechner and ipw");
    }
  };

  auto* estimate = app.add_subcommand("estimate", "Estimate treatment effects on a panel");
  add_common(estimate, true, true);
  auto* diagnose = app.add_subcommand("diagnose", "Balance, overlap and later-enrollee diagnostics");
  add_common(diagnose, true, false);
  auto* simulate = app.add_subcommand("simulate", "Simulate a panel with known effects");
  add_common(simulate, false, false);
  reg["simulate"].window = simulate->add_option("--window", f.window, "Enrollment window length S");
  reg["simulate"].n_workers = simulate->add_option("--workers", f.n_workers, "Number of workers");
  auto* costbenefit = app.add_subcommand("costbenefit", "Net present value, benefit-cost ratios and IRR");
  add_common(costbenefit, false, false);
  reg["costbenefit"].scenario = costbenefit->add_option("--scenario", f.scenario, "Scenario INI file");
  auto* validate = app.add_subcommand("validate", "Run the oracle suite and print a pass/fail table");
  add_common(validate, false, false);
  reg["validate"].reps = validate->add_option("--reps", f.reps, "Replications for the coverage check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  const auto& r = reg[sub->get_name()];
  dynmatch::RunConfig config;
  try {
    config.command = *dynmatch::parse_command(sub->get_name());
    if (given(r.config)) dynmatch::apply_config_file(config, f.config);
    if (given(r.input)) config.input = f.input;
    if (given(r.covariates)) config.covariates = f.covariates;
    if (given(r.window)) config.window = f.window;
    if (given(r.neighbors)) config.neighbors = f.neighbors;
    if (given(r.trim)) config.trim = f.trim;
    if (given(r.estimands)) config.estimands = split_list(f.estimands);
    if (given(r.tau_min)) config.tau_min = f.tau_min;
    if (given(r.tau_max)) config.tau_max = f.tau_max;
    if (given(r.seed)) config.seed = f.seed;
    if (given(r.bootstrap)) config.bootstrap = f.bootstrap;
    if (given(r.out)) config.out = f.out;
    if (given(r.subgroup)) config.subgroup = f.subgroup;
    if (given(r.refit_subgroup)) config.refit_subgroup = f.refit_subgroup;
    if (given(r.scenario)) config.scenario = f.scenario;
    if (given(r.n_workers)) config.sim.n_workers = f.n_workers;
    if (given(r.reps)) config.validate_reps = f.reps;
    return dynmatch::run(config, std::cout);
  } catch (const dynmatch::InputError& e) {
    std::cerr << "dynmatch: " << e.what() << "\n";
    return 2;
  } catch (const dynmatch::ValidationError& e) {
    std::cerr << "dynmatch: panel: " << e.what() << "\n" << e.to_json() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "dynmatch: " << e.what() << "\n";
    return 1;
  }
}
