// Command-line front end: train, e1, e2, e3, gradcheck, oracle-diff.
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "asgd/gradcheck.hpp"
#include "asgd/harness.hpp"

namespace {

struct ConfigFlags {
  std::string config_file;
  std::map<std::string, std::string> values;
  CLI::App* app = nullptr;
};

void add_config_flags(CLI::App* app, ConfigFlags& flags) {
  flags.app = app;
  app->add_option("--config", flags.config_file, "key=value config file")->check(CLI::ExistingFile);
  for (const auto& key : asgd::config_keys()) {
    if (key == "scenario") continue;
    app->add_option("--" + key, flags.values[key]);
  }
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Scenario defaults, then the config file, then ASGD_PORT, then flags.
asgd::ExperimentConfig resolve(asgd::Scenario scenario, const ConfigFlags& flags) {
  asgd::ExperimentConfig config = asgd::default_config(scenario);
  if (!flags.config_file.empty()) {
    asgd::apply_config_text(config, slurp(flags.config_file));
    config.scenario = scenario;
  }
  if (const char* port = std::getenv("ASGD_PORT")) asgd::apply_setting(config, "port", port);
  for (const auto& [key, value] : flags.values) {
    if (flags.app->count("--" + key) > 0) asgd::apply_setting(config, key, value);
  }
  config.validate();
  return config;
}

int run_gradcheck(const asgd::GradCheckOptions& options, const std::string& out_dir) {
  std::ostringstream report;
  bool ok = true;
  for (const auto kind : asgd::all_probe_kinds()) {
    const auto r = asgd::gradient_check(kind, options);
    char line[160];
    std::snprintf(line, sizeof line, "%-15s checked=%zu kinks_skipped=%d max_rel_err=%.3e %s\n",
                  asgd::probe_name(kind), r.checks.size(), r.kinks_skipped, r.max_relative_error,
                  r.passed ? "ok" : "FAILED");
    report << line;
    ok = ok && r.passed;
  }
  std::cout << report.str();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream(std::filesystem::path(out_dir) / "gradcheck.txt") << report.str();
  }
  return ok ? 0 : 1;
}

int run_oracle_diff(const asgd::ExperimentConfig& config) {
  int failures = 0;
  std::ostringstream report;
  for (const auto seed : config.seeds) {
    const asgd::OracleDiff d = asgd::oracle_diff(config, seed);
    report << "seed=" << seed << " csv_identical=" << d.csv_identical
           << " params_identical=" << d.params_identical
           << " trajectory_identical=" << d.trajectory_identical
           << " first_divergent_step=" << d.first_divergent_step << "\n";
    if (!(d.csv_identical && d.params_identical && d.trajectory_identical)) ++failures;
    if (!config.out.empty()) {
      const auto dir = std::filesystem::path(config.out) / ("seed_" + std::to_string(seed));
      std::filesystem::create_directories(dir);
      std::ofstream(dir / "cluster.csv", std::ios::binary) << d.cluster_csv;
      std::ofstream(dir / "oracle.csv", std::ios::binary) << d.oracle_csv;
    }
  }
  std::cout << report.str();
  if (!config.out.empty()) {
    std::ofstream(std::filesystem::path(config.out) / "oracle_diff.txt") << report.str();
    std::ofstream(std::filesystem::path(config.out) / "config.txt") << asgd::config_echo(config);
  }
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Asynchronous SGD with a parameter server, at desk scale"};
  app.require_subcommand(1);

  const std::pair<const char*, asgd::Scenario> scenarios[] = {
      {"train", asgd::Scenario::Single},
      {"e1", asgd::Scenario::E1},
      {"e2", asgd::Scenario::E2},
      {"e3", asgd::Scenario::E3},
  };
  std::map<std::string, ConfigFlags> flags;
  std::map<std::string, asgd::Scenario> verb_scenario;
  for (const auto& [verb, scenario] : scenarios) {
    CLI::App* sub = app.add_subcommand(verb, std::string("run scenario ") + asgd::scenario_name(scenario));
    add_config_flags(sub, flags[verb]);
    verb_scenario[verb] = scenario;
  }
  CLI::App* oracle = app.add_subcommand("oracle-diff", "compare a 1-worker cluster with plain SGD");
  add_config_flags(oracle, flags["oracle-diff"]);

  asgd::GradCheckOptions grad;
  std::string grad_out;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of every layer kind");
  gradcheck->add_option("--samples", grad.samples);
  gradcheck->add_option("--step", grad.step);
  gradcheck->add_option("--tolerance", grad.tolerance);
  gradcheck->add_option("--seed", grad.seed);
  gradcheck->add_option("--out", grad_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (gradcheck->parsed()) return run_gradcheck(grad, grad_out);
    if (oracle->parsed()) {
      asgd::ExperimentConfig config = resolve(asgd::Scenario::Single, flags["oracle-diff"]);
      return run_oracle_diff(config);
    }
    for (const auto& [verb, scenario] : verb_scenario) {
      if (!app.got_subcommand(verb)) continue;
      const asgd::ExperimentConfig config = resolve(scenario, flags[verb]);
      const asgd::ScenarioResult result = asgd::run_scenario(config);
      std::cout << result.summary;
      for (const auto& cell : result.cells) {
        if (cell.partial) return 2;
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
