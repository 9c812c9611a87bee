// pathfield command-line runner: parses a JSON experiment config, dispatches
// the requested suite, and writes CSV artifacts plus a run manifest.
//
// Exit codes: 0 all suites passed, 1 a suite or solver failed, 2 bad usage
// or configuration.

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "pathfield/pathfield.hpp"

namespace {

int dispatch(const std::string& subcommand, const std::string& config_path,
             const std::string& out_flag, std::optional<std::uint64_t> seed,
             std::optional<int> threads) {
  std::ifstream in(config_path);
  if (!in) {
    std::cerr << "config error: cannot open " << config_path << "\n";
    return 2;
  }
  std::stringstream body;
  body << in.rdbuf();

  pathfield::RunConfig rc;
  try {
    rc = pathfield::parse_config_text(body.str(), seed, threads);
    if (!subcommand.empty() && subcommand != rc.experiment) {
      // The subcommand wins over the config's experiment key.
      rc.experiment = subcommand;
      rc.echo["experiment"] = subcommand;
    }
    if (!out_flag.empty()) {
      rc.out_dir = out_flag;
    } else if (const char* env = std::getenv("PATHFIELD_OUT"); env && *env && rc.out_dir == ".") {
      rc.out_dir = env;
    }
    rc.echo["out"] = rc.out_dir;
  } catch (const pathfield::ConfigError& e) {
    std::cerr << "config error at " << e.path() << ": " << e.what() << "\n";
    return 2;
  }

  try {
    const pathfield::RunManifest manifest = pathfield::run(rc);
    for (const pathfield::SuiteResult& s : manifest.suites) {
      std::cout << (s.passed ? "PASS" : "FAIL") << "  " << s.name << "  (" << s.checks
                << " checks, " << s.failures << " failures)\n";
      for (const std::string& line : s.stats) std::cout << "      " << line << "\n";
    }
    if (!manifest.gap_log.empty()) {
      std::cerr << "solver gap log:";
      for (const double g : manifest.gap_log) std::cerr << " " << pathfield::csv_num(g);
      std::cerr << "\n";
    }
    std::cout << "artifacts in " << rc.out_dir << "\n";
    return manifest.passed ? 0 : 1;
  } catch (const pathfield::ConfigError& e) {
    std::cerr << "config error at " << e.path() << ": " << e.what() << "\n";
    return 2;
  } catch (const pathfield::PicardError& e) {
    std::cerr << "solver failure: " << e.what() << "\ngap log:";
    for (const double g : e.gaps) std::cerr << " " << pathfield::csv_num(g);
    std::cerr << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pathfield experiment runner"};
  app.require_subcommand(0, 1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  app.add_option("--config", config_path, "JSON experiment config")->required();
  app.add_option("--out", out_dir, "output directory (else config, else $PATHFIELD_OUT)");
  app.add_option("--seed", seed, "Monte Carlo seed, overrides the config");
  app.add_option("--threads", threads, "worker thread budget, overrides the config");

  std::string chosen;
  for (const std::string& name : pathfield::experiment_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " suite");
    sub->callback([&chosen, name]() { chosen = name; });
  }

  CLI11_PARSE(app, argc, argv);
  return dispatch(chosen, config_path, out_dir, seed, threads);
}
