#include "hetsense/experiments.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>

namespace {

using hetsense::ExperimentKind;

// Overrides collected from the command line, keyed by config key.
struct Overrides {
  std::string config_path;
  std::map<std::string, std::string> values;
  bool full = false;
};

void add_common_options(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "Key-value (or JSON) configuration file")->check(CLI::ExistingFile);
  auto opt = [&](const char* flag, const char* key, const char* help) {
    app->add_option_function<std::string>(
        flag, [&o, key](const std::string& v) { o.values[key] = v; }, help);
  };
  opt("--experiment", "experiment",
      "single-run | sweep-heterogeneity | sweep-stepsize | compare-pooled | compare-parameterization");
  opt("--d", "model.d", "Ambient dimension d");
  opt("--r1", "model.r1", "Rank of the invariant signal");
  opt("--r2", "model.r2", "Rank of the spurious signal");
  opt("--m", "optimizer.m", "Measurements per step (pooled: dataset size unless optimizer.pooled_samples is set)");
  opt("--eta", "optimizer.eta", "Step size");
  opt("--alpha", "optimizer.alpha", "Initialization scale");
  opt("--steps", "optimizer.steps", "Number of steps T (0: ceil(10 log(1/alpha) / eta))");
  opt("--het", "dist.het", "Heterogeneity M of the uniform-diagonal law");
  opt("--seed", "seeds", "Master seed, or a comma-separated seed list");
  opt("--mode", "mode", "hetero | pooled | quadratic");
  opt("--measurement", "optimizer.measurement", "gaussian | rank-one");
  opt("--parameterization", "optimizer.parameterization", "overparam | exact");
  opt("--grid", "grid", "Comma-separated sweep grid");
  opt("--threads", "threads", "Worker threads for sweep cells (0: hardware concurrency)");
  opt("--out", "output_dir", "Output directory");
  app->add_flag("--full", o.full, "Full scale (d=100, m=8000, 5 seeds) instead of desk scale");
}

bool compatible(const std::string& subcommand, ExperimentKind kind) {
  if (subcommand == "run") return kind == ExperimentKind::kSingleRun;
  if (subcommand == "sweep") {
    return kind == ExperimentKind::kSweepHeterogeneity || kind == ExperimentKind::kSweepStepsize ||
           kind == ExperimentKind::kComparePooled || kind == ExperimentKind::kCompareParameterization;
  }
  if (subcommand == "verify") return kind == ExperimentKind::kVerifyRip;
  return kind == ExperimentKind::kVerifyController;
}

int execute(const std::string& subcommand, ExperimentKind fallback, const Overrides& o) {
  hetsense::KeyValueConfig kv;
  if (!o.config_path.empty()) kv = hetsense::KeyValueConfig::load(o.config_path);
  for (const auto& [k, v] : o.values) kv.set(k, v);
  if (o.full) kv.set("full", "true");
  const auto config = hetsense::build_experiment_config(kv, fallback);
  if (!compatible(subcommand, config.experiment)) {
    throw hetsense::ConfigError("experiment '" + hetsense::to_string(config.experiment) +
                                "' cannot be run with the '" + subcommand + "' subcommand");
  }
  config.validate();
  const auto result = hetsense::run_experiment(config);
  std::cout << result.report;
  for (const auto& f : result.files) std::cout << "wrote " << f << "\n";
  return result.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous-environment matrix sensing simulator"};
  app.require_subcommand(1);
  app.set_version_flag("--version", hetsense::kVersion);

  Overrides run_o, sweep_o, verify_o, controller_o;
  auto* run = app.add_subcommand("run", "Single run; writes trajectory.csv and manifest.txt");
  auto* sweep = app.add_subcommand("sweep", "Sweep or comparison over seeds; writes summary.csv and per-cell trajectories");
  auto* verify = app.add_subcommand("verify", "Empirical RIP constant and error-operator bound table");
  auto* controller =
      app.add_subcommand("controller", "Supermartingale check and controller absorption simulation");
  add_common_options(run, run_o);
  add_common_options(sweep, sweep_o);
  add_common_options(verify, verify_o);
  add_common_options(controller, controller_o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) return execute("run", ExperimentKind::kSingleRun, run_o);
    if (sweep->parsed()) return execute("sweep", ExperimentKind::kSweepHeterogeneity, sweep_o);
    if (verify->parsed()) return execute("verify", ExperimentKind::kVerifyRip, verify_o);
    return execute("controller", ExperimentKind::kVerifyController, controller_o);
  } catch (const hetsense::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const hetsense::DimensionError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const hetsense::DomainError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
