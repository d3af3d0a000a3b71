#pragma once

#include "hetsense/config.hpp"
#include "hetsense/optimizer.hpp"
#include "hetsense/sensing.hpp"
#include "hetsense/trajectory.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace hetsense {

extern const char* const kVersion;

enum class ExperimentKind {
  kSingleRun,
  kSweepHeterogeneity,
  kSweepStepsize,
  kComparePooled,
  kCompareParameterization,
  kVerifyRip,
  kVerifyController,
};

/// Algorithm used by single runs and sweeps.
enum class RunMode { kHetero, kPooled, kQuadratic };

struct ModelSpec {
  Index d = 50;
  Index r1 = 1;
  Index r2 = 1;
  // Split U* and V* from one orthonormal frame so that U*^T V* = 0.
  bool orthogonal = false;
};

struct DistSpec {
  std::string kind = "uniform-diagonal";  // or "two-point"
  double het = 10.0;                      // M for uniform-diagonal
  double magnitude = 2000.0;              // a for two-point
};

struct VerifySpec {
  Index rank = 2;
  Index trials = 200;
  double margin = 0.05;
  Index delta_trials = 200;
};

struct ControllerSpec {
  double p = 0.1;
  Index steps = 200;
  Index replicates = 10000;
  double delta = 0.0;
  Index samples = 100000;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::kSingleRun;
  RunMode mode = RunMode::kHetero;
  ModelSpec model;
  DistSpec dist;
  OptimizerConfig optimizer;
  std::vector<double> grid;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  // Diagonal values s of the pooled environments Sigma = s I.
  std::vector<double> pooled_envs{0.5, 1.5};
  VerifySpec verify;
  ControllerSpec controller;
  std::string output_dir = "out";
  bool plot = true;
  bool full = false;
  std::size_t threads = 0;

  void validate() const;
};

/// Desk-scale defaults (d=50, m=3000, 3 seeds) or the full scale (d=100, m=8000, 5 seeds).
ExperimentConfig default_experiment_config(ExperimentKind kind, bool full);

ExperimentKind parse_experiment_kind(const std::string& s);
std::string to_string(ExperimentKind k);
RunMode parse_run_mode(const std::string& s);
std::string to_string(RunMode m);

/// Every key understood by `apply_config`.
const std::vector<std::string>& known_config_keys();

/// Applies the entries of `kv` on top of `base`. Throws ConfigError on unknown keys or bad values.
ExperimentConfig apply_config(ExperimentConfig base, const KeyValueConfig& kv);

/// Defaults for the experiment named in `kv` (or `fallback`) at the scale
/// selected by its `full` key, overlaid with `kv`.
ExperimentConfig build_experiment_config(const KeyValueConfig& kv, ExperimentKind fallback);

/// Key-value form of a config; `apply_config(default, to_key_values(c))` reproduces c.
KeyValueConfig to_key_values(const ExperimentConfig& c);

/// Digest over every parameter that affects results.
std::string experiment_digest(const ExperimentConfig& c);

EnvironmentDistribution make_distribution(const DistSpec& spec, Index r2);
GroundTruthModel make_model(const ModelSpec& spec, std::uint64_t seed);

void write_trajectory_csv(const Trajectory& trajectory, const std::string& path);
void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out);
std::vector<MetricRecord> read_trajectory_csv(const std::string& path);

struct SummaryRow {
  std::string label;
  double grid_value = 0.0;
  std::uint64_t seed = 0;
  double final_recovery_error = 0.0;
  double final_q_fro = 0.0;
  double final_sigma1_r = 0.0;
  bool diverged = false;
  Index steps_completed = 0;
};

struct SummaryAggregate {
  std::string label;
  double grid_value = 0.0;
  Index count = 0;
  Index diverged = 0;
  double mean_recovery_error = 0.0;
  double stderr_recovery_error = 0.0;
  double mean_q_fro = 0.0;
  double stderr_q_fro = 0.0;
};

struct SweepSummary {
  std::vector<SummaryRow> rows;
  std::vector<SummaryAggregate> aggregate() const;
};

void write_summary_csv(const SweepSummary& summary, const std::string& path);
SweepSummary read_summary_csv(const std::string& path);
void write_aggregate_csv(const SweepSummary& summary, const std::string& path);

/// Runs one (grid value, seed) cell. The grid value is applied as M or eta
/// according to the experiment kind.
SummaryRow run_cell(const ExperimentConfig& config, const std::string& label, double grid_value, std::uint64_t seed,
                    Trajectory* trajectory_out = nullptr);

/// Runs the cells of a sweep or comparison (no files written).
SweepSummary run_sweep(const ExperimentConfig& config);

struct ExperimentResult {
  int exit_code = 0;
  SweepSummary summary;
  std::vector<std::string> files;
  std::string report;
};

/// Runs the configured experiment, writes its artifacts under output_dir and
/// returns 0 on success, 2 when a single run diverged and 3 when a
/// verification suite reports a failed check.
ExperimentResult run_experiment(const ExperimentConfig& config);

}  // namespace hetsense
