#include "hetsense/experiments.hpp"

#include "hetsense/dynamics.hpp"
#include "hetsense/plot.hpp"
#include "hetsense/rip.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

namespace hetsense {

namespace fs = std::filesystem;

namespace {

const std::vector<std::pair<ExperimentKind, std::string>>& kind_names() {
  static const std::vector<std::pair<ExperimentKind, std::string>> names{
      {ExperimentKind::kSingleRun, "single-run"},
      {ExperimentKind::kSweepHeterogeneity, "sweep-heterogeneity"},
      {ExperimentKind::kSweepStepsize, "sweep-stepsize"},
      {ExperimentKind::kComparePooled, "compare-pooled"},
      {ExperimentKind::kCompareParameterization, "compare-parameterization"},
      {ExperimentKind::kVerifyRip, "verify-rip"},
      {ExperimentKind::kVerifyController, "verify-controller"},
  };
  return names;
}

template <typename E>
E lookup(const std::vector<std::pair<E, std::string>>& table, const std::string& s, const std::string& what) {
  for (const auto& [e, name] : table) {
    if (name == s) return e;
  }
  std::string allowed;
  for (const auto& entry : table) allowed += (allowed.empty() ? "" : ", ") + entry.second;
  throw ConfigError(what + ": unknown value '" + s + "' (expected one of " + allowed + ")");
}

template <typename E>
const std::string& name_in(const std::vector<std::pair<E, std::string>>& table, E e) {
  for (const auto& entry : table) {
    if (entry.first == e) return entry.second;
  }
  throw ConfigError("unnamed enum value");
}

const std::vector<std::pair<RunMode, std::string>> kModeNames{
    {RunMode::kHetero, "hetero"}, {RunMode::kPooled, "pooled"}, {RunMode::kQuadratic, "quadratic"}};
const std::vector<std::pair<Parameterization, std::string>> kParamNames{
    {Parameterization::kOverparam, "overparam"}, {Parameterization::kExact, "exact"}};
const std::vector<std::pair<MeasurementKind, std::string>> kMeasurementNames{
    {MeasurementKind::kGaussian, "gaussian"}, {MeasurementKind::kRankOne, "rank-one"}};
const std::vector<std::pair<RadiusMode, std::string>> kRadiusNames{
    {RadiusMode::kFixed, "fixed"}, {RadiusMode::kLogInvDelta, "log-inv-delta"}};
const std::vector<std::pair<TauMode, std::string>> kTauNames{{TauMode::kOracleTrace, "oracle-trace"},
                                                             {TauMode::kOracleOperator, "oracle-operator"},
                                                             {TauMode::kMeanResponse, "mean-response"},
                                                             {TauMode::kRmsResponse, "rms-response"}};
const std::vector<std::pair<GaussianSampler, std::string>> kSamplerNames{
    {GaussianSampler::kProjected, "projected"}, {GaussianSampler::kExplicit, "explicit"}};

bool is_sweep(ExperimentKind k) {
  return k == ExperimentKind::kSweepHeterogeneity || k == ExperimentKind::kSweepStepsize;
}

bool is_cell_experiment(ExperimentKind k) {
  return is_sweep(k) || k == ExperimentKind::kComparePooled || k == ExperimentKind::kCompareParameterization;
}

std::string join_doubles(const std::vector<double>& v) {
  std::string out;
  for (double x : v) out += (out.empty() ? "" : ", ") + format_double(x);
  return out;
}

std::string join_seeds(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (auto x : v) out += (out.empty() ? "" : ", ") + std::to_string(x);
  return out;
}

Index positive_index(const KeyValueConfig& kv, const std::string& key, Index fallback) {
  const auto v = kv.get_int(key, fallback);
  if (v < 0) throw ConfigError(key + " must be nonnegative");
  return static_cast<Index>(v);
}

std::ofstream open_for_write(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  return out;
}

void check_written(std::ofstream& out, const std::string& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed for '" + path + "'");
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(line);
  while (std::getline(is, item, ',')) out.push_back(item);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

struct CellSpec {
  std::string label;
  double grid_value = 0.0;
  std::uint64_t seed = 0;
};

std::vector<std::string> cell_labels(const ExperimentConfig& c) {
  switch (c.experiment) {
    case ExperimentKind::kComparePooled: return {"hetero", "pooled"};
    case ExperimentKind::kCompareParameterization: return {"overparam", "exact"};
    default: return {to_string(c.mode)};
  }
}

std::vector<double> cell_grid(const ExperimentConfig& c) {
  if (is_sweep(c.experiment)) return c.grid;
  return {c.dist.kind == "two-point" ? c.dist.magnitude : c.dist.het};
}

std::string cell_file_name(const CellSpec& cell) {
  return cell.label + "_g" + format_double(cell.grid_value) + "_s" + std::to_string(cell.seed) + ".csv";
}

std::string timestamp_utc() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

void write_manifest(const ExperimentConfig& c, const std::string& path, double wall_seconds,
                    const std::vector<std::pair<std::string, std::string>>& extra) {
  std::ofstream out = open_for_write(path);
  out << "digest = " << experiment_digest(c) << "\n";
  out << "experiment = " << to_string(c.experiment) << "\n";
  out << "seeds = " << join_seeds(c.seeds) << "\n";
  out << "grid = " << join_doubles(c.grid) << "\n";
  out << "steps_resolved = " << c.optimizer.resolved_steps() << "\n";
  // No published eta or T for the heterogeneity sweep; the default step count is our own.
  out << "steps_source = " << (c.optimizer.steps == 0 ? "default ceil(10 log(1/alpha) / eta), assumed, not published" : "explicit")
      << "\n";
  out << "optimizer = " << describe(c.optimizer) << "\n";
  out << "version = " << kVersion << "\n";
  out << "eigen = " << EIGEN_WORLD_VERSION << "." << EIGEN_MAJOR_VERSION << "." << EIGEN_MINOR_VERSION << "\n";
  out << "wall_clock_seconds = " << format_double(wall_seconds) << "\n";
  out << "timestamp = " << timestamp_utc() << "\n";
  for (const auto& [k, v] : extra) out << k << " = " << v << "\n";
  out << "# configuration\n";
  const auto kv = to_key_values(c);
  for (const auto& [k, v] : kv.values()) out << "config." << k << " = " << v << "\n";
  check_written(out, path);
}

// Sorted (label order, grid value, seed).
void sort_rows(std::vector<SummaryRow>& rows, const std::vector<std::string>& labels) {
  auto rank = [&](const std::string& l) {
    const auto it = std::find(labels.begin(), labels.end(), l);
    return static_cast<std::size_t>(it - labels.begin());
  };
  std::stable_sort(rows.begin(), rows.end(), [&](const SummaryRow& a, const SummaryRow& b) {
    const auto ra = rank(a.label), rb = rank(b.label);
    if (ra != rb) return ra < rb;
    if (a.grid_value != b.grid_value) return a.grid_value < b.grid_value;
    return a.seed < b.seed;
  });
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

ExperimentResult run_verify_rip(const ExperimentConfig& c) {
  ExperimentResult result;
  const std::uint64_t seed = c.seeds.front();
  const GroundTruthModel model = make_model(c.model, seed);
  const EnvironmentDistribution dist = make_distribution(c.dist, c.model.r2);
  const auto env = sample_environment(dist, SeedStream(seed).child("verify-environment").key());
  const auto batch =
      generate_gaussian_batch(model, env, c.optimizer.batch_size, SeedStream(seed).child("verify-batch").key());
  const RipEstimate est = estimate_rip_delta(batch, c.verify.rank, c.verify.delta_trials, seed);
  const double delta = est.delta_hat + c.verify.margin;
  const LemmaReport report = check_rip_lemma_bounds(batch, delta, c.verify.rank, c.verify.trials, seed);

  std::ostringstream table;
  table << "delta_hat = " << format_double(est.delta_hat) << " (rank " << est.rank_tested << ", " << est.trials
        << " trials, worst " << est.worst_case_matrix_digest << ")\n";
  table << "delta used = " << format_double(delta) << "\n";
  table << std::left << std::setw(18) << "bound" << std::setw(8) << "trials" << std::setw(14) << "max ratio"
        << "result\n";
  for (const auto& check : report.checks) {
    std::ostringstream ratio;
    ratio << std::fixed << std::setprecision(6) << check.max_ratio;
    table << std::left << std::setw(18) << check.lemma << std::setw(8) << check.trials << std::setw(14)
          << ratio.str() << (check.pass() ? "pass" : "FAIL") << "\n";
  }
  result.report = table.str();
  result.exit_code = report.all_pass() ? 0 : 3;

  fs::create_directories(c.output_dir);
  const std::string csv = (fs::path(c.output_dir) / "rip_report.csv").string();
  {
    std::ofstream out = open_for_write(csv);
    out << "bound,trials,max_ratio,violations,delta\n";
    for (const auto& check : report.checks) {
      out << check.lemma << "," << check.trials << "," << format_double(check.max_ratio) << ","
          << check.violations << "," << format_double(delta) << "\n";
    }
    check_written(out, csv);
  }
  result.files.push_back(csv);
  return result;
}

ExperimentResult run_verify_controller(const ExperimentConfig& c) {
  ExperimentResult result;
  const std::uint64_t seed = c.seeds.front();
  const EnvironmentDistribution dist = make_distribution(c.dist, c.model.r2);
  const double eta = c.optimizer.eta;
  const double m1 = dist.sup_abs_diagonal();
  const auto aux = make_auxiliary_sequences(c.optimizer.alpha, eta, c.controller.steps, m1, c.controller.delta,
                                            c.model.r1, c.model.r2, 0.5);
  std::ostringstream os;
  try {
    const auto sm = check_supermartingale(dist, eta, c.controller.samples, SeedStream(seed).child("sm").key());
    os << "supermartingale: estimate " << format_double(sm.estimate) << " +- " << format_double(sm.std_error)
       << ", exact " << format_double(sm.exact) << " -> " << (sm.pass ? "pass" : "FAIL") << "\n";
  } catch (const DomainError& e) {
    os << "supermartingale: not applicable (" << e.what() << ")\n";
  }
  const auto stats = simulate_controller(dist, eta, aux.cal_line, c.controller.p, c.model.r2, c.controller.steps,
                                         SeedStream(seed).child("controller").key(), c.controller.replicates);
  os << "controller: " << stats.absorbed_replicates << " of " << stats.replicates << " replicates absorbed ("
     << format_double(stats.absorption_fraction) << "), bound steps * p = " << format_double(stats.bound) << " -> "
     << (stats.within_bound ? "pass" : "FAIL") << "\n";
  os << "reflection respected: " << (stats.reflection_respected ? "yes" : "no") << "\n";
  if (!stats.warning.empty()) os << "warning: " << stats.warning << "\n";
  result.report = os.str();
  result.exit_code = stats.within_bound && stats.reflection_respected ? 0 : 3;

  fs::create_directories(c.output_dir);
  const std::string path = (fs::path(c.output_dir) / "controller_report.txt").string();
  std::ofstream out = open_for_write(path);
  out << result.report;
  check_written(out, path);
  result.files.push_back(path);
  return result;
}

SummaryRow row_from(const std::string& label, double grid_value, std::uint64_t seed, const Trajectory& t,
                    bool diverged) {
  SummaryRow row;
  row.label = label;
  row.grid_value = grid_value;
  row.seed = seed;
  row.diverged = diverged;
  if (!t.records.empty()) {
    const auto& last = t.records.back();
    row.final_recovery_error = last.recovery_error;
    row.final_q_fro = last.q_fro;
    row.final_sigma1_r = last.sigma1_r;
    row.steps_completed = last.t;
  }
  return row;
}

}  // namespace

const char* const kVersion = "0.1.0";

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must be nonempty");
  if (is_sweep(experiment) && grid.empty()) throw ConfigError("grid must be nonempty for sweep experiments");
  if (model.d <= 0) throw ConfigError("model.d must be positive");
  if (model.r1 <= 0) throw ConfigError("model.r1 must be positive");
  if (model.r2 < 0) throw ConfigError("model.r2 must be nonnegative");
  if (model.r1 + model.r2 > model.d) throw ConfigError("model.r1 + model.r2 exceeds model.d");
  if (dist.kind != "uniform-diagonal" && dist.kind != "two-point") {
    throw ConfigError("dist.kind must be uniform-diagonal or two-point");
  }
  if (!(dist.het >= 0.0) || !std::isfinite(dist.het)) throw ConfigError("dist.het must be finite and >= 0");
  if (!(dist.magnitude >= 0.0) || !std::isfinite(dist.magnitude)) throw ConfigError("dist.magnitude must be >= 0");
  if (pooled_envs.empty()) throw ConfigError("pooled.envs must be nonempty");
  if (experiment == ExperimentKind::kSweepHeterogeneity) {
    for (double g : grid) {
      if (!(g >= 0.0) || !std::isfinite(g)) throw ConfigError("heterogeneity grid values must be finite and >= 0");
    }
  }
  if (experiment == ExperimentKind::kSweepStepsize) {
    for (double g : grid) {
      if (!(g > 0.0) || !std::isfinite(g)) throw ConfigError("step-size grid values must be positive");
    }
  }
  if (verify.rank <= 0 || verify.trials <= 0 || verify.delta_trials <= 0) {
    throw ConfigError("verify.rank, verify.trials and verify.delta_trials must be positive");
  }
  if (!(verify.margin >= 0.0)) throw ConfigError("verify.margin must be >= 0");
  if (!(controller.p > 0.0 && controller.p < 1.0)) throw ConfigError("controller.p must lie in (0, 1)");
  if (controller.steps <= 0 || controller.replicates <= 0 || controller.samples <= 0) {
    throw ConfigError("controller.steps, controller.replicates and controller.samples must be positive");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must be nonempty");
  optimizer.validate();
}

ExperimentConfig default_experiment_config(ExperimentKind kind, bool full) {
  ExperimentConfig c;
  c.experiment = kind;
  c.full = full;
  c.model.d = full ? 100 : 50;
  c.optimizer.batch_size = full ? 8000 : 3000;
  c.seeds = full ? std::vector<std::uint64_t>{1, 2, 3, 4, 5} : std::vector<std::uint64_t>{1, 2, 3};
  switch (kind) {
    case ExperimentKind::kSweepHeterogeneity:
      c.grid = {0, 1, 2, 3, 5, 8, 10, 15};
      break;
    case ExperimentKind::kSweepStepsize:
      c.grid = {0.005, 0.01, 0.05, 0.1, 0.2};
      c.dist.het = 12.0;
      break;
    case ExperimentKind::kComparePooled:
      c.model.orthogonal = true;
      break;
    case ExperimentKind::kVerifyRip:
      c.model.d = 20;
      c.optimizer.batch_size = 4000;
      c.seeds = {1};
      break;
    case ExperimentKind::kVerifyController:
      c.dist.kind = "two-point";
      c.dist.magnitude = 2000.0;
      c.optimizer.eta = 7e-6;
      c.optimizer.steps = c.controller.steps;
      c.seeds = {1};
      break;
    default:
      break;
  }
  return c;
}

ExperimentKind parse_experiment_kind(const std::string& s) { return lookup(kind_names(), s, "experiment"); }
std::string to_string(ExperimentKind k) { return name_in(kind_names(), k); }
RunMode parse_run_mode(const std::string& s) { return lookup(kModeNames, s, "mode"); }
std::string to_string(RunMode m) { return name_in(kModeNames, m); }

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys{
      "experiment",
      "mode",
      "full",
      "model.d",
      "model.r1",
      "model.r2",
      "model.orthogonal",
      "dist.kind",
      "dist.het",
      "dist.magnitude",
      "optimizer.eta",
      "optimizer.alpha",
      "optimizer.steps",
      "optimizer.m",
      "optimizer.parameterization",
      "optimizer.measurement",
      "optimizer.truncation.enabled",
      "optimizer.truncation.radius_mode",
      "optimizer.truncation.radius",
      "optimizer.shrinkage.enabled",
      "optimizer.shrinkage.tau",
      "optimizer.divergence_threshold",
      "optimizer.sampler",
      "optimizer.pooled_samples",
      "grid",
      "seeds",
      "pooled.envs",
      "verify.rank",
      "verify.trials",
      "verify.margin",
      "verify.delta_trials",
      "controller.p",
      "controller.steps",
      "controller.replicates",
      "controller.delta",
      "controller.samples",
      "output_dir",
      "plot",
      "threads",
  };
  return keys;
}

ExperimentConfig apply_config(ExperimentConfig c, const KeyValueConfig& kv) {
  const auto unknown = kv.unknown_keys(known_config_keys());
  if (!unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown configuration key(s): " + list);
  }
  if (auto v = kv.get("experiment")) c.experiment = parse_experiment_kind(*v);
  if (auto v = kv.get("mode")) c.mode = parse_run_mode(*v);
  c.full = kv.get_bool("full", c.full);
  c.model.d = positive_index(kv, "model.d", c.model.d);
  c.model.r1 = positive_index(kv, "model.r1", c.model.r1);
  c.model.r2 = positive_index(kv, "model.r2", c.model.r2);
  c.model.orthogonal = kv.get_bool("model.orthogonal", c.model.orthogonal);
  c.dist.kind = kv.get_string("dist.kind", c.dist.kind);
  c.dist.het = kv.get_double("dist.het", c.dist.het);
  c.dist.magnitude = kv.get_double("dist.magnitude", c.dist.magnitude);

  auto& o = c.optimizer;
  o.eta = kv.get_double("optimizer.eta", o.eta);
  o.alpha = kv.get_double("optimizer.alpha", o.alpha);
  o.steps = positive_index(kv, "optimizer.steps", o.steps);
  o.batch_size = positive_index(kv, "optimizer.m", o.batch_size);
  if (auto v = kv.get("optimizer.parameterization")) o.parameterization = lookup(kParamNames, *v, "parameterization");
  if (auto v = kv.get("optimizer.measurement")) o.measurement_kind = lookup(kMeasurementNames, *v, "measurement");
  o.truncation.enabled = kv.get_bool("optimizer.truncation.enabled", o.truncation.enabled);
  if (auto v = kv.get("optimizer.truncation.radius_mode")) {
    o.truncation.radius_mode = lookup(kRadiusNames, *v, "optimizer.truncation.radius_mode");
  }
  o.truncation.radius = kv.get_double("optimizer.truncation.radius", o.truncation.radius);
  o.shrinkage.enabled = kv.get_bool("optimizer.shrinkage.enabled", o.shrinkage.enabled);
  if (auto v = kv.get("optimizer.shrinkage.tau")) o.shrinkage.tau_mode = lookup(kTauNames, *v, "optimizer.shrinkage.tau");
  o.divergence_threshold = kv.get_double("optimizer.divergence_threshold", o.divergence_threshold);
  if (auto v = kv.get("optimizer.sampler")) o.sampler = lookup(kSamplerNames, *v, "optimizer.sampler");
  o.pooled_samples = positive_index(kv, "optimizer.pooled_samples", o.pooled_samples);

  c.grid = kv.get_doubles("grid", c.grid);
  c.seeds = kv.get_seeds("seeds", c.seeds);
  c.pooled_envs = kv.get_doubles("pooled.envs", c.pooled_envs);
  c.verify.rank = positive_index(kv, "verify.rank", c.verify.rank);
  c.verify.trials = positive_index(kv, "verify.trials", c.verify.trials);
  c.verify.margin = kv.get_double("verify.margin", c.verify.margin);
  c.verify.delta_trials = positive_index(kv, "verify.delta_trials", c.verify.delta_trials);
  c.controller.p = kv.get_double("controller.p", c.controller.p);
  c.controller.steps = positive_index(kv, "controller.steps", c.controller.steps);
  c.controller.replicates = positive_index(kv, "controller.replicates", c.controller.replicates);
  c.controller.delta = kv.get_double("controller.delta", c.controller.delta);
  c.controller.samples = positive_index(kv, "controller.samples", c.controller.samples);
  c.output_dir = kv.get_string("output_dir", c.output_dir);
  c.plot = kv.get_bool("plot", c.plot);
  c.threads = static_cast<std::size_t>(positive_index(kv, "threads", static_cast<Index>(c.threads)));
  return c;
}

ExperimentConfig build_experiment_config(const KeyValueConfig& kv, ExperimentKind fallback) {
  const ExperimentKind kind = kv.has("experiment") ? parse_experiment_kind(*kv.get("experiment")) : fallback;
  const bool full = kv.get_bool("full", false);
  return apply_config(default_experiment_config(kind, full), kv);
}

KeyValueConfig to_key_values(const ExperimentConfig& c) {
  KeyValueConfig kv;
  const auto& o = c.optimizer;
  kv.set("experiment", to_string(c.experiment));
  kv.set("mode", to_string(c.mode));
  kv.set("full", c.full ? "true" : "false");
  kv.set("model.d", std::to_string(c.model.d));
  kv.set("model.r1", std::to_string(c.model.r1));
  kv.set("model.r2", std::to_string(c.model.r2));
  kv.set("model.orthogonal", c.model.orthogonal ? "true" : "false");
  kv.set("dist.kind", c.dist.kind);
  kv.set("dist.het", format_double(c.dist.het));
  kv.set("dist.magnitude", format_double(c.dist.magnitude));
  kv.set("optimizer.eta", format_double(o.eta));
  kv.set("optimizer.alpha", format_double(o.alpha));
  kv.set("optimizer.steps", std::to_string(o.steps));
  kv.set("optimizer.m", std::to_string(o.batch_size));
  kv.set("optimizer.parameterization", name_in(kParamNames, o.parameterization));
  kv.set("optimizer.measurement", name_in(kMeasurementNames, o.measurement_kind));
  kv.set("optimizer.truncation.enabled", o.truncation.enabled ? "true" : "false");
  kv.set("optimizer.truncation.radius_mode", name_in(kRadiusNames, o.truncation.radius_mode));
  kv.set("optimizer.truncation.radius", format_double(o.truncation.radius));
  kv.set("optimizer.shrinkage.enabled", o.shrinkage.enabled ? "true" : "false");
  kv.set("optimizer.shrinkage.tau", name_in(kTauNames, o.shrinkage.tau_mode));
  kv.set("optimizer.divergence_threshold", format_double(o.divergence_threshold));
  kv.set("optimizer.sampler", name_in(kSamplerNames, o.sampler));
  kv.set("optimizer.pooled_samples", std::to_string(o.pooled_samples));
  kv.set("grid", join_doubles(c.grid));
  kv.set("seeds", join_seeds(c.seeds));
  kv.set("pooled.envs", join_doubles(c.pooled_envs));
  kv.set("verify.rank", std::to_string(c.verify.rank));
  kv.set("verify.trials", std::to_string(c.verify.trials));
  kv.set("verify.margin", format_double(c.verify.margin));
  kv.set("verify.delta_trials", std::to_string(c.verify.delta_trials));
  kv.set("controller.p", format_double(c.controller.p));
  kv.set("controller.steps", std::to_string(c.controller.steps));
  kv.set("controller.replicates", std::to_string(c.controller.replicates));
  kv.set("controller.delta", format_double(c.controller.delta));
  kv.set("controller.samples", std::to_string(c.controller.samples));
  kv.set("output_dir", c.output_dir);
  kv.set("plot", c.plot ? "true" : "false");
  kv.set("threads", std::to_string(c.threads));
  return kv;
}

std::string experiment_digest(const ExperimentConfig& c) {
  KeyValueConfig kv = to_key_values(c);
  // Presentation and scheduling only.
  std::string text;
  for (const auto& [k, v] : kv.values()) {
    if (k == "output_dir" || k == "plot" || k == "threads") continue;
    text += k + "=" + v + "\n";
  }
  return digest_text(text);
}

EnvironmentDistribution make_distribution(const DistSpec& spec, Index r2) {
  if (spec.kind == "uniform-diagonal") return EnvironmentDistribution::uniform_diagonal(spec.het, r2);
  if (spec.kind == "two-point") return EnvironmentDistribution::two_point(spec.magnitude, r2);
  throw ConfigError("dist.kind: unknown distribution '" + spec.kind + "'");
}

GroundTruthModel make_model(const ModelSpec& spec, std::uint64_t seed) {
  const std::uint64_t model_seed = SeedStream(seed).child("model").key();
  if (spec.orthogonal) return make_orthogonal_ground_truth(spec.d, spec.r1, spec.r2, model_seed);
  return make_ground_truth(spec.d, spec.r1, spec.r2, model_seed);
}

void write_trajectory_csv(const Trajectory& trajectory, std::ostream& out) {
  out << "t,env_id,loss,sigma1_r,sigma_min_r,q_fro,e_op,e_fro2,recovery_error\n";
  for (const auto& r : trajectory.records) {
    out << r.t << ',' << r.env_id << ',' << format_double(r.loss) << ',' << format_double(r.sigma1_r) << ','
        << format_double(r.sigma_min_r) << ',' << format_double(r.q_fro) << ',' << format_double(r.e_op) << ','
        << format_double(r.e_fro2) << ',' << format_double(r.recovery_error) << '\n';
  }
}

void write_trajectory_csv(const Trajectory& trajectory, const std::string& path) {
  std::ofstream out = open_for_write(path);
  write_trajectory_csv(trajectory, out);
  check_written(out, path);
}

std::vector<MetricRecord> read_trajectory_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line != "t,env_id,loss,sigma1_r,sigma_min_r,q_fro,e_op,e_fro2,recovery_error") {
    throw std::runtime_error(path + ": unexpected trajectory header");
  }
  std::vector<MetricRecord> out;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 9) throw std::runtime_error(where + ": expected 9 fields");
    MetricRecord r;
    r.t = static_cast<Index>(std::stoll(f[0]));
    r.env_id = f[1];
    r.loss = parse_double(f[2], where);
    r.sigma1_r = parse_double(f[3], where);
    r.sigma_min_r = parse_double(f[4], where);
    r.q_fro = parse_double(f[5], where);
    r.e_op = parse_double(f[6], where);
    r.e_fro2 = parse_double(f[7], where);
    r.recovery_error = parse_double(f[8], where);
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<SummaryAggregate> SweepSummary::aggregate() const {
  std::vector<SummaryAggregate> out;
  std::map<std::pair<std::string, double>, std::size_t> index;
  std::vector<std::vector<const SummaryRow*>> groups;
  for (const auto& row : rows) {
    const auto key = std::make_pair(row.label, row.grid_value);
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, out.size()).first;
      SummaryAggregate a;
      a.label = row.label;
      a.grid_value = row.grid_value;
      out.push_back(a);
      groups.emplace_back();
    }
    groups[it->second].push_back(&row);
  }
  auto mean_se = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= n;
    if (v.size() < 2) return std::make_pair(mean, 0.0);
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::make_pair(mean, std::sqrt(ss / (n - 1.0) / n));
  };
  for (std::size_t g = 0; g < out.size(); ++g) {
    std::vector<double> err, q;
    for (const auto* row : groups[g]) {
      err.push_back(row->final_recovery_error);
      q.push_back(row->final_q_fro);
      if (row->diverged) ++out[g].diverged;
    }
    out[g].count = static_cast<Index>(groups[g].size());
    std::tie(out[g].mean_recovery_error, out[g].stderr_recovery_error) = mean_se(err);
    std::tie(out[g].mean_q_fro, out[g].stderr_q_fro) = mean_se(q);
  }
  return out;
}

void write_summary_csv(const SweepSummary& summary, const std::string& path) {
  std::ofstream out = open_for_write(path);
  out << "label,grid_value,seed,final_recovery_error,final_q_fro,final_sigma1_r,diverged,steps_completed\n";
  for (const auto& r : summary.rows) {
    out << r.label << ',' << format_double(r.grid_value) << ',' << r.seed << ',' << format_double(r.final_recovery_error)
        << ',' << format_double(r.final_q_fro) << ',' << format_double(r.final_sigma1_r) << ','
        << (r.diverged ? 1 : 0) << ',' << r.steps_completed << '\n';
  }
  check_written(out, path);
}

SweepSummary read_summary_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (line.rfind("label,grid_value,seed,", 0) != 0) throw std::runtime_error(path + ": unexpected summary header");
  SweepSummary s;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    const std::string where = path + ":" + std::to_string(lineno);
    if (f.size() != 8) throw std::runtime_error(where + ": expected 8 fields");
    SummaryRow r;
    r.label = f[0];
    r.grid_value = parse_double(f[1], where);
    r.seed = std::stoull(f[2]);
    r.final_recovery_error = parse_double(f[3], where);
    r.final_q_fro = parse_double(f[4], where);
    r.final_sigma1_r = parse_double(f[5], where);
    r.diverged = f[6] == "1";
    r.steps_completed = static_cast<Index>(std::stoll(f[7]));
    s.rows.push_back(std::move(r));
  }
  return s;
}

void write_aggregate_csv(const SweepSummary& summary, const std::string& path) {
  std::ofstream out = open_for_write(path);
  out << "label,grid_value,count,diverged,mean_recovery_error,stderr_recovery_error,mean_q_fro,stderr_q_fro\n";
  for (const auto& a : summary.aggregate()) {
    out << a.label << ',' << format_double(a.grid_value) << ',' << a.count << ',' << a.diverged << ','
        << format_double(a.mean_recovery_error) << ',' << format_double(a.stderr_recovery_error) << ','
        << format_double(a.mean_q_fro) << ',' << format_double(a.stderr_q_fro) << '\n';
  }
  check_written(out, path);
}

SummaryRow run_cell(const ExperimentConfig& config, const std::string& label, double grid_value, std::uint64_t seed,
                    Trajectory* trajectory_out) {
  ExperimentConfig c = config;
  switch (c.experiment) {
    case ExperimentKind::kSweepHeterogeneity:
      if (c.dist.kind == "two-point") {
        c.dist.magnitude = grid_value;
      } else {
        c.dist.het = grid_value;
      }
      break;
    case ExperimentKind::kSweepStepsize:
      c.optimizer.eta = grid_value;
      break;
    default:
      break;
  }
  RunMode mode = c.mode;
  if (c.experiment == ExperimentKind::kComparePooled) mode = parse_run_mode(label);
  if (c.experiment == ExperimentKind::kCompareParameterization) {
    c.optimizer.parameterization = lookup(kParamNames, label, "label");
  }
  if (mode == RunMode::kQuadratic) {
    c.optimizer.measurement_kind = MeasurementKind::kRankOne;
    c.optimizer.truncation.enabled = true;
    c.optimizer.shrinkage.enabled = true;
  }

  const GroundTruthModel model = make_model(c.model, seed);
  const EnvironmentDistribution dist = make_distribution(c.dist, c.model.r2);
  Trajectory traj;
  bool diverged = false;
  try {
    switch (mode) {
      case RunMode::kHetero:
        traj = run_hetero_sgd(model, dist, c.optimizer, seed);
        break;
      case RunMode::kQuadratic:
        traj = run_quadratic_sgd(model, dist, c.optimizer, seed);
        break;
      case RunMode::kPooled: {
        std::vector<EnvironmentCoefficients> envs;
        for (double s : c.pooled_envs) {
          envs.push_back({s * Matrix::Identity(c.model.r2, c.model.r2), "s" + format_double(s)});
        }
        traj = run_pooled_gd(model, envs, c.optimizer, seed);
        break;
      }
    }
  } catch (const DivergenceError& e) {
    traj = e.partial();
    diverged = true;
  }
  SummaryRow row = row_from(label, grid_value, seed, traj, diverged);
  if (trajectory_out != nullptr) *trajectory_out = std::move(traj);
  return row;
}

SweepSummary run_sweep(const ExperimentConfig& config) {
  config.validate();
  if (!is_cell_experiment(config.experiment)) throw ConfigError(to_string(config.experiment) + " has no cells");
  std::vector<CellSpec> cells;
  const auto labels = cell_labels(config);
  for (const auto& label : labels) {
    for (double g : cell_grid(config)) {
      for (auto s : config.seeds) cells.push_back({label, g, s});
    }
  }
  SweepSummary summary;
  summary.rows.resize(cells.size());
  parallel_for(cells.size(), config.threads, [&](std::size_t i) {
    summary.rows[i] = run_cell(config, cells[i].label, cells[i].grid_value, cells[i].seed);
  });
  sort_rows(summary.rows, labels);
  return summary;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  if (config.experiment == ExperimentKind::kVerifyRip) return run_verify_rip(config);
  if (config.experiment == ExperimentKind::kVerifyController) return run_verify_controller(config);

  const fs::path root(config.output_dir);
  fs::create_directories(root);
  ExperimentResult result;

  if (config.experiment == ExperimentKind::kSingleRun) {
    const std::uint64_t seed = config.seeds.front();
    Trajectory traj;
    const SummaryRow row = run_cell(config, to_string(config.mode), config.dist.het, seed, &traj);
    const std::string csv = (root / "trajectory.csv").string();
    write_trajectory_csv(traj, csv);
    const std::string manifest = (root / "manifest.txt").string();
    write_manifest(config, manifest, elapsed(),
                   {{"seed", std::to_string(seed)},
                    {"run_digest", traj.config_digest},
                    {"status", row.diverged ? "diverged" : "ok"},
                    {"steps_completed", std::to_string(row.steps_completed)}});
    result.files = {csv, manifest};
    result.summary.rows.push_back(row);
    std::ostringstream os;
    os << (row.diverged ? "diverged at step " + std::to_string(row.steps_completed + 1) : "completed")
       << ": recovery error " << format_double(row.final_recovery_error) << ", |Q|_F "
       << format_double(row.final_q_fro) << ", sigma1 " << format_double(row.final_sigma1_r) << "\n";
    result.report = os.str();
    result.exit_code = row.diverged ? 2 : 0;
    return result;
  }

  // Sweep or comparison: one trajectory file per cell, merged into summary.csv.
  const auto labels = cell_labels(config);
  std::vector<CellSpec> cells;
  for (const auto& label : labels) {
    for (double g : cell_grid(config)) {
      for (auto s : config.seeds) cells.push_back({label, g, s});
    }
  }
  const fs::path cell_dir = root / "trajectories";
  fs::create_directories(cell_dir);
  std::vector<SummaryRow> rows(cells.size());
  parallel_for(cells.size(), config.threads, [&](std::size_t i) {
    Trajectory traj;
    rows[i] = run_cell(config, cells[i].label, cells[i].grid_value, cells[i].seed, &traj);
    write_trajectory_csv(traj, (cell_dir / cell_file_name(cells[i])).string());
  });
  sort_rows(rows, labels);
  result.summary.rows = rows;

  const std::string summary_csv = (root / "summary.csv").string();
  const std::string aggregate_csv = (root / "aggregate.csv").string();
  write_summary_csv(result.summary, summary_csv);
  write_aggregate_csv(result.summary, aggregate_csv);
  result.files = {summary_csv, aggregate_csv};

  std::string flags;
  for (const auto& row : rows) {
    flags += (flags.empty() ? "" : ", ") + row.label + ":" + format_double(row.grid_value) + ":" +
             std::to_string(row.seed) + "=" + (row.diverged ? "diverged" : "ok");
  }
  if (config.plot) {
    const std::string svg = (root / "summary.svg").string();
    const std::string x_label = config.experiment == ExperimentKind::kSweepStepsize ? "step size eta"
                                : config.experiment == ExperimentKind::kSweepHeterogeneity
                                    ? "heterogeneity M"
                                    : "M";
    plot_summary_csv(summary_csv, svg, x_label);
    result.files.push_back(svg);
  }
  const std::string manifest = (root / "manifest.txt").string();
  write_manifest(config, manifest, elapsed(), {{"cells", flags}});
  result.files.push_back(manifest);

  std::ostringstream os;
  os << std::left << std::setw(12) << "label" << std::setw(10) << "grid" << std::setw(4) << "n" << std::setw(10)
     << "diverged" << std::setw(24) << "recovery error" << "|Q|_F\n";
  auto pm = [](double mean, double se) {
    std::ostringstream v;
    v << std::fixed << std::setprecision(4) << mean << " +- " << se;
    return v.str();
  };
  for (const auto& a : result.summary.aggregate()) {
    os << std::left << std::setw(12) << a.label << std::setw(10) << format_double(a.grid_value) << std::setw(4)
       << a.count << std::setw(10) << a.diverged << std::setw(24)
       << pm(a.mean_recovery_error, a.stderr_recovery_error) << pm(a.mean_q_fro, a.stderr_q_fro) << "\n";
  }
  result.report = os.str();
  return result;
}

}  // namespace hetsense
