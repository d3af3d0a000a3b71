#include "hetsense/optimizer.hpp"

#include "hetsense/dynamics.hpp"
#include "hetsense/rip.hpp"

#include <boost/random/chi_squared_distribution.hpp>
#include <boost/random/uniform_int_distribution.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace hetsense {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

const char* name_of(Parameterization p) { return p == Parameterization::kOverparam ? "overparam-d" : "exact"; }
const char* name_of(MeasurementKind k) { return k == MeasurementKind::kGaussian ? "gaussian" : "rank-one"; }
const char* name_of(GaussianSampler s) { return s == GaussianSampler::kProjected ? "projected" : "explicit"; }
const char* name_of(RadiusMode r) { return r == RadiusMode::kFixed ? "fixed" : "log-inv-delta"; }
const char* name_of(TauMode t) {
  switch (t) {
    case TauMode::kOracleTrace: return "oracle-trace";
    case TauMode::kOracleOperator: return "oracle-operator";
    case TauMode::kMeanResponse: return "mean-response";
    case TauMode::kRmsResponse: return "rms-response";
  }
  return "?";
}

void check_iterate(const MeasurementBatch& batch, const Matrix& u, const char* what) {
  if (u.rows() != batch.dim()) {
    throw DimensionError(std::string(what) + ": iterate has " + std::to_string(u.rows()) + " rows, batch d = " +
                         std::to_string(batch.dim()));
  }
}

bool leaves_ball(const Matrix& u, double threshold) {
  if (!u.allFinite()) return true;
  if (!std::isfinite(threshold) || u.norm() <= threshold) return false;
  return operator_norm(u) > threshold;
}

// Residuals r_i = <A_i, u u^T> - y_i of a rank-one batch with the truncation mask applied.
Vector rank_one_residuals(const MeasurementBatch& batch, const Matrix& proj, double radius) {
  Vector c(batch.size());
  for (Index i = 0; i < batch.size(); ++i) {
    const double yh = proj.col(i).squaredNorm();
    c(i) = yh <= radius ? yh - batch.responses()(i) : 0.0;
  }
  return c;
}

void reject_gaussian_radius(const MeasurementBatch& batch, double radius) {
  if (batch.kind() == MeasurementKind::kGaussian && std::isfinite(radius)) {
    throw ConfigError("truncation applies to rank-one measurements only");
  }
}

// D = (1/m) sum_i r_i A_i for a dense batch, with r_i = <A_i, uu> - y_i.
Matrix gaussian_statistic(const MeasurementBatch& batch, const Matrix& uu, double* loss) {
  Matrix acc = Matrix::Zero(batch.dim(), batch.dim());
  double sq = 0.0;
  for (Index i = 0; i < batch.size(); ++i) {
    const double r = batch.measure(i, uu) - batch.responses()(i);
    acc.noalias() += r * batch.matrix(i);
    sq += r * r;
  }
  const double m = static_cast<double>(batch.size());
  acc /= m;
  if (loss) *loss = sq / (2.0 * m);
  return acc;
}

}  // namespace

void OptimizerConfig::validate() const {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ConfigError("eta must be finite and >= 0");
  if (eta == 0.0 && steps < 1) throw ConfigError("eta = 0 requires an explicit step count");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("alpha must be finite and > 0");
  if (steps < 0) throw ConfigError("steps must be >= 1 (or 0 for the default)");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (pooled_samples < 0) throw ConfigError("pooled_samples must be >= 0");
  if (divergence_threshold < 0.0) throw ConfigError("divergence_threshold must be >= 0");
  if ((truncation.enabled || shrinkage.enabled) && measurement_kind != MeasurementKind::kRankOne) {
    throw ConfigError("truncation and shrinkage require rank-one measurements");
  }
  if (truncation.enabled && truncation.radius_mode == RadiusMode::kFixed && !(truncation.radius > 0.0)) {
    throw ConfigError("truncation radius must be > 0");
  }
  if (steps == 0 && alpha >= 1.0) throw ConfigError("the default step count needs alpha < 1");
}

Index OptimizerConfig::resolved_steps() const { return steps > 0 ? steps : default_steps(alpha, eta); }

Index default_steps(double alpha, double eta) {
  return static_cast<Index>(std::ceil(10.0 * std::log(1.0 / alpha) / eta));
}

double default_divergence_threshold(Index r1, double m1) {
  return 10.0 * std::sqrt(static_cast<double>(r1) * (1.0 + m1));
}

std::string describe(const OptimizerConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "eta=" << c.eta << ";alpha=" << c.alpha << ";steps=" << c.resolved_steps() << ";batch_size=" << c.batch_size
     << ";parameterization=" << name_of(c.parameterization) << ";measurement=" << name_of(c.measurement_kind)
     << ";truncation=" << (c.truncation.enabled ? 1 : 0) << ";radius_mode=" << name_of(c.truncation.radius_mode)
     << ";radius=" << c.truncation.radius << ";shrinkage=" << (c.shrinkage.enabled ? 1 : 0)
     << ";tau_mode=" << name_of(c.shrinkage.tau_mode) << ";divergence_threshold=" << c.divergence_threshold
     << ";sampler=" << name_of(c.sampler) << ";pooled_samples=" << c.pooled_samples;
  return os.str();
}

std::string digest_text(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

IterateState init_iterate(const OptimizerConfig& config, const GroundTruthModel& model, std::uint64_t seed) {
  config.validate();
  IterateState s;
  const Index d = model.d();
  if (config.parameterization == Parameterization::kOverparam) {
    s.u = config.alpha * Matrix::Identity(d, d);
  } else {
    Engine engine = SeedStream(seed).child("init").engine();
    s.u = standard_normal_matrix(engine, d, model.r1() + model.r2());
    s.u *= config.alpha / std::pow(static_cast<double>(d), 0.25);
  }
  return s;
}

double least_squares_loss(const MeasurementBatch& batch, const Matrix& u, double radius) {
  check_iterate(batch, u, "least_squares_loss");
  reject_gaussian_radius(batch, radius);
  const double m = static_cast<double>(batch.size());
  if (batch.kind() == MeasurementKind::kRankOne) {
    const Matrix proj = u.transpose() * batch.vectors();
    const Vector c = rank_one_residuals(batch, proj, radius);
    return c.squaredNorm() / (2.0 * m);
  }
  const Matrix uu = u * u.transpose();
  double sq = 0.0;
  for (Index i = 0; i < batch.size(); ++i) {
    const double r = batch.measure(i, uu) - batch.responses()(i);
    sq += r * r;
  }
  return sq / (2.0 * m);
}

Matrix update_direction(const MeasurementBatch& batch, const Matrix& u, double radius) {
  check_iterate(batch, u, "update_direction");
  reject_gaussian_radius(batch, radius);
  if (batch.kind() == MeasurementKind::kRankOne) {
    const Matrix& x = batch.vectors();
    const Matrix proj = u.transpose() * x;
    const Vector c = rank_one_residuals(batch, proj, radius);
    Matrix out = x * (c.asDiagonal() * proj.transpose());
    out /= static_cast<double>(batch.size());
    return out;
  }
  return gaussian_statistic(batch, u * u.transpose(), nullptr) * u;
}

Matrix loss_gradient(const MeasurementBatch& batch, const Matrix& u, double radius) {
  check_iterate(batch, u, "loss_gradient");
  if (batch.kind() == MeasurementKind::kRankOne) return 2.0 * update_direction(batch, u, radius);
  reject_gaussian_radius(batch, radius);
  const Matrix d = gaussian_statistic(batch, u * u.transpose(), nullptr);
  return (d + d.transpose()) * u;
}

IterateState sgd_step(const IterateState& state, const MeasurementBatch& batch, double eta, double threshold,
                      double radius) {
  if (!state.u.allFinite()) throw DomainError("sgd_step: iterate is not finite");
  IterateState next;
  next.u = state.u - eta * update_direction(batch, state.u, radius);
  next.step = state.step + 1;
  next.rng_cursor = state.rng_cursor + 1;
  if (leaves_ball(next.u, threshold)) {
    Trajectory partial;
    partial.final_state = state;
    throw DivergenceError("iterate left the divergence ball at step " + std::to_string(next.step), partial,
                          next.step);
  }
  return next;
}

double shrinkage_factor(const Matrix& u, double tau, double eta) {
  const double denom = 1.0 - eta * (u.squaredNorm() - tau);
  if (!(denom > 0.0)) {
    throw DomainError("shrinkage denominator 1 - eta (||U||_F^2 - tau) = " + std::to_string(denom) + " is not positive");
  }
  return 1.0 / denom;
}

BatchStatistic projected_batch_statistic(const Matrix& residual, Index m, Engine& engine) {
  const Index d = residual.rows();
  boost::random::chi_squared_distribution<double> chi2(static_cast<double>(m));
  const double s = chi2(engine);
  Matrix noise = standard_normal_matrix(engine, d, residual.cols());
  BatchStatistic out;
  const double w = residual.norm();
  const double md = static_cast<double>(m);
  if (!(w > 0.0)) {
    out.d_mat = Matrix::Zero(d, residual.cols());
    return out;
  }
  const Matrix dir = residual / w;
  noise -= inner(noise, dir) * dir;
  out.d_mat = (w / md) * (s * dir + std::sqrt(s) * noise);
  out.loss = w * w * s / (2.0 * md);
  return out;
}

BatchStatistic streamed_batch_statistic(const Matrix& uu, const Matrix& signal, Index m, std::uint64_t seed) {
  const Index d = uu.rows();
  Matrix acc = Matrix::Zero(d, d);
  double sq = 0.0;
  for_each_gaussian_measurement(d, m, seed, [&](Index, const Matrix& a) {
    const double r = inner(a, uu) - inner(a, signal);
    acc.noalias() += r * a;
    sq += r * r;
  });
  const double md = static_cast<double>(m);
  acc /= md;
  return {acc, sq / (2.0 * md)};
}

double resolve_truncation_radius(const OptimizerConfig& config, const GroundTruthModel& model,
                                 const EnvironmentDistribution& dist, std::uint64_t seed) {
  if (!config.truncation.enabled) return kInf;
  if (config.truncation.radius_mode == RadiusMode::kFixed) return config.truncation.radius;
  const SeedStream root = SeedStream(seed).child("truncation-radius");
  Engine engine = root.child("environment").engine();
  const EnvironmentCoefficients env = dist.sample(engine);
  const MeasurementBatch batch = generate_rank_one_batch(model, env, config.batch_size, root.child("batch").key());
  const RipEstimate est = estimate_rip_delta(batch, 2 * (model.r1() + model.r2()), 50, root.child("rip").key());
  const double radius = std::log(1.0 / est.delta_hat);
  if (!(radius > 0.0)) {
    throw ConfigError("log(1/delta) truncation radius is not positive (rank-one delta estimate " +
                      std::to_string(est.delta_hat) + "); use a fixed radius");
  }
  return radius;
}

namespace {

struct RunContext {
  const GroundTruthModel& model;
  const OptimizerConfig& config;
  Trajectory traj;
  double threshold = kInf;
};

[[noreturn]] void diverge(RunContext& ctx, const IterateState& last, Index step, const std::string& why) {
  ctx.traj.final_state = last;
  throw DivergenceError("diverged at step " + std::to_string(step) + ": " + why, std::move(ctx.traj), step);
}

void push_record(RunContext& ctx, const Matrix& u, Index t, const std::string& env_id, double loss) {
  MetricRecord rec = compute_metrics(u, ctx.model);
  rec.t = t;
  rec.env_id = env_id;
  rec.loss = loss;
  ctx.traj.records.push_back(std::move(rec));
  if (ctx.config.record_iterates) ctx.traj.iterates.push_back(u);
}

std::string run_digest(const OptimizerConfig& config, const GroundTruthModel& model, const std::string& data,
                       std::uint64_t seed) {
  std::ostringstream os;
  os << describe(config) << "|d=" << model.d() << ";r1=" << model.r1() << ";r2=" << model.r2() << "|" << data
     << "|seed=" << seed;
  return digest_text(os.str());
}

Trajectory run_online(const GroundTruthModel& model, const EnvironmentDistribution& dist, const OptimizerConfig& config,
                      std::uint64_t seed) {
  config.validate();
  if (dist.r2() != model.r2()) throw DimensionError("environment distribution r2 differs from model r2");
  const Index steps = config.resolved_steps();
  const Index m = config.batch_size;
  const bool rank_one = config.measurement_kind == MeasurementKind::kRankOne;
  RunContext ctx{model, config, {}, 0.0};
  ctx.threshold = config.divergence_threshold > 0.0
                      ? config.divergence_threshold
                      : default_divergence_threshold(model.r1(), dist.sup_abs_diagonal());
  ctx.traj.config_digest = run_digest(config, model, dist.describe(), seed);

  const SeedStream root(seed);
  const double radius = rank_one ? resolve_truncation_radius(config, model, dist, root.child("radius").key()) : kInf;
  IterateState state = init_iterate(config, model, root.child("init").key());
  const Matrix x_star = model.invariant_signal();
  const SeedStream env_stream = root.child("environment");
  const SeedStream batch_stream = root.child("batch");

  for (Index t = 0;; ++t) {
    const SeedStream env_key = env_stream.child(static_cast<std::uint64_t>(t));
    Engine env_engine = env_key.engine();
    EnvironmentCoefficients env = dist.sample(env_engine);
    env.env_id = environment_label(env_key.key());
    const std::uint64_t batch_seed = batch_stream.child(static_cast<std::uint64_t>(t)).key();
    const Matrix& u = state.u;

    double loss = 0.0;
    Matrix direction;
    double tau = 0.0;
    if (rank_one) {
      const MeasurementBatch batch = generate_rank_one_batch(model, env, m, batch_seed);
      loss = least_squares_loss(batch, u, radius);
      if (t < steps) {
        direction = update_direction(batch, u, radius);
        if (config.shrinkage.enabled) {
          const Vector& y = batch.responses();
          switch (config.shrinkage.tau_mode) {
            case TauMode::kOracleTrace: tau = total_signal(model, env).trace(); break;
            case TauMode::kOracleOperator: tau = operator_norm(total_signal(model, env)); break;
            case TauMode::kMeanResponse: tau = y.mean(); break;
            case TauMode::kRmsResponse: tau = std::sqrt(y.squaredNorm() / (3.0 * static_cast<double>(m))); break;
          }
        }
      }
    } else {
      const Matrix signal = x_star + spurious_matrix(model, env);
      const Matrix uu = u * u.transpose();
      BatchStatistic stat;
      if (config.sampler == GaussianSampler::kProjected) {
        Engine engine = SeedStream(batch_seed).engine();
        stat = projected_batch_statistic(uu - signal, m, engine);
      } else {
        stat = streamed_batch_statistic(uu, signal, m, batch_seed);
      }
      loss = stat.loss;
      if (t < steps) direction = stat.d_mat * u;
    }

    push_record(ctx, u, t, env.env_id, loss);
    if (t == steps) break;
    if (config.record_iterates) ctx.traj.sigmas.push_back(env.sigma);

    Matrix next = u - config.eta * direction;
    if (config.shrinkage.enabled) {
      try {
        next *= shrinkage_factor(u, tau, config.eta);
      } catch (const DomainError& e) {
        diverge(ctx, state, t + 1, e.what());
      }
    }
    if (leaves_ball(next, ctx.threshold)) diverge(ctx, state, t + 1, "iterate left the divergence ball");
    state.u = std::move(next);
    state.step = t + 1;
    state.rng_cursor = static_cast<std::uint64_t>(t + 1);
  }
  ctx.traj.final_state = std::move(state);
  return std::move(ctx.traj);
}

}  // namespace

Trajectory run_hetero_sgd(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                          const OptimizerConfig& config, std::uint64_t seed) {
  return run_online(model, dist, config, seed);
}

Trajectory run_quadratic_sgd(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                             const OptimizerConfig& config, std::uint64_t seed) {
  if (config.measurement_kind != MeasurementKind::kRankOne) {
    throw ConfigError("quadratic variant requires rank-one measurements");
  }
  if (!config.truncation.enabled) throw ConfigError("quadratic variant requires truncation");
  if (!config.shrinkage.enabled) throw ConfigError("quadratic variant requires shrinkage");
  return run_online(model, dist, config, seed);
}

Trajectory run_pooled_gd(const GroundTruthModel& model, const std::vector<EnvironmentCoefficients>& envs,
                         const OptimizerConfig& config, std::uint64_t seed) {
  config.validate();
  if (envs.empty()) throw ConfigError("pooled gradient descent needs at least one environment");
  if (config.shrinkage.enabled || config.truncation.enabled) {
    throw ConfigError("pooled gradient descent does not support truncation or shrinkage");
  }
  double m1 = 0.0;
  std::ostringstream data;
  data.precision(17);
  data << "pooled";
  std::vector<Matrix> signals;
  for (const auto& e : envs) {
    if (e.sigma.rows() != model.r2() || e.sigma.cols() != model.r2()) {
      throw DimensionError("pooled gradient descent: environment sigma is not r2 x r2");
    }
    if (e.sigma.size() > 0) m1 = std::max(m1, e.sigma.diagonal().cwiseAbs().maxCoeff());
    for (Index k = 0; k < e.sigma.size(); ++k) data << "," << e.sigma.data()[k];
    signals.push_back(total_signal(model, e));
  }

  const Index d = model.d();
  const Index n = config.pooled_samples > 0 ? config.pooled_samples : config.batch_size;
  const Index steps = config.resolved_steps();
  RunContext ctx{model, config, {}, 0.0};
  ctx.threshold = config.divergence_threshold > 0.0 ? config.divergence_threshold
                                                    : default_divergence_threshold(model.r1(), m1);
  ctx.traj.config_digest = run_digest(config, model, data.str(), seed);

  const SeedStream root(seed);
  Engine assign_engine = root.child("pooled-environments").engine();
  boost::random::uniform_int_distribution<std::size_t> pick(0, envs.size() - 1);
  std::vector<std::size_t> env_of(static_cast<std::size_t>(n));
  for (auto& e : env_of) e = pick(assign_engine);

  const bool rank_one = config.measurement_kind == MeasurementKind::kRankOne;
  const std::uint64_t data_seed = root.child("pooled-batch").key();
  Vector y(n);
  // Gaussian: one row per sample holding the column-major entries of A_i. Rank-one: d x n vectors.
  Matrix design;
  if (rank_one) {
    Engine engine = SeedStream(data_seed).child("rank-one").engine();
    design = standard_normal_matrix(engine, d, n);
    for (Index i = 0; i < n; ++i) {
      const auto x = design.col(i);
      y(i) = x.dot(signals[env_of[static_cast<std::size_t>(i)]] * x);
    }
  } else {
    design.resize(n, d * d);
    for_each_gaussian_measurement(d, n, data_seed, [&](Index i, const Matrix& a) {
      design.row(i) = Eigen::Map<const Eigen::RowVectorXd>(a.data(), d * d);
      y(i) = inner(a, signals[env_of[static_cast<std::size_t>(i)]]);
    });
  }

  IterateState state = init_iterate(config, model, root.child("init").key());
  const double nd = static_cast<double>(n);
  for (Index t = 0;; ++t) {
    const Matrix& u = state.u;
    Vector r;
    Matrix direction;
    if (rank_one) {
      const Matrix proj = u.transpose() * design;
      r = proj.colwise().squaredNorm().transpose() - y;
      if (t < steps) direction = design * (r.asDiagonal() * proj.transpose()) / nd;
    } else {
      const Matrix uu = u * u.transpose();
      r = design * Eigen::Map<const Vector>(uu.data(), d * d) - y;
      if (t < steps) {
        const Vector dvec = design.transpose() * r / nd;
        direction = Eigen::Map<const Matrix>(dvec.data(), d, d) * u;
      }
    }
    push_record(ctx, u, t, "pooled", r.squaredNorm() / (2.0 * nd));
    if (t == steps) break;
    Matrix next = u - config.eta * direction;
    if (leaves_ball(next, ctx.threshold)) diverge(ctx, state, t + 1, "iterate left the divergence ball");
    state.u = std::move(next);
    state.step = t + 1;
    state.rng_cursor = static_cast<std::uint64_t>(t + 1);
  }
  ctx.traj.final_state = std::move(state);
  return std::move(ctx.traj);
}

}  // namespace hetsense
