#include "hetsense/dynamics.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>
#include <tuple>

namespace hetsense {

namespace {

void check_rows(const Matrix& u, const GroundTruthModel& model, const char* what) {
  if (u.rows() != model.d()) {
    throw DimensionError(std::string(what) + ": iterate has " + std::to_string(u.rows()) + " rows, model d = " +
                         std::to_string(model.d()));
  }
}

// (singular value max, singular value min) of a small matrix.
std::pair<double, double> extreme_singular_values(const Matrix& m) {
  if (m.size() == 0) return {0.0, 0.0};
  Eigen::JacobiSVD<Matrix> svd(m);
  const Vector& s = svd.singularValues();
  return {s.maxCoeff(), s.minCoeff()};
}

double gamma_term(double a, double b, double s) { return std::pow(a + b * s, 2.0 / 3.0); }

}  // namespace

Matrix Decomposition::recompose(const GroundTruthModel& model) const {
  Matrix u = model.u_star().columns() * r_mat.transpose() + e_mat;
  if (model.r2() > 0) u += model.v_star().columns() * q_mat.transpose();
  return u;
}

Decomposition decompose(const Matrix& u, const GroundTruthModel& model) {
  check_rows(u, model, "decompose");
  const Matrix& us = model.u_star().columns();
  const Matrix& vs = model.v_star().columns();
  Decomposition out;
  out.r_mat = u.transpose() * us;
  out.q_mat = u.transpose() * vs;
  out.e_mat = u - us * out.r_mat.transpose();
  if (model.r2() > 0) out.e_mat -= vs * out.q_mat.transpose();
  return out;
}

double recovery_error(const Matrix& u, const GroundTruthModel& model) {
  check_rows(u, model, "recovery_error");
  if (u.cols() >= u.rows()) return recovery_error_dense(u, model);
  const Matrix gram = u.transpose() * u;
  const Matrix cross = u.transpose() * model.u_star().columns();
  const double scale = gram.squaredNorm() + static_cast<double>(model.r1());
  const double sq = scale - 2.0 * cross.squaredNorm();
  // Cancellation near U U^T = X*; the dense product keeps full relative accuracy there.
  if (sq < 1e-6 * scale) return recovery_error_dense(u, model);
  return std::sqrt(sq);
}

double recovery_error_dense(const Matrix& u, const GroundTruthModel& model) {
  check_rows(u, model, "recovery_error_dense");
  return (u * u.transpose() - model.invariant_signal()).norm();
}

MetricRecord compute_metrics(const Matrix& u, const GroundTruthModel& model) {
  const Decomposition parts = decompose(u, model);
  MetricRecord rec;
  std::tie(rec.sigma1_r, rec.sigma_min_r) = extreme_singular_values(parts.r_mat);
  rec.q_fro = parts.q_mat.norm();
  rec.e_op = operator_norm(parts.e_mat);
  rec.e_fro2 = parts.e_mat.squaredNorm();
  rec.recovery_error = recovery_error(u, model);
  return rec;
}

GramDeviation gram_deviation(const Matrix& u, const GroundTruthModel& model) {
  const Decomposition p = decompose(u, model);
  const Matrix recon = p.r_mat * p.r_mat.transpose() + p.q_mat * p.q_mat.transpose() +
                       p.e_mat.transpose() * p.e_mat;
  const double un = operator_norm(u);
  return {operator_norm(u.transpose() * u - recon), 6.0 * model.epsilon1() * un * un};
}

double phase_error_level(const Matrix& u, const GroundTruthModel& model) {
  const Decomposition p = decompose(u, model);
  const double q = operator_norm(p.q_mat);
  const double e = operator_norm(p.e_mat);
  return q * q + e * e + 4.0 * operator_norm(u.transpose() * p.e_mat);
}

Decomposition predict_next_parts(const Matrix& u, const GroundTruthModel& model, const Matrix& sigma,
                                 const Matrix& rip_error, double eta) {
  check_rows(u, model, "predict_next_parts");
  const Decomposition p = decompose(u, model);
  const Matrix& us = model.u_star().columns();
  const Matrix& vs = model.v_star().columns();
  const Index k = u.cols();
  const Matrix gram = u.transpose() * u;
  const Matrix ident = Matrix::Identity(k, k);
  const Matrix err_t = rip_error.transpose();
  const Matrix spurious = model.r2() > 0 ? Matrix(vs * sigma * vs.transpose()) : Matrix::Zero(u.rows(), u.rows());

  Decomposition next;
  next.r_mat = (ident - eta * gram + eta * ident) * p.r_mat + eta * u.transpose() * spurious * us -
               eta * u.transpose() * err_t * us;
  next.q_mat = p.q_mat - eta * gram * p.q_mat + eta * p.q_mat * sigma + eta * p.r_mat * (us.transpose() * vs) -
               eta * u.transpose() * err_t * vs;

  Matrix id_res = Matrix::Identity(u.rows(), u.rows()) - us * us.transpose();
  if (model.r2() > 0) id_res -= vs * vs.transpose();
  next.e_mat = p.e_mat * (ident - eta * gram) + eta * id_res * (us * us.transpose() + spurious) * u -
               eta * id_res * rip_error * u;
  return next;
}

std::vector<double> cr_sequence(double alpha, double eta, Index steps) {
  std::vector<double> out(static_cast<std::size_t>(steps + 1));
  out[0] = alpha;
  for (Index t = 0; t < steps; ++t) {
    const double r = out[static_cast<std::size_t>(t)];
    out[static_cast<std::size_t>(t + 1)] = (1.0 - eta * r * r + eta) * r;
  }
  return out;
}

BarSequences bar_sequences(double alpha, double eta, Index steps, double correction_scale) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw DomainError("bar_sequences: alpha must lie in (0, 1)");
  const double c = correction_scale * eta / 32.0 / std::log(1.0 / alpha);
  BarSequences out;
  out.upper.resize(static_cast<std::size_t>(steps + 1));
  out.lower.resize(static_cast<std::size_t>(steps + 1));
  out.upper[0] = out.lower[0] = alpha;
  for (std::size_t t = 0; t < static_cast<std::size_t>(steps); ++t) {
    const double hi = out.upper[t], lo = out.lower[t];
    out.upper[t + 1] = (1.0 - eta * hi * hi + eta) * hi + c * hi;
    out.lower[t + 1] = (1.0 - eta * lo * lo + eta) * lo - c * hi;
  }
  return out;
}

EnvelopeCheck check_bar_envelopes(double alpha, double eta) {
  // T1 is at most (4/eta) log(1/alpha); a generous horizon finds it.
  const Index horizon = static_cast<Index>(std::ceil(8.0 / eta * std::log(1.0 / alpha))) + 10;
  const std::vector<double> cr = cr_sequence(alpha, eta, horizon);
  const PhaseBoundaries pb = phase_boundaries(cr, eta, 0.5);
  const BarSequences bars = bar_sequences(alpha, eta, pb.t1);
  EnvelopeCheck out;
  out.t1 = pb.t1;
  out.max_upper_ratio = 0.0;
  out.min_lower_ratio = std::numeric_limits<double>::infinity();
  out.ordered = true;
  out.within_sixth = true;
  for (std::size_t t = 0; t <= static_cast<std::size_t>(pb.t1); ++t) {
    const double up = bars.upper[t] / cr[t];
    const double lo = bars.lower[t] / cr[t];
    out.max_upper_ratio = std::max(out.max_upper_ratio, up);
    out.min_lower_ratio = std::min(out.min_lower_ratio, lo);
    if (bars.lower[t] > cr[t] || cr[t] > bars.upper[t]) out.ordered = false;
    if (up > 7.0 / 6.0 || lo < 5.0 / 6.0) out.within_sixth = false;
  }
  return out;
}

std::vector<double> calibration_line(double alpha, double m1, double delta, Index r1, Index r2,
                                     const std::vector<double>& cr) {
  const double slope = 40.0 * m1 * delta * std::sqrt(static_cast<double>(r1 + r2));
  std::vector<double> out(cr.size());
  for (std::size_t t = 0; t < cr.size(); ++t) out[t] = std::max(alpha, slope * cr[t]);
  return out;
}

PhaseBoundaries phase_boundaries(const std::vector<double>& cr, double eta, double g_target) {
  if (!(g_target > 0.0 && g_target < 1.0)) throw DomainError("phase_boundaries: g_target must lie in (0, 1)");
  const double lo = 1.0 / 3.0 - eta, hi = 1.0 / 3.0;
  for (std::size_t t = 0; t < cr.size(); ++t) {
    if (cr[t] > lo && cr[t] < hi) {
      PhaseBoundaries out;
      out.t1 = static_cast<Index>(t);
      out.t2 = out.t1 + static_cast<Index>(std::ceil(8.0 / eta * std::log(1.0 / g_target)));
      return out;
    }
  }
  throw BoundaryNotFoundError("phase_boundaries: sequence never enters (1/3 - eta, 1/3) within " +
                              std::to_string(cr.size()) + " entries");
}

AuxiliarySequences make_auxiliary_sequences(double alpha, double eta, Index steps, double m1, double delta,
                                            Index r1, Index r2, double g_target) {
  AuxiliarySequences aux;
  aux.alpha = alpha;
  aux.eta = eta;
  aux.cr = cr_sequence(alpha, eta, steps);
  BarSequences bars = bar_sequences(alpha, eta, steps);
  aux.cr_upper = std::move(bars.upper);
  aux.cr_lower = std::move(bars.lower);
  aux.cal_line = calibration_line(alpha, m1, delta, r1, r2, aux.cr);
  try {
    const PhaseBoundaries pb = phase_boundaries(aux.cr, eta, g_target);
    aux.t1 = pb.t1;
    aux.t2 = pb.t2;
  } catch (const BoundaryNotFoundError&) {
    // Small step sizes never leave phase 1 within the horizon.
    aux.t1 = steps + 1;
    aux.t2 = steps + 1;
  }
  return aux;
}

ControllerProcess simulate_controller_paths(const EnvironmentDistribution& dist, double eta,
                                            const std::vector<double>& cal_line, double p, Index steps,
                                            Engine& engine) {
  if (static_cast<Index>(cal_line.size()) < steps + 1) {
    throw DimensionError("simulate_controller: calibration line shorter than steps + 1");
  }
  if (!(p > 0.0 && p <= 1.0)) throw DomainError("simulate_controller: p must lie in (0, 1]");
  const Index r2 = dist.r2();
  ControllerProcess proc;
  proc.p = p;
  proc.absorb_level_factor = std::pow(p, -1.5) * std::pow(static_cast<double>(r2), 1.5);
  proc.paths = Matrix::Zero(r2, steps + 1);
  proc.absorbed.assign(static_cast<std::size_t>(r2), false);
  for (Index i = 0; i < r2; ++i) proc.paths(i, 0) = cal_line[0];
  for (Index t = 0; t < steps; ++t) {
    const Matrix sigma = dist.sample(engine).sigma;
    for (Index i = 0; i < r2; ++i) {
      const double q = proc.paths(i, t);
      const bool flag = proc.absorbed[static_cast<std::size_t>(i)];
      if (!flag && q >= proc.absorb_level_factor * cal_line[static_cast<std::size_t>(t)]) {
        proc.absorbed[static_cast<std::size_t>(i)] = true;
      }
      if (proc.absorbed[static_cast<std::size_t>(i)]) {
        proc.paths(i, t + 1) = q;
      } else {
        const double grown = (1.0 + eta * sigma(i, i) + 2.0 * eta) * q;
        proc.paths(i, t + 1) = std::max(grown, cal_line[static_cast<std::size_t>(t + 1)]);
      }
    }
  }
  for (Index i = 0; i < r2; ++i) {
    if (proc.paths(i, steps) >= proc.absorb_level_factor * cal_line[static_cast<std::size_t>(steps)]) {
      proc.absorbed[static_cast<std::size_t>(i)] = true;
    }
  }
  return proc;
}

ControllerStats simulate_controller(const EnvironmentDistribution& dist, double eta,
                                    const std::vector<double>& cal_line, double p, Index r2, Index steps,
                                    std::uint64_t seed, Index replicates) {
  if (r2 != dist.r2()) throw DimensionError("simulate_controller: r2 differs from the distribution");
  if (replicates < 1) throw ConfigError("simulate_controller: replicates must be >= 1");
  const SeedStream root = SeedStream(seed).child("controller");
  ControllerStats stats;
  stats.replicates = replicates;
  stats.steps = steps;
  stats.p = p;
  stats.bound = static_cast<double>(steps) * p;

  try {
    const SupermartingaleReport sm = check_supermartingale(dist, eta, 20000, root.child("window").key());
    if (!sm.pass) {
      stats.warning = "step size outside the supermartingale window: E[(1 + eta s + 2 eta)^(2/3)] = " +
                      std::to_string(sm.estimate);
    }
  } catch (const DomainError& e) {
    stats.warning = e.what();
  }

  for (Index rep = 0; rep < replicates; ++rep) {
    Engine engine = root.child(static_cast<std::uint64_t>(rep)).engine();
    const ControllerProcess proc = simulate_controller_paths(dist, eta, cal_line, p, steps, engine);
    bool any = false;
    for (Index i = 0; i < r2; ++i) {
      if (proc.absorbed[static_cast<std::size_t>(i)]) {
        any = true;
        continue;
      }
      for (Index t = 0; t <= steps; ++t) {
        if (proc.paths(i, t) < cal_line[static_cast<std::size_t>(t)]) stats.reflection_respected = false;
      }
    }
    if (any) ++stats.absorbed_replicates;
  }
  stats.absorption_fraction = static_cast<double>(stats.absorbed_replicates) / static_cast<double>(replicates);
  stats.within_bound = stats.absorption_fraction <= stats.bound;
  return stats;
}

double supermartingale_expectation(const EnvironmentDistribution& dist, double eta, Index i) {
  const double a = 1.0 + 2.0 * eta, b = eta;
  if (const auto* u = std::get_if<UniformDiagonal>(&dist.kind())) {
    const double m = u->half_width;
    if (m == 0.0 || b == 0.0) return gamma_term(a, b, 1.0);
    const double hi = std::pow(a + b * (1.0 + m), 5.0 / 3.0);
    const double lo = std::pow(a + b * (1.0 - m), 5.0 / 3.0);
    return (hi - lo) / (5.0 / 3.0 * b * 2.0 * m);
  }
  if (const auto* t = std::get_if<TwoPoint>(&dist.kind())) {
    return 0.5 * (gamma_term(a, b, t->magnitude) + gamma_term(a, b, -t->magnitude));
  }
  double acc = 0.0;
  for (const auto& e : std::get<CustomTable>(dist.kind()).entries) {
    if (e.probability > 0.0) acc += e.probability * gamma_term(a, b, e.sigma(i, i));
  }
  return acc;
}

SupermartingaleReport check_supermartingale(const EnvironmentDistribution& dist, double eta, Index n_samples,
                                            std::uint64_t seed) {
  if (n_samples < 2) throw ConfigError("check_supermartingale: n_samples must be >= 2");
  if (dist.r2() < 1) throw DimensionError("check_supermartingale: distribution has no diagonal coefficients");
  const double a = 1.0 + 2.0 * eta, b = eta;
  const Index r2 = dist.r2();

  double min_support = std::numeric_limits<double>::infinity();
  if (const auto* u = std::get_if<UniformDiagonal>(&dist.kind())) {
    min_support = a + b * (1.0 - u->half_width);
  } else if (const auto* t = std::get_if<TwoPoint>(&dist.kind())) {
    min_support = a - b * t->magnitude;
  } else {
    for (const auto& e : std::get<CustomTable>(dist.kind()).entries) {
      if (e.probability <= 0.0) continue;
      for (Index i = 0; i < r2; ++i) min_support = std::min(min_support, a + b * e.sigma(i, i));
    }
  }
  if (!(min_support > 0.0)) {
    throw DomainError("check_supermartingale: support of 1 + eta s + 2 eta reaches " + std::to_string(min_support) +
                      "; the 2/3 power is undefined");
  }

  // Control variate s - E[s] removes the linear part of the integrand.
  const Index n = n_samples;
  std::vector<Vector> f(static_cast<std::size_t>(r2), Vector(n)), s(static_cast<std::size_t>(r2), Vector(n));
  const SeedStream root = SeedStream(seed).child("supermartingale");
  Engine engine = root.engine();
  for (Index k = 0; k < n; ++k) {
    const Matrix sigma = dist.sample(engine).sigma;
    for (Index i = 0; i < r2; ++i) {
      s[static_cast<std::size_t>(i)](k) = sigma(i, i);
      f[static_cast<std::size_t>(i)](k) = gamma_term(a, b, sigma(i, i));
    }
  }

  SupermartingaleReport rep;
  rep.min_support = min_support;
  rep.estimate = -std::numeric_limits<double>::infinity();
  rep.pass = true;
  for (Index i = 0; i < r2; ++i) {
    const Vector& fi = f[static_cast<std::size_t>(i)];
    const Vector& si = s[static_cast<std::size_t>(i)];
    const double mu = dist.diagonal_moments(i).mean;
    const double fbar = fi.mean(), sbar = si.mean();
    const Vector fc = fi.array() - fbar;
    const Vector sc = si.array() - sbar;
    const double ss = sc.squaredNorm();
    const double beta = ss > 0.0 ? fc.dot(sc) / ss : 0.0;
    const double est = fbar - beta * (sbar - mu);
    const Vector resid = fc - beta * sc;
    const double se = std::sqrt(resid.squaredNorm() / static_cast<double>(n - 1) / static_cast<double>(n));
    const bool ok = est + 3.0 * se < 1.0;
    if (est > rep.estimate) {
      rep.estimate = est;
      rep.std_error = se;
      rep.exact = supermartingale_expectation(dist, eta, i);
    }
    rep.pass = rep.pass && ok;
  }
  return rep;
}

PhaseReport check_phase_predicates(const Trajectory& trajectory, const AuxiliarySequences& aux,
                                   const GroundTruthModel& model, const PhaseTolerances& tol) {
  PhaseReport rep;
  const auto& recs = trajectory.records;
  if (recs.size() <= 1) return rep;
  const double eta = aux.eta;
  const Index last = static_cast<Index>(recs.size()) - 1;
  const auto at = [](const auto& v, Index t) { return v[static_cast<std::size_t>(t)]; };

  const Index phase1_end = std::min(aux.t1, last);
  for (Index t = 0; t < phase1_end; ++t) {
    ++rep.growth.checked;
    if (at(recs, t + 1).sigma1_r > (1.0 + eta / 3.0) * at(recs, t).sigma1_r) ++rep.growth.held;
    ++rep.min_growth.checked;
    if (at(recs, t + 1).sigma_min_r > (1.0 + eta / 3.0) * at(recs, t).sigma_min_r) ++rep.min_growth.held;
  }
  const Index env_end = std::min({aux.t1, last, static_cast<Index>(aux.cr_upper.size()) - 1});
  for (Index t = 0; t <= env_end; ++t) {
    const auto& r = at(recs, t);
    const double lo = at(aux.cr_lower, t) * (1.0 - tol.envelope_slack) - tol.absolute;
    const double hi = at(aux.cr_upper, t) * (1.0 + tol.envelope_slack) + tol.absolute;
    ++rep.envelope.checked;
    if (lo <= r.sigma_min_r && r.sigma_min_r <= r.sigma1_r + tol.absolute && r.sigma1_r <= hi) ++rep.envelope.held;
  }
  if (model.r2() > 0) {
    const double factor = std::pow(tol.p, -1.5) * std::pow(static_cast<double>(model.r2()), 2.0);
    const Index sp_end = std::min({aux.t2, last, static_cast<Index>(aux.cal_line.size()) - 1});
    for (Index t = 0; t <= sp_end; ++t) {
      ++rep.spurious.checked;
      if (at(recs, t).q_fro <= factor * at(aux.cal_line, t) + tol.absolute) ++rep.spurious.held;
    }
  }
  if (aux.t1 <= last) {
    rep.t1_reached = true;
    const auto& r = at(recs, aux.t1);
    const auto in = [](double x) { return x > 0.25 && x < 7.0 / 18.0; };
    rep.t1_window = in(r.sigma1_r) && in(r.sigma_min_r);
  }
  if (aux.t2 <= last) {
    rep.t2_reached = true;
    const auto& r = at(recs, aux.t2);
    rep.t2_near_one = std::abs(r.sigma1_r - 1.0) <= tol.final_slack && std::abs(r.sigma_min_r - 1.0) <= tol.final_slack;
  }
  return rep;
}

}  // namespace hetsense
