#include "hetsense/rip.hpp"

#include <cmath>
#include <cstdio>
#include <algorithm>
#include <cstring>
#include <limits>

namespace hetsense {

namespace {

void check_operand(const MeasurementBatch& batch, const Matrix& m, const char* what) {
  if (m.rows() != batch.dim() || m.cols() != batch.dim()) {
    throw DimensionError(std::string(what) + ": expected " + std::to_string(batch.dim()) + "x" +
                         std::to_string(batch.dim()) + " operand, got " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()));
  }
}

std::string digest(const Matrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (Index k = 0; k < m.size(); ++k) {
    unsigned char bytes[sizeof(double)];
    const double v = m.data()[k];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// Best rank-r approximation of a symmetric matrix: keep the r eigenvalues of largest magnitude.
Matrix project_rank(const Matrix& s, Index r) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(s);
  const Vector& lam = eig.eigenvalues();
  std::vector<Index> order(static_cast<std::size_t>(lam.size()));
  for (Index i = 0; i < lam.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return std::abs(lam(a)) > std::abs(lam(b)); });
  Matrix out = Matrix::Zero(s.rows(), s.cols());
  for (Index k = 0; k < std::min<Index>(r, lam.size()); ++k) {
    const Index i = order[static_cast<std::size_t>(k)];
    out.noalias() += lam(i) * eig.eigenvectors().col(i) * eig.eigenvectors().col(i).transpose();
  }
  return out;
}

double safe_ratio(double lhs, double rhs) {
  if (lhs == 0.0) return 0.0;
  if (rhs == 0.0) return std::numeric_limits<double>::infinity();
  return lhs / rhs;
}

}  // namespace

double rip_quadratic_form(const MeasurementBatch& batch, const Matrix& m) {
  check_operand(batch, m, "rip_quadratic_form");
  double acc = 0.0;
  for (Index i = 0; i < batch.size(); ++i) {
    const double v = batch.measure(i, m);
    acc += v * v;
  }
  return acc / static_cast<double>(batch.size());
}

Matrix rip_error_operator(const MeasurementBatch& batch, const Matrix& m) {
  check_operand(batch, m, "rip_error_operator");
  const double inv_m = 1.0 / static_cast<double>(batch.size());
  if (batch.kind() == MeasurementKind::kRankOne) {
    const Matrix& x = batch.vectors();
    Vector c(x.cols());
    for (Index i = 0; i < x.cols(); ++i) c(i) = batch.measure(i, m);
    Matrix out = x * (c.asDiagonal() * x.transpose());
    out *= inv_m;
    return out - m;
  }
  Matrix acc = Matrix::Zero(batch.dim(), batch.dim());
  for (Index i = 0; i < batch.size(); ++i) acc += batch.measure(i, m) * batch.matrix(i);
  acc *= inv_m;
  return acc - m;
}

Matrix sample_low_rank_symmetric(Engine& engine, Index d, Index r) {
  const Index wg = (r + 1) / 2;
  const Index wh = r / 2;
  const Matrix g = standard_normal_matrix(engine, d, wg);
  const Matrix h = standard_normal_matrix(engine, d, wh);
  Matrix x = g * g.transpose();
  if (wh > 0) x -= h * h.transpose();
  const double n = x.norm();
  if (n > 0.0) x /= n;
  return x;
}

RipEstimate estimate_rip_delta(const MeasurementBatch& batch, Index r, Index trials, std::uint64_t seed,
                               int ascent_steps) {
  if (trials < 1) throw ConfigError("estimate_rip_delta: trials must be >= 1");
  if (r < 1 || r > batch.dim()) throw DimensionError("estimate_rip_delta: rank out of range");
  const SeedStream root = SeedStream(seed).child("rip-delta");
  RipEstimate est;
  est.rank_tested = r;
  est.trials = trials;

  Matrix worst;
  double worst_dev = -1.0;
  for (Index t = 0; t < trials; ++t) {
    Engine engine = root.child(static_cast<std::uint64_t>(t)).engine();
    Matrix x = sample_low_rank_symmetric(engine, batch.dim(), r);
    const double dev = std::abs(rip_quadratic_form(batch, x) - 1.0);
    if (dev > worst_dev) {
      worst_dev = dev;
      worst = std::move(x);
    }
  }
  est.delta_sampled = worst_dev;

  // Projected power iteration on the shifted operator +/- E + c I over unit rank-r matrices.
  Matrix e = rip_error_operator(batch, worst);
  double f = inner(e, worst);
  for (int step = 0; step < ascent_steps; ++step) {
    const double sign = f >= 0.0 ? 1.0 : -1.0;
    const Matrix sym = 0.5 * (e + e.transpose());
    bool improved = false;
    Matrix best_m, best_e;
    double best_f = f;
    for (double shift : {0.0, std::abs(f), 4.0 * std::abs(f)}) {
      Matrix cand = project_rank(sign * sym + shift * worst, r);
      const double n = cand.norm();
      if (!(n > 0.0)) continue;
      cand /= n;
      Matrix ce = rip_error_operator(batch, cand);
      const double cf = inner(ce, cand);
      if (std::abs(cf) > std::abs(best_f)) {
        best_f = cf;
        best_m = std::move(cand);
        best_e = std::move(ce);
        improved = true;
      }
    }
    if (!improved) break;
    worst = std::move(best_m);
    e = std::move(best_e);
    f = best_f;
  }
  est.delta_hat = std::abs(f);
  est.worst_case_matrix_digest = digest(worst);
  return est;
}

LemmaRatios rip_lemma_ratios(const MeasurementBatch& batch, double delta, const Matrix& x, const Matrix& y,
                             const Matrix& z) {
  check_operand(batch, x, "rip_lemma_ratios");
  check_operand(batch, y, "rip_lemma_ratios");
  if (z.rows() != batch.dim()) throw DimensionError("rip_lemma_ratios: Z must have d rows");
  const Matrix e = rip_error_operator(batch, x);
  const double pair = std::abs(inner(e, y));
  const double apply = operator_norm(e * z);
  const double xf = x.norm(), xn = nuclear_norm(x), yf = y.norm(), zop = operator_norm(z);
  LemmaRatios out;
  out.frobenius_pair = safe_ratio(pair, delta * xf * yf);
  out.frobenius_apply = safe_ratio(apply, delta * xf * zop);
  out.nuclear_pair = safe_ratio(pair, delta * xn * yf);
  out.nuclear_apply = safe_ratio(apply, delta * xn * zop);
  return out;
}

bool LemmaReport::all_pass() const {
  for (const auto& c : checks) {
    if (!c.pass()) return false;
  }
  return true;
}

LemmaReport check_rip_lemma_bounds(const MeasurementBatch& batch, double delta, Index r, Index trials,
                                   std::uint64_t seed) {
  if (trials < 1) throw ConfigError("check_rip_lemma_bounds: trials must be >= 1");
  const Index d = batch.dim();
  const SeedStream root = SeedStream(seed).child("rip-lemmas");
  LemmaReport rep;
  rep.delta = delta;
  rep.checks = {{"frobenius-pair", trials, 0.0, 0},
                {"frobenius-apply", trials, 0.0, 0},
                {"nuclear-pair", trials, 0.0, 0},
                {"nuclear-apply", trials, 0.0, 0}};
  auto record = [](LemmaCheck& c, double ratio) {
    c.max_ratio = std::max(c.max_ratio, ratio);
    if (ratio > 1.0) ++c.violations;
  };
  for (Index t = 0; t < trials; ++t) {
    Engine engine = root.child(static_cast<std::uint64_t>(t)).engine();
    const Matrix x = sample_low_rank_symmetric(engine, d, r);
    const Matrix y = sample_low_rank_symmetric(engine, d, r);
    const Matrix z = standard_normal_matrix(engine, d, d);
    const Matrix g = standard_normal_matrix(engine, d, d);
    const Matrix x_full = 0.5 * (g + g.transpose());

    const LemmaRatios low = rip_lemma_ratios(batch, delta, x, y, z);
    const LemmaRatios full = rip_lemma_ratios(batch, delta, x_full, y, z);
    record(rep.checks[0], low.frobenius_pair);
    record(rep.checks[1], low.frobenius_apply);
    record(rep.checks[2], full.nuclear_pair);
    record(rep.checks[3], full.nuclear_apply);
  }
  return rep;
}

double subspace_angle(const OrthonormalBasis& b1, const OrthonormalBasis& b2) {
  if (b1.dim() != b2.dim()) throw DimensionError("subspace_angle: bases have different ambient dimension");
  if (b1.rank() == 0 || b2.rank() == 0) return 0.0;
  return std::min(1.0, operator_norm(b1.columns().transpose() * b2.columns()));
}

}  // namespace hetsense
