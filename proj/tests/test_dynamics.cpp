#include "hetsense/dynamics.hpp"
#include "hetsense/optimizer.hpp"
#include "hetsense/rip.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hetsense;

namespace {

double rel(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

// Composite Simpson rule on [lo, hi].
template <typename F>
double simpson(F f, double lo, double hi, int n = 2000) {
  const double h = (hi - lo) / n;
  double s = f(lo) + f(hi);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
  return s * h / 3.0;
}

}  // namespace

TEST(Decomposition, RecomposesTheIterate) {
  const auto model = make_ground_truth(20, 2, 1, 3);
  Engine e = SeedStream(1).engine();
  for (Index k : {20, 3}) {
    const Matrix u = standard_normal_matrix(e, 20, k);
    const auto parts = decompose(u, model);
    EXPECT_LT((parts.recompose(model) - u).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_EQ(parts.r_mat.rows(), k);
    EXPECT_EQ(parts.r_mat.cols(), 2);
  }
}

TEST(Decomposition, ResidualIsOrthogonalToBothSignals) {
  const auto model = make_orthogonal_ground_truth(15, 1, 2, 4);
  Engine e = SeedStream(2).engine();
  const Matrix u = standard_normal_matrix(e, 15, 15);
  const auto parts = decompose(u, model);
  EXPECT_LT((model.u_star().columns().transpose() * parts.e_mat).norm(), 1e-12);
  EXPECT_LT((model.v_star().columns().transpose() * parts.e_mat).norm(), 1e-12);
  const auto g = gram_deviation(u, model);
  EXPECT_LT(g.deviation, 1e-10);
}

TEST(Decomposition, GramDeviationWithinBound) {
  const auto model = make_ground_truth(30, 1, 1, 6);
  ASSERT_GT(model.epsilon1(), 0.0);
  Engine e = SeedStream(3).engine();
  for (int k = 0; k < 20; ++k) {
    const Matrix u = standard_normal_matrix(e, 30, 30);
    const auto g = gram_deviation(u, model);
    EXPECT_LE(g.deviation, g.bound);
  }
}

TEST(Metrics, GramAndDenseRecoveryErrorAgree) {
  const auto model = make_ground_truth(25, 2, 1, 7);
  Engine e = SeedStream(4).engine();
  const Matrix u = standard_normal_matrix(e, 25, 3);
  EXPECT_NEAR(recovery_error(u, model), recovery_error_dense(u, model), 1e-10);
  const auto rec = compute_metrics(model.u_star().columns(), model);
  EXPECT_NEAR(rec.recovery_error, 0.0, 1e-12);
  EXPECT_NEAR(rec.sigma1_r, 1.0, 1e-12);
  EXPECT_NEAR(rec.sigma_min_r, 1.0, 1e-12);
  EXPECT_NEAR(rec.q_fro, (model.u_star().columns().transpose() * model.v_star().columns()).norm(), 1e-12);
}

TEST(Metrics, SpuriousNormOfOverparamInitIsAlpha) {
  const auto model = make_ground_truth(40, 1, 1, 2);
  const auto rec = compute_metrics(1e-3 * Matrix::Identity(40, 40), model);
  EXPECT_NEAR(rec.q_fro, 1e-3, 1e-15);
  EXPECT_NEAR(rec.sigma1_r, 1e-3, 1e-15);
  EXPECT_NEAR(rec.recovery_error, std::sqrt(1.0 - 2e-6 + 40e-12), 1e-12);
}

TEST(NextStep, PredictedPartsMatchAnSgdStep) {
  const Index d = 20;
  const auto model = make_ground_truth(d, 1, 1, 8);
  const auto dist = EnvironmentDistribution::uniform_diagonal(5.0, 1);
  Engine e = SeedStream(5).engine();
  IterateState s{0.3 * standard_normal_matrix(e, d, d), 0, 0};
  for (int t = 0; t < 5; ++t) {
    const auto env = sample_environment(dist, 100 + t);
    const auto batch = generate_gaussian_batch(model, env, 400, 200 + t);
    const Matrix w = s.u * s.u.transpose() - total_signal(model, env);
    const auto pred = predict_next_parts(s.u, model, env.sigma, rip_error_operator(batch, w), 0.05);
    s = sgd_step(s, batch, 0.05);
    const auto actual = decompose(s.u, model);
    EXPECT_LT(rel(pred.r_mat, actual.r_mat), 1e-9);
    EXPECT_LT(rel(pred.q_mat, actual.q_mat), 1e-9);
    EXPECT_LT(rel(pred.e_mat, actual.e_mat), 1e-9);
  }
}

TEST(Sequences, EarlyGrowthIsGeometric) {
  const double alpha = 1e-3, eta = 0.1;
  const auto cr = cr_sequence(alpha, eta, 2000);
  EXPECT_NEAR(cr[10], alpha * std::pow(1.0 + eta, 10), 1e-5 * cr[10]);
  for (std::size_t t = 1; t < cr.size(); ++t) EXPECT_GE(cr[t], cr[t - 1]);
  EXPECT_NEAR(cr.back(), 1.0, 1e-12);
}

TEST(Sequences, BarEnvelopesWithinOneSixth) {
  for (double eta : {0.1, 0.3}) {
    const auto check = check_bar_envelopes(1e-3, eta);
    EXPECT_TRUE(check.ordered) << eta;
    EXPECT_TRUE(check.within_sixth) << eta;
    EXPECT_LE(check.max_upper_ratio, 7.0 / 6.0);
    EXPECT_GE(check.min_lower_ratio, 5.0 / 6.0);
    EXPECT_GT(check.t1, 0);
  }
}

TEST(Sequences, PhaseBoundariesAndCalibrationLine) {
  const double alpha = 1e-3, eta = 0.1;
  const auto cr = cr_sequence(alpha, eta, 1000);
  const auto pb = phase_boundaries(cr, eta, 0.5);
  const auto t1 = static_cast<std::size_t>(pb.t1);
  EXPECT_GT(cr[t1], 1.0 / 3.0 - eta);
  EXPECT_LT(cr[t1], 1.0 / 3.0);
  for (std::size_t t = 0; t < t1; ++t) EXPECT_FALSE(cr[t] > 1.0 / 3.0 - eta && cr[t] < 1.0 / 3.0);
  EXPECT_EQ(pb.t2, pb.t1 + static_cast<Index>(std::ceil(80.0 * std::log(2.0))));
  EXPECT_THROW(phase_boundaries(cr_sequence(alpha, eta, 5), eta, 0.5), BoundaryNotFoundError);

  const auto line = calibration_line(alpha, 11.0, 0.01, 1, 1, cr);
  for (std::size_t t = 0; t < cr.size(); ++t) {
    EXPECT_DOUBLE_EQ(line[t], std::max(alpha, 40.0 * 11.0 * 0.01 * std::sqrt(2.0) * cr[t]));
  }
}

TEST(Supermartingale, ClosedFormsMatchQuadrature) {
  const double eta = 0.01;
  const double m = 10.0;
  const auto unif = EnvironmentDistribution::uniform_diagonal(m, 1);
  const double quad = simpson([&](double s) { return std::pow(1.0 + eta * s + 2.0 * eta, 2.0 / 3.0); }, 1.0 - m,
                              1.0 + m) / (2.0 * m);
  EXPECT_NEAR(supermartingale_expectation(unif, eta, 0), quad, 1e-10);
  const auto tp = EnvironmentDistribution::two_point(2000.0, 1);
  const double eta2 = 7e-6;
  const double expected =
      0.5 * (std::pow(1.0 + 2002.0 * eta2, 2.0 / 3.0) + std::pow(1.0 - 1998.0 * eta2, 2.0 / 3.0));
  EXPECT_NEAR(supermartingale_expectation(tp, eta2, 0), expected, 1e-15);
}

TEST(Supermartingale, PassesInsideWindowAndFailsAtZeroStep) {
  const auto tp = EnvironmentDistribution::two_point(2000.0, 1);
  const auto inside = check_supermartingale(tp, 7e-6, 100000, 1);
  EXPECT_TRUE(inside.pass);
  EXPECT_LT(inside.exact, 1.0);
  EXPECT_NEAR(inside.estimate, inside.exact, 4.0 * inside.std_error + 1e-12);
  const auto zero = check_supermartingale(tp, 0.0, 1000, 1);
  EXPECT_FALSE(zero.pass);
  EXPECT_DOUBLE_EQ(zero.estimate, 1.0);
  EXPECT_THROW(check_supermartingale(tp, 1e-3, 1000, 1), DomainError);
}

TEST(Supermartingale, MonteCarloAgreesWithExactForUniform) {
  const auto unif = EnvironmentDistribution::uniform_diagonal(3.0, 2);
  const auto rep = check_supermartingale(unif, 0.05, 50000, 3);
  EXPECT_NEAR(rep.estimate, rep.exact, 4.0 * rep.std_error + 1e-12);
  // Mean-one uniform law: Jensen gives a value above 1 only through the 2 eta drift.
  EXPECT_GT(rep.exact, 1.0);
  EXPECT_FALSE(rep.pass);
}

TEST(Controller, DeterministicLawFollowsClosedForm) {
  // Constant coefficient c: q_t = max((1 + eta c + 2 eta)^t q_0, L_t) until absorption.
  const double c = 1.0, eta = 0.01, p = 0.5, alpha = 1e-3;
  const auto dist = EnvironmentDistribution::custom_table({{1.0, Matrix::Constant(1, 1, c)}});
  const Index steps = 300;
  const std::vector<double> line(static_cast<std::size_t>(steps + 1), alpha);
  Engine e = SeedStream(1).engine();
  const auto proc = simulate_controller_paths(dist, eta, line, p, steps, e);
  const double level = std::pow(p, -1.5) * alpha;
  const double g = 1.0 + eta * c + 2.0 * eta;
  const Index absorb_t = static_cast<Index>(std::ceil(std::log(level / alpha) / std::log(g)));
  ASSERT_TRUE(proc.absorbed[0]);
  for (Index t = 0; t <= absorb_t; ++t) EXPECT_NEAR(proc.paths(0, t), alpha * std::pow(g, t), 1e-12);
  for (Index t = absorb_t; t <= steps; ++t) EXPECT_EQ(proc.paths(0, t), proc.paths(0, absorb_t));
}

TEST(Controller, ShrinkingLawReflectsAtTheLine) {
  const auto dist = EnvironmentDistribution::custom_table({{1.0, Matrix::Constant(1, 1, -10.0)}});
  const std::vector<double> line(51, 2e-3);
  Engine e = SeedStream(2).engine();
  const auto proc = simulate_controller_paths(dist, 0.01, line, 0.1, 50, e);
  EXPECT_FALSE(proc.absorbed[0]);
  for (Index t = 1; t <= 50; ++t) EXPECT_DOUBLE_EQ(proc.paths(0, t), 2e-3);
}

TEST(Controller, AbsorptionFractionWithinBoundInWindow) {
  const auto tp = EnvironmentDistribution::two_point(2000.0, 1);
  const std::vector<double> line(201, 1e-3);
  const auto stats = simulate_controller(tp, 7e-6, line, 0.1, 1, 200, 4, 2000);
  EXPECT_TRUE(stats.within_bound);
  EXPECT_TRUE(stats.reflection_respected);
  EXPECT_TRUE(stats.warning.empty());
  EXPECT_DOUBLE_EQ(stats.bound, 20.0);
  const auto outside = simulate_controller(tp, 0.0, line, 0.1, 1, 200, 4, 10);
  EXPECT_FALSE(outside.warning.empty());
}

TEST(PhasePredicates, EmptyForTrivialTrajectory) {
  Trajectory t;
  const auto model = make_ground_truth(10, 1, 1, 1);
  const auto aux = make_auxiliary_sequences(1e-3, 0.1, 800, 2.0, 0.01, 1, 1, 0.5);
  EXPECT_TRUE(check_phase_predicates(t, aux, model, {}).empty());
}

TEST(PhasePredicates, HomogeneousLargeBatchRunGrowsInPhaseOne) {
  const auto model = make_orthogonal_ground_truth(10, 1, 1, 2);
  const auto dist = EnvironmentDistribution::uniform_diagonal(0.5, 1);
  OptimizerConfig c;
  c.batch_size = 200000;
  const auto traj = run_hetero_sgd(model, dist, c, 3);
  const auto aux = make_auxiliary_sequences(c.alpha, c.eta, c.resolved_steps(), 1.5, 0.01, 1, 1, 0.5);
  const auto rep = check_phase_predicates(traj, aux, model, {});
  EXPECT_TRUE(rep.t1_reached);
  EXPECT_GT(rep.growth.fraction(), 0.9);
  EXPECT_GT(rep.envelope.checked, 0);
}
