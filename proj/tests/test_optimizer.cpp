#include "hetsense/dynamics.hpp"
#include "hetsense/optimizer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace hetsense;

namespace {

struct Fixture {
  GroundTruthModel model = make_ground_truth(6, 1, 1, 21);
  EnvironmentCoefficients env{Matrix::Constant(1, 1, 2.0), "e"};
};

// Central differences of the loss, one entry at a time.
Matrix numeric_gradient(const MeasurementBatch& b, const Matrix& u, double radius, double h = 1e-6) {
  Matrix g(u.rows(), u.cols());
  for (Index i = 0; i < u.rows(); ++i) {
    for (Index j = 0; j < u.cols(); ++j) {
      Matrix up = u, dn = u;
      up(i, j) += h;
      dn(i, j) -= h;
      g(i, j) = (least_squares_loss(b, up, radius) - least_squares_loss(b, dn, radius)) / (2.0 * h);
    }
  }
  return g;
}

double rel(const Matrix& a, const Matrix& b) { return (a - b).norm() / std::max(1e-300, b.norm()); }

Matrix random_iterate(Index d, Index k, std::uint64_t seed, double scale) {
  Engine e = SeedStream(seed).engine();
  return scale * standard_normal_matrix(e, d, k);
}

}  // namespace

TEST(Gradient, GaussianMatchesFiniteDifferences) {
  Fixture f;
  const auto batch = generate_gaussian_batch(f.model, f.env, 60, 1);
  const Matrix u = random_iterate(6, 6, 2, 0.4);
  EXPECT_LT(rel(loss_gradient(batch, u), numeric_gradient(batch, u, std::numeric_limits<double>::infinity())), 1e-5);
}

TEST(Gradient, RankOneMatchesFiniteDifferences) {
  Fixture f;
  const auto batch = generate_rank_one_batch(f.model, f.env, 80, 3);
  const Matrix u = random_iterate(6, 3, 4, 0.4);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_LT(rel(loss_gradient(batch, u, inf), numeric_gradient(batch, u, inf)), 1e-5);
}

TEST(Gradient, TruncatedRankOneMatchesFiniteDifferences) {
  Fixture f;
  const auto batch = generate_rank_one_batch(f.model, f.env, 200, 5);
  const Matrix u = random_iterate(6, 6, 6, 0.3);
  // Pick a radius that truncates a sizable share but sits away from every ||u^T x_i||^2.
  const Matrix proj = u.transpose() * batch.vectors();
  std::vector<double> norms;
  for (Index i = 0; i < proj.cols(); ++i) norms.push_back(proj.col(i).squaredNorm());
  std::sort(norms.begin(), norms.end());
  double radius = 0.0, gap = 0.0;
  for (std::size_t i = 100; i + 1 < 180; ++i) {
    if (norms[i + 1] - norms[i] > gap) {
      gap = norms[i + 1] - norms[i];
      radius = 0.5 * (norms[i] + norms[i + 1]);
    }
  }
  const double full = least_squares_loss(batch, u);
  const double truncated = least_squares_loss(batch, u, radius);
  EXPECT_LT(truncated, full);
  EXPECT_LT(rel(loss_gradient(batch, u, radius), numeric_gradient(batch, u, radius, 1e-7)), 1e-5);
}

TEST(Gradient, GaussianRejectsFiniteRadius) {
  Fixture f;
  const auto batch = generate_gaussian_batch(f.model, f.env, 5, 1);
  EXPECT_THROW(loss_gradient(batch, Matrix::Identity(6, 6), 3.0), ConfigError);
}

TEST(UpdateDirection, MatchesExplicitSum) {
  Fixture f;
  const auto batch = generate_gaussian_batch(f.model, f.env, 40, 7);
  const Matrix u = random_iterate(6, 6, 8, 0.5);
  const Matrix uu = u * u.transpose();
  Matrix acc = Matrix::Zero(6, 6);
  for (Index i = 0; i < batch.size(); ++i) {
    const double r = (batch.matrix(i).array() * uu.array()).sum() - batch.responses()(i);
    acc += r * batch.matrix(i) * u;
  }
  EXPECT_LT(rel(update_direction(batch, u), acc / 40.0), 1e-12);
}

TEST(UpdateDirection, IsHalfTheGradientForSymmetricMeasurements) {
  Fixture f;
  const auto sym = generate_gaussian_batch(f.model, f.env, 30, 9).symmetrized();
  const Matrix u = random_iterate(6, 6, 10, 0.5);
  EXPECT_LT(rel(2.0 * update_direction(sym, u), loss_gradient(sym, u)), 1e-12);
  const auto r1 = generate_rank_one_batch(f.model, f.env, 30, 9);
  EXPECT_LT(rel(2.0 * update_direction(r1, u), loss_gradient(r1, u)), 1e-12);
}

TEST(SgdStep, AppliesTheUpdateAndDetectsDivergence) {
  Fixture f;
  const auto batch = generate_gaussian_batch(f.model, f.env, 30, 11);
  IterateState s{random_iterate(6, 6, 12, 0.5), 4, 4};
  const IterateState next = sgd_step(s, batch, 0.05);
  EXPECT_LT(rel(next.u, s.u - 0.05 * update_direction(batch, s.u)), 1e-14);
  EXPECT_EQ(next.step, 5);
  EXPECT_THROW(sgd_step(s, batch, 0.05, 1e-3), DivergenceError);
}

TEST(BatchStatistic, StreamedEqualsMaterializedSum) {
  Fixture f;
  const Matrix u = random_iterate(6, 6, 13, 0.5);
  const Matrix signal = total_signal(f.model, f.env);
  const auto batch = generate_gaussian_batch(f.model, f.env, 100, 14);
  const auto stat = streamed_batch_statistic(u * u.transpose(), signal, 100, 14);
  EXPECT_LT(rel(stat.d_mat * u, update_direction(batch, u)), 1e-12);
  EXPECT_NEAR(stat.loss, least_squares_loss(batch, u), 1e-12 * stat.loss);
}

TEST(BatchStatistic, ProjectedLawMatchesExplicitMoments) {
  // (1/m) sum <A_i, W> A_i has mean W, variance 2 w^2/m along W and w^2/m
  // along any unit direction orthogonal to W; the loss has mean w^2/2.
  const Index d = 4, m = 50;
  Engine e = SeedStream(15).engine();
  Matrix w = standard_normal_matrix(e, d, d);
  w = (w + w.transpose()).eval();
  Matrix b = standard_normal_matrix(e, d, d);
  b -= inner(b, w) / w.squaredNorm() * w;
  b /= b.norm();
  const double wn = w.norm();
  const int n = 20000;
  double s_par = 0, s_par2 = 0, s_perp = 0, s_perp2 = 0, s_loss = 0;
  Matrix mean = Matrix::Zero(d, d);
  for (int k = 0; k < n; ++k) {
    const auto st = projected_batch_statistic(w, m, e);
    const double par = inner(st.d_mat, w) / wn, perp = inner(st.d_mat, b);
    s_par += par;
    s_par2 += par * par;
    s_perp += perp;
    s_perp2 += perp * perp;
    s_loss += st.loss;
    mean += st.d_mat;
  }
  mean /= n;
  const double var_par = s_par2 / n - std::pow(s_par / n, 2);
  const double var_perp = s_perp2 / n - std::pow(s_perp / n, 2);
  EXPECT_LT((mean - w).norm() / wn, 0.02);
  EXPECT_NEAR(var_par, 2.0 * wn * wn / m, 0.05 * 2.0 * wn * wn / m);
  EXPECT_NEAR(var_perp, wn * wn / m, 0.05 * wn * wn / m);
  EXPECT_NEAR(s_loss / n, wn * wn / 2.0, 0.02 * wn * wn / 2.0);

  // The explicit sum reproduces the same second moments.
  double t_perp2 = 0;
  const int n2 = 2000;
  for (int k = 0; k < n2; ++k) {
    const auto st = streamed_batch_statistic(w, Matrix::Zero(d, d), m, SeedStream(99).child(k).key());
    t_perp2 += std::pow(inner(st.d_mat, b), 2);
  }
  EXPECT_NEAR(t_perp2 / n2, wn * wn / m, 0.15 * wn * wn / m);
}

TEST(Shrinkage, FactorAndDomain) {
  const Matrix u = Matrix::Identity(3, 3);
  EXPECT_DOUBLE_EQ(shrinkage_factor(u, 1.0, 0.1), 1.0 / (1.0 - 0.1 * 2.0));
  EXPECT_THROW(shrinkage_factor(u, 1.0, 0.5), DomainError);
}

TEST(Defaults, StepsAndThreshold) {
  EXPECT_EQ(default_steps(1e-3, 0.1), static_cast<Index>(std::ceil(10.0 * std::log(1000.0) / 0.1)));
  EXPECT_DOUBLE_EQ(default_divergence_threshold(1, 10.0), 10.0 * std::sqrt(11.0));
  OptimizerConfig c;
  EXPECT_EQ(c.resolved_steps(), default_steps(1e-3, 0.1));
}

TEST(Config, ValidationRejectsBadValues) {
  OptimizerConfig c;
  c.eta = -0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c.eta = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c.steps = 10;
  EXPECT_NO_THROW(c.validate());
  c = OptimizerConfig{};
  c.alpha = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = OptimizerConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Init, OverparamAndExactShapes) {
  const auto model = make_ground_truth(64, 1, 2, 3);
  OptimizerConfig c;
  const auto over = init_iterate(c, model, 1);
  EXPECT_EQ(over.u, 1e-3 * Matrix::Identity(64, 64));
  c.parameterization = Parameterization::kExact;
  c.alpha = 0.5;
  const auto exact = init_iterate(c, model, 1);
  EXPECT_EQ(exact.u.rows(), 64);
  EXPECT_EQ(exact.u.cols(), 3);
  const double sd = std::sqrt(exact.u.squaredNorm() / 192.0);
  EXPECT_NEAR(sd, 0.5 / std::pow(64.0, 0.25), 0.2 * 0.5 / std::pow(64.0, 0.25));
}

TEST(HeteroRunner, DeterministicAndSeedSensitive) {
  const auto model = make_ground_truth(10, 1, 1, 5);
  const auto dist = EnvironmentDistribution::uniform_diagonal(3.0, 1);
  OptimizerConfig c;
  c.batch_size = 500;
  c.steps = 40;
  const auto a = run_hetero_sgd(model, dist, c, 7);
  const auto b = run_hetero_sgd(model, dist, c, 7);
  const auto other = run_hetero_sgd(model, dist, c, 8);
  ASSERT_EQ(a.records.size(), 41u);
  for (std::size_t t = 0; t < a.records.size(); ++t) {
    EXPECT_EQ(a.records[t].loss, b.records[t].loss);
    EXPECT_EQ(a.records[t].env_id, b.records[t].env_id);
  }
  EXPECT_EQ(a.final_state.u, b.final_state.u);
  EXPECT_NE(a.records.back().loss, other.records.back().loss);
  EXPECT_EQ(a.config_digest, b.config_digest);
}

TEST(HeteroRunner, ExplicitSamplerReplaysWithSgdStep) {
  const auto model = make_ground_truth(5, 1, 1, 6);
  const auto dist = EnvironmentDistribution::uniform_diagonal(2.0, 1);
  OptimizerConfig c;
  c.batch_size = 70;
  c.steps = 6;
  c.sampler = GaussianSampler::kExplicit;
  c.record_iterates = true;
  const auto traj = run_hetero_sgd(model, dist, c, 3);
  ASSERT_EQ(traj.iterates.size(), 7u);
  ASSERT_EQ(traj.sigmas.size(), 6u);
  const SeedStream root(3);
  IterateState s{traj.iterates[0], 0, 0};
  for (Index t = 0; t < 6; ++t) {
    const EnvironmentCoefficients env{traj.sigmas[static_cast<std::size_t>(t)], "e"};
    const auto batch =
        generate_gaussian_batch(model, env, 70, root.child("batch").child(static_cast<std::uint64_t>(t)).key());
    s = sgd_step(s, batch, c.eta);
    EXPECT_LT(rel(s.u, traj.iterates[static_cast<std::size_t>(t + 1)]), 1e-12);
    EXPECT_NEAR(traj.records[static_cast<std::size_t>(t)].recovery_error,
                recovery_error_dense(traj.iterates[static_cast<std::size_t>(t)], model), 1e-12);
  }
}

TEST(HeteroRunner, HomogeneousEnvironmentsKeepTheSpuriousSignal) {
  const auto model = make_orthogonal_ground_truth(10, 1, 1, 5);
  const auto dist = EnvironmentDistribution::uniform_diagonal(0.0, 1);
  OptimizerConfig c;
  c.batch_size = 20000;
  c.eta = 0.2;
  const auto traj = run_hetero_sgd(model, dist, c, 1);
  EXPECT_NEAR(traj.records.back().q_fro, 1.0, 0.1);
  EXPECT_NEAR(traj.records.back().sigma1_r, 1.0, 0.1);
}

TEST(HeteroRunner, DivergenceCarriesPartialTrajectory) {
  const auto model = make_ground_truth(8, 1, 1, 5);
  const auto dist = EnvironmentDistribution::uniform_diagonal(30.0, 1);
  OptimizerConfig c;
  c.batch_size = 200;
  c.eta = 2.0;
  c.steps = 100;
  try {
    run_hetero_sgd(model, dist, c, 1);
    FAIL() << "expected divergence";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 1);
    EXPECT_EQ(static_cast<Index>(e.partial().records.size()), e.step());
    for (const auto& r : e.partial().records) EXPECT_TRUE(std::isfinite(r.recovery_error));
  }
}

TEST(QuadraticRunner, RequiresItsComponents) {
  const auto model = make_ground_truth(8, 1, 1, 5);
  const auto dist = EnvironmentDistribution::uniform_diagonal(1.0, 1);
  OptimizerConfig c;
  c.steps = 2;
  EXPECT_THROW(run_quadratic_sgd(model, dist, c, 1), ConfigError);
  c.measurement_kind = MeasurementKind::kRankOne;
  c.truncation.enabled = true;
  EXPECT_THROW(run_quadratic_sgd(model, dist, c, 1), ConfigError);
  c.shrinkage.enabled = true;
  c.batch_size = 100;
  EXPECT_EQ(run_quadratic_sgd(model, dist, c, 1).records.size(), 3u);
}

TEST(QuadraticRunner, LogInverseDeltaRadiusIsRejectedForRankOne) {
  const auto model = make_ground_truth(8, 1, 1, 5);
  const auto dist = EnvironmentDistribution::uniform_diagonal(1.0, 1);
  OptimizerConfig c;
  c.steps = 2;
  c.batch_size = 200;
  c.measurement_kind = MeasurementKind::kRankOne;
  c.truncation.enabled = true;
  c.truncation.radius_mode = RadiusMode::kLogInvDelta;
  c.shrinkage.enabled = true;
  EXPECT_THROW(run_quadratic_sgd(model, dist, c, 1), ConfigError);
}

TEST(PooledRunner, ConvergesToTheMeanSignal) {
  const auto model = make_orthogonal_ground_truth(8, 1, 1, 3);
  std::vector<EnvironmentCoefficients> envs{{Matrix::Constant(1, 1, 0.5), "a"}, {Matrix::Constant(1, 1, 1.5), "b"}};
  OptimizerConfig c;
  c.batch_size = 4000;
  c.eta = 0.2;
  const auto traj = run_pooled_gd(model, envs, c, 1);
  EXPECT_EQ(traj.records.back().env_id, "pooled");
  EXPECT_NEAR(traj.records.back().q_fro, 1.0, 0.1);
  EXPECT_NEAR(traj.records.back().recovery_error, 1.0, 0.15);
}
