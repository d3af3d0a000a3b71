#include "hetsense/rip.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hetsense;

namespace {

MeasurementBatch small_gaussian_batch(Index d, Index m, std::uint64_t seed) {
  const auto model = make_ground_truth(d, 1, 1, seed);
  const EnvironmentCoefficients env{Matrix::Identity(1, 1), "e"};
  return generate_gaussian_batch(model, env, m, seed + 100);
}

Matrix manual_error_operator(const MeasurementBatch& b, const Matrix& x) {
  Matrix acc = Matrix::Zero(x.rows(), x.cols());
  for (Index i = 0; i < b.size(); ++i) {
    const Matrix a = b.dense_matrix(i);
    acc += (a.array() * x.array()).sum() * a;
  }
  return acc / static_cast<double>(b.size()) - x;
}

}  // namespace

TEST(RipOperators, QuadraticFormAndErrorMatchDirectSums) {
  const auto batch = small_gaussian_batch(6, 120, 1);
  Engine e = SeedStream(2).engine();
  const Matrix x = standard_normal_matrix(e, 6, 6);
  double q = 0.0;
  for (Index i = 0; i < batch.size(); ++i) q += std::pow((batch.matrix(i).array() * x.array()).sum(), 2);
  EXPECT_NEAR(rip_quadratic_form(batch, x), q / 120.0, 1e-10 * q);
  EXPECT_LT((rip_error_operator(batch, x) - manual_error_operator(batch, x)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RipOperators, RankOneErrorOperatorMatchesDenseSum) {
  const auto model = make_ground_truth(7, 1, 1, 3);
  const auto batch = generate_rank_one_batch(model, {Matrix::Identity(1, 1), "e"}, 90, 4);
  Engine e = SeedStream(5).engine();
  Matrix x = standard_normal_matrix(e, 7, 7);
  x = (x + x.transpose()).eval();
  EXPECT_LT((rip_error_operator(batch, x) - manual_error_operator(batch, x)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(RipOperators, GaussianQuadraticFormIsUnbiased) {
  // E[<A, X>^2] = ||X||_F^2 for i.i.d. N(0,1) entries.
  const auto batch = small_gaussian_batch(8, 20000, 7);
  Matrix x = Matrix::Zero(8, 8);
  x(0, 1) = 0.6;
  x(2, 2) = 0.8;
  EXPECT_NEAR(rip_quadratic_form(batch, x), 1.0, 4.0 * std::sqrt(2.0 / 20000));
}

TEST(LowRankSampler, ProducesUnitNormSymmetricLowRank) {
  Engine e = SeedStream(9).engine();
  for (Index r : {1, 2, 3}) {
    const Matrix x = sample_low_rank_symmetric(e, 12, r);
    EXPECT_NEAR(x.norm(), 1.0, 1e-12);
    EXPECT_LT((x - x.transpose()).cwiseAbs().maxCoeff(), 1e-14);
    Eigen::SelfAdjointEigenSolver<Matrix> es(x);
    int nonzero = 0;
    for (Index i = 0; i < 12; ++i) nonzero += std::abs(es.eigenvalues()(i)) > 1e-10 ? 1 : 0;
    EXPECT_LE(nonzero, r);
  }
}

TEST(RipDelta, BoundsIndependentProbesAndShrinksWithM) {
  const Index d = 10, r = 2;
  const auto small = small_gaussian_batch(d, 400, 11);
  const auto large = small_gaussian_batch(d, 6000, 11);
  const auto est_small = estimate_rip_delta(small, r, 100, 1);
  const auto est_large = estimate_rip_delta(large, r, 100, 1);
  EXPECT_GE(est_small.delta_hat, est_small.delta_sampled);
  EXPECT_GT(est_small.delta_hat, est_large.delta_hat);
  EXPECT_EQ(est_large.rank_tested, r);
  EXPECT_EQ(est_large.worst_case_matrix_digest.size(), 16u);

  // Independent probes: the ascent result must dominate |f(X) - 1| on fresh draws.
  Engine e = SeedStream(12345).engine();
  double probe = 0.0;
  for (int k = 0; k < 50; ++k) {
    Matrix g = standard_normal_matrix(e, d, 1);
    Matrix x = g * g.transpose();
    x /= x.norm();
    probe = std::max(probe, std::abs(rip_quadratic_form(large, x) - 1.0));
  }
  EXPECT_GE(est_large.delta_hat, probe);
  // Order sqrt(d r / m) with a modest constant.
  EXPECT_LT(est_large.delta_hat, 6.0 * std::sqrt(static_cast<double>(d * r) / 6000.0));
}

TEST(RipLemmas, RatiosFollowTheirDefinitions) {
  const auto batch = small_gaussian_batch(5, 300, 2);
  Engine e = SeedStream(3).engine();
  const Matrix x = sample_low_rank_symmetric(e, 5, 2);
  const Matrix y = sample_low_rank_symmetric(e, 5, 2);
  const Matrix z = standard_normal_matrix(e, 5, 5);
  const double delta = 0.3;
  const Matrix ex = manual_error_operator(batch, x);
  const double pair = std::abs((ex.array() * y.array()).sum());
  Eigen::JacobiSVD<Matrix> sx(x), sez(ex * z), szz(z);
  const auto ratios = rip_lemma_ratios(batch, delta, x, y, z);
  EXPECT_NEAR(ratios.frobenius_pair, pair / (delta * x.norm() * y.norm()), 1e-9);
  EXPECT_NEAR(ratios.frobenius_apply,
              sez.singularValues()(0) / (delta * x.norm() * szz.singularValues()(0)), 1e-9);
  EXPECT_NEAR(ratios.nuclear_pair, pair / (delta * sx.singularValues().sum() * y.norm()), 1e-9);
  EXPECT_NEAR(ratios.nuclear_apply,
              sez.singularValues()(0) / (delta * sx.singularValues().sum() * szz.singularValues()(0)), 1e-9);
  const auto zero = rip_lemma_ratios(batch, delta, Matrix::Zero(5, 5), y, z);
  EXPECT_EQ(zero.frobenius_pair, 0.0);
  EXPECT_EQ(zero.nuclear_apply, 0.0);
}

TEST(RipLemmas, TinyDeltaIsViolated) {
  const auto batch = small_gaussian_batch(8, 500, 4);
  const auto rep = check_rip_lemma_bounds(batch, 1e-4, 2, 20, 1);
  EXPECT_FALSE(rep.all_pass());
  EXPECT_EQ(rep.checks.size(), 4u);
}

TEST(SubspaceAngle, IdenticalAndOrthogonalBases) {
  const auto model = make_orthogonal_ground_truth(20, 2, 2, 8);
  EXPECT_NEAR(subspace_angle(model.u_star(), model.u_star()), 1.0, 1e-12);
  EXPECT_NEAR(subspace_angle(model.u_star(), model.v_star()), 0.0, 1e-12);
}
