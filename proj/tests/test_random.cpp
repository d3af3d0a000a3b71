#include "hetsense/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace hetsense;

TEST(SeedStream, SameLabelsGiveSameKeys) {
  EXPECT_EQ(SeedStream(7).child("batch").child(3).key(), SeedStream(7).child("batch").child(3).key());
  EXPECT_NE(SeedStream(7).child("batch").key(), SeedStream(8).child("batch").key());
  EXPECT_NE(SeedStream(7).child("batch").key(), SeedStream(7).child("init").key());
  EXPECT_NE(SeedStream(7).child(0).key(), SeedStream(7).child(1).key());
}

TEST(SeedStream, ChildKeysDoNotCollideOverManyIndices) {
  std::set<std::uint64_t> keys;
  const SeedStream root(1);
  for (std::uint64_t t = 0; t < 20000; ++t) keys.insert(root.child(t).key());
  EXPECT_EQ(keys.size(), 20000u);
}

TEST(SeedStream, EnginesAreIndependentOfOtherConsumers) {
  const SeedStream root(42);
  Engine a = root.child("x").engine();
  const double first = standard_normal_matrix(a, 1, 1)(0, 0);
  Engine other = root.child("y").engine();
  standard_normal_matrix(other, 50, 50);
  Engine b = root.child("x").engine();
  EXPECT_EQ(first, standard_normal_matrix(b, 1, 1)(0, 0));
}

TEST(Mix64, IsInjectiveOnSmallRange) {
  std::set<std::uint64_t> out;
  for (std::uint64_t x = 0; x < 4096; ++x) out.insert(mix64(x));
  EXPECT_EQ(out.size(), 4096u);
}

TEST(StandardNormal, MomentsMatch) {
  Engine e = SeedStream(3).engine();
  const Matrix z = standard_normal_matrix(e, 400, 500);
  const double n = static_cast<double>(z.size());
  const double mean = z.sum() / n;
  const double var = (z.array() - mean).square().sum() / (n - 1);
  const double kurt = (z.array() - mean).pow(4).sum() / n / (var * var);
  EXPECT_NEAR(mean, 0.0, 4.0 / std::sqrt(n));
  EXPECT_NEAR(var, 1.0, 4.0 * std::sqrt(2.0 / n));
  EXPECT_NEAR(kurt, 3.0, 0.05);
}

TEST(Norms, OperatorAndNuclearAgreeWithSingularValues) {
  Engine e = SeedStream(5).engine();
  const Matrix a = standard_normal_matrix(e, 7, 4);
  Eigen::JacobiSVD<Matrix> svd(a);
  EXPECT_NEAR(operator_norm(a), svd.singularValues()(0), 1e-10);
  EXPECT_NEAR(nuclear_norm(a), svd.singularValues().sum(), 1e-10);
  // Rank one: all three norms coincide.
  const Vector x = standard_normal_matrix(e, 6, 1);
  const Matrix xx = x * x.transpose();
  EXPECT_NEAR(operator_norm(xx), x.squaredNorm(), 1e-10);
  EXPECT_NEAR(nuclear_norm(xx), x.squaredNorm(), 1e-10);
  EXPECT_NEAR(xx.norm(), x.squaredNorm(), 1e-10);
}

TEST(Inner, IsTraceOfProduct) {
  Engine e = SeedStream(9).engine();
  const Matrix a = standard_normal_matrix(e, 5, 5);
  const Matrix b = standard_normal_matrix(e, 5, 5);
  EXPECT_NEAR(inner(a, b), (a.transpose() * b).trace(), 1e-12);
}
