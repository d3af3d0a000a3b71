#pragma once

#include "hetsense/common.hpp"
#include "hetsense/random.hpp"

#include <algorithm>
#include <cstdint>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace hetsense {

/// A d x r matrix with orthonormal columns (r may be 0 for the empty spurious basis).
class OrthonormalBasis {
 public:
  /// Validates orthonormality to `tolerance` in max-entry norm.
  static OrthonormalBasis from_columns(Matrix columns, double tolerance = 1e-10);
  static OrthonormalBasis empty(Index d);

  const Matrix& columns() const { return columns_; }
  Index dim() const { return columns_.rows(); }
  Index rank() const { return columns_.cols(); }

 private:
  explicit OrthonormalBasis(Matrix columns) : columns_(std::move(columns)) {}
  Matrix columns_;
};

/// Q factor of a d x r standard Gaussian matrix, with the sign convention diag(R) > 0.
OrthonormalBasis make_orthonormal_basis(Index d, Index r, std::uint64_t seed);

/// Invariant basis U*, spurious basis V* and the recorded overlap ||U*^T V*||.
class GroundTruthModel {
 public:
  GroundTruthModel(OrthonormalBasis u_star, OrthonormalBasis v_star);

  const OrthonormalBasis& u_star() const { return u_star_; }
  const OrthonormalBasis& v_star() const { return v_star_; }
  Index d() const { return u_star_.dim(); }
  Index r1() const { return u_star_.rank(); }
  Index r2() const { return v_star_.rank(); }
  double epsilon1() const { return epsilon1_; }

  /// X* = U* U*^T.
  Matrix invariant_signal() const;

 private:
  OrthonormalBasis u_star_;
  OrthonormalBasis v_star_;
  double epsilon1_;
};

/// Independent random bases (r2 may be 0).
GroundTruthModel make_ground_truth(Index d, Index r1, Index r2, std::uint64_t seed);

/// Bases split from a single QR factor, so U* is exactly orthogonal to V*.
GroundTruthModel make_orthogonal_ground_truth(Index d, Index r1, Index r2, std::uint64_t seed);

/// One environment draw: the symmetric r2 x r2 coefficient matrix.
struct EnvironmentCoefficients {
  Matrix sigma;
  std::string env_id;
};

struct UniformDiagonal {
  double half_width = 0.0;  // M
};

struct TwoPoint {
  double magnitude = 0.0;  // a
};

struct TableEntry {
  double probability = 0.0;
  Matrix sigma;
};

struct CustomTable {
  std::vector<TableEntry> entries;
};

/// Mean, variance and supremum of |.| of a diagonal coefficient, exact for the law.
struct DiagonalMoments {
  double mean = 0.0;
  double variance = 0.0;
  double sup_abs = 0.0;
};

/// Law of the environment coefficients.
///
/// * uniform-diagonal: each diagonal entry i.i.d. Unif[1-M, 1+M], off-diagonal zero.
/// * two-point: each diagonal entry i.i.d. +a or -a with probability 1/2.
/// * custom-table: finitely many symmetric matrices with given probabilities.
class EnvironmentDistribution {
 public:
  using Kind = std::variant<UniformDiagonal, TwoPoint, CustomTable>;

  EnvironmentDistribution(Kind kind, Index r2);

  static EnvironmentDistribution uniform_diagonal(double half_width, Index r2);
  static EnvironmentDistribution two_point(double magnitude, Index r2);
  static EnvironmentDistribution custom_table(std::vector<TableEntry> entries);

  const Kind& kind() const { return kind_; }
  Index r2() const { return r2_; }

  /// Moments of diagonal coefficient i.
  DiagonalMoments diagonal_moments(Index i) const;

  /// max_i sup |Sigma_ii|, i.e. the smallest admissible M1.
  double sup_abs_diagonal() const;

  EnvironmentCoefficients sample(Engine& engine) const;

  std::string describe() const;

 private:
  Kind kind_;
  Index r2_;
};

/// Opaque environment label derived from a stream key.
std::string environment_label(std::uint64_t key);

EnvironmentCoefficients sample_environment(const EnvironmentDistribution& dist, std::uint64_t seed);

/// X^(e) = V* Sigma V*^T.
Matrix spurious_matrix(const GroundTruthModel& model, const EnvironmentCoefficients& env);

/// X* + X^(e).
Matrix total_signal(const GroundTruthModel& model, const EnvironmentCoefficients& env);

enum class MeasurementKind { kGaussian, kRankOne };

/// m sensing matrices and their noiseless responses for one environment.
///
/// Gaussian batches hold dense d x d matrices. Rank-one batches hold the vectors
/// x_i as the columns of a d x m matrix; x_i x_i^T is never formed unless
/// `dense_matrix` is called explicitly.
class MeasurementBatch {
 public:
  static MeasurementBatch gaussian(std::vector<Matrix> matrices, Vector responses, std::string env_id);
  static MeasurementBatch rank_one(Matrix vectors, Vector responses, std::string env_id);

  /// Builds a batch whose responses are <A_i, signal>.
  static MeasurementBatch gaussian_for_signal(std::vector<Matrix> matrices, const Matrix& signal,
                                              std::string env_id);
  static MeasurementBatch rank_one_for_signal(Matrix vectors, const Matrix& signal, std::string env_id);

  MeasurementKind kind() const { return kind_; }
  Index size() const { return responses_.size(); }
  Index dim() const { return dim_; }
  const Vector& responses() const { return responses_; }
  const std::string& env_id() const { return env_id_; }

  /// Gaussian batches only.
  const Matrix& matrix(Index i) const;
  /// Rank-one batches only: d x m, one vector per column.
  const Matrix& vectors() const;

  /// A_i as a dense matrix for either kind.
  Matrix dense_matrix(Index i) const;

  /// <A_i, m>.
  double measure(Index i, const Matrix& m) const;

  /// Copy with every A_i replaced by (A_i + A_i^T) / 2; responses unchanged.
  MeasurementBatch symmetrized() const;

 private:
  MeasurementKind kind_ = MeasurementKind::kGaussian;
  Index dim_ = 0;
  std::vector<Matrix> matrices_;
  Matrix vectors_;
  Vector responses_;
  std::string env_id_;
};

/// Number of measurements generated from one engine before re-keying.
inline constexpr Index kMeasurementChunk = 64;

/// Invokes fn(i, A_i) for i = 0..m-1 with the same matrices that
/// generate_gaussian_batch(…, m, seed) stores, without materializing the batch.
template <typename Fn>
void for_each_gaussian_measurement(Index d, Index m, std::uint64_t seed, Fn&& fn) {
  const SeedStream root(seed);
  Matrix a(d, d);
  for (Index chunk = 0; chunk * kMeasurementChunk < m; ++chunk) {
    Engine engine = root.child(static_cast<std::uint64_t>(chunk)).engine();
    const Index end = std::min(m, (chunk + 1) * kMeasurementChunk);
    for (Index i = chunk * kMeasurementChunk; i < end; ++i) {
      fill_standard_normal(engine, a);
      fn(i, static_cast<const Matrix&>(a));
    }
  }
}

MeasurementBatch generate_gaussian_batch(const GroundTruthModel& model, const EnvironmentCoefficients& env,
                                         Index m, std::uint64_t seed);

MeasurementBatch generate_rank_one_batch(const GroundTruthModel& model, const EnvironmentCoefficients& env,
                                         Index m, std::uint64_t seed);

/// Checkable form of the structural assumptions on the environment law.
struct AssumptionReport {
  double epsilon1 = 0.0;
  double epsilon2 = 0.0;
  double m1_hat = 0.0;
  double m2_hat = 0.0;
  // Monte-Carlo counterparts of m1_hat / m2_hat over the sampled environments.
  double m1_sampled = 0.0;
  double m2_sampled = 0.0;
  std::pair<double, double> eta_window{0.0, 0.0};
  bool window_nonempty = false;
};

AssumptionReport check_assumptions(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                                   Index n_samples, std::uint64_t seed);

}  // namespace hetsense
