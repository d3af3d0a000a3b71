#pragma once

#include "hetsense/common.hpp"
#include "hetsense/sensing.hpp"
#include "hetsense/trajectory.hpp"

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

namespace hetsense {

enum class Parameterization { kOverparam, kExact };

enum class RadiusMode { kFixed, kLogInvDelta };

/// How the shrinkage target tau is obtained.
///  kOracleTrace     tr(X* + X^(e)) from ground truth
///  kOracleOperator  ||X* + X^(e)||_2 from ground truth
///  kMeanResponse    mean of the batch responses (an unbiased estimate of the trace)
///  kRmsResponse     sqrt(sum y_i^2 / (3m))
enum class TauMode { kOracleTrace, kOracleOperator, kMeanResponse, kRmsResponse };

/// Gaussian batch gradient source for the heterogeneous runner.
///  kProjected  draws the batch statistic (1/m) sum <A_i, W> A_i directly from its
///              exact law given W (a chi-square and one d x d Gaussian matrix)
///  kExplicit   generates and streams all m measurement matrices
enum class GaussianSampler { kProjected, kExplicit };

inline constexpr double kDefaultTruncationRadius = 8.0;

struct TruncationConfig {
  bool enabled = false;
  RadiusMode radius_mode = RadiusMode::kFixed;
  double radius = kDefaultTruncationRadius;
};

struct ShrinkageConfig {
  bool enabled = false;
  TauMode tau_mode = TauMode::kOracleTrace;
};

struct OptimizerConfig {
  double eta = 0.1;
  double alpha = 1e-3;
  // 0 selects ceil(10 log(1/alpha) / eta).
  Index steps = 0;
  Index batch_size = 8000;
  Parameterization parameterization = Parameterization::kOverparam;
  MeasurementKind measurement_kind = MeasurementKind::kGaussian;
  TruncationConfig truncation;
  ShrinkageConfig shrinkage;
  // 0 selects 10 sqrt(r1 (1 + M1)).
  double divergence_threshold = 0.0;
  GaussianSampler sampler = GaussianSampler::kProjected;
  // Size of the pooled dataset; 0 selects batch_size.
  Index pooled_samples = 0;
  // Keep U_0..U_T and Sigma_0..Sigma_{T-1} in the trajectory.
  bool record_iterates = false;

  /// Throws ConfigError on invalid values.
  void validate() const;
  Index resolved_steps() const;
};

Index default_steps(double alpha, double eta);
double default_divergence_threshold(Index r1, double m1);

/// Canonical text of every field that influences a run.
std::string describe(const OptimizerConfig& config);

/// FNV-1a digest, as 16 hex digits.
std::string digest_text(const std::string& text);

/// Overparameterized: alpha I_d. Exact: d x (r1 + r2) with N(0, alpha^2 / sqrt(d)) entries.
IterateState init_iterate(const OptimizerConfig& config, const GroundTruthModel& model, std::uint64_t seed);

/// (1/2m) sum_i (y_i - <A_i, u u^T>)^2, restricted to ||u^T x_i||^2 <= radius for rank-one batches.
double least_squares_loss(const MeasurementBatch& batch, const Matrix& u,
                          double radius = std::numeric_limits<double>::infinity());

/// Exact gradient of least_squares_loss: (1/m) sum_i r_i (A_i + A_i^T) u.
Matrix loss_gradient(const MeasurementBatch& batch, const Matrix& u,
                     double radius = std::numeric_limits<double>::infinity());

/// The update direction of the online algorithm: (1/m) sum_i r_i A_i u, with
/// r_i = <A_i, u u^T> - y_i. Equals half the gradient for symmetric A_i.
Matrix update_direction(const MeasurementBatch& batch, const Matrix& u,
                        double radius = std::numeric_limits<double>::infinity());

/// u - eta * update_direction. Throws DivergenceError (empty partial) when the
/// result is non-finite or ||u||_2 exceeds `threshold`.
IterateState sgd_step(const IterateState& state, const MeasurementBatch& batch, double eta,
                      double threshold = std::numeric_limits<double>::infinity(),
                      double radius = std::numeric_limits<double>::infinity());

/// 1 / (1 - eta (||u||_F^2 - tau)); throws DomainError when the denominator is not positive.
double shrinkage_factor(const Matrix& u, double tau, double eta);

/// One draw of the Gaussian batch statistic for residual W = u u^T - signal:
/// the d x d matrix D = (1/m) sum <A_i, W> A_i and the loss (1/2m) sum <A_i, W>^2.
struct BatchStatistic {
  Matrix d_mat;
  double loss = 0.0;
};
BatchStatistic projected_batch_statistic(const Matrix& residual, Index m, Engine& engine);
BatchStatistic streamed_batch_statistic(const Matrix& uu, const Matrix& signal, Index m, std::uint64_t seed);

/// Truncation radius in effect for a rank-one run.
double resolve_truncation_radius(const OptimizerConfig& config, const GroundTruthModel& model,
                                 const EnvironmentDistribution& dist, std::uint64_t seed);

/// Algorithm with a fresh batch from a freshly drawn environment at every step.
Trajectory run_hetero_sgd(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                          const OptimizerConfig& config, std::uint64_t seed);

/// Full-batch gradient descent on one pooled dataset whose samples draw their
/// environment uniformly from `envs`.
Trajectory run_pooled_gd(const GroundTruthModel& model, const std::vector<EnvironmentCoefficients>& envs,
                         const OptimizerConfig& config, std::uint64_t seed);

/// Rank-one measurements with truncated gradient and the shrinkage rescaling.
Trajectory run_quadratic_sgd(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                             const OptimizerConfig& config, std::uint64_t seed);

}  // namespace hetsense
