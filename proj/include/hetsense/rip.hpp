#pragma once

#include "hetsense/common.hpp"
#include "hetsense/sensing.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace hetsense {

/// (1/m) sum_i <A_i, M>^2.
double rip_quadratic_form(const MeasurementBatch& batch, const Matrix& m);

/// E(M) = (1/m) sum_i <A_i, M> A_i - M.
Matrix rip_error_operator(const MeasurementBatch& batch, const Matrix& m);

/// Random symmetric test matrix G G^T - H H^T of rank <= r, unit Frobenius norm.
Matrix sample_low_rank_symmetric(Engine& engine, Index d, Index r);

struct RipEstimate {
  double delta_hat = 0.0;
  Index rank_tested = 0;
  Index trials = 0;
  std::string worst_case_matrix_digest;
  // Best value among the random trials alone, before the ascent refinement.
  double delta_sampled = 0.0;
};

/// Randomized lower bound on the RIP constant at rank r, refined by a short
/// projected ascent from the worst sampled matrix.
RipEstimate estimate_rip_delta(const MeasurementBatch& batch, Index r, Index trials, std::uint64_t seed,
                               int ascent_steps = 20);

/// Ratios lhs / rhs of the four error-operator bounds for one choice of X, Y, Z.
/// A ratio above 1 is a violation; 0 / 0 counts as 0.
struct LemmaRatios {
  double frobenius_pair = 0.0;   // |<E(X), Y>| / (delta ||X||_F ||Y||_F)
  double frobenius_apply = 0.0;  // ||E(X) Z|| / (delta ||X||_F ||Z||)
  double nuclear_pair = 0.0;     // |<E(X), Y>| / (delta ||X||_* ||Y||_F)
  double nuclear_apply = 0.0;    // ||E(X) Z|| / (delta ||X||_* ||Z||)
};

LemmaRatios rip_lemma_ratios(const MeasurementBatch& batch, double delta, const Matrix& x, const Matrix& y,
                             const Matrix& z);

struct LemmaCheck {
  std::string lemma;
  Index trials = 0;
  double max_ratio = 0.0;
  Index violations = 0;
  bool pass() const { return violations == 0; }
};

struct LemmaReport {
  double delta = 0.0;
  std::vector<LemmaCheck> checks;
  bool all_pass() const;
};

/// X and Y are random symmetric of rank <= r (for the nuclear-norm bounds X is
/// full rank), Z is a d x d Gaussian matrix.
LemmaReport check_rip_lemma_bounds(const MeasurementBatch& batch, double delta, Index r, Index trials,
                                   std::uint64_t seed);

/// ||b1^T b2|| in [0, 1].
double subspace_angle(const OrthonormalBasis& b1, const OrthonormalBasis& b2);

}  // namespace hetsense
