#pragma once

#include "hetsense/common.hpp"
#include "hetsense/sensing.hpp"
#include "hetsense/trajectory.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hetsense {

/// Split of an iterate U into its invariant part R = U^T U*, spurious part
/// Q = U^T V* and residual E = (I - U*U*^T - V*V*^T) U.
struct Decomposition {
  Matrix r_mat;  // k x r1
  Matrix q_mat;  // k x r2
  Matrix e_mat;  // d x k

  /// U* R^T + V* Q^T + E.
  Matrix recompose(const GroundTruthModel& model) const;
};

Decomposition decompose(const Matrix& u, const GroundTruthModel& model);

/// ||u u^T - X*||_F. Uses k x k Gram matrices when k < d.
double recovery_error(const Matrix& u, const GroundTruthModel& model);

/// Same quantity through the dense d x d product.
double recovery_error_dense(const Matrix& u, const GroundTruthModel& model);

/// Decomposition metrics of u; t, env_id and loss are left for the caller.
MetricRecord compute_metrics(const Matrix& u, const GroundTruthModel& model);

/// ||U^T U - (R R^T + Q Q^T + E^T E)|| and the bound 6 eps1 ||U||^2.
struct GramDeviation {
  double deviation = 0.0;
  double bound = 0.0;
};
GramDeviation gram_deviation(const Matrix& u, const GroundTruthModel& model);

/// ||Q||^2 + ||E||^2 + 4 ||U^T E||, the error level that sets the phase-2 length.
double phase_error_level(const Matrix& u, const GroundTruthModel& model);

/// Parts of the next iterate predicted from U_t, Sigma_t and the batch error
/// matrix E_t = E(U_t U_t^T - X* - V* Sigma_t V*^T), assembled term by term.
Decomposition predict_next_parts(const Matrix& u, const GroundTruthModel& model, const Matrix& sigma,
                                 const Matrix& rip_error, double eta);

/// R_{t+1} = (1 - eta R_t^2 + eta) R_t with R_0 = alpha; returns R_0..R_steps.
std::vector<double> cr_sequence(double alpha, double eta, Index steps);

struct BarSequences {
  std::vector<double> upper;
  std::vector<double> lower;
};

/// Upper and lower companions of cr_sequence with the drift term
/// +/- correction_scale * (eta/32) / log(1/alpha) * upper_t.
BarSequences bar_sequences(double alpha, double eta, Index steps, double correction_scale = 1.0);

/// Ratio bounds of the companions against cr over t = 0..t1.
struct EnvelopeCheck {
  Index t1 = 0;
  double max_upper_ratio = 0.0;  // max upper_t / R_t
  double min_lower_ratio = 0.0;  // min lower_t / R_t
  bool ordered = false;          // lower_t <= R_t <= upper_t for all t <= t1
  bool within_sixth = false;     // upper <= (7/6) R and lower >= (5/6) R for all t <= t1
};
EnvelopeCheck check_bar_envelopes(double alpha, double eta);

/// L_t = max(alpha, 40 m1 delta sqrt(r1 + r2) R_t).
std::vector<double> calibration_line(double alpha, double m1, double delta, Index r1, Index r2,
                                     const std::vector<double>& cr);

class BoundaryNotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhaseBoundaries {
  Index t1 = 0;
  Index t2 = 0;
};

/// t1: first index with R_t in (1/3 - eta, 1/3). t2 = t1 + ceil((8/eta) log(1/g_target)).
PhaseBoundaries phase_boundaries(const std::vector<double>& cr, double eta, double g_target);

struct AuxiliarySequences {
  double alpha = 0.0;
  double eta = 0.0;
  std::vector<double> cr;
  std::vector<double> cr_upper;
  std::vector<double> cr_lower;
  std::vector<double> cal_line;
  Index t1 = 0;
  Index t2 = 0;
};

/// t1 and t2 are steps + 1 when R_t does not reach 1/3 within the horizon.
AuxiliarySequences make_auxiliary_sequences(double alpha, double eta, Index steps, double m1, double delta,
                                            Index r1, Index r2, double g_target);

struct ControllerProcess {
  // r2 x (steps + 1).
  Matrix paths;
  std::vector<bool> absorbed;
  double absorb_level_factor = 0.0;
  double p = 0.0;
};

/// One replicate of the reflected and absorbed controller paths driven by
/// diagonal coefficients drawn from `engine`.
ControllerProcess simulate_controller_paths(const EnvironmentDistribution& dist, double eta,
                                            const std::vector<double>& cal_line, double p, Index steps,
                                            Engine& engine);

struct ControllerStats {
  Index replicates = 0;
  Index steps = 0;
  double p = 0.0;
  Index absorbed_replicates = 0;
  double absorption_fraction = 0.0;
  // steps * p.
  double bound = 0.0;
  bool within_bound = false;
  // Every updated, unabsorbed value sat at or above the calibration line.
  bool reflection_respected = true;
  // Empty when the step size passes the supermartingale check.
  std::string warning;
};

ControllerStats simulate_controller(const EnvironmentDistribution& dist, double eta,
                                    const std::vector<double>& cal_line, double p, Index r2, Index steps,
                                    std::uint64_t seed, Index replicates);

struct SupermartingaleReport {
  // Worst (largest) coordinate over the diagonal entries.
  double estimate = 0.0;
  double std_error = 0.0;
  // Closed-form expectation for the worst coordinate.
  double exact = 0.0;
  double min_support = 0.0;
  bool pass = false;
};

/// Monte-Carlo estimate of E[(1 + eta Sigma_ii + 2 eta)^{2/3}] using Sigma_ii as
/// a control variate. Passes iff estimate + 3 stderr < 1 for every i.
/// Throws DomainError when the support of 1 + eta Sigma_ii + 2 eta reaches 0.
SupermartingaleReport check_supermartingale(const EnvironmentDistribution& dist, double eta, Index n_samples,
                                            std::uint64_t seed);

/// Exact E[(1 + eta Sigma_ii + 2 eta)^{2/3}] for coordinate i.
double supermartingale_expectation(const EnvironmentDistribution& dist, double eta, Index i);

struct PhaseTolerances {
  double p = 0.1;
  double absolute = 1e-9;
  // Allowed relative slack on the envelope R_lower <= sigma <= R_upper.
  double envelope_slack = 0.0;
  // |sigma - 1| allowed at t2.
  double final_slack = 0.1;
};

struct PredicateCount {
  Index checked = 0;
  Index held = 0;
  double fraction() const { return checked == 0 ? 0.0 : static_cast<double>(held) / static_cast<double>(checked); }
};

struct PhaseReport {
  PredicateCount growth;        // sigma1(R_{t+1}) > (1 + eta/3) sigma1(R_t) over phase 1
  PredicateCount min_growth;    // the same for sigma_min
  PredicateCount envelope;      // R_lower <= sigma_min <= sigma1 <= R_upper for t <= t1
  PredicateCount spurious;      // ||Q_t||_F <= p^{-1.5} r2^2 L_t
  bool t1_reached = false;
  bool t1_window = false;       // sigma1, sigma_min at t1 in (1/4, 7/18)
  bool t2_reached = false;
  bool t2_near_one = false;     // |sigma - 1| <= final_slack at t2
  bool empty() const { return growth.checked + envelope.checked + spurious.checked == 0; }
};

PhaseReport check_phase_predicates(const Trajectory& trajectory, const AuxiliarySequences& aux,
                                   const GroundTruthModel& model, const PhaseTolerances& tol = {});

}  // namespace hetsense
