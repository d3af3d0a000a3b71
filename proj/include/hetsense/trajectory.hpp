#pragma once

#include "hetsense/common.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace hetsense {

/// Per-step diagnostics of an iterate. `loss` is the batch loss of U_t on the
/// batch of step t (for the last record, on one extra batch that is not applied).
struct MetricRecord {
  Index t = 0;
  std::string env_id;
  double loss = 0.0;
  double sigma1_r = 0.0;
  double sigma_min_r = 0.0;
  double q_fro = 0.0;
  double e_op = 0.0;
  double e_fro2 = 0.0;
  double recovery_error = 0.0;
};

struct IterateState {
  Matrix u;
  Index step = 0;
  // Index of the next per-step batch stream.
  std::uint64_t rng_cursor = 0;
};

struct Trajectory {
  std::vector<MetricRecord> records;
  IterateState final_state;
  std::string config_digest;
  // Iterates U_0..U_T, kept only when requested by the runner.
  std::vector<Matrix> iterates;
  // Environment coefficient applied at each step, kept with the iterates.
  std::vector<Matrix> sigmas;
};

/// Raised when the iterate leaves the divergence ball or becomes non-finite.
/// Carries the records collected up to and including the last finite step.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, Trajectory partial, Index step)
      : std::runtime_error(what), partial_(std::move(partial)), step_(step) {}

  const Trajectory& partial() const { return partial_; }
  Index step() const { return step_; }

 private:
  Trajectory partial_;
  Index step_;
};

}  // namespace hetsense
