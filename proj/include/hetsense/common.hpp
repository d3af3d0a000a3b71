#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace hetsense {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised when operand shapes do not agree or a rank/dimension precondition fails.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid configuration values (step sizes, distributions, config files).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a quantity is evaluated outside its mathematical domain.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Frobenius inner product trace(b^T a).
inline double inner(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b) {
  return (a.array() * b.array()).sum();
}

/// Largest singular value.
double operator_norm(const Eigen::Ref<const Matrix>& a);

/// Sum of singular values.
double nuclear_norm(const Eigen::Ref<const Matrix>& a);

inline void require_same_shape(const Eigen::Ref<const Matrix>& a, const Eigen::Ref<const Matrix>& b,
                               const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()) + ")");
  }
}

}  // namespace hetsense
