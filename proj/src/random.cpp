#include "hetsense/random.hpp"

#include <Eigen/SVD>

namespace hetsense {

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

// FNV-1a over the label bytes.
std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

SeedStream::SeedStream(std::uint64_t master_seed) : key_(mix64(master_seed)) {}

SeedStream SeedStream::child(std::string_view label) const {
  return SeedStream(FromKey{}, mix64(key_ ^ mix64(hash_label(label))));
}

SeedStream SeedStream::child(std::uint64_t index) const {
  return SeedStream(FromKey{}, mix64(mix64(key_ + 0x632be59bd9b4e019ULL) ^ index));
}

void fill_standard_normal(Engine& engine, Eigen::Ref<Matrix> out) {
  boost::random::normal_distribution<double> normal(0.0, 1.0);
  for (Index j = 0; j < out.cols(); ++j) {
    for (Index i = 0; i < out.rows(); ++i) out(i, j) = normal(engine);
  }
}

Matrix standard_normal_matrix(Engine& engine, Index rows, Index cols) {
  Matrix out(rows, cols);
  fill_standard_normal(engine, out);
  return out;
}

double operator_norm(const Eigen::Ref<const Matrix>& a) {
  if (a.size() == 0) return 0.0;
  if (a.rows() == 1 || a.cols() == 1) return a.norm();
  // The Gram matrix of the thinner side has the squared singular values as eigenvalues.
  const Matrix gram = a.rows() >= a.cols() ? Matrix(a.transpose() * a) : Matrix(a * a.transpose());
  Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(0.0, eig.eigenvalues().maxCoeff()));
}

double nuclear_norm(const Eigen::Ref<const Matrix>& a) {
  if (a.size() == 0) return 0.0;
  Eigen::JacobiSVD<Matrix> svd(a);
  return svd.singularValues().sum();
}

}  // namespace hetsense
