#include "hetsense/sensing.hpp"

#include <boost/random/bernoulli_distribution.hpp>
#include <boost/random/uniform_01.hpp>
#include <boost/random/uniform_real_distribution.hpp>

#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace hetsense {

namespace {

void check_symmetric(const Matrix& s, const char* what) {
  if (s.rows() != s.cols()) throw DimensionError(std::string(what) + ": matrix is not square");
  if (!(s - s.transpose()).isZero(0.0)) throw ConfigError(std::string(what) + ": matrix is not symmetric");
}

// Thin Q of a Householder QR with the sign of each column flipped so diag(R) > 0.
Matrix positive_qr(const Matrix& g) {
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ() * Matrix::Identity(g.rows(), g.cols());
  const Matrix& packed = qr.matrixQR();
  for (Index j = 0; j < g.cols(); ++j) {
    if (packed(j, j) < 0.0) q.col(j) *= -1.0;
  }
  return q;
}

}  // namespace

OrthonormalBasis OrthonormalBasis::from_columns(Matrix columns, double tolerance) {
  if (columns.cols() > columns.rows()) {
    throw DimensionError("orthonormal basis: rank " + std::to_string(columns.cols()) + " exceeds dimension " +
                         std::to_string(columns.rows()));
  }
  if (columns.cols() > 0) {
    const Matrix gram = columns.transpose() * columns;
    const double dev = (gram - Matrix::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    if (!(dev <= tolerance)) {
      throw DimensionError("orthonormal basis: columns deviate from orthonormality by " + std::to_string(dev));
    }
  }
  return OrthonormalBasis(std::move(columns));
}

OrthonormalBasis OrthonormalBasis::empty(Index d) { return OrthonormalBasis(Matrix(d, 0)); }

OrthonormalBasis make_orthonormal_basis(Index d, Index r, std::uint64_t seed) {
  if (r < 1 || r > d) {
    throw DimensionError("make_orthonormal_basis: need 1 <= r <= d, got r=" + std::to_string(r) +
                         " d=" + std::to_string(d));
  }
  Engine engine = SeedStream(seed).child("basis").engine();
  const Matrix g = standard_normal_matrix(engine, d, r);
  return OrthonormalBasis::from_columns(positive_qr(g));
}

GroundTruthModel::GroundTruthModel(OrthonormalBasis u_star, OrthonormalBasis v_star)
    : u_star_(std::move(u_star)), v_star_(std::move(v_star)) {
  if (u_star_.dim() != v_star_.dim()) throw DimensionError("ground truth: U* and V* have different d");
  if (u_star_.rank() < 1) throw DimensionError("ground truth: r1 must be at least 1");
  epsilon1_ = v_star_.rank() == 0 ? 0.0 : operator_norm(u_star_.columns().transpose() * v_star_.columns());
}

Matrix GroundTruthModel::invariant_signal() const { return u_star_.columns() * u_star_.columns().transpose(); }

GroundTruthModel make_ground_truth(Index d, Index r1, Index r2, std::uint64_t seed) {
  if (r1 < 1 || r2 < 0 || r1 + r2 > d) {
    throw DimensionError("make_ground_truth: need r1 >= 1, r2 >= 0, r1 + r2 <= d");
  }
  const SeedStream root(seed);
  OrthonormalBasis u = make_orthonormal_basis(d, r1, root.child("u_star").key());
  OrthonormalBasis v = r2 == 0 ? OrthonormalBasis::empty(d) : make_orthonormal_basis(d, r2, root.child("v_star").key());
  return GroundTruthModel(std::move(u), std::move(v));
}

GroundTruthModel make_orthogonal_ground_truth(Index d, Index r1, Index r2, std::uint64_t seed) {
  if (r1 < 1 || r2 < 0 || r1 + r2 > d) {
    throw DimensionError("make_orthogonal_ground_truth: need r1 >= 1, r2 >= 0, r1 + r2 <= d");
  }
  const OrthonormalBasis joint = make_orthonormal_basis(d, r1 + r2, SeedStream(seed).child("joint").key());
  return GroundTruthModel(OrthonormalBasis::from_columns(joint.columns().leftCols(r1)),
                          OrthonormalBasis::from_columns(joint.columns().rightCols(r2)));
}

EnvironmentDistribution::EnvironmentDistribution(Kind kind, Index r2) : kind_(std::move(kind)), r2_(r2) {
  if (r2_ < 0) throw DimensionError("environment distribution: negative r2");
  if (const auto* u = std::get_if<UniformDiagonal>(&kind_)) {
    if (!(u->half_width >= 0.0) || !std::isfinite(u->half_width)) {
      throw ConfigError("uniform-diagonal: half-width M must be finite and >= 0");
    }
  } else if (const auto* t = std::get_if<TwoPoint>(&kind_)) {
    if (!(t->magnitude >= 0.0) || !std::isfinite(t->magnitude)) {
      throw ConfigError("two-point: magnitude must be finite and >= 0");
    }
  } else {
    const auto& table = std::get<CustomTable>(kind_);
    if (table.entries.empty()) throw ConfigError("custom-table: no entries");
    double total = 0.0;
    for (const auto& e : table.entries) {
      if (!(e.probability >= 0.0)) throw ConfigError("custom-table: negative probability");
      if (e.sigma.rows() != r2_ || e.sigma.cols() != r2_) throw DimensionError("custom-table: entry is not r2 x r2");
      check_symmetric(e.sigma, "custom-table");
      total += e.probability;
    }
    if (std::abs(total - 1.0) > 1e-12) throw ConfigError("custom-table: probabilities do not sum to 1");
  }
}

EnvironmentDistribution EnvironmentDistribution::uniform_diagonal(double half_width, Index r2) {
  return EnvironmentDistribution(UniformDiagonal{half_width}, r2);
}

EnvironmentDistribution EnvironmentDistribution::two_point(double magnitude, Index r2) {
  return EnvironmentDistribution(TwoPoint{magnitude}, r2);
}

EnvironmentDistribution EnvironmentDistribution::custom_table(std::vector<TableEntry> entries) {
  const Index r2 = entries.empty() ? 0 : entries.front().sigma.rows();
  return EnvironmentDistribution(CustomTable{std::move(entries)}, r2);
}

DiagonalMoments EnvironmentDistribution::diagonal_moments(Index i) const {
  if (i < 0 || i >= r2_) throw DimensionError("diagonal_moments: index out of range");
  if (const auto* u = std::get_if<UniformDiagonal>(&kind_)) {
    const double m = u->half_width;
    return {1.0, m * m / 3.0, 1.0 + m};
  }
  if (const auto* t = std::get_if<TwoPoint>(&kind_)) {
    return {0.0, t->magnitude * t->magnitude, t->magnitude};
  }
  const auto& table = std::get<CustomTable>(kind_);
  DiagonalMoments out;
  double second = 0.0;
  for (const auto& e : table.entries) {
    const double s = e.sigma(i, i);
    out.mean += e.probability * s;
    second += e.probability * s * s;
    if (e.probability > 0.0) out.sup_abs = std::max(out.sup_abs, std::abs(s));
  }
  out.variance = std::max(0.0, second - out.mean * out.mean);
  return out;
}

double EnvironmentDistribution::sup_abs_diagonal() const {
  double sup = 0.0;
  for (Index i = 0; i < r2_; ++i) sup = std::max(sup, diagonal_moments(i).sup_abs);
  return sup;
}

EnvironmentCoefficients EnvironmentDistribution::sample(Engine& engine) const {
  EnvironmentCoefficients out;
  if (const auto* u = std::get_if<UniformDiagonal>(&kind_)) {
    out.sigma = Matrix::Zero(r2_, r2_);
    if (u->half_width == 0.0) {
      out.sigma.diagonal().setOnes();
    } else {
      boost::random::uniform_real_distribution<double> unif(1.0 - u->half_width, 1.0 + u->half_width);
      for (Index i = 0; i < r2_; ++i) out.sigma(i, i) = unif(engine);
    }
  } else if (const auto* t = std::get_if<TwoPoint>(&kind_)) {
    out.sigma = Matrix::Zero(r2_, r2_);
    boost::random::bernoulli_distribution<double> coin(0.5);
    for (Index i = 0; i < r2_; ++i) out.sigma(i, i) = coin(engine) ? t->magnitude : -t->magnitude;
  } else {
    const auto& table = std::get<CustomTable>(kind_);
    boost::random::uniform_01<double> unif;
    const double u = unif(engine);
    double acc = 0.0;
    const TableEntry* pick = &table.entries.back();
    for (const auto& e : table.entries) {
      acc += e.probability;
      if (u < acc) {
        pick = &e;
        break;
      }
    }
    out.sigma = pick->sigma;
  }
  return out;
}

std::string EnvironmentDistribution::describe() const {
  std::ostringstream os;
  os.precision(17);
  if (const auto* u = std::get_if<UniformDiagonal>(&kind_)) {
    os << "uniform-diagonal(M=" << u->half_width << ",r2=" << r2_ << ")";
  } else if (const auto* t = std::get_if<TwoPoint>(&kind_)) {
    os << "two-point(a=" << t->magnitude << ",r2=" << r2_ << ")";
  } else {
    os << "custom-table(entries=" << std::get<CustomTable>(kind_).entries.size() << ",r2=" << r2_ << ")";
  }
  return os.str();
}

std::string environment_label(std::uint64_t key) {
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(key));
  return std::string("e") + buf;
}

EnvironmentCoefficients sample_environment(const EnvironmentDistribution& dist, std::uint64_t seed) {
  const SeedStream stream = SeedStream(seed).child("environment");
  Engine engine = stream.engine();
  EnvironmentCoefficients env = dist.sample(engine);
  env.env_id = environment_label(stream.key());
  return env;
}

Matrix spurious_matrix(const GroundTruthModel& model, const EnvironmentCoefficients& env) {
  if (env.sigma.rows() != model.r2() || env.sigma.cols() != model.r2()) {
    throw DimensionError("spurious_matrix: sigma is " + std::to_string(env.sigma.rows()) + "x" +
                         std::to_string(env.sigma.cols()) + " but r2 = " + std::to_string(model.r2()));
  }
  if (model.r2() == 0) return Matrix::Zero(model.d(), model.d());
  const Matrix& v = model.v_star().columns();
  Matrix out = v * env.sigma * v.transpose();
  // Symmetrize exactly; the triple product can differ in the last bit across the diagonal.
  return (0.5 * (out + out.transpose())).eval();
}

Matrix total_signal(const GroundTruthModel& model, const EnvironmentCoefficients& env) {
  return model.invariant_signal() + spurious_matrix(model, env);
}

MeasurementBatch MeasurementBatch::gaussian(std::vector<Matrix> matrices, Vector responses, std::string env_id) {
  if (matrices.size() != static_cast<std::size_t>(responses.size())) {
    throw DimensionError("gaussian batch: matrix count differs from response count");
  }
  MeasurementBatch b;
  b.kind_ = MeasurementKind::kGaussian;
  b.dim_ = matrices.empty() ? 0 : matrices.front().rows();
  for (const auto& a : matrices) {
    if (a.rows() != b.dim_ || a.cols() != b.dim_) throw DimensionError("gaussian batch: matrices must be d x d");
  }
  b.matrices_ = std::move(matrices);
  b.responses_ = std::move(responses);
  b.env_id_ = std::move(env_id);
  return b;
}

MeasurementBatch MeasurementBatch::rank_one(Matrix vectors, Vector responses, std::string env_id) {
  if (vectors.cols() != responses.size()) throw DimensionError("rank-one batch: vector count differs from responses");
  MeasurementBatch b;
  b.kind_ = MeasurementKind::kRankOne;
  b.dim_ = vectors.rows();
  b.vectors_ = std::move(vectors);
  b.responses_ = std::move(responses);
  b.env_id_ = std::move(env_id);
  return b;
}

MeasurementBatch MeasurementBatch::gaussian_for_signal(std::vector<Matrix> matrices, const Matrix& signal,
                                                       std::string env_id) {
  const auto m = static_cast<Index>(matrices.size());
  MeasurementBatch b = gaussian(std::move(matrices), Vector::Zero(m), std::move(env_id));
  for (Index i = 0; i < b.size(); ++i) b.responses_(i) = b.measure(i, signal);
  return b;
}

MeasurementBatch MeasurementBatch::rank_one_for_signal(Matrix vectors, const Matrix& signal, std::string env_id) {
  const Index m = vectors.cols();
  MeasurementBatch b = rank_one(std::move(vectors), Vector::Zero(m), std::move(env_id));
  for (Index i = 0; i < m; ++i) b.responses_(i) = b.measure(i, signal);
  return b;
}

const Matrix& MeasurementBatch::matrix(Index i) const {
  if (kind_ != MeasurementKind::kGaussian) throw DimensionError("matrix(i): rank-one batch stores vectors only");
  return matrices_.at(static_cast<std::size_t>(i));
}

const Matrix& MeasurementBatch::vectors() const {
  if (kind_ != MeasurementKind::kRankOne) throw DimensionError("vectors(): not a rank-one batch");
  return vectors_;
}

Matrix MeasurementBatch::dense_matrix(Index i) const {
  if (kind_ == MeasurementKind::kGaussian) return matrix(i);
  return vectors_.col(i) * vectors_.col(i).transpose();
}

double MeasurementBatch::measure(Index i, const Matrix& m) const {
  if (m.rows() != dim_ || m.cols() != dim_) throw DimensionError("measure: matrix is not d x d");
  if (kind_ == MeasurementKind::kGaussian) return inner(matrices_[static_cast<std::size_t>(i)], m);
  const auto x = vectors_.col(i);
  return x.dot(m * x);
}

MeasurementBatch MeasurementBatch::symmetrized() const {
  if (kind_ == MeasurementKind::kRankOne) return *this;
  std::vector<Matrix> sym;
  sym.reserve(matrices_.size());
  for (const auto& a : matrices_) sym.emplace_back(0.5 * (a + a.transpose()));
  return gaussian(std::move(sym), responses_, env_id_);
}

MeasurementBatch generate_gaussian_batch(const GroundTruthModel& model, const EnvironmentCoefficients& env,
                                         Index m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("generate_gaussian_batch: m must be >= 1");
  const Matrix signal = total_signal(model, env);
  std::vector<Matrix> mats;
  mats.reserve(static_cast<std::size_t>(m));
  for_each_gaussian_measurement(model.d(), m, seed, [&](Index, const Matrix& a) { mats.push_back(a); });
  return MeasurementBatch::gaussian_for_signal(std::move(mats), signal, env.env_id);
}

MeasurementBatch generate_rank_one_batch(const GroundTruthModel& model, const EnvironmentCoefficients& env,
                                         Index m, std::uint64_t seed) {
  if (m < 1) throw ConfigError("generate_rank_one_batch: m must be >= 1");
  const Matrix signal = total_signal(model, env);
  Engine engine = SeedStream(seed).child("rank-one").engine();
  Matrix x = standard_normal_matrix(engine, model.d(), m);
  return MeasurementBatch::rank_one_for_signal(std::move(x), signal, env.env_id);
}

AssumptionReport check_assumptions(const GroundTruthModel& model, const EnvironmentDistribution& dist,
                                   Index n_samples, std::uint64_t seed) {
  if (n_samples < 100) throw ConfigError("check_assumptions: n_samples must be >= 100");
  if (dist.r2() != model.r2()) throw DimensionError("check_assumptions: distribution r2 differs from model r2");
  const Index r2 = dist.r2();
  AssumptionReport rep;
  rep.epsilon1 = model.epsilon1();

  if (r2 > 0) {
    rep.m1_hat = dist.sup_abs_diagonal();
    rep.m2_hat = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < r2; ++i) {
      const DiagonalMoments mo = dist.diagonal_moments(i);
      rep.m2_hat = std::min(rep.m2_hat, mo.variance / (1.0 + std::abs(mo.mean)));
    }

    Vector sum = Vector::Zero(r2), sum_sq = Vector::Zero(r2);
    const SeedStream root = SeedStream(seed).child("assumptions");
    const double scale = std::pow(static_cast<double>(r2), 1.5);
    for (Index s = 0; s < n_samples; ++s) {
      Engine engine = root.child(static_cast<std::uint64_t>(s)).engine();
      const Matrix sigma = dist.sample(engine).sigma;
      for (Index i = 0; i < r2; ++i) {
        const double v = sigma(i, i);
        sum(i) += v;
        sum_sq(i) += v * v;
        rep.m1_sampled = std::max(rep.m1_sampled, std::abs(v));
        const double off = sigma.row(i).cwiseAbs().sum() - std::abs(v);
        rep.epsilon2 = std::max(rep.epsilon2, scale * off);
      }
    }
    rep.m2_sampled = std::numeric_limits<double>::infinity();
    const double n = static_cast<double>(n_samples);
    for (Index i = 0; i < r2; ++i) {
      const double mean = sum(i) / n;
      const double var = std::max(0.0, (sum_sq(i) - n * mean * mean) / (n - 1.0));
      rep.m2_sampled = std::min(rep.m2_sampled, var / (1.0 + std::abs(mean)));
    }
  }

  const double inf = std::numeric_limits<double>::infinity();
  rep.eta_window.first = rep.m2_hat > 0.0 ? 24.0 / rep.m2_hat : inf;
  rep.eta_window.second = rep.m1_hat > 0.0 ? 1.0 / (64.0 * rep.m1_hat) : inf;
  rep.window_nonempty = rep.eta_window.first < rep.eta_window.second;
  return rep;
}

}  // namespace hetsense
