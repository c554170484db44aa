#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sumgp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  explicit NumericError(const std::string &what, double condition = std::numeric_limits<double>::quiet_NaN())
      : std::runtime_error(what), condition_estimate(condition) {}
  double condition_estimate;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// Relative jitter levels tried in order when a Cholesky factorization fails.
inline constexpr std::array<double, 6> kJitterLadder = {0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6};

inline void symmetrize(Matrix &A) { A = 0.5 * (A + A.transpose()).eval(); }

inline Matrix kron(const Matrix &A, const Matrix &B) {
  Matrix out(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      out.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return out;
}

inline Vector kron(const Vector &a, const Vector &b) {
  Vector out(a.size() * b.size());
  for (Eigen::Index i = 0; i < a.size(); ++i) out.segment(i * b.size(), b.size()) = a(i) * b;
  return out;
}

/// Cholesky factor of a symmetric matrix with the escalating jitter policy.
///
/// A factorization counts as failed when Eigen reports a non-positive pivot
/// or when the smallest squared pivot falls below 1e-13 of the mean diagonal,
/// which is how numerically singular PSD matrices show up in practice.
class JitteredCholesky {
 public:
  JitteredCholesky() = default;

  explicit JitteredCholesky(const Matrix &A, std::string_view what = "matrix") { compute(A, what); }

  void compute(const Matrix &A, std::string_view what = "matrix") {
    const Eigen::Index n = A.rows();
    if (A.cols() != n) throw InputError(std::string(what) + ": Cholesky of a non-square matrix");
    n_ = n;
    if (n == 0) {
      jitter_ = 0.0;
      llt_.compute(A);
      return;
    }
    const double mean_diag = A.diagonal().mean();
    if (!std::isfinite(mean_diag)) throw NumericError(std::string(what) + ": non-finite entries");
    const double scale = mean_diag > 0.0 ? mean_diag : 1.0;
    double worst_condition = std::numeric_limits<double>::infinity();
    for (double eps : kJitterLadder) {
      Matrix B = A;
      B.diagonal().array() += eps * scale;
      llt_.compute(B);
      if (llt_.info() != Eigen::Success) continue;
      const auto d = llt_.matrixLLT().diagonal().array();
      const double min_piv = d.minCoeff();
      const double max_piv = d.maxCoeff();
      if (!(min_piv > 0.0) || !std::isfinite(max_piv)) continue;
      worst_condition = (max_piv / min_piv) * (max_piv / min_piv);
      if (min_piv * min_piv < 1e-13 * scale) continue;
      jitter_ = eps * scale;
      return;
    }
    std::ostringstream msg;
    msg << what << ": Cholesky failed after jitter escalation to 1e-6 (n=" << n
        << ", condition estimate " << worst_condition << ")";
    throw NumericError(msg.str(), worst_condition);
  }

  Eigen::Index size() const { return n_; }
  double jitter() const { return jitter_; }
  auto matrixL() const { return llt_.matrixL(); }

  template <typename Rhs>
  auto solve(const Eigen::MatrixBase<Rhs> &b) const {
    return llt_.solve(b);
  }

  double log_det() const {
    if (n_ == 0) return 0.0;
    return 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
  }

  Matrix inverse() const { return llt_.solve(Matrix::Identity(n_, n_)); }

 private:
  Eigen::LLT<Matrix> llt_;
  Eigen::Index n_ = 0;
  double jitter_ = 0.0;
};

inline double min_eigenvalue(const Matrix &A) {
  if (A.rows() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (A + A.transpose()), Eigen::EigenvaluesOnly);
  return es.eigenvalues().minCoeff();
}

// Symmetric to 1e-10 relative and min eigenvalue >= -1e-8 * max diagonal.
inline bool is_valid_covariance(const Matrix &A) {
  if (A.rows() != A.cols()) return false;
  if (A.rows() == 0) return true;
  const double scale = std::max(A.cwiseAbs().maxCoeff(), 1e-300);
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) return false;
  return min_eigenvalue(A) >= -1e-8 * std::max(A.diagonal().maxCoeff(), 0.0);
}

}  // namespace sumgp
