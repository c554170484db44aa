#pragma once

#include "sumgp/gaussian_core.hpp"

#include <functional>
#include <sstream>
#include <utility>

namespace sumgp {

/// Per-point linear constraint F(x)·f'(x) = S(x) over the tasks at x.
struct ConstraintSpec {
  std::function<Matrix(const Vector &)> coeff_rows;
  std::function<Vector(const Vector &)> targets;
  bool is_constant = false;
  int num_tasks = 0;
  int num_constraints = 0;

  static ConstraintSpec constant(const Matrix &F, const Vector &S) {
    if (F.rows() != S.size()) throw InputError("ConstraintSpec: F rows and S length differ");
    ConstraintSpec spec;
    spec.coeff_rows = [F](const Vector &) { return F; };
    spec.targets = [S](const Vector &) { return S; };
    spec.is_constant = true;
    spec.num_tasks = static_cast<int>(F.cols());
    spec.num_constraints = static_cast<int>(F.rows());
    spec.validate();
    return spec;
  }

  static ConstraintSpec input_dependent(int num_tasks, int num_constraints, std::function<Matrix(const Vector &)> F,
                                        std::function<Vector(const Vector &)> S) {
    ConstraintSpec spec;
    spec.coeff_rows = std::move(F);
    spec.targets = std::move(S);
    spec.num_tasks = num_tasks;
    spec.num_constraints = num_constraints;
    spec.validate();
    return spec;
  }

  /// Widens the coefficient rows with zero columns for tasks not named in the
  /// constraint, e.g. auxiliary outputs.  `columns[j]` is the task index of
  /// column j of the given rows.
  ConstraintSpec zero_padded(int total_tasks, const std::vector<int> &columns) const {
    if (static_cast<int>(columns.size()) != num_tasks) throw InputError("ConstraintSpec: column map has wrong length");
    for (int c : columns)
      if (c < 0 || c >= total_tasks) throw InputError("ConstraintSpec: column map out of range");
    ConstraintSpec out = *this;
    auto inner = coeff_rows;
    out.coeff_rows = [inner, total_tasks, columns](const Vector &x) {
      const Matrix f = inner(x);
      Matrix F = Matrix::Zero(f.rows(), total_tasks);
      for (std::size_t j = 0; j < columns.size(); ++j) F.col(columns[j]) += f.col(static_cast<Eigen::Index>(j));
      return F;
    };
    out.num_tasks = total_tasks;
    out.validate();
    return out;
  }

  Matrix F(const Vector &x) const { return coeff_rows(x); }
  Vector S(const Vector &x) const { return targets(x); }

  void validate() const {
    if (!coeff_rows || !targets) throw InputError("ConstraintSpec: missing F or S");
    if (num_constraints > num_tasks) throw InputError("ConstraintSpec: more constraints than tasks");
    if (num_constraints <= 0 || num_tasks <= 0) throw InputError("ConstraintSpec: empty constraint");
  }

  /// Confirms the constancy flag by evaluating at two distinct probe points.
  bool check_constant(Eigen::Index input_dim) const {
    const Vector p0 = Vector::Zero(input_dim);
    const Vector p1 = Vector::Constant(input_dim, 0.7317);
    return (F(p0) - F(p1)).cwiseAbs().maxCoeff() <= 1e-12 && (S(p0) - S(p1)).cwiseAbs().maxCoeff() <= 1e-12;
  }
};

/// Intermediate quantities of one conditioning step, kept for backprop.
struct ConditioningMap {
  GaussianDist result;
  Matrix A;  // I - Σ Fᵀ (FΣFᵀ)⁻¹ F
  Vector w;  // Fᵀ (FΣFᵀ)⁻¹ (S - Fμ)
};

inline ConditioningMap condition_gaussian_detailed(const GaussianDist &dist, const Matrix &F, const Vector &S) {
  const Eigen::Index n = dist.size();
  if (F.cols() != n || F.rows() != S.size()) throw InputError("condition_gaussian: F or S has wrong shape");
  ConditioningMap out;
  if (F.rows() == 0) {
    out.result = dist;
    out.A = Matrix::Identity(n, n);
    out.w = Vector::Zero(n);
    return out;
  }
  const Matrix SigFt = dist.cov * F.transpose();
  Matrix M = F * SigFt;
  symmetrize(M);
  const double sig_scale = std::max(dist.cov.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  std::vector<Eigen::Index> bad;
  for (Eigen::Index r = 0; r < F.rows(); ++r) {
    const double row_scale = F.row(r).squaredNorm() * sig_scale;
    if (!(M(r, r) > 1e-12 * row_scale)) bad.push_back(r);
  }
  if (!bad.empty()) {
    std::ostringstream msg;
    msg << "condition_gaussian: F Sigma F^T is singular; constraint rows";
    for (auto r : bad) msg << ' ' << r;
    msg << " have no variance left (already conditioned?)";
    throw NumericError(msg.str(), std::numeric_limits<double>::infinity());
  }
  JitteredCholesky chol;
  try {
    chol.compute(M, "condition_gaussian");
  } catch (const NumericError &e) {
    throw NumericError(std::string(e.what()) + " (F Sigma F^T of " + std::to_string(F.rows()) + " constraint rows)",
                       e.condition_estimate);
  }
  // D = M⁻¹ F Σ, so Dᵀ = Σ Fᵀ M⁻¹.
  const Matrix Dt = chol.solve(SigFt.transpose()).transpose();
  out.A = Matrix::Identity(n, n) - Dt * F;
  out.w = F.transpose() * chol.solve(S - F * dist.mean);
  out.result.mean = out.A * dist.mean + Dt * S;
  out.result.cov = out.A * dist.cov * out.A.transpose();
  symmetrize(out.result.cov);
  return out;
}

/// Gaussian conditioned on F f = S.
inline GaussianDist condition_gaussian(const GaussianDist &dist, const Matrix &F, const Vector &S) {
  return condition_gaussian_detailed(dist, F, S).result;
}

/// Pulls an adjoint (M on Σ', v on μ') back through a conditioning step.
inline void condition_adjoint(const ConditioningMap &map, const Matrix &M, const Vector &v, Matrix &M_prior,
                              Vector &v_prior) {
  v_prior = map.A.transpose() * v;
  const Matrix cross = v_prior * map.w.transpose();
  M_prior = map.A.transpose() * M * map.A + 0.5 * (cross + cross.transpose());
}

inline std::pair<Matrix, Vector> build_total_constraint(const ConstraintSpec &spec, const Matrix &points) {
  spec.validate();
  const Eigen::Index N = points.rows();
  const Eigen::Index T = spec.num_tasks;
  const Eigen::Index R = spec.num_constraints;
  Matrix Ftot = Matrix::Zero(R * N, T * N);
  Vector Stot(R * N);
  for (Eigen::Index i = 0; i < N; ++i) {
    Matrix F;
    Vector S;
    try {
      F = spec.F(points.row(i).transpose());
      S = spec.S(points.row(i).transpose());
    } catch (const std::exception &e) {
      throw InputError("build_total_constraint: evaluation failed at point " + std::to_string(i) + ": " + e.what());
    }
    if (F.rows() != R || F.cols() != T || S.size() != R)
      throw InputError("build_total_constraint: wrong shape at point " + std::to_string(i));
    if (!F.allFinite() || !S.allFinite())
      throw InputError("build_total_constraint: non-finite value at point " + std::to_string(i));
    Ftot.block(i * R, i * T, R, T) = F;
    Stot.segment(i * R, R) = S;
  }
  return {Ftot, Stot};
}

/// Constant-constraint path: conditions the task-space Gaussian with S' = S/a
/// and rebuilds the joint as a Kronecker product.
inline GaussianDist condition_constant_kronecker(const Vector &task_mean, const Matrix &task_cov, const Matrix &F,
                                                 const Vector &S, double data_mean_scale, const Matrix &data_cov) {
  if (!(data_mean_scale != 0.0)) throw InputError("condition_constant_kronecker: data mean scale must be nonzero");
  const GaussianDist task = condition_gaussian({task_mean, task_cov}, F, S / data_mean_scale);
  return {kron(Vector(Vector::Constant(data_cov.rows(), data_mean_scale)), task.mean), kron(data_cov, task.cov)};
}

/// Orthogonal projector onto null(F) and the minimum-norm solution of F m = S.
inline std::pair<Matrix, Vector> nullspace_task_covariance(const Matrix &F, const Vector &S) {
  if (F.rows() != S.size()) throw InputError("nullspace_task_covariance: F and S disagree");
  const Eigen::Index n = F.cols();
  Eigen::JacobiSVD<Matrix> svd(F, Eigen::ComputeFullV);
  const Vector sv = svd.singularValues();
  const double tol = std::max(F.rows(), F.cols()) * 1e-12 * (sv.size() ? sv(0) : 0.0);
  Eigen::Index rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i) rank += sv(i) > tol ? 1 : 0;
  if (rank < F.rows()) throw InputError("nullspace_task_covariance: F is rank deficient");
  const Matrix G = svd.matrixV().rightCols(n - rank);
  const Vector m = F.transpose() * (F * F.transpose()).ldlt().solve(S);
  return {G * G.transpose(), m};
}

}  // namespace sumgp
