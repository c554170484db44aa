#pragma once

#include "sumgp/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sumgp {

/// Trainable record of the multitask kernel.
///
/// The task kernel is B·Bᵀ + diag(v); the data kernel is an RBF with scale
/// sigma_f and length scale `lengthscale`.  Positive quantities are packed in
/// log space for optimization.
struct Hyperparameters {
  double sigma_f = 1.0;
  double lengthscale = 1.0;
  Matrix task_factor_B;
  Vector task_diag_v;
  double noise_sigma_n = 0.1;
  Vector task_means;

  static Hyperparameters defaults(int num_tasks, int rank) {
    Hyperparameters hp;
    hp.task_factor_B = Matrix::Zero(num_tasks, rank);
    hp.task_diag_v = Vector::Ones(num_tasks);
    hp.task_means = Vector::Zero(num_tasks);
    return hp;
  }

  int num_tasks() const { return static_cast<int>(task_diag_v.size()); }
  int rank() const { return static_cast<int>(task_factor_B.cols()); }

  void validate() const {
    const auto nf = task_diag_v.size();
    if (!(sigma_f > 0.0) || !(lengthscale > 0.0)) throw InputError("hyperparameters: sigma_f and lengthscale must be positive");
    if (!(noise_sigma_n >= 0.0)) throw InputError("hyperparameters: noise_sigma_n must be nonnegative");
    if (nf == 0) throw InputError("hyperparameters: no tasks");
    if (task_factor_B.rows() != nf || task_means.size() != nf)
      throw InputError("hyperparameters: B, v and task_means disagree on the number of tasks");
    if ((task_diag_v.array() < 0.0).any()) throw InputError("hyperparameters: task_diag_v must be nonnegative");
  }

  Eigen::Index packed_size() const { return 3 + task_factor_B.size() + 2 * task_diag_v.size(); }

  // Index of log sigma_n in the packed vector.
  Eigen::Index noise_index() const { return packed_size() - 1; }

  Vector pack() const {
    const auto nf = task_diag_v.size();
    const auto r = task_factor_B.cols();
    Vector theta(packed_size());
    Eigen::Index k = 0;
    theta(k++) = std::log(sigma_f);
    theta(k++) = std::log(lengthscale);
    for (Eigen::Index a = 0; a < nf; ++a)
      for (Eigen::Index j = 0; j < r; ++j) theta(k++) = task_factor_B(a, j);
    for (Eigen::Index a = 0; a < nf; ++a) theta(k++) = std::log(std::max(task_diag_v(a), 1e-300));
    for (Eigen::Index a = 0; a < nf; ++a) theta(k++) = task_means(a);
    theta(k++) = std::log(std::max(noise_sigma_n, 1e-300));
    return theta;
  }

  void unpack(const Vector &theta) {
    if (theta.size() != packed_size()) throw InputError("hyperparameters: packed vector has wrong length");
    const auto nf = task_diag_v.size();
    const auto r = task_factor_B.cols();
    Eigen::Index k = 0;
    sigma_f = std::exp(theta(k++));
    lengthscale = std::exp(theta(k++));
    for (Eigen::Index a = 0; a < nf; ++a)
      for (Eigen::Index j = 0; j < r; ++j) task_factor_B(a, j) = theta(k++);
    for (Eigen::Index a = 0; a < nf; ++a) task_diag_v(a) = std::exp(theta(k++));
    for (Eigen::Index a = 0; a < nf; ++a) task_means(a) = theta(k++);
    noise_sigma_n = std::exp(theta(k++));
  }
};

/// Input points (one per row) shared by all tasks.  Flat index of task a at
/// point i is i·num_tasks + a.
struct MultitaskGrid {
  Matrix inputs;
  int num_tasks = 1;

  Eigen::Index num_points() const { return inputs.rows(); }
  Eigen::Index size() const { return inputs.rows() * num_tasks; }
};

struct GaussianDist {
  Vector mean;
  Matrix cov;

  Eigen::Index size() const { return mean.size(); }

  GaussianDist block(Eigen::Index start, Eigen::Index n) const {
    return {mean.segment(start, n), cov.block(start, start, n, n)};
  }

  Matrix sample(Eigen::Index count, std::mt19937_64 &rng) const {
    Eigen::SelfAdjointEigenSolver<Matrix> es(0.5 * (cov + cov.transpose()));
    const Vector sd = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    const Matrix root = es.eigenvectors() * sd.asDiagonal();
    std::normal_distribution<double> normal;
    Matrix out(size(), count);
    for (Eigen::Index c = 0; c < count; ++c) {
      Vector z(size());
      for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = normal(rng);
      out.col(c) = mean + root * z;
    }
    return out;
  }
};

/// Observations on a multitask grid.  NaN marks a missing entry.
struct TaskedDataset {
  Matrix inputs;
  Matrix observations;
  std::vector<bool> virtual_point;
  Vector scale_factors;
  std::optional<Matrix> ground_truth;
  std::vector<std::string> task_names;
  std::vector<std::string> units;

  Eigen::Index num_points() const { return inputs.rows(); }
  int num_tasks() const { return static_cast<int>(observations.cols()); }
  bool is_missing(Eigen::Index i, Eigen::Index a) const { return std::isnan(observations(i, a)); }
  bool is_virtual(Eigen::Index i) const { return i < static_cast<Eigen::Index>(virtual_point.size()) && virtual_point[i]; }

  MultitaskGrid grid() const { return {inputs, num_tasks()}; }

  std::vector<bool> missing_mask() const {
    std::vector<bool> mask(static_cast<std::size_t>(observations.size()));
    for (Eigen::Index i = 0; i < num_points(); ++i)
      for (Eigen::Index a = 0; a < num_tasks(); ++a) mask[i * num_tasks() + a] = is_missing(i, a);
    return mask;
  }

  Vector observed_values() const {
    std::vector<double> vals;
    for (Eigen::Index i = 0; i < num_points(); ++i)
      for (Eigen::Index a = 0; a < num_tasks(); ++a)
        if (!is_missing(i, a)) vals.push_back(observations(i, a));
    return Eigen::Map<Vector>(vals.data(), static_cast<Eigen::Index>(vals.size()));
  }

  Eigen::Index num_observed() const { return (observations.array() == observations.array()).count(); }

  void validate() const {
    if (observations.rows() != inputs.rows()) throw InputError("dataset: inputs and observations disagree on point count");
    if (num_points() == 0) throw InputError("dataset: no points");
    for (Eigen::Index i = 0; i < num_points(); ++i) {
      bool any = false;
      for (Eigen::Index a = 0; a < num_tasks(); ++a) any = any || !is_missing(i, a);
      if (!any) throw InputError("dataset: point " + std::to_string(i) + " has no observed task");
    }
  }
};

inline double squared_distance(const Eigen::Ref<const Vector> &x, const Eigen::Ref<const Vector> &x2) {
  if (x.size() != x2.size()) throw InputError("rbf_kernel: input dimension mismatch");
  return (x - x2).squaredNorm();
}

inline double rbf_kernel(const Vector &x, const Vector &x2, const Hyperparameters &hp) {
  return hp.sigma_f * hp.sigma_f * std::exp(-squared_distance(x, x2) / (2.0 * hp.lengthscale * hp.lengthscale));
}

inline Matrix squared_distances(const Matrix &X1, const Matrix &X2) {
  if (X1.cols() != X2.cols()) throw InputError("rbf_kernel: input dimension mismatch");
  Matrix D(X1.rows(), X2.rows());
  for (Eigen::Index i = 0; i < X1.rows(); ++i)
    for (Eigen::Index j = 0; j < X2.rows(); ++j) D(i, j) = (X1.row(i) - X2.row(j)).squaredNorm();
  return D;
}

inline Matrix rbf_gram(const Matrix &X1, const Matrix &X2, const Hyperparameters &hp) {
  const double c = -0.5 / (hp.lengthscale * hp.lengthscale);
  return (hp.sigma_f * hp.sigma_f) * (c * squared_distances(X1, X2)).array().exp().matrix();
}

inline Matrix index_task_kernel(const Hyperparameters &hp) {
  Matrix Kt = hp.task_factor_B * hp.task_factor_B.transpose();
  Kt.diagonal() += hp.task_diag_v;
  return Kt;
}

inline Matrix stack_inputs(const Matrix &A, const Matrix &B) {
  if (A.rows() == 0) return B;
  if (B.rows() == 0) return A;
  if (A.cols() != B.cols()) throw InputError("grids: input dimension mismatch");
  Matrix X(A.rows() + B.rows(), A.cols());
  X << A, B;
  return X;
}

/// Noise-free joint prior over [f_train; f_test].
inline GaussianDist build_multitask_prior(const MultitaskGrid &train, const MultitaskGrid &test, const Hyperparameters &hp) {
  hp.validate();
  if (train.num_points() == 0) throw InputError("build_multitask_prior: empty training grid");
  if (train.num_tasks != hp.num_tasks() || (test.num_points() > 0 && test.num_tasks != hp.num_tasks()))
    throw InputError("build_multitask_prior: task count differs from hyperparameters");
  const Matrix X = stack_inputs(train.inputs, test.inputs);
  const Matrix Kd = rbf_gram(X, X, hp);
  return {kron(Vector(Vector::Ones(X.rows())), hp.task_means), kron(Kd, index_task_kernel(hp))};
}

inline std::vector<Eigen::Index> retained_indices(Eigen::Index n, const std::vector<bool> &missing) {
  std::vector<Eigen::Index> keep;
  keep.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    if (i >= static_cast<Eigen::Index>(missing.size()) || !missing[i]) keep.push_back(i);
  return keep;
}

/// Drops the masked coordinates.  The mask covers a leading block; entries
/// past its end are always kept.
inline GaussianDist filter_missing(const GaussianDist &dist, const std::vector<bool> &missing) {
  if (static_cast<Eigen::Index>(missing.size()) > dist.size())
    throw InputError("filter_missing: mask longer than the distribution");
  const auto keep = retained_indices(dist.size(), missing);
  if (keep.empty()) throw InputError("filter_missing: every coordinate is masked");
  return {dist.mean(keep), dist.cov(keep, keep)};
}

inline GaussianDist filter_missing(const GaussianDist &dist, const MultitaskGrid &layout, const std::vector<bool> &missing) {
  if (static_cast<Eigen::Index>(missing.size()) != layout.size())
    throw InputError("filter_missing: mask length does not match the observation grid");
  return filter_missing(dist, missing);
}

/// Posterior over the trailing block given noisy observations of the leading
/// y.size() coordinates.
inline GaussianDist gp_predict(const GaussianDist &joint, const Vector &y_obs, double noise_sigma_n) {
  const Eigen::Index n = y_obs.size();
  const Eigen::Index m = joint.size() - n;
  if (m < 0) throw InputError("gp_predict: observation block larger than the joint");
  if (m == 0) return {Vector(0), Matrix(0, 0)};
  Matrix C = joint.cov.topLeftCorner(n, n);
  C.diagonal().array() += noise_sigma_n * noise_sigma_n;
  const JitteredCholesky chol(C, "gp_predict");
  const Matrix Ks = joint.cov.topRightCorner(n, m);
  const Vector alpha = chol.solve(y_obs - joint.mean.head(n));
  GaussianDist out;
  out.mean = joint.mean.tail(m) + Ks.transpose() * alpha;
  const Matrix V = chol.matrixL().solve(Ks);
  out.cov = joint.cov.bottomRightCorner(m, m) - V.transpose() * V;
  symmetrize(out.cov);
  return out;
}

/// Value of an objective together with its adjoint with respect to the prior
/// covariance (dK, symmetric), prior mean (dmean) and log noise std.
struct ObjectiveAdjoint {
  double value = 0.0;
  Matrix dK;
  Vector dmean;
  double dlog_noise = 0.0;
};

inline ObjectiveAdjoint exact_lml_adjoint(const GaussianDist &prior, const Vector &y_obs, double noise_sigma_n) {
  const Eigen::Index n = y_obs.size();
  if (prior.size() != n) throw InputError("log_marginal_likelihood: dimension mismatch");
  const double s = noise_sigma_n * noise_sigma_n;
  Matrix C = prior.cov;
  C.diagonal().array() += s;
  const JitteredCholesky chol(C, "log_marginal_likelihood");
  const Vector r = y_obs - prior.mean;
  const Vector alpha = chol.solve(r);
  ObjectiveAdjoint out;
  out.value = -0.5 * r.dot(alpha) - 0.5 * chol.log_det() - 0.5 * static_cast<double>(n) * kLog2Pi;
  const Matrix Cinv = chol.inverse();
  out.dK = 0.5 * (alpha * alpha.transpose() - Cinv);
  out.dmean = alpha;
  out.dlog_noise = s * (alpha.squaredNorm() - Cinv.trace());
  return out;
}

inline double log_marginal_likelihood(const GaussianDist &prior, const Vector &y_obs, double noise_sigma_n) {
  const Eigen::Index n = y_obs.size();
  if (prior.size() != n) throw InputError("log_marginal_likelihood: dimension mismatch");
  Matrix C = prior.cov;
  C.diagonal().array() += noise_sigma_n * noise_sigma_n;
  const JitteredCholesky chol(C, "log_marginal_likelihood");
  const Vector r = y_obs - prior.mean;
  return -0.5 * r.dot(chol.solve(r)) - 0.5 * chol.log_det() - 0.5 * static_cast<double>(n) * kLog2Pi;
}

/// Pulls an adjoint on the full Kronecker prior (cov = Kd ⊗ Kt, mean = 1 ⊗ m_t)
/// back to the packed hyperparameters.  `dtask_cov` and `dtask_mean`, when
/// given, replace the contraction over the task block; this is how the
/// constant-constraint path injects its task-space adjoint.
inline Matrix contract_data_adjoint(const Matrix &M, const Matrix &Kt) {
  const Eigen::Index T = Kt.rows();
  const Eigen::Index N = M.rows() / T;
  Matrix G(N, N);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) G(i, j) = M.block(i * T, j * T, T, T).cwiseProduct(Kt).sum();
  return G;
}

inline Matrix contract_task_adjoint(const Matrix &M, const Matrix &Kd) {
  const Eigen::Index N = Kd.rows();
  const Eigen::Index T = M.rows() / N;
  Matrix G = Matrix::Zero(T, T);
  for (Eigen::Index i = 0; i < N; ++i)
    for (Eigen::Index j = 0; j < N; ++j) G.noalias() += Kd(i, j) * M.block(i * T, j * T, T, T);
  return G;
}

inline Vector contract_mean_adjoint(const Vector &v, Eigen::Index T) {
  Vector g = Vector::Zero(T);
  for (Eigen::Index i = 0; i < v.size() / T; ++i) g += v.segment(i * T, T);
  return g;
}

/// Gradient of the packed hyperparameters given adjoints on the data kernel
/// Kd (G_data), task kernel (G_task) and task means (g_mean).
inline Vector kernel_gradient(const Hyperparameters &hp, const Matrix &X, const Matrix &G_data, const Matrix &G_task,
                              const Vector &g_mean) {
  const Matrix D2 = squared_distances(X, X);
  const Matrix Kd = rbf_gram(X, X, hp);
  const double l2 = hp.lengthscale * hp.lengthscale;
  Vector grad = Vector::Zero(hp.packed_size());
  Eigen::Index k = 0;
  grad(k++) = 2.0 * G_data.cwiseProduct(Kd).sum();
  grad(k++) = G_data.cwiseProduct(Kd).cwiseProduct(D2).sum() / l2;
  const Matrix dB = (G_task + G_task.transpose()) * hp.task_factor_B;
  for (Eigen::Index a = 0; a < dB.rows(); ++a)
    for (Eigen::Index j = 0; j < dB.cols(); ++j) grad(k++) = dB(a, j);
  for (Eigen::Index a = 0; a < hp.task_diag_v.size(); ++a) grad(k++) = G_task(a, a) * hp.task_diag_v(a);
  for (Eigen::Index a = 0; a < g_mean.size(); ++a) grad(k++) = g_mean(a);
  return grad;
}

inline Vector multitask_prior_gradient(const Hyperparameters &hp, const Matrix &X, const Matrix &M, const Vector &v) {
  const Matrix Kd = rbf_gram(X, X, hp);
  const Matrix Kt = index_task_kernel(hp);
  return kernel_gradient(hp, X, contract_data_adjoint(M, Kt), contract_task_adjoint(M, Kd),
                         contract_mean_adjoint(v, Kt.rows()));
}

/// Scatters an adjoint over retained coordinates back onto the full grid.
inline void scatter_adjoint(const std::vector<Eigen::Index> &keep, const Matrix &M_obs, const Vector &v_obs, Eigen::Index n,
                            Matrix &M, Vector &v) {
  M = Matrix::Zero(n, n);
  v = Vector::Zero(n);
  const auto k = static_cast<Eigen::Index>(keep.size());
  for (Eigen::Index a = 0; a < k; ++a) {
    v(keep[a]) = v_obs(a);
    for (Eigen::Index b = 0; b < k; ++b) M(keep[a], keep[b]) = M_obs(a, b);
  }
}

}  // namespace sumgp
