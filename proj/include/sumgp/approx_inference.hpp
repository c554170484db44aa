#pragma once

#include "sumgp/likelihoods.hpp"

#include <array>
#include <vector>

namespace sumgp {

/// Per-entry likelihood kinds for a block of observations.
using LikelihoodKinds = std::vector<TaskTransform>;

inline double sum_loglik(const Vector &y, const Vector &f, const LikelihoodKinds &lik, double sigma_n) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) s += transformed_likelihood(y(i), f(i), lik[i], sigma_n).logp;
  return s;
}

struct LaplaceState {
  Vector mode_f_hat;
  Vector a;  // K⁻¹(f̂ - m), equal to ∇log p(y'|f̂) at the fixed point
  Vector W;  // diagonal of -∇∇log p(y'|f̂)
  double step_gamma = 1.0;
  int iterations = 0;
  double psi = 0.0;
  double residual = 0.0;
};

namespace detail {

struct LikBlock {
  Vector lp, d1, d2, d3, dn, d1n, d2n;
};

inline LikBlock eval_block(const Vector &y, const Vector &f, const LikelihoodKinds &lik, double sigma_n) {
  const Eigen::Index n = y.size();
  LikBlock b{Vector(n), Vector(n), Vector(n), Vector(n), Vector(n), Vector(n), Vector(n)};
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto L = transformed_likelihood(y(i), f(i), lik[i], sigma_n);
    b.lp(i) = L.logp;
    b.d1(i) = L.d1;
    b.d2(i) = L.d2;
    b.d3(i) = L.d3;
    b.dn(i) = L.dn;
    b.d1n(i) = L.d1n;
    b.d2n(i) = L.d2n;
  }
  return b;
}

inline double laplace_psi(const Vector &a, const Vector &f, const Vector &m, const Vector &y, const LikelihoodKinds &lik,
                          double sigma_n) {
  return -0.5 * a.dot(f - m) + sum_loglik(y, f, lik, sigma_n);
}

}  // namespace detail

/// Newton iteration for the posterior mode in the parametrization
/// f = m + K a, which never forms K⁻¹ and so tolerates the singular priors
/// produced by constraint conditioning.  Steps start at `gamma` and halve
/// while Ψ decreases.
inline LaplaceState laplace_mode(const GaussianDist &prior, const Vector &y, const LikelihoodKinds &lik, double noise_sigma_n,
                                 double gamma = 1.0, const Vector *warm_start = nullptr, int max_iter = 200, double tol = 1e-9) {
  const Eigen::Index n = y.size();
  if (prior.size() != n || static_cast<Eigen::Index>(lik.size()) != n) throw InputError("laplace_mode: dimension mismatch");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw InputError("laplace_mode: gamma must lie in (0, 1]");
  const Matrix &K = prior.cov;
  const Vector &m = prior.mean;
  LaplaceState st;
  st.a = warm_start && warm_start->size() == n ? *warm_start : Vector(Vector::Zero(n));
  Vector f = m + K * st.a;
  double psi = detail::laplace_psi(st.a, f, m, y, lik, noise_sigma_n);
  if (!std::isfinite(psi)) {
    st.a.setZero();
    f = m;
    psi = detail::laplace_psi(st.a, f, m, y, lik, noise_sigma_n);
  }
  bool converged = false;
  for (int it = 0; it < max_iter; ++it) {
    st.iterations = it + 1;
    const auto L = detail::eval_block(y, f, lik, noise_sigma_n);
    const Vector Wp = (-L.d2).cwiseMax(0.0);
    const Vector sW = Wp.cwiseSqrt();
    const Vector b = Wp.cwiseProduct(f - m) + L.d1;
    Matrix B = sW.asDiagonal() * K * sW.asDiagonal();
    B.diagonal().array() += 1.0;
    const JitteredCholesky chol(B, "laplace_mode");
    const Vector a_newton = b - sW.cwiseProduct(chol.solve(sW.cwiseProduct(K * b)));
    const Vector da = a_newton - st.a;
    double step = gamma;
    Vector a_try, f_try;
    double psi_try = -std::numeric_limits<double>::infinity();
    for (int h = 0; h < 40; ++h) {
      a_try = st.a + step * da;
      f_try = m + K * a_try;
      psi_try = detail::laplace_psi(a_try, f_try, m, y, lik, noise_sigma_n);
      if (std::isfinite(psi_try) && psi_try >= psi - 1e-12 * (1.0 + std::abs(psi))) break;
      step *= 0.5;
    }
    if (!std::isfinite(psi_try)) throw NumericError("laplace_mode: objective became non-finite");
    const double change = (f_try - f).cwiseAbs().maxCoeff();
    st.step_gamma = step;
    st.a = a_try;
    f = f_try;
    psi = psi_try;
    if (change <= tol * std::max(1.0, f.cwiseAbs().maxCoeff())) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericError("laplace_mode: Newton iteration did not converge in " + std::to_string(max_iter) + " steps");
  const auto L = detail::eval_block(y, f, lik, noise_sigma_n);
  st.mode_f_hat = f;
  st.W = -L.d2;
  st.psi = psi;
  st.residual = (f - m - K * L.d1).cwiseAbs().maxCoeff();
  return st;
}

namespace detail {

struct LaplaceFactors {
  Eigen::PartialPivLU<Matrix> lu;  // of I + K W
  double log_det = 0.0;
};

inline LaplaceFactors laplace_factors(const Matrix &K, const Vector &W) {
  const Eigen::Index n = K.rows();
  Matrix P = K * W.asDiagonal();
  P.diagonal().array() += 1.0;
  LaplaceFactors fac{Eigen::PartialPivLU<Matrix>(P), 0.0};
  const Matrix &LU = fac.lu.matrixLU();
  double ld = 0.0;
  int sign = fac.lu.permutationP().determinant();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double d = LU(i, i);
    if (d == 0.0 || !std::isfinite(d)) throw NumericError("laplace: I + K W is singular");
    if (d < 0.0) sign = -sign;
    ld += std::log(std::abs(d));
  }
  if (sign < 0) throw NumericError("laplace: I + K W has negative determinant; posterior curvature is indefinite");
  fac.log_det = ld;
  return fac;
}

}  // namespace detail

inline double laplace_lml(const LaplaceState &st, const GaussianDist &prior, const Vector &y, const LikelihoodKinds &lik,
                          double noise_sigma_n) {
  const auto fac = detail::laplace_factors(prior.cov, st.W);
  return -0.5 * st.a.dot(st.mode_f_hat - prior.mean) + sum_loglik(y, st.mode_f_hat, lik, noise_sigma_n) - 0.5 * fac.log_det;
}

/// Laplace evidence with its adjoint on (K, m, log sigma_n), including the
/// implicit dependence of the mode on the prior.
inline ObjectiveAdjoint laplace_lml_adjoint(const LaplaceState &st, const GaussianDist &prior, const Vector &y,
                                            const LikelihoodKinds &lik, double noise_sigma_n) {
  const Matrix &K = prior.cov;
  const auto fac = detail::laplace_factors(K, st.W);
  const auto L = detail::eval_block(y, st.mode_f_hat, lik, noise_sigma_n);
  const Vector &a = st.a;
  ObjectiveAdjoint out;
  out.value = -0.5 * a.dot(st.mode_f_hat - prior.mean) + L.lp.sum() - 0.5 * fac.log_det;
  const Matrix Vpost = fac.lu.solve(K);                 // (I + K W)⁻¹ K
  Matrix R = st.W.asDiagonal() * fac.lu.inverse();      // W (I + K W)⁻¹
  symmetrize(R);
  const Vector s2 = 0.5 * Vpost.diagonal().cwiseProduct(L.d3);
  const Vector st_ = fac.lu.transpose().solve(s2);
  const Matrix cross = a * st_.transpose();
  out.dK = 0.5 * (a * a.transpose() - R) + 0.5 * (cross + cross.transpose());
  out.dmean = a + st_;
  out.dlog_noise = L.dn.sum() + 0.5 * Vpost.diagonal().dot(L.d2n) + s2.dot(Vpost * L.d1n);
  return out;
}

/// Predictive Gaussian at test points: mean m* + K*ᵀa, cov K** - K*ᵀ(K + W⁻¹)⁻¹K*.
inline GaussianDist laplace_predict(const LaplaceState &st, const Matrix &K, const Matrix &K_star, const Matrix &K_starstar,
                                    const Vector &m_star) {
  const auto fac = detail::laplace_factors(K, st.W);
  Matrix R = st.W.asDiagonal() * fac.lu.inverse();
  symmetrize(R);
  GaussianDist out;
  out.mean = m_star + K_star.transpose() * st.a;
  out.cov = K_starstar - K_star.transpose() * R * K_star;
  symmetrize(out.cov);
  return out;
}

// ---------------------------------------------------------------------------
// Variational inference

/// Gauss–Hermite rule (physicists' weight e^{-x²}) from the Golub–Welsch
/// eigenproblem.
inline std::pair<Vector, Vector> gauss_hermite(int order) {
  Matrix J = Matrix::Zero(order, order);
  for (int i = 1; i < order; ++i) J(i, i - 1) = J(i - 1, i) = std::sqrt(0.5 * i);
  Eigen::SelfAdjointEigenSolver<Matrix> es(J);
  const Vector x = es.eigenvalues();
  const Vector w = std::sqrt(std::numbers::pi) * es.eigenvectors().row(0).transpose().array().square().matrix();
  return {x, w};
}

inline const std::pair<Vector, Vector> &gauss_hermite_32() {
  static const auto rule = gauss_hermite(32);
  return rule;
}

/// E[log p(y|f)] for f ~ N(mu, var) with derivatives in mu, var and log sigma_n.
struct ExpectedLik {
  double value = 0.0, dmu = 0.0, dvar = 0.0, dnoise = 0.0;
};

inline ExpectedLik expected_loglik(double y, double mu, double var, const TaskTransform &t, double noise_sigma_n) {
  const auto &[x, w] = gauss_hermite_32();
  const double sd = std::sqrt(2.0 * std::max(var, 0.0));
  ExpectedLik e;
  for (Eigen::Index k = 0; k < x.size(); ++k) {
    const auto L = transformed_likelihood(y, mu + sd * x(k), t, noise_sigma_n);
    const double wk = w(k) / std::sqrt(std::numbers::pi);
    e.value += wk * L.logp;
    e.dmu += wk * L.d1;
    // Differentiate the quadrature sum itself so the gradient is exact for the
    // objective actually evaluated; falls back to Stein's identity at var = 0.
    e.dvar += sd > 0.0 ? wk * L.d1 * x(k) / sd : 0.5 * wk * L.d2;
    e.dnoise += wk * L.dn;
  }
  if (!std::isfinite(e.value)) throw NumericError("elbo: quadrature produced a non-finite value");
  return e;
}

struct VariationalState {
  Vector mu_q;
  Matrix chol_L_q;

  void validate() const {
    if (chol_L_q.rows() != mu_q.size() || chol_L_q.cols() != mu_q.size()) throw InputError("VariationalState: shape mismatch");
    if (!(chol_L_q.diagonal().array() > 0.0).all()) throw InputError("VariationalState: Cholesky diagonal must be positive");
  }
};

/// ELBO in function space: Σ E_q[log p(y_i|f_i)] - KL(q || N(m, K)).
inline double elbo(const VariationalState &q, const GaussianDist &prior, const Vector &y, const LikelihoodKinds &lik,
                   double noise_sigma_n) {
  q.validate();
  const Eigen::Index n = y.size();
  const Matrix Lq = q.chol_L_q.triangularView<Eigen::Lower>();
  const Vector var = Lq.rowwise().squaredNorm();
  double ell = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) ell += expected_loglik(y(i), q.mu_q(i), var(i), lik[i], noise_sigma_n).value;
  const JitteredCholesky chol(prior.cov, "elbo");
  const Matrix LiLq = chol.matrixL().solve(Lq);
  const Vector Lid = chol.matrixL().solve(q.mu_q - prior.mean);
  const double kl = 0.5 * (LiLq.squaredNorm() + Lid.squaredNorm() - static_cast<double>(n) + chol.log_det() -
                           2.0 * Lq.diagonal().array().log().sum());
  return ell - kl;
}

inline GaussianDist variational_predict(const VariationalState &q, const GaussianDist &prior, const Matrix &K_star,
                                        const Matrix &K_starstar, const Vector &m_star) {
  q.validate();
  const JitteredCholesky chol(prior.cov, "variational_predict");
  const Matrix A = chol.matrixL().solve(K_star);  // L⁻¹K*
  const Vector u = chol.matrixL().solve(q.mu_q - prior.mean);
  const Matrix Lu = chol.matrixL().solve(Matrix(q.chol_L_q.triangularView<Eigen::Lower>()));
  const Matrix B = Lu.transpose() * A;
  GaussianDist out;
  out.mean = m_star + A.transpose() * u;
  out.cov = K_starstar - A.transpose() * A + B.transpose() * B;
  symmetrize(out.cov);
  return out;
}

/// Whitened variational parameters: f = m + L_K u with u ~ N(mu_u, L_u L_uᵀ).
/// Packed as [mu_u, lower triangle of L_u column-major with log diagonal].
struct WhitenedVariational {
  Vector mu_u;
  Matrix L_u;

  static WhitenedVariational prior(Eigen::Index n) { return {Vector::Zero(n), Matrix::Identity(n, n)}; }

  static Eigen::Index packed_size(Eigen::Index n) { return n + n * (n + 1) / 2; }

  Vector pack() const {
    const Eigen::Index n = mu_u.size();
    Vector p(packed_size(n));
    p.head(n) = mu_u;
    Eigen::Index k = n;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = j; i < n; ++i) p(k++) = i == j ? std::log(L_u(i, i)) : L_u(i, j);
    return p;
  }

  static WhitenedVariational unpack(const Vector &p, Eigen::Index n) {
    if (p.size() != packed_size(n)) throw InputError("WhitenedVariational: packed vector has wrong length");
    WhitenedVariational v{p.head(n), Matrix::Zero(n, n)};
    Eigen::Index k = n;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = j; i < n; ++i) v.L_u(i, j) = i == j ? std::exp(p(k++)) : p(k++);
    return v;
  }

  VariationalState to_state(const Matrix &L_K, const Vector &m) const {
    return {m + L_K * mu_u, L_K * L_u};
  }
};

/// Adjoint of a symmetric matrix through its Cholesky factor: given dZ/dL
/// (lower triangle), returns the symmetric dZ/dK.
inline Matrix cholesky_backprop(const Matrix &L, const Matrix &Lbar) {
  Matrix P = (L.transpose() * Matrix(Lbar.triangularView<Eigen::Lower>())).triangularView<Eigen::Lower>();
  P.diagonal() *= 0.5;
  const auto Lt = L.triangularView<Eigen::Lower>();
  Matrix S = Lt.transpose().solve(P);                           // L⁻ᵀ P
  S = Lt.transpose().solve(S.transpose()).transpose().eval();   // (L⁻ᵀ P) L⁻¹
  return 0.5 * (S + S.transpose());
}

struct WhitenedElbo {
  ObjectiveAdjoint prior_adjoint;
  Vector dvariational;
};

/// ELBO in whitened coordinates with gradients for the prior (through the
/// Cholesky factor of K) and the packed variational parameters.
inline WhitenedElbo whitened_elbo(const WhitenedVariational &q, const GaussianDist &prior, const Vector &y,
                                  const LikelihoodKinds &lik, double noise_sigma_n) {
  const Eigen::Index n = y.size();
  if (q.mu_u.size() != n || prior.size() != n) throw InputError("whitened_elbo: dimension mismatch");
  const JitteredCholesky chol(prior.cov, "whitened_elbo");
  const Matrix L = chol.matrixL();
  const Matrix P = L * q.L_u;
  const Vector mean = prior.mean + L * q.mu_u;
  const Vector var = P.rowwise().squaredNorm();
  Vector g(n), h(n);
  WhitenedElbo out;
  double ell = 0.0, dnoise = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto e = expected_loglik(y(i), mean(i), var(i), lik[i], noise_sigma_n);
    ell += e.value;
    g(i) = e.dmu;
    h(i) = e.dvar;
    dnoise += e.dnoise;
  }
  const double kl = 0.5 * (q.L_u.squaredNorm() + q.mu_u.squaredNorm() - static_cast<double>(n) -
                           2.0 * q.L_u.diagonal().array().log().sum());
  const Matrix dP = 2.0 * h.asDiagonal() * P;
  const Matrix Lbar = g * q.mu_u.transpose() + dP * q.L_u.transpose();
  out.prior_adjoint.value = ell - kl;
  out.prior_adjoint.dK = cholesky_backprop(L, Lbar);
  out.prior_adjoint.dmean = g;
  out.prior_adjoint.dlog_noise = dnoise;
  const Vector dmu = L.transpose() * g - q.mu_u;
  Matrix dLu = L.transpose() * dP - q.L_u;
  for (Eigen::Index i = 0; i < n; ++i) dLu(i, i) += 1.0 / q.L_u(i, i);
  out.dvariational.resize(WhitenedVariational::packed_size(n));
  out.dvariational.head(n) = dmu;
  Eigen::Index k = n;
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = j; i < n; ++i) out.dvariational(k++) = i == j ? dLu(i, i) * q.L_u(i, i) : dLu(i, j);
  return out;
}

}  // namespace sumgp
