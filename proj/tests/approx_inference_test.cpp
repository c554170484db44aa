#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace sumgp;
using namespace sumgp::testing;

namespace {

const TaskTransform kIdentity{Nonlinearity::Identity, 0, nullptr};
const TaskTransform kSquare{Nonlinearity::Square, 0, nullptr};
const TaskTransform kLog{Nonlinearity::Log, 0, nullptr};
const TaskTransform kSine{Nonlinearity::Sine, 0, nullptr};

// Composite Simpson rule.
double simpson(const std::function<double(double)> &f, double a, double b, int n = 200000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4.0 : 2.0) * f(a + i * h);
  return s * h / 3.0;
}

struct Instance {
  GaussianDist prior;
  Vector y;
  double sigma;
};

Instance random_instance(int n, std::mt19937_64 &rng) {
  return {{random_vector(n, rng), random_spd(n, rng)}, random_vector(n, rng), 0.3 + 0.4 * std::abs(random_vector(1, rng)(0))};
}

GaussianDist exact_posterior(const Instance &in) {
  const Eigen::Index n = in.y.size();
  GaussianDist joint{Vector(2 * n), Matrix(2 * n, 2 * n)};
  joint.mean << in.prior.mean, in.prior.mean;
  joint.cov << in.prior.cov, in.prior.cov, in.prior.cov, in.prior.cov;
  return gp_predict(joint, in.y, in.sigma);
}

}  // namespace

TEST(TransformedLikelihood, IdentityIsGaussian) {
  for (double f : {-1.0, 0.0, 0.7})
    for (double y : {-0.5, 0.2, 2.0}) {
      const double s = 0.3;
      const double expected = std::exp(-0.5 * (y - f) * (y - f) / (s * s)) / std::sqrt(2 * std::numbers::pi * s * s);
      EXPECT_NEAR(transformed_density(y, f, kIdentity, s), expected, 1e-14);
    }
}

TEST(TransformedLikelihood, SquareDensityIntegratesToOne) {
  for (auto [f, s] : {std::pair{4.0, 0.1}, std::pair{0.5, 0.3}, std::pair{0.0, 0.2}, std::pair{0.01, 0.1}}) {
    // Substitute y' = g² to remove the 1/sqrt(y') singularity at zero.
    const double mass = simpson([&](double g) { const double gg = std::max(g, 1e-5); return transformed_density(gg * gg, f, kSquare, s) * 2.0 * gg; }, 0.0,
                                std::sqrt(f) + 12.0 * s);
    EXPECT_NEAR(mass, 1.0, 1e-6) << "f'=" << f << " sigma=" << s;
  }
}

TEST(TransformedLikelihood, SquareMatchesMonteCarloHistogram) {
  std::mt19937_64 rng(50);
  std::normal_distribution<double> nd(0.0, 0.1);
  const int n = 1000000;
  const double lo = 3.0, hi = 5.0, width = 0.05;
  const int bins = static_cast<int>((hi - lo) / width);
  std::vector<int> counts(static_cast<std::size_t>(bins), 0);
  for (int i = 0; i < n; ++i) {
    const double y = std::pow(2.0 + nd(rng), 2);
    if (y >= lo && y < hi) ++counts[static_cast<std::size_t>((y - lo) / width)];
  }
  int argmax = 0;
  for (int b = 0; b < bins; ++b) {
    const double centre = lo + (b + 0.5) * width;
    const double expected = simpson([&](double y) { return transformed_density(y, 4.0, kSquare, 0.1); }, centre - width / 2,
                                    centre + width / 2, 200);
    const double observed = counts[b] / static_cast<double>(n);
    EXPECT_NEAR(observed, expected, 5.0 * std::sqrt(expected / n) + 1e-6);
    if (counts[b] > counts[argmax]) argmax = b;
  }
  EXPECT_NEAR(lo + (argmax + 0.5) * width, 4.0, 0.1);
}

TEST(TransformedLikelihood, LogAndSineDensitiesIntegrateToOne) {
  const double log_mass = simpson([](double y) { return transformed_density(y, 0.5, kLog, 0.1); }, -12.0, 3.0);
  EXPECT_NEAR(log_mass, 1.0, 1e-6);
  const double sine_mass = simpson(
      [](double th) { return transformed_density(std::sin(th), 0.3, kSine, 0.1) * std::cos(th); }, -std::numbers::pi / 2,
      std::numbers::pi / 2);
  EXPECT_NEAR(sine_mass, 1.0, 1e-6);
}

TEST(TransformedLikelihood, UnsupportedObservationHitsFloor) {
  EXPECT_EQ(transformed_likelihood(-1.0, 1.0, kSquare, 0.1).logp, kLogDensityFloor);
  EXPECT_EQ(transformed_density(1.5, 0.2, kSine, 0.1), 0.0);
}

TEST(TransformedLikelihood, DerivativesMatchFiniteDifferences) {
  struct Case {
    TaskTransform t;
    double y, f, s;
  };
  const std::vector<Case> cases{{kSquare, 4.2, 3.9, 0.1},  {kSquare, 0.3, 0.2, 0.2}, {kSquare, 0.0, 0.5, 0.1},
                                {kSquare, 0.5, -0.02, 0.1}, {kSquare, 1e-4, 1e-5, 0.3}, {kLog, 0.3, 0.1, 0.2},
                                {kSine, 0.4, 0.3, 0.1},     {kSine, 0.99, 0.9, 0.1},   {kIdentity, 1.0, 0.3, 0.5},
                                {kSquare, 1.0, -0.7, 0.05}, {kSquare, 0.0, -0.3, 0.1}};
  for (const auto &c : cases) {
    const auto L = transformed_likelihood(c.y, c.f, c.t, c.s);
    const double h = 1e-5 * std::max(1e-2, std::abs(c.f));
    auto at = [&](double f, double s) { return transformed_likelihood(c.y, f, c.t, s); };
    auto rel = [](double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); };
    EXPECT_LT(rel(L.d1, (at(c.f + h, c.s).logp - at(c.f - h, c.s).logp) / (2 * h)), 1e-5);
    EXPECT_LT(rel(L.d2, (at(c.f + h, c.s).d1 - at(c.f - h, c.s).d1) / (2 * h)), 1e-5);
    EXPECT_LT(rel(L.d3, (at(c.f + h, c.s).d2 - at(c.f - h, c.s).d2) / (2 * h)), 1e-4);
    const double e = 1e-6;
    const double sp = c.s * std::exp(e), sm = c.s * std::exp(-e);
    EXPECT_LT(rel(L.dn, (at(c.f, sp).logp - at(c.f, sm).logp) / (2 * e)), 1e-5);
    EXPECT_LT(rel(L.d1n, (at(c.f, sp).d1 - at(c.f, sm).d1) / (2 * e)), 1e-5);
    EXPECT_LT(rel(L.d2n, (at(c.f, sp).d2 - at(c.f, sm).d2) / (2 * e)), 1e-5);
  }
}

TEST(TransformedLikelihood, SquareContinuationIsSmoothAndMild) {
  for (double y : {0.0, 0.3, 2.0}) {
    // Step across zero and compare with a first-order extrapolation.
    const double h = 1e-9;
    const auto below = transformed_likelihood(y, -h, kSquare, 0.1);
    const auto above = transformed_likelihood(y, h, kSquare, 0.1);
    EXPECT_NEAR(below.logp, above.logp - 2 * h * above.d1, 1e-9);
    EXPECT_NEAR(below.d1, above.d1 - 2 * h * above.d2, 1e-6 * std::max(1.0, std::abs(above.d1)));
    // d3 may jump at zero, so the curvature gap only has to vanish with h.
    const double gap = std::abs(below.d2 - above.d2);
    const double gap10 = std::abs(transformed_likelihood(y, -h / 10, kSquare, 0.1).d2 - transformed_likelihood(y, h / 10, kSquare, 0.1).d2);
    EXPECT_LE(gap10, 0.2 * gap + 1e-9 * std::max(1.0, std::abs(above.d2)));
  }
  // Far below zero the fall-off is Gaussian of width σ² (quadratic in f),
  // for small and large y alike.
  for (double y : {0.0, 1e-6, 1.0}) {
    const double s = 0.05 * 0.05, f = -1.0;
    const auto far = transformed_likelihood(y, f, kSquare, 0.05);
    EXPECT_NEAR(far.d2 * s * s, -1.0, 1e-2);
    EXPECT_GT(far.d1, 0.0);
  }
}

TEST(Laplace, GaussianCaseReproducesExactGp) {
  std::mt19937_64 rng(60);
  for (int rep = 0; rep < 50; ++rep) {
    const int n = 2 + rep % 7;
    const auto in = random_instance(n, rng);
    const LikelihoodKinds lik(static_cast<std::size_t>(n), kIdentity);
    const auto st = laplace_mode(in.prior, in.y, lik, in.sigma);
    const auto post = exact_posterior(in);
    EXPECT_LT((st.mode_f_hat - post.mean).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_NEAR(laplace_lml(st, in.prior, in.y, lik, in.sigma), log_marginal_likelihood(in.prior, in.y, in.sigma), 1e-8);
    const Matrix Ks = random_matrix(n, 3, rng) * 0.3;
    const Matrix Kss = random_spd(3, rng) + Ks.transpose() * Ks;
    const Vector ms = random_vector(3, rng);
    GaussianDist joint{Vector(n + 3), Matrix(n + 3, n + 3)};
    joint.mean << in.prior.mean, ms;
    joint.cov << in.prior.cov, Ks, Ks.transpose(), Kss;
    const auto exact = gp_predict(joint, in.y, in.sigma);
    const auto lap = laplace_predict(st, in.prior.cov, Ks, Kss, ms);
    EXPECT_LT((lap.mean - exact.mean).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((lap.cov - exact.cov).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Laplace, ScalarClosedFormEvidence) {
  const GaussianDist prior{Vector::Zero(1), Matrix::Identity(1, 1)};
  const LikelihoodKinds lik{kIdentity};
  const auto st = laplace_mode(prior, Vector::Zero(1), lik, 1.0);
  EXPECT_NEAR(laplace_lml(st, prior, Vector::Zero(1), lik, 1.0), -0.5 * std::log(4 * std::numbers::pi), 1e-12);
}

TEST(Laplace, HugeNoiseGivesPriorMean) {
  std::mt19937_64 rng(61);
  const auto in = random_instance(4, rng);
  const LikelihoodKinds lik(4, kIdentity);
  const auto st = laplace_mode(in.prior, in.y, lik, 1e6);
  EXPECT_LT((st.mode_f_hat - in.prior.mean).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Laplace, SquareModeMatchesGridSearch) {
  std::mt19937_64 rng(62);
  const Matrix X = Vector::LinSpaced(3, 0.0, 1.0);
  Hyperparameters hp = Hyperparameters::defaults(1, 1);
  hp.task_means(0) = 1.0;
  const auto prior = build_multitask_prior({X, 1}, {Matrix(0, 1), 1}, hp);
  Vector y(3);
  y << 1.2, 0.8, 0.0;
  const LikelihoodKinds lik(3, kSquare);
  const double s = 0.3;
  const auto st = laplace_mode(prior, y, lik, s);
  const Matrix Kinv = prior.cov.inverse();
  auto psi = [&](const Vector &f) { return sum_loglik(y, f, lik, s) - 0.5 * (f - prior.mean).dot(Kinv * (f - prior.mean)); };
  Vector centre = prior.mean;
  double half = 1.5;
  const int g = 30;
  for (int round = 0; round < 6; ++round) {
    Vector best = centre;
    double best_val = psi(centre);
    for (int i = 0; i <= g; ++i)
      for (int j = 0; j <= g; ++j)
        for (int k = 0; k <= g; ++k) {
          Vector f = centre + half * (Vector(3) << 2.0 * i / g - 1, 2.0 * j / g - 1, 2.0 * k / g - 1).finished();
          const double v = psi(f);
          if (v > best_val) {
            best_val = v;
            best = f;
          }
        }
    centre = best;
    half *= 0.25;
  }
  EXPECT_LT((st.mode_f_hat - centre).cwiseAbs().maxCoeff(), 4.0 * half);
  EXPECT_LE(st.residual, 1e-8);
}

TEST(Laplace, PredictiveCovariancePsdAndShrinks) {
  std::mt19937_64 rng(63);
  for (int rep = 0; rep < 10; ++rep) {
    const Matrix X = Vector::LinSpaced(5, 0.0, 2.0);
    const Matrix Xs = random_matrix(4, 1, rng);
    Hyperparameters hp = random_hyperparameters(1, 1, rng);
    hp.task_means(0) = 1.5;
    const auto joint = build_multitask_prior({X, 1}, {Xs, 1}, hp);
    const GaussianDist prior = joint.block(0, 5);
    const Vector y = (1.5 + 0.3 * random_vector(5, rng).array()).square();
    const LikelihoodKinds lik(5, kSquare);
    const auto st = laplace_mode(prior, y, lik, 0.2);
    const auto pred = laplace_predict(st, prior.cov, joint.cov.topRightCorner(5, 4), joint.cov.bottomRightCorner(4, 4),
                                      joint.mean.tail(4));
    EXPECT_TRUE(is_valid_covariance(pred.cov));
    EXPECT_TRUE(((pred.cov.diagonal() - joint.cov.diagonal().tail(4)).array() <= 1e-10).all());
  }
}

TEST(Laplace, EvidenceGradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(64);
  const int T = 2;
  const Matrix X = Vector::LinSpaced(5, 0.0, 3.0);
  Hyperparameters hp = random_hyperparameters(T, T, rng);
  hp.task_means << 1.0, 0.5;
  hp.noise_sigma_n = 0.2;
  const LikelihoodKinds lik{kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity};
  Vector y(10);
  y << 1.1, 0.9, 0.8, 0.6, 1.5, 1.3, 0.4, 0.7, 0.9, 1.0;
  auto objective = [&](const Vector &theta) {
    Hyperparameters h = hp;
    h.unpack(theta);
    const auto prior = build_multitask_prior({X, T}, {Matrix(0, 1), T}, h);
    const auto st = laplace_mode(prior, y, lik, h.noise_sigma_n, 1.0, nullptr, 200, 1e-13);
    return laplace_lml(st, prior, y, lik, h.noise_sigma_n);
  };
  const auto prior = build_multitask_prior({X, T}, {Matrix(0, 1), T}, hp);
  const auto st = laplace_mode(prior, y, lik, hp.noise_sigma_n, 1.0, nullptr, 200, 1e-13);
  const auto adj = laplace_lml_adjoint(st, prior, y, lik, hp.noise_sigma_n);
  Vector grad = multitask_prior_gradient(hp, X, adj.dK, adj.dmean);
  grad(hp.noise_index()) = adj.dlog_noise;
  const Vector fd = fd_gradient(objective, hp.pack());
  EXPECT_LE(max_rel_error(grad, fd), 1e-4) << grad.transpose() << "\n" << fd.transpose();
  EXPECT_LE(std::abs(grad(1) - fd(1)) / std::max(1e-8, std::abs(fd(1))), 1e-3);
}

TEST(GaussHermite, IntegratesPolynomialsExactly) {
  const auto [x, w] = gauss_hermite(32);
  EXPECT_NEAR(w.sum(), std::sqrt(std::numbers::pi), 1e-12);
  // E[z^4] = 3 for z ~ N(0, 1).
  double m4 = 0.0;
  for (Eigen::Index k = 0; k < x.size(); ++k) m4 += w(k) * std::pow(std::sqrt(2.0) * x(k), 4);
  EXPECT_NEAR(m4 / std::sqrt(std::numbers::pi), 3.0, 1e-10);
}

TEST(Elbo, ExactPosteriorGivesEvidence) {
  std::mt19937_64 rng(70);
  for (int rep = 0; rep < 10; ++rep) {
    const int n = 2 + rep % 5;
    const auto in = random_instance(n, rng);
    const LikelihoodKinds lik(static_cast<std::size_t>(n), kIdentity);
    const auto post = exact_posterior(in);
    const VariationalState q{post.mean, JitteredCholesky(post.cov).matrixL()};
    EXPECT_NEAR(elbo(q, in.prior, in.y, lik, in.sigma), log_marginal_likelihood(in.prior, in.y, in.sigma), 1e-6);
  }
}

TEST(Elbo, LowerBoundsEvidence) {
  std::mt19937_64 rng(71);
  for (int rep = 0; rep < 30; ++rep) {
    const int n = 2 + rep % 5;
    const auto in = random_instance(n, rng);
    const LikelihoodKinds lik(static_cast<std::size_t>(n), kIdentity);
    Matrix L = random_matrix(n, n, rng).triangularView<Eigen::Lower>();
    L.diagonal() = L.diagonal().cwiseAbs().array() + 0.1;
    const VariationalState q{random_vector(n, rng), L};
    EXPECT_LE(elbo(q, in.prior, in.y, lik, in.sigma), log_marginal_likelihood(in.prior, in.y, in.sigma) + 1e-6);
  }
}

TEST(VariationalPredict, PriorAndPosteriorLimits) {
  std::mt19937_64 rng(72);
  const int n = 4;
  const auto in = random_instance(n, rng);
  const Matrix Ks = random_matrix(n, 3, rng) * 0.3;
  const Matrix Kss = random_spd(3, rng) + Ks.transpose() * Ks;
  const Vector ms = random_vector(3, rng);
  const VariationalState prior_q{in.prior.mean, JitteredCholesky(in.prior.cov).matrixL()};
  const auto p = variational_predict(prior_q, in.prior, Ks, Kss, ms);
  EXPECT_LT((p.mean - ms).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((p.cov - Kss).cwiseAbs().maxCoeff(), 1e-10);

  const auto post = exact_posterior(in);
  const VariationalState q{post.mean, JitteredCholesky(post.cov).matrixL()};
  GaussianDist joint{Vector(n + 3), Matrix(n + 3, n + 3)};
  joint.mean << in.prior.mean, ms;
  joint.cov << in.prior.cov, Ks, Ks.transpose(), Kss;
  const auto exact = gp_predict(joint, in.y, in.sigma);
  const auto vp = variational_predict(q, in.prior, Ks, Kss, ms);
  EXPECT_LT((vp.mean - exact.mean).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((vp.cov - exact.cov).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((vp.cov - vp.cov.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Elbo, CholeskyBackpropMatchesFiniteDifferences) {
  std::mt19937_64 rng(73);
  const int n = 5;
  const Matrix K = random_spd(n, rng);
  const Matrix C = random_matrix(n, n, rng);
  auto fn = [&](const Matrix &A) { return Matrix(A.llt().matrixL()).cwiseProduct(C).sum(); };
  const Matrix L = K.llt().matrixL();
  const Matrix adj = cholesky_backprop(L, C);
  const double h = 1e-6;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      Matrix E = Matrix::Zero(n, n);
      E(i, j) = E(j, i) = 1.0;
      const double fd = (fn(K + h * E) - fn(K - h * E)) / (2 * h);
      EXPECT_NEAR(fd, (i == j ? 1.0 : 2.0) * adj(i, j), 1e-6);
    }
}

TEST(Elbo, WhitenedGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(74);
  const int T = 2;
  const Matrix X = Vector::LinSpaced(5, 0.0, 3.0);
  Hyperparameters hp = random_hyperparameters(T, T, rng);
  hp.task_means << 1.0, 0.5;
  hp.noise_sigma_n = 0.3;
  const LikelihoodKinds lik{kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity, kSquare, kIdentity};
  Vector y(10);
  y << 1.1, 0.9, 0.8, 0.6, 1.5, 1.3, 0.4, 0.7, 0.9, 1.0;
  const Eigen::Index n = 10;
  WhitenedVariational q = WhitenedVariational::prior(n);
  q.mu_u = 0.3 * random_vector(n, rng);
  q.L_u = (0.2 * random_matrix(n, n, rng)).triangularView<Eigen::Lower>();
  q.L_u.diagonal() = (0.5 + 0.2 * random_vector(n, rng).array().abs()).matrix();
  const Eigen::Index P = hp.packed_size();
  Vector theta(P + WhitenedVariational::packed_size(n));
  theta << hp.pack(), q.pack();
  auto objective = [&](const Vector &th) {
    Hyperparameters h = hp;
    h.unpack(th.head(P));
    const auto prior = build_multitask_prior({X, T}, {Matrix(0, 1), T}, h);
    return whitened_elbo(WhitenedVariational::unpack(th.tail(th.size() - P), n), prior, y, lik, h.noise_sigma_n)
        .prior_adjoint.value;
  };
  const auto prior = build_multitask_prior({X, T}, {Matrix(0, 1), T}, hp);
  const auto res = whitened_elbo(q, prior, y, lik, hp.noise_sigma_n);
  Vector grad(theta.size());
  grad.head(P) = multitask_prior_gradient(hp, X, res.prior_adjoint.dK, res.prior_adjoint.dmean);
  grad(hp.noise_index()) = res.prior_adjoint.dlog_noise;
  grad.tail(theta.size() - P) = res.dvariational;
  const Vector fd = fd_gradient(objective, theta);
  EXPECT_LE(max_rel_error(grad, fd), 1e-4) << (grad - fd).transpose() << "\n" << fd.transpose();
}
