#pragma once

#include "sumgp/transform_pipeline.hpp"

#include <cmath>
#include <numbers>

namespace sumgp {

inline constexpr double kLogDensityFloor = -1e10;

/// Log-likelihood of one transformed observation and its derivatives: d1..d3
/// with respect to f', dn/d1n/d2n with respect to log sigma_n of (logp, d1, d2).
struct LikDerivs {
  double logp = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;
  double d3 = 0.0;
  double dn = 0.0;
  double d1n = 0.0;
  double d2n = 0.0;
};

namespace detail {

inline double log_cosh(double t) {
  t = std::abs(t);
  return t + std::log1p(std::exp(-2.0 * t)) - std::numbers::ln2;
}

// G(u) = log cosh(sqrt(u)) and its first three derivatives in u.
struct LogCoshSqrt {
  double g0, g1, g2, g3;
};

inline LogCoshSqrt log_cosh_sqrt(double u) {
  LogCoshSqrt G{};
  const double t = std::sqrt(std::max(u, 0.0));
  G.g0 = log_cosh(t);
  if (u < 1e-2) {
    // Taylor series of tanh(t)/t in u = t².
    const double c[] = {1.0, -1.0 / 3.0, 2.0 / 15.0, -17.0 / 315.0, 62.0 / 2835.0, -1382.0 / 155925.0, 21844.0 / 6081075.0};
    double p1 = 0.0, p2 = 0.0, p3 = 0.0;
    for (int k = 6; k >= 0; --k) p1 = p1 * u + c[k];
    for (int k = 6; k >= 1; --k) p2 = p2 * u + k * c[k];
    for (int k = 6; k >= 2; --k) p3 = p3 * u + k * (k - 1) * c[k];
    G.g1 = 0.5 * p1;
    G.g2 = 0.5 * p2;
    G.g3 = 0.5 * p3;
    return G;
  }
  const double th = std::tanh(t);
  const double sech2 = t > 350.0 ? 0.0 : 1.0 / (std::cosh(t) * std::cosh(t));
  const double N = t * sech2 - th;
  const double dN = -2.0 * t * sech2 * th;
  G.g1 = th / (2.0 * t);
  G.g2 = N / (4.0 * t * t * t);
  G.g3 = (dN * t - 3.0 * N) / (8.0 * std::pow(t, 5));
  return G;
}

// Noncentral chi-squared (one degree of freedom) form for h(f) = f².
inline LikDerivs square_likelihood(double y, double f, double sigma) {
  LikDerivs L;
  if (y < 0.0) {
    L.logp = kLogDensityFloor;
    return L;
  }
  const double s = sigma * sigma;
  const double s2 = s * s, s3 = s2 * s, s4 = s3 * s, s5 = s4 * s;
  const double yl = std::max(y, 1e-12);
  double l, lf, lff, lfff, ls, lfs, lffs;
  if (f >= 0.0) {
    const double u = f * y / s2;
    const auto G = log_cosh_sqrt(u);
    l = -0.5 * std::log(2.0 * std::numbers::pi * s * yl) - (y + f) / (2.0 * s) + G.g0;
    lf = -1.0 / (2.0 * s) + y * G.g1 / s2;
    lff = y * y * G.g2 / s4;
    lfff = y * y * y * G.g3 / (s4 * s2);
    ls = -1.0 / (2.0 * s) + (y + f) / (2.0 * s2) - 2.0 * u * G.g1 / s;
    lfs = 1.0 / (2.0 * s2) - 2.0 * y * G.g1 / s3 - 2.0 * u * y * G.g2 / s3;
    lffs = -4.0 * y * y * G.g2 / s5 - 2.0 * u * y * y * G.g3 / s5;
  } else {
    // Continuation below zero: value, slope and curvature match f = 0⁺.
    // -ψ(z)/6 with ψ(z) = -z - log(1 - z), z = f·y/σ⁴, carries the curvature
    // at zero and then flattens; -φ(t)/2 with φ(t) = -t³/(1 - t), t = f/σ²,
    // is invisible to second order and grows like a Gaussian of width σ², so
    // the density vanishes as f → -∞ for every y.
    const double l0 = -0.5 * std::log(2.0 * std::numbers::pi * s * yl) - y / (2.0 * s);
    const double g1 = -1.0 / (2.0 * s) + y / (2.0 * s2);
    const double r = y / s2;
    const double z = f * r, w = 1.0 - z;
    const double p0 = -z - std::log(w), p1 = z / w, p2 = 1.0 / (w * w), p3 = 2.0 / (w * w * w);
    const double t = f / s, v = 1.0 - t;
    const double q0 = -t * t * t / v, q1 = 2.0 * t + 1.0 - 1.0 / (v * v), q2 = 2.0 - 2.0 / (v * v * v), q3 = -6.0 / (v * v * v * v);
    l = l0 + g1 * f - p0 / 6.0 - 0.5 * q0;
    lf = g1 - p1 * r / 6.0 - 0.5 * q1 / s;
    lff = -p2 * r * r / 6.0 - 0.5 * q2 / s2;
    lfff = -p3 * r * r * r / 6.0 - 0.5 * q3 / s3;
    const double l0s = -1.0 / (2.0 * s) + y / (2.0 * s2);
    const double g1s = 1.0 / (2.0 * s2) - y / s3;
    ls = l0s + g1s * f + p1 * z / (3.0 * s) + 0.5 * q1 * t / s;
    lfs = g1s + y / (3.0 * s3) * (p2 * z + p1) + 0.5 * (q2 * t + q1) / s2;
    lffs = y * y / (3.0 * s5) * (p3 * z + 2.0 * p2) + 0.5 * (q3 * t + 2.0 * q2) / s3;
  }
  L.logp = l;
  L.d1 = lf;
  L.d2 = lff;
  L.d3 = lfff;
  L.dn = 2.0 * s * ls;
  L.d1n = 2.0 * s * lfs;
  L.d2n = 2.0 * s * lffs;
  return L;
}

// Inverse a = h⁻¹ with three derivatives.
struct InverseDerivs {
  double a, a1, a2, a3;
};

inline constexpr double kSineEdge = 1.0 - 1e-3;

inline InverseDerivs sine_inverse(double f) {
  const double c = kSineEdge;
  auto at = [](double x) {
    const double q = 1.0 - x * x;
    return InverseDerivs{std::asin(x), 1.0 / std::sqrt(q), x / std::pow(q, 1.5), (1.0 + 2.0 * x * x) / std::pow(q, 2.5)};
  };
  if (std::abs(f) <= c) return at(f);
  // Quadratic continuation past the edge keeps a(f) increasing and finite.
  const double e = f > 0.0 ? c : -c;
  const auto E = at(e);
  const double d = f - e;
  return {E.a + E.a1 * d + 0.5 * E.a2 * d * d, E.a1 + E.a2 * d, E.a2, 0.0};
}

inline InverseDerivs inverse_derivs(const TaskTransform &t, double f) {
  switch (t.kind) {
    case Nonlinearity::Identity: return {f, 1.0, 0.0, 0.0};
    case Nonlinearity::Log: {
      const double e = std::exp(f);
      return {e, e, e, e};
    }
    case Nonlinearity::Sine: return sine_inverse(f);
    case Nonlinearity::Custom: {
      const auto &c = *t.custom;
      const double h = 1e-4 * (1.0 + std::abs(f));
      const double dp = c.inverse_d1(f + h), d0 = c.inverse_d1(f), dm = c.inverse_d1(f - h);
      return {c.inverse(f), d0, (dp - dm) / (2.0 * h), (dp - 2.0 * d0 + dm) / (h * h)};
    }
    case Nonlinearity::Square: break;
  }
  throw InputError("inverse_derivs: square transform has no monotone inverse");
}

inline double log_jacobian(const TaskTransform &t, double y) {
  switch (t.kind) {
    case Nonlinearity::Log: return y;
    case Nonlinearity::Sine: return -0.5 * std::log(std::max(1.0 - y * y, 1e-12));
    case Nonlinearity::Custom: return std::log(std::max(t.custom->inverse_d1(y), 1e-300));
    default: return 0.0;
  }
}

// Gaussian noise on the original output, mapped through a monotone transform.
inline LikDerivs monotone_likelihood(double y, double f, const TaskTransform &t, double sigma) {
  LikDerivs L;
  if (t.kind == Nonlinearity::Sine && std::abs(y) > 1.0) {
    L.logp = kLogDensityFloor;
    return L;
  }
  const double s = sigma * sigma;
  const auto A = inverse_derivs(t, f);
  const double r = inverse_derivs(t, y).a - A.a;
  L.logp = -0.5 * std::log(2.0 * std::numbers::pi * s) - r * r / (2.0 * s) + log_jacobian(t, y);
  L.d1 = r * A.a1 / s;
  L.d2 = (-A.a1 * A.a1 + r * A.a2) / s;
  L.d3 = (-3.0 * A.a1 * A.a2 + r * A.a3) / s;
  L.dn = -1.0 + r * r / s;
  L.d1n = -2.0 * L.d1;
  L.d2n = -2.0 * L.d2;
  return L;
}

}  // namespace detail

/// Log-density of a transformed observation y' = h(y) given f' = h(f), with
/// Gaussian noise of std sigma_n on the original output.
inline LikDerivs transformed_likelihood(double y_prime, double f_prime, const TaskTransform &t, double noise_sigma_n) {
  if (!(noise_sigma_n > 0.0)) throw InputError("transformed_likelihood: noise_sigma_n must be positive");
  LikDerivs L = t.kind == Nonlinearity::Square ? detail::square_likelihood(y_prime, f_prime, noise_sigma_n)
                                               : detail::monotone_likelihood(y_prime, f_prime, t, noise_sigma_n);
  if (!std::isfinite(L.logp) || L.logp < kLogDensityFloor) L = LikDerivs{kLogDensityFloor};
  return L;
}

inline double transformed_density(double y_prime, double f_prime, const TaskTransform &t, double noise_sigma_n) {
  const double lp = transformed_likelihood(y_prime, f_prime, t, noise_sigma_n).logp;
  return lp <= kLogDensityFloor ? 0.0 : std::exp(lp);
}

}  // namespace sumgp
