#pragma once

#include "sumgp/constraint_engine.hpp"

namespace sumgp {

/// Known auxiliary point appended as the fourth column of every pose.
struct AnchorPoint {
  Eigen::Vector2d position{4.0, 4.0};

  double expected_norm_sq() const { return position.squaredNorm(); }
};

inline constexpr int kGramSize = 10;

/// Upper triangle of ZᵀZ for a 2×4 pose (anchor last) in the order
/// [Q11, Q12, Q13, Q14, Q22, Q23, Q24, Q33, Q34, Q44].
inline Vector lift_to_gram(const Matrix &Z) {
  if (Z.rows() != 2 || Z.cols() != 4) throw InputError("lift_to_gram: pose must be 2x4 with the anchor last");
  const Matrix Q = Z.transpose() * Z;
  Vector q(kGramSize);
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) q(k++) = Q(i, j);
  return q;
}

inline Matrix gram_matrix(const Vector &q) {
  if (q.size() != kGramSize) throw InputError("gram_matrix: expected 10 entries");
  Matrix Q(4, 4);
  int k = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = i; j < 4; ++j) Q(i, j) = Q(j, i) = q(k++);
  return Q;
}

/// Pose matrix from a row [z1x, z1y, z2x, z2y, z3x, z3y] plus the anchor.
inline Matrix pose_from_row(const Eigen::Ref<const Vector> &row, const AnchorPoint &anchor) {
  if (row.size() != 6) throw InputError("pose_from_row: expected six coordinates");
  Matrix Z(2, 4);
  Z << row(0), row(2), row(4), anchor.position.x(), row(1), row(3), row(5), anchor.position.y();
  return Z;
}

inline Vector row_from_pose(const Matrix &Z) {
  Vector r(6);
  r << Z(0, 0), Z(1, 0), Z(0, 1), Z(1, 1), Z(0, 2), Z(1, 2);
  return r;
}

/// Lifts every row of a points × 6 coordinate matrix; NaN rows stay NaN.
inline Matrix lift_rows(const Matrix &coords, const AnchorPoint &anchor) {
  Matrix out(coords.rows(), kGramSize);
  for (Eigen::Index i = 0; i < coords.rows(); ++i) out.row(i) = lift_to_gram(pose_from_row(coords.row(i).transpose(), anchor)).transpose();
  return out;
}

/// Edge-length constraints on the Gram vector plus the anchor norm.
inline ConstraintSpec triangle_constraints(double L12, double L13, double L23, const AnchorPoint &anchor = {}) {
  if (!(L12 > 0.0 && L13 > 0.0 && L23 > 0.0)) throw InputError("triangle_constraints: lengths must be positive");
  Matrix F(4, kGramSize);
  // clang-format off
  F << 1, -2,  0, 0, 1,  0, 0, 0, 0, 0,
       1,  0, -2, 0, 0,  0, 0, 1, 0, 0,
       0,  0,  0, 0, 1, -2, 0, 1, 0, 0,
       0,  0,  0, 0, 0,  0, 0, 0, 0, 1;
  // clang-format on
  Vector S(4);
  S << L12 * L12, L13 * L13, L23 * L23, anchor.expected_norm_sq();
  return ConstraintSpec::constant(F, S);
}

/// Constraints for the reference triangle's edge lengths.
inline ConstraintSpec triangle_constraints_for(const Matrix &Z0, const AnchorPoint &anchor = {}) {
  return triangle_constraints((Z0.col(0) - Z0.col(1)).norm(), (Z0.col(0) - Z0.col(2)).norm(), (Z0.col(1) - Z0.col(2)).norm(), anchor);
}

struct RecoveryDiagnostics {
  long negative_eigenvalue_clamps = 0;
  long low_rank_warnings = 0;   // top-2 spectral mass below 90% of the trace
  long reflection_ties = 0;     // orientation decided by the reference pose
};

/// Planar coordinates from a Gram vector.  The top two eigenpairs give the
/// pose up to an orthogonal map; the rotation sends the recovered anchor
/// onto the known one.  Both reflections align the anchor equally well, so
/// the one closer to `reference` (a 2×4 pose) wins; without a reference the
/// proper rotation of the eigenbasis is kept.
inline Matrix recover_coordinates(const Vector &q, const AnchorPoint &anchor, const Matrix *reference = nullptr,
                                  RecoveryDiagnostics *diag = nullptr) {
  const Matrix Q = gram_matrix(q);
  Eigen::SelfAdjointEigenSolver<Matrix> es(Q);
  const Vector ev = es.eigenvalues();  // ascending
  const Matrix U = es.eigenvectors();
  double top = 0.0;
  Matrix Zt(2, 4);
  for (int k = 0; k < 2; ++k) {
    double lam = ev(3 - k);
    if (lam < 0.0) {
      lam = 0.0;
      if (diag) ++diag->negative_eigenvalue_clamps;
    }
    top += lam;
    Zt.row(k) = std::sqrt(lam) * U.col(3 - k).transpose();
  }
  for (int k = 0; k < 2; ++k)
    if (ev(k) < 0.0 && diag) ++diag->negative_eigenvalue_clamps;
  if (diag && top < 0.9 * Q.trace()) ++diag->low_rank_warnings;

  auto align = [&](const Matrix &Z) {
    const double ang = std::atan2(anchor.position.y(), anchor.position.x()) - std::atan2(Z(1, 3), Z(0, 3));
    Matrix R(2, 2);
    R << std::cos(ang), -std::sin(ang), std::sin(ang), std::cos(ang);
    return Matrix(R * Z);
  };
  const Matrix proper = align(Zt);
  Matrix flipped_in = Zt;
  flipped_in.row(1) *= -1.0;
  const Matrix flipped = align(flipped_in);
  const double s1 = (proper.col(3) - anchor.position).norm();
  const double s2 = (flipped.col(3) - anchor.position).norm();
  if (std::abs(s1 - s2) > 1e-9 * (1.0 + anchor.position.norm())) return s1 < s2 ? proper : flipped;
  if (!reference) return proper;
  if (diag) ++diag->reflection_ties;
  return (proper - *reference).squaredNorm() <= (flipped - *reference).squaredNorm() ? proper : flipped;
}

}  // namespace sumgp
