#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <cmath>

#include "somala/errors.hpp"

namespace somala {

// Lower-triangular Cholesky factors are stored flat in row-major order:
// (0,0), (1,0), (1,1), (2,0), ... for a K x K factor of K(K+1)/2 entries.

inline Eigen::Index chol_flat_size(Eigen::Index k) { return k * (k + 1) / 2; }

inline Eigen::MatrixXd chol_unpack(const Eigen::Ref<const Eigen::VectorXd>& flat, Eigen::Index k) {
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(k, k);
  Eigen::Index idx = 0;
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c <= r; ++c) L(r, c) = flat(idx++);
  return L;
}

inline Eigen::VectorXd chol_pack(const Eigen::Ref<const Eigen::MatrixXd>& L) {
  const Eigen::Index k = L.rows();
  Eigen::VectorXd flat(chol_flat_size(k));
  Eigen::Index idx = 0;
  for (Eigen::Index r = 0; r < k; ++r)
    for (Eigen::Index c = 0; c <= r; ++c) flat(idx++) = L(r, c);
  return flat;
}

/// Sigma = L L^T for a lower-triangular factor L.
inline Eigen::MatrixXd sigma_from_chol(const Eigen::Ref<const Eigen::MatrixXd>& L) {
  return L * L.transpose();
}

/// Lower-triangular factor of an SPD matrix, with positive diagonal.
inline Eigen::MatrixXd cholesky_factor(const Eigen::Ref<const Eigen::MatrixXd>& sigma) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  if (llt.info() != Eigen::Success)
    throw DivergenceError("matrix is not positive definite; Cholesky factorization failed");
  return llt.matrixL();
}

/// Rescales each row of L to unit Euclidean norm (the closed-form projection
/// onto the unit-diagonal constraint set). Rows already within 1e-12 of unit
/// norm are left untouched so the projection is bitwise idempotent.
inline Eigen::MatrixXd chol_normalize_rows(Eigen::MatrixXd L) {
  for (Eigen::Index r = 0; r < L.rows(); ++r) {
    const double norm2 = L.row(r).head(r + 1).squaredNorm();
    if (norm2 < 1e-24)
      throw DivergenceError("degenerate Cholesky row with near-zero norm");
    if (std::abs(norm2 - 1.0) <= 1e-12) continue;
    L.row(r).head(r + 1) /= std::sqrt(norm2);
  }
  return L;
}

}  // namespace somala
