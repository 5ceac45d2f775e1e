#ifndef LRMF_LINALG_HPP
#define LRMF_LINALG_HPP

#include <cstddef>
#include <vector>

#include "lrmf/matrix.hpp"

namespace lrmf {

/// Singular value decomposition x ~ left * diag(singular_values) * right.
/// `left` is m x k with orthonormal columns, `right` is k x n with
/// orthonormal rows, singular values are nonincreasing and nonnegative.
struct SvdResult {
  Matrix left;
  std::vector<double> singular_values;
  Matrix right;

  Matrix reconstruction() const;
  /// Rank-r truncation (keeps the top-r triplets).
  SvdResult truncated(std::size_t r) const;
  FactorPair factor_pair() const;  // (left * diag(s), right)
};

/// Full SVD via one-sided Jacobi, k = min(m, n).
/// Throws std::runtime_error if the sweep cap is reached before convergence
/// (the message reports the iteration count).
SvdResult svd_dense(const Matrix& x);

/// Top-r singular triplets via Golub-Kahan Lanczos bidiagonalization with
/// full reorthogonalization and thick restarts. `tol` is the relative
/// residual tolerance on the accepted triplets.
SvdResult svd_truncated(const Matrix& x, std::size_t r, double tol = 1e-10);

/// Minimum-Frobenius-norm X minimizing ||a X - b||_F, solved through the SVD
/// of a. Singular values below 1e-12 * s_max are treated as zero; when that
/// happens (a is numerically rank deficient) *rank_deficient is set to true
/// if the pointer is non-null, false otherwise.
Matrix lstsq(const Matrix& a, const Matrix& b, bool* rank_deficient = nullptr);

/// Normalized squared Frobenius error of the optimal rank-r approximation:
/// sum_{i >= r} s_i^2 / x_norm^2 for s sorted descending. r past the end of
/// s gives 0.
double best_rank_error(const std::vector<double>& s, std::size_t r, double x_norm);

}  // namespace lrmf

#endif
