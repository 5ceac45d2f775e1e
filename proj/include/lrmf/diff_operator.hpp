#pragma once

#include <cstdint>
#include <vector>

#include "lrmf/matrix.hpp"

namespace lrmf {

// Periodic banded operator: row i maps to sum_k coefficients[k] * x[(i + offsets[k]) mod size].
// Built by build_diff_operator; coefficients of a first-derivative stencil sum to zero.
struct BandedOperator {
  std::size_t size = 0;
  std::vector<int> offsets;
  std::vector<double> coefficients;

  // y = D * x for a single vector of length `size`.
  std::vector<double> apply(const std::vector<double>& x) const;

  // Y = D * X with X of shape size x c. When `madds` is given, every
  // multiply-add executed is counted into it.
  Matrix apply(const Matrix& x, std::uint64_t* madds = nullptr) const;

  // Explicit size x size matrix form, for small-scale verification.
  Matrix dense() const;
};

// Centered periodic first-derivative operator of accuracy order 2, 4, or 6 on
// a uniform grid with the given spacing. Throws std::invalid_argument for any
// other order or a grid smaller than the stencil.
BandedOperator build_diff_operator(std::size_t size, double spacing, int order);

// Derivative of a factored matrix: returns (D*u, v) so that the implied
// product (D*u)*v equals D*(u*v) up to floating-point associativity. Only the
// m x r left factor is touched, which is the entire point: the dense path
// costs a factor n/r more. `madds` counts multiply-adds when given.
FactorPair apply_derivative_factored(const BandedOperator& d, const Matrix& u, const Matrix& v,
                                     std::uint64_t* madds = nullptr);

}  // namespace lrmf
