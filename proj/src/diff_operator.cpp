#include "lrmf/diff_operator.hpp"

#include <stdexcept>
#include <string>

namespace lrmf {

std::vector<double> BandedOperator::apply(const std::vector<double>& x) const {
  if (x.size() != size) throw std::invalid_argument("BandedOperator::apply: length mismatch");
  std::vector<double> y(size, 0.0);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(size);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      std::ptrdiff_t j = (i + offsets[k]) % n;
      if (j < 0) j += n;
      acc += coefficients[k] * x[static_cast<std::size_t>(j)];
    }
    y[static_cast<std::size_t>(i)] = acc;
  }
  return y;
}

Matrix BandedOperator::apply(const Matrix& x, std::uint64_t* madds) const {
  if (x.rows() != size)
    throw std::invalid_argument("BandedOperator::apply: operator size " + std::to_string(size) +
                                " does not match matrix " + shape_string(x));
  Matrix y(x.rows(), x.cols(), 0.0);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(size);
  const std::size_t c = x.cols();
  std::uint64_t count = 0;
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    double* yi = y.row(static_cast<std::size_t>(i));
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      std::ptrdiff_t j = (i + offsets[k]) % n;
      if (j < 0) j += n;
      const double coef = coefficients[k];
      const double* xj = x.row(static_cast<std::size_t>(j));
      for (std::size_t col = 0; col < c; ++col) yi[col] += coef * xj[col];
      count += c;
    }
  }
  if (madds) *madds += count;
  return y;
}

Matrix BandedOperator::dense() const {
  Matrix d(size, size, 0.0);
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(size);
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < offsets.size(); ++k) {
      std::ptrdiff_t j = (i + offsets[k]) % n;
      if (j < 0) j += n;
      d(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) += coefficients[k];
    }
  }
  return d;
}

BandedOperator build_diff_operator(std::size_t size, double spacing, int order) {
  if (spacing <= 0.0) throw std::invalid_argument("build_diff_operator: spacing must be positive");
  BandedOperator op;
  op.size = size;
  switch (order) {
    case 2:
      op.offsets = {-1, 1};
      op.coefficients = {-1.0 / (2.0 * spacing), 1.0 / (2.0 * spacing)};
      break;
    case 4:
      op.offsets = {-2, -1, 1, 2};
      op.coefficients = {1.0 / (12.0 * spacing), -8.0 / (12.0 * spacing), 8.0 / (12.0 * spacing),
                         -1.0 / (12.0 * spacing)};
      break;
    case 6:
      op.offsets = {-3, -2, -1, 1, 2, 3};
      op.coefficients = {-1.0 / (60.0 * spacing), 9.0 / (60.0 * spacing),
                         -45.0 / (60.0 * spacing), 45.0 / (60.0 * spacing),
                         -9.0 / (60.0 * spacing),  1.0 / (60.0 * spacing)};
      break;
    default:
      throw std::invalid_argument("build_diff_operator: unsupported order " +
                                  std::to_string(order) + " (need 2, 4, or 6)");
  }
  if (size < op.offsets.size() + 1)
    throw std::invalid_argument("build_diff_operator: grid of size " + std::to_string(size) +
                                " is smaller than the order-" + std::to_string(order) +
                                " stencil");
  return op;
}

FactorPair apply_derivative_factored(const BandedOperator& d, const Matrix& u, const Matrix& v,
                                     std::uint64_t* madds) {
  if (u.rows() != d.size)
    throw std::invalid_argument("apply_derivative_factored: operator size " +
                                std::to_string(d.size) + " does not match u " + shape_string(u));
  if (u.cols() != v.rows())
    throw std::invalid_argument("apply_derivative_factored: inner dimensions differ: " +
                                shape_string(u) + " vs " + shape_string(v));
  FactorPair fp;
  fp.u = d.apply(u, madds);
  fp.v = v;
  return fp;
}

}  // namespace lrmf
