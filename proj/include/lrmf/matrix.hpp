#ifndef LRMF_MATRIX_HPP
#define LRMF_MATRIX_HPP

#include <cstddef>
#include <string>
#include <vector>

namespace lrmf {

/// Dense row-major matrix of doubles. All kernels in this project accumulate
/// in a fixed order, so results are bit-reproducible across runs on one
/// machine.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double* row(std::size_t i) { return data_.data() + i * cols_; }
  const double* row(std::size_t i) const { return data_.data() + i * cols_; }

  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Matrix transposed() const;

  /// Frobenius norm, accumulated row-major.
  double frobenius_norm() const;
  double squared_frobenius_norm() const;

  bool all_finite() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Rank-r factor pair: x ~ u * v with u m-by-r and v r-by-n.
struct FactorPair {
  Matrix u;
  Matrix v;
};

/// c += a * b (shapes m x k, k x n). Fixed accumulation order over k.
void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c);
/// c += a^T * b with a stored k x m, b stored k x n.
void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c);
/// c += a * b^T with a stored m x k, b stored n x k.
void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c);

/// Returns a * b. Throws std::invalid_argument on inner-dimension mismatch.
Matrix matmul(const Matrix& a, const Matrix& b);

Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

std::string shape_string(const Matrix& a);

}  // namespace lrmf

#endif
