#include "lrmf/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace lrmf {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("Matrix: dimensions must be >= 1");
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

double Matrix::squared_frobenius_norm() const {
  double s = 0.0;
  for (double x : data_) s += x * x;
  return s;
}

double Matrix::frobenius_norm() const { return std::sqrt(squared_frobenius_norm()); }

bool Matrix::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

namespace {

// Row-panel kernel: MR rows of C share each streamed row of B. MR=8 keeps
// the accumulators in registers with AVX-512 and halves B traffic vs MR=4.
template <int MR>
inline void gemm_nn_panel(std::size_t i0, std::size_t K, std::size_t N, const double* A,
                          const double* B, double* C, std::size_t lda) {
  const double* a[MR];
  double* c[MR];
  for (int r = 0; r < MR; ++r) {
    a[r] = A + (i0 + r) * lda;
    c[r] = C + (i0 + r) * N;
  }
  for (std::size_t k = 0; k < K; ++k) {
    const double* b = B + k * N;
    double x[MR];
    for (int r = 0; r < MR; ++r) x[r] = a[r][k];
    for (std::size_t j = 0; j < N; ++j) {
      const double bj = b[j];
      for (int r = 0; r < MR; ++r) c[r][j] += x[r] * bj;
    }
  }
}

}  // namespace

void gemm_nn(const Matrix& a, const Matrix& b, Matrix& c) {
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  if (b.rows() != K || c.rows() != M || c.cols() != N)
    throw std::invalid_argument("gemm_nn: shape mismatch " + shape_string(a) + " * " +
                                shape_string(b) + " -> " + shape_string(c));
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  std::size_t i = 0;
  for (; i + 8 <= M; i += 8) gemm_nn_panel<8>(i, K, N, A, B, C, K);
  for (; i + 4 <= M; i += 4) gemm_nn_panel<4>(i, K, N, A, B, C, K);
  for (; i < M; ++i) gemm_nn_panel<1>(i, K, N, A, B, C, K);
}

void gemm_tn(const Matrix& a, const Matrix& b, Matrix& c) {
  // c(i,j) += sum_k a(k,i) * b(k,j); a is k x m, b is k x n.
  const std::size_t K = a.rows(), M = a.cols(), N = b.cols();
  if (b.rows() != K || c.rows() != M || c.cols() != N)
    throw std::invalid_argument("gemm_tn: shape mismatch " + shape_string(a) + "^T * " +
                                shape_string(b) + " -> " + shape_string(c));
  const double* A = a.data();
  const double* B = b.data();
  double* C = c.data();
  // C rows stay hot across the k loop; each C row is finished in one pass,
  // so the accumulation order over k is fixed per element.
  for (std::size_t i = 0; i < M; ++i) {
    double* crow = C + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double x = A[k * M + i];
      const double* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += x * brow[j];
    }
  }
}

void gemm_nt(const Matrix& a, const Matrix& b, Matrix& c) {
  // c(i,j) += dot(a row i, b row j); a is m x k, b is n x k.
  const std::size_t M = a.rows(), K = a.cols(), N = b.rows();
  if (b.cols() != K || c.rows() != M || c.cols() != N)
    throw std::invalid_argument("gemm_nt: shape mismatch " + shape_string(a) + " * " +
                                shape_string(b) + "^T -> " + shape_string(c));
  constexpr std::size_t L = 8;  // independent accumulator lanes, fixed reduction order
  for (std::size_t i = 0; i < M; ++i) {
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < N; ++j) {
      const double* brow = b.row(j);
      double acc[L] = {0, 0, 0, 0, 0, 0, 0, 0};
      std::size_t k = 0;
      for (; k + L <= K; k += L)
        for (std::size_t l = 0; l < L; ++l) acc[l] += arow[k + l] * brow[k + l];
      double tail = 0.0;
      for (; k < K; ++k) tail += arow[k] * brow[k];
      double s = 0.0;
      for (std::size_t l = 0; l < L; ++l) s += acc[l];
      c(i, j) += s + tail;
    }
  }
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows())
    throw std::invalid_argument("matmul: inner dimensions differ: " + shape_string(a) + " * " +
                                shape_string(b));
  Matrix c(a.rows(), b.cols());
  gemm_nn(a, b, c);
  return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("operator-: shape mismatch");
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] - b.data()[i];
  return c;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("operator+: shape mismatch");
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = a.data()[i] + b.data()[i];
  return c;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix c(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) c.data()[i] = s * a.data()[i];
  return c;
}

std::string shape_string(const Matrix& a) {
  return std::to_string(a.rows()) + "x" + std::to_string(a.cols());
}

}  // namespace lrmf
