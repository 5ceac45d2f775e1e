#include "lrmf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "lrmf/rng.hpp"

namespace lrmf {

namespace {

constexpr double kEps = 2.220446049250313e-16;

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

double norm2(const std::vector<double>& v) { return std::sqrt(dot(v.data(), v.data(), v.size())); }

// Column-major basis for the Lanczos vectors: each basis vector is contiguous.
struct Basis {
  std::size_t dim;
  std::vector<std::vector<double>> cols;

  explicit Basis(std::size_t d) : dim(d) {}
  std::size_t count() const { return cols.size(); }

  void push(std::vector<double> v) { cols.push_back(std::move(v)); }

  // Two-pass classical Gram-Schmidt. Coefficients of the first pass are
  // accumulated into `coeffs` when provided.
  void orthogonalize(std::vector<double>& v, std::vector<double>* coeffs = nullptr) const {
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t i = 0; i < cols.size(); ++i) {
        const double c = dot(cols[i].data(), v.data(), dim);
        for (std::size_t j = 0; j < dim; ++j) v[j] -= c * cols[i][j];
        if (coeffs) (*coeffs)[i] += c;
      }
    }
  }

  // Unit vector orthogonal to the current columns, built from seeded noise.
  // Returns false if the subspace is already full.
  bool fresh_orthonormal(Rng& rng, std::vector<double>& out) const {
    if (count() >= dim) return false;
    for (int attempt = 0; attempt < 64; ++attempt) {
      out.assign(dim, 0.0);
      for (std::size_t j = 0; j < dim; ++j) out[j] = rng.uniform(-1.0, 1.0);
      orthogonalize(out);
      const double n = norm2(out);
      if (n > 1e-6 * std::sqrt(static_cast<double>(dim))) {
        for (double& x : out) x /= n;
        return true;
      }
    }
    return false;
  }
};

}  // namespace

Matrix SvdResult::reconstruction() const {
  Matrix scaled = left;
  for (std::size_t i = 0; i < scaled.rows(); ++i)
    for (std::size_t j = 0; j < scaled.cols(); ++j) scaled(i, j) *= singular_values[j];
  return matmul(scaled, right);
}

SvdResult SvdResult::truncated(std::size_t r) const {
  const std::size_t k = std::min(r, singular_values.size());
  SvdResult out;
  out.left = Matrix(left.rows(), k);
  out.right = Matrix(k, right.cols());
  out.singular_values.assign(singular_values.begin(), singular_values.begin() + k);
  for (std::size_t i = 0; i < left.rows(); ++i)
    for (std::size_t j = 0; j < k; ++j) out.left(i, j) = left(i, j);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < right.cols(); ++j) out.right(i, j) = right(i, j);
  return out;
}

FactorPair SvdResult::factor_pair() const {
  FactorPair fp;
  fp.u = left;
  for (std::size_t i = 0; i < fp.u.rows(); ++i)
    for (std::size_t j = 0; j < fp.u.cols(); ++j) fp.u(i, j) *= singular_values[j];
  fp.v = right;
  return fp;
}

SvdResult svd_dense(const Matrix& x) {
  if (!x.all_finite()) throw std::invalid_argument("svd_dense: non-finite entries");

  // One-sided Jacobi orthogonalizes the columns of the tall orientation.
  const bool transposed = x.rows() < x.cols();
  Matrix w = transposed ? x.transposed() : x;
  const std::size_t m = w.rows(), n = w.cols();

  // Work column-major so each Jacobi rotation touches contiguous memory.
  std::vector<std::vector<double>> wc(n, std::vector<double>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) wc[j][i] = w(i, j);

  std::vector<std::vector<double>> vc(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) vc[j][j] = 1.0;

  std::vector<double> colsq(n);

  // Pairs count as orthogonal once the normalized cross term falls to the
  // roundoff floor of an m-term dot product; columns at noise level relative
  // to the whole matrix are left for the completion pass.
  const double pair_tol = 8.0 * kEps * std::sqrt(static_cast<double>(m));
  const int max_sweeps = 64;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    double fro2 = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      colsq[j] = dot(wc[j].data(), wc[j].data(), m);
      fro2 += colsq[j];
    }
    const double dead_col = fro2 * 1e-30;
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double app = colsq[p], aqq = colsq[q];
        if (app <= dead_col || aqq <= dead_col) continue;
        const double apq = dot(wc[p].data(), wc[q].data(), m);
        if (std::abs(apq) <= pair_tol * std::sqrt(app * aqq) || apq == 0.0) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        double* wp = wc[p].data();
        double* wq = wc[q].data();
        for (std::size_t i = 0; i < m; ++i) {
          const double a = wp[i], b = wq[i];
          wp[i] = c * a - s * b;
          wq[i] = s * a + c * b;
        }
        double* vp = vc[p].data();
        double* vq = vc[q].data();
        for (std::size_t i = 0; i < n; ++i) {
          const double a = vp[i], b = vq[i];
          vp[i] = c * a - s * b;
          vq[i] = s * a + c * b;
        }
        colsq[p] = app - t * apq;
        colsq[q] = aqq + t * apq;
      }
    }
    if (!rotated) break;
  }
  if (sweep == max_sweeps)
    throw std::runtime_error("svd_dense: Jacobi did not converge after " +
                             std::to_string(max_sweeps) + " sweeps");

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(wc[j].data(), wc[j].data(), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });

  const double smax = norms[order[0]];
  const double tiny = smax * kEps * static_cast<double>(std::max(m, n));

  // Left vectors: normalized columns; numerically-zero columns are replaced
  // by an orthonormal completion so left^T left = I holds at every rank.
  Basis ubasis(m);
  Matrix ufull(m, n);
  std::vector<double> svals(n);
  Rng rng(0x1db5u);
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t j = order[jj];
    svals[jj] = norms[j];
    std::vector<double> col(m);
    if (norms[j] > tiny && norms[j] > 0.0) {
      for (std::size_t i = 0; i < m; ++i) col[i] = wc[j][i] / norms[j];
    } else {
      svals[jj] = norms[j];
      if (!ubasis.fresh_orthonormal(rng, col)) col.assign(m, 0.0);
    }
    for (std::size_t i = 0; i < m; ++i) ufull(i, jj) = col[i];
    ubasis.push(std::move(col));
  }

  Matrix vt(n, n);
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t j = order[jj];
    for (std::size_t i = 0; i < n; ++i) vt(jj, i) = vc[j][i];
  }

  SvdResult out;
  out.singular_values = std::move(svals);
  if (!transposed) {
    out.left = std::move(ufull);  // m x n, m >= n, k = n
    out.right = std::move(vt);    // n x n
  } else {
    // x = (w)^T = V S U^T
    out.left = vt.transposed();          // rows(x) x k
    out.right = ufull.transposed();      // k x cols(x)
  }
  return out;
}

Matrix lstsq(const Matrix& a, const Matrix& b, bool* rank_deficient) {
  if (a.rows() != b.rows())
    throw std::invalid_argument("lstsq: row counts differ: " + shape_string(a) + " vs " +
                                shape_string(b));
  SvdResult svd = svd_dense(a);
  const double smax = svd.singular_values.empty() ? 0.0 : svd.singular_values[0];
  const double cutoff = 1e-12 * smax;
  bool deficient = false;

  Matrix t(svd.singular_values.size(), b.cols(), 0.0);
  gemm_tn(svd.left, b, t);  // left^T * b
  for (std::size_t i = 0; i < t.rows(); ++i) {
    const double s = svd.singular_values[i];
    const double inv = (s > cutoff && s > 0.0) ? 1.0 / s : 0.0;
    if (inv == 0.0) deficient = true;
    for (std::size_t j = 0; j < t.cols(); ++j) t(i, j) *= inv;
  }
  if (rank_deficient) *rank_deficient = deficient;
  Matrix xsol(a.cols(), b.cols(), 0.0);
  gemm_tn(svd.right, t, xsol);  // right^T * t
  return xsol;
}

double best_rank_error(const std::vector<double>& s, std::size_t r, double x_norm) {
  if (x_norm <= 0.0) throw std::invalid_argument("best_rank_error: x_norm must be positive");
  if (r >= s.size()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = s.size(); i-- > r;) sum += s[i] * s[i];
  return sum / (x_norm * x_norm);
}

SvdResult svd_truncated(const Matrix& x, std::size_t r, double tol) {
  if (!x.all_finite()) throw std::invalid_argument("svd_truncated: non-finite entries");
  const std::size_t m = x.rows(), n = x.cols();
  const std::size_t kmin = std::min(m, n);
  if (r < 1 || r >= kmin)
    throw std::invalid_argument("svd_truncated: rank " + std::to_string(r) +
                                " out of range for " + shape_string(x));

  const std::size_t kmax = std::min(kmin, std::max(2 * r + 6, std::size_t{16}));
  const int max_restarts = 400;

  Rng rng(0xb1d1a6 + 77 * m + n);

  Basis vb(n), ub(m);
  Matrix b(kmax, kmax, 0.0);
  std::vector<double> f(n);

  {
    std::vector<double> v0(n);
    for (std::size_t j = 0; j < n; ++j) v0[j] = rng.uniform(-1.0, 1.0);
    const double nv = norm2(v0);
    for (double& e : v0) e /= nv;
    vb.push(std::move(v0));
  }

  double beta = 0.0;
  auto matvec = [&](const std::vector<double>& v, std::vector<double>& out) {
    for (std::size_t i = 0; i < m; ++i) out[i] = dot(x.row(i), v.data(), n);
  };
  auto matvec_t = [&](const std::vector<double>& u, std::vector<double>& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      const double ui = u[i];
      const double* row = x.row(i);
      for (std::size_t j = 0; j < n; ++j) out[j] += ui * row[j];
    }
  };

  int restarts = 0;
  for (;; ++restarts) {
    if (restarts > max_restarts)
      throw std::runtime_error("svd_truncated: no convergence after " +
                               std::to_string(max_restarts) + " restarts");

    // Expand the bidiagonalization until the working subspace is full.
    while (true) {
      const std::size_t ju = ub.count();
      std::vector<double> w(m);
      matvec(vb.cols.back(), w);
      std::vector<double> coeffs(ju, 0.0);
      ub.orthogonalize(w, &coeffs);
      for (std::size_t i = 0; i < ju; ++i) b(i, ju) = coeffs[i];
      double alpha = norm2(w);
      if (alpha > 1e-13 * std::sqrt(static_cast<double>(m))) {
        for (double& e : w) e /= alpha;
      } else {
        alpha = 0.0;
        if (!ub.fresh_orthonormal(rng, w)) w.assign(m, 0.0);
      }
      b(ju, ju) = alpha;
      ub.push(std::move(w));

      matvec_t(ub.cols.back(), f);
      vb.orthogonalize(f);
      beta = norm2(f);

      if (vb.count() == kmax) break;

      std::vector<double> vnext(n);
      if (beta > 1e-13 * std::sqrt(static_cast<double>(n))) {
        for (std::size_t j = 0; j < n; ++j) vnext[j] = f[j] / beta;
      } else {
        beta = 0.0;
        if (!vb.fresh_orthonormal(rng, vnext)) break;  // row space exhausted
      }
      vb.push(std::move(vnext));
    }

    const std::size_t k = ub.count();
    Matrix bsmall(k, k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) bsmall(i, j) = b(i, j);
    SvdResult bs = svd_dense(bsmall);

    const double sref = std::max(bs.singular_values[0], kEps);
    bool converged = true;
    for (std::size_t i = 0; i < r; ++i) {
      const double res = beta * std::abs(bs.left(k - 1, i));
      if (res > tol * sref) {
        converged = false;
        break;
      }
    }

    if (converged) {
      SvdResult out;
      out.left = Matrix(m, r, 0.0);
      out.right = Matrix(r, n, 0.0);
      out.singular_values.assign(bs.singular_values.begin(), bs.singular_values.begin() + r);
      for (std::size_t t = 0; t < r; ++t) {
        for (std::size_t j = 0; j < k; ++j) {
          const double wl = bs.left(j, t);
          if (wl != 0.0) {
            const double* uj = ub.cols[j].data();
            for (std::size_t i = 0; i < m; ++i) out.left(i, t) += wl * uj[i];
          }
          const double yr = bs.right(t, j);
          if (yr != 0.0) {
            const double* vj = vb.cols[j].data();
            for (std::size_t i = 0; i < n; ++i) out.right(t, i) += yr * vj[i];
          }
        }
      }
      return out;
    }

    // Thick restart: keep the leading Ritz triplets plus the residual
    // direction; the next expansion rebuilds the coupling column through
    // full Gram-Schmidt.
    std::size_t keep = std::min(r + 3, k >= 2 ? k - 2 : std::size_t{0});
    keep = std::max(keep, std::min(r, k - 1));

    Basis vnew(n), unew(m);
    for (std::size_t t = 0; t < keep; ++t) {
      std::vector<double> vcol(n, 0.0), ucol(m, 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        const double yr = bs.right(t, j);
        const double* vj = vb.cols[j].data();
        for (std::size_t i = 0; i < n; ++i) vcol[i] += yr * vj[i];
        const double wl = bs.left(j, t);
        const double* uj = ub.cols[j].data();
        for (std::size_t i = 0; i < m; ++i) ucol[i] += wl * uj[i];
      }
      vnew.push(std::move(vcol));
      unew.push(std::move(ucol));
    }
    std::vector<double> vpend(n);
    if (beta > 1e-13 * std::sqrt(static_cast<double>(n))) {
      for (std::size_t j = 0; j < n; ++j) vpend[j] = f[j] / beta;
    } else if (!vnew.fresh_orthonormal(rng, vpend)) {
      // Nothing left to explore; the kept triplets are exact.
      SvdResult out;
      out.left = Matrix(m, r, 0.0);
      out.right = Matrix(r, n, 0.0);
      out.singular_values.assign(bs.singular_values.begin(), bs.singular_values.begin() + r);
      for (std::size_t t = 0; t < r; ++t)
        for (std::size_t i = 0; i < m; ++i) out.left(i, t) = unew.cols[t][i];
      for (std::size_t t = 0; t < r; ++t)
        for (std::size_t i = 0; i < n; ++i) out.right(t, i) = vnew.cols[t][i];
      return out;
    }
    vnew.push(std::move(vpend));

    vb = std::move(vnew);
    ub = std::move(unew);
    b = Matrix(kmax, kmax, 0.0);
    for (std::size_t t = 0; t < keep; ++t) b(t, t) = bs.singular_values[t];
  }
}

}  // namespace lrmf
