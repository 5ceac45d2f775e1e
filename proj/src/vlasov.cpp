#include "lrmf/vlasov.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "lrmf/rng.hpp"

namespace lrmf {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

// Degree-5 Lagrange weights on nodes {0,...,5} evaluated at eta.
void quintic_weights(double eta, double w[6]) {
  static constexpr double denom[6] = {-120.0, 24.0, -12.0, 12.0, -24.0, 120.0};
  double diff[6];
  for (int t = 0; t < 6; ++t) diff[t] = eta - static_cast<double>(t);
  for (int s = 0; s < 6; ++s) {
    double num = 1.0;
    for (int t = 0; t < 6; ++t)
      if (t != s) num *= diff[t];
    w[s] = num / denom[s];
  }
}

std::size_t wrap(std::ptrdiff_t i, std::ptrdiff_t n) {
  std::ptrdiff_t r = i % n;
  if (r < 0) r += n;
  return static_cast<std::size_t>(r);
}

void check_finite(const Matrix& f, const char* where) {
  if (!f.all_finite()) throw std::runtime_error(std::string(where) + ": non-finite values");
}

}  // namespace

void PhaseSpaceGrid::validate() const {
  if (nx < 8 || nv < 8)
    throw std::invalid_argument("PhaseSpaceGrid: need at least 8 points per axis for the "
                                "quintic stencil");
  if (!(x_max > x_min) || !(v_max > v_min))
    throw std::invalid_argument("PhaseSpaceGrid: empty domain");
}

PhaseSpaceGrid make_default_grid(std::size_t nx, std::size_t nv) {
  PhaseSpaceGrid g;
  g.nx = nx;
  g.nv = nv;
  g.x_min = 0.0;
  g.x_max = 2.0 * kTwoPi;
  g.v_min = -kTwoPi;
  g.v_max = kTwoPi;
  g.validate();
  return g;
}

Matrix init_landau_strong(const PhaseSpaceGrid& grid, double alpha, double k) {
  grid.validate();
  const double norm = 1.0 / std::sqrt(kTwoPi);
  Matrix f(grid.nx, grid.nv);
  for (std::size_t i = 0; i < grid.nx; ++i) {
    const double sx = 1.0 + alpha * std::cos(k * grid.x_center(i));
    for (std::size_t j = 0; j < grid.nv; ++j) {
      const double v = grid.v_center(j);
      f(i, j) = norm * sx * std::exp(-0.5 * v * v);
    }
  }
  return f;
}

Matrix init_two_stream(const PhaseSpaceGrid& grid, double alpha, double k, double v0) {
  grid.validate();
  const double norm = 1.0 / (2.0 * std::sqrt(kTwoPi));
  Matrix f(grid.nx, grid.nv);
  for (std::size_t i = 0; i < grid.nx; ++i) {
    const double sx = 1.0 + alpha * std::cos(k * grid.x_center(i));
    for (std::size_t j = 0; j < grid.nv; ++j) {
      const double v = grid.v_center(j);
      const double beams =
          std::exp(-0.5 * (v - v0) * (v - v0)) + std::exp(-0.5 * (v + v0) * (v + v0));
      f(i, j) = norm * beams * sx;
    }
  }
  return f;
}

Matrix init_random_smooth(const PhaseSpaceGrid& grid, std::uint64_t seed, double smooth_scale) {
  grid.validate();
  if (!(smooth_scale > 0.0))
    throw std::invalid_argument("init_random_smooth: smooth_scale must be positive");
  Rng rng(seed);
  Matrix noise(grid.nx, grid.nv);
  for (std::size_t i = 0; i < noise.size(); ++i) noise.data()[i] = rng.next_double();

  // Separable Gaussian blur, truncated at 4 sigma: periodic in x, kernel
  // renormalized at the v edges so a constant field stays constant.
  const int half = std::max(1, static_cast<int>(std::ceil(4.0 * smooth_scale)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  double ksum = 0.0;
  for (int t = -half; t <= half; ++t) {
    const double w = std::exp(-0.5 * (t / smooth_scale) * (t / smooth_scale));
    kernel[static_cast<std::size_t>(t + half)] = w;
    ksum += w;
  }
  for (double& w : kernel) w /= ksum;

  Matrix xblur(grid.nx, grid.nv, 0.0);
  const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(grid.nx);
  for (std::ptrdiff_t i = 0; i < nx; ++i)
    for (int t = -half; t <= half; ++t) {
      const double w = kernel[static_cast<std::size_t>(t + half)];
      const std::size_t src = wrap(i + t, nx);
      for (std::size_t j = 0; j < grid.nv; ++j)
        xblur(static_cast<std::size_t>(i), j) += w * noise(src, j);
    }

  // Second separable pass along v, then shift to nonnegative and scale to
  // unit mean.
  const std::ptrdiff_t nv = static_cast<std::ptrdiff_t>(grid.nv);
  Matrix f(grid.nx, grid.nv, 0.0);
  for (std::ptrdiff_t j = 0; j < nv; ++j) {
    double wsum = 0.0;
    const std::ptrdiff_t lo = std::max<std::ptrdiff_t>(-half, -j);
    const std::ptrdiff_t hi = std::min<std::ptrdiff_t>(half, nv - 1 - j);
    for (std::ptrdiff_t t = lo; t <= hi; ++t) wsum += kernel[static_cast<std::size_t>(t + half)];
    for (std::ptrdiff_t t = lo; t <= hi; ++t) {
      const double w = kernel[static_cast<std::size_t>(t + half)] / wsum;
      for (std::size_t i = 0; i < grid.nx; ++i)
        f(i, static_cast<std::size_t>(j)) += w * xblur(i, static_cast<std::size_t>(j + t));
    }
  }

  // The blur of nonnegative noise is already nonnegative; shift only guards
  // against a negative floor so heavy smoothing still flattens the field.
  double fmin = f.data()[0], fsum = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) fmin = std::min(fmin, f.data()[i]);
  const double shift = fmin < 0.0 ? -fmin : 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) {
    f.data()[i] += shift;
    fsum += f.data()[i];
  }
  const double mean = fsum / static_cast<double>(f.size());
  if (mean <= 1e-300) {
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] = 1.0;
  } else {
    for (std::size_t i = 0; i < f.size(); ++i) f.data()[i] /= mean;
  }
  return f;
}

std::vector<double> charge_density(const Matrix& f, const PhaseSpaceGrid& grid) {
  if (f.rows() != grid.nx || f.cols() != grid.nv)
    throw std::invalid_argument("charge_density: matrix " + shape_string(f) +
                                " does not match grid");
  std::vector<double> rho(grid.nx, 0.0);
  const double dv = grid.dv();
  for (std::size_t i = 0; i < grid.nx; ++i) {
    double acc = 0.0;
    const double* row = f.row(i);
    for (std::size_t j = 0; j < grid.nv; ++j) acc += row[j];
    rho[i] = acc * dv;
  }
  return rho;
}

FieldState poisson_solve(const std::vector<double>& rho, const PhaseSpaceGrid& grid) {
  const std::size_t n = grid.nx;
  if (rho.size() != n) throw std::invalid_argument("poisson_solve: density length mismatch");

  FieldState fs;
  fs.rho = rho;
  double mean = 0.0;
  for (double r : rho) mean += r;
  fs.rho0 = mean / static_cast<double>(n);

  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i) g[i] = rho[i] - fs.rho0;

  // Direct DFT with a precomputed twiddle table; O(nx^2) is cheap at these
  // widths and keeps the solve dependency-free.
  std::vector<double> ct(n), st(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double ang = kTwoPi * static_cast<double>(t) / static_cast<double>(n);
    ct[t] = std::cos(ang);
    st[t] = std::sin(ang);
  }
  std::vector<double> gre(n, 0.0), gim(n, 0.0);
  for (std::size_t m = 0; m < n; ++m) {
    double re = 0.0, im = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t t = (m * j) % n;
      re += g[j] * ct[t];
      im -= g[j] * st[t];
    }
    gre[m] = re;
    gim[m] = im;
  }

  const double lx = grid.x_max - grid.x_min;
  std::vector<double> pre(n, 0.0), pim(n, 0.0), ere(n, 0.0), eim(n, 0.0);
  for (std::size_t m = 1; m < n; ++m) {
    const double freq =
        (m <= n / 2) ? static_cast<double>(m) : static_cast<double>(m) - static_cast<double>(n);
    const double kx = kTwoPi * freq / lx;
    pre[m] = gre[m] / (kx * kx);
    pim[m] = gim[m] / (kx * kx);
    // E = -phi' -> multiply by -i kx; the Nyquist mode has no well-defined
    // odd derivative and is dropped.
    if (n % 2 == 0 && m == n / 2) continue;
    ere[m] = kx * pim[m];
    eim[m] = -kx * pre[m];
  }

  fs.phi.assign(n, 0.0);
  fs.e_field.assign(n, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t j = 0; j < n; ++j) {
    double p = 0.0, e = 0.0;
    for (std::size_t m = 0; m < n; ++m) {
      const std::size_t t = (m * j) % n;
      p += pre[m] * ct[t] - pim[m] * st[t];
      e += ere[m] * ct[t] - eim[m] * st[t];
    }
    fs.phi[j] = p * inv;
    fs.e_field[j] = e * inv;
  }
  return fs;
}

Matrix advect_x(const Matrix& f, const PhaseSpaceGrid& grid, double dt) {
  if (f.rows() != grid.nx || f.cols() != grid.nv)
    throw std::invalid_argument("advect_x: matrix " + shape_string(f) + " does not match grid");
  Matrix out(grid.nx, grid.nv);
  const std::ptrdiff_t nx = static_cast<std::ptrdiff_t>(grid.nx);
  const double dx = grid.dx();
  std::vector<double> col(grid.nx), shifted(grid.nx);
  for (std::size_t j = 0; j < grid.nv; ++j) {
    // Departure offset in index units, identical for the whole column.
    const double d = -grid.v_center(j) * dt / dx;
    const double fb = std::floor(d);
    const std::ptrdiff_t b = static_cast<std::ptrdiff_t>(fb);
    double w[6];
    quintic_weights(2.0 + (d - fb), w);
    for (std::size_t i = 0; i < grid.nx; ++i) col[i] = f(i, j);
    for (std::ptrdiff_t i = 0; i < nx; ++i) {
      double acc = 0.0;
      for (int s = 0; s < 6; ++s) acc += w[s] * col[wrap(i + b - 2 + s, nx)];
      shifted[static_cast<std::size_t>(i)] = acc;
    }
    for (std::size_t i = 0; i < grid.nx; ++i) out(i, j) = shifted[i];
  }
  return out;
}

Matrix advect_v(const Matrix& f, const PhaseSpaceGrid& grid, const std::vector<double>& e_field,
                double dt) {
  if (f.rows() != grid.nx || f.cols() != grid.nv)
    throw std::invalid_argument("advect_v: matrix " + shape_string(f) + " does not match grid");
  if (e_field.size() != grid.nx)
    throw std::invalid_argument("advect_v: field length does not match grid");
  Matrix out(grid.nx, grid.nv, 0.0);
  const std::ptrdiff_t nv = static_cast<std::ptrdiff_t>(grid.nv);
  const double dv = grid.dv();
  const double half = 0.5;
  for (std::size_t i = 0; i < grid.nx; ++i) {
    const double d = -e_field[i] * dt / dv;
    const double fb = std::floor(d);
    const std::ptrdiff_t b = static_cast<std::ptrdiff_t>(fb);
    double winterior[6];
    quintic_weights(2.0 + (d - fb), winterior);
    const double* src = f.row(i);
    double* dst = out.row(i);
    for (std::ptrdiff_t j = 0; j < nv; ++j) {
      const double jreal = static_cast<double>(j) + d;
      // Departure point outside [v_min, v_max] reads as zero.
      if (jreal < -half || jreal > static_cast<double>(nv) - half) {
        dst[j] = 0.0;
        continue;
      }
      std::ptrdiff_t js = j + b - 2;
      if (js >= 0 && js + 5 < nv) {
        double acc = 0.0;
        for (int s = 0; s < 6; ++s) acc += winterior[s] * src[js + s];
        dst[j] = acc;
      } else {
        // Shifted stencil: stay inside the domain instead of reading padding.
        js = std::clamp<std::ptrdiff_t>(js, 0, nv - 6);
        double w[6];
        quintic_weights(jreal - static_cast<double>(js), w);
        double acc = 0.0;
        for (int s = 0; s < 6; ++s) acc += w[s] * src[js + s];
        dst[j] = acc;
      }
    }
  }
  return out;
}

std::pair<Matrix, FieldState> step(const Matrix& f, double dt, const PhaseSpaceGrid& grid) {
  grid.validate();
  check_finite(f, "step");
  const double lx = grid.x_max - grid.x_min;
  const double lv = grid.v_max - grid.v_min;
  const double vmaxabs = std::max(std::abs(grid.v_min), std::abs(grid.v_max));
  if (vmaxabs * std::abs(dt) * 0.5 > 0.5 * lx)
    throw std::runtime_error("step: x displacement exceeds half the domain");

  Matrix half1 = advect_x(f, grid, 0.5 * dt);
  FieldState fs = poisson_solve(charge_density(half1, grid), grid);
  double emax = 0.0;
  for (double e : fs.e_field) emax = std::max(emax, std::abs(e));
  if (emax * std::abs(dt) > 0.5 * lv)
    throw std::runtime_error("step: v displacement exceeds half the domain");
  Matrix kicked = advect_v(half1, grid, fs.e_field, dt);
  Matrix full = advect_x(kicked, grid, 0.5 * dt);
  check_finite(full, "step result");
  return {std::move(full), std::move(fs)};
}

TimeSeries run(const Matrix& ic, const PhaseSpaceGrid& grid, double dt, std::size_t steps,
               std::size_t record_every, const std::string& ic_name) {
  grid.validate();
  if (record_every < 1) throw std::invalid_argument("run: record_every must be at least 1");
  TimeSeries series;
  series.grid = grid;
  series.dt = dt * static_cast<double>(record_every);
  series.ic_name = ic_name;

  auto record = [&](const Matrix& f) {
    FieldState fs = poisson_solve(charge_density(f, grid), grid);
    series.frames.push_back(f);
    series.field_energy.push_back(field_energy(fs.e_field, grid));
  };

  record(ic);
  Matrix f = ic;
  for (std::size_t s = 1; s <= steps; ++s) {
    try {
      f = step(f, dt, grid).first;
    } catch (const std::exception& e) {
      throw std::runtime_error("run: step " + std::to_string(s) + ": " + e.what());
    }
    if (s % record_every == 0) record(f);
  }
  return series;
}

double total_mass(const Matrix& f, const PhaseSpaceGrid& grid) {
  double acc = 0.0;
  for (std::size_t i = 0; i < f.size(); ++i) acc += f.data()[i];
  return acc * grid.dx() * grid.dv();
}

double field_energy(const std::vector<double>& e_field, const PhaseSpaceGrid& grid) {
  double acc = 0.0;
  for (double e : e_field) acc += e * e;
  return 0.5 * acc * grid.dx();
}

}  // namespace lrmf
