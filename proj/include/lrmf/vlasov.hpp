#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lrmf/matrix.hpp"

namespace lrmf {

// Phase-space discretization: rows are space (periodic), columns are velocity
// (truncated). Samples sit at cell centers.
struct PhaseSpaceGrid {
  std::size_t nx = 0;
  std::size_t nv = 0;
  double x_min = 0.0, x_max = 0.0;
  double v_min = 0.0, v_max = 0.0;

  double dx() const { return (x_max - x_min) / static_cast<double>(nx); }
  double dv() const { return (v_max - v_min) / static_cast<double>(nv); }
  double x_center(std::size_t i) const { return x_min + (static_cast<double>(i) + 0.5) * dx(); }
  double v_center(std::size_t j) const { return v_min + (static_cast<double>(j) + 0.5) * dv(); }

  // Throws std::invalid_argument if the grid cannot host the scheme.
  void validate() const;
};

// Grid over the default domain x in [0, 4*pi], v in [-2*pi, 2*pi].
PhaseSpaceGrid make_default_grid(std::size_t nx, std::size_t nv);

// Electrostatic state on the spatial grid, zero-mean gauge for the potential.
struct FieldState {
  std::vector<double> rho;
  double rho0 = 0.0;
  std::vector<double> phi;
  std::vector<double> e_field;
};

struct TimeSeries {
  PhaseSpaceGrid grid;
  double dt = 0.0;  // time between stored frames
  std::vector<Matrix> frames;
  std::string ic_name;
  std::vector<double> field_energy;
};

// f(x,v) = (1/sqrt(2 pi)) (1 + alpha cos(k x)) exp(-v^2/2)
Matrix init_landau_strong(const PhaseSpaceGrid& grid, double alpha = 0.5, double k = 0.5);

// f(x,v) = (1/(2 sqrt(2 pi))) [exp(-(v-v0)^2/2) + exp(-(v+v0)^2/2)] (1 + alpha cos(k x))
Matrix init_two_stream(const PhaseSpaceGrid& grid, double alpha = 0.05, double k = 0.5,
                       double v0 = 2.4);

// Seeded uniform noise blurred by a Gaussian of width smooth_scale grid
// cells, shifted and scaled to be nonnegative with unit mean. Deterministic
// for a fixed seed.
Matrix init_random_smooth(const PhaseSpaceGrid& grid, std::uint64_t seed, double smooth_scale);

// rho(x_i) = sum_j f(i,j) dv
std::vector<double> charge_density(const Matrix& f, const PhaseSpaceGrid& grid);

// Spectral solve of -phi'' = rho - rho0 with periodic x and mean(phi) = 0;
// E = -phi' computed spectrally. rho0 is the spatial mean of rho.
FieldState poisson_solve(const std::vector<double>& rho, const PhaseSpaceGrid& grid);

// Advection along x: result(x, v) = f(x - v dt, v), periodic in x, quintic
// Lagrange interpolation.
Matrix advect_x(const Matrix& f, const PhaseSpaceGrid& grid, double dt);

// Advection along v: result(x, v) = f(x, v - E(x) dt); departure points
// outside [v_min, v_max] read as zero, stencils near the boundary shift
// inward so in-domain departure points never touch padding.
Matrix advect_v(const Matrix& f, const PhaseSpaceGrid& grid, const std::vector<double>& e_field,
                double dt);

// One Strang-split step: half x-advection, field solve, full v-advection,
// half x-advection. Returns the new distribution and the mid-step field.
std::pair<Matrix, FieldState> step(const Matrix& f, double dt, const PhaseSpaceGrid& grid);

// Advances `steps` steps of size dt, recording the initial frame plus every
// record_every-th result together with its field energy.
TimeSeries run(const Matrix& ic, const PhaseSpaceGrid& grid, double dt, std::size_t steps,
               std::size_t record_every, const std::string& ic_name = "custom");

// sum f dx dv over the whole grid (midpoint rule)
double total_mass(const Matrix& f, const PhaseSpaceGrid& grid);

// (1/2) sum E^2 dx
double field_energy(const std::vector<double>& e_field, const PhaseSpaceGrid& grid);

}  // namespace lrmf
