#pragma once

#include "homolab/corrector.hpp"
#include "homolab/stats.hpp"

#include <functional>
#include <string>
#include <vector>

namespace homolab {

/// Diffusion dX = b(X) dt + sqrt(a(X)) dB at unit scale, Euler-Maruyama.
struct PathBundle {
  int d = 0;
  double dt = 0.0;
  std::uint64_t seed = 0;
  std::vector<double> times;       ///< unit-scale time of every step
  std::vector<double> X;           ///< lifted positions, times.size() * d
  std::vector<double> increments;  ///< Brownian increments per step, steps * d (full paths only)
  std::vector<double> sqrt_a;      ///< diffusion coefficient used at each step, steps * d

  // Filled by decompose.
  double eps = 1.0;
  Vec xi;
  std::vector<double> M;            ///< martingale part at each stored time
  std::vector<double> R;            ///< remainder by bookkeeping: xi . eps (X - X_0) - M
  std::vector<double> R_corrector;  ///< -eps (phi_xi(X) - phi_xi(X_0))
  std::vector<double> QV;           ///< <M>

  std::size_t steps() const { return times.empty() ? 0 : times.size() - 1; }
  const double* position(std::size_t i) const { return X.data() + i * static_cast<std::size_t>(d); }
  /// max |xi . eps (X_t - X_0) - R_t - M_t| over stored times.
  double telescoping_residual() const;
};

/// Full path with stored increments. Throws SimulationBlowup on a non-finite state.
PathBundle simulate_path(const CoefficientField& field, const Vec& x0, double dt, double t_final, std::uint64_t seed);

/// Martingale decomposition along the stored increments; M, R and <M> carry the eps scaling.
PathBundle decompose(PathBundle path, const CorrectorSet& cs, const Vec& xi, double eps);

struct McEstimate {
  double estimate = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// E_B f(eps X_{t/eps^2}) from X_0 = x / eps.
McEstimate mc_solution(const CoefficientField& field, double eps, const std::function<double(const double*)>& f,
                       double t, const Vec& x, std::size_t n_paths, std::uint64_t seed, double dt = 1e-3);

/// Terminal values of one decomposed path, streamed without storage.
struct MartingaleSample {
  double M = 0.0;
  double QV = 0.0;
  double R = 0.0;
  double R_corrector = 0.0;
  double M_tau = 0.0;  ///< M at the last time with <M> <= sigma2 t
  double displacement = 0.0;  ///< xi . eps (X_t - X_0)
  double residual = 0.0;      ///< displacement - R - M
};

struct MartingaleOptions {
  double eps = 1.0;
  double t = 1.0;
  double dt = 1e-3;
  double sigma2 = 0.0;  ///< reference for M_tau; 0 selects xi^T A_bar xi
  bool random_start = true;  ///< X_0 uniform in the cell, otherwise x0
  Vec x0;
};

std::vector<MartingaleSample> sample_martingales(const CoefficientField& field, const CorrectorSet& cs, const Vec& xi,
                                                 const MartingaleOptions& opt, std::size_t n_paths,
                                                 std::uint64_t seed);

struct DecayCurve {
  std::string abscissa = "t";
  std::vector<double> x;
  std::vector<double> values;
  std::vector<double> se;
  std::vector<std::vector<double>> per_env;  ///< one row per environment sample
  double slope = 0.0;
  double slope_lo = 0.0;
  double slope_hi = 0.0;
  double reference = 0.0;

  void write_csv(const std::string& path) const;
};

struct EnvDecayOptions {
  std::vector<double> times;  ///< increasing, >= 0
  std::size_t n_paths = 64;
  std::size_t starts_per_env = 1;  ///< uniform starting points per field, each an environment sample
  double dt = 1e-2;
  bool brownian = false;  ///< independent Brownian surrogate: a = I, b = 0
};

/// E |E_B g(omega_t)|^2 over environments, the square taken by the unbiased U-statistic over paths.
/// Each environment starts from a uniform point of its cell.
DecayCurve env_decay(const std::vector<CoefficientField>& fields, const std::vector<GridFunction>& g,
                     const EnvDecayOptions& opt, std::uint64_t seed);

/// E over starting points of (K_{2t} g) g with K_s the periodic Gaussian kernel of covariance s I;
/// the independent-Brownian surrogate curve in closed form.
double surrogate_convolution(const GridFunction& g, double t);

struct TimeIntegralBound {
  double t = 0.0;
  MeanSe lhs;  ///< E E_B (int_0^t g(omega_s) ds)^2
  MeanSe rhs;  ///< 2t int_0^t E |E_B g(omega_{s/2})|^2 ds
  MeanSe gap;  ///< lhs - rhs, paired over environments
  bool holds(double k_se = 3.0) const { return gap.mean <= k_se * gap.se; }
};

TimeIntegralBound time_integral_check(const std::vector<CoefficientField>& fields, const std::vector<GridFunction>& g, double t,
                      std::size_t n_paths, double dt, std::uint64_t seed);

}  // namespace homolab
