#pragma once

#include "homolab/corrector.hpp"
#include "homolab/stats.hpp"

#include <map>
#include <string>
#include <vector>

namespace homolab {

/// Smooth initial datum / right-hand side with closed-form homogenized evolution.
struct InitialDatum {
  enum class Kind { constant, gaussian, cosine };
  Kind kind = Kind::cosine;
  int d = 2;
  double amplitude = 1.0;
  double period = 0.0;  ///< torus period P0; 0 means the datum lives on R^d (gaussian only)

  Vec center;             ///< gaussian
  double variance = 0.1;  ///< gaussian: amplitude * exp(-|x - center|^2 / (2 variance))

  std::vector<int> wavenumbers;  ///< cosine: amplitude * prod_j cos(2 pi n_j x_j / P0 + theta_j)
  std::vector<double> phases;

  struct Mode {
    double amp;
    Vec k;
    double phase;
  };

  double value(const double* x) const;
  void gradient(const double* x, double* g) const;
  bool is_trig() const { return kind != Kind::gaussian; }
  /// Expansion of a trigonometric datum into amp * cos(k.x + phase) terms.
  std::vector<Mode> modes() const;
  /// Largest |k| carried by the datum (an effective value for gaussians).
  double max_wavenumber() const;
  void validate() const;

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  static InitialDatum from_kv(const std::map<std::string, std::string>& kv, int d, std::vector<std::string>& problems);
};

struct StepPlan;

struct HomValue {
  double value = 0.0;
  Vec grad;
};

/// Homogenized solution with kernel covariance A_bar t. With h > 0 the second-order difference
/// symbol on spacing h replaces k^T A k (trigonometric data only), so that constant-coefficient
/// problems are reproduced exactly by the lattice solver.
HomValue homogenized_solution(const Mat& A_bar, const InitialDatum& f, double t, const Vec& x, double h = 0.0);

/// Trigonometric datum propagated by the time stepper's own amplification factors on spacing h.
HomValue homogenized_scheme(const Mat& A_bar, const InitialDatum& f, const StepPlan& plan, std::size_t slice,
                            const Vec& x, double h);

/// U_hom with U - (1/2) div(A_bar grad U) = f; gaussians by exp-sinh quadrature of the parabolic solution.
HomValue homogenized_elliptic(const Mat& A_bar, const InitialDatum& f, const Vec& x, double h = 0.0);

/// Difference symbol of (1/2) A : grad grad on spacing h (h = 0 gives (1/2) k^T A k).
double discrete_symbol(const Mat& A_bar, const Vec& k, double h);

/// Resolution of the micro scale: either m grid points per unit micro length, or a fixed macro spacing h.
struct GridPolicy {
  double m = 8.0;
  double h = 0.0;
  double min_points = 8.0;  ///< minimum grid points per unit micro length
};

struct MacroSetup {
  double eps = 1.0;
  double period = 1.0;  ///< macro torus period
  int points_per_unit = 8;
  Grid macro;
  Grid cell;
};

MacroSetup macro_setup(const CoefficientField& field, double eps, const InitialDatum& f, const GridPolicy& policy);

struct ParabolicOptions {
  double dt = 0.0;  ///< 0 selects h^2 / 4
  bool richardson = true;
  int rannacher_substeps = 4;  ///< implicit Euler substeps replacing the first step
  double tol = 1e-12;
  double accuracy_budget = 0.5;  ///< bound on dt * (1/2) c_plus * |k|^2 for the datum's modes
  double min_points = 8.0;       ///< required eps / h
};

/// Time steps taken by solve_parabolic: counts[j] equal steps up to times[j], the first step replaced by
/// implicit Euler substeps, optionally combined by Richardson extrapolation.
struct StepPlan {
  std::vector<double> times;
  std::vector<std::size_t> counts;
  int substeps = 4;
  bool richardson = true;

  /// Amplification of a mode with decay rate sigma up to times[slice].
  double factor(double sigma, std::size_t slice) const;
};

struct ParabolicResult {
  std::vector<double> times;
  StepPlan plan;
  std::vector<GridFunction> slices;
  double mass_defect = 0.0;  ///< max relative change of the grid mean
  double overshoot = 0.0;    ///< max excursion outside [min f, max f]
  std::size_t cg_iterations = 0;
  std::size_t steps = 0;
};

GridFunction sample_datum(const InitialDatum& f, const Grid& g);

/// Crank-Nicolson with implicit Euler start on a(x/eps); slices at each requested time.
ParabolicResult solve_parabolic(const CoefficientField& field, double eps, const InitialDatum& f,
                                const std::vector<double>& times, const Grid& grid, const ParabolicOptions& opt);

struct LaplaceOptions {
  double dt0 = 1e-3;
  double growth = 1.02;
  double dt_max = 0.02;
  double tail_tol = 1e-13;
  double t_cap = 60.0;
  bool richardson = true;
  double tol = 1e-12;
};

struct EllipticResult {
  GridFunction U;
  double tail_bound = 0.0;  ///< e^{-T} max|u(T)|, zero for the direct path
  double t_max = 0.0;
  std::size_t cg_iterations = 0;
};

/// Direct solve of (1 - L_eps) U = f.
EllipticResult elliptic_direct(const CoefficientField& field, double eps, const InitialDatum& f, const Grid& grid,
                               double tol = 1e-12);
/// Trapezoidal quadrature of e^{-t} u_eps(t) along the Crank-Nicolson trajectory, Richardson in the step.
EllipticResult elliptic_laplace(const CoefficientField& field, double eps, const InitialDatum& f, const Grid& grid,
                                const LaplaceOptions& opt);

struct Probe {
  double t = 0.0;
  std::vector<double> x;
};

struct ExpansionRow {
  std::size_t env = 0;
  std::uint64_t seed = 0;
  double eps = 0.0;
  std::size_t probe = 0;
  double t = 0.0;
  std::vector<double> x;
  double u_eps = 0.0;
  double u_hom = 0.0;
  std::vector<double> grad_u_hom;
  std::vector<double> phi;  ///< phi_{e_k}(x / eps)
  double C = 0.0;

  double first_order() const;
  /// u_eps - u_hom - eps grad u_hom . phi - eps C, zero up to rounding.
  double reconstruction_defect() const;
};

struct ExpansionCell {
  double eps = 0.0;
  std::size_t probe = 0;
  MeanSe abs_C;
  MeanSe C;
};

struct ExpansionReport {
  bool elliptic = false;
  std::vector<double> eps;
  std::vector<Probe> probes;
  std::vector<ExpansionRow> rows;
  std::vector<ExpansionCell> cells;  ///< one per (eps, probe), eps-major

  const ExpansionCell& cell(std::size_t eps_index, std::size_t probe) const;
  /// mean |C| strictly decreasing along the ladder at this probe.
  bool strictly_decreasing(std::size_t probe) const;
  double final_over_initial(std::size_t probe) const;
  void write_csv(const std::string& path) const;
};

/// Group rows into per-(eps, probe) ensemble statistics.
ExpansionReport expansion_report(std::vector<ExpansionRow> rows, const std::vector<double>& eps,
                                 const std::vector<Probe>& probes, bool elliptic);

/// grid: difference symbol with exact time; scheme: difference symbol with the stepper's amplification
/// factors; continuum: exact homogenized solution.
enum class ReferenceMode { grid, scheme, continuum };

struct ExpansionConfig {
  FieldSpec field;
  std::vector<std::uint64_t> env_seeds;
  std::vector<double> eps;
  std::vector<Probe> probes;
  InitialDatum datum;
  GridPolicy grid;
  ParabolicOptions time;
  CorrectorOptions corrector;
  ReferenceMode reference = ReferenceMode::grid;
  bool elliptic = false;
  bool laplace_path = false;
  LaplaceOptions laplace;
};

/// Per environment: correctors, u_eps on each ladder entry, and probe rows.
ExpansionReport run_expansion(const ExpansionConfig& cfg);

/// Rows for one environment and one eps, given its solution slices (parabolic) or U (elliptic).
std::vector<ExpansionRow> probe_rows(const CorrectorSet& cs, const MacroSetup& ms, const InitialDatum& f,
                                     const std::vector<Probe>& probes, const std::vector<GridFunction>& slices,
                                     const std::vector<double>& slice_times, bool elliptic, ReferenceMode ref,
                                     const StepPlan* plan = nullptr);

}  // namespace homolab
