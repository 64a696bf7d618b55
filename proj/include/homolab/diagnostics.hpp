#pragma once

#include "homolab/field.hpp"
#include "homolab/stats.hpp"
#include "homolab/walk.hpp"

#include <functional>
#include <string>
#include <vector>

namespace homolab {

struct ExponentFit {
  double slope = 0.0;
  double intercept = 0.0;
  double lo = 0.0;  ///< 2.5% bootstrap quantile
  double hi = 0.0;  ///< 97.5% bootstrap quantile
  std::size_t points = 0;
};

/// Least-squares slope of log y against log x over x in [x_lo, x_hi], bootstrap over the points.
ExponentFit exponent_fit(const std::vector<double>& x, const std::vector<double>& y, double x_lo, double x_hi,
                         std::uint64_t seed, std::size_t n_boot = 200);

/// Fit the curve in place over a window.
void fit_curve(DecayCurve& c, double x_lo, double x_hi, std::uint64_t seed);

/// Ensemble covariance of g(x) g(x + l h e_k), averaged over x and axes, for lags l in grid steps.
/// Lags beyond L/4 are rejected.
DecayCurve decorrelation_curve(const std::vector<GridFunction>& g, const std::vector<int>& lags);

/// E[g(0)^2 g(l e_axis) - g(0) g(l e_axis)^2] with g centered per environment; zero for fields whose law is
/// invariant under reflection.
MeanSe odd_lag_asymmetry(const std::vector<GridFunction>& g, int lag, int axis = 0);

using CloudFunctional = std::function<double(const PoissonCloud&)>;

struct CloudLaw {
  int d = 2;
  double L = 4.0;
  double intensity = 1.0;
  double cell_size = 1.0;
  MarkLaw marks;
};

/// "count": number of points; "weighted-marks": sum of m_i prod_j cos^2(pi x_ij / L);
/// "nearest": exp(-min_i |x_i - c|^2) with c the box center, periodic distance.
CloudFunctional named_cloud_functional(const std::string& name, const CloudLaw& law);
const std::vector<std::string>& cloud_functional_names();

/// E |d_k count|^2 for a cell of side cell_size: intensity * cell_size^d.
double count_resampling_value(const CloudLaw& law);

struct ResamplingReport {
  MeanSe lhs;  ///< E |d_k g|^2 from nested resampling, bias corrected
  MeanSe rhs;  ///< (1/2) E |g - g_k|^2
  MeanSe gap;
  std::size_t inner = 16;
  bool holds(double k_se = 3.0) const { return std::abs(gap.mean) <= k_se * gap.se || (gap.mean == 0.0 && gap.se == 0.0); }
};

/// Both sides of E |d_k g|^2 = (1/2) E |g - g_k|^2 for one resampling cell k.
ResamplingReport resampling_identity(const CloudLaw& law, const CloudFunctional& g, std::span<const int> cell,
                                     std::size_t n_outer, std::uint64_t seed, std::size_t n_inner = 16);

struct CovarianceCheck {
  MeanSe cov;            ///< E{(f - Ef)(g - Eg)}
  double bound = 0.0;    ///< sum_k sqrt(E|d_k f|^2) sqrt(E|d_k g|^2)
  double bound_se = 0.0;
  bool holds(double k_se = 3.0) const { return std::abs(cov.mean) <= bound + k_se * std::hypot(cov.se, bound_se); }
};

CovarianceCheck covariance_bound(const CloudLaw& law, const CloudFunctional& f, const CloudFunctional& g,
                                 std::size_t n_outer, std::uint64_t seed, std::size_t n_inner = 16);

/// Test function with closed-form Gaussian expectation and derivative bounds.
struct TestFunction {
  std::string name;
  std::function<double(double)> f;
  std::function<double(double)> f2;
  double norm2 = 0.0;  ///< sup |f''|
  double norm3 = 0.0;  ///< sup |f'''|
  std::function<double(double)> gaussian_mean;  ///< v -> E f(sqrt(v) Z)
};

/// erf antiderivatives at three scales, cos, and a gaussian bump.
std::vector<TestFunction> clt_test_functions();

struct CltSample {
  double M = 0.0;
  double QV = 0.0;
  double M_tau = 0.0;
  double target = 0.0;  ///< sigma^2 t
};

struct CltRow {
  std::string name;
  double lhs2 = 0.0, rhs2 = 0.0, se2 = 0.0;  ///< |E f(M) - E f(sigma W)| vs sup|f''| E|<M> - sigma^2 t|
  double lhs3 = 0.0, rhs3 = 0.0, se3 = 0.0;  ///< third order, with the f''(M_tau) correction
  bool holds2 = false;
  bool holds3 = false;
};

/// Both inequalities per test function; holds when lhs <= rhs + k_se * SE of the paired difference.
std::vector<CltRow> clt_distance(const std::vector<CltSample>& samples, const std::vector<TestFunction>& family,
                                 double third_order_constant = 1.0, double k_se = 3.0);

struct ConvolutionSum {
  int d = 3;
  double p = 2.0;
  std::vector<double> x;
  std::vector<double> sum;
  std::vector<double> truncation;  ///< |S(R) - S(0.8 R)| with the continuum tail added to both
  std::vector<double> bound;
  std::vector<double> ratio;
  double spread() const;  ///< max ratio / min ratio
};

/// sum_k (1 ^ |k|^-p)(1 ^ |x - k|^-p) over Z^d with x = |x| e_1, ball of radius radius_factor * max(|x|, 10)
/// plus the continuum tail. The bound is 1 ^ |x|^{2-d} for p = d - 1 and log(2 + |x|) / |x|^d for p = d.
ConvolutionSum convolution_power_sum(int d, double p, const std::vector<double>& x, double radius_factor = 4.0);

}  // namespace homolab
