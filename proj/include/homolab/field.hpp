#pragma once

#include "homolab/common.hpp"
#include "homolab/rng.hpp"

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace homolab {

enum class FieldModel { constant, laminate, periodic_smooth, mollified_checkerboard, poisson_bump };

std::string to_string(FieldModel m);
FieldModel parse_field_model(const std::string& s);

/// Law of the scalar marks attached to cloud points.
struct MarkLaw {
  enum class Kind { uniform, constant, exponential };
  Kind kind = Kind::uniform;
  double p1 = 0.0;
  double p2 = 1.0;

  double sample(CounterRng& rng) const;
  double mean() const;
  std::string describe() const;
  /// "uniform:a:b", "constant:c" or "exponential:rate".
  static MarkLaw parse(const std::string& s);
};

/// Marked points on [0, L)^d, grouped by resampling cell.
struct PoissonCloud {
  int d = 0;
  double box_length = 0.0;
  double intensity = 0.0;
  double cell_size = 1.0;
  std::uint64_t seed = 0;
  MarkLaw mark_law;
  int cells_per_axis = 0;
  std::vector<double> locations;          ///< size() * d, point-major
  std::vector<double> marks;              ///< one scalar mark per point
  std::vector<std::size_t> cell_offsets;  ///< CSR offsets, num_cells() + 1 entries

  std::size_t size() const { return marks.size(); }
  std::size_t num_cells() const;
  std::size_t cell_linear(std::span<const int> k) const;
  const double* location(std::size_t i) const { return locations.data() + i * static_cast<std::size_t>(d); }
};

PoissonCloud sample_cloud(int d, double box_length, double intensity, const MarkLaw& law,
                          std::uint64_t seed, double cell_size = 1.0);

/// Replace the points of cell k by a fresh sample drawn from substream (seed, k).
PoissonCloud resample_cell(const PoissonCloud& cloud, std::span<const int> k, std::uint64_t seed);

void write_cloud_csv(const PoissonCloud& cloud, const std::string& path);
PoissonCloud read_cloud_csv(const std::string& path, const PoissonCloud& meta);

/// Flat description of a coefficient field; round-trips through key=value pairs.
struct FieldSpec {
  FieldModel model = FieldModel::constant;
  int d = 2;
  double L = 1.0;
  double c_minus = 0.5;
  double c_plus = 4.0;
  std::uint64_t seed = 0;
  std::vector<double> anisotropy;  ///< a_kk gets factor (1 + p_k); empty means isotropic

  double value = 1.0;  ///< constant model

  double alpha_mean = 2.5;  ///< laminate: alpha(x1) = mean - amp cos(2 pi x1/L) + amp2 sin(4 pi x1/L)
  double alpha_amp = 1.5;
  double alpha_amp2 = 0.0;
  double beta = 1.0;
  std::string laminate_profile = "cosine";       ///< or "two-phase" (values lo/hi on halves)
  std::string laminate_transverse = "constant";  ///< or "isotropic": a = alpha(x1) I

  int modes = 4;          ///< periodic-smooth
  double contrast = 0.6;  ///< fraction of the admissible oscillation used

  double v_lo = 1.0;  ///< checkerboard cell values, also two-phase laminate values
  double v_hi = 4.0;
  double mollify_radius = 0.0;  ///< 0 selects 0.6 sqrt(d) cell_size

  double intensity = 1.0;  ///< poisson-bump
  double cell_size = 1.0;
  double bump_radius = 0.5;
  bool skew = false;
  MarkLaw marks;
  double kappa = 2.0;
  double s_center = 0.5;

  std::vector<std::pair<std::string, std::string>> to_kv() const;
  /// Unknown keys and bad values are appended to problems with a "field." prefix.
  static FieldSpec from_kv(const std::map<std::string, std::string>& kv, std::vector<std::string>& problems);
};

struct FieldValue {
  Mat a;
  Vec b;
};

/// Diagonal, symmetric, uniformly elliptic coefficient field, L-periodic in every direction.
class CoefficientField {
 public:
  explicit CoefficientField(FieldSpec spec);
  CoefficientField(FieldSpec spec, PoissonCloud cloud);

  const FieldSpec& spec() const { return spec_; }
  int dim() const { return spec_.d; }
  double period() const { return spec_.L; }
  double c_minus() const { return spec_.c_minus; }
  double c_plus() const { return spec_.c_plus; }
  const PoissonCloud* cloud() const { return cloud_ ? &*cloud_ : nullptr; }

  bool is_random() const;
  bool is_constant() const { return spec_.model == FieldModel::constant; }
  /// False for the two-phase laminate, whose drift is singular at the interfaces.
  bool has_smooth_drift() const;
  double dependence_radius() const;

  FieldValue evaluate(const Vec& x) const;

  /// a_kk(x) for k < d, no argument checks.
  void diagonal(const double* x, double* a_diag) const;
  /// a_kk(x) and b_k(x) = (1/2) d_k a_kk(x).
  void diagonal_and_drift(const double* x, double* a_diag, double* b) const;

  /// The cutoff map of the poisson-bump model and its range.
  double cutoff(double s) const;
  double cutoff_lo() const { return lo_; }
  double cutoff_hi() const { return hi_; }

 private:
  void init();
  double base(const double* xw, double* grad) const;
  double bump_sum(const double* xw, double* grad) const;
  double checker_log(const double* xw, double* grad) const;
  double wrap(double x) const;

  FieldSpec spec_;
  std::optional<PoissonCloud> cloud_;
  std::vector<double> q_;  ///< 1 + p_k
  double lo_ = 0.0, hi_ = 0.0;
  std::vector<double> mode_k_, mode_amp_, mode_phase_;
  std::vector<double> cell_log_value_;
  int checker_cells_ = 0;
  double mollify_r_ = 0.0;
  std::vector<double> skew_v_;
};

/// Compactly supported C^2 radial profile 1 - 6r^2 + 8r^3 - 3r^4 on r < 1.
double bump_profile(double r);
/// Derivative of bump_profile with respect to r.
double bump_profile_derivative(double r);

}  // namespace homolab
