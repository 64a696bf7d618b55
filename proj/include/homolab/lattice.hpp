#pragma once

#include "homolab/common.hpp"
#include "homolab/field.hpp"

#include <memory>
#include <string>
#include <vector>

namespace homolab {

/// Uniform periodic grid with n points per axis on [0, L)^d. Node i sits at i*h.
struct Grid {
  int d = 2;
  int n = 4;
  double L = 1.0;

  double h() const { return L / n; }
  std::size_t size() const;
  std::size_t stride(int axis) const;
  /// Throws InvalidParameter unless n >= 4, n even, L > 0 and size() <= max_points.
  void validate(std::size_t max_points = std::size_t(1) << 27) const;
  bool operator==(const Grid& o) const { return d == o.d && n == o.n && L == o.L; }
  /// Coordinates of node index i.
  void coordinates(std::size_t i, double* x) const;
};

struct GridFunction {
  Grid grid;
  int components = 1;
  std::vector<double> values;  ///< component-major: values[c * N + i]

  GridFunction() = default;
  GridFunction(const Grid& g, int comps) : grid(g), components(comps), values(g.size() * static_cast<std::size_t>(comps), 0.0) {}

  std::size_t size() const { return grid.size(); }
  double* comp(int c) { return values.data() + static_cast<std::size_t>(c) * grid.size(); }
  const double* comp(int c) const { return values.data() + static_cast<std::size_t>(c) * grid.size(); }
  std::span<const double> span(int c = 0) const { return {comp(c), grid.size()}; }
  double mean(int c = 0) const { return pairwise_mean(span(c)); }
  double max_abs() const;
};

/// Staggered edge coefficients: a[k][i] sits on the edge from node i to node i + e_k.
struct EdgeCoefficients {
  Grid grid;
  std::vector<std::vector<double>> a;
};

/// harmonic: edge mean of 1/a by Simpson over both nodes and the midpoint, inverted; midpoint: a at the midpoint.
enum class EdgeRule { harmonic, midpoint };

/// Discrete lambda - (1/2) div(a grad) with the 2d+1 point flux stencil; symmetric PSD.
class DivFormOperator {
 public:
  DivFormOperator(std::shared_ptr<const EdgeCoefficients> edges, double lambda);

  const Grid& grid() const { return edges_->grid; }
  double lambda() const { return lambda_; }
  const EdgeCoefficients& edges() const { return *edges_; }
  std::shared_ptr<const EdgeCoefficients> edges_ptr() const { return edges_; }
  DivFormOperator with_lambda(double lambda) const { return DivFormOperator(edges_, lambda); }

  /// out = (lambda - L_h) u.
  void apply(const double* u, double* out) const;
  GridFunction apply(const GridFunction& u) const;
  std::vector<double> diagonal() const;

 private:
  std::shared_ptr<const EdgeCoefficients> edges_;
  double lambda_;
};

DivFormOperator assemble(const CoefficientField& field, const Grid& grid, double lambda,
                         EdgeRule rule = EdgeRule::harmonic);

/// Operator with coefficients a(x/eps) on a macro grid. Requires eps*L to divide the macro period
/// and the micro spacing h/eps to divide L.
DivFormOperator assemble_scaled(const CoefficientField& field, const Grid& macro, double eps, double lambda,
                                EdgeRule rule = EdgeRule::harmonic);

/// Node values a_kk(x_i), component k.
GridFunction node_coefficients(const CoefficientField& field, const Grid& grid);

struct SolveOptions {
  double tol = 1e-9;
  std::size_t max_iter = 0;  ///< 0 selects 10 * n^d
  const double* x0 = nullptr;
};

struct SolveStats {
  std::size_t iterations = 0;
  double relative_residual = 0.0;
  std::vector<double> history;
};

/// Jacobi-preconditioned CG. At lambda = 0 the right side must have zero mean and the solution is
/// returned with zero mean.
std::vector<double> solve(const DivFormOperator& op, std::span<const double> rhs, const SolveOptions& opt,
                          SolveStats* stats = nullptr);
GridFunction solve(const DivFormOperator& op, const GridFunction& rhs, double tol = 1e-9);

/// Forward difference (u(x + h e_k) - u(x)) / h, living on edges.
void forward_difference(const Grid& g, const double* u, int axis, double* out);
/// Backward difference (v(x) - v(x - h e_k)) / h.
void backward_difference(const Grid& g, const double* v, int axis, double* out);
/// Centered periodic gradient of a scalar function.
GridFunction grad(const GridFunction& u);

/// Periodic tensor-product cubic (4 point Lagrange) interpolation of component c at x.
double interpolate(const GridFunction& u, int c, const double* x);
/// All components at once.
void interpolate_all(const GridFunction& u, const double* x, double* out);

/// Little-endian f64 row-major payload at stem.bin, metadata at stem.json.
void write_grid_function(const GridFunction& u, const std::string& stem, const std::string& name = "");
GridFunction read_grid_function(const std::string& stem);

}  // namespace homolab
