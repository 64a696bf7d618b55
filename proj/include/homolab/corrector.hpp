#pragma once

#include "homolab/lattice.hpp"

#include <string>
#include <vector>

namespace homolab {

/// Right side of the corrector equation. `consistent` uses (1/2) D^-_k of the edge coefficients,
/// which makes the discrete flux and energy definitions of A_bar coincide; `analytic` samples b_k.
enum class DriftMode { consistent, analytic };

struct CorrectorOptions {
  double lambda = 0.0;
  double tol = 1e-10;
  EdgeRule edge_rule = EdgeRule::harmonic;
  DriftMode drift = DriftMode::consistent;
  bool flux = false;  ///< also build psi, Psi and the third-order constants
};

struct ThirdOrder {
  int d = 0;
  std::vector<double> c;            ///< collocated quadrature, centered gradients and nodal a
  std::vector<double> c_staggered;  ///< quadrature of the operator itself; equals -ibp
  std::vector<double> ibp;          ///< <Psi_ij, lambda phi_k>
  double at(const std::vector<double>& t, int i, int j, int k) const {
    return t[static_cast<std::size_t>((i * d + j) * d + k)];
  }
  double max_abs_c() const;
  double max_abs_staggered() const;
  double max_abs_ibp() const;
};

struct CorrectorSet {
  Grid grid;
  double lambda = 0.0;
  std::vector<GridFunction> phi;       ///< phi_{e_k}
  std::vector<GridFunction> grad_phi;  ///< centered gradients
  Mat A_bar;
  std::vector<GridFunction> psi;  ///< index i*d + j
  std::vector<GridFunction> Psi;
  ThirdOrder third;
  std::vector<double> residuals;
  std::vector<std::size_t> iterations;

  /// phi_xi by linearity.
  GridFunction phi_direction(const Vec& xi) const;
  /// psi_xi = sum xi_i xi_j psi_ij.
  GridFunction psi_direction(const Vec& xi) const;
};

GridFunction corrector_rhs(const DivFormOperator& op, const CoefficientField& field, const Vec& xi, DriftMode mode);

GridFunction solve_corrector(const DivFormOperator& op, const CoefficientField& field, const Vec& xi,
                             DriftMode mode = DriftMode::consistent, double tol = 1e-10, SolveStats* stats = nullptr);
GridFunction solve_corrector(const CoefficientField& field, const Grid& grid, double lambda, int k,
                             double tol = 1e-10);

/// A_bar_ij as the edge average of (e_i + D^+ phi_i)^T a (e_j + D^+ phi_j).
Mat homogenized_matrix(const DivFormOperator& op, const std::vector<GridFunction>& phi);

/// Edge average of a_kk (delta_km + D^+_k phi_m): the flux form of A_bar, column m.
Mat flux_matrix(const DivFormOperator& op, const std::vector<GridFunction>& phi);

std::vector<GridFunction> energy_density(const DivFormOperator& op, const std::vector<GridFunction>& phi,
                                         const Mat& A_bar);

GridFunction solve_flux_corrector(const DivFormOperator& op, const GridFunction& psi_ij, double tol = 1e-10,
                                  SolveStats* stats = nullptr);

ThirdOrder third_order_constants(const DivFormOperator& op, const GridFunction& node_a,
                                 const std::vector<GridFunction>& phi, const std::vector<GridFunction>& Psi);

CorrectorSet compute_correctors(const CoefficientField& field, const Grid& grid, const CorrectorOptions& opt);

/// Grid functions in the binary format plus summary.json.
void write_corrector_set(const CorrectorSet& set, const std::string& dir);

}  // namespace homolab
