#include "homolab/corrector.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace homolab {

namespace {

double max_abs_of(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

/// g[i][m] = D^+_m phi_i on edges.
std::vector<std::vector<double>> edge_gradients(const Grid& g, const std::vector<GridFunction>& phi) {
  const int d = g.d;
  std::vector<std::vector<double>> out(static_cast<std::size_t>(d * d), std::vector<double>(g.size()));
  for (int i = 0; i < d; ++i)
    for (int m = 0; m < d; ++m) forward_difference(g, phi[static_cast<std::size_t>(i)].comp(0), m, out[static_cast<std::size_t>(i * d + m)].data());
  return out;
}

}  // namespace

double ThirdOrder::max_abs_c() const { return max_abs_of(c); }
double ThirdOrder::max_abs_staggered() const { return max_abs_of(c_staggered); }
double ThirdOrder::max_abs_ibp() const { return max_abs_of(ibp); }

GridFunction CorrectorSet::phi_direction(const Vec& xi) const {
  if (phi.empty()) throw InvalidParameter("phi_direction: correctors were not computed");
  GridFunction out(phi[0].grid, 1);
  for (std::size_t k = 0; k < phi.size(); ++k) {
    const double* p = phi[k].comp(0);
    for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += xi[static_cast<int>(k)] * p[i];
  }
  return out;
}

GridFunction CorrectorSet::psi_direction(const Vec& xi) const {
  if (psi.empty()) throw InvalidParameter("psi_direction: energy densities were not computed");
  const int d = psi[0].grid.d;
  GridFunction out(psi[0].grid, 1);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const double w = xi[i] * xi[j];
      const double* p = psi[static_cast<std::size_t>(i * d + j)].comp(0);
      for (std::size_t x = 0; x < out.size(); ++x) out.values[x] += w * p[x];
    }
  return out;
}

GridFunction corrector_rhs(const DivFormOperator& op, const CoefficientField& field, const Vec& xi, DriftMode mode) {
  const Grid& g = op.grid();
  if (xi.size() != g.d) throw InvalidParameter("corrector_rhs: direction has wrong dimension");
  GridFunction b(g, 1);
  if (mode == DriftMode::consistent) {
    std::vector<double> tmp(g.size());
    for (int k = 0; k < g.d; ++k) {
      if (xi[k] == 0.0) continue;
      backward_difference(g, op.edges().a[static_cast<std::size_t>(k)].data(), k, tmp.data());
      for (std::size_t i = 0; i < g.size(); ++i) b.values[i] += 0.5 * xi[k] * tmp[i];
    }
  } else {
    if (!field.has_smooth_drift()) throw InvalidParameter("analytic drift requested for a field without one");
    for (std::size_t i = 0; i < g.size(); ++i) {
      double x[kMaxDim], a[kMaxDim], bb[kMaxDim];
      g.coordinates(i, x);
      field.diagonal_and_drift(x, a, bb);
      double s = 0.0;
      for (int k = 0; k < g.d; ++k) s += xi[k] * bb[k];
      b.values[i] = s;
    }
  }
  return b;
}

GridFunction solve_corrector(const DivFormOperator& op, const CoefficientField& field, const Vec& xi, DriftMode mode,
                             double tol, SolveStats* stats) {
  GridFunction b = corrector_rhs(op, field, xi, mode);
  if (op.lambda() == 0.0) {
    const double m = b.mean();
    const double scale = std::max(b.max_abs(), 1e-300);
    if (std::abs(m) > 1e-8 * scale && std::abs(m) > 1e-14)
      throw DiscretizationInconsistency("corrector right-hand side has mean " + std::to_string(m) +
                                        " at lambda = 0 on the torus");
    for (double& v : b.values) v -= m;
  }
  SolveOptions opt;
  opt.tol = tol;
  auto x = solve(op, b.span(), opt, stats);
  GridFunction out(op.grid(), 1);
  out.values = std::move(x);
  return out;
}

GridFunction solve_corrector(const CoefficientField& field, const Grid& grid, double lambda, int k, double tol) {
  if (k < 0 || k >= grid.d) throw InvalidParameter("solve_corrector: direction index out of range");
  DivFormOperator op = assemble(field, grid, lambda);
  Vec e = Vec::Zero(grid.d);
  e[k] = 1.0;
  return solve_corrector(op, field, e, DriftMode::consistent, tol);
}

Mat homogenized_matrix(const DivFormOperator& op, const std::vector<GridFunction>& phi) {
  const Grid& g = op.grid();
  const int d = g.d;
  if (static_cast<int>(phi.size()) != d) throw InvalidParameter("homogenized_matrix: need d correctors");
  for (const auto& p : phi)
    if (!(p.grid == g)) throw InvalidParameter("homogenized_matrix: corrector grid mismatch");
  const auto G = edge_gradients(g, phi);
  Mat A = Mat::Zero(d, d);
  std::vector<double> tmp(g.size());
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      std::fill(tmp.begin(), tmp.end(), 0.0);
      for (int m = 0; m < d; ++m) {
        const double* a = op.edges().a[static_cast<std::size_t>(m)].data();
        const double* gi = G[static_cast<std::size_t>(i * d + m)].data();
        const double* gj = G[static_cast<std::size_t>(j * d + m)].data();
        const double di = i == m ? 1.0 : 0.0, dj = j == m ? 1.0 : 0.0;
        for (std::size_t x = 0; x < g.size(); ++x) tmp[x] += a[x] * (di + gi[x]) * (dj + gj[x]);
      }
      A(i, j) = A(j, i) = pairwise_mean(tmp);
    }
  return A;
}

Mat flux_matrix(const DivFormOperator& op, const std::vector<GridFunction>& phi) {
  const Grid& g = op.grid();
  const int d = g.d;
  Mat F = Mat::Zero(d, d);
  std::vector<double> grad(g.size()), tmp(g.size());
  for (int m = 0; m < d; ++m) {
    for (int k = 0; k < d; ++k) {
      forward_difference(g, phi[static_cast<std::size_t>(m)].comp(0), k, grad.data());
      const double* a = op.edges().a[static_cast<std::size_t>(k)].data();
      const double dk = k == m ? 1.0 : 0.0;
      for (std::size_t x = 0; x < g.size(); ++x) tmp[x] = a[x] * (dk + grad[x]);
      F(k, m) = pairwise_mean(tmp);
    }
  }
  return F;
}

std::vector<GridFunction> energy_density(const DivFormOperator& op, const std::vector<GridFunction>& phi,
                                         const Mat& A_bar) {
  const Grid& g = op.grid();
  const int d = g.d;
  const auto G = edge_gradients(g, phi);
  std::vector<GridFunction> psi(static_cast<std::size_t>(d * d));
  std::vector<double> e(g.size());
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j) {
      GridFunction out(g, 1);
      for (int m = 0; m < d; ++m) {
        const double* a = op.edges().a[static_cast<std::size_t>(m)].data();
        const double* gi = G[static_cast<std::size_t>(i * d + m)].data();
        const double* gj = G[static_cast<std::size_t>(j * d + m)].data();
        const double di = i == m ? 1.0 : 0.0, dj = j == m ? 1.0 : 0.0;
        for (std::size_t x = 0; x < g.size(); ++x) e[x] = a[x] * (di + gi[x]) * (dj + gj[x]);
        // average of the two edges of axis m touching the node
        const std::size_t inner = g.stride(m);
        const std::size_t n = static_cast<std::size_t>(g.n);
        const std::size_t block = n * inner;
        for (std::size_t o = 0; o < g.size() / block; ++o)
          for (std::size_t jj = 0; jj < n; ++jj) {
            const std::size_t jm = jj == 0 ? n - 1 : jj - 1;
            for (std::size_t t = 0; t < inner; ++t) {
              const std::size_t x = o * block + jj * inner + t;
              const std::size_t xm = o * block + jm * inner + t;
              out.values[x] += 0.5 * (e[x] + e[xm]);
            }
          }
      }
      for (double& v : out.values) v -= A_bar(i, j);
      psi[static_cast<std::size_t>(i * d + j)] = out;
      if (i != j) psi[static_cast<std::size_t>(j * d + i)] = out;
    }
  return psi;
}

GridFunction solve_flux_corrector(const DivFormOperator& op, const GridFunction& psi_ij, double tol, SolveStats* stats) {
  if (!(psi_ij.grid == op.grid())) throw InvalidParameter("solve_flux_corrector: grid mismatch");
  std::vector<double> rhs = psi_ij.values;
  if (op.lambda() == 0.0) {
    const double m = pairwise_mean(rhs);
    for (double& v : rhs) v -= m;
  }
  SolveOptions opt;
  opt.tol = tol;
  GridFunction out(op.grid(), 1);
  out.values = solve(op, rhs, opt, stats);
  return out;
}

ThirdOrder third_order_constants(const DivFormOperator& op, const GridFunction& node_a,
                                 const std::vector<GridFunction>& phi, const std::vector<GridFunction>& Psi) {
  const Grid& g = op.grid();
  const int d = g.d;
  if (static_cast<int>(Psi.size()) != d * d) throw InvalidParameter("third_order_constants: need d*d flux correctors");
  const std::size_t N = g.size();
  const auto Gphi = edge_gradients(g, phi);
  std::vector<GridFunction> Cphi;
  for (int k = 0; k < d; ++k) Cphi.push_back(grad(phi[static_cast<std::size_t>(k)]));
  ThirdOrder t;
  t.d = d;
  const std::size_t n3 = static_cast<std::size_t>(d * d * d);
  t.c.assign(n3, 0.0);
  t.c_staggered.assign(n3, 0.0);
  t.ibp.assign(n3, 0.0);
  std::vector<double> dpsi(N), acc_c(N), acc_s(N), prod(N);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      const GridFunction& P = Psi[static_cast<std::size_t>(i * d + j)];
      const GridFunction CP = grad(P);
      std::vector<std::vector<double>> DP(static_cast<std::size_t>(d), std::vector<double>(N));
      for (int m = 0; m < d; ++m) forward_difference(g, P.comp(0), m, DP[static_cast<std::size_t>(m)].data());
      for (int k = 0; k < d; ++k) {
        std::fill(acc_c.begin(), acc_c.end(), 0.0);
        std::fill(acc_s.begin(), acc_s.end(), 0.0);
        for (int m = 0; m < d; ++m) {
          const double dk = k == m ? 1.0 : 0.0;
          const double* an = node_a.comp(m);
          const double* ae = op.edges().a[static_cast<std::size_t>(m)].data();
          const double* cp = CP.comp(m);
          const double* cphi = Cphi[static_cast<std::size_t>(k)].comp(m);
          const double* dp = DP[static_cast<std::size_t>(m)].data();
          const double* gphi = Gphi[static_cast<std::size_t>(k * d + m)].data();
          for (std::size_t x = 0; x < N; ++x) {
            acc_c[x] += cp[x] * an[x] * (dk + cphi[x]);
            acc_s[x] += dp[x] * ae[x] * (dk + gphi[x]);
          }
        }
        const std::size_t idx = static_cast<std::size_t>((i * d + j) * d + k);
        t.c[idx] = 0.5 * pairwise_mean(acc_c);
        t.c_staggered[idx] = 0.5 * pairwise_mean(acc_s);
        const double* pk = phi[static_cast<std::size_t>(k)].comp(0);
        for (std::size_t x = 0; x < N; ++x) prod[x] = P.values[x] * op.lambda() * pk[x];
        t.ibp[idx] = pairwise_mean(prod);
      }
    }
  return t;
}

CorrectorSet compute_correctors(const CoefficientField& field, const Grid& grid, const CorrectorOptions& opt) {
  DivFormOperator op = assemble(field, grid, opt.lambda, opt.edge_rule);
  const int d = grid.d;
  CorrectorSet s;
  s.grid = grid;
  s.lambda = opt.lambda;
  for (int k = 0; k < d; ++k) {
    Vec e = Vec::Zero(d);
    e[k] = 1.0;
    SolveStats st;
    s.phi.push_back(solve_corrector(op, field, e, opt.drift, opt.tol, &st));
    s.residuals.push_back(st.relative_residual);
    s.iterations.push_back(st.iterations);
    s.grad_phi.push_back(grad(s.phi.back()));
  }
  s.A_bar = homogenized_matrix(op, s.phi);
  if (opt.flux) {
    s.psi = energy_density(op, s.phi, s.A_bar);
    s.Psi.assign(static_cast<std::size_t>(d * d), GridFunction());
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j) {
        SolveStats st;
        s.Psi[static_cast<std::size_t>(i * d + j)] =
            solve_flux_corrector(op, s.psi[static_cast<std::size_t>(i * d + j)], opt.tol, &st);
        s.residuals.push_back(st.relative_residual);
        s.iterations.push_back(st.iterations);
        if (i != j) s.Psi[static_cast<std::size_t>(j * d + i)] = s.Psi[static_cast<std::size_t>(i * d + j)];
      }
    s.third = third_order_constants(op, node_coefficients(field, grid), s.phi, s.Psi);
  }
  return s;
}

void write_corrector_set(const CorrectorSet& set, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const int d = set.grid.d;
  for (int k = 0; k < d; ++k)
    write_grid_function(set.phi[static_cast<std::size_t>(k)], dir + "/phi_" + std::to_string(k), "phi_" + std::to_string(k));
  for (std::size_t i = 0; i < set.psi.size(); ++i) {
    const std::string tag = std::to_string(i / static_cast<std::size_t>(d)) + std::to_string(i % static_cast<std::size_t>(d));
    write_grid_function(set.psi[i], dir + "/psi_" + tag, "psi_" + tag);
    write_grid_function(set.Psi[i], dir + "/Psi_" + tag, "Psi_" + tag);
  }
  nlohmann::json j;
  j["lambda"] = set.lambda;
  j["grid"] = {{"d", set.grid.d}, {"n", set.grid.n}, {"L", set.grid.L}};
  nlohmann::json A = nlohmann::json::array();
  for (int r = 0; r < d; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < d; ++c) row.push_back(set.A_bar(r, c));
    A.push_back(row);
  }
  j["A_bar"] = A;
  j["residuals"] = set.residuals;
  j["iterations"] = set.iterations;
  if (!set.third.c.empty()) {
    j["c"] = set.third.c;
    j["c_staggered"] = set.third.c_staggered;
    j["ibp"] = set.third.ibp;
    j["c_layout"] = "flattened (i*d + j)*d + k";
  }
  std::ofstream os(dir + "/summary.json");
  os << j.dump(2) << "\n";
}

}  // namespace homolab
