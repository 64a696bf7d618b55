#include "homolab/lattice.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace homolab {

namespace {

bool near_integer(double r) { return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, std::abs(r)); }

/// Visit (i, i + e_k, i - e_k) triples along one axis without integer division.
template <class F>
void along_axis(const Grid& g, int axis, F&& f) {
  const std::size_t inner = g.stride(axis);
  const std::size_t n = static_cast<std::size_t>(g.n);
  const std::size_t block = n * inner;
  const std::size_t outer = g.size() / block;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t o = 0; o < static_cast<std::ptrdiff_t>(outer); ++o) {
    const std::size_t base = static_cast<std::size_t>(o) * block;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t jp = j + 1 == n ? 0 : j + 1;
      const std::size_t jm = j == 0 ? n - 1 : j - 1;
      const std::size_t i0 = base + j * inner;
      const std::size_t ip0 = base + jp * inner;
      const std::size_t im0 = base + jm * inner;
      for (std::size_t t = 0; t < inner; ++t) f(i0 + t, ip0 + t, im0 + t);
    }
  }
}

std::shared_ptr<EdgeCoefficients> cell_edges(const CoefficientField& field, const Grid& g, EdgeRule rule) {
  const int d = g.d;
  const std::size_t N = g.size();
  auto e = std::make_shared<EdgeCoefficients>();
  e->grid = g;
  e->a.assign(static_cast<std::size_t>(d), std::vector<double>(N));
  if (rule == EdgeRule::harmonic) {
    // Simpson rule for the edge mean of 1/a: endpoint nodes and the edge midpoint.
    GridFunction nodes = node_coefficients(field, g);
    const double h = g.h();
    for (int k = 0; k < d; ++k) {
      const double* a = nodes.comp(k);
      double* out = e->a[static_cast<std::size_t>(k)].data();
#pragma omp parallel for schedule(static)
      for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(N); ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        double x[kMaxDim], am[kMaxDim];
        g.coordinates(i, x);
        x[k] += 0.5 * h;
        field.diagonal(x, am);
        out[i] = 4.0 / am[k];
      }
      along_axis(g, k, [&](std::size_t i, std::size_t ip, std::size_t) {
        out[i] = 6.0 / (1.0 / a[i] + out[i] + 1.0 / a[ip]);
      });
    }
  } else {
    const double h = g.h();
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(N); ++ii) {
      const std::size_t i = static_cast<std::size_t>(ii);
      double x[kMaxDim], a[kMaxDim];
      g.coordinates(i, x);
      for (int k = 0; k < d; ++k) {
        x[k] += 0.5 * h;
        field.diagonal(x, a);
        e->a[static_cast<std::size_t>(k)][i] = a[k];
        x[k] -= 0.5 * h;
      }
    }
  }
  return e;
}

}  // namespace

std::size_t Grid::size() const {
  std::size_t s = 1;
  for (int j = 0; j < d; ++j) s *= static_cast<std::size_t>(n);
  return s;
}

std::size_t Grid::stride(int axis) const {
  std::size_t s = 1;
  for (int j = axis + 1; j < d; ++j) s *= static_cast<std::size_t>(n);
  return s;
}

void Grid::validate(std::size_t max_points) const {
  if (d < 1 || d > kMaxDim) throw InvalidParameter("grid dimension out of range");
  if (n < 4 || n % 2 != 0) throw InvalidParameter("grid needs an even number of points per axis, at least 4");
  if (!(L > 0.0)) throw InvalidParameter("grid period must be positive");
  double total = 1.0;
  for (int j = 0; j < d; ++j) total *= n;
  if (total > static_cast<double>(max_points)) throw InvalidParameter("grid exceeds the memory budget");
}

void Grid::coordinates(std::size_t i, double* x) const {
  const double hh = h();
  for (int j = d - 1; j >= 0; --j) {
    x[j] = static_cast<double>(i % static_cast<std::size_t>(n)) * hh;
    i /= static_cast<std::size_t>(n);
  }
}

double GridFunction::max_abs() const {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return m;
}

DivFormOperator::DivFormOperator(std::shared_ptr<const EdgeCoefficients> edges, double lambda)
    : edges_(std::move(edges)), lambda_(lambda) {
  if (!(lambda_ >= 0.0) || !std::isfinite(lambda_)) throw InvalidParameter("lambda must be finite and >= 0");
}

void DivFormOperator::apply(const double* u, double* out) const {
  const Grid& g = grid();
  const std::size_t N = g.size();
  const double c = 0.5 / (g.h() * g.h());
  const double lam = lambda_;
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(N); ++i) out[i] = lam * u[i];
  for (int k = 0; k < g.d; ++k) {
    const double* a = edges_->a[static_cast<std::size_t>(k)].data();
    along_axis(g, k, [&](std::size_t i, std::size_t ip, std::size_t im) {
      out[i] += c * (a[i] * (u[i] - u[ip]) + a[im] * (u[i] - u[im]));
    });
  }
}

GridFunction DivFormOperator::apply(const GridFunction& u) const {
  if (!(u.grid == grid())) throw InvalidParameter("apply: grid mismatch");
  GridFunction out(u.grid, u.components);
  for (int c = 0; c < u.components; ++c) apply(u.comp(c), out.comp(c));
  return out;
}

std::vector<double> DivFormOperator::diagonal() const {
  const Grid& g = grid();
  const double c = 0.5 / (g.h() * g.h());
  std::vector<double> diag(g.size(), lambda_);
  for (int k = 0; k < g.d; ++k) {
    const double* a = edges_->a[static_cast<std::size_t>(k)].data();
    along_axis(g, k, [&](std::size_t i, std::size_t, std::size_t im) { diag[i] += c * (a[i] + a[im]); });
  }
  return diag;
}

GridFunction node_coefficients(const CoefficientField& field, const Grid& g) {
  GridFunction out(g, g.d);
  const std::size_t N = g.size();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(N); ++ii) {
    const std::size_t i = static_cast<std::size_t>(ii);
    double x[kMaxDim], a[kMaxDim];
    g.coordinates(i, x);
    field.diagonal(x, a);
    for (int k = 0; k < g.d; ++k) out.comp(k)[i] = a[k];
  }
  return out;
}

DivFormOperator assemble(const CoefficientField& field, const Grid& grid, double lambda, EdgeRule rule) {
  grid.validate();
  if (grid.d != field.dim()) throw InvalidParameter("assemble: grid and field dimensions differ");
  if (std::abs(grid.L - field.period()) > 1e-12 * field.period())
    throw InvalidParameter("assemble: grid period must equal the field period");
  return DivFormOperator(cell_edges(field, grid, rule), lambda);
}

DivFormOperator assemble_scaled(const CoefficientField& field, const Grid& macro, double eps, double lambda,
                                EdgeRule rule) {
  macro.validate();
  if (macro.d != field.dim()) throw InvalidParameter("assemble_scaled: grid and field dimensions differ");
  if (!(eps > 0.0)) throw InvalidParameter("assemble_scaled: eps must be positive");
  const double copies = macro.L / (eps * field.period());
  const double micro_h = macro.h() / eps;
  const double cell_pts = field.period() / micro_h;
  if (!near_integer(copies) || std::round(copies) < 1.0)
    throw InvalidParameter("assemble_scaled: macro period must be a multiple of eps * L");
  if (!near_integer(cell_pts))
    throw InvalidParameter("assemble_scaled: eps / h must tile the field period with whole grid cells");
  Grid cell{macro.d, static_cast<int>(std::lround(cell_pts)), field.period()};
  if (cell.n == macro.n) {
    auto e = cell_edges(field, cell, rule);
    e->grid = macro;
    return DivFormOperator(e, lambda);
  }
  if (cell.n < 2) throw InvalidParameter("assemble_scaled: fewer than two grid points per period");
  auto ce = cell_edges(field, Grid{cell.d, cell.n, cell.L}, rule);
  auto e = std::make_shared<EdgeCoefficients>();
  e->grid = macro;
  const std::size_t N = macro.size();
  e->a.assign(static_cast<std::size_t>(macro.d), std::vector<double>(N));
  const std::size_t n = static_cast<std::size_t>(macro.n), nc = static_cast<std::size_t>(cell.n);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(N); ++ii) {
    std::size_t rem = static_cast<std::size_t>(ii);
    std::size_t ci = 0, mul = 1;
    for (int j = macro.d - 1; j >= 0; --j) {
      ci += (rem % n) % nc * mul;
      rem /= n;
      mul *= nc;
    }
    for (int k = 0; k < macro.d; ++k)
      e->a[static_cast<std::size_t>(k)][static_cast<std::size_t>(ii)] = ce->a[static_cast<std::size_t>(k)][ci];
  }
  return DivFormOperator(e, lambda);
}

std::vector<double> solve(const DivFormOperator& op, std::span<const double> rhs, const SolveOptions& opt,
                          SolveStats* stats) {
  const std::size_t N = op.grid().size();
  if (rhs.size() != N) throw InvalidParameter("solve: rhs size does not match the grid");
  if (!(opt.tol > 0.0)) throw InvalidParameter("solve: tol must be positive");
  const bool singular = op.lambda() == 0.0;
  std::vector<double> b(rhs.begin(), rhs.end());
  const double bnorm = std::sqrt(pairwise_dot(b, b));
  if (singular) {
    const double m = pairwise_mean(b);
    const double rms = bnorm / std::sqrt(static_cast<double>(N));
    if (std::abs(m) > 1e-10 * std::max(rms, 1e-300) && std::abs(m) > 0.0)
      throw InvalidParameter("solve: lambda = 0 requires a zero-mean right-hand side");
    for (double& v : b) v -= m;
  }
  std::vector<double> x(N, 0.0);
  if (opt.x0) std::copy(opt.x0, opt.x0 + N, x.begin());
  auto project = [&](std::vector<double>& v) {
    if (!singular) return;
    const double m = pairwise_mean(v);
    for (double& e : v) e -= m;
  };
  project(x);
  SolveStats local;
  SolveStats& st = stats ? *stats : local;
  st = SolveStats{};
  const double bn = std::sqrt(pairwise_dot(b, b));
  if (bn == 0.0) {
    std::fill(x.begin(), x.end(), 0.0);
    return x;
  }
  const std::size_t max_iter = opt.max_iter ? opt.max_iter : 10 * N;
  std::vector<double> dinv = op.diagonal();
  for (double& v : dinv) v = 1.0 / v;
  std::vector<double> r(N), z(N), p(N), Ap(N);

  for (int restart = 0; restart < 4; ++restart) {
    op.apply(x.data(), Ap.data());
    for (std::size_t i = 0; i < N; ++i) r[i] = b[i] - Ap[i];
    project(r);
    double res = std::sqrt(pairwise_dot(r, r)) / bn;
    if (res <= opt.tol) {
      st.relative_residual = res;
      return x;
    }
    for (std::size_t i = 0; i < N; ++i) z[i] = dinv[i] * r[i];
    project(z);
    p = z;
    double rz = pairwise_dot(r, z);
    while (st.iterations < max_iter) {
      op.apply(p.data(), Ap.data());
      const double pAp = pairwise_dot(p, Ap);
      if (!(pAp > 0.0)) break;
      const double alpha = rz / pAp;
      for (std::size_t i = 0; i < N; ++i) {
        x[i] += alpha * p[i];
        r[i] -= alpha * Ap[i];
      }
      project(r);
      ++st.iterations;
      res = std::sqrt(pairwise_dot(r, r)) / bn;
      st.history.push_back(res);
      if (!std::isfinite(res)) break;
      if (res <= opt.tol) break;
      for (std::size_t i = 0; i < N; ++i) z[i] = dinv[i] * r[i];
      project(z);
      const double rz_new = pairwise_dot(r, z);
      const double beta = rz_new / rz;
      rz = rz_new;
      for (std::size_t i = 0; i < N; ++i) p[i] = z[i] + beta * p[i];
    }
    project(x);
    if (st.iterations >= max_iter || !std::isfinite(res)) break;
  }
  op.apply(x.data(), Ap.data());
  for (std::size_t i = 0; i < N; ++i) r[i] = b[i] - Ap[i];
  project(r);
  st.relative_residual = std::sqrt(pairwise_dot(r, r)) / bn;
  if (st.relative_residual <= opt.tol) return x;
  throw SolverFailure("CG did not converge: relative residual " + std::to_string(st.relative_residual) +
                          " after " + std::to_string(st.iterations) + " iterations",
                      st.history);
}

GridFunction solve(const DivFormOperator& op, const GridFunction& rhs, double tol) {
  if (!(rhs.grid == op.grid())) throw InvalidParameter("solve: grid mismatch");
  GridFunction out(rhs.grid, rhs.components);
  SolveOptions opt;
  opt.tol = tol;
  for (int c = 0; c < rhs.components; ++c) {
    auto x = solve(op, rhs.span(c), opt);
    std::copy(x.begin(), x.end(), out.comp(c));
  }
  return out;
}

void forward_difference(const Grid& g, const double* u, int axis, double* out) {
  const double ih = 1.0 / g.h();
  along_axis(g, axis, [&](std::size_t i, std::size_t ip, std::size_t) { out[i] = (u[ip] - u[i]) * ih; });
}

void backward_difference(const Grid& g, const double* v, int axis, double* out) {
  const double ih = 1.0 / g.h();
  along_axis(g, axis, [&](std::size_t i, std::size_t, std::size_t im) { out[i] = (v[i] - v[im]) * ih; });
}

GridFunction grad(const GridFunction& u) {
  if (u.components != 1) throw InvalidParameter("grad: scalar input required");
  const Grid& g = u.grid;
  GridFunction out(g, g.d);
  const double ih = 0.5 / g.h();
  const double* v = u.comp(0);
  for (int k = 0; k < g.d; ++k) {
    double* o = out.comp(k);
    along_axis(g, k, [&](std::size_t i, std::size_t ip, std::size_t im) { o[i] = (v[ip] - v[im]) * ih; });
  }
  return out;
}

namespace {

struct Stencil {
  std::size_t idx[kMaxDim][4];
  double w[kMaxDim][4];
};

void stencil(const Grid& g, const double* x, Stencil& s) {
  const double h = g.h();
  const long n = g.n;
  for (int j = 0; j < g.d; ++j) {
    const double t = x[j] / h;
    const double fl = std::floor(t);
    const double f = t - fl;
    const long i0 = static_cast<long>(fl);
    for (int q = 0; q < 4; ++q) {
      const long ii = ((i0 - 1 + q) % n + n) % n;
      s.idx[j][q] = static_cast<std::size_t>(ii) * g.stride(j);
    }
    s.w[j][0] = -f * (f - 1.0) * (f - 2.0) / 6.0;
    s.w[j][1] = (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0;
    s.w[j][2] = -(f + 1.0) * f * (f - 2.0) / 2.0;
    s.w[j][3] = (f + 1.0) * f * (f - 1.0) / 6.0;
  }
}

}  // namespace

void interpolate_all(const GridFunction& u, const double* x, double* out) {
  const Grid& g = u.grid;
  Stencil s;
  stencil(g, x, s);
  const int d = g.d;
  for (int c = 0; c < u.components; ++c) out[c] = 0.0;
  int q[kMaxDim] = {0, 0, 0, 0};
  const std::size_t N = g.size();
  while (true) {
    std::size_t idx = 0;
    double w = 1.0;
    for (int j = 0; j < d; ++j) {
      idx += s.idx[j][q[j]];
      w *= s.w[j][q[j]];
    }
    for (int c = 0; c < u.components; ++c) out[c] += w * u.values[static_cast<std::size_t>(c) * N + idx];
    int j = 0;
    while (j < d && ++q[j] == 4) q[j++] = 0;
    if (j == d) break;
  }
}

double interpolate(const GridFunction& u, int c, const double* x) {
  const Grid& g = u.grid;
  Stencil s;
  stencil(g, x, s);
  const int d = g.d;
  const double* v = u.comp(c);
  double acc = 0.0;
  int q[kMaxDim] = {0, 0, 0, 0};
  while (true) {
    std::size_t idx = 0;
    double w = 1.0;
    for (int j = 0; j < d; ++j) {
      idx += s.idx[j][q[j]];
      w *= s.w[j][q[j]];
    }
    acc += w * v[idx];
    int j = 0;
    while (j < d && ++q[j] == 4) q[j++] = 0;
    if (j == d) break;
  }
  return acc;
}

void write_grid_function(const GridFunction& u, const std::string& stem, const std::string& name) {
  {
    std::ofstream os(stem + ".bin", std::ios::binary);
    if (!os) throw Error("cannot write " + stem + ".bin");
    if constexpr (std::endian::native == std::endian::little) {
      os.write(reinterpret_cast<const char*>(u.values.data()),
               static_cast<std::streamsize>(u.values.size() * sizeof(double)));
    } else {
      for (double v : u.values) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, sizeof bits);
        bits = __builtin_bswap64(bits);
        os.write(reinterpret_cast<const char*>(&bits), sizeof bits);
      }
    }
  }
  nlohmann::json j;
  j["d"] = u.grid.d;
  j["n"] = u.grid.n;
  j["L"] = u.grid.L;
  j["kind"] = u.components == 1 ? "scalar" : "vector";
  j["components"] = u.components;
  j["layout"] = "component-major, row-major within a component, little-endian float64";
  if (!name.empty()) j["name"] = name;
  std::ofstream js(stem + ".json");
  js << j.dump(2) << "\n";
}

GridFunction read_grid_function(const std::string& stem) {
  std::ifstream js(stem + ".json");
  if (!js) throw Error("cannot read " + stem + ".json");
  nlohmann::json j;
  js >> j;
  Grid g{j.at("d").get<int>(), j.at("n").get<int>(), j.at("L").get<double>()};
  GridFunction u(g, j.at("components").get<int>());
  std::ifstream is(stem + ".bin", std::ios::binary);
  if (!is) throw Error("cannot read " + stem + ".bin");
  is.read(reinterpret_cast<char*>(u.values.data()), static_cast<std::streamsize>(u.values.size() * sizeof(double)));
  if (!is) throw Error("truncated grid function payload " + stem + ".bin");
  if constexpr (std::endian::native != std::endian::little) {
    for (double& v : u.values) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      bits = __builtin_bswap64(bits);
      std::memcpy(&v, &bits, sizeof bits);
    }
  }
  return u;
}

}  // namespace homolab
