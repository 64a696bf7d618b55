#include "homolab/forward.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace homolab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

bool near_integer(double r) { return std::abs(r - std::round(r)) <= 1e-9 * std::max(1.0, std::abs(r)); }

double wrap(double x, double P) {
  double y = x - P * std::floor(x / P);
  if (y >= P) y -= P;
  return y;
}

void require_spd(const Mat& A) {
  if (A.rows() != A.cols()) throw InvalidParameter("A_bar must be square");
  if ((A - A.transpose()).norm() > 1e-10 * std::max(1.0, A.norm())) throw InvalidParameter("A_bar must be symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(A);
  if (es.eigenvalues().minCoeff() <= 0.0) throw InvalidParameter("A_bar must be positive definite");
}

int image_range(double variance_max, double P) {
  if (P <= 0.0) return 0;
  return static_cast<int>(std::ceil(std::sqrt(2.0 * variance_max * 42.0) / P)) + 1;
}

/// Sum over periodic images of amp * sqrt(det S0 / det S) exp(-y^T S^{-1} y / 2), with gradient.
HomValue gaussian_images(const InitialDatum& f, const Mat& S, const Vec& x) {
  const int d = f.d;
  Eigen::LLT<Mat> llt(S);
  const Mat Sinv = llt.solve(Mat::Identity(d, d));
  const double det = llt.matrixL().determinant() * llt.matrixL().determinant();
  const double pref = f.amplitude * std::sqrt(std::pow(f.variance, d) / det);
  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  const int M = image_range(es.eigenvalues().maxCoeff(), f.period);
  HomValue out{0.0, Vec::Zero(d)};
  std::vector<int> m(static_cast<std::size_t>(d), -M);
  while (true) {
    Vec y(d);
    for (int j = 0; j < d; ++j) y[j] = x[j] - f.center[j] - m[static_cast<std::size_t>(j)] * f.period;
    const Vec Sy = Sinv * y;
    const double e = pref * std::exp(-0.5 * y.dot(Sy));
    out.value += e;
    out.grad -= e * Sy;
    int j = 0;
    while (j < d && ++m[static_cast<std::size_t>(j)] > M) m[static_cast<std::size_t>(j++)] = -M;
    if (j == d || M == 0) break;
  }
  return out;
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::string t = s;
  std::replace(t.begin(), t.end(), ',', ' ');
  std::istringstream is(t);
  std::string tok;
  while (is >> tok) {
    std::size_t pos = 0;
    double v = std::stod(tok, &pos);
    if (pos != tok.size()) throw std::invalid_argument(tok);
    out.push_back(v);
  }
  return out;
}

struct Stepper {
  DivFormOperator A0;
  double tol;
  std::size_t iterations = 0;

  /// (I + tau A0) x = u
  void implicit_euler(std::vector<double>& u, double tau) {
    const DivFormOperator op = A0.with_lambda(1.0 / tau);
    std::vector<double> rhs(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) rhs[i] = u[i] / tau;
    SolveOptions so;
    so.tol = tol;
    so.x0 = u.data();
    SolveStats st;
    u = solve(op, rhs, so, &st);
    iterations += st.iterations;
  }

  /// (I + dt/2 A0) x = (I - dt/2 A0) u
  void crank_nicolson(std::vector<double>& u, double dt) {
    const double lam = 2.0 / dt;
    const DivFormOperator op = A0.with_lambda(lam);
    std::vector<double> Au(u.size()), rhs(u.size());
    A0.apply(u.data(), Au.data());
    for (std::size_t i = 0; i < u.size(); ++i) rhs[i] = lam * u[i] - Au[i];
    SolveOptions so;
    so.tol = tol;
    so.x0 = u.data();
    SolveStats st;
    u = solve(op, rhs, so, &st);
    iterations += st.iterations;
  }
};

/// Integrate to each of `times` with counts[j] equal steps on segment j; the first step of the
/// first segment is replaced by `substeps` implicit Euler steps.
std::vector<std::vector<double>> integrate(Stepper& st, std::vector<double> u, const std::vector<double>& times,
                                           const std::vector<std::size_t>& counts, int substeps) {
  std::vector<std::vector<double>> out;
  double t = 0.0;
  bool first = true;
  for (std::size_t s = 0; s < times.size(); ++s) {
    const double dt = (times[s] - t) / static_cast<double>(counts[s]);
    for (std::size_t k = 0; k < counts[s]; ++k) {
      if (first && substeps > 0) {
        for (int q = 0; q < substeps; ++q) st.implicit_euler(u, dt / substeps);
        first = false;
      } else {
        st.crank_nicolson(u, dt);
      }
    }
    t = times[s];
    out.push_back(u);
  }
  return out;
}

}  // namespace

double InitialDatum::value(const double* x) const {
  switch (kind) {
    case Kind::constant: return amplitude;
    case Kind::gaussian: {
      double s = 0.0;
      const int M = image_range(variance, period);
      std::vector<int> m(static_cast<std::size_t>(d), -M);
      while (true) {
        double r2 = 0.0;
        for (int j = 0; j < d; ++j) {
          const double y = x[j] - center[j] - m[static_cast<std::size_t>(j)] * period;
          r2 += y * y;
        }
        s += std::exp(-0.5 * r2 / variance);
        int j = 0;
        while (j < d && ++m[static_cast<std::size_t>(j)] > M) m[static_cast<std::size_t>(j++)] = -M;
        if (j == d || M == 0) break;
      }
      return amplitude * s;
    }
    case Kind::cosine: {
      double v = amplitude;
      for (int j = 0; j < d; ++j)
        v *= std::cos(kTwoPi * wavenumbers[static_cast<std::size_t>(j)] * x[j] / period + phases[static_cast<std::size_t>(j)]);
      return v;
    }
  }
  return 0.0;
}

void InitialDatum::gradient(const double* x, double* g) const {
  for (int j = 0; j < d; ++j) g[j] = 0.0;
  if (kind == Kind::constant) return;
  if (kind == Kind::gaussian) {
    Vec xv(d);
    for (int j = 0; j < d; ++j) xv[j] = x[j];
    const HomValue hv = gaussian_images(*this, variance * Mat::Identity(d, d), xv);
    for (int j = 0; j < d; ++j) g[j] = hv.grad[j];
    return;
  }
  for (int j = 0; j < d; ++j) {
    double v = amplitude;
    for (int i = 0; i < d; ++i) {
      const double k = kTwoPi * wavenumbers[static_cast<std::size_t>(i)] / period;
      const double arg = k * x[i] + phases[static_cast<std::size_t>(i)];
      v *= i == j ? -k * std::sin(arg) : std::cos(arg);
    }
    g[j] = v;
  }
}

std::vector<InitialDatum::Mode> InitialDatum::modes() const {
  std::vector<Mode> out;
  if (kind == Kind::constant) {
    out.push_back({amplitude, Vec::Zero(d), 0.0});
    return out;
  }
  if (kind != Kind::cosine) throw InvalidParameter("modes: gaussian data have no finite trigonometric expansion");
  const double w = amplitude / std::pow(2.0, d - 1);
  for (unsigned mask = 0; mask < (1u << (d - 1)); ++mask) {
    Vec k(d);
    double ph = 0.0;
    for (int j = 0; j < d; ++j) {
      const double s = (j == 0 || !(mask & (1u << (j - 1)))) ? 1.0 : -1.0;
      k[j] = s * kTwoPi * wavenumbers[static_cast<std::size_t>(j)] / period;
      ph += s * phases[static_cast<std::size_t>(j)];
    }
    out.push_back({w, k, ph});
  }
  return out;
}

double InitialDatum::max_wavenumber() const {
  if (kind == Kind::gaussian) return 3.0 / std::sqrt(variance);
  double m = 0.0;
  for (const auto& md : modes()) m = std::max(m, md.k.norm());
  return m;
}

void InitialDatum::validate() const {
  if (d < 1 || d > kMaxDim) throw InvalidParameter("datum dimension out of range");
  if (!std::isfinite(amplitude)) throw InvalidParameter("datum amplitude must be finite");
  if (kind == Kind::gaussian) {
    if (!(variance > 0.0)) throw InvalidParameter("gaussian variance must be positive");
    if (center.size() != d) throw InvalidParameter("gaussian center needs d coordinates");
    if (period < 0.0) throw InvalidParameter("period must be >= 0");
  }
  if (kind == Kind::cosine) {
    if (!(period > 0.0)) throw InvalidParameter("cosine datum needs a positive period");
    if (static_cast<int>(wavenumbers.size()) != d || static_cast<int>(phases.size()) != d)
      throw InvalidParameter("cosine datum needs d wavenumbers and d phases");
  }
}

std::vector<std::pair<std::string, std::string>> InitialDatum::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv;
  auto join = [](auto const& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + fmt17(static_cast<double>(v[i]));
    return s;
  };
  kv.emplace_back("kind", kind == Kind::constant ? "constant" : kind == Kind::gaussian ? "gaussian" : "cosine");
  kv.emplace_back("amplitude", fmt17(amplitude));
  kv.emplace_back("period", fmt17(period));
  if (kind == Kind::gaussian) {
    std::vector<double> c(center.data(), center.data() + center.size());
    kv.emplace_back("center", join(c));
    kv.emplace_back("variance", fmt17(variance));
  }
  if (kind == Kind::cosine) {
    kv.emplace_back("wavenumbers", join(wavenumbers));
    kv.emplace_back("phases", join(phases));
  }
  return kv;
}

InitialDatum InitialDatum::from_kv(const std::map<std::string, std::string>& kv, int d, std::vector<std::string>& problems) {
  InitialDatum f;
  f.d = d;
  auto bad = [&](const std::string& key, const std::string& why) { problems.push_back("datum." + key + ": " + why); };
  auto list = [&](const std::string& key) -> std::vector<double> {
    auto it = kv.find(key);
    if (it == kv.end()) return {};
    try {
      return parse_list(it->second);
    } catch (...) {
      bad(key, "expected a list of numbers");
      return {};
    }
  };
  auto num = [&](const std::string& key, double& out) {
    auto v = list(key);
    if (kv.count(key) && v.size() != 1) bad(key, "expected one number");
    else if (v.size() == 1) out = v[0];
  };
  const std::string kind = kv.count("kind") ? kv.at("kind") : "cosine";
  if (kind == "constant") f.kind = Kind::constant;
  else if (kind == "gaussian") f.kind = Kind::gaussian;
  else if (kind == "cosine") f.kind = Kind::cosine;
  else bad("kind", "allowed: constant, gaussian, cosine");
  num("amplitude", f.amplitude);
  num("period", f.period);
  num("variance", f.variance);
  auto c = list("center");
  f.center = Vec::Zero(d);
  if (!c.empty()) {
    if (static_cast<int>(c.size()) != d) bad("center", "needs d coordinates");
    else for (int j = 0; j < d; ++j) f.center[j] = c[static_cast<std::size_t>(j)];
  }
  auto w = list("wavenumbers");
  auto p = list("phases");
  if (f.kind == Kind::cosine) {
    if (static_cast<int>(w.size()) != d) bad("wavenumbers", "needs d integers");
    for (double v : w) {
      if (v != std::round(v)) bad("wavenumbers", "must be integers");
      f.wavenumbers.push_back(static_cast<int>(std::lround(v)));
    }
    if (p.empty()) p.assign(static_cast<std::size_t>(d), 0.0);
    if (static_cast<int>(p.size()) != d) bad("phases", "needs d numbers");
    f.phases = p;
    if (!(f.period > 0.0)) bad("period", "cosine datum needs a positive period");
  }
  if (f.kind == Kind::gaussian && !(f.variance > 0.0)) bad("variance", "must be positive");
  static const char* known[] = {"kind", "amplitude", "period", "variance", "center", "wavenumbers", "phases"};
  for (const auto& [k, v] : kv)
    if (std::find(std::begin(known), std::end(known), k) == std::end(known)) bad(k, "unknown key");
  return f;
}

double discrete_symbol(const Mat& A, const Vec& k, double h) {
  if (h <= 0.0) return 0.5 * k.dot(A * k);
  const int d = static_cast<int>(k.size());
  double s = 0.0;
  for (int m = 0; m < d; ++m) {
    const double sn = std::sin(0.5 * k[m] * h);
    s += A(m, m) * 4.0 * sn * sn / (h * h);
  }
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j)
      if (i != j) s += A(i, j) * std::sin(k[i] * h) * std::sin(k[j] * h) / (h * h);
  return 0.5 * s;
}

namespace {

template <class Factor>
HomValue trig_modes(const Mat& A, const InitialDatum& f, const Vec& x, double h, Factor factor) {
  HomValue out{0.0, Vec::Zero(f.d)};
  for (const auto& m : f.modes()) {
    const double w = m.amp * factor(discrete_symbol(A, m.k, h));
    const double arg = m.k.dot(x) + m.phase;
    out.value += w * std::cos(arg);
    out.grad -= w * std::sin(arg) * m.k;
  }
  return out;
}

}  // namespace

double StepPlan::factor(double sigma, std::size_t slice) const {
  auto run = [&](std::size_t mult) {
    double g = 1.0, t = 0.0;
    bool first = true;
    for (std::size_t s = 0; s <= slice; ++s) {
      const std::size_t n = counts[s] * mult;
      const double dt = (times[s] - t) / static_cast<double>(n);
      const double cn = (1.0 - 0.5 * sigma * dt) / (1.0 + 0.5 * sigma * dt);
      std::size_t k = 0;
      if (first && substeps > 0) {
        g *= std::pow(1.0 + sigma * dt / substeps, -substeps);
        k = 1;
      }
      first = false;
      g *= std::pow(cn, static_cast<double>(n - k));
      t = times[s];
    }
    return g;
  };
  if (slice >= times.size()) throw InvalidParameter("StepPlan: slice out of range");
  return richardson ? (4.0 * run(2) - run(1)) / 3.0 : run(1);
}

HomValue homogenized_solution(const Mat& A, const InitialDatum& f, double t, const Vec& x, double h) {
  require_spd(A);
  if (!(t >= 0.0)) throw InvalidParameter("homogenized_solution: t must be >= 0");
  if (f.is_trig()) return trig_modes(A, f, x, h, [t](double s) { return std::exp(-s * t); });
  if (h > 0.0) throw InvalidParameter("grid-consistent reference needs a trigonometric datum");
  return gaussian_images(f, f.variance * Mat::Identity(f.d, f.d) + t * A, x);
}

HomValue homogenized_scheme(const Mat& A, const InitialDatum& f, const StepPlan& plan, std::size_t slice, const Vec& x,
                            double h) {
  require_spd(A);
  if (!f.is_trig()) throw InvalidParameter("scheme-consistent reference needs a trigonometric datum");
  return trig_modes(A, f, x, h, [&](double s) { return plan.factor(s, slice); });
}

HomValue homogenized_elliptic(const Mat& A, const InitialDatum& f, const Vec& x, double h) {
  require_spd(A);
  const int d = f.d;
  if (f.is_trig()) return trig_modes(A, f, x, h, [](double s) { return 1.0 / (1.0 + s); });
  if (h > 0.0) throw InvalidParameter("grid-consistent reference needs a trigonometric datum");
  boost::math::quadrature::exp_sinh<double> q;
  HomValue out{0.0, Vec::Zero(d)};
  out.value = q.integrate([&](double t) { return std::exp(-t) * homogenized_solution(A, f, t, x).value; }, 1e-12);
  for (int j = 0; j < d; ++j)
    out.grad[j] = q.integrate([&](double t) { return std::exp(-t) * homogenized_solution(A, f, t, x).grad[j]; }, 1e-12);
  return out;
}

MacroSetup macro_setup(const CoefficientField& field, double eps, const InitialDatum& f, const GridPolicy& policy) {
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidParameter("eps must lie in (0, 1]");
  MacroSetup ms;
  ms.eps = eps;
  double m = policy.m;
  if (policy.h > 0.0) {
    m = eps / policy.h;
    if (!near_integer(m))
      throw InvalidParameter("eps = " + fmt17(eps) + " is not a multiple of grid.h = " + fmt17(policy.h));
  }
  if (!near_integer(m) || m < 1.0) throw InvalidParameter("grid.m must be a positive integer");
  if (m < policy.min_points - 1e-9)
    throw InvalidParameter("eps / h = " + fmt17(m) + " is below grid.min_points = " + fmt17(policy.min_points));
  ms.points_per_unit = static_cast<int>(std::lround(m));
  const double L = field.period();
  const double ncell = ms.points_per_unit * L;
  if (!near_integer(ncell)) throw InvalidParameter("grid.m * L must be an integer");
  ms.cell = Grid{field.dim(), static_cast<int>(std::lround(ncell)), L};
  ms.cell.validate();
  const double micro = eps * L;
  double P = micro;
  if (f.period > 0.0) {
    if (f.period >= micro) {
      if (!near_integer(f.period / micro))
        throw InvalidParameter("datum period must be a multiple of eps * L (or divide it)");
      P = f.period;
    } else if (!near_integer(micro / f.period)) {
      throw InvalidParameter("datum period must divide eps * L (or be a multiple of it)");
    }
  } else if (f.kind == InitialDatum::Kind::gaussian) {
    throw InvalidParameter("forward solves need a periodic datum (set datum.period)");
  }
  ms.period = P;
  const double nm = P * ms.points_per_unit / eps;
  if (!near_integer(nm)) throw InvalidParameter("macro grid does not tile the macro period");
  ms.macro = Grid{field.dim(), static_cast<int>(std::lround(nm)), P};
  ms.macro.validate();
  return ms;
}

GridFunction sample_datum(const InitialDatum& f, const Grid& g) {
  GridFunction u(g, 1);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(g.size()); ++ii) {
    double x[kMaxDim];
    g.coordinates(static_cast<std::size_t>(ii), x);
    u.values[static_cast<std::size_t>(ii)] = f.value(x);
  }
  return u;
}

ParabolicResult solve_parabolic(const CoefficientField& field, double eps, const InitialDatum& f,
                                const std::vector<double>& times, const Grid& grid, const ParabolicOptions& opt) {
  f.validate();
  if (times.empty()) throw InvalidParameter("solve_parabolic: no output times");
  for (std::size_t i = 0; i < times.size(); ++i)
    if (!(times[i] > (i ? times[i - 1] : 0.0))) throw InvalidParameter("solve_parabolic: output times must increase from > 0");
  if (!(eps > 0.0 && eps <= 1.0)) throw InvalidParameter("solve_parabolic: eps must lie in (0, 1]");
  const double h = grid.h();
  if (eps / h < opt.min_points - 1e-9)
    throw InvalidParameter("solve_parabolic: grid does not resolve eps (eps / h = " + fmt17(eps / h) + ")");
  if (f.period > 0.0 && !near_integer(grid.L / f.period))
    throw InvalidParameter("solve_parabolic: datum period must divide the grid period");
  const double dt = opt.dt > 0.0 ? opt.dt : 0.25 * h * h;
  const double K = f.max_wavenumber();
  if (dt * 0.5 * field.c_plus() * K * K > opt.accuracy_budget)
    throw InvalidParameter("solve_parabolic: dt = " + fmt17(dt) + " exceeds the accuracy budget for the datum");

  Stepper st{assemble_scaled(field, grid, eps, 0.0), opt.tol};
  const GridFunction u0 = sample_datum(f, grid);
  std::vector<std::size_t> counts;
  double t = 0.0;
  for (double T : times) {
    counts.push_back(static_cast<std::size_t>(std::max(1.0, std::ceil((T - t) / dt - 1e-9))));
    t = T;
  }
  auto coarse = integrate(st, u0.values, times, counts, opt.rannacher_substeps);
  ParabolicResult res;
  res.times = times;
  res.plan = StepPlan{times, counts, opt.rannacher_substeps, opt.richardson};
  for (auto c : counts) res.steps += c;
  if (opt.richardson) {
    std::vector<std::size_t> fine_counts = counts;
    for (auto& c : fine_counts) c *= 2;
    auto fine = integrate(st, u0.values, times, fine_counts, opt.rannacher_substeps);
    for (std::size_t s = 0; s < times.size(); ++s)
      for (std::size_t i = 0; i < fine[s].size(); ++i) coarse[s][i] = (4.0 * fine[s][i] - coarse[s][i]) / 3.0;
    res.steps += 2 * res.steps;
  }
  const double fmin = *std::min_element(u0.values.begin(), u0.values.end());
  const double fmax = *std::max_element(u0.values.begin(), u0.values.end());
  const double m0 = u0.mean();
  const double scale = std::max({std::abs(m0), std::abs(fmin), std::abs(fmax), 1e-300});
  for (auto& v : coarse) {
    GridFunction g(grid, 1);
    g.values = std::move(v);
    res.mass_defect = std::max(res.mass_defect, std::abs(g.mean() - m0) / scale);
    const double lo = *std::min_element(g.values.begin(), g.values.end());
    const double hi = *std::max_element(g.values.begin(), g.values.end());
    res.overshoot = std::max({res.overshoot, hi - fmax, fmin - lo});
    res.slices.push_back(std::move(g));
  }
  res.cg_iterations = st.iterations;
  return res;
}

EllipticResult elliptic_direct(const CoefficientField& field, double eps, const InitialDatum& f, const Grid& grid,
                               double tol) {
  f.validate();
  const DivFormOperator op = assemble_scaled(field, grid, eps, 1.0);
  const GridFunction rhs = sample_datum(f, grid);
  SolveOptions so;
  so.tol = tol;
  SolveStats st;
  EllipticResult r;
  r.U = GridFunction(grid, 1);
  r.U.values = solve(op, rhs.span(), so, &st);
  r.cg_iterations = st.iterations;
  return r;
}

EllipticResult elliptic_laplace(const CoefficientField& field, double eps, const InitialDatum& f, const Grid& grid,
                                const LaplaceOptions& opt) {
  f.validate();
  if (!(opt.dt0 > 0.0) || !(opt.growth >= 1.0) || !(opt.dt_max >= opt.dt0))
    throw InvalidParameter("elliptic_laplace: need dt0 > 0, growth >= 1, dt_max >= dt0");
  Stepper st{assemble_scaled(field, grid, eps, 0.0), opt.tol};
  const GridFunction u0 = sample_datum(f, grid);
  const std::size_t N = grid.size();
  const int substeps = 4;

  std::vector<double> mesh{0.0};
  std::vector<double> Uc(N, 0.0);
  std::vector<double> u = u0.values;
  double dtj = opt.dt0;
  double tail = 0.0;
  while (true) {
    const double t0 = mesh.back();
    const double t1 = t0 + dtj;
    std::vector<double> prev = u;
    if (mesh.size() == 1) {
      for (int q = 0; q < substeps; ++q) st.implicit_euler(u, dtj / substeps);
    } else {
      st.crank_nicolson(u, dtj);
    }
    const double w0 = 0.5 * dtj * std::exp(-t0), w1 = 0.5 * dtj * std::exp(-t1);
    for (std::size_t i = 0; i < N; ++i) Uc[i] += w0 * prev[i] + w1 * u[i];
    mesh.push_back(t1);
    double umax = 0.0;
    for (double v : u) umax = std::max(umax, std::abs(v));
    tail = std::exp(-t1) * umax;
    if (tail <= opt.tail_tol || t1 >= opt.t_cap) break;
    dtj = std::min(dtj * opt.growth, opt.dt_max);
  }
  EllipticResult r;
  r.t_max = mesh.back();
  r.tail_bound = tail;
  if (opt.richardson) {
    std::vector<double> Uf(N, 0.0);
    u = u0.values;
    bool first = true;
    for (std::size_t j = 0; j + 1 < mesh.size(); ++j) {
      const double tm = 0.5 * (mesh[j] + mesh[j + 1]);
      const double pts[3] = {mesh[j], tm, mesh[j + 1]};
      for (int half = 0; half < 2; ++half) {
        const double a = pts[half], b = pts[half + 1], hdt = b - a;
        std::vector<double> prev = u;
        if (first) {
          for (int q = 0; q < substeps; ++q) st.implicit_euler(u, hdt / substeps);
          first = false;
        } else {
          st.crank_nicolson(u, hdt);
        }
        const double w0 = 0.5 * hdt * std::exp(-a), w1 = 0.5 * hdt * std::exp(-b);
        for (std::size_t i = 0; i < N; ++i) Uf[i] += w0 * prev[i] + w1 * u[i];
      }
    }
    for (std::size_t i = 0; i < N; ++i) Uc[i] = (4.0 * Uf[i] - Uc[i]) / 3.0;
  }
  r.U = GridFunction(grid, 1);
  r.U.values = std::move(Uc);
  r.cg_iterations = st.iterations;
  return r;
}

double ExpansionRow::first_order() const {
  double s = 0.0;
  for (std::size_t k = 0; k < phi.size(); ++k) s += grad_u_hom[k] * phi[k];
  return s;
}

double ExpansionRow::reconstruction_defect() const { return u_eps - u_hom - eps * first_order() - eps * C; }

const ExpansionCell& ExpansionReport::cell(std::size_t e, std::size_t p) const { return cells.at(e * probes.size() + p); }

bool ExpansionReport::strictly_decreasing(std::size_t p) const {
  for (std::size_t e = 1; e < eps.size(); ++e)
    if (!(cell(e, p).abs_C.mean < cell(e - 1, p).abs_C.mean)) return false;
  return true;
}

double ExpansionReport::final_over_initial(std::size_t p) const {
  return cell(eps.size() - 1, p).abs_C.mean / cell(0, p).abs_C.mean;
}

void ExpansionReport::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  const std::size_t d = probes.empty() ? 0 : probes[0].x.size();
  os << "env,seed,eps,probe,t";
  for (std::size_t j = 0; j < d; ++j) os << ",x" << j;
  os << ",u_eps,u_hom";
  for (std::size_t j = 0; j < d; ++j) os << ",grad_u_hom" << j;
  for (std::size_t j = 0; j < d; ++j) os << ",phi" << j;
  os << ",C\n";
  for (const auto& r : rows) {
    os << r.env << "," << r.seed << "," << fmt17(r.eps) << "," << r.probe << "," << fmt17(r.t);
    for (double v : r.x) os << "," << fmt17(v);
    os << "," << fmt17(r.u_eps) << "," << fmt17(r.u_hom);
    for (double v : r.grad_u_hom) os << "," << fmt17(v);
    for (double v : r.phi) os << "," << fmt17(v);
    os << "," << fmt17(r.C) << "\n";
  }
}

ExpansionReport expansion_report(std::vector<ExpansionRow> rows, const std::vector<double>& eps,
                                 const std::vector<Probe>& probes, bool elliptic) {
  ExpansionReport rep;
  rep.elliptic = elliptic;
  rep.eps = eps;
  rep.probes = probes;
  for (std::size_t e = 0; e < eps.size(); ++e)
    for (std::size_t p = 0; p < probes.size(); ++p) {
      std::vector<double> a, c;
      for (const auto& r : rows)
        if (r.eps == eps[e] && r.probe == p) {
          a.push_back(std::abs(r.C));
          c.push_back(r.C);
        }
      if (a.empty()) throw InvalidParameter("expansion_report: no rows for a ladder entry");
      rep.cells.push_back({eps[e], p, mean_se(a), mean_se(c)});
    }
  rep.rows = std::move(rows);
  return rep;
}

std::vector<ExpansionRow> probe_rows(const CorrectorSet& cs, const MacroSetup& ms, const InitialDatum& f,
                                     const std::vector<Probe>& probes, const std::vector<GridFunction>& slices,
                                     const std::vector<double>& slice_times, bool elliptic, ReferenceMode ref,
                                     const StepPlan* plan) {
  const int d = cs.grid.d;
  if (!(cs.grid == ms.cell)) throw InvalidParameter("probe_rows: correctors and eps ladder entry use different cell grids");
  const double h = ref == ReferenceMode::continuum ? 0.0 : ms.macro.h();
  if (ref == ReferenceMode::scheme && !elliptic && !plan) throw InvalidParameter("probe_rows: scheme reference needs the step plan");
  std::vector<ExpansionRow> rows;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const Probe& pr = probes[p];
    if (static_cast<int>(pr.x.size()) != d) throw InvalidParameter("probe has wrong dimension");
    std::size_t si = 0;
    if (!elliptic) {
      auto it = std::find_if(slice_times.begin(), slice_times.end(), [&](double t) { return std::abs(t - pr.t) < 1e-12; });
      if (it == slice_times.end()) throw InvalidParameter("probe time not among the solved times");
      si = static_cast<std::size_t>(it - slice_times.begin());
    }
    if (!(slices[si].grid == ms.macro)) throw InvalidParameter("probe_rows: solution grid mismatch");
    ExpansionRow r;
    r.eps = ms.eps;
    r.probe = p;
    r.t = elliptic ? 0.0 : pr.t;
    r.x = pr.x;
    double xw[kMaxDim], y[kMaxDim];
    Vec xv(d);
    for (int j = 0; j < d; ++j) {
      xw[j] = wrap(pr.x[static_cast<std::size_t>(j)], ms.period);
      y[j] = wrap(pr.x[static_cast<std::size_t>(j)] / ms.eps, cs.grid.L);
      xv[j] = pr.x[static_cast<std::size_t>(j)];
    }
    r.u_eps = interpolate(slices[si], 0, xw);
    const HomValue hv = elliptic                       ? homogenized_elliptic(cs.A_bar, f, xv, h)
                        : ref == ReferenceMode::scheme ? homogenized_scheme(cs.A_bar, f, *plan, si, xv, h)
                                                       : homogenized_solution(cs.A_bar, f, pr.t, xv, h);
    r.u_hom = hv.value;
    for (int k = 0; k < d; ++k) {
      r.grad_u_hom.push_back(hv.grad[k]);
      r.phi.push_back(interpolate(cs.phi[static_cast<std::size_t>(k)], 0, y));
    }
    r.C = (r.u_eps - r.u_hom - ms.eps * r.first_order()) / ms.eps;
    rows.push_back(std::move(r));
  }
  return rows;
}

ExpansionReport run_expansion(const ExpansionConfig& cfg) {
  if (cfg.eps.empty() || cfg.probes.empty()) throw InvalidParameter("run_expansion: empty eps ladder or probe list");
  if (cfg.env_seeds.empty()) throw InvalidParameter("run_expansion: no environments");
  std::vector<double> times;
  if (!cfg.elliptic) {
    for (const auto& p : cfg.probes) times.push_back(p.t);
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end()), times.end());
  }
  std::vector<std::vector<ExpansionRow>> per_env(cfg.env_seeds.size());
  for (std::size_t e = 0; e < cfg.env_seeds.size(); ++e) {
    FieldSpec fs = cfg.field;
    fs.seed = cfg.env_seeds[e];
    const CoefficientField field(fs);
    std::map<int, CorrectorSet> cache;
    for (double eps : cfg.eps) {
      const MacroSetup ms = macro_setup(field, eps, cfg.datum, cfg.grid);
      auto it = cache.find(ms.cell.n);
      if (it == cache.end()) it = cache.emplace(ms.cell.n, compute_correctors(field, ms.cell, cfg.corrector)).first;
      std::vector<GridFunction> slices;
      StepPlan plan;
      if (cfg.elliptic) {
        EllipticResult er = cfg.laplace_path ? elliptic_laplace(field, eps, cfg.datum, ms.macro, cfg.laplace)
                                             : elliptic_direct(field, eps, cfg.datum, ms.macro, cfg.time.tol);
        slices.push_back(std::move(er.U));
      } else {
        ParabolicOptions po = cfg.time;
        po.min_points = cfg.grid.min_points;
        ParabolicResult pr = solve_parabolic(field, eps, cfg.datum, times, ms.macro, po);
        slices = std::move(pr.slices);
        plan = std::move(pr.plan);
      }
      auto rows = probe_rows(it->second, ms, cfg.datum, cfg.probes, slices, times, cfg.elliptic, cfg.reference, &plan);
      for (auto& r : rows) {
        r.env = e;
        r.seed = fs.seed;
        per_env[e].push_back(std::move(r));
      }
    }
  }
  std::vector<ExpansionRow> all;
  for (auto& v : per_env)
    for (auto& r : v) all.push_back(std::move(r));
  return expansion_report(std::move(all), cfg.eps, cfg.probes, cfg.elliptic);
}

}  // namespace homolab
