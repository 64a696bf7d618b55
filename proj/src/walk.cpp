#include "homolab/walk.hpp"

#include "homolab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace homolab {

namespace {

/// Neumaier compensated accumulator.
struct Accumulator {
  double sum = 0.0;
  double c = 0.0;
  void add(double v) {
    const double t = sum + v;
    c += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  double value() const { return sum + c; }
};

class Walker {
 public:
  Walker(const CoefficientField& field, double dt, std::uint64_t key, bool brownian = false)
      : field_(field), d_(field.dim()), dt_(dt), sdt_(std::sqrt(dt)), rng_(key), brownian_(brownian) {
    if (!brownian && !field.has_smooth_drift())
      throw InvalidParameter("diffusion needs a coefficient with a smooth drift; the two-phase laminate has none");
  }

  /// One Euler-Maruyama step from x; a and dB are returned for the decomposition.
  void step(double* x, double* a, double* dB, std::size_t index) {
    double b[kMaxDim];
    if (brownian_) {
      for (int j = 0; j < d_; ++j) {
        a[j] = 1.0;
        b[j] = 0.0;
      }
    } else {
      field_.diagonal_and_drift(x, a, b);
    }
    for (int j = 0; j < d_; ++j) {
      dB[j] = sdt_ * normal_(rng_);
      x[j] += b[j] * dt_ + std::sqrt(a[j]) * dB[j];
      if (!std::isfinite(x[j])) throw SimulationBlowup("non-finite walker state", index);
    }
  }

  double uniform() { return rng_.uniform(); }

 private:
  const CoefficientField& field_;
  int d_;
  double dt_;
  double sdt_;
  CounterRng rng_;
  std::normal_distribution<double> normal_;
  bool brownian_;
};

std::size_t step_count(double span, double dt) {
  if (!(dt > 0.0)) throw InvalidParameter("time step must be positive");
  if (!(span >= 0.0)) throw InvalidParameter("final time must be >= 0");
  return static_cast<std::size_t>(std::ceil(span / dt - 1e-9));
}

void uniform_start(Walker& w, const CoefficientField& field, double* x) {
  for (int j = 0; j < field.dim(); ++j) x[j] = w.uniform() * field.period();
}

/// Step indices of the requested times on a grid of spacing dt.
std::vector<std::size_t> record_steps(const std::vector<double>& times, double dt) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!(times[i] >= 0.0) || (i && !(times[i] > times[i - 1])))
      throw InvalidParameter("decay times must be increasing and >= 0");
    const double k = times[i] / dt;
    if (std::abs(k - std::round(k)) > 1e-6) throw InvalidParameter("decay time " + fmt17(times[i]) + " is not a multiple of dt");
    out.push_back(static_cast<std::size_t>(std::llround(k)));
  }
  return out;
}

void check_functionals(const std::vector<CoefficientField>& fields, const std::vector<GridFunction>& g) {
  if (fields.empty() || fields.size() != g.size()) throw InvalidParameter("need one functional per environment");
  for (std::size_t e = 0; e < fields.size(); ++e)
    if (g[e].grid.L != fields[e].period() || g[e].grid.d != fields[e].dim())
      throw InvalidParameter("functional grid does not match its environment");
}

}  // namespace

double PathBundle::telescoping_residual() const {
  double r = 0.0;
  for (std::size_t i = 0; i < M.size(); ++i) {
    double disp = 0.0;
    for (int j = 0; j < d; ++j) disp += xi[j] * eps * (position(i)[j] - position(0)[j]);
    r = std::max(r, std::abs(disp - R[i] - M[i]));
  }
  return r;
}

PathBundle simulate_path(const CoefficientField& field, const Vec& x0, double dt, double t_final, std::uint64_t seed) {
  const int d = field.dim();
  if (x0.size() != d) throw InvalidParameter("simulate_path: start point has wrong dimension");
  const std::size_t n = step_count(t_final, dt);
  const double h = n ? t_final / static_cast<double>(n) : dt;
  PathBundle p;
  p.d = d;
  p.dt = h;
  p.seed = seed;
  p.times.resize(n + 1);
  p.X.resize((n + 1) * static_cast<std::size_t>(d));
  p.increments.resize(n * static_cast<std::size_t>(d));
  p.sqrt_a.resize(n * static_cast<std::size_t>(d));
  double x[kMaxDim], a[kMaxDim];
  for (int j = 0; j < d; ++j) x[j] = p.X[static_cast<std::size_t>(j)] = x0[j];
  Walker w(field, h, stream_key(seed, 0));
  for (std::size_t i = 0; i < n; ++i) {
    w.step(x, a, p.increments.data() + i * static_cast<std::size_t>(d), i);
    for (int j = 0; j < d; ++j) p.sqrt_a[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = std::sqrt(a[j]);
    for (int j = 0; j < d; ++j) p.X[(i + 1) * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)] = x[j];
    p.times[i + 1] = static_cast<double>(i + 1) * h;
  }
  return p;
}

PathBundle decompose(PathBundle p, const CorrectorSet& cs, const Vec& xi, double eps) {
  const int d = p.d;
  if (cs.phi.size() != static_cast<std::size_t>(d) || cs.grid.d != d) throw InvalidParameter("decompose: missing correctors");
  if (xi.size() != d) throw InvalidParameter("decompose: xi has wrong dimension");
  if (p.increments.size() != p.steps() * static_cast<std::size_t>(d) || p.sqrt_a.size() != p.increments.size()) throw InvalidParameter("decompose: path has no increments");
  if (!(eps > 0.0)) throw InvalidParameter("decompose: eps must be positive");
  const GridFunction phi = cs.phi_direction(xi);
  const GridFunction gphi = grad(phi);
  p.eps = eps;
  p.xi = xi;
  const std::size_t n = p.steps();
  p.M.assign(n + 1, 0.0);
  p.R.assign(n + 1, 0.0);
  p.QV.assign(n + 1, 0.0);
  p.R_corrector.assign(n + 1, 0.0);
  const double phi0 = interpolate(phi, 0, p.position(0));
  Accumulator M, Q;
  double G[kMaxDim];
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = p.position(i);
    const double* y = p.position(i + 1);
    const double* dB = p.increments.data() + i * static_cast<std::size_t>(d);
    interpolate_all(gphi, x, G);
    double dm = 0.0, dq = 0.0, dx = 0.0;
    for (int j = 0; j < d; ++j) {
      const double gj = xi[j] + G[j];
      const double sa = p.sqrt_a[i * static_cast<std::size_t>(d) + static_cast<std::size_t>(j)];
      dm += gj * sa * dB[j];
      dq += gj * gj * sa * sa;
      dx += xi[j] * (y[j] - p.X[static_cast<std::size_t>(j)]);
    }
    M.add(eps * dm);
    Q.add(eps * eps * dq * p.dt);
    p.M[i + 1] = M.value();
    p.R[i + 1] = eps * dx - p.M[i + 1];
    p.QV[i + 1] = Q.value();
    p.R_corrector[i + 1] = -eps * (interpolate(phi, 0, y) - phi0);
  }
  return p;
}

McEstimate mc_solution(const CoefficientField& field, double eps, const std::function<double(const double*)>& f,
                       double t, const Vec& x, std::size_t n_paths, std::uint64_t seed, double dt) {
  const int d = field.dim();
  if (n_paths < 2) throw InvalidParameter("mc_solution: need at least two paths");
  if (!(eps > 0.0)) throw InvalidParameter("mc_solution: eps must be positive");
  if (x.size() != d) throw InvalidParameter("mc_solution: point has wrong dimension");
  const double s = t / (eps * eps);
  const std::size_t n = step_count(s, dt);
  const double h = n ? s / static_cast<double>(n) : dt;
  std::vector<double> vals(n_paths);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(n_paths); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    Walker w(field, h, stream_key(seed, p));
    double y[kMaxDim], a[kMaxDim], dB[kMaxDim];
    for (int j = 0; j < d; ++j) y[j] = x[j] / eps;
    for (std::size_t i = 0; i < n; ++i) w.step(y, a, dB, i);
    for (int j = 0; j < d; ++j) y[j] *= eps;
    vals[p] = f(y);
  }
  const MeanSe m = mean_se(vals);
  return {m.mean, m.se, m.n};
}

std::vector<MartingaleSample> sample_martingales(const CoefficientField& field, const CorrectorSet& cs, const Vec& xi,
                                                 const MartingaleOptions& opt, std::size_t n_paths,
                                                 std::uint64_t seed) {
  const int d = field.dim();
  if (cs.phi.size() != static_cast<std::size_t>(d)) throw InvalidParameter("sample_martingales: missing correctors");
  if (xi.size() != d) throw InvalidParameter("sample_martingales: xi has wrong dimension");
  if (!opt.random_start && opt.x0.size() != d) throw InvalidParameter("sample_martingales: start point has wrong dimension");
  if (!(opt.eps > 0.0) || !(opt.t > 0.0)) throw InvalidParameter("sample_martingales: eps and t must be positive");
  const GridFunction phi = cs.phi_direction(xi);
  const GridFunction gphi = grad(phi);
  const double sigma2 = opt.sigma2 > 0.0 ? opt.sigma2 : xi.dot(cs.A_bar * xi);
  const double eps = opt.eps;
  const double s = opt.t / (eps * eps);
  const std::size_t n = step_count(s, opt.dt);
  const double h = s / static_cast<double>(n);
  const double qv_cap = sigma2 * opt.t;
  std::vector<MartingaleSample> out(n_paths);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(n_paths); ++pp) {
    const auto p = static_cast<std::size_t>(pp);
    Walker w(field, h, stream_key(seed, p));
    double x[kMaxDim], x0[kMaxDim], a[kMaxDim], dB[kMaxDim], G[kMaxDim];
    if (opt.random_start) uniform_start(w, field, x);
    else for (int j = 0; j < d; ++j) x[j] = opt.x0[j];
    std::copy(x, x + d, x0);
    const double phi0 = interpolate(phi, 0, x0);
    Accumulator M, Q;
    double m_tau = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      interpolate_all(gphi, x, G);
      w.step(x, a, dB, i);
      double dm = 0.0, dq = 0.0;
      for (int j = 0; j < d; ++j) {
        const double gj = xi[j] + G[j];
        dm += gj * std::sqrt(a[j]) * dB[j];
        dq += gj * gj * a[j];
      }
      M.add(eps * dm);
      Q.add(eps * eps * dq * h);
      if (Q.value() <= qv_cap) m_tau = M.value();
    }
    MartingaleSample& ms = out[p];
    ms.M = M.value();
    ms.QV = Q.value();
    ms.M_tau = m_tau;
    double disp = 0.0;
    for (int j = 0; j < d; ++j) disp += xi[j] * eps * (x[j] - x0[j]);
    ms.displacement = disp;
    ms.R = disp - ms.M;
    ms.R_corrector = -eps * (interpolate(phi, 0, x) - phi0);
    ms.residual = disp - ms.R - ms.M;
  }
  return out;
}

void DecayCurve::write_csv(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << abscissa << ",value,se\n";
  for (std::size_t i = 0; i < x.size(); ++i) os << fmt17(x[i]) << "," << fmt17(values[i]) << "," << fmt17(se[i]) << "\n";
}

namespace {

/// Per environment sample and path, the walker position at every step. Sample u uses fields[u / starts]
/// from its own uniform starting point.
template <class Visit>
void run_environments(const std::vector<CoefficientField>& fields, std::size_t starts, std::size_t n_paths, double dt,
                      std::size_t n_steps, bool brownian, std::uint64_t seed, Visit visit) {
  for (std::size_t u = 0; u < fields.size() * starts; ++u) {
    const CoefficientField& field = fields[u / starts];
    double x0[kMaxDim];
    {
      Walker w(field, dt, stream_key(seed, u, 0));
      uniform_start(w, field, x0);
    }
#pragma omp parallel for schedule(dynamic, 4)
    for (std::ptrdiff_t pp = 0; pp < static_cast<std::ptrdiff_t>(n_paths); ++pp) {
      const auto p = static_cast<std::size_t>(pp);
      Walker w(field, dt, stream_key(seed, u, p + 1), brownian);
      double x[kMaxDim], a[kMaxDim], dB[kMaxDim];
      std::copy(x0, x0 + field.dim(), x);
      visit(u, p, std::size_t(0), static_cast<const double*>(x));
      for (std::size_t i = 0; i < n_steps; ++i) {
        w.step(x, a, dB, i);
        visit(u, p, i + 1, static_cast<const double*>(x));
      }
    }
  }
}

}  // namespace

DecayCurve env_decay(const std::vector<CoefficientField>& fields, const std::vector<GridFunction>& g,
                     const EnvDecayOptions& opt, std::uint64_t seed) {
  check_functionals(fields, g);
  if (opt.n_paths < 2) throw InvalidParameter("env_decay: need at least two paths per environment");
  if (opt.times.empty()) throw InvalidParameter("env_decay: no times");
  const std::vector<std::size_t> rec = record_steps(opt.times, opt.dt);
  const std::size_t T = rec.size();
  if (opt.starts_per_env < 1) throw InvalidParameter("env_decay: starts_per_env must be >= 1");
  const std::size_t S = opt.starts_per_env;
  const std::size_t E = fields.size() * S;
  std::vector<double> samples(E * opt.n_paths * T, 0.0);
  run_environments(fields, S, opt.n_paths, opt.dt, rec.back(), opt.brownian, seed,
                   [&](std::size_t e, std::size_t p, std::size_t step, const double* x) {
                     auto it = std::lower_bound(rec.begin(), rec.end(), step);
                     if (it == rec.end() || *it != step) return;
                     const auto ti = static_cast<std::size_t>(it - rec.begin());
                     samples[(e * opt.n_paths + p) * T + ti] = interpolate(g[e / S], 0, x);
                   });
  DecayCurve c;
  c.x = opt.times;
  c.per_env.assign(E, std::vector<double>(T, 0.0));
  std::vector<double> col(opt.n_paths);
  for (std::size_t e = 0; e < E; ++e)
    for (std::size_t ti = 0; ti < T; ++ti) {
      for (std::size_t p = 0; p < opt.n_paths; ++p) col[p] = samples[(e * opt.n_paths + p) * T + ti];
      c.per_env[e][ti] = squared_mean_unbiased(col);
    }
  std::vector<double> v(E);
  for (std::size_t ti = 0; ti < T; ++ti) {
    for (std::size_t e = 0; e < E; ++e) v[e] = c.per_env[e][ti];
    const MeanSe m = mean_se(v);
    c.values.push_back(m.mean);
    c.se.push_back(m.se);
  }
  return c;
}

double surrogate_convolution(const GridFunction& g, double t) {
  if (!(t >= 0.0)) throw InvalidParameter("surrogate_convolution: t must be >= 0");
  const Grid& G = g.grid;
  const int n = G.n;
  const double h = G.h();
  std::vector<double> w(static_cast<std::size_t>(n), 0.0);
  if (t == 0.0) {
    w[0] = 1.0;
  } else {
    const double var = 2.0 * t;
    const int images = static_cast<int>(std::ceil(8.0 * std::sqrt(var) / G.L)) + 1;
    for (int m = 0; m < n; ++m)
      for (int j = -images; j <= images; ++j) {
        const double z = m * h + j * G.L;
        w[static_cast<std::size_t>(m)] += std::exp(-0.5 * z * z / var);
      }
    double s = 0.0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
  }
  std::vector<double> u = g.values;
  std::vector<double> tmp(u.size());
  const std::size_t N = G.size();
  for (int axis = 0; axis < G.d; ++axis) {
    const std::size_t st = G.stride(axis);
    const std::size_t outer = N / (st * static_cast<std::size_t>(n));
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t oo = 0; oo < static_cast<std::ptrdiff_t>(outer); ++oo) {
      const std::size_t base0 = static_cast<std::size_t>(oo) * st * static_cast<std::size_t>(n);
      for (std::size_t inner = 0; inner < st; ++inner) {
        const std::size_t base = base0 + inner;
        for (int i = 0; i < n; ++i) {
          double acc = 0.0;
          for (int m = 0; m < n; ++m) {
            const int k = (i + m) % n;
            acc += w[static_cast<std::size_t>(m)] * u[base + static_cast<std::size_t>(k) * st];
          }
          tmp[base + static_cast<std::size_t>(i) * st] = acc;
        }
      }
    }
    std::swap(u, tmp);
  }
  return pairwise_dot(g.span(), u) / static_cast<double>(N);
}

TimeIntegralBound time_integral_check(const std::vector<CoefficientField>& fields, const std::vector<GridFunction>& g, double t,
                      std::size_t n_paths, double dt, std::uint64_t seed) {
  check_functionals(fields, g);
  if (n_paths < 2) throw InvalidParameter("time_integral_check: need at least two paths per environment");
  const std::size_t n = step_count(t, dt);
  if (n % 2) throw InvalidParameter("time_integral_check: t / dt must be an even integer");
  if (std::abs(static_cast<double>(n) * dt - t) > 1e-9 * t) throw InvalidParameter("time_integral_check: t must be a multiple of dt");
  const std::size_t E = fields.size();
  std::vector<double> vals(E * n_paths * (n + 1));
  run_environments(fields, 1, n_paths, dt, n, false, seed,
                   [&](std::size_t e, std::size_t p, std::size_t step, const double* x) {
                     vals[(e * n_paths + p) * (n + 1) + step] = interpolate(g[e], 0, x);
                   });
  TimeIntegralBound out;
  out.t = t;
  std::vector<double> lhs(E), rhs(E), gap(E), col(n_paths), integ(n_paths);
  for (std::size_t e = 0; e < E; ++e) {
    for (std::size_t p = 0; p < n_paths; ++p) {
      const double* v = vals.data() + (e * n_paths + p) * (n + 1);
      Accumulator acc;
      for (std::size_t i = 0; i < n; ++i) acc.add(0.5 * dt * (v[i] + v[i + 1]));
      integ[p] = acc.value() * acc.value();
    }
    lhs[e] = pairwise_mean(integ);
    Accumulator F;
    double prev = 0.0;
    for (std::size_t i = 0; i <= n / 2; ++i) {
      for (std::size_t p = 0; p < n_paths; ++p) col[p] = vals[(e * n_paths + p) * (n + 1) + i];
      const double f = squared_mean_unbiased(col);
      if (i) F.add(0.5 * dt * (prev + f));
      prev = f;
    }
    rhs[e] = 4.0 * t * F.value();
    gap[e] = lhs[e] - rhs[e];
  }
  out.lhs = mean_se(lhs);
  out.rhs = mean_se(rhs);
  out.gap = mean_se(gap);
  return out;
}

}  // namespace homolab
