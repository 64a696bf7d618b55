#include "homolab/diagnostics.hpp"

#include "homolab/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace homolab {

namespace {

constexpr double kSqrtPi = 1.7724538509055160273;

struct LineFit {
  double slope = 0.0;
  double intercept = 0.0;
  bool ok = false;
};

LineFit least_squares(const std::vector<double>& lx, const std::vector<double>& ly, const std::vector<std::size_t>& idx) {
  const double n = static_cast<double>(idx.size());
  double mx = 0.0, my = 0.0;
  for (auto i : idx) {
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0.0, sxy = 0.0;
  for (auto i : idx) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  LineFit f;
  if (sxx <= 1e-300) return f;
  f.slope = sxy / sxx;
  f.intercept = my - f.slope * mx;
  f.ok = true;
  return f;
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto i = static_cast<std::size_t>(std::floor(pos));
  const double f = pos - static_cast<double>(i);
  return i + 1 < v.size() ? v[i] * (1.0 - f) + v[i + 1] * f : v[i];
}

/// Apply fn(base, stride) to every line of grid points along `axis`.
template <class Fn>
void for_each_line(const Grid& g, int axis, Fn fn) {
  const std::size_t st = g.stride(axis);
  const std::size_t line = st * static_cast<std::size_t>(g.n);
  const std::size_t outer = g.size() / line;
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < st; ++in) fn(o * line + in, st);
}

std::vector<double> centered(const GridFunction& g) {
  std::vector<double> v(g.values.begin(), g.values.begin() + static_cast<std::ptrdiff_t>(g.size()));
  const double m = g.mean();
  for (double& x : v) x -= m;
  return v;
}

PoissonCloud draw(const CloudLaw& law, std::uint64_t key) {
  return sample_cloud(law.d, law.L, law.intensity, law.marks, key, law.cell_size);
}

}  // namespace

ExponentFit exponent_fit(const std::vector<double>& x, const std::vector<double>& y, double x_lo, double x_hi,
                         std::uint64_t seed, std::size_t n_boot) {
  if (x.size() != y.size()) throw InvalidParameter("exponent_fit: x and y differ in length");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] < x_lo || x[i] > x_hi) continue;
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw InvalidParameter("exponent_fit: values in the window must be positive");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  if (lx.size() < 4) throw InvalidParameter("exponent_fit: fewer than 4 points in the window");
  std::vector<std::size_t> all(lx.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const LineFit base = least_squares(lx, ly, all);
  if (!base.ok) throw InvalidParameter("exponent_fit: degenerate abscissae");
  ExponentFit out;
  out.slope = base.slope;
  out.intercept = base.intercept;
  out.points = lx.size();
  CounterRng rng(stream_key(seed, 0x5eed));
  std::vector<double> slopes;
  std::vector<std::size_t> idx(lx.size());
  while (slopes.size() < n_boot) {
    for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform() * static_cast<double>(lx.size()));
    const LineFit f = least_squares(lx, ly, idx);
    if (f.ok) slopes.push_back(f.slope);
  }
  out.lo = n_boot ? quantile(slopes, 0.025) : base.slope;
  out.hi = n_boot ? quantile(slopes, 0.975) : base.slope;
  return out;
}

void fit_curve(DecayCurve& c, double x_lo, double x_hi, std::uint64_t seed) {
  const ExponentFit f = exponent_fit(c.x, c.values, x_lo, x_hi, seed);
  c.slope = f.slope;
  c.slope_lo = f.lo;
  c.slope_hi = f.hi;
}

DecayCurve decorrelation_curve(const std::vector<GridFunction>& g, const std::vector<int>& lags) {
  if (g.empty()) throw InvalidParameter("decorrelation_curve: empty ensemble");
  const Grid& G = g[0].grid;
  for (const auto& gi : g)
    if (!(gi.grid == G)) throw InvalidParameter("decorrelation_curve: ensemble members on different grids");
  for (std::size_t i = 0; i < lags.size(); ++i) {
    if (lags[i] < 0 || (i && lags[i] <= lags[i - 1])) throw InvalidParameter("decorrelation_curve: lags must increase from 0");
    if (lags[i] * G.h() > 0.25 * G.L + 1e-12)
      throw InvalidParameter("decorrelation_curve: lag " + fmt17(lags[i] * G.h()) + " exceeds L/4 = " + fmt17(0.25 * G.L));
  }
  DecayCurve c;
  c.abscissa = "lag";
  c.per_env.assign(g.size(), std::vector<double>(lags.size(), 0.0));
  const int n = G.n;
  for (std::size_t e = 0; e < g.size(); ++e) {
    const std::vector<double> v = centered(g[e]);
    for (std::size_t li = 0; li < lags.size(); ++li) {
      const int l = lags[li];
      std::vector<double> parts;
      for (int axis = 0; axis < G.d; ++axis) {
        for_each_line(G, axis, [&](std::size_t base, std::size_t st) {
          double acc = 0.0;
          for (int i = 0; i < n; ++i)
            acc += v[base + static_cast<std::size_t>(i) * st] * v[base + static_cast<std::size_t>((i + l) % n) * st];
          parts.push_back(acc);
        });
      }
      c.per_env[e][li] = pairwise_sum(parts) / (static_cast<double>(G.size()) * G.d);
    }
  }
  std::vector<double> col(g.size());
  for (std::size_t li = 0; li < lags.size(); ++li) {
    for (std::size_t e = 0; e < g.size(); ++e) col[e] = c.per_env[e][li];
    const MeanSe m = mean_se(col);
    c.x.push_back(lags[li] * G.h());
    c.values.push_back(m.mean);
    c.se.push_back(m.se);
  }
  return c;
}

MeanSe odd_lag_asymmetry(const std::vector<GridFunction>& g, int lag, int axis) {
  if (g.empty()) throw InvalidParameter("odd_lag_asymmetry: empty ensemble");
  const Grid& G = g[0].grid;
  if (axis < 0 || axis >= G.d) throw InvalidParameter("odd_lag_asymmetry: axis out of range");
  const int n = G.n;
  const int l = ((lag % n) + n) % n;
  std::vector<double> per(g.size());
  for (std::size_t e = 0; e < g.size(); ++e) {
    if (!(g[e].grid == G)) throw InvalidParameter("odd_lag_asymmetry: ensemble members on different grids");
    const std::vector<double> v = centered(g[e]);
    std::vector<double> parts;
    for_each_line(G, axis, [&](std::size_t base, std::size_t st) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const double a = v[base + static_cast<std::size_t>(i) * st];
        const double b = v[base + static_cast<std::size_t>((i + l) % n) * st];
        acc += a * a * b - a * b * b;
      }
      parts.push_back(acc);
    });
    per[e] = pairwise_sum(parts) / static_cast<double>(G.size());
  }
  return mean_se(per);
}

CloudFunctional named_cloud_functional(const std::string& name, const CloudLaw& law) {
  const double L = law.L;
  if (name == "count") return [](const PoissonCloud& c) { return static_cast<double>(c.size()); };
  if (name == "weighted-marks")
    return [L](const PoissonCloud& c) {
      std::vector<double> terms(c.size());
      for (std::size_t i = 0; i < c.size(); ++i) {
        double w = c.marks[i];
        for (int j = 0; j < c.d; ++j) {
          const double v = std::cos(std::numbers::pi * c.location(i)[j] / L);
          w *= v * v;
        }
        terms[i] = w;
      }
      return pairwise_sum(terms);
    };
  if (name == "nearest")
    return [L](const PoissonCloud& c) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < c.size(); ++i) {
        double r2 = 0.0;
        for (int j = 0; j < c.d; ++j) {
          double dx = std::abs(c.location(i)[j] - 0.5 * L);
          dx = std::min(dx, L - dx);
          r2 += dx * dx;
        }
        best = std::min(best, r2);
      }
      return std::isfinite(best) ? std::exp(-best) : 0.0;
    };
  throw InvalidParameter("unknown cloud functional '" + name + "' (allowed: count, weighted-marks, nearest)");
}

const std::vector<std::string>& cloud_functional_names() {
  static const std::vector<std::string> names = {"count", "weighted-marks", "nearest"};
  return names;
}

double count_resampling_value(const CloudLaw& law) { return law.intensity * std::pow(law.cell_size, law.d); }

ResamplingReport resampling_identity(const CloudLaw& law, const CloudFunctional& g, std::span<const int> cell,
                                     std::size_t n_outer, std::uint64_t seed, std::size_t n_inner) {
  if (n_outer < 2 || n_inner < 2) throw InvalidParameter("resampling_identity: need at least two samples");
  std::vector<double> lhs(n_outer), rhs(n_outer), gap(n_outer);
  const double m = static_cast<double>(n_inner);
  for (std::size_t i = 0; i < n_outer; ++i) {
    const PoissonCloud cloud = draw(law, stream_key(seed, i));
    const double f0 = g(cloud);
    double mean = 0.0;
    for (std::size_t j = 0; j < n_inner; ++j) mean += g(resample_cell(cloud, cell, stream_key(seed, i, j + 1)));
    mean /= m;
    const double fk = g(resample_cell(cloud, cell, stream_key(seed, i, n_inner + 1)));
    lhs[i] = m / (m + 1.0) * (f0 - mean) * (f0 - mean);
    rhs[i] = 0.5 * (f0 - fk) * (f0 - fk);
    gap[i] = lhs[i] - rhs[i];
  }
  ResamplingReport r;
  r.inner = n_inner;
  r.lhs = mean_se(lhs);
  r.rhs = mean_se(rhs);
  r.gap = mean_se(gap);
  return r;
}

CovarianceCheck covariance_bound(const CloudLaw& law, const CloudFunctional& f, const CloudFunctional& g,
                                 std::size_t n_outer, std::uint64_t seed, std::size_t n_inner) {
  if (n_outer < 2 || n_inner < 2) throw InvalidParameter("covariance_bound: need at least two samples");
  const PoissonCloud probe = draw(law, stream_key(seed, 0));
  const std::size_t cells = probe.num_cells();
  const int per_axis = probe.cells_per_axis;
  std::vector<double> fv(n_outer), gv(n_outer);
  std::vector<std::vector<double>> df(cells, std::vector<double>(n_outer)), dg = df;
  const double m = static_cast<double>(n_inner);
  for (std::size_t i = 0; i < n_outer; ++i) {
    const PoissonCloud cloud = draw(law, stream_key(seed, i));
    fv[i] = f(cloud);
    gv[i] = g(cloud);
    for (std::size_t c = 0; c < cells; ++c) {
      int k[kMaxDim];
      std::size_t rem = c;
      for (int j = law.d - 1; j >= 0; --j) {
        k[j] = static_cast<int>(rem % static_cast<std::size_t>(per_axis));
        rem /= static_cast<std::size_t>(per_axis);
      }
      const std::span<const int> ks(k, static_cast<std::size_t>(law.d));
      double mf = 0.0, mg = 0.0;
      for (std::size_t j = 0; j < n_inner; ++j) {
        const PoissonCloud rc = resample_cell(cloud, ks, stream_key(seed, i, c + 1, j + 1));
        mf += f(rc);
        mg += g(rc);
      }
      mf /= m;
      mg /= m;
      df[c][i] = m / (m + 1.0) * (fv[i] - mf) * (fv[i] - mf);
      dg[c][i] = m / (m + 1.0) * (gv[i] - mg) * (gv[i] - mg);
    }
  }
  const double fm = pairwise_mean(fv), gm = pairwise_mean(gv);
  std::vector<double> prod(n_outer);
  for (std::size_t i = 0; i < n_outer; ++i) prod[i] = (fv[i] - fm) * (gv[i] - gm);
  CovarianceCheck out;
  out.cov = mean_se(prod);
  for (std::size_t c = 0; c < cells; ++c) {
    const MeanSe a = mean_se(df[c]), b = mean_se(dg[c]);
    const double A = std::max(a.mean, 0.0), B = std::max(b.mean, 0.0);
    out.bound += std::sqrt(A * B);
    if (A > 0.0 && B > 0.0) out.bound_se += 0.5 * (std::sqrt(B / A) * a.se + std::sqrt(A / B) * b.se);
  }
  return out;
}

std::vector<TestFunction> clt_test_functions() {
  std::vector<TestFunction> out;
  for (double s : {0.5, 1.0, 2.0}) {
    TestFunction t;
    t.name = "erf_antiderivative_s" + fmt17(s);
    t.f = [s](double x) { return x * std::erf(x / s) + s / kSqrtPi * (std::exp(-x * x / (s * s)) - 1.0); };
    t.f2 = [s](double x) { return 2.0 / (s * kSqrtPi) * std::exp(-x * x / (s * s)); };
    t.norm2 = 2.0 / (s * kSqrtPi);
    t.norm3 = 2.0 * std::numbers::sqrt2 * std::exp(-0.5) / (s * s * kSqrtPi);
    t.gaussian_mean = [s](double v) {
      const double r = 1.0 / std::sqrt(1.0 + 2.0 * v / (s * s));
      return 2.0 * v / (s * kSqrtPi) * r + s / kSqrtPi * (r - 1.0);
    };
    out.push_back(t);
  }
  {
    TestFunction t;
    t.name = "cos";
    t.f = [](double x) { return std::cos(x); };
    t.f2 = [](double x) { return -std::cos(x); };
    t.norm2 = 1.0;
    t.norm3 = 1.0;
    t.gaussian_mean = [](double v) { return std::exp(-0.5 * v); };
    out.push_back(t);
  }
  {
    const double s = 1.0;
    TestFunction t;
    t.name = "gaussian_bump";
    t.f = [s](double x) { return std::exp(-0.5 * x * x / (s * s)); };
    t.f2 = [s](double x) { return (x * x / (s * s) - 1.0) / (s * s) * std::exp(-0.5 * x * x / (s * s)); };
    t.norm2 = 1.0 / (s * s);
    const double u2 = 3.0 - std::sqrt(6.0);
    t.norm3 = std::sqrt(u2) * (3.0 - u2) * std::exp(-0.5 * u2) / (s * s * s);
    t.gaussian_mean = [s](double v) { return s / std::sqrt(s * s + v); };
    out.push_back(t);
  }
  return out;
}

std::vector<CltRow> clt_distance(const std::vector<CltSample>& samples, const std::vector<TestFunction>& family,
                                 double third_order_constant, double k_se) {
  if (samples.size() < 2) throw InvalidParameter("clt_distance: need at least two samples");
  std::vector<CltRow> rows;
  const std::size_t n = samples.size();
  for (const auto& tf : family) {
    if (!(std::isfinite(tf.norm2) && tf.norm2 > 0.0 && std::isfinite(tf.norm3) && tf.norm3 > 0.0))
      throw InvalidParameter("clt_distance: derivative bounds of " + tf.name + " must be finite and positive");
    std::vector<double> D(n), T(n), q1(n), q3(n);
    for (std::size_t i = 0; i < n; ++i) {
      const CltSample& s = samples[i];
      const double dq = s.QV - s.target;
      D[i] = tf.f(s.M) - tf.gaussian_mean(s.target);
      T[i] = D[i] - 0.5 * tf.f2(s.M_tau) * dq;
      q1[i] = std::abs(dq);
      q3[i] = std::pow(std::abs(dq), 1.5);
    }
    CltRow r;
    r.name = tf.name;
    const double mD = pairwise_mean(D), mT = pairwise_mean(T);
    const double sD = mD >= 0.0 ? 1.0 : -1.0, sT = mT >= 0.0 ? 1.0 : -1.0;
    std::vector<double> z2(n), z3(n);
    for (std::size_t i = 0; i < n; ++i) {
      z2[i] = sD * D[i] - tf.norm2 * q1[i];
      z3[i] = sT * T[i] - third_order_constant * tf.norm3 * q3[i];
    }
    r.lhs2 = std::abs(mD);
    r.rhs2 = tf.norm2 * pairwise_mean(q1);
    r.lhs3 = std::abs(mT);
    r.rhs3 = third_order_constant * tf.norm3 * pairwise_mean(q3);
    const MeanSe a = mean_se(z2), b = mean_se(z3);
    r.se2 = a.se;
    r.se3 = b.se;
    r.holds2 = a.mean <= k_se * a.se;
    r.holds3 = b.mean <= k_se * b.se;
    rows.push_back(r);
  }
  return rows;
}

double ConvolutionSum::spread() const {
  if (ratio.empty()) return 0.0;
  return *std::max_element(ratio.begin(), ratio.end()) / *std::min_element(ratio.begin(), ratio.end());
}

ConvolutionSum convolution_power_sum(int d, double p, const std::vector<double>& xs, double radius_factor) {
  if (d < 3 || d > 6) throw InvalidParameter("convolution_power_sum: d must lie in [3, 6]");
  if (!(2.0 * p > d)) throw InvalidParameter("convolution_power_sum: need 2p > d for a convergent sum");
  if (!(radius_factor >= 2.0)) throw InvalidParameter("convolution_power_sum: radius_factor must be >= 2");
  ConvolutionSum out;
  out.d = d;
  out.p = p;
  const double surface = 2.0 * std::pow(std::numbers::pi, 0.5 * d) / std::tgamma(0.5 * d);
  const double c2 = 0.5 * p * (p + 2.0 - d) / d;
  auto tail = [&](double R, double x) {
    return surface * (std::pow(R, d - 2.0 * p) / (2.0 * p - d) + c2 * x * x * std::pow(R, d - 2.0 * p - 2.0) / (2.0 * p + 2.0 - d));
  };
  auto f = [p](double r2) { return r2 <= 1.0 ? 1.0 : std::pow(r2, -0.5 * p); };
  for (double x : xs) {
    if (!(x >= 0.0)) throw InvalidParameter("convolution_power_sum: |x| must be >= 0");
    const double R = radius_factor * std::max(x, 10.0);
    const auto Ri = static_cast<long>(std::floor(R));
    const long R2 = static_cast<long>(std::floor(R * R));
    const double Rs = 0.8 * R;
    // Number of points of Z^{d-1} with squared norm q.
    std::vector<double> count(static_cast<std::size_t>(R2) + 1, 0.0);
    count[0] = 1.0;
    for (int m = 0; m < d - 1; ++m) {
      std::vector<double> next(count.size(), 0.0);
      for (long k = -Ri; k <= Ri; ++k) {
        const long k2 = k * k;
        for (long q = 0; q + k2 <= R2; ++q)
          if (count[static_cast<std::size_t>(q)] != 0.0) next[static_cast<std::size_t>(q + k2)] += count[static_cast<std::size_t>(q)];
      }
      count.swap(next);
    }
    std::vector<double> big, small;
    for (long k1 = -Ri; k1 <= Ri; ++k1) {
      double acc_big = 0.0, acc_small = 0.0;
      const double a = static_cast<double>(k1 * k1);
      const double b = (x - static_cast<double>(k1)) * (x - static_cast<double>(k1));
      for (long q = 0; q + k1 * k1 <= R2; ++q) {
        const double c = count[static_cast<std::size_t>(q)];
        if (c == 0.0) continue;
        const double qd = static_cast<double>(q);
        const double v = c * f(a + qd) * f(b + qd);
        acc_big += v;
        if (a + qd <= Rs * Rs) acc_small += v;
      }
      big.push_back(acc_big);
      small.push_back(acc_small);
    }
    const double Sb = pairwise_sum(big) + tail(R, x);
    const double Ss = pairwise_sum(small) + tail(Rs, x);
    const double trunc = std::abs(Sb - Ss);
    if (trunc > 0.01 * Sb)
      throw TruncationError("convolution_power_sum: truncation " + fmt17(trunc) + " exceeds 1% at |x| = " + fmt17(x) +
                            "; enlarge the radius");
    double bound;
    if (std::abs(p - (d - 1.0)) < 1e-12) bound = std::min(1.0, std::pow(x, 2.0 - d));
    else if (std::abs(p - d) < 1e-12) bound = std::min(1.0, std::log(2.0 + x) / std::pow(x, d));
    else bound = std::min(1.0, std::pow(x, d - 2.0 * p));
    out.x.push_back(x);
    out.sum.push_back(Sb);
    out.truncation.push_back(trunc);
    out.bound.push_back(bound);
    out.ratio.push_back(Sb / bound);
  }
  return out;
}

}  // namespace homolab
