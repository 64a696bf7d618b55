#include "homolab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace homolab {

namespace {

constexpr std::size_t kBlock = 64;

double sum_range(const double* p, std::size_t n) {
  if (n <= kBlock) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += p[i];
    return s;
  }
  const std::size_t half = n / 2;
  return sum_range(p, half) + sum_range(p + half, n - half);
}

double dot_range(const double* x, const double* y, std::size_t n) {
  if (n <= kBlock) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
    return s;
  }
  const std::size_t half = n / 2;
  return dot_range(x, y, half) + dot_range(x + half, y + half, n - half);
}

}  // namespace

double pairwise_sum(std::span<const double> v) { return sum_range(v.data(), v.size()); }

double pairwise_dot(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidParameter("pairwise_dot: size mismatch");
  return dot_range(x.data(), y.data(), x.size());
}

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

MeanSe mean_se(std::span<const double> x) {
  MeanSe r;
  r.n = x.size();
  if (x.empty()) return r;
  r.mean = pairwise_mean(x);
  if (x.size() < 2) return r;
  std::vector<double> dev(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) dev[i] = (x[i] - r.mean) * (x[i] - r.mean);
  const double var = pairwise_sum(dev) / static_cast<double>(x.size() - 1);
  r.se = std::sqrt(var / static_cast<double>(x.size()));
  return r;
}

MeanSe paired_difference(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidParameter("paired_difference: size mismatch");
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  return mean_se(d);
}

double squared_mean_unbiased(std::span<const double> g) {
  const double n = static_cast<double>(g.size());
  if (g.size() < 2) throw InvalidParameter("squared_mean_unbiased: need at least two samples");
  const double s = pairwise_sum(g);
  const double s2 = pairwise_dot(g, g);
  return (s * s - s2) / (n * (n - 1.0));
}

double ks_distance_normal(std::vector<double> x, double variance) {
  if (x.empty() || !(variance > 0.0)) throw InvalidParameter("ks_distance_normal: bad input");
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  const double scale = std::sqrt(2.0 * variance);
  double dmax = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double cdf = 0.5 * std::erfc(-x[i] / scale);
    dmax = std::max({dmax, cdf - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - cdf});
  }
  return dmax;
}

}  // namespace homolab
