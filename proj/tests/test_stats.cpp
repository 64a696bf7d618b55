#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "homolab/rng.hpp"
#include "homolab/stats.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <set>

using namespace homolab;

TEST_CASE("mean and standard error") {
  const std::vector<double> x = {1, 2, 3, 4};
  const MeanSe m = mean_se(x);
  CHECK(m.mean == doctest::Approx(2.5));
  CHECK(m.se == doctest::Approx(std::sqrt((2.25 + 0.25 + 0.25 + 2.25) / 3.0 / 4.0)));
  CHECK(m.n == 4);
}

TEST_CASE("paired difference is the mean/SE of differences") {
  const std::vector<double> x = {1.5, 2.0, 4.0, 3.5, 0.1}, y = {1.0, 2.5, 3.0, 3.0, 0.0};
  std::vector<double> d(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] - y[i];
  const MeanSe a = paired_difference(x, y), b = mean_se(d);
  CHECK(a.mean == doctest::Approx(b.mean));
  CHECK(a.se == doctest::Approx(b.se));
}

TEST_CASE("unbiased squared mean is the off-diagonal U-statistic") {
  const std::vector<double> g = {0.3, -1.2, 2.0, 0.7, 0.05};
  double off = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j)
      if (i != j) off += g[i] * g[j];
  off /= static_cast<double>(g.size() * (g.size() - 1));
  CHECK(squared_mean_unbiased(g) == doctest::Approx(off).epsilon(1e-13));
}

TEST_CASE("unbiased squared mean is unbiased") {
  CounterRng rng(stream_key(3, 1));
  std::normal_distribution<double> z(0.4, 1.0);
  std::vector<double> est;
  for (int r = 0; r < 20000; ++r) {
    std::vector<double> g(4);
    for (auto& v : g) v = z(rng);
    est.push_back(squared_mean_unbiased(g));
  }
  const MeanSe m = mean_se(est);
  CHECK(std::abs(m.mean - 0.16) <= 4.0 * m.se);
}

TEST_CASE("pairwise sum is accurate and order-fixed") {
  std::vector<double> v(1000003, 0.1);
  const long double exact = 0.1L * 1000003.0L;
  CHECK(std::abs(pairwise_sum(v) - static_cast<double>(exact)) < 1e-9);
  CHECK(pairwise_mean(std::vector<double>{}) == 0.0);
  const std::vector<double> x = {1, 2, 3}, y = {4, 5, 6};
  CHECK(pairwise_dot(x, y) == 32.0);
}

TEST_CASE("KS distance separates normal from shifted samples") {
  CounterRng rng(stream_key(5, 0));
  std::normal_distribution<double> z;
  std::vector<double> a(20000), b(20000);
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = 2.0 * z(rng);
    b[i] = a[i] + 1.0;
  }
  CHECK(ks_distance_normal(a, 4.0) < 0.015);
  CHECK(ks_distance_normal(b, 4.0) > 0.15);
}

TEST_CASE("stream keys and counter engine") {
  std::set<std::uint64_t> keys;
  for (std::uint64_t a = 0; a < 100; ++a)
    for (std::uint64_t b = 0; b < 10; ++b) keys.insert(stream_key(1, a, b));
  CHECK(keys.size() == 1000);
  CHECK(stream_key(1, 2, 3) != stream_key(1, 3, 2));
  CounterRng r1(42), r2(42);
  for (int i = 0; i < 10; ++i) CHECK(r1() == r2());
  CounterRng u(stream_key(9, 9));
  std::vector<double> x(100000);
  for (auto& v : x) {
    v = u.uniform();
    REQUIRE(v >= 0.0);
    REQUIRE(v < 1.0);
  }
  const MeanSe m = mean_se(x);
  CHECK(std::abs(m.mean - 0.5) <= 4.0 * m.se);
}

TEST_CASE("fmt17 round-trips doubles") {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0}) CHECK(std::stod(fmt17(v)) == v);
}
