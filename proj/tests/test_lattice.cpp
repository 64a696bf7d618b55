#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "homolab/lattice.hpp"

#include <cmath>
#include <filesystem>
#include <numbers>

using namespace homolab;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

GridFunction random_function(const Grid& g, std::uint64_t seed) {
  GridFunction u(g, 1);
  CounterRng rng(seed);
  for (auto& v : u.values) v = rng.uniform() - 0.5;
  return u;
}

double dot(const GridFunction& a, const GridFunction& b) { return pairwise_dot(a.values, b.values); }

CoefficientField smooth_field(int d, std::uint64_t seed) {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.d = d;
  s.seed = seed;
  return CoefficientField(s);
}

}  // namespace

TEST_CASE("grid validation") {
  const auto check = [](int n, double L) { Grid{2, n, L}.validate(); };
  CHECK_NOTHROW(check(4, 1.0));
  CHECK_THROWS_AS(check(5, 1.0), InvalidParameter);
  CHECK_THROWS_AS(check(2, 1.0), InvalidParameter);
  CHECK_THROWS_AS(check(8, 0.0), InvalidParameter);
  const Grid g{3, 8, 2.0};
  CHECK(g.size() == 512);
  CHECK(g.h() == 0.25);
  double x[3];
  g.coordinates(g.stride(0) * 3 + g.stride(1) * 5 + 7, x);
  CHECK(x[0] == 0.75);
  CHECK(x[1] == 1.25);
  CHECK(x[2] == 1.75);
}

TEST_CASE("constants map to lambda times the constant") {
  for (double lambda : {0.0, 0.3}) {
    const DivFormOperator op = assemble(smooth_field(2, 1), Grid{2, 16, 1.0}, lambda);
    GridFunction u(op.grid(), 1);
    std::fill(u.values.begin(), u.values.end(), 2.5);
    const GridFunction Au = op.apply(u);
    for (double v : Au.values) CHECK(v == doctest::Approx(lambda * 2.5).scale(1.0).epsilon(1e-12));
  }
}

TEST_CASE("operator is symmetric and positive") {
  for (int d : {2, 3}) {
    const DivFormOperator op = assemble(smooth_field(d, 2), Grid{d, 8, 1.0}, 0.1);
    const GridFunction u = random_function(op.grid(), 1), v = random_function(op.grid(), 2);
    const double uAv = dot(u, op.apply(v)), vAu = dot(v, op.apply(u));
    CHECK(uAv == doctest::Approx(vAu).epsilon(1e-12));
    CHECK(dot(u, op.apply(u)) >= 0.1 * dot(u, u) * (1 - 1e-12));
  }
}

TEST_CASE("Fourier modes are eigenvectors for constant coefficients") {
  FieldSpec s;
  s.value = 1.3;
  s.L = 2.0;
  const Grid g{2, 16, 2.0};
  const DivFormOperator op = assemble(CoefficientField(s), g, 0.2);
  GridFunction u(g, 1);
  const int m1 = 3, m2 = 1;
  for (std::size_t i = 0; i < g.size(); ++i) {
    double x[2];
    g.coordinates(i, x);
    u.values[i] = std::cos(kTwoPi * (m1 * x[0] + m2 * x[1]) / g.L + 0.4);
  }
  const double h = g.h();
  const double sym = 0.2 + 0.5 * 1.3 * ((2 - 2 * std::cos(kTwoPi * m1 * h / g.L)) + (2 - 2 * std::cos(kTwoPi * m2 * h / g.L))) / (h * h);
  const GridFunction Au = op.apply(u);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(Au.values[i] == doctest::Approx(sym * u.values[i]).scale(1.0).epsilon(1e-11));
}

TEST_CASE("harmonic edge rule is the Simpson edge mean of 1/a") {
  FieldSpec s;
  s.model = FieldModel::laminate;
  s.d = 2;
  const CoefficientField f(s);
  const Grid g{2, 16, 1.0};
  const DivFormOperator op = assemble(f, g, 0.0);
  const auto alpha = [&](double x) { return s.alpha_mean - s.alpha_amp * std::cos(kTwoPi * x); };
  for (int i = 0; i < 16; ++i) {
    const double x = i * g.h();
    const double inv = (1 / alpha(x) + 4 / alpha(x + 0.5 * g.h()) + 1 / alpha(x + g.h())) / 6;
    const std::size_t idx = static_cast<std::size_t>(i) * g.stride(0) + 3;
    CHECK(op.edges().a[0][idx] == doctest::Approx(1 / inv).epsilon(1e-14));
    CHECK(op.edges().a[1][idx] == doctest::Approx(s.beta).epsilon(1e-14));
  }
  const DivFormOperator mid = assemble(f, g, 0.0, EdgeRule::midpoint);
  CHECK(mid.edges().a[0][0] == doctest::Approx(alpha(0.5 * g.h())).epsilon(1e-14));
}

TEST_CASE("scaled assembly tiles the cell edges") {
  const CoefficientField f = smooth_field(2, 3);
  const double eps = 0.25;
  const Grid macro{2, 32, 1.0};
  const DivFormOperator big = assemble_scaled(f, macro, eps, 0.0);
  const DivFormOperator cell = assemble(f, Grid{2, 8, 1.0}, 0.0);
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) {
      const std::size_t I = static_cast<std::size_t>(i * 32 + j), c = static_cast<std::size_t>((i % 8) * 8 + j % 8);
      for (int k = 0; k < 2; ++k)
        CHECK(big.edges().a[static_cast<std::size_t>(k)][I] == doctest::Approx(cell.edges().a[static_cast<std::size_t>(k)][c]).epsilon(1e-13));
    }
  const Grid bad{2, 30, 1.0};
  CHECK_THROWS_AS(assemble_scaled(f, bad, 0.3, 0.0), InvalidParameter);
}

TEST_CASE("CG solves with and without the mass term") {
  for (double lambda : {0.0, 0.5}) {
    const DivFormOperator op = assemble(smooth_field(2, 4), Grid{2, 32, 1.0}, lambda);
    GridFunction f = random_function(op.grid(), 9);
    const double m = f.mean();
    for (auto& v : f.values) v -= m;
    SolveStats st;
    const auto x = solve(op, f.values, SolveOptions{1e-12}, &st);
    GridFunction u(op.grid(), 1);
    u.values = x;
    const GridFunction r = op.apply(u);
    double err = 0.0;
    for (std::size_t i = 0; i < r.values.size(); ++i) err = std::max(err, std::abs(r.values[i] - f.values[i]));
    CHECK(err < 1e-9);
    if (lambda == 0.0) CHECK(std::abs(u.mean()) < 1e-14);
    CHECK(st.relative_residual <= 1e-12);
  }
}

TEST_CASE("CG rejects a nonzero mean at lambda = 0") {
  const DivFormOperator op = assemble(smooth_field(2, 4), Grid{2, 8, 1.0}, 0.0);
  GridFunction f(op.grid(), 1);
  std::fill(f.values.begin(), f.values.end(), 1.0);
  CHECK_THROWS_AS(solve(op, f), InvalidParameter);
}

TEST_CASE("difference operators on a sine") {
  const Grid g{2, 16, 1.0};
  GridFunction u(g, 1);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double x[2];
    g.coordinates(i, x);
    u.values[i] = std::sin(kTwoPi * x[1]);
  }
  const double h = g.h(), w = kTwoPi;
  std::vector<double> fwd(g.size()), bwd(g.size());
  forward_difference(g, u.comp(0), 1, fwd.data());
  backward_difference(g, u.comp(0), 1, bwd.data());
  const GridFunction gu = grad(u);
  for (std::size_t i = 0; i < g.size(); ++i) {
    double x[2];
    g.coordinates(i, x);
    CHECK(fwd[i] == doctest::Approx((std::sin(w * (x[1] + h)) - std::sin(w * x[1])) / h).scale(1.0).epsilon(1e-12));
    CHECK(bwd[i] == doctest::Approx((std::sin(w * x[1]) - std::sin(w * (x[1] - h))) / h).scale(1.0).epsilon(1e-12));
    CHECK(gu.comp(1)[i] == doctest::Approx(w * std::cos(w * x[1]) * std::sin(w * h) / (w * h)).scale(1.0).epsilon(1e-12));
    CHECK(gu.comp(0)[i] == doctest::Approx(0.0).scale(1.0));
  }
}

TEST_CASE("cubic interpolation: nodes, wrap-around and accuracy") {
  const Grid g{2, 32, 2.0};
  GridFunction u(g, 1);
  const auto f = [](double x, double y) { return std::sin(std::numbers::pi * x) * std::cos(std::numbers::pi * y) + 0.3; };
  for (std::size_t i = 0; i < g.size(); ++i) {
    double x[2];
    g.coordinates(i, x);
    u.values[i] = f(x[0], x[1]);
  }
  const double node[2] = {0.5, 1.25};
  CHECK(interpolate(u, 0, node) == doctest::Approx(f(0.5, 1.25)).epsilon(1e-14));
  const double off[2] = {0.537, 1.911}, shifted[2] = {0.537 - 4.0, 1.911 + 6.0};
  const double h = g.h(), pi4 = std::pow(std::numbers::pi, 4);
  CHECK(std::abs(interpolate(u, 0, off) - f(0.537, 1.911)) <= 2.0 * (9.0 / 16.0) / 24.0 * std::pow(h, 4) * pi4);
  CHECK(interpolate(u, 0, shifted) == doctest::Approx(interpolate(u, 0, off)).epsilon(1e-13));
}

TEST_CASE("interpolation error is fourth order") {
  auto err = [](int n) {
    const Grid g{2, n, 1.0};
    GridFunction u(g, 1);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double x[2];
      g.coordinates(i, x);
      u.values[i] = std::cos(kTwoPi * x[0]) * std::sin(kTwoPi * x[1]);
    }
    double e = 0.0;
    CounterRng rng(4);
    for (int t = 0; t < 200; ++t) {
      const double x[2] = {rng.uniform(), rng.uniform()};
      e = std::max(e, std::abs(interpolate(u, 0, x) - std::cos(kTwoPi * x[0]) * std::sin(kTwoPi * x[1])));
    }
    return e;
  };
  const double rate = std::log2(err(32) / err(64));
  CHECK(rate > 3.5);
}

TEST_CASE("grid function binary round trip") {
  const Grid g{3, 4, 1.5};
  GridFunction u(g, 2);
  CounterRng rng(1);
  for (auto& v : u.values) v = rng.uniform();
  const std::string stem = (std::filesystem::temp_directory_path() / "homolab_gf").string();
  write_grid_function(u, stem, "test");
  const GridFunction r = read_grid_function(stem);
  CHECK(r.grid == g);
  CHECK(r.components == 2);
  CHECK(r.values == u.values);
  CHECK(std::filesystem::file_size(stem + ".bin") == u.values.size() * 8);
  std::filesystem::remove(stem + ".bin");
  std::filesystem::remove(stem + ".json");
}
