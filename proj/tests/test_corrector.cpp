#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "homolab/corrector.hpp"

#include <cmath>
#include <filesystem>

using namespace homolab;

namespace {

Vec unit(int d, int k) {
  Vec e = Vec::Zero(d);
  e[k] = 1.0;
  return e;
}

CorrectorOptions tight(double lambda = 0.0, bool flux = false) {
  CorrectorOptions o;
  o.lambda = lambda;
  o.tol = 1e-12;
  o.flux = flux;
  return o;
}

}  // namespace

TEST_CASE("constant coefficients: zero corrector, A_bar = c I, no third-order terms") {
  FieldSpec s;
  s.d = 3;
  s.value = 1.9;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{3, 8, 1.0}, tight(0.0, true));
  for (const auto& p : cs.phi) CHECK(p.max_abs() == 0.0);
  CHECK((cs.A_bar - 1.9 * Mat::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(cs.third.max_abs_c() < 1e-14);
}

TEST_CASE("equal-volume two-phase laminate gives diag(1.6, 2.5)") {
  FieldSpec s;
  s.model = FieldModel::laminate;
  s.laminate_profile = "two-phase";
  s.laminate_transverse = "isotropic";
  s.v_lo = 1.0;
  s.v_hi = 4.0;
  for (int n : {8, 16, 64}) {
    const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, n, 1.0}, tight());
    CHECK(cs.A_bar(0, 0) == doctest::Approx(2.0 / (1.0 + 0.25)).epsilon(1e-12));
    CHECK(cs.A_bar(1, 1) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(std::abs(cs.A_bar(0, 1)) < 1e-13);
  }
}

TEST_CASE("cosine laminate: closed-form harmonic mean") {
  FieldSpec s;
  s.model = FieldModel::laminate;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, 64, 1.0}, tight());
  CHECK(cs.A_bar(0, 0) == doctest::Approx(std::sqrt(2.5 * 2.5 - 1.5 * 1.5)).epsilon(1e-10));
  CHECK(cs.A_bar(1, 1) == doctest::Approx(s.beta).epsilon(1e-12));
  // phi_{e_1} depends on x_1 only.
  const GridFunction& p = cs.phi[0];
  for (int i = 0; i < 64; ++i)
    for (int j = 1; j < 64; ++j) CHECK(p.values[static_cast<std::size_t>(i * 64 + j)] == doctest::Approx(p.values[static_cast<std::size_t>(i * 64)]).scale(1.0).epsilon(1e-10));
  CHECK(cs.phi[1].max_abs() < 1e-12);
}

TEST_CASE("energy and flux forms of A_bar agree; A_bar symmetric and bracketed") {
  std::vector<FieldSpec> specs(3);
  specs[0].model = FieldModel::periodic_smooth;
  specs[0].seed = 8;
  specs[1].model = FieldModel::poisson_bump;
  specs[1].L = 4.0;
  specs[1].seed = 3;
  specs[2].model = FieldModel::mollified_checkerboard;
  specs[2].L = 4.0;
  specs[2].seed = 4;
  for (auto& s : specs) {
    const CoefficientField f(s);
    const Grid g{2, static_cast<int>(16 * s.L), s.L};
    const DivFormOperator op = assemble(f, g, 0.0);
    std::vector<GridFunction> phi;
    for (int k = 0; k < 2; ++k) phi.push_back(solve_corrector(op, f, unit(2, k), DriftMode::consistent, 1e-12));
    const Mat A = homogenized_matrix(op, phi);
    const Mat F = flux_matrix(op, phi);
    INFO(to_string(s.model));
    CHECK((A - F).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(A(0, 1) - A(1, 0)) < 1e-12);
    Mat voigt = Mat::Zero(2, 2), reuss = Mat::Zero(2, 2);
    for (int k = 0; k < 2; ++k) {
      double sum = 0.0, inv = 0.0;
      for (double a : op.edges().a[static_cast<std::size_t>(k)]) {
        sum += a;
        inv += 1.0 / a;
      }
      const double N = static_cast<double>(g.size());
      voigt(k, k) = sum / N;
      reuss(k, k) = N / inv;
    }
    const Eigen::VectorXd lo = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Eigen::MatrixXd(A - reuss)).eigenvalues();
    const Eigen::VectorXd hi = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Eigen::MatrixXd(voigt - A)).eigenvalues();
    CHECK(lo.minCoeff() >= -1e-8);
    CHECK(hi.minCoeff() >= -1e-8);
    for (const auto& p : phi) CHECK(std::abs(p.mean()) < 1e-13);
  }
}

TEST_CASE("correctors are linear in the direction") {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.seed = 5;
  const CoefficientField f(s);
  const CorrectorSet cs = compute_correctors(f, Grid{2, 32, 1.0}, tight());
  Vec xi(2);
  xi << 0.6, -1.3;
  const GridFunction direct = solve_corrector(assemble(f, Grid{2, 32, 1.0}, 0.0), f, xi, DriftMode::consistent, 1e-12);
  const GridFunction lin = cs.phi_direction(xi);
  for (std::size_t i = 0; i < direct.values.size(); ++i) CHECK(lin.values[i] == doctest::Approx(direct.values[i]).scale(1.0).epsilon(1e-9));
}

TEST_CASE("regularized corrector converges as lambda -> 0") {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.seed = 6;
  const CoefficientField f(s);
  const Grid g{2, 32, 1.0};
  const GridFunction p0 = solve_corrector(f, g, 0.0, 0, 1e-12);
  double prev = 1e300;
  for (double lambda : {1.0, 0.1, 0.01}) {
    const GridFunction pl = solve_corrector(f, g, lambda, 0, 1e-12);
    double err = 0.0;
    for (std::size_t i = 0; i < pl.values.size(); ++i) err = std::max(err, std::abs(pl.values[i] - p0.values[i]));
    CHECK(err < prev);
    prev = err;
  }
  CHECK(prev < 1e-2 * p0.max_abs());
}

TEST_CASE("sampled drift converges to the consistent drift under refinement") {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.seed = 2;
  const CoefficientField f(s);
  CorrectorOptions co;
  co.tol = 1e-12;
  double prev = 1e300;
  for (int n : {16, 32, 64}) {
    co.drift = DriftMode::consistent;
    const Mat a = compute_correctors(f, Grid{2, n, 1.0}, co).A_bar;
    co.drift = DriftMode::analytic;
    const Mat b = compute_correctors(f, Grid{2, n, 1.0}, co).A_bar;
    const double gap = (a - b).cwiseAbs().maxCoeff();
    CHECK(gap < prev);
    prev = gap;
  }
  CHECK(prev < 1e-3);
}

TEST_CASE("third-order constants: staggered quadrature equals minus the integration by parts term") {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.seed = 7;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, 32, 1.0}, tight(0.5, true));
  REQUIRE(cs.third.c_staggered.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(cs.third.c_staggered[i] == doctest::Approx(-cs.third.ibp[i]).scale(1e-3).epsilon(1e-8));
  CHECK(cs.third.max_abs_ibp() > 1e-6);
}

TEST_CASE("third-order constants shrink under refinement at lambda = 0") {
  FieldSpec s;
  s.model = FieldModel::periodic_smooth;
  s.seed = 9;
  const CoefficientField f(s);
  double prev = 1e300;
  for (int n : {16, 32, 64}) {
    const CorrectorSet cs = compute_correctors(f, Grid{2, n, 1.0}, tight(0.0, true));
    CHECK(cs.third.max_abs_c() < prev);
    prev = cs.third.max_abs_c();
    CHECK(cs.third.max_abs_ibp() == 0.0);
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("energy densities are centered and symmetric") {
  FieldSpec s;
  s.model = FieldModel::poisson_bump;
  s.L = 4.0;
  s.seed = 10;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, 32, 4.0}, tight(0.0, true));
  for (const auto& p : cs.psi) CHECK(std::abs(p.mean()) < 1e-10);
  for (std::size_t i = 0; i < cs.psi[1].values.size(); ++i) CHECK(cs.psi[1].values[i] == doctest::Approx(cs.psi[2].values[i]).scale(1.0));
  Vec xi(2);
  xi << 1.0, 2.0;
  const GridFunction px = cs.psi_direction(xi);
  CHECK(px.values[5] == doctest::Approx(cs.psi[0].values[5] + 4 * cs.psi[1].values[5] + 4 * cs.psi[3].values[5]));
}

TEST_CASE("directional combinations live on the grid of their components") {
  FieldSpec s;
  s.model = FieldModel::poisson_bump;
  s.L = 4.0;
  s.seed = 11;
  const CorrectorSet full = compute_correctors(CoefficientField(s), Grid{2, 16, 4.0}, tight(0.0, true));
  CorrectorSet bare;
  bare.phi = full.phi;
  bare.psi = full.psi;
  Vec xi(2);
  xi << 0.3, -1.1;
  CHECK(bare.phi_direction(xi).grid == full.grid);
  CHECK(bare.psi_direction(xi).grid == full.grid);
  CHECK(bare.psi_direction(xi).values == full.psi_direction(xi).values);
  CHECK_THROWS_AS(CorrectorSet{}.phi_direction(xi), InvalidParameter);
}

TEST_CASE("corrector set serialization") {
  FieldSpec s;
  s.model = FieldModel::laminate;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, 8, 1.0}, tight(0.0, true));
  const auto dir = std::filesystem::temp_directory_path() / "homolab_cs";
  std::filesystem::create_directories(dir);
  write_corrector_set(cs, dir.string());
  CHECK(std::filesystem::exists(dir / "summary.json"));
  const GridFunction back = read_grid_function((dir / "phi_0").string());
  CHECK(back.values == cs.phi[0].values);
  std::filesystem::remove_all(dir);
}
