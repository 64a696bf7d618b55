#include "homolab/corrector.hpp"
#include "homolab/diagnostics.hpp"
#include "homolab/forward.hpp"
#include "homolab/walk.hpp"

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

using namespace homolab;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Vec unit(int d, int k) {
  Vec e = Vec::Zero(d);
  e[k] = 1.0;
  return e;
}

InitialDatum cosine_datum(int d, double period, std::vector<int> wn, std::vector<double> phases) {
  InitialDatum f;
  f.d = d;
  f.kind = InitialDatum::Kind::cosine;
  f.period = period;
  f.wavenumbers = std::move(wn);
  f.phases = std::move(phases);
  return f;
}

double max_abs_C(const ExpansionReport& r) {
  double m = 0.0;
  for (const auto& row : r.rows) m = std::max(m, std::abs(row.C));
  return m;
}

Outcome constant_exactness() {
  FieldSpec s;
  s.model = FieldModel::constant;
  s.d = 2;
  s.value = 1.7;
  const CorrectorSet cs = compute_correctors(CoefficientField(s), Grid{2, 16, 1.0}, {});
  const double a_err = (cs.A_bar - 1.7 * Mat::Identity(2, 2)).cwiseAbs().maxCoeff();

  ExpansionConfig c;
  c.field = s;
  c.env_seeds = {0};
  c.eps = {0.25, 0.125, 0.0625};
  c.probes = {{0.25, {0.25, 0.5}}, {1.0, {0.25, 0.5}}, {1.0, {0.75, 0.25}}};
  c.datum = cosine_datum(2, 2.0, {1, 1}, {0.3, 0.1});
  c.time.dt = 1e-3;
  const double C = max_abs_C(run_expansion(c));
  return {a_err <= 1e-12 && C <= 1e-7,
          "|A_bar - cI| = " + fmt("%.2e", a_err) + " (tol 1e-12), max|C| = " + fmt("%.2e", C) + " (tol 1e-7)"};
}

Outcome laminate_oracle() {
  FieldSpec s;
  s.model = FieldModel::laminate;
  s.d = 2;
  s.L = 1.0;
  s.c_plus = 5.0;
  s.alpha_amp2 = 0.2;
  s.laminate_transverse = "isotropic";
  const CoefficientField field(s);
  const int n = 256;
  const Grid grid{2, n, 1.0};
  CorrectorOptions o;
  o.tol = 1e-12;
  const CorrectorSet cs = compute_correctors(field, grid, o);

  const auto alpha = [&](double x) {
    return s.alpha_mean - s.alpha_amp * std::cos(2 * std::numbers::pi * x) + s.alpha_amp2 * std::sin(4 * std::numbers::pi * x);
  };
  using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
  const double harmonic = 1.0 / GK::integrate([&](double x) { return 1.0 / alpha(x); }, 0.0, 1.0, 15, 1e-15);
  const double arithmetic = GK::integrate(alpha, 0.0, 1.0, 15, 1e-15);
  Mat oracle = Mat::Zero(2, 2);
  oracle(0, 0) = harmonic;
  oracle(1, 1) = arithmetic;
  const double a_err = (cs.A_bar - oracle).cwiseAbs().maxCoeff();

  // phi' = H / alpha - 1, zero mean.
  std::vector<double> phi1(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i)
    phi1[static_cast<std::size_t>(i)] =
        GK::integrate([&](double x) { return harmonic / alpha(x) - 1.0; }, 0.0, static_cast<double>(i) / n, 15, 1e-15);
  const double mean1 = pairwise_mean(phi1);
  double phi_err = 0.0;
  const GridFunction& phi = cs.phi[0];
  for (std::size_t idx = 0; idx < grid.size(); ++idx) {
    double x[2];
    grid.coordinates(idx, x);
    const auto i = static_cast<std::size_t>(std::lround(x[0] * n)) % static_cast<std::size_t>(n);
    phi_err = std::max(phi_err, std::abs(phi.values[idx] - (phi1[i] - mean1)));
  }
  return {a_err <= 1e-6 && phi_err <= 1e-6,
          "|A_bar - oracle| = " + fmt("%.2e", a_err) + ", |phi_e1 - oracle| = " + fmt("%.2e", phi_err) + " (tol 1e-6)"};
}

Outcome third_order_vanishing() {
  struct Case {
    int d;
    std::uint64_t seed;
    std::vector<int> ns;
  };
  std::vector<Case> cases;
  for (std::uint64_t s = 1; s <= 5; ++s) cases.push_back({2, s, {32, 64, 128}});
  cases.push_back({3, 6, {16, 32}});
  CorrectorOptions o;
  o.flux = true;
  o.tol = 1e-12;
  bool pass = true;
  double worst = 0.0;
  std::string detail;
  for (const auto& c : cases) {
    FieldSpec s;
    s.model = FieldModel::periodic_smooth;
    s.d = c.d;
    s.seed = c.seed;
    const CoefficientField field(s);
    std::vector<double> rel;
    for (int n : c.ns) {
      const CorrectorSet cs = compute_correctors(field, Grid{c.d, n, 1.0}, o);
      const double norm = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(Eigen::MatrixXd(cs.A_bar)).eigenvalues().cwiseAbs().maxCoeff();
      rel.push_back(cs.third.max_abs_c() / norm);
    }
    const bool ok = rel.back() <= 1e-5 && rel.back() < rel[rel.size() - 2];
    pass = pass && ok;
    worst = std::max(worst, rel.back());
    detail += " d" + std::to_string(c.d) + "/s" + std::to_string(c.seed) + ":" + fmt("%.1e", rel[rel.size() - 2]) + "->" +
              fmt("%.1e", rel.back());
  }
  return {pass, "max|c|/|A| finest " + fmt("%.2e", worst) + " (tol 1e-5);" + detail};
}

ExpansionConfig deterministic_expansion(FieldModel model, std::uint64_t seed, bool elliptic) {
  ExpansionConfig c;
  c.field.model = model;
  c.field.d = 2;
  c.field.L = 1.0;
  c.field.seed = seed;
  c.env_seeds = {seed};
  c.eps = {0.25, 0.125, 0.0625};
  c.datum = cosine_datum(2, 2.0, {1, 1}, {0.3, 0.1});
  c.elliptic = elliptic;
  if (elliptic)
    c.probes = {{0.0, {0.25, 0.5}}, {0.0, {0.75, 0.25}}};
  else
    c.probes = {{0.25, {0.25, 0.5}}, {1.0, {0.25, 0.5}}, {1.0, {0.75, 0.25}}};
  c.time.dt = 0.002;
  return c;
}

Outcome pointwise_decay() {
  bool pass = true;
  std::string detail;
  for (auto [model, seed, name] : {std::tuple{FieldModel::laminate, std::uint64_t{0}, "laminate"},
                                   std::tuple{FieldModel::periodic_smooth, std::uint64_t{3}, "smooth"}}) {
    const ExpansionReport r = run_expansion(deterministic_expansion(model, seed, false));
    for (std::size_t k = 0; k < r.probes.size(); ++k) {
      const bool ok = r.strictly_decreasing(k) && r.final_over_initial(k) <= 0.5;
      pass = pass && ok;
      detail += std::string(" ") + name + "/p" + std::to_string(k) + ":" + fmt("%.3f", r.final_over_initial(k)) +
                (r.strictly_decreasing(k) ? "" : "(not decreasing)");
    }
  }

  ExpansionConfig c;
  c.field.model = FieldModel::poisson_bump;
  c.field.d = 3;
  c.field.L = 16.0;
  for (std::uint64_t i = 0; i < 64; ++i) c.env_seeds.push_back(1000 + i);
  c.eps = {0.25, 0.125};
  c.probes = {{0.25, {0.5, 1.0, 1.5}}, {1.0, {0.5, 1.0, 1.5}}, {1.0, {1.25, 0.75, 0.25}}};
  c.datum = cosine_datum(3, 2.0, {1, 1, 0}, {0.3, 0.1, 0.0});
  c.grid.m = 4;
  c.grid.min_points = 4;
  c.time.min_points = 4;
  c.time.dt = 1.0 / 64;
  c.time.richardson = false;
  c.time.accuracy_budget = 1.0;
  c.reference = ReferenceMode::scheme;
  const ExpansionReport r = run_expansion(c);
  for (std::size_t k = 0; k < r.probes.size(); ++k) {
    const MeanSe& a = r.cell(0, k).abs_C;
    const MeanSe& b = r.cell(1, k).abs_C;
    const double sep = (a.mean - b.mean) / std::hypot(a.se, b.se);
    pass = pass && sep >= 2.0;
    detail += " random/p" + std::to_string(k) + ":" + fmt("%.2e", a.mean) + "->" + fmt("%.2e", b.mean) + " (" +
              fmt("%.1f", sep) + " SE)";
  }
  return {pass, "final/initial (tol 0.5), separation (min 2 SE):" + detail};
}

Outcome elliptic_transfer() {
  ExpansionConfig c = deterministic_expansion(FieldModel::laminate, 0, true);
  const ExpansionReport direct = run_expansion(c);
  c.laplace_path = true;
  const ExpansionReport laplace = run_expansion(c);
  double gap = 0.0;
  for (std::size_t i = 0; i < direct.rows.size(); ++i)
    gap = std::max(gap, std::abs(direct.rows[i].C - laplace.rows[i].C));
  bool decreasing = true;
  std::string detail;
  for (std::size_t k = 0; k < laplace.probes.size(); ++k) {
    decreasing = decreasing && laplace.strictly_decreasing(k) && direct.strictly_decreasing(k);
    detail += " p" + std::to_string(k) + ":" + fmt("%.3f", laplace.final_over_initial(k));
  }
  return {gap <= 1e-6 && decreasing,
          "max|C_laplace - C_direct| = " + fmt("%.2e", gap) + " (tol 1e-6), decreasing " +
              (decreasing ? "yes" : "no") + ", final/initial" + detail};
}

Outcome probabilistic_representation() {
  const double eps = 0.5, t = 1.0;
  const InitialDatum f = cosine_datum(2, 8.0, {1, 1}, {0.3, 0.1});
  std::vector<FieldSpec> specs(3);
  specs[0].model = FieldModel::constant;
  specs[0].value = 1.3;
  specs[1].model = FieldModel::laminate;
  specs[2].model = FieldModel::poisson_bump;
  specs[2].L = 4.0;
  specs[2].seed = 77;
  bool pass = true;
  std::string detail;
  const std::vector<double> x = {1.0, 0.5};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    specs[i].d = 2;
    const CoefficientField field(specs[i]);
    GridPolicy gp;
    gp.m = 16;
    const MacroSetup ms = macro_setup(field, eps, f, gp);
    ParabolicOptions po;
    po.dt = 1e-3;
    const ParabolicResult pr = solve_parabolic(field, eps, f, {t}, ms.macro, po);
    const double u = interpolate(pr.slices[0], 0, x.data());
    Vec xv(2);
    xv << x[0], x[1];
    const McEstimate mc = mc_solution(field, eps, [&](const double* y) { return f.value(y); }, t, xv, 10000,
                                      stream_key(6, i), 1e-3);
    const double z = (mc.estimate - u) / mc.se;
    pass = pass && std::abs(z) <= 3.0;
    detail += " " + to_string(specs[i].model) + ":" + fmt("%.4f", mc.estimate) + " vs " + fmt("%.4f", u) + " (" +
              fmt("%+.2f", z) + " SE)";
  }
  return {pass, "MC vs forward solve within 3 SE:" + detail};
}

Outcome martingale_decomposition() {
  FieldSpec s;
  s.model = FieldModel::laminate;
  s.d = 2;
  const CoefficientField field(s);
  CorrectorOptions o;
  o.tol = 1e-12;
  const CorrectorSet cs = compute_correctors(field, Grid{2, 128, 1.0}, o);
  const Vec xi = unit(2, 0);
  const double target = xi.dot(cs.A_bar * xi);
  MartingaleOptions mo;
  mo.t = 50.0;
  double telescoping = 0.0;
  std::vector<MeanSe> rate;
  for (int level = 0; level < 2; ++level) {
    mo.dt = 1e-3 / (1 << level);
    const auto ms = sample_martingales(field, cs, xi, mo, 2000, stream_key(7, static_cast<std::uint64_t>(level)));
    std::vector<double> v;
    for (const auto& m : ms) {
      v.push_back(m.QV / mo.t);
      telescoping = std::max(telescoping, std::abs(m.residual));
    }
    rate.push_back(mean_se(v));
  }
  const double extrap = 2.0 * rate[1].mean - rate[0].mean;
  const double se = std::sqrt(4.0 * rate[1].se * rate[1].se + rate[0].se * rate[0].se);
  const double z = (extrap - target) / se;

  FieldSpec r;
  r.model = FieldModel::poisson_bump;
  r.d = 2;
  r.L = 4.0;
  std::vector<CoefficientField> fields;
  std::vector<GridFunction> psi;
  for (std::uint64_t e = 0; e < 64; ++e) {
    r.seed = 7000 + e;
    fields.emplace_back(r);
    const Grid g{2, 32, 4.0};
    DivFormOperator op = assemble(fields.back(), g, 0.0);
    CorrectorSet set;
    for (int k = 0; k < 2; ++k) set.phi.push_back(solve_corrector(op, fields.back(), unit(2, k), DriftMode::consistent, 1e-10));
    set.A_bar = homogenized_matrix(op, set.phi);
    set.psi = energy_density(op, set.phi, set.A_bar);
    psi.push_back(set.psi_direction(xi));
  }
  const TimeIntegralBound l = time_integral_check(fields, psi, 2.0, 64, 1e-2, stream_key(7, 9));
  const bool pass = telescoping <= 1e-12 && std::abs(z) <= 3.0 && l.holds();
  return {pass, "telescoping " + fmt("%.1e", telescoping) + " (tol 1e-12); <M>_t/t " + fmt("%.5f", extrap) + " vs " +
                    fmt("%.5f", target) + " (" + fmt("%+.2f", z) + " SE); time-integral bound lhs " +
                    fmt("%.4e", l.lhs.mean) + " rhs " + fmt("%.4e", l.rhs.mean) + " gap/SE " +
                    fmt("%+.2f", l.gap.mean / l.gap.se)};
}

Outcome decay_exponents() {
  FieldSpec s;
  s.model = FieldModel::poisson_bump;
  s.d = 3;
  s.L = 16.0;
  const Vec xi = unit(3, 0);
  const Grid g{3, 64, 16.0};
  std::vector<CoefficientField> fields;
  std::vector<GridFunction> phis;
  for (std::uint64_t e = 0; e < 256; ++e) {
    s.seed = 5000 + e;
    fields.emplace_back(s);
    const DivFormOperator op = assemble(fields.back(), g, 0.0);
    phis.push_back(solve_corrector(op, fields.back(), xi, DriftMode::consistent, 1e-8));
  }
  std::vector<int> lags;
  for (int l = 0; l <= 16; ++l) lags.push_back(l);
  DecayCurve dc = decorrelation_curve(phis, lags);
  fit_curve(dc, 1.0, 4.0, 81);
  EnvDecayOptions o;
  o.times = {0.0, 0.25, 0.5, 1.0, 2.0, 4.0};
  o.n_paths = 64;
  o.starts_per_env = 8;
  o.dt = 1e-2;
  DecayCurve env = env_decay(fields, phis, o, 82);
  fit_curve(env, 0.5, 4.0, 83);
  const bool pass = dc.slope <= -0.6 && env.slope >= -1.2 && env.slope <= -0.3;
  return {pass, "decorrelation slope " + fmt("%.3f", dc.slope) + " [" + fmt("%.3f", dc.slope_lo) + ", " +
                    fmt("%.3f", dc.slope_hi) + "] (need <= -0.6); environment decay slope " + fmt("%.3f", env.slope) +
                    " [" + fmt("%.3f", env.slope_lo) + ", " + fmt("%.3f", env.slope_hi) + "] (band [-1.2, -0.3])"};
}

Outcome resampling() {
  CloudLaw law;
  law.d = 2;
  law.L = 4.0;
  law.intensity = 1.5;
  law.cell_size = 1.0;
  law.marks = MarkLaw::parse("uniform:0.5:1.5");
  const int cell[2] = {1, 2};
  bool pass = true;
  std::string detail;
  std::uint64_t i = 0;
  for (const auto& name : cloud_functional_names()) {
    const ResamplingReport r = resampling_identity(law, named_cloud_functional(name, law), cell, 20000, stream_key(9, i++), 16);
    bool ok = r.holds(3.0);
    detail += " " + name + ": " + fmt("%.4e", r.lhs.mean) + " vs " + fmt("%.4e", r.rhs.mean) + " (" +
              fmt("%+.2f", r.gap.mean / r.gap.se) + " SE)";
    if (name == "count") {
      const double v = count_resampling_value(law);
      const double zl = (r.lhs.mean - v) / r.lhs.se, zr = (r.rhs.mean - v) / r.rhs.se;
      ok = ok && std::abs(zl) <= 3.0 && std::abs(zr) <= 3.0;
      detail += " analytic " + fmt("%.4f", v) + " (" + fmt("%+.2f", zl) + ", " + fmt("%+.2f", zr) + " SE)";
    }
    pass = pass && ok;
  }
  return {pass, "equality within 3 SE:" + detail};
}

Outcome clt_bounds() {
  std::vector<FieldSpec> specs(2);
  specs[0].model = FieldModel::laminate;
  specs[1].model = FieldModel::poisson_bump;
  specs[1].L = 4.0;
  specs[1].seed = 31;
  bool pass = true;
  std::string detail;
  for (auto& s : specs) {
    s.d = 2;
    const CoefficientField field(s);
    CorrectorOptions o;
    o.tol = 1e-12;
    const CorrectorSet cs = compute_correctors(field, Grid{2, static_cast<int>(32 * s.L), s.L}, o);
    const Vec xi = unit(2, 0);
    MartingaleOptions mo;
    mo.eps = 0.5;
    mo.t = 1.0;
    mo.dt = 1e-3;
    const auto ms = sample_martingales(field, cs, xi, mo, 10000, stream_key(10, s.seed, static_cast<std::uint64_t>(s.model)));
    std::vector<CltSample> samples;
    const double target = xi.dot(cs.A_bar * xi) * mo.t;
    for (const auto& m : ms) samples.push_back({m.M, m.QV, m.M_tau, target});
    int ok = 0;
    for (const auto& row : clt_distance(samples, clt_test_functions())) {
      ok += row.holds2 && row.holds3;
      pass = pass && row.holds2 && row.holds3;
    }
    detail += " " + to_string(s.model) + ": " + std::to_string(ok) + "/5";
  }
  return {pass, "both inequalities hold for:" + detail};
}

Outcome convolution_bound() {
  const std::vector<double> xs = {10, 15, 20, 25, 30, 40, 50};
  bool pass = true;
  std::string detail;
  for (auto [d, p] : std::vector<std::pair<int, double>>{{3, 2}, {3, 3}, {4, 3}, {4, 4}}) {
    const double spread = convolution_power_sum(d, p, xs).spread();
    pass = pass && spread < 3.0;
    detail += " (" + std::to_string(d) + "," + fmt("%g", p) + "):" + fmt("%.3f", spread);
  }
  return {pass, "max/min ratio (need < 3):" + detail};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria = {
      {1, "constant-coefficient exactness", 60, constant_exactness},
      {2, "laminate oracle", 120, laminate_oracle},
      {3, "third-order constants vanish", 600, third_order_vanishing},
      {4, "pointwise expansion decay", 3600, pointwise_decay},
      {5, "elliptic transfer", 1800, elliptic_transfer},
      {6, "probabilistic representation", 600, probabilistic_representation},
      {7, "martingale decomposition", 900, martingale_decomposition},
      {8, "decay exponents", 7200, decay_exponents},
      {9, "resampling identity", 600, resampling},
      {10, "quantitative CLT bounds", 1200, clt_bounds},
      {11, "lattice convolution bound", 300, convolution_bound},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));
  std::FILE* report = std::fopen("acceptance_report.txt", "w");
  int failed = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = out.pass && in_time;
    failed += !pass;
    char head[160];
    std::snprintf(head, sizeof head, "criterion %2d %s: %s; %.1f s (budget %.0f s)%s; ", c.id, pass ? "PASS" : "FAIL",
                  c.name, secs, c.budget_seconds, in_time ? "" : " over budget");
    const std::string line = head + out.detail + "\n";
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (report) {
      std::fputs(line.c_str(), report);
      std::fflush(report);
    }
  }
  if (report) std::fclose(report);
  return failed == 0 ? 0 : 1;
}
