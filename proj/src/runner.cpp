#include "homolab/runner.hpp"

#include "homolab/corrector.hpp"
#include "homolab/diagnostics.hpp"
#include "homolab/forward.hpp"
#include "homolab/rng.hpp"
#include "homolab/walk.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#ifndef HOMOLAB_VERSION
#define HOMOLAB_VERSION "0.0.0"
#endif

namespace homolab {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& experiment_kinds() {
  static const std::vector<std::string> kinds = {"homogenize", "expand", "elliptic", "decay",
                                                 "decorr", "clt", "conv-lemma", "periodic-suite"};
  return kinds;
}

namespace {

std::string join(const std::vector<std::string>& v, const std::string& sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? sep : "") + v[i];
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

bool parse_number(const std::string& text, double& out) {
  const std::string s = trim(text);
  if (s.empty()) return false;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || !std::isfinite(v)) return false;
  out = v;
  return true;
}

std::vector<std::string> split_any(const std::string& s, const std::string& seps) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (seps.find(c) != std::string::npos) {
      if (!trim(cur).empty()) out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty()) out.push_back(trim(cur));
  return out;
}

/// Typed access to a Config that records every problem and every key it touched.
class Reader {
 public:
  explicit Reader(const Config& cfg) : cfg_(cfg) {}

  std::vector<std::string> problems;

  void bad(const std::string& sec, const std::string& key, const std::string& why) {
    problems.push_back(sec + "." + key + ": " + why);
  }
  const std::string* raw(const std::string& sec, const std::string& key) {
    used_[sec].insert(key);
    return cfg_.get(sec, key);
  }
  bool has(const std::string& sec, const std::string& key) const { return cfg_.has(sec, key); }
  bool has_section(const std::string& sec) const { return cfg_.has_section(sec); }
  void use_section(const std::string& sec) {
    for (const auto& [k, v] : cfg_.section(sec)) used_[sec].insert(k);
  }
  std::map<std::string, std::string> section(const std::string& sec) {
    use_section(sec);
    return cfg_.section(sec);
  }

  double number(const std::string& sec, const std::string& key, double def, double lo = -HUGE_VAL,
                bool lo_open = false) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    double v = 0.0;
    if (!parse_number(*r, v)) {
      bad(sec, key, "not a finite number: '" + *r + "'");
      return def;
    }
    if (lo_open ? !(v > lo) : !(v >= lo)) {
      std::ostringstream os;
      os << "must be " << (lo_open ? "> " : ">= ") << lo;
      bad(sec, key, os.str());
      return def;
    }
    return v;
  }
  double positive(const std::string& sec, const std::string& key, double def) { return number(sec, key, def, 0.0, true); }

  long integer(const std::string& sec, const std::string& key, long def, long lo) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    double v = 0.0;
    if (!parse_number(*r, v) || v != std::floor(v) || std::abs(v) > 1e15) {
      bad(sec, key, "not an integer: '" + *r + "'");
      return def;
    }
    if (v < static_cast<double>(lo)) {
      bad(sec, key, "must be >= " + std::to_string(lo));
      return def;
    }
    return static_cast<long>(v);
  }

  std::optional<std::uint64_t> u64(const std::string& sec, const std::string& key) {
    const std::string* r = raw(sec, key);
    if (!r) return std::nullopt;
    const std::string s = trim(*r);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      bad(sec, key, "not an unsigned integer: '" + *r + "'");
      return std::nullopt;
    }
    try {
      return std::stoull(s);
    } catch (...) {
      bad(sec, key, "out of range");
      return std::nullopt;
    }
  }

  bool flag(const std::string& sec, const std::string& key, bool def) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    const std::string s = trim(*r);
    if (s == "true" || s == "yes" || s == "1") return true;
    if (s == "false" || s == "no" || s == "0") return false;
    bad(sec, key, "expected true or false");
    return def;
  }

  std::string choice(const std::string& sec, const std::string& key, const std::string& def,
                     const std::vector<std::string>& allowed) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    const std::string s = trim(*r);
    if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
      bad(sec, key, "'" + s + "' is not one of: " + join(allowed, ", "));
      return def;
    }
    return s;
  }

  std::vector<double> numbers(const std::string& sec, const std::string& key, std::vector<double> def) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    std::vector<double> out;
    for (const auto& tok : split_any(*r, " ,\t")) {
      double v = 0.0;
      if (!parse_number(tok, v)) {
        bad(sec, key, "not a list of numbers: '" + *r + "'");
        return def;
      }
      out.push_back(v);
    }
    if (out.empty()) bad(sec, key, "empty list");
    return out;
  }

  std::vector<std::string> words(const std::string& sec, const std::string& key, std::vector<std::string> def) {
    const std::string* r = raw(sec, key);
    if (!r) return def;
    auto out = split_any(*r, " ,\t");
    if (out.empty()) bad(sec, key, "empty list");
    return out;
  }

  void require_section(const std::string& sec) {
    if (!cfg_.has_section(sec)) problems.push_back("[" + sec + "]: missing section");
  }

  /// Flags sections and keys that were never read.
  void finish() {
    for (const auto& sec : cfg_.section_names()) {
      auto u = used_.find(sec);
      if (u == used_.end()) {
        problems.push_back("[" + sec + "]: section not used by this experiment kind");
        continue;
      }
      for (const auto& [k, v] : cfg_.section(sec))
        if (!u->second.count(k)) bad(sec, k, "unknown key");
    }
  }

 private:
  const Config& cfg_;
  std::map<std::string, std::set<std::string>> used_;
};

/// Run f(i) for i < n over the worker pool; the first exception by index is rethrown.
template <class F>
void parallel_for(std::size_t n, F f) {
  std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(n); ++ii) {
    try {
      f(static_cast<std::size_t>(ii));
    } catch (...) {
      errors[static_cast<std::size_t>(ii)] = std::current_exception();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

json matrix_json(const Mat& A) {
  json out = json::array();
  for (int r = 0; r < A.rows(); ++r) {
    json row = json::array();
    for (int c = 0; c < A.cols(); ++c) row.push_back(A(r, c));
    out.push_back(row);
  }
  return out;
}

json mean_se_json(const MeanSe& m) { return {{"mean", m.mean}, {"se", m.se}}; }

double spectral_norm(const Mat& A) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Eigen::MatrixXd(0.5 * (A + A.transpose())));
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

/// Settings shared by every kind.
struct Common {
  std::string kind;
  std::uint64_t seed = 0;
  std::uint64_t offset = 0;
  std::size_t envs = 1;
  std::string out;
  FieldSpec field;
  std::vector<std::uint64_t> env_seeds;

  CoefficientField make_field(std::size_t env) const {
    FieldSpec s = field;
    s.seed = env_seeds[env];
    return CoefficientField(s);
  }
};

void read_common(Reader& r, Common& c, const std::string& kind, std::uint64_t offset, bool needs_field) {
  c.kind = kind;
  c.offset = offset;
  r.require_section("experiment");
  if (auto s = r.u64("experiment", "seed")) {
    c.seed = *s + offset;
  } else if (!r.has("experiment", "seed")) {
    r.bad("experiment", "seed", "missing (seeds must be explicit)");
  }
  if (const std::string* k = r.raw("experiment", "kind"); k && trim(*k) != kind)
    r.bad("experiment", "kind", "'" + trim(*k) + "' does not match the requested kind '" + kind + "'");
  if (const std::string* o = r.raw("experiment", "out")) c.out = trim(*o);
  c.envs = static_cast<std::size_t>(r.integer("experiment", "envs", 1, 1));
  if (!needs_field) return;
  r.require_section("field");
  std::vector<std::string> fp;
  c.field = FieldSpec::from_kv(r.section("field"), fp);
  for (auto& p : fp) r.problems.push_back(p);
  for (std::size_t i = 0; i < c.envs; ++i) c.env_seeds.push_back(c.field.seed + offset + i);
}

/// [grid] n or m (points per unit length) for cell problems on [0, L)^d.
Grid read_cell_grid(Reader& r, const Common& c) {
  Grid g{c.field.d, 0, c.field.L};
  const bool has_n = r.has("grid", "n"), has_m = r.has("grid", "m");
  if (has_n && has_m) r.bad("grid", "n", "give either grid.n or grid.m, not both");
  if (has_n) {
    g.n = static_cast<int>(r.integer("grid", "n", 0, 4));
  } else if (has_m) {
    const double m = r.positive("grid", "m", 8.0);
    const double n = m * c.field.L;
    if (std::abs(n - std::round(n)) > 1e-9 * n) r.bad("grid", "m", "m * field.L must be an integer");
    g.n = static_cast<int>(std::lround(n));
  } else {
    r.bad("grid", "n", "missing (give grid.n or grid.m)");
    return g;
  }
  try {
    g.validate();
  } catch (const InvalidParameter& e) {
    r.bad("grid", has_n ? "n" : "m", e.what());
  }
  return g;
}

CorrectorOptions read_corrector(Reader& r) {
  CorrectorOptions o;
  o.lambda = r.number("corrector", "lambda", 0.0, 0.0);
  o.tol = r.positive("corrector", "tol", 1e-10);
  o.edge_rule = r.choice("corrector", "edge_rule", "harmonic", {"harmonic", "midpoint"}) == "midpoint"
                    ? EdgeRule::midpoint
                    : EdgeRule::harmonic;
  o.drift = r.choice("corrector", "drift", "consistent", {"consistent", "analytic"}) == "analytic"
                ? DriftMode::analytic
                : DriftMode::consistent;
  o.flux = r.flag("corrector", "flux", false);
  return o;
}

Vec read_direction(Reader& r, const std::string& sec, int d) {
  Vec xi = Vec::Zero(d);
  xi[0] = 1.0;
  const auto v = r.numbers(sec, "xi", {});
  if (v.empty()) return xi;
  if (static_cast<int>(v.size()) != d) {
    r.bad(sec, "xi", "needs field.d entries");
    return xi;
  }
  for (int k = 0; k < d; ++k) xi[k] = v[static_cast<std::size_t>(k)];
  if (xi.norm() == 0.0) r.bad(sec, "xi", "must be nonzero");
  return xi;
}

/// "t x1 .. xd; t x1 .. xd" (with_time) or "x1 .. xd; ...".
std::vector<Probe> read_probes(Reader& r, const std::string& sec, int d, bool with_time) {
  std::vector<Probe> out;
  const std::string* s = r.raw(sec, "probes");
  if (!s) {
    r.bad(sec, "probes", "missing");
    return out;
  }
  const std::size_t want = static_cast<std::size_t>(d) + (with_time ? 1 : 0);
  for (const auto& item : split_any(*s, ";")) {
    std::vector<double> v;
    for (const auto& tok : split_any(item, " ,\t")) {
      double x = 0.0;
      if (!parse_number(tok, x)) {
        r.bad(sec, "probes", "not a number: '" + tok + "'");
        return {};
      }
      v.push_back(x);
    }
    if (v.size() != want) {
      r.bad(sec, "probes", "each probe needs " + std::to_string(want) + " numbers" +
                               (with_time ? " (t then x)" : ""));
      return {};
    }
    Probe p;
    p.t = with_time ? v[0] : 0.0;
    p.x.assign(v.begin() + (with_time ? 1 : 0), v.end());
    if (with_time && !(p.t > 0.0)) r.bad(sec, "probes", "probe times must be positive");
    out.push_back(p);
  }
  if (out.empty()) r.bad(sec, "probes", "empty list");
  return out;
}

/// Scalar functional of the environment: phi_xi or the centered energy density psi_xi.
GridFunction environment_functional(const CoefficientField& field, const Grid& grid, const CorrectorOptions& co,
                                    const std::string& which, const Vec& xi) {
  DivFormOperator op = assemble(field, grid, co.lambda, co.edge_rule);
  if (which == "phi") return solve_corrector(op, field, xi, co.drift, co.tol);
  CorrectorSet s;
  s.grid = grid;
  for (int k = 0; k < grid.d; ++k) {
    Vec e = Vec::Zero(grid.d);
    e[k] = 1.0;
    s.phi.push_back(solve_corrector(op, field, e, co.drift, co.tol));
  }
  s.A_bar = homogenized_matrix(op, s.phi);
  s.psi = energy_density(op, s.phi, s.A_bar);
  return s.psi_direction(xi);
}

/// Output directory, artifact list and the pieces of the summary shared by every kind.
class Output {
 public:
  Output(std::string dir, std::string hash) : dir_(std::move(dir)), hash_(std::move(hash)) {
    fs::create_directories(dir_);
  }

  const std::string& dir() const { return dir_; }
  const std::string& hash() const { return hash_; }
  std::vector<std::string> artifacts;

  /// CSV with a trailing config_hash column.
  void csv(const std::string& name, const std::vector<std::string>& header,
           const std::vector<std::vector<std::string>>& rows) {
    std::string text = join(header, ",") + ",config_hash\n";
    for (const auto& row : rows) text += join(row, ",") + "," + hash_ + "\n";
    publish(name, text);
  }

  /// Let a library writer produce the file, then add the config_hash column.
  template <class W>
  void csv_from(const std::string& name, W writer) {
    const std::string scratch = dir_ + "/" + name + ".part";
    writer(scratch);
    std::ifstream in(scratch);
    std::string line, text;
    bool header = true;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      text += line + "," + (header ? std::string("config_hash") : hash_) + "\n";
      header = false;
    }
    in.close();
    fs::remove(scratch);
    publish(name, text);
  }

  void json_file(const std::string& name, const json& j) { publish(name, j.dump(2) + "\n"); }

  /// Directory produced by writer, moved into place as a whole.
  template <class W>
  void directory(const std::string& name, W writer) {
    const std::string tmp = dir_ + "/" + name + ".tmp";
    fs::remove_all(tmp);
    fs::create_directories(tmp);
    writer(tmp);
    fs::remove_all(dir_ + "/" + name);
    fs::rename(tmp, dir_ + "/" + name);
    artifacts.push_back(name + "/");
  }

 private:
  void publish(const std::string& name, const std::string& text) {
    write_atomic(dir_ + "/" + name, text);
    artifacts.push_back(name);
  }

  std::string dir_;
  std::string hash_;
};

std::string s17(double v) { return fmt17(v); }
std::string su(std::uint64_t v) { return std::to_string(v); }

// ---------------------------------------------------------------------------------------------------------------
// homogenize

struct HomogenizePlan {
  Common c;
  Grid grid;
  CorrectorOptions co;
  bool write_fields = false;
};

HomogenizePlan parse_homogenize(Reader& r, const Common& c) {
  HomogenizePlan p{c, read_cell_grid(r, c), read_corrector(r), false};
  p.write_fields = r.flag("homogenize", "write_fields", false);
  return p;
}

json run_homogenize(const HomogenizePlan& p, Output& out) {
  const std::size_t E = p.c.envs;
  std::vector<CorrectorSet> sets(E);
  parallel_for(E, [&](std::size_t e) { sets[e] = compute_correctors(p.c.make_field(e), p.grid, p.co); });
  const int d = p.grid.d;
  std::vector<std::vector<std::string>> rows, third;
  json envs = json::array();
  Mat mean = Mat::Zero(d, d);
  for (std::size_t e = 0; e < E; ++e) {
    const CorrectorSet& s = sets[e];
    mean += s.A_bar / static_cast<double>(E);
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j)
        rows.push_back({su(e), su(p.c.env_seeds[e]), std::to_string(i), std::to_string(j), s17(s.A_bar(i, j))});
    json je = {{"env", e}, {"seed", p.c.env_seeds[e]}, {"A_bar", matrix_json(s.A_bar)}, {"residuals", s.residuals}};
    if (p.co.flux) {
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j)
          for (int k = 0; k < d; ++k)
            third.push_back({su(e), su(p.c.env_seeds[e]), std::to_string(i), std::to_string(j), std::to_string(k),
                             s17(s.third.at(s.third.c, i, j, k)), s17(s.third.at(s.third.c_staggered, i, j, k)),
                             s17(s.third.at(s.third.ibp, i, j, k))});
      je["max_abs_c"] = s.third.max_abs_c();
      je["max_abs_c_staggered"] = s.third.max_abs_staggered();
      je["max_abs_ibp"] = s.third.max_abs_ibp();
    }
    envs.push_back(je);
    if (p.write_fields) out.directory("env_" + std::to_string(e), [&](const std::string& dir) { write_corrector_set(s, dir); });
  }
  out.csv("homogenized.csv", {"env", "seed", "i", "j", "A_bar"}, rows);
  if (p.co.flux) out.csv("third_order.csv", {"env", "seed", "i", "j", "k", "c", "c_staggered", "ibp"}, third);
  return {{"grid", {{"d", d}, {"n", p.grid.n}, {"L", p.grid.L}}}, {"A_bar_mean", matrix_json(mean)}, {"envs", envs}};
}

// ---------------------------------------------------------------------------------------------------------------
// periodic-suite

struct SuitePlan {
  Common c;
  std::vector<int> ns;
  CorrectorOptions co;
};

SuitePlan parse_suite(Reader& r, const Common& c) {
  SuitePlan p{c, {}, read_corrector(r)};
  p.co.flux = true;
  for (double v : r.numbers("grid", "ns", {})) {
    Grid g{c.field.d, static_cast<int>(v), c.field.L};
    if (v != std::floor(v)) {
      r.bad("grid", "ns", "grid sizes must be integers");
      break;
    }
    try {
      g.validate();
    } catch (const InvalidParameter& e) {
      r.bad("grid", "ns", e.what());
      break;
    }
    if (!p.ns.empty() && g.n <= p.ns.back()) {
      r.bad("grid", "ns", "grid sizes must increase");
      break;
    }
    p.ns.push_back(g.n);
  }
  if (!r.has("grid", "ns")) r.bad("grid", "ns", "missing (list of grid sizes)");
  if (c.field.model == FieldModel::poisson_bump || c.field.model == FieldModel::mollified_checkerboard)
    r.bad("field", "model", "the periodic suite needs a deterministic periodic field");
  return p;
}

json run_suite(const SuitePlan& p, Output& out) {
  const std::size_t E = p.c.envs, G = p.ns.size();
  std::vector<CorrectorSet> sets(E * G);
  parallel_for(E * G, [&](std::size_t u) {
    const Grid g{p.c.field.d, p.ns[u % G], p.c.field.L};
    sets[u] = compute_correctors(p.c.make_field(u / G), g, p.co);
  });
  const int d = p.c.field.d;
  std::vector<std::string> header = {"env", "seed", "n", "h"};
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) header.push_back("A_bar_" + std::to_string(i) + std::to_string(j));
  for (const char* h : {"norm_A_bar", "max_abs_c", "max_abs_c_staggered", "max_abs_ibp", "relative_c"}) header.push_back(h);
  std::vector<std::vector<std::string>> rows;
  json envs = json::array();
  for (std::size_t e = 0; e < E; ++e) {
    std::vector<double> rel;
    for (std::size_t k = 0; k < G; ++k) {
      const CorrectorSet& s = sets[e * G + k];
      const double nA = spectral_norm(s.A_bar);
      rel.push_back(s.third.max_abs_c() / nA);
      std::vector<std::string> row = {su(e), su(p.c.env_seeds[e]), std::to_string(p.ns[k]), s17(s.grid.h())};
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) row.push_back(s17(s.A_bar(i, j)));
      for (double v : {nA, s.third.max_abs_c(), s.third.max_abs_staggered(), s.third.max_abs_ibp(), rel.back()})
        row.push_back(s17(v));
      rows.push_back(row);
    }
    bool monotone = true;
    for (std::size_t k = 1; k < G; ++k) monotone = monotone && rel[k] < rel[k - 1];
    envs.push_back({{"env", e},
                    {"seed", p.c.env_seeds[e]},
                    {"relative_c", rel},
                    {"finest_relative_c", rel.back()},
                    {"decreasing", monotone}});
  }
  out.csv("suite.csv", header, rows);
  return {{"ns", p.ns}, {"envs", envs}};
}

// ---------------------------------------------------------------------------------------------------------------
// expand / elliptic

struct ExpansionPlan {
  Common c;
  ExpansionConfig x;
  std::string path = "direct";  ///< elliptic: direct, laplace or both
};

ExpansionPlan parse_expansion(Reader& r, const Common& c, bool elliptic) {
  const std::string sec = elliptic ? "elliptic" : "expand";
  ExpansionPlan p;
  p.c = c;
  ExpansionConfig& x = p.x;
  x.field = c.field;
  x.env_seeds = c.env_seeds;
  x.elliptic = elliptic;
  r.require_section(sec);
  x.eps = r.numbers(sec, "eps", {});
  if (x.eps.empty() && !r.has(sec, "eps")) r.bad(sec, "eps", "missing (the eps ladder)");
  for (double e : x.eps)
    if (!(e > 0.0)) r.bad(sec, "eps", "entries must be positive");
  x.probes = read_probes(r, sec, c.field.d, !elliptic);
  const bool has_h = r.has("grid", "h"), has_m = r.has("grid", "m");
  if (has_h && has_m) r.bad("grid", "h", "give either grid.h or grid.m, not both");
  x.grid.h = has_h ? r.positive("grid", "h", 0.0) : 0.0;
  x.grid.m = has_m ? r.positive("grid", "m", 8.0) : 8.0;
  x.grid.min_points = r.positive("grid", "min_points", 8.0);
  if (x.grid.h > 0.0) {
    for (double e : x.eps) {
      const double q = e / x.grid.h;
      if (e > 0.0 && std::abs(q - std::round(q)) > 1e-9 * q) {
        std::ostringstream os;
        os << "eps = " << e << " is not a multiple of grid.h = " << x.grid.h;
        r.problems.push_back(sec + ".eps, grid.h: " + os.str());
      } else if (e > 0.0 && q < x.grid.min_points) {
        r.problems.push_back(sec + ".eps, grid.h: eps / h below grid.min_points for eps = " + s17(e));
      }
    }
  }
  x.time.min_points = x.grid.min_points;
  x.corrector = read_corrector(r);
  r.require_section("datum");
  std::vector<std::string> dp;
  x.datum = InitialDatum::from_kv(r.section("datum"), c.field.d, dp);
  for (auto& q : dp) r.problems.push_back(q);
  const std::string ref = r.choice(sec, "reference", "grid", elliptic ? std::vector<std::string>{"grid", "continuum"}
                                                                        : std::vector<std::string>{"grid", "scheme", "continuum"});
  x.reference = ref == "scheme" ? ReferenceMode::scheme : ref == "continuum" ? ReferenceMode::continuum : ReferenceMode::grid;
  if (!elliptic) {
    x.time.dt = r.number("time", "dt", 0.0, 0.0);
    x.time.richardson = r.flag("time", "richardson", true);
    x.time.rannacher_substeps = static_cast<int>(r.integer("time", "rannacher_substeps", 4, 0));
    x.time.tol = r.positive("time", "tol", 1e-12);
    x.time.accuracy_budget = r.positive("time", "accuracy_budget", 0.5);
  } else {
    p.path = r.choice(sec, "path", "direct", {"direct", "laplace", "both"});
    x.laplace.dt0 = r.positive(sec, "dt0", x.laplace.dt0);
    x.laplace.growth = r.number(sec, "growth", x.laplace.growth, 1.0);
    x.laplace.dt_max = r.positive(sec, "dt_max", x.laplace.dt_max);
    x.laplace.tail_tol = r.positive(sec, "tail_tol", x.laplace.tail_tol);
    x.laplace.t_cap = r.positive(sec, "t_cap", x.laplace.t_cap);
    x.laplace.richardson = r.flag(sec, "richardson", true);
    x.laplace.tol = r.positive(sec, "tol", x.laplace.tol);
  }
  return p;
}

json expansion_summary(const ExpansionReport& rep) {
  json cells = json::array();
  for (const auto& c : rep.cells)
    cells.push_back({{"eps", c.eps}, {"probe", c.probe}, {"abs_C", mean_se_json(c.abs_C)}, {"C", mean_se_json(c.C)}});
  json probes = json::array();
  for (std::size_t k = 0; k < rep.probes.size(); ++k)
    probes.push_back({{"probe", k},
                      {"t", rep.probes[k].t},
                      {"x", rep.probes[k].x},
                      {"strictly_decreasing", rep.strictly_decreasing(k)},
                      {"final_over_initial", rep.final_over_initial(k)}});
  return {{"eps", rep.eps}, {"rows", rep.rows.size()}, {"cells", cells}, {"probes", probes}};
}

json run_expansion_kind(const ExpansionPlan& p, Output& out) {
  if (!p.x.elliptic) {
    const ExpansionReport rep = run_expansion(p.x);
    out.csv_from("expansion.csv", [&](const std::string& f) { rep.write_csv(f); });
    return expansion_summary(rep);
  }
  json res;
  std::optional<ExpansionReport> direct, laplace;
  if (p.path != "laplace") {
    ExpansionConfig x = p.x;
    x.laplace_path = false;
    direct = run_expansion(x);
    out.csv_from("elliptic_direct.csv", [&](const std::string& f) { direct->write_csv(f); });
    res["direct"] = expansion_summary(*direct);
  }
  if (p.path != "direct") {
    ExpansionConfig x = p.x;
    x.laplace_path = true;
    laplace = run_expansion(x);
    out.csv_from("elliptic_laplace.csv", [&](const std::string& f) { laplace->write_csv(f); });
    res["laplace"] = expansion_summary(*laplace);
  }
  if (direct && laplace) {
    double gap = 0.0;
    for (std::size_t i = 0; i < direct->rows.size(); ++i)
      gap = std::max(gap, std::abs(direct->rows[i].C - laplace->rows[i].C));
    res["max_abs_C_difference"] = gap;
  }
  return res;
}

// ---------------------------------------------------------------------------------------------------------------
// decay

std::size_t window_count(const std::vector<double>& x, double lo, double hi) {
  return static_cast<std::size_t>(std::count_if(x.begin(), x.end(), [&](double v) { return v >= lo && v <= hi; }));
}

/// Slope and bootstrap interval, or the reason the window could not be fitted.
json fit_json(DecayCurve& curve, double lo, double hi, std::uint64_t seed) {
  json j = {{"window", {lo, hi}}};
  try {
    fit_curve(curve, lo, hi, seed);
    j["slope"] = curve.slope;
    j["slope_ci"] = {curve.slope_lo, curve.slope_hi};
  } catch (const InvalidParameter& e) {
    j["slope"] = nullptr;
    j["error"] = e.what();
  }
  return j;
}

struct DecayPlan {
  Common c;
  Grid grid;
  CorrectorOptions co;
  std::string functional = "phi";
  Vec xi;
  EnvDecayOptions opt;
  double fit_lo = 0.0, fit_hi = 0.0;
  std::optional<double> reference;
  bool surrogate = false;
  double bound_t = 0.0, bound_dt = 0.01;
  std::size_t bound_paths = 64;
};

DecayPlan parse_decay(Reader& r, const Common& c) {
  DecayPlan p;
  p.c = c;
  p.grid = read_cell_grid(r, c);
  p.co = read_corrector(r);
  r.require_section("decay");
  p.functional = r.choice("decay", "functional", "phi", {"phi", "psi"});
  p.xi = read_direction(r, "decay", c.field.d);
  p.opt.times = r.numbers("decay", "times", {});
  if (!r.has("decay", "times")) r.bad("decay", "times", "missing");
  for (std::size_t i = 0; i < p.opt.times.size(); ++i)
    if (p.opt.times[i] < 0.0 || (i && p.opt.times[i] <= p.opt.times[i - 1]))
      r.bad("decay", "times", "must be nonnegative and increasing");
  p.opt.n_paths = static_cast<std::size_t>(r.integer("decay", "paths", 64, 2));
  p.opt.starts_per_env = static_cast<std::size_t>(r.integer("decay", "starts", 1, 1));
  p.opt.dt = r.positive("decay", "dt", 1e-2);
  p.fit_lo = r.positive("decay", "fit_lo", 0.5);
  p.fit_hi = r.positive("decay", "fit_hi", p.opt.times.empty() ? 1.0 : p.opt.times.back());
  if (p.fit_hi <= p.fit_lo) r.bad("decay", "fit_hi", "must exceed decay.fit_lo");
  else if (!p.opt.times.empty() && window_count(p.opt.times, p.fit_lo, p.fit_hi) < 4)
    r.problems.push_back("decay.fit_lo, decay.fit_hi: the window holds fewer than 4 of decay.times");
  if (r.has("decay", "reference")) p.reference = r.number("decay", "reference", 0.0);
  p.surrogate = r.flag("decay", "surrogate", false);
  p.bound_t = r.number("decay", "bound_t", 0.0, 0.0);
  p.bound_dt = r.positive("decay", "bound_dt", 1e-2);
  p.bound_paths = static_cast<std::size_t>(r.integer("decay", "bound_paths", 64, 2));
  return p;
}

json run_decay(const DecayPlan& p, Output& out) {
  const std::size_t E = p.c.envs;
  std::vector<CoefficientField> fields;
  for (std::size_t e = 0; e < E; ++e) fields.push_back(p.c.make_field(e));
  std::vector<GridFunction> g(E);
  parallel_for(E, [&](std::size_t e) { g[e] = environment_functional(fields[e], p.grid, p.co, p.functional, p.xi); });
  DecayCurve curve = env_decay(fields, g, p.opt, stream_key(p.c.seed, 1));
  const json fit = fit_json(curve, p.fit_lo, p.fit_hi, stream_key(p.c.seed, 2));
  if (p.reference) curve.reference = *p.reference;
  out.csv_from("decay.csv", [&](const std::string& f) { curve.write_csv(f); });
  json res = {{"functional", p.functional},
              {"times", curve.x},
              {"values", curve.values},
              {"se", curve.se},
              {"fit", fit},
              {"environment_samples", E * p.opt.starts_per_env}};
  if (p.reference) res["reference"] = *p.reference;
  if (p.surrogate) {
    EnvDecayOptions o = p.opt;
    o.brownian = true;
    const DecayCurve b = env_decay(fields, g, o, stream_key(p.c.seed, 3));
    std::vector<std::vector<std::string>> rows;
    json oracle = json::array();
    for (std::size_t i = 0; i < b.x.size(); ++i) {
      std::vector<double> per(E);
      for (std::size_t e = 0; e < E; ++e) per[e] = surrogate_convolution(g[e], b.x[i]);
      const double o_mean = pairwise_mean(per);
      oracle.push_back(o_mean);
      rows.push_back({s17(b.x[i]), s17(b.values[i]), s17(b.se[i]), s17(o_mean)});
    }
    out.csv("surrogate.csv", {"t", "value", "se", "oracle"}, rows);
    res["surrogate"] = {{"values", b.values}, {"se", b.se}, {"oracle", oracle}};
  }
  if (p.bound_t > 0.0) {
    const TimeIntegralBound l = time_integral_check(fields, g, p.bound_t, p.bound_paths, p.bound_dt, stream_key(p.c.seed, 4));
    res["time_integral_bound"] = {{"t", l.t},
                                  {"lhs", mean_se_json(l.lhs)},
                                  {"rhs", mean_se_json(l.rhs)},
                                  {"gap", mean_se_json(l.gap)},
                                  {"holds", l.holds()}};
  }
  return res;
}

// ---------------------------------------------------------------------------------------------------------------
// decorr

struct DecorrPlan {
  Common c;
  Grid grid;
  CorrectorOptions co;
  std::string functional = "phi";
  Vec xi;
  std::vector<int> lags;
  double fit_lo = 1.0, fit_hi = 4.0;
  int asymmetry_lag = 0;
  bool resampling = false;
  CloudLaw law;
  std::vector<std::string> functionals;
  std::vector<int> cell;
  std::size_t outer = 2000, inner = 16;
};

DecorrPlan parse_decorr(Reader& r, const Common& c) {
  DecorrPlan p;
  p.c = c;
  p.grid = read_cell_grid(r, c);
  p.co = read_corrector(r);
  r.require_section("decorr");
  p.functional = r.choice("decorr", "functional", "phi", {"phi", "psi"});
  p.xi = read_direction(r, "decorr", c.field.d);
  for (double v : r.numbers("decorr", "lags", {})) {
    if (v != std::floor(v) || v < 0) {
      r.bad("decorr", "lags", "lags are nonnegative integers (grid steps)");
      break;
    }
    p.lags.push_back(static_cast<int>(v));
  }
  if (!r.has("decorr", "lags")) r.bad("decorr", "lags", "missing");
  if (p.grid.n > 0)
    for (int l : p.lags)
      if (4 * l > p.grid.n) {
        r.bad("decorr", "lags", "lags beyond L/4 are not used");
        break;
      }
  p.fit_lo = r.positive("decorr", "fit_lo", 1.0);
  p.fit_hi = r.positive("decorr", "fit_hi", 4.0);
  if (p.fit_hi <= p.fit_lo) {
    r.bad("decorr", "fit_hi", "must exceed decorr.fit_lo");
  } else if (p.grid.n > 0 && !p.lags.empty()) {
    std::vector<double> dist;
    for (int l : p.lags) dist.push_back(l * p.grid.h());
    if (window_count(dist, p.fit_lo, p.fit_hi) < 4)
      r.problems.push_back("decorr.fit_lo, decorr.fit_hi: the window holds fewer than 4 lag distances (lags are grid steps of " +
                           s17(p.grid.h()) + ")");
  }
  p.asymmetry_lag = static_cast<int>(r.integer("decorr", "asymmetry_lag", 0, 0));
  p.resampling = r.has_section("resampling");
  if (p.resampling) {
    p.law.d = static_cast<int>(r.integer("resampling", "d", 2, 1));
    if (p.law.d > kMaxDim) r.bad("resampling", "d", "at most " + std::to_string(kMaxDim));
    p.law.L = r.positive("resampling", "L", 4.0);
    p.law.intensity = r.positive("resampling", "intensity", 1.0);
    p.law.cell_size = r.positive("resampling", "cell_size", 1.0);
    const double q = p.law.L / p.law.cell_size;
    if (std::abs(q - std::round(q)) > 1e-9 * q) r.bad("resampling", "cell_size", "must divide resampling.L");
    if (const std::string* m = r.raw("resampling", "marks")) {
      try {
        p.law.marks = MarkLaw::parse(trim(*m));
      } catch (const Error& e) {
        r.bad("resampling", "marks", e.what());
      }
    }
    p.functionals = r.words("resampling", "functionals", cloud_functional_names());
    for (const auto& f : p.functionals)
      if (std::find(cloud_functional_names().begin(), cloud_functional_names().end(), f) == cloud_functional_names().end())
        r.bad("resampling", "functionals", "'" + f + "' is not one of: " + join(cloud_functional_names(), ", "));
    const auto cell = r.numbers("resampling", "cell", std::vector<double>(static_cast<std::size_t>(p.law.d), 0.0));
    for (double v : cell) p.cell.push_back(static_cast<int>(v));
    if (static_cast<int>(p.cell.size()) != p.law.d) r.bad("resampling", "cell", "needs resampling.d entries");
    for (int k : p.cell)
      if (k < 0 || k >= static_cast<int>(std::lround(q))) r.bad("resampling", "cell", "index outside the box");
    p.outer = static_cast<std::size_t>(r.integer("resampling", "outer", 2000, 2));
    p.inner = static_cast<std::size_t>(r.integer("resampling", "inner", 16, 2));
  }
  return p;
}

json run_decorr(const DecorrPlan& p, Output& out) {
  const std::size_t E = p.c.envs;
  std::vector<GridFunction> g(E);
  parallel_for(E, [&](std::size_t e) {
    g[e] = environment_functional(p.c.make_field(e), p.grid, p.co, p.functional, p.xi);
  });
  DecayCurve curve = decorrelation_curve(g, p.lags);
  const json fit = fit_json(curve, p.fit_lo, p.fit_hi, stream_key(p.c.seed, 1));
  out.csv_from("decorrelation.csv", [&](const std::string& f) { curve.write_csv(f); });
  json res = {{"functional", p.functional},
              {"lags", curve.x},
              {"values", curve.values},
              {"se", curve.se},
              {"fit", fit}};
  if (p.asymmetry_lag > 0) res["odd_lag_asymmetry"] = mean_se_json(odd_lag_asymmetry(g, p.asymmetry_lag));
  if (p.resampling) {
    std::vector<std::vector<std::string>> rows;
    json reps = json::array();
    for (std::size_t i = 0; i < p.functionals.size(); ++i) {
      const auto& name = p.functionals[i];
      const ResamplingReport rr = resampling_identity(p.law, named_cloud_functional(name, p.law), p.cell, p.outer,
                                                      stream_key(p.c.seed, 10 + i), p.inner);
      const std::string analytic = name == "count" ? s17(count_resampling_value(p.law)) : "";
      rows.push_back({name, s17(rr.lhs.mean), s17(rr.lhs.se), s17(rr.rhs.mean), s17(rr.rhs.se), s17(rr.gap.mean),
                      s17(rr.gap.se), analytic});
      json j = {{"functional", name},
                {"lhs", mean_se_json(rr.lhs)},
                {"rhs", mean_se_json(rr.rhs)},
                {"gap", mean_se_json(rr.gap)},
                {"inner", rr.inner},
                {"holds", rr.holds()}};
      if (name == "count") j["analytic"] = count_resampling_value(p.law);
      reps.push_back(j);
    }
    out.csv("resampling.csv", {"functional", "lhs", "lhs_se", "rhs", "rhs_se", "gap", "gap_se", "analytic"}, rows);
    res["resampling"] = reps;
  }
  return res;
}

// ---------------------------------------------------------------------------------------------------------------
// clt

struct CltPlan {
  Common c;
  Grid grid;
  CorrectorOptions co;
  Vec xi;
  MartingaleOptions mo;
  std::size_t paths = 10000;
  double third_constant = 1.0;
  double k_se = 3.0;
  double qv_t = 0.0, qv_dt = 1e-3;
  std::size_t qv_paths = 2000;
  double bound_t = 0.0, bound_dt = 1e-2;
  std::size_t bound_paths = 64;
};

CltPlan parse_clt(Reader& r, const Common& c) {
  CltPlan p;
  p.c = c;
  p.grid = read_cell_grid(r, c);
  p.co = read_corrector(r);
  r.require_section("clt");
  p.xi = read_direction(r, "clt", c.field.d);
  p.mo.eps = r.positive("clt", "eps", 0.5);
  p.mo.t = r.positive("clt", "t", 1.0);
  p.mo.dt = r.positive("clt", "dt", 1e-3);
  p.mo.random_start = r.flag("clt", "random_start", true);
  p.mo.x0 = Vec::Zero(c.field.d);
  p.paths = static_cast<std::size_t>(r.integer("clt", "paths", 10000, 2));
  if (p.paths < 2 * c.envs) r.bad("clt", "paths", "need at least two paths per environment");
  p.third_constant = r.positive("clt", "third_constant", 1.0);
  p.k_se = r.positive("clt", "k_se", 3.0);
  p.qv_t = r.number("clt", "qv_t", 0.0, 0.0);
  p.qv_dt = r.positive("clt", "qv_dt", 1e-3);
  p.qv_paths = static_cast<std::size_t>(r.integer("clt", "qv_paths", 2000, 2));
  p.bound_t = r.number("clt", "bound_t", 0.0, 0.0);
  p.bound_dt = r.positive("clt", "bound_dt", 1e-2);
  p.bound_paths = static_cast<std::size_t>(r.integer("clt", "bound_paths", 64, 2));
  return p;
}

json run_clt(const CltPlan& p, Output& out) {
  const std::size_t E = p.c.envs;
  std::vector<CoefficientField> fields;
  for (std::size_t e = 0; e < E; ++e) fields.push_back(p.c.make_field(e));
  CorrectorOptions co = p.co;
  co.flux = false;
  std::vector<CorrectorSet> sets(E);
  parallel_for(E, [&](std::size_t e) { sets[e] = compute_correctors(fields[e], p.grid, co); });
  std::vector<CltSample> samples;
  std::vector<std::vector<std::string>> rows;
  double telescoping = 0.0;
  json sig = json::array();
  for (std::size_t e = 0; e < E; ++e) {
    const std::size_t n = p.paths / E + (e < p.paths % E ? 1 : 0);
    const double sigma2 = p.xi.dot(sets[e].A_bar * p.xi);
    sig.push_back(sigma2);
    const auto ms = sample_martingales(fields[e], sets[e], p.xi, p.mo, n, stream_key(p.c.seed, 1, e));
    for (std::size_t i = 0; i < ms.size(); ++i) {
      const auto& m = ms[i];
      telescoping = std::max(telescoping, std::abs(m.residual));
      samples.push_back({m.M, m.QV, m.M_tau, sigma2 * p.mo.t});
      rows.push_back({su(e), su(i), s17(m.M), s17(m.QV), s17(m.R), s17(m.R_corrector), s17(m.M_tau),
                      s17(m.displacement), s17(m.residual)});
    }
  }
  out.csv("martingales.csv",
          {"env", "path", "M", "QV", "R", "R_corrector", "M_tau", "displacement", "residual"}, rows);
  const auto clt = clt_distance(samples, clt_test_functions(), p.third_constant, p.k_se);
  std::vector<std::vector<std::string>> crows;
  json cj = json::array();
  for (const auto& c : clt) {
    crows.push_back({c.name, s17(c.lhs2), s17(c.rhs2), s17(c.se2), c.holds2 ? "1" : "0", s17(c.lhs3), s17(c.rhs3),
                     s17(c.se3), c.holds3 ? "1" : "0"});
    cj.push_back({{"function", c.name},
                  {"second_order", {{"lhs", c.lhs2}, {"rhs", c.rhs2}, {"se", c.se2}, {"holds", c.holds2}}},
                  {"third_order", {{"lhs", c.lhs3}, {"rhs", c.rhs3}, {"se", c.se3}, {"holds", c.holds3}}}});
  }
  out.csv("clt.csv", {"function", "lhs2", "rhs2", "se2", "holds2", "lhs3", "rhs3", "se3", "holds3"}, crows);
  json res = {{"samples", samples.size()}, {"sigma2", sig}, {"max_telescoping_residual", telescoping}, {"bounds", cj}};

  if (p.qv_t > 0.0) {
    std::vector<std::vector<std::string>> qrows;
    json qj = json::array();
    for (std::size_t e = 0; e < E; ++e) {
      MartingaleOptions mo = p.mo;
      mo.t = p.qv_t;
      std::vector<MeanSe> rate;
      for (int level = 0; level < 2; ++level) {
        mo.dt = p.qv_dt / (1 << level);
        const auto ms = sample_martingales(fields[e], sets[e], p.xi, mo, p.qv_paths,
                                           stream_key(p.c.seed, 2 + static_cast<std::uint64_t>(level), e));
        std::vector<double> v(ms.size());
        for (std::size_t i = 0; i < ms.size(); ++i) v[i] = ms[i].QV / p.qv_t;
        rate.push_back(mean_se(v));
      }
      const double extrap = 2.0 * rate[1].mean - rate[0].mean;
      const double se = std::sqrt(4.0 * rate[1].se * rate[1].se + rate[0].se * rate[0].se);
      const double target = p.xi.dot(sets[e].A_bar * p.xi);
      qrows.push_back({su(e), s17(p.qv_dt), s17(rate[0].mean), s17(rate[0].se), s17(rate[1].mean), s17(rate[1].se),
                       s17(extrap), s17(se), s17(target)});
      qj.push_back({{"env", e},
                    {"rate", extrap},
                    {"se", se},
                    {"target", target},
                    {"within_3se", std::abs(extrap - target) <= 3.0 * se}});
    }
    out.csv("qv_rate.csv", {"env", "dt", "rate_dt", "se_dt", "rate_half_dt", "se_half_dt", "rate", "se", "target"}, qrows);
    res["qv_rate"] = qj;
  }
  if (p.bound_t > 0.0) {
    std::vector<GridFunction> g(E);
    for (std::size_t e = 0; e < E; ++e) g[e] = environment_functional(fields[e], p.grid, co, "psi", p.xi);
    const TimeIntegralBound l = time_integral_check(fields, g, p.bound_t, p.bound_paths, p.bound_dt, stream_key(p.c.seed, 5));
    res["time_integral_bound"] = {{"t", l.t},
                                  {"lhs", mean_se_json(l.lhs)},
                                  {"rhs", mean_se_json(l.rhs)},
                                  {"gap", mean_se_json(l.gap)},
                                  {"holds", l.holds()}};
  }
  return res;
}

// ---------------------------------------------------------------------------------------------------------------
// conv-lemma

struct ConvPlan {
  Common c;
  std::vector<std::pair<int, double>> pairs;
  std::vector<double> x;
  double radius_factor = 4.0;
};

ConvPlan parse_conv(Reader& r, const Common& c) {
  ConvPlan p;
  p.c = c;
  r.require_section("conv");
  const std::string* s = r.raw("conv", "pairs");
  if (!s) r.bad("conv", "pairs", "missing (list of d:p)");
  if (s)
    for (const auto& item : split_any(*s, " ,\t")) {
      const auto parts = split_any(item, ":");
      double d = 0.0, q = 0.0;
      if (parts.size() != 2 || !parse_number(parts[0], d) || !parse_number(parts[1], q) || d != std::floor(d) ||
          d < 2 || d > kMaxDim || q <= 0) {
        r.bad("conv", "pairs", "'" + item + "' is not d:p with integer d in [2, " + std::to_string(kMaxDim) + "]");
        continue;
      }
      p.pairs.push_back({static_cast<int>(d), q});
    }
  p.x = r.numbers("conv", "x", {10, 15, 20, 25, 30, 40, 50});
  for (double v : p.x)
    if (!(v > 0.0)) r.bad("conv", "x", "entries must be positive");
  p.radius_factor = r.number("conv", "radius_factor", 4.0, 1.0, true);
  return p;
}

json run_conv(const ConvPlan& p, Output& out) {
  std::vector<std::vector<std::string>> rows;
  json res = json::array();
  for (const auto& [d, q] : p.pairs) {
    const ConvolutionSum s = convolution_power_sum(d, q, p.x, p.radius_factor);
    for (std::size_t i = 0; i < s.x.size(); ++i)
      rows.push_back({std::to_string(d), s17(q), s17(s.x[i]), s17(s.sum[i]), s17(s.truncation[i]), s17(s.bound[i]),
                      s17(s.ratio[i])});
    res.push_back({{"d", d}, {"p", q}, {"ratio", s.ratio}, {"spread", s.spread()}});
  }
  out.csv("convolution.csv", {"d", "p", "x", "sum", "truncation", "bound", "ratio"}, rows);
  return {{"pairs", res}};
}

// ---------------------------------------------------------------------------------------------------------------

struct Plan {
  Common common;
  std::optional<HomogenizePlan> homogenize;
  std::optional<SuitePlan> suite;
  std::optional<ExpansionPlan> expansion;
  std::optional<DecayPlan> decay;
  std::optional<DecorrPlan> decorr;
  std::optional<CltPlan> clt;
  std::optional<ConvPlan> conv;
};

Plan build_plan(const std::string& kind, const Config& cfg, std::uint64_t offset, std::vector<std::string>& problems) {
  Plan plan;
  const auto& kinds = experiment_kinds();
  if (std::find(kinds.begin(), kinds.end(), kind) == kinds.end()) {
    problems.push_back("kind: unknown experiment kind '" + kind + "' (allowed: " + join(kinds, ", ") + ")");
    return plan;
  }
  Reader r(cfg);
  read_common(r, plan.common, kind, offset, kind != "conv-lemma");
  const bool fatal = std::any_of(r.problems.begin(), r.problems.end(),
                                 [](const std::string& s) { return s.rfind("field.", 0) == 0 || s.rfind("[field]", 0) == 0; });
  if (fatal) {
    // Later sections depend on the field's dimension and period; only check that they are present.
    for (const auto& sec : cfg.section_names()) r.use_section(sec);
  } else if (kind == "homogenize") {
    plan.homogenize = parse_homogenize(r, plan.common);
  } else if (kind == "periodic-suite") {
    plan.suite = parse_suite(r, plan.common);
  } else if (kind == "expand" || kind == "elliptic") {
    plan.expansion = parse_expansion(r, plan.common, kind == "elliptic");
  } else if (kind == "decay") {
    plan.decay = parse_decay(r, plan.common);
  } else if (kind == "decorr") {
    plan.decorr = parse_decorr(r, plan.common);
  } else if (kind == "clt") {
    plan.clt = parse_clt(r, plan.common);
  } else {
    plan.conv = parse_conv(r, plan.common);
  }
  r.finish();
  problems = std::move(r.problems);
  return plan;
}

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace

ValidationError::ValidationError(std::vector<std::string> p)
    : InvalidParameter("invalid configuration:\n  " + join(p, "\n  ")), problems(std::move(p)) {}

std::vector<std::string> validate(const std::string& kind, const Config& cfg) {
  std::vector<std::string> problems;
  build_plan(kind, cfg, 0, problems);
  return problems;
}

RunResult run(const std::string& kind, const Config& cfg, const RunOptions& opt) {
  std::vector<std::string> problems;
  const Plan plan = build_plan(kind, cfg, opt.seed_offset, problems);
  if (!problems.empty()) throw ValidationError(problems);
#ifdef _OPENMP
  if (opt.workers > 0) omp_set_num_threads(opt.workers);
#endif
  const auto t0 = std::chrono::steady_clock::now();
  const std::string started = utc_now();
  const std::string hash = hex64(cfg.hash());
  RunResult result;
  result.out_dir = !opt.out_dir.empty() ? opt.out_dir : !plan.common.out.empty() ? plan.common.out : "out/" + kind;
  Output out(result.out_dir, hash);

  json res;
  if (plan.homogenize) res = run_homogenize(*plan.homogenize, out);
  if (plan.suite) res = run_suite(*plan.suite, out);
  if (plan.expansion) res = run_expansion_kind(*plan.expansion, out);
  if (plan.decay) res = run_decay(*plan.decay, out);
  if (plan.decorr) res = run_decorr(*plan.decorr, out);
  if (plan.clt) res = run_clt(*plan.clt, out);
  if (plan.conv) res = run_conv(*plan.conv, out);

  json config = json::object();
  for (const auto& sec : cfg.section_names()) config[sec] = cfg.section(sec);
  const json seeds = {{"experiment", plan.common.seed}, {"offset", opt.seed_offset}, {"environments", plan.common.env_seeds}};
  result.summary = {{"kind", kind}, {"config_hash", hash}, {"config", config}, {"seeds", seeds}, {"results", res}};
  if (!plan.common.env_seeds.empty()) result.summary["dependence_radius"] = plan.common.make_field(0).dependence_radius();
  out.json_file("summary.json", result.summary);

  result.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  result.artifacts = out.artifacts;
  json artifacts = json::array();
  for (const auto& a : out.artifacts) artifacts.push_back({{"path", a}, {"config_hash", hash}});
  const json manifest = {{"kind", kind},
                         {"config_hash", hash},
                         {"version", HOMOLAB_VERSION},
                         {"started", started},
                         {"wall_time_seconds", result.wall_time},
                         {"workers", opt.workers},
                         {"seeds", seeds},
                         {"config", config},
                         {"artifacts", artifacts}};
  write_atomic(result.out_dir + "/manifest.json", manifest.dump(2) + "\n");
  result.artifacts.push_back("manifest.json");
  return result;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const InvalidParameter*>(&e) || dynamic_cast<const ParseError*>(&e)) return 2;
  return 3;
}

void write_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp);
    os << content;
    os.flush();
    if (!os) throw Error("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

}  // namespace homolab
