#include "homolab/field.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace homolab {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

bool parse_double(const std::string& s, double& out) {
  try {
    std::size_t pos = 0;
    out = std::stod(trim(s), &pos);
    return pos == trim(s).size() && std::isfinite(out);
  } catch (...) {
    return false;
  }
}

/// Advance a d-digit odometer over [lo, hi]^d; false when exhausted.
bool next_offset(std::vector<int>& o, int lo, int hi) {
  for (std::size_t j = 0; j < o.size(); ++j) {
    if (++o[j] <= hi) return true;
    o[j] = lo;
  }
  return false;
}

int points_in_cell(CounterRng& rng, double mean) {
  if (mean <= 0.0) return 0;
  std::poisson_distribution<int> pd(mean);
  return pd(rng);
}

void fill_cell(PoissonCloud& c, std::size_t cell, CounterRng& rng, std::vector<double>& loc,
               std::vector<double>& marks) {
  const double vol = std::pow(c.cell_size, c.d);
  const int count = points_in_cell(rng, c.intensity * vol);
  std::vector<int> k(static_cast<std::size_t>(c.d));
  std::size_t rem = cell;
  for (int j = c.d - 1; j >= 0; --j) {
    k[static_cast<std::size_t>(j)] = static_cast<int>(rem % static_cast<std::size_t>(c.cells_per_axis));
    rem /= static_cast<std::size_t>(c.cells_per_axis);
  }
  for (int p = 0; p < count; ++p) {
    for (int j = 0; j < c.d; ++j) {
      double x = (k[static_cast<std::size_t>(j)] + rng.uniform()) * c.cell_size;
      if (x >= c.box_length) x = std::nextafter(c.box_length, 0.0);
      loc.push_back(x);
    }
    marks.push_back(c.mark_law.sample(rng));
  }
}

}  // namespace

std::string to_string(FieldModel m) {
  switch (m) {
    case FieldModel::constant: return "constant";
    case FieldModel::laminate: return "laminate";
    case FieldModel::periodic_smooth: return "periodic-smooth";
    case FieldModel::mollified_checkerboard: return "mollified-checkerboard";
    case FieldModel::poisson_bump: return "poisson-bump";
  }
  return "unknown";
}

FieldModel parse_field_model(const std::string& s) {
  for (auto m : {FieldModel::constant, FieldModel::laminate, FieldModel::periodic_smooth,
                 FieldModel::mollified_checkerboard, FieldModel::poisson_bump})
    if (to_string(m) == s) return m;
  throw InvalidParameter("unknown field model '" + s +
                         "' (allowed: constant, laminate, periodic-smooth, mollified-checkerboard, poisson-bump)");
}

double MarkLaw::sample(CounterRng& rng) const {
  switch (kind) {
    case Kind::uniform: return p1 + (p2 - p1) * rng.uniform();
    case Kind::constant: return p1;
    case Kind::exponential: return -std::log1p(-rng.uniform()) / p1;
  }
  return 0.0;
}

double MarkLaw::mean() const {
  switch (kind) {
    case Kind::uniform: return 0.5 * (p1 + p2);
    case Kind::constant: return p1;
    case Kind::exponential: return 1.0 / p1;
  }
  return 0.0;
}

std::string MarkLaw::describe() const {
  switch (kind) {
    case Kind::uniform: return "uniform:" + fmt_double(p1) + ":" + fmt_double(p2);
    case Kind::constant: return "constant:" + fmt_double(p1);
    case Kind::exponential: return "exponential:" + fmt_double(p1);
  }
  return "";
}

MarkLaw MarkLaw::parse(const std::string& s) {
  const auto parts = split(s, ':');
  MarkLaw law;
  if (parts.empty()) throw InvalidParameter("empty mark law");
  const std::string kind = trim(parts[0]);
  auto num = [&](std::size_t i) {
    double v = 0.0;
    if (i >= parts.size() || !parse_double(parts[i], v)) throw InvalidParameter("bad mark law '" + s + "'");
    return v;
  };
  if (kind == "uniform") {
    law.kind = Kind::uniform;
    law.p1 = parts.size() > 1 ? num(1) : 0.0;
    law.p2 = parts.size() > 2 ? num(2) : 1.0;
    if (!(law.p2 >= law.p1)) throw InvalidParameter("uniform mark law needs a <= b");
  } else if (kind == "constant") {
    law.kind = Kind::constant;
    law.p1 = num(1);
  } else if (kind == "exponential") {
    law.kind = Kind::exponential;
    law.p1 = num(1);
    if (!(law.p1 > 0.0)) throw InvalidParameter("exponential mark law needs rate > 0");
  } else {
    throw InvalidParameter("unknown mark law '" + kind + "' (allowed: uniform, constant, exponential)");
  }
  return law;
}

std::size_t PoissonCloud::num_cells() const {
  std::size_t n = 1;
  for (int j = 0; j < d; ++j) n *= static_cast<std::size_t>(cells_per_axis);
  return n;
}

std::size_t PoissonCloud::cell_linear(std::span<const int> k) const {
  if (static_cast<int>(k.size()) != d) throw InvalidParameter("cell index has wrong dimension");
  std::size_t idx = 0;
  for (int j = 0; j < d; ++j) {
    const int kj = k[static_cast<std::size_t>(j)];
    if (kj < 0 || kj >= cells_per_axis) throw InvalidParameter("cell index outside the box");
    idx = idx * static_cast<std::size_t>(cells_per_axis) + static_cast<std::size_t>(kj);
  }
  return idx;
}

PoissonCloud sample_cloud(int d, double box_length, double intensity, const MarkLaw& law, std::uint64_t seed,
                          double cell_size) {
  if (d < 1 || d > kMaxDim) throw InvalidParameter("sample_cloud: dimension out of range");
  if (!(box_length > 0.0)) throw InvalidParameter("sample_cloud: box length must be positive");
  if (!(intensity >= 0.0) || !std::isfinite(intensity)) throw InvalidParameter("sample_cloud: intensity must be >= 0");
  if (!(cell_size > 0.0)) throw InvalidParameter("sample_cloud: cell size must be positive");
  const double ratio = box_length / cell_size;
  if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio) {
    throw InvalidParameter("sample_cloud: box length must be a multiple of the cell size");
  }
  PoissonCloud c;
  c.d = d;
  c.box_length = box_length;
  c.intensity = intensity;
  c.cell_size = cell_size;
  c.seed = seed;
  c.mark_law = law;
  c.cells_per_axis = static_cast<int>(std::lround(ratio));
  const std::size_t ncell = c.num_cells();
  c.cell_offsets.assign(ncell + 1, 0);
  for (std::size_t cell = 0; cell < ncell; ++cell) {
    CounterRng rng(stream_key(seed, cell));
    fill_cell(c, cell, rng, c.locations, c.marks);
    c.cell_offsets[cell + 1] = c.marks.size();
  }
  return c;
}

PoissonCloud resample_cell(const PoissonCloud& cloud, std::span<const int> k, std::uint64_t seed) {
  const std::size_t target = cloud.cell_linear(k);
  PoissonCloud out = cloud;
  out.locations.clear();
  out.marks.clear();
  const std::size_t d = static_cast<std::size_t>(cloud.d);
  const std::size_t ncell = cloud.num_cells();
  for (std::size_t cell = 0; cell < ncell; ++cell) {
    if (cell == target) {
      CounterRng rng(stream_key(seed, cell, 1));
      fill_cell(out, cell, rng, out.locations, out.marks);
    } else {
      for (std::size_t i = cloud.cell_offsets[cell]; i < cloud.cell_offsets[cell + 1]; ++i) {
        out.locations.insert(out.locations.end(), cloud.locations.begin() + static_cast<std::ptrdiff_t>(i * d),
                             cloud.locations.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
        out.marks.push_back(cloud.marks[i]);
      }
    }
    out.cell_offsets[cell + 1] = out.marks.size();
  }
  return out;
}

void write_cloud_csv(const PoissonCloud& cloud, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "mark0";
  for (int j = 0; j < cloud.d; ++j) os << ",x" << j;
  os << "\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    os << fmt_double(cloud.marks[i]);
    for (int j = 0; j < cloud.d; ++j) os << "," << fmt_double(cloud.location(i)[j]);
    os << "\n";
  }
}

PoissonCloud read_cloud_csv(const std::string& path, const PoissonCloud& meta) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  PoissonCloud c = meta;
  c.locations.clear();
  c.marks.clear();
  std::string line;
  std::getline(is, line);
  const std::size_t ncell = c.num_cells();
  std::vector<std::vector<double>> by_cell_loc(ncell);
  std::vector<std::vector<double>> by_cell_mark(ncell);
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    const auto parts = split(line, ',');
    if (static_cast<int>(parts.size()) != 1 + c.d) throw Error("malformed cloud row: " + line);
    std::vector<double> v(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i)
      if (!parse_double(parts[i], v[i])) throw Error("malformed cloud value: " + parts[i]);
    std::vector<int> k(static_cast<std::size_t>(c.d));
    for (int j = 0; j < c.d; ++j)
      k[static_cast<std::size_t>(j)] = std::min(c.cells_per_axis - 1,
                                                static_cast<int>(std::floor(v[static_cast<std::size_t>(j) + 1] / c.cell_size)));
    const std::size_t cell = c.cell_linear(k);
    by_cell_mark[cell].push_back(v[0]);
    by_cell_loc[cell].insert(by_cell_loc[cell].end(), v.begin() + 1, v.end());
  }
  c.cell_offsets.assign(ncell + 1, 0);
  for (std::size_t cell = 0; cell < ncell; ++cell) {
    c.locations.insert(c.locations.end(), by_cell_loc[cell].begin(), by_cell_loc[cell].end());
    c.marks.insert(c.marks.end(), by_cell_mark[cell].begin(), by_cell_mark[cell].end());
    c.cell_offsets[cell + 1] = c.marks.size();
  }
  return c;
}

std::vector<std::pair<std::string, std::string>> FieldSpec::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv;
  kv.emplace_back("model", to_string(model));
  kv.emplace_back("d", std::to_string(d));
  kv.emplace_back("L", fmt_double(L));
  kv.emplace_back("c_minus", fmt_double(c_minus));
  kv.emplace_back("c_plus", fmt_double(c_plus));
  kv.emplace_back("seed", std::to_string(seed));
  if (!anisotropy.empty()) {
    std::string s;
    for (std::size_t i = 0; i < anisotropy.size(); ++i) s += (i ? " " : "") + fmt_double(anisotropy[i]);
    kv.emplace_back("anisotropy", s);
  }
  switch (model) {
    case FieldModel::constant: kv.emplace_back("value", fmt_double(value)); break;
    case FieldModel::laminate:
      kv.emplace_back("alpha_mean", fmt_double(alpha_mean));
      kv.emplace_back("alpha_amp", fmt_double(alpha_amp));
      kv.emplace_back("alpha_amp2", fmt_double(alpha_amp2));
      kv.emplace_back("beta", fmt_double(beta));
      kv.emplace_back("laminate_profile", laminate_profile);
      kv.emplace_back("laminate_transverse", laminate_transverse);
      kv.emplace_back("v_lo", fmt_double(v_lo));
      kv.emplace_back("v_hi", fmt_double(v_hi));
      break;
    case FieldModel::periodic_smooth:
      kv.emplace_back("modes", std::to_string(modes));
      kv.emplace_back("contrast", fmt_double(contrast));
      break;
    case FieldModel::mollified_checkerboard:
      kv.emplace_back("v_lo", fmt_double(v_lo));
      kv.emplace_back("v_hi", fmt_double(v_hi));
      kv.emplace_back("cell_size", fmt_double(cell_size));
      kv.emplace_back("mollify_radius", fmt_double(mollify_radius));
      break;
    case FieldModel::poisson_bump:
      kv.emplace_back("intensity", fmt_double(intensity));
      kv.emplace_back("cell_size", fmt_double(cell_size));
      kv.emplace_back("bump_radius", fmt_double(bump_radius));
      kv.emplace_back("skew", skew ? "true" : "false");
      kv.emplace_back("marks", this->marks.describe());
      kv.emplace_back("kappa", fmt_double(kappa));
      kv.emplace_back("s_center", fmt_double(s_center));
      break;
  }
  return kv;
}

FieldSpec FieldSpec::from_kv(const std::map<std::string, std::string>& kv, std::vector<std::string>& problems) {
  FieldSpec s;
  auto bad = [&](const std::string& key, const std::string& why) { problems.push_back("field." + key + ": " + why); };
  auto get_d = [&](const std::string& key, double& out) {
    auto it = kv.find(key);
    if (it == kv.end()) return;
    if (!parse_double(it->second, out)) bad(key, "not a finite number: '" + it->second + "'");
  };
  if (auto it = kv.find("model"); it != kv.end()) {
    try {
      s.model = parse_field_model(trim(it->second));
    } catch (const InvalidParameter& e) {
      bad("model", e.what());
    }
  } else {
    bad("model", "missing");
  }
  double dd = s.d;
  get_d("d", dd);
  s.d = static_cast<int>(dd);
  if (dd != s.d || s.d < 2 || s.d > kMaxDim) bad("d", "must be an integer in [2, " + std::to_string(kMaxDim) + "]");
  get_d("L", s.L);
  if (!(s.L > 0.0)) bad("L", "must be positive");
  get_d("c_minus", s.c_minus);
  get_d("c_plus", s.c_plus);
  if (!(s.c_minus > 0.0) || !(s.c_plus >= s.c_minus)) bad("c_minus", "need 0 < c_minus <= c_plus");
  if (auto it = kv.find("seed"); it != kv.end()) {
    try {
      s.seed = std::stoull(trim(it->second));
    } catch (...) {
      bad("seed", "not an unsigned integer");
    }
  } else if (s.model == FieldModel::periodic_smooth || s.model == FieldModel::mollified_checkerboard ||
             s.model == FieldModel::poisson_bump) {
    bad("seed", "missing (seeds must be explicit)");
  }
  if (auto it = kv.find("anisotropy"); it != kv.end()) {
    std::istringstream is(it->second);
    std::string tok;
    while (is >> tok) {
      double v = 0.0;
      if (!parse_double(tok, v) || v <= -1.0) {
        bad("anisotropy", "entries must be numbers > -1");
        break;
      }
      s.anisotropy.push_back(v);
    }
    if (!s.anisotropy.empty() && static_cast<int>(s.anisotropy.size()) != s.d) bad("anisotropy", "needs d entries");
  }
  get_d("value", s.value);
  get_d("alpha_mean", s.alpha_mean);
  get_d("alpha_amp", s.alpha_amp);
  get_d("alpha_amp2", s.alpha_amp2);
  get_d("beta", s.beta);
  if (auto it = kv.find("laminate_profile"); it != kv.end()) {
    s.laminate_profile = trim(it->second);
    if (s.laminate_profile != "cosine" && s.laminate_profile != "two-phase")
      bad("laminate_profile", "allowed: cosine, two-phase");
  }
  if (auto it = kv.find("laminate_transverse"); it != kv.end()) {
    s.laminate_transverse = trim(it->second);
    if (s.laminate_transverse != "constant" && s.laminate_transverse != "isotropic")
      bad("laminate_transverse", "allowed: constant, isotropic");
  }
  double modes = s.modes;
  get_d("modes", modes);
  s.modes = static_cast<int>(modes);
  if (s.modes < 1 || modes != s.modes) bad("modes", "must be a positive integer");
  get_d("contrast", s.contrast);
  if (!(s.contrast >= 0.0 && s.contrast < 1.0)) bad("contrast", "must lie in [0, 1)");
  get_d("v_lo", s.v_lo);
  get_d("v_hi", s.v_hi);
  get_d("mollify_radius", s.mollify_radius);
  get_d("intensity", s.intensity);
  if (!(s.intensity >= 0.0)) bad("intensity", "must be >= 0");
  get_d("cell_size", s.cell_size);
  if (!(s.cell_size > 0.0)) bad("cell_size", "must be positive");
  get_d("bump_radius", s.bump_radius);
  if (!(s.bump_radius > 0.0)) bad("bump_radius", "must be positive");
  if (auto it = kv.find("skew"); it != kv.end()) {
    const std::string v = trim(it->second);
    if (v == "true" || v == "1") s.skew = true;
    else if (v == "false" || v == "0") s.skew = false;
    else bad("skew", "expected true or false");
  }
  if (auto it = kv.find("marks"); it != kv.end()) {
    try {
      s.marks = MarkLaw::parse(trim(it->second));
    } catch (const InvalidParameter& e) {
      bad("marks", e.what());
    }
  }
  get_d("kappa", s.kappa);
  get_d("s_center", s.s_center);
  static const char* known[] = {"model", "d", "L", "c_minus", "c_plus", "seed", "anisotropy", "value",
                                "alpha_mean", "alpha_amp", "alpha_amp2", "beta", "laminate_profile",
                                "laminate_transverse", "modes", "contrast", "v_lo", "v_hi", "mollify_radius",
                                "intensity", "cell_size", "bump_radius", "skew", "marks", "kappa", "s_center"};
  for (const auto& [k, v] : kv) {
    if (std::find(std::begin(known), std::end(known), k) == std::end(known)) bad(k, "unknown key");
  }
  return s;
}

double bump_profile(double r) {
  if (r >= 1.0) return 0.0;
  const double r2 = r * r;
  return 1.0 - 6.0 * r2 + 8.0 * r2 * r - 3.0 * r2 * r2;
}

double bump_profile_derivative(double r) {
  if (r >= 1.0) return 0.0;
  return -12.0 * r * (1.0 - r) * (1.0 - r);
}

CoefficientField::CoefficientField(FieldSpec spec) : spec_(std::move(spec)) {
  if (spec_.model == FieldModel::poisson_bump) {
    cloud_ = sample_cloud(spec_.d, spec_.L, spec_.intensity, spec_.marks, spec_.seed, spec_.cell_size);
  }
  init();
}

CoefficientField::CoefficientField(FieldSpec spec, PoissonCloud cloud) : spec_(std::move(spec)) {
  if (spec_.model != FieldModel::poisson_bump) throw InvalidParameter("a cloud is only used by the poisson-bump model");
  if (cloud.d != spec_.d || std::abs(cloud.box_length - spec_.L) > 1e-12 * spec_.L)
    throw InvalidParameter("cloud box does not match the field");
  cloud_ = std::move(cloud);
  init();
}

bool CoefficientField::is_random() const {
  return spec_.model == FieldModel::poisson_bump || spec_.model == FieldModel::mollified_checkerboard;
}

bool CoefficientField::has_smooth_drift() const {
  return !(spec_.model == FieldModel::laminate && spec_.laminate_profile == "two-phase");
}

double CoefficientField::dependence_radius() const {
  switch (spec_.model) {
    case FieldModel::poisson_bump: return spec_.bump_radius;
    case FieldModel::mollified_checkerboard: return mollify_r_;
    default: return 0.0;
  }
}

void CoefficientField::init() {
  const int d = spec_.d;
  if (d < 2 || d > kMaxDim) throw InvalidParameter("field dimension must lie in [2, 4]");
  if (!(spec_.L > 0.0)) throw InvalidParameter("field period must be positive");
  if (!(spec_.c_minus > 0.0) || spec_.c_plus < spec_.c_minus) throw InvalidParameter("need 0 < c_minus <= c_plus");
  q_.assign(static_cast<std::size_t>(d), 1.0);
  if (!spec_.anisotropy.empty()) {
    if (static_cast<int>(spec_.anisotropy.size()) != d) throw InvalidParameter("anisotropy needs d entries");
    for (int k = 0; k < d; ++k) q_[static_cast<std::size_t>(k)] = 1.0 + spec_.anisotropy[static_cast<std::size_t>(k)];
  }
  const double qmin = *std::min_element(q_.begin(), q_.end());
  const double qmax = *std::max_element(q_.begin(), q_.end());
  if (!(qmin > 0.0)) throw InvalidParameter("anisotropy factors must keep a positive");
  lo_ = spec_.c_minus / qmin;
  hi_ = spec_.c_plus / qmax;
  const double tol = 1e-12;
  auto in_range = [&](double lo, double hi) {
    return lo * qmin >= spec_.c_minus * (1 - tol) && hi * qmax <= spec_.c_plus * (1 + tol);
  };

  switch (spec_.model) {
    case FieldModel::constant:
      if (!in_range(spec_.value, spec_.value)) throw InvalidParameter("constant value violates ellipticity bounds");
      break;
    case FieldModel::laminate: {
      double amin, amax;
      if (spec_.laminate_profile == "two-phase") {
        amin = spec_.v_lo;
        amax = spec_.v_hi;
      } else if (spec_.laminate_profile == "cosine") {
        const double osc = std::abs(spec_.alpha_amp) + std::abs(spec_.alpha_amp2);
        amin = spec_.alpha_mean - osc;
        amax = spec_.alpha_mean + osc;
      } else {
        throw InvalidParameter("unknown laminate profile '" + spec_.laminate_profile + "'");
      }
      if (amin < spec_.c_minus * (1 - tol) || amax > spec_.c_plus * (1 + tol))
        throw InvalidParameter("laminate profile violates ellipticity bounds");
      if (spec_.laminate_transverse == "constant" &&
          (spec_.beta < spec_.c_minus * (1 - tol) || spec_.beta > spec_.c_plus * (1 + tol)))
        throw InvalidParameter("laminate beta violates ellipticity bounds");
      break;
    }
    case FieldModel::periodic_smooth: {
      if (!(hi_ > lo_)) throw InvalidParameter("ellipticity range too narrow for periodic-smooth");
      if (!(spec_.contrast >= 0.0 && spec_.contrast < 1.0)) throw InvalidParameter("contrast must lie in [0, 1)");
      CounterRng rng(stream_key(spec_.seed, 0x5eedULL));
      const int nm = spec_.modes;
      std::vector<double> w(static_cast<std::size_t>(nm));
      double wsum = 0.0;
      for (int m = 0; m < nm; ++m) {
        bool nonzero = false;
        for (int j = 0; j < d; ++j) {
          const int kj = static_cast<int>(rng() % 5) - 2;
          nonzero = nonzero || kj != 0;
          mode_k_.push_back(kTwoPi * kj / spec_.L);
        }
        if (!nonzero) mode_k_[mode_k_.size() - static_cast<std::size_t>(d)] = kTwoPi / spec_.L;
        mode_phase_.push_back(kTwoPi * rng.uniform());
        w[static_cast<std::size_t>(m)] = 0.5 + 0.5 * rng.uniform();
        wsum += w[static_cast<std::size_t>(m)];
      }
      const double budget = spec_.contrast * 0.5 * (hi_ - lo_);
      for (int m = 0; m < nm; ++m) mode_amp_.push_back(budget * w[static_cast<std::size_t>(m)] / wsum);
      break;
    }
    case FieldModel::mollified_checkerboard: {
      if (!(spec_.v_lo > 0.0) || spec_.v_hi < spec_.v_lo) throw InvalidParameter("need 0 < v_lo <= v_hi");
      if (!in_range(spec_.v_lo, spec_.v_hi)) throw InvalidParameter("checkerboard values violate ellipticity bounds");
      const double ratio = spec_.L / spec_.cell_size;
      if (std::abs(ratio - std::round(ratio)) > 1e-9 * ratio) throw InvalidParameter("L must be a multiple of cell_size");
      checker_cells_ = static_cast<int>(std::lround(ratio));
      mollify_r_ = spec_.mollify_radius > 0.0 ? spec_.mollify_radius : 0.6 * std::sqrt(static_cast<double>(d)) * spec_.cell_size;
      if (mollify_r_ <= 0.5 * std::sqrt(static_cast<double>(d)) * spec_.cell_size)
        throw InvalidParameter("mollify_radius must exceed half the cell diagonal");
      if (mollify_r_ >= 0.5 * spec_.L) throw InvalidParameter("mollify_radius must be below L/2");
      std::size_t ncell = 1;
      for (int j = 0; j < d; ++j) ncell *= static_cast<std::size_t>(checker_cells_);
      cell_log_value_.resize(ncell);
      for (std::size_t c = 0; c < ncell; ++c) {
        CounterRng rng(stream_key(spec_.seed, c));
        cell_log_value_[c] = std::log((rng() >> 63) ? spec_.v_hi : spec_.v_lo);
      }
      break;
    }
    case FieldModel::poisson_bump: {
      if (!(hi_ > lo_)) throw InvalidParameter("ellipticity range too narrow for poisson-bump");
      if (!(spec_.bump_radius > 0.0) || spec_.bump_radius >= 0.5 * spec_.L)
        throw InvalidParameter("bump_radius must lie in (0, L/2)");
      if (!(spec_.kappa > 0.0)) throw InvalidParameter("kappa must be positive");
      skew_v_.assign(static_cast<std::size_t>(d), 0.0);
      const double dir[kMaxDim] = {1.0, 0.6, 0.3, 0.1};
      double nrm = 0.0;
      for (int j = 0; j < d; ++j) nrm += dir[j] * dir[j];
      for (int j = 0; j < d; ++j)
        skew_v_[static_cast<std::size_t>(j)] = std::numbers::pi / spec_.bump_radius * dir[j] / std::sqrt(nrm);
      break;
    }
  }
}

double CoefficientField::wrap(double x) const {
  const double L = spec_.L;
  double y = x - L * std::floor(x / L);
  if (y >= L) y -= L;
  return y;
}

double CoefficientField::cutoff(double s) const {
  const double sig = 1.0 / (1.0 + std::exp(-spec_.kappa * (s - spec_.s_center)));
  return lo_ + (hi_ - lo_) * sig;
}

double CoefficientField::bump_sum(const double* xw, double* grad) const {
  const int d = spec_.d;
  const PoissonCloud& c = *cloud_;
  const double L = spec_.L;
  const double R = spec_.bump_radius;
  const int cpa = c.cells_per_axis;
  const int reach = static_cast<int>(std::ceil(R / c.cell_size));
  const bool full = 2 * reach + 1 >= cpa;
  const int lo = full ? 0 : -reach;
  const int hi = full ? cpa - 1 : reach;
  int home[kMaxDim];
  for (int j = 0; j < d; ++j) home[j] = std::min(cpa - 1, static_cast<int>(xw[j] / c.cell_size));
  for (int j = 0; j < d; ++j) grad[j] = 0.0;
  double s = 0.0;
  std::vector<int> off(static_cast<std::size_t>(d), lo);
  do {
    std::size_t cell = 0;
    for (int j = 0; j < d; ++j) {
      int kj = full ? off[static_cast<std::size_t>(j)] : home[j] + off[static_cast<std::size_t>(j)];
      kj = ((kj % cpa) + cpa) % cpa;
      cell = cell * static_cast<std::size_t>(cpa) + static_cast<std::size_t>(kj);
    }
    for (std::size_t i = c.cell_offsets[cell]; i < c.cell_offsets[cell + 1]; ++i) {
      const double* p = c.location(i);
      double z[kMaxDim];
      double r2 = 0.0;
      for (int j = 0; j < d; ++j) {
        double zj = xw[j] - p[j];
        zj -= L * std::round(zj / L);
        z[j] = zj;
        r2 += zj * zj;
      }
      if (r2 >= R * R) continue;
      const double rho = std::sqrt(r2) / R;
      const double w = bump_profile(rho);
      const double om = 1.0 - rho;
      const double gw = -12.0 * om * om / (R * R);  // grad w = gw * z
      const double m = c.marks[i];
      if (spec_.skew) {
        double vz = 0.0;
        for (int j = 0; j < d; ++j) vz += skew_v_[static_cast<std::size_t>(j)] * z[j];
        const double fac = 1.0 + 0.5 * std::sin(vz);
        const double dfac = 0.5 * std::cos(vz);
        s += m * w * fac;
        for (int j = 0; j < d; ++j) grad[j] += m * (gw * z[j] * fac + w * dfac * skew_v_[static_cast<std::size_t>(j)]);
      } else {
        s += m * w;
        for (int j = 0; j < d; ++j) grad[j] += m * gw * z[j];
      }
    }
  } while (next_offset(off, lo, hi));
  return s;
}

double CoefficientField::checker_log(const double* xw, double* grad) const {
  const int d = spec_.d;
  const double L = spec_.L;
  const double cs = spec_.cell_size;
  const double R = mollify_r_;
  const int cpa = checker_cells_;
  const int reach = static_cast<int>(std::ceil(R / cs)) + 1;
  const bool full = 2 * reach + 1 >= cpa;
  const int lo = full ? 0 : -reach;
  const int hi = full ? cpa - 1 : reach;
  int home[kMaxDim];
  for (int j = 0; j < d; ++j) home[j] = std::min(cpa - 1, static_cast<int>(xw[j] / cs));
  double num = 0.0, den = 0.0;
  double gnum[kMaxDim] = {0, 0, 0, 0}, gden[kMaxDim] = {0, 0, 0, 0};
  std::vector<int> off(static_cast<std::size_t>(d), lo);
  do {
    std::size_t cell = 0;
    double z[kMaxDim];
    double r2 = 0.0;
    for (int j = 0; j < d; ++j) {
      int kj = full ? off[static_cast<std::size_t>(j)] : home[j] + off[static_cast<std::size_t>(j)];
      kj = ((kj % cpa) + cpa) % cpa;
      cell = cell * static_cast<std::size_t>(cpa) + static_cast<std::size_t>(kj);
      double zj = xw[j] - (kj + 0.5) * cs;
      zj -= L * std::round(zj / L);
      z[j] = zj;
      r2 += zj * zj;
    }
    if (r2 < R * R) {
      const double rho = std::sqrt(r2) / R;
      const double w = bump_profile(rho);
      const double om = 1.0 - rho;
      const double gw = -12.0 * om * om / (R * R);
      const double lv = cell_log_value_[cell];
      num += w * lv;
      den += w;
      for (int j = 0; j < d; ++j) {
        gnum[j] += gw * z[j] * lv;
        gden[j] += gw * z[j];
      }
    }
  } while (next_offset(off, lo, hi));
  const double l = num / den;
  for (int j = 0; j < d; ++j) grad[j] = (gnum[j] - l * gden[j]) / den;
  return l;
}

double CoefficientField::base(const double* xw, double* grad) const {
  const int d = spec_.d;
  switch (spec_.model) {
    case FieldModel::constant:
      for (int j = 0; j < d; ++j) grad[j] = 0.0;
      return spec_.value;
    case FieldModel::periodic_smooth: {
      double s = 0.5 * (lo_ + hi_);
      for (int j = 0; j < d; ++j) grad[j] = 0.0;
      for (std::size_t m = 0; m < mode_amp_.size(); ++m) {
        const double* k = mode_k_.data() + m * static_cast<std::size_t>(d);
        double arg = mode_phase_[m];
        for (int j = 0; j < d; ++j) arg += k[j] * xw[j];
        s += mode_amp_[m] * std::cos(arg);
        const double sn = -mode_amp_[m] * std::sin(arg);
        for (int j = 0; j < d; ++j) grad[j] += sn * k[j];
      }
      return s;
    }
    case FieldModel::mollified_checkerboard: {
      const double l = checker_log(xw, grad);
      const double v = std::clamp(std::exp(l), std::min(spec_.v_lo, spec_.v_hi), std::max(spec_.v_lo, spec_.v_hi));
      for (int j = 0; j < d; ++j) grad[j] *= v;
      return v;
    }
    case FieldModel::poisson_bump: {
      const double s = bump_sum(xw, grad);
      const double sig = 1.0 / (1.0 + std::exp(-spec_.kappa * (s - spec_.s_center)));
      const double dF = (hi_ - lo_) * spec_.kappa * sig * (1.0 - sig);
      for (int j = 0; j < d; ++j) grad[j] *= dF;
      return lo_ + (hi_ - lo_) * sig;
    }
    case FieldModel::laminate: break;
  }
  return 0.0;
}

void CoefficientField::diagonal_and_drift(const double* x, double* a_diag, double* b) const {
  const int d = spec_.d;
  double xw[kMaxDim] = {0.0, 0.0, 0.0, 0.0};
  for (int j = 0; j < d; ++j) xw[j] = wrap(x[j]);
  if (spec_.model == FieldModel::laminate) {
    double alpha, dalpha;
    if (spec_.laminate_profile == "two-phase") {
      alpha = xw[0] < 0.5 * spec_.L ? spec_.v_lo : spec_.v_hi;
      dalpha = 0.0;
    } else {
      const double w = kTwoPi / spec_.L;
      alpha = spec_.alpha_mean - spec_.alpha_amp * std::cos(w * xw[0]) + spec_.alpha_amp2 * std::sin(2.0 * w * xw[0]);
      dalpha = spec_.alpha_amp * w * std::sin(w * xw[0]) + 2.0 * w * spec_.alpha_amp2 * std::cos(2.0 * w * xw[0]);
    }
    a_diag[0] = alpha;
    b[0] = 0.5 * dalpha;
    const bool iso = spec_.laminate_transverse == "isotropic";
    for (int j = 1; j < d; ++j) {
      a_diag[j] = iso ? alpha : spec_.beta;
      b[j] = 0.0;
    }
    return;
  }
  double g[kMaxDim];
  const double v = base(xw, g);
  for (int j = 0; j < d; ++j) {
    a_diag[j] = v * q_[static_cast<std::size_t>(j)];
    b[j] = 0.5 * q_[static_cast<std::size_t>(j)] * g[j];
  }
}

void CoefficientField::diagonal(const double* x, double* a_diag) const {
  double b[kMaxDim];
  diagonal_and_drift(x, a_diag, b);
}

FieldValue CoefficientField::evaluate(const Vec& x) const {
  const int d = spec_.d;
  if (x.size() != d) throw InvalidParameter("evaluate: point has wrong dimension");
  for (int j = 0; j < d; ++j)
    if (!std::isfinite(x[j])) throw InvalidParameter("evaluate: non-finite coordinate");
  double a[kMaxDim], b[kMaxDim];
  diagonal_and_drift(x.data(), a, b);
  FieldValue fv{Mat::Zero(d, d), Vec::Zero(d)};
  for (int j = 0; j < d; ++j) {
    fv.a(j, j) = a[j];
    fv.b[j] = b[j];
  }
  return fv;
}

}  // namespace homolab
