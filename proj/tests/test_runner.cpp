#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "homolab/runner.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace homolab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("homolab_runner_" + name);
  fs::remove_all(p);
  return p;
}

const char* kHomogenize = R"(
[experiment]
seed = 4
envs = 2

[field]
model = constant
value = 1.7

[grid]
n = 8
)";

const char* kExpand = R"(
[experiment]
seed = 1
envs = 2

[field]
model = laminate

[expand]
eps = 0.25 0.125 0.0625
probes = 0.25 0.3 0.6; 0.5 0.7 0.1

[grid]
m = 8

[time]
dt = 0.001

[datum]
kind = cosine
period = 1
wavenumbers = 1 1
phases = 0.3 0.1
)";

}  // namespace

TEST_CASE("homogenize on a constant field writes the matrix and a manifest") {
  const fs::path out = scratch("homogenize");
  RunOptions o;
  o.out_dir = out.string();
  const RunResult r = run("homogenize", Config::parse(kHomogenize), o);
  CHECK(fs::exists(out / "manifest.json"));
  CHECK(fs::exists(out / "homogenized.csv"));
  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  const std::string hash = hex64(Config::parse(kHomogenize).hash());
  CHECK(manifest["config_hash"] == hash);
  CHECK(manifest["seeds"]["environments"].size() == 2);
  const auto& A = r.summary["results"]["A_bar_mean"];
  CHECK(A[0][0].get<double>() == doctest::Approx(1.7).epsilon(1e-12));
  CHECK(std::abs(A[0][1].get<double>()) < 1e-12);
  std::istringstream csv(slurp(out / "homogenized.csv"));
  std::string header, line;
  std::getline(csv, header);
  CHECK(header.substr(header.rfind(',') + 1) == "config_hash");
  while (std::getline(csv, line)) CHECK(line.substr(line.rfind(',') + 1) == hash);
  for (const auto& p : fs::directory_iterator(out)) CHECK(p.path().extension() != ".tmp");
}

TEST_CASE("expand writes one row per eps, probe and environment") {
  const fs::path out = scratch("expand");
  RunOptions o;
  o.out_dir = out.string();
  run("expand", Config::parse(kExpand), o);
  std::istringstream csv(slurp(out / "expansion.csv"));
  std::string line;
  std::size_t rows = 0;
  std::getline(csv, line);
  while (std::getline(csv, line))
    if (!line.empty()) ++rows;
  CHECK(rows == 3 * 2 * 2);
}

TEST_CASE("output is independent of the worker count") {
  RunOptions o;
  o.out_dir = scratch("w1").string();
  o.workers = 1;
  run("expand", Config::parse(kExpand), o);
  RunOptions o2 = o;
  o2.out_dir = scratch("w2").string();
  o2.workers = 2;
  run("expand", Config::parse(kExpand), o2);
  CHECK(slurp(fs::path(o.out_dir) / "expansion.csv") == slurp(fs::path(o2.out_dir) / "expansion.csv"));
}

TEST_CASE("seed offset shifts every environment seed") {
  RunOptions o;
  o.out_dir = scratch("offset").string();
  o.seed_offset = 10;
  const RunResult r = run("homogenize", Config::parse(kHomogenize), o);
  CHECK(r.summary["seeds"]["experiment"] == 14);
  CHECK(r.summary["seeds"]["environments"][0] == 10);
  CHECK(r.summary["seeds"]["environments"][1] == 11);
  CHECK(r.summary["dependence_radius"] == 0.0);
}

TEST_CASE("validation: valid configs have no problems") {
  CHECK(validate("homogenize", Config::parse(kHomogenize)).empty());
  CHECK(validate("expand", Config::parse(kExpand)).empty());
}

TEST_CASE("validation: unknown kind lists the allowed kinds") {
  const auto p = validate("shrink", Config::parse(kHomogenize));
  REQUIRE(p.size() == 1);
  for (const auto& k : experiment_kinds()) CHECK(p[0].find(k) != std::string::npos);
}

TEST_CASE("validation: eps incommensurate with h is one problem naming both keys") {
  Config bad = Config::parse(std::string(kExpand).replace(std::string(kExpand).find("m = 8"), 5, "h = 0.03"));
  bad.set("expand", "eps", "0.25");
  const auto p = validate("expand", bad);
  REQUIRE(p.size() == 1);
  CHECK(p[0].find("expand.eps") != std::string::npos);
  CHECK(p[0].find("grid.h") != std::string::npos);
}

TEST_CASE("validation: a missing seed is one problem") {
  std::string text = kHomogenize;
  text.replace(text.find("seed = 4"), 8, "");
  const auto p = validate("homogenize", Config::parse(text));
  REQUIRE(p.size() == 1);
  CHECK(p[0].find("experiment.seed") != std::string::npos);
}

TEST_CASE("validation: unknown keys are reported and run refuses") {
  Config c = Config::parse(kHomogenize);
  c.set("grid", "nn", "8");
  const auto p = validate("homogenize", c);
  REQUIRE(p.size() == 1);
  CHECK(p[0].find("grid.nn") != std::string::npos);
  RunOptions o;
  o.out_dir = scratch("refused").string();
  CHECK_THROWS_AS(run("homogenize", c, o), ValidationError);
  CHECK_FALSE(fs::exists(o.out_dir));
}

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ValidationError({"x: y"})) == 2);
  CHECK(exit_code_for(InvalidParameter("x")) == 2);
  CHECK(exit_code_for(ParseError("x", 1, 1)) == 2);
  CHECK(exit_code_for(SolverFailure("x", {1.0})) == 3);
  CHECK(exit_code_for(SimulationBlowup("x", 3)) == 3);
  CHECK(exit_code_for(TruncationError("x")) == 3);
}

TEST_CASE("atomic writes leave no temporary file") {
  const fs::path dir = scratch("atomic");
  fs::create_directories(dir);
  write_atomic((dir / "a.txt").string(), "one");
  write_atomic((dir / "a.txt").string(), "two");
  CHECK(slurp(dir / "a.txt") == "two");
  CHECK_FALSE(fs::exists(dir / "a.txt.tmp"));
}

TEST_CASE("validation: a fit window with too few points is rejected before running") {
  const Config c = Config::parse(R"(
[experiment]
seed = 1
envs = 2

[field]
model = poisson-bump
L = 16
seed = 3

[grid]
m = 4

[decorr]
lags = 0 1 2 4 8 16
fit_lo = 1
fit_hi = 4
)");
  const auto p = validate("decorr", c);
  REQUIRE(p.size() == 1);
  CAPTURE(p[0]);
  CHECK(p[0].find("decorr.fit_lo, decorr.fit_hi") == 0);
}

TEST_CASE("the dependence radius of a random field is reported") {
  Config c = Config::parse(kHomogenize);
  c.set("field", "model", "poisson-bump");
  c.set("field", "L", "4");
  c.set("field", "seed", "9");
  c.set("field", "bump_radius", "0.7");
  c.set("grid", "n", "16");
  RunOptions o;
  o.out_dir = scratch("radius").string();
  const RunResult r = run("homogenize", c, o);
  CHECK(r.summary["dependence_radius"].get<double>() == 0.7);
}
