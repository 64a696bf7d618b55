#include "homolab/runner.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Numerical experiments on periodic and random homogenization"};
  std::string kind, config_path, out_dir;
  int workers = 0;
  std::uint64_t seed_offset = 0;
  bool check_only = false;
  app.add_option("kind", kind, "experiment kind: " + [] {
    std::string s;
    for (const auto& k : homolab::experiment_kinds()) s += (s.empty() ? "" : ", ") + k;
    return s;
  }())->required();
  app.add_option("--config", config_path, "INI configuration file")->required();
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--workers", workers, "worker threads")->check(CLI::NonNegativeNumber);
  app.add_option("--seed-offset", seed_offset, "added to every seed");
  app.add_flag("--check", check_only, "validate the configuration and exit");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const homolab::Config cfg = homolab::Config::load(config_path);
    if (check_only) {
      const auto problems = homolab::validate(kind, cfg);
      for (const auto& p : problems) std::cerr << p << "\n";
      return problems.empty() ? 0 : 2;
    }
    homolab::RunOptions opt;
    opt.out_dir = out_dir;
    opt.workers = workers;
    opt.seed_offset = seed_offset;
    const auto res = homolab::run(kind, cfg, opt);
    std::cout << "wrote " << res.artifacts.size() << " artifacts to " << res.out_dir << " in " << res.wall_time
              << " s\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "homolab: " << e.what() << "\n";
    return homolab::exit_code_for(e);
  }
}
