#pragma once

#include "homolab/config.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace homolab {

const std::vector<std::string>& experiment_kinds();

/// Configuration problems, all reported at once; each names its key.
class ValidationError : public InvalidParameter {
 public:
  explicit ValidationError(std::vector<std::string> problems);
  std::vector<std::string> problems;
};

struct RunOptions {
  std::string out_dir;  ///< empty selects experiment.out, then out/<kind>
  int workers = 0;      ///< 0 leaves the thread count unchanged
  std::uint64_t seed_offset = 0;
};

struct RunResult {
  std::string out_dir;
  std::vector<std::string> artifacts;  ///< file names relative to out_dir
  nlohmann::json summary;
  double wall_time = 0.0;
};

/// Empty iff run would start.
std::vector<std::string> validate(const std::string& kind, const Config& cfg);

/// Throws ValidationError for a bad config, and the numerical errors of the library otherwise.
RunResult run(const std::string& kind, const Config& cfg, const RunOptions& opt = {});

/// Exit status for an exception escaping run: 2 for configuration problems, 3 for numerical failures.
int exit_code_for(const std::exception& e);

/// Write to path.tmp, then rename over path.
void write_atomic(const std::string& path, const std::string& content);

}  // namespace homolab
