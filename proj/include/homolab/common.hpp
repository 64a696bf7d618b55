#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace homolab {

inline constexpr int kMaxDim = 4;

using Vec = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDim, 1>;
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, 0, kMaxDim, kMaxDim>;

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// Iterative solver did not reach its tolerance.
class SolverFailure : public Error {
 public:
  SolverFailure(const std::string& what, std::vector<double> history)
      : Error(what), residual_history(std::move(history)) {}
  std::vector<double> residual_history;
};

class DiscretizationInconsistency : public Error {
 public:
  using Error::Error;
};

class SimulationBlowup : public Error {
 public:
  SimulationBlowup(const std::string& what, std::size_t step) : Error(what), step_index(step) {}
  std::size_t step_index;
};

/// Lattice sum truncation error too large for the requested radius.
class TruncationError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, int line, int column)
      : Error(what + " (line " + std::to_string(line) + ", column " + std::to_string(column) + ")"),
        line(line),
        column(column) {}
  int line;
  int column;
};

/// Pairwise summation with a fixed split, so results do not depend on threading.
double pairwise_sum(std::span<const double> v);

inline double pairwise_mean(std::span<const double> v) {
  return v.empty() ? 0.0 : pairwise_sum(v) / static_cast<double>(v.size());
}

/// Pairwise sum of x[i]*y[i].
double pairwise_dot(std::span<const double> x, std::span<const double> y);

/// Shortest round-trip text for a double, 17 significant digits.
std::string fmt17(double v);

}  // namespace homolab
