#pragma once

#include "homolab/common.hpp"

#include <span>

namespace homolab {

struct MeanSe {
  double mean = 0.0;
  double se = 0.0;
  std::size_t n = 0;
};

/// Sample mean and standard error of the mean (n-1 normalisation).
MeanSe mean_se(std::span<const double> x);

/// Mean and SE of x[i] - y[i].
MeanSe paired_difference(std::span<const double> x, std::span<const double> y);

/// Unbiased estimate of (E g)^2 from i.i.d. samples g: the off-diagonal U-statistic.
double squared_mean_unbiased(std::span<const double> g);

/// One-sample Kolmogorov-Smirnov distance to N(0, variance).
double ks_distance_normal(std::vector<double> x, double variance);

}  // namespace homolab
