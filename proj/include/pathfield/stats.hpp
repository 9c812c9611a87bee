// pathfield: small shared statistics helpers.
#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace pathfield {
namespace detail {

// Sample standard error of the mean; antithetic ensembles are reduced to
// their pair means (the independent draws) first.
inline double mean_stderr(const Eigen::VectorXd& x, bool antithetic) {
  const int n = static_cast<int>(x.size());
  if (antithetic && n >= 2 && n % 2 == 0) {
    Eigen::VectorXd pair(n / 2);
    for (int i = 0; i < n / 2; ++i) pair(i) = 0.5 * (x(2 * i) + x(2 * i + 1));
    return mean_stderr(pair, false);
  }
  if (n < 2) return 0.0;
  const double m = x.mean();
  const double var = (x.array() - m).square().sum() / static_cast<double>(n - 1);
  return std::sqrt(var / static_cast<double>(n));
}

}  // namespace detail
}  // namespace pathfield
