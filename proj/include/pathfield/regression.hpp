// pathfield: cross-sectional least-squares conditional expectations.
// Quadratic polynomial features over declared state columns, standardized
// and rank-guarded; plain OLS with an intercept so that fitted values
// preserve the sample mean exactly.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace pathfield {

// Design matrix [1, x_j, x_i x_j (i <= j)] from raw state columns.
inline Eigen::MatrixXd quadratic_design(const Eigen::MatrixXd& raw) {
  const int n = static_cast<int>(raw.rows());
  const int p = static_cast<int>(raw.cols());
  const int cols = 1 + p + p * (p + 1) / 2;
  Eigen::MatrixXd design(n, cols);
  design.col(0).setOnes();
  int c = 1;
  for (int j = 0; j < p; ++j) design.col(c++) = raw.col(j);
  for (int i = 0; i < p; ++i)
    for (int j = i; j < p; ++j) design.col(c++) = raw.col(i).cwiseProduct(raw.col(j));
  return design;
}

struct LsqFit {
  Eigen::VectorXd beta;         // coefficients in the standardized retained basis
  Eigen::VectorXd mean, scale;  // per-column standardization (retained columns)
  std::vector<int> kept;        // retained design columns (column 0 always)
  bool ridge_fallback = false;  // rank deficiency detected, ridge applied
  Eigen::VectorXd fitted;       // predictions at the training samples
};

namespace detail {

inline Eigen::MatrixXd standardized(const Eigen::MatrixXd& design, const LsqFit& fit) {
  const int n = static_cast<int>(design.rows());
  Eigen::MatrixXd A(n, static_cast<int>(fit.kept.size()));
  for (std::size_t c = 0; c < fit.kept.size(); ++c) {
    if (fit.kept[c] == 0)
      A.col(static_cast<int>(c)).setOnes();
    else
      A.col(static_cast<int>(c)) =
          (design.col(fit.kept[c]).array() - fit.mean(static_cast<int>(c))) /
          fit.scale(static_cast<int>(c));
  }
  return A;
}

}  // namespace detail

// Least-squares fit of y on the design columns. Columns without spread are
// dropped deterministically; if the retained columns are still rank
// deficient the solve falls back to a tiny ridge that leaves the intercept
// unpenalized (so the fitted values still average to mean(y)).
inline LsqFit fit_least_squares(const Eigen::MatrixXd& design, const Eigen::VectorXd& y) {
  if (design.rows() != y.size())
    throw std::invalid_argument("fit_least_squares: design/response size mismatch");
  if (design.rows() < 1) throw std::invalid_argument("fit_least_squares: empty sample");
  const int n = static_cast<int>(design.rows());
  LsqFit fit;
  fit.kept.push_back(0);
  std::vector<double> means{0.0}, scales{1.0};
  for (int j = 1; j < design.cols(); ++j) {
    const double m = design.col(j).mean();
    const double var = (design.col(j).array() - m).square().sum() / static_cast<double>(n);
    const double s = std::sqrt(var);
    if (s > 1e-12 * (1.0 + std::abs(m))) {
      fit.kept.push_back(j);
      means.push_back(m);
      scales.push_back(s);
    }
  }
  fit.mean = Eigen::Map<Eigen::VectorXd>(means.data(), static_cast<int>(means.size()));
  fit.scale = Eigen::Map<Eigen::VectorXd>(scales.data(), static_cast<int>(scales.size()));
  const Eigen::MatrixXd A = detail::standardized(design, fit);
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(A);
  qr.setThreshold(1e-10);
  if (qr.rank() == A.cols()) {
    fit.beta = qr.solve(y);
  } else {
    fit.ridge_fallback = true;
    Eigen::MatrixXd gram = A.transpose() * A;
    const double lam = 1e-8 * gram.trace() / static_cast<double>(A.cols());
    for (int j = 1; j < gram.cols(); ++j) gram(j, j) += lam;
    fit.beta = gram.ldlt().solve(A.transpose() * y);
  }
  fit.fitted = A * fit.beta;
  return fit;
}

inline Eigen::VectorXd predict(const LsqFit& fit, const Eigen::MatrixXd& design) {
  return detail::standardized(design, fit) * fit.beta;
}

}  // namespace pathfield
