// pathfield: cadlag step paths on a uniform grid, with the stop / bump /
// concatenation operations the functional calculus is built on.
#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <utility>
#include <vector>

#include "pathfield/grid.hpp"

namespace pathfield {

// A d-dimensional cadlag step path: omega(s) = v_k for s in [t_k, t_{k+1}),
// omega(T) = v_M. Values are stored as a d x (M+1) matrix.
class DiscretePath {
 public:
  DiscretePath(TimeGrid grid, Eigen::MatrixXd values)
      : grid_(grid), values_(std::move(values)) {
    if (values_.cols() != grid_.nodes())
      throw std::invalid_argument("DiscretePath: values length must be M+1");
    if (values_.rows() < 1) throw std::invalid_argument("DiscretePath: dimension must be >= 1");
  }

  static DiscretePath zero(const TimeGrid& g, int dim = 1) {
    return DiscretePath(g, Eigen::MatrixXd::Zero(dim, g.nodes()));
  }

  static DiscretePath constant(const TimeGrid& g, const Eigen::VectorXd& x) {
    Eigen::MatrixXd v(x.size(), g.nodes());
    v.colwise() = x;
    return DiscretePath(g, std::move(v));
  }

  static DiscretePath constant(const TimeGrid& g, double x) {
    return constant(g, Eigen::VectorXd::Constant(1, x));
  }

  // Scalar (d = 1) path from a node-value list.
  static DiscretePath from_scalar(const TimeGrid& g, const std::vector<double>& vals) {
    if (static_cast<int>(vals.size()) != g.nodes())
      throw std::invalid_argument("DiscretePath: values length must be M+1");
    Eigen::MatrixXd v(1, g.nodes());
    for (int k = 0; k < g.nodes(); ++k) v(0, k) = vals[k];
    return DiscretePath(g, std::move(v));
  }

  const TimeGrid& grid() const { return grid_; }
  int dim() const { return static_cast<int>(values_.rows()); }
  const Eigen::MatrixXd& values() const { return values_; }
  Eigen::MatrixXd& values() { return values_; }

  Eigen::VectorXd at_node(int k) const { return values_.col(k); }
  double scalar_at(int k) const { return values_(0, k); }

  // omega(s) with the step convention.
  Eigen::VectorXd eval(double s) const { return values_.col(grid_.floor_index(s)); }

  bool same_shape(const DiscretePath& o) const {
    return dim() == o.dim() && grid_.same_as(o.grid_);
  }

 private:
  TimeGrid grid_;
  Eigen::MatrixXd values_;
};

// Stopped path omega_t: values frozen at omega(t) from t onwards.
inline DiscretePath stop_path(const DiscretePath& omega, double t,
                              SnapMode mode = SnapMode::nearest) {
  const int k = omega.grid().snap_index(t, mode);
  Eigen::MatrixXd v = omega.values();
  const Eigen::VectorXd frozen = v.col(k);
  for (int j = k + 1; j < omega.grid().nodes(); ++j) v.col(j) = frozen;
  return DiscretePath(omega.grid(), std::move(v));
}

// Bumped path omega + x * 1_{[tau, T]}.
inline DiscretePath bump_path(const DiscretePath& omega, double tau, const Eigen::VectorXd& x,
                              SnapMode mode = SnapMode::nearest) {
  if (x.size() != omega.dim()) throw std::invalid_argument("bump_path: direction dimension mismatch");
  const int i = omega.grid().snap_index(tau, mode);
  Eigen::MatrixXd v = omega.values();
  for (int j = i; j < omega.grid().nodes(); ++j) v.col(j) += x;
  return DiscretePath(omega.grid(), std::move(v));
}

inline DiscretePath bump_path(const DiscretePath& omega, double tau, double x,
                              SnapMode mode = SnapMode::nearest) {
  return bump_path(omega, tau, Eigen::VectorXd::Constant(omega.dim(), x), mode);
}

// Concatenation gamma_t before t, gamma(t) + omega(.) - omega(t) after.
inline DiscretePath concat_path(const DiscretePath& gamma, const DiscretePath& omega, double t,
                                SnapMode mode = SnapMode::nearest) {
  if (!gamma.same_shape(omega)) throw std::invalid_argument("concat_path: mismatched grids");
  const int k = gamma.grid().snap_index(t, mode);
  Eigen::MatrixXd v = gamma.values();
  const Eigen::VectorXd anchor = gamma.values().col(k);
  const Eigen::VectorXd base = omega.values().col(k);
  for (int j = k; j < gamma.grid().nodes(); ++j)
    v.col(j) = anchor + (omega.values().col(j) - base);
  return DiscretePath(gamma.grid(), std::move(v));
}

// Sup norm of the path over a node window [a, b].
inline double sup_norm(const DiscretePath& omega, double a, double b) {
  const TimeGrid& g = omega.grid();
  if (b < a) throw std::domain_error("sup_norm: empty window");
  const int ka = g.snap_index(a);
  const int kb = g.snap_index(b);
  if (kb < ka) throw std::domain_error("sup_norm: empty window");
  double m = 0.0;
  for (int k = ka; k <= kb; ++k) m = std::max(m, omega.values().col(k).norm());
  return m;
}

inline double sup_norm(const DiscretePath& omega) {
  return sup_norm(omega, 0.0, omega.grid().horizon());
}

// Sup distance between two paths on the shared grid.
inline double sup_distance(const DiscretePath& u, const DiscretePath& v) {
  if (!u.same_shape(v)) throw std::invalid_argument("sup_distance: mismatched shapes");
  double m = 0.0;
  for (int k = 0; k < u.grid().nodes(); ++k)
    m = std::max(m, (u.values().col(k) - v.values().col(k)).norm());
  return m;
}

}  // namespace pathfield
