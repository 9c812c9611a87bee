// pathfield: uniform time grid on [0, T].
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace pathfield {

// How to treat time arguments that do not land on a grid node.
enum class SnapMode {
  nearest,  // snap to the closest node
  strict,   // raise a domain error when the time is off-grid
};

// Uniform grid t_k = k*T/M, k = 0..M. All path and functional operations
// are evaluated at grid nodes; off-grid times are snapped (or rejected).
class TimeGrid {
 public:
  TimeGrid(double horizon, int steps) : T_(horizon), M_(steps) {
    if (!(horizon > 0.0)) throw std::domain_error("TimeGrid: horizon must be positive");
    if (steps < 1) throw std::domain_error("TimeGrid: need at least one step");
    dt_ = T_ / static_cast<double>(M_);
  }

  double horizon() const { return T_; }
  int steps() const { return M_; }
  int nodes() const { return M_ + 1; }
  double dt() const { return dt_; }
  double t(int k) const { return (k == M_) ? T_ : dt_ * static_cast<double>(k); }

  bool contains(double s) const { return s >= -tol() && s <= T_ + tol(); }

  // Index of the node a time snaps to; strict mode rejects off-grid input.
  int snap_index(double s, SnapMode mode = SnapMode::nearest) const {
    check_in_range(s);
    const auto k = static_cast<int>(std::llround(s / dt_));
    const int kc = clamp_index(k);
    if (mode == SnapMode::strict && std::abs(s - t(kc)) > tol())
      throw std::domain_error("TimeGrid: time " + std::to_string(s) + " is off-grid");
    return kc;
  }

  // Largest k with t_k <= s (cadlag step convention), robust to roundoff.
  int floor_index(double s) const {
    check_in_range(s);
    const auto k = static_cast<int>(std::floor(s / dt_ + 1e-9));
    return clamp_index(k);
  }

  bool on_grid(double s) const {
    if (!contains(s)) return false;
    const int k = clamp_index(static_cast<int>(std::llround(s / dt_)));
    return std::abs(s - t(k)) <= tol();
  }

  bool same_as(const TimeGrid& other) const {
    return M_ == other.M_ && std::abs(T_ - other.T_) <= tol();
  }

 private:
  double tol() const { return 1e-9 * (T_ + 1.0); }
  int clamp_index(int k) const { return k < 0 ? 0 : (k > M_ ? M_ : k); }
  void check_in_range(double s) const {
    if (!contains(s))
      throw std::domain_error("TimeGrid: time " + std::to_string(s) + " outside [0, " +
                              std::to_string(T_) + "]");
  }

  double T_;
  int M_;
  double dt_;
};

}  // namespace pathfield
