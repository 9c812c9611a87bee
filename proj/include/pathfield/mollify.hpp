// pathfield: smooth compactly-supported time mollifier and the pipeline that
// regularizes time-delayed blocks (terminal h(omega(t0)) and the truncated
// double-integral source) into grid functionals with exact per-cell masses.
#pragma once

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/functional.hpp"
#include "pathfield/grid.hpp"
#include "pathfield/smooth.hpp"

namespace pathfield {

// Standard bump rho(x) = c * exp(-1/(1-x^2)) on (-1,1), scaled to width eps
// and centered so that rho_eps(center - s) weighs times s near the center.
class Mollifier {
 public:
  Mollifier(double center, double width) : t0_(center), eps_(width) {
    if (!(width > 0.0)) throw std::invalid_argument("Mollifier: width must be positive");
  }

  double center() const { return t0_; }
  double width() const { return eps_; }

  // Normalizing constant of the unit bump, so that its mass is 1 to within
  // the quadrature tolerance 1e-12.
  static double normalizer() {
    static const double c = [] {
      auto raw = [](double x) {
        const double q = 1.0 - x * x;
        return q > 0.0 ? std::exp(-1.0 / q) : 0.0;
      };
      const double integral = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(
          raw, -1.0, 1.0, 15, 1e-13);
      return 1.0 / integral;
    }();
    return c;
  }

  static double bump(double x) {
    const double q = 1.0 - x * x;
    return q > 0.0 ? normalizer() * std::exp(-1.0 / q) : 0.0;
  }

  static double bump_d1(double x) {
    const double q = 1.0 - x * x;
    if (q <= 0.0) return 0.0;
    return bump(x) * (-2.0 * x / (q * q));
  }

  static double bump_d2(double x) {
    const double q = 1.0 - x * x;
    if (q <= 0.0) return 0.0;
    const double u1 = -2.0 * x / (q * q);
    const double u2 = -2.0 / (q * q) - 8.0 * x * x / (q * q * q);
    return bump(x) * (u1 * u1 + u2);
  }

  double rho_eps(double x) const { return bump(x / eps_) / eps_; }

  // Time weight s -> rho_eps(center - s), with derivatives in s.
  SmoothFn weight() const {
    SmoothFn w;
    const double t0 = t0_, eps = eps_;
    w.name = "mollifier-weight";
    w.f = [t0, eps](double s) { return bump((t0 - s) / eps) / eps; };
    w.d1 = [t0, eps](double s) { return -bump_d1((t0 - s) / eps) / (eps * eps); };
    w.d2 = [t0, eps](double s) { return bump_d2((t0 - s) / eps) / (eps * eps * eps); };
    w.registered = true;
    return w;
  }

  // Integral of the time weight over [a, b], clipped to the support
  // (center - eps, center + eps); adaptive quadrature to 1e-12.
  double mass(double a, double b) const {
    const double lo = std::max(a, t0_ - eps_);
    const double hi = std::min(b, t0_ + eps_);
    if (hi <= lo) return 0.0;
    const double t0 = t0_, eps = eps_;
    auto f = [t0, eps](double s) { return bump((t0 - s) / eps) / eps; };
    return boost::math::quadrature::gauss_kronrod<double, 31>::integrate(f, lo, hi, 15, 1e-12);
  }

  // Exact-per-cell node masses on the grid: weight of node k is the weight
  // mass of the centered cell [t_k - dt/2, t_k + dt/2) clipped to the
  // horizon. Centering makes the node sum a midpoint rule, so a symmetric
  // weight reproduces affine integrands exactly instead of lagging by dt/2.
  std::vector<double> node_masses(const TimeGrid& g) const {
    std::vector<double> m(g.nodes(), 0.0);
    const double half = 0.5 * g.dt();
    for (int k = 0; k < g.nodes(); ++k)
      m[k] = mass(std::max(0.0, g.t(k) - half), std::min(g.horizon(), g.t(k) + half));
    return m;
  }

 private:
  double t0_;
  double eps_;
};

struct MollifyResult {
  FunctionalSpec spec;
  Mollifier mollifier{0.5, 0.1};
  double total_mass = 0.0;   // weight mass inside [0, horizon] before renormalization
  double leakage = 0.0;      // 1 - total_mass
  bool renormalized = false;
  std::string warning;       // non-empty when support leaks outside [0, horizon]
};

namespace detail {

inline void scale_masses(std::vector<double>& m, MollifyResult& r) {
  double total = 0.0;
  for (double v : m) total += v;
  r.total_mass = total;
  r.leakage = 1.0 - total;
  if (total <= 0.0)
    throw std::invalid_argument("mollify: weight support does not intersect [0, horizon]");
  for (double& v : m) v /= total;
  if (std::abs(r.leakage) > 1e-6) {
    r.renormalized = true;
    r.warning = "mollifier support leaks outside [0, horizon] (missing mass " +
                fmt_num(r.leakage) + "); cell masses renormalized to unit total";
  }
}

}  // namespace detail

// Smoothed replacement for the time-delayed terminal h(omega(t0)):
//   Phi_eps(t, omega) = sum_k m_k h(omega_t(t_k)),  m_k = integral of the
// weight over the cell centered at t_k. Evaluated on stopped paths this equals
//   int_0^t w(s) h(omega(s)) ds + h(omega(t)) int_t^T w(s) ds,
// which is the classical smoothed field; at t = T it is the mollified
// terminal itself. The measure version averages the same sum over particles.
inline MollifyResult mollify_terminal(SmoothFn h, double t0, double eps, const TimeGrid& grid,
                                      bool measure_version = false) {
  if (!(t0 > 0.0 && t0 < grid.horizon()))
    throw std::invalid_argument("mollify_terminal: center must lie strictly inside the horizon");
  MollifyResult r;
  r.mollifier = Mollifier(t0, eps);
  std::vector<double> masses = r.mollifier.node_masses(grid);
  detail::scale_masses(masses, r);
  Leaf leaf = measure_version ? leaf_mollified_measure_sum(std::move(h), std::move(masses))
                              : leaf_mollified_path_sum(std::move(h), std::move(masses));
  r.spec = FunctionalSpec::single(std::move(leaf));
  return r;
}

// Smoothed replacement for the switched source g(omega(t0), E^mu[W(t0)]) on
// [t0, T]:
//   f_eps(t, omega, mu) = int_0^t int_0^t g(omega(r1), E^mu[W(r2)])
//                          w(r1) w(r2) dr1 dr2,
// realized as a truncated double node sum with exact cell masses (partial
// mass for the straddling cell). Scalar paths only. Value-level evaluator:
// sources enter solves through their values, never through derivatives.
inline MollifyResult mollify_generator(Smooth2Fn g, double t0, double eps, const TimeGrid& grid) {
  if (!(t0 > 0.0 && t0 < grid.horizon()))
    throw std::invalid_argument("mollify_generator: center must lie strictly inside the horizon");
  MollifyResult r;
  r.mollifier = Mollifier(t0, eps);
  std::vector<double> masses = r.mollifier.node_masses(grid);
  // Renormalize only the leaked fraction: truncation at t < center + eps is
  // part of the definition and must not be scaled away.
  detail::scale_masses(masses, r);
  const Mollifier moll = r.mollifier;
  const double scale = 1.0 / r.total_mass;
  auto eval = [g = std::move(g), masses = std::move(masses), moll, scale](
                  double t, const DiscretePath& w, const ParticleMeasure& mu) {
    if (w.dim() != 1 || mu.dim() != 1)
      throw std::invalid_argument("mollified source: scalar paths required");
    const TimeGrid& grid = w.grid();
    const int kt = grid.floor_index(t);
    std::vector<double> trunc(static_cast<std::size_t>(kt) + 1, 0.0);
    for (int j = 0; j < kt; ++j) trunc[j] = masses[j];
    // The most recent node absorbs everything between its cell floor and t;
    // assigning that slice forward would read a node past the stopped time.
    trunc[kt] = scale * moll.mass(std::max(0.0, grid.t(kt) - 0.5 * grid.dt()), t);
    std::vector<double> mean(static_cast<std::size_t>(kt) + 1, 0.0);
    for (int l = 0; l <= kt; ++l) {
      if (trunc[l] == 0.0) continue;
      double m = 0.0;
      for (int i = 0; i < mu.size(); ++i) m += mu.particle(i).scalar_at(l);
      mean[l] = m / static_cast<double>(mu.size());
    }
    double acc = 0.0;
    for (int k = 0; k <= kt; ++k) {
      if (trunc[k] == 0.0) continue;
      const double x = w.scalar_at(k);
      double inner = 0.0;
      for (int l = 0; l <= kt; ++l)
        if (trunc[l] != 0.0) inner += trunc[l] * g.f(x, mean[l]);
      acc += trunc[k] * inner;
    }
    return acc;
  };
  r.spec = FunctionalSpec::opaque("mollified-source", std::move(eval));
  return r;
}

}  // namespace pathfield
