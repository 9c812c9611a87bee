// pathfield: non-anticipative functionals f(t, omega, mu) composed from
// evaluation, running-integral and measure-expectation blocks, with analytic
// horizontal and strong vertical derivatives (in path and in measure) plus
// finite-difference estimators for the same quantities.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/grid.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/path.hpp"
#include "pathfield/smooth.hpp"

namespace pathfield {

// ---------------------------------------------------------------------------
// Leaves
// ---------------------------------------------------------------------------

enum class LeafKind {
  path_eval,             // h(omega(t))
  frozen_eval,           // h(omega(t ^ t0)), discontinuous in the cut-off at t0
  running_integral,      // int_0^t F(r, omega(r)) dr
  measure_eval,          // E^mu[h(W(t))]
  measure_frozen,        // E^mu[h(W(t ^ t0))]
  measure_integral,      // E^mu[int_0^t F(r, W(r)) dr]
  measure_composite,     // E^mu[f4(W(t), int_0^t f5(W(r)) dr)]
  mollified_path_sum,    // sum_k w_k h(omega_t(t_k)) (mollified frozen block)
  mollified_measure_sum  // E^mu[sum_k w_k h(W_t(t_k))]
};

// One building block. Multi-dimensional paths enter through the projection
// p = dir . x; gradients are h'(p) dir and Hessians h''(p) dir dir^T.
struct Leaf {
  LeafKind kind = LeafKind::path_eval;
  SmoothFn h;
  TimeStateFn F;
  Smooth2Fn f4;
  SmoothFn f5;
  double t0 = 0.0;
  std::vector<double> node_weights;  // mollified blocks: weight of node k
  Eigen::VectorXd dir = Eigen::VectorXd::Ones(1);

  bool is_measure() const {
    return kind == LeafKind::measure_eval || kind == LeafKind::measure_frozen ||
           kind == LeafKind::measure_integral || kind == LeafKind::measure_composite ||
           kind == LeafKind::mollified_measure_sum;
  }

  bool registered() const {
    switch (kind) {
      case LeafKind::path_eval:
      case LeafKind::frozen_eval:
      case LeafKind::measure_eval:
      case LeafKind::measure_frozen:
      case LeafKind::mollified_path_sum:
      case LeafKind::mollified_measure_sum:
        return h.registered;
      case LeafKind::running_integral:
      case LeafKind::measure_integral:
        return F.registered;
      case LeafKind::measure_composite:
        return f4.registered && f5.registered;
    }
    return false;
  }
};

inline Leaf leaf_path_eval(SmoothFn h) {
  Leaf l;
  l.kind = LeafKind::path_eval;
  l.h = std::move(h);
  return l;
}

inline Leaf leaf_frozen_eval(SmoothFn h, double t0) {
  Leaf l;
  l.kind = LeafKind::frozen_eval;
  l.h = std::move(h);
  l.t0 = t0;
  return l;
}

inline Leaf leaf_running_integral(TimeStateFn F) {
  Leaf l;
  l.kind = LeafKind::running_integral;
  l.F = std::move(F);
  return l;
}

inline Leaf leaf_running_integral(const SmoothFn& h) { return leaf_running_integral(ts_state(h)); }

inline Leaf leaf_measure_eval(SmoothFn h) {
  Leaf l;
  l.kind = LeafKind::measure_eval;
  l.h = std::move(h);
  return l;
}

inline Leaf leaf_measure_frozen(SmoothFn h, double t0) {
  Leaf l;
  l.kind = LeafKind::measure_frozen;
  l.h = std::move(h);
  l.t0 = t0;
  return l;
}

inline Leaf leaf_measure_integral(TimeStateFn F) {
  Leaf l;
  l.kind = LeafKind::measure_integral;
  l.F = std::move(F);
  return l;
}

inline Leaf leaf_measure_integral(const SmoothFn& h) { return leaf_measure_integral(ts_state(h)); }

inline Leaf leaf_measure_composite(Smooth2Fn f4, SmoothFn f5) {
  Leaf l;
  l.kind = LeafKind::measure_composite;
  l.f4 = std::move(f4);
  l.f5 = std::move(f5);
  return l;
}

inline Leaf leaf_mollified_path_sum(SmoothFn h, std::vector<double> node_weights) {
  Leaf l;
  l.kind = LeafKind::mollified_path_sum;
  l.h = std::move(h);
  l.node_weights = std::move(node_weights);
  return l;
}

inline Leaf leaf_mollified_measure_sum(SmoothFn h, std::vector<double> node_weights) {
  Leaf l;
  l.kind = LeafKind::mollified_measure_sum;
  l.h = std::move(h);
  l.node_weights = std::move(node_weights);
  return l;
}

namespace detail {

inline void check_dir(const Leaf& l, int dim) {
  if (l.dir.size() != dim)
    throw std::invalid_argument("Leaf: projection direction has size " +
                                std::to_string(l.dir.size()) + ", path dimension is " +
                                std::to_string(dim));
}

inline double proj(const Leaf& l, const Eigen::Ref<const Eigen::VectorXd>& x) {
  return l.dir.dot(x);
}

// Effective node index of a path stopped at node kt.
inline int eff_node(int k, int kt) { return k < kt ? k : kt; }

// Value of a single-path block (measure blocks reuse this per particle).
// t may be off-grid; running integrals then carry a partial left-point cell.
inline double leaf_path_value(const Leaf& l, double t, const DiscretePath& w) {
  const TimeGrid& g = w.grid();
  const int kt = g.floor_index(t);
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      return l.h.f(proj(l, w.at_node(kt)));
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int k0 = g.snap_index(l.t0);
      return l.h.f(proj(l, w.at_node(eff_node(k0, kt))));
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral: {
      double acc = 0.0;
      for (int j = 0; j < kt; ++j) acc += l.F.f(g.t(j), proj(l, w.at_node(j))) * g.dt();
      const double rem = t - g.t(kt);
      if (rem > 0.0) acc += l.F.f(g.t(kt), proj(l, w.at_node(kt))) * rem;
      return acc;
    }
    case LeafKind::measure_composite: {
      double s = 0.0;
      for (int j = 0; j < kt; ++j) s += l.f5.f(proj(l, w.at_node(j))) * g.dt();
      const double rem = t - g.t(kt);
      if (rem > 0.0) s += l.f5.f(proj(l, w.at_node(kt))) * rem;
      return l.f4.f(proj(l, w.at_node(kt)), s);
    }
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      if (static_cast<int>(l.node_weights.size()) != g.nodes())
        throw std::invalid_argument("mollified block: node weights do not match the grid");
      double acc = 0.0;
      for (int k = 0; k < g.nodes(); ++k)
        acc += l.node_weights[k] * l.h.f(proj(l, w.at_node(eff_node(k, kt))));
      return acc;
    }
  }
  return 0.0;
}

// Horizontal derivative of a single-path block (time derivative along the
// stopped path). Only running-time integrals move.
inline double leaf_path_horizontal(const Leaf& l, double t, const DiscretePath& w) {
  const TimeGrid& g = w.grid();
  const int kt = g.floor_index(t);
  switch (l.kind) {
    case LeafKind::running_integral:
    case LeafKind::measure_integral:
      return l.F.f(t, proj(l, w.at_node(kt)));
    case LeafKind::measure_composite: {
      double s = 0.0;
      for (int j = 0; j < kt; ++j) s += l.f5.f(proj(l, w.at_node(j))) * g.dt();
      const double rem = t - g.t(kt);
      const double p = proj(l, w.at_node(kt));
      if (rem > 0.0) s += l.f5.f(p) * rem;
      return l.f4.fs(p, s) * l.f5.f(p);
    }
    default:
      return 0.0;
  }
}

// First derivative of a single-path block under a bump at node itau <= kt,
// reported as the scalar factor multiplying dir.
inline double leaf_path_svd_scalar(const Leaf& l, int itau, double t, const DiscretePath& w) {
  const TimeGrid& g = w.grid();
  const int kt = g.floor_index(t);
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      return l.h.d1(proj(l, w.at_node(kt)));
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int ke = eff_node(g.snap_index(l.t0), kt);
      return ke >= itau ? l.h.d1(proj(l, w.at_node(ke))) : 0.0;
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral: {
      double acc = 0.0;
      for (int j = itau; j < kt; ++j) acc += l.F.fx(g.t(j), proj(l, w.at_node(j))) * g.dt();
      const double rem = t - g.t(kt);
      if (rem > 0.0 && kt >= itau) acc += l.F.fx(g.t(kt), proj(l, w.at_node(kt))) * rem;
      return acc;
    }
    case LeafKind::measure_composite: {
      double s = 0.0, is = 0.0;
      for (int j = 0; j < kt; ++j) {
        const double pj = proj(l, w.at_node(j));
        s += l.f5.f(pj) * g.dt();
        if (j >= itau) is += l.f5.d1(pj) * g.dt();
      }
      const double rem = t - g.t(kt);
      const double p = proj(l, w.at_node(kt));
      if (rem > 0.0) {
        s += l.f5.f(p) * rem;
        if (kt >= itau) is += l.f5.d1(p) * rem;
      }
      return l.f4.fx(p, s) + l.f4.fs(p, s) * is;
    }
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      double acc = 0.0;
      for (int k = 0; k < g.nodes(); ++k) {
        const int ke = eff_node(k, kt);
        if (ke >= itau) acc += l.node_weights[k] * l.h.d1(proj(l, w.at_node(ke)));
      }
      return acc;
    }
  }
  return 0.0;
}

// Second bump derivative, as the scalar multiplying dir dir^T.
inline double leaf_path_svd2_scalar(const Leaf& l, int itau, double t, const DiscretePath& w) {
  const TimeGrid& g = w.grid();
  const int kt = g.floor_index(t);
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      return l.h.d2(proj(l, w.at_node(kt)));
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int ke = eff_node(g.snap_index(l.t0), kt);
      return ke >= itau ? l.h.d2(proj(l, w.at_node(ke))) : 0.0;
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral: {
      double acc = 0.0;
      for (int j = itau; j < kt; ++j) acc += l.F.fxx(g.t(j), proj(l, w.at_node(j))) * g.dt();
      const double rem = t - g.t(kt);
      if (rem > 0.0 && kt >= itau) acc += l.F.fxx(g.t(kt), proj(l, w.at_node(kt))) * rem;
      return acc;
    }
    case LeafKind::measure_composite: {
      double s = 0.0, is = 0.0, is2 = 0.0;
      for (int j = 0; j < kt; ++j) {
        const double pj = proj(l, w.at_node(j));
        s += l.f5.f(pj) * g.dt();
        if (j >= itau) {
          is += l.f5.d1(pj) * g.dt();
          is2 += l.f5.d2(pj) * g.dt();
        }
      }
      const double rem = t - g.t(kt);
      const double p = proj(l, w.at_node(kt));
      if (rem > 0.0) {
        s += l.f5.f(p) * rem;
        if (kt >= itau) {
          is += l.f5.d1(p) * rem;
          is2 += l.f5.d2(p) * rem;
        }
      }
      return l.f4.fxx(p, s) + 2.0 * l.f4.fxs(p, s) * is + l.f4.fss(p, s) * is * is +
             l.f4.fs(p, s) * is2;
    }
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      double acc = 0.0;
      for (int k = 0; k < g.nodes(); ++k) {
        const int ke = eff_node(k, kt);
        if (ke >= itau) acc += l.node_weights[k] * l.h.d2(proj(l, w.at_node(ke)));
      }
      return acc;
    }
  }
  return 0.0;
}

// Leaf value at (t, omega, mu): measure leaves average the path formula.
inline double leaf_value(const Leaf& l, double t, const DiscretePath& w,
                         const ParticleMeasure& mu) {
  if (!l.is_measure()) return leaf_path_value(l, t, w);
  double acc = 0.0;
  for (int i = 0; i < mu.size(); ++i) acc += leaf_path_value(l, t, mu.particle(i));
  return acc / static_cast<double>(mu.size());
}

inline double leaf_horizontal(const Leaf& l, double t, const DiscretePath& w,
                              const ParticleMeasure& mu) {
  if (!l.is_measure()) return leaf_path_horizontal(l, t, w);
  double acc = 0.0;
  for (int i = 0; i < mu.size(); ++i) acc += leaf_path_horizontal(l, t, mu.particle(i));
  return acc / static_cast<double>(mu.size());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Combiner: outer smooth map G(t, v_1..v_m) as a sum of separable terms
//   G = sum_q coeff_q * psi_q(t) * prod_a phi_{q,a}(v_{slot_a}).
// ---------------------------------------------------------------------------

struct CombinerTerm {
  double coeff = 1.0;
  SmoothFn time_factor = sf_constant(1.0);
  std::vector<int> slots;          // distinct leaf indices this term touches
  std::vector<SmoothFn> factors;   // one factor per touched slot
};

struct Combiner {
  int arity = 0;
  std::vector<CombinerTerm> terms;

  void validate() const {
    for (const auto& term : terms) {
      if (term.slots.size() != term.factors.size())
        throw std::invalid_argument("Combiner: slots/factors length mismatch");
      for (std::size_t a = 0; a < term.slots.size(); ++a) {
        if (term.slots[a] < 0 || term.slots[a] >= arity)
          throw std::invalid_argument("Combiner: slot index out of range");
        for (std::size_t b = a + 1; b < term.slots.size(); ++b)
          if (term.slots[a] == term.slots[b])
            throw std::invalid_argument("Combiner: term touches a slot twice");
      }
    }
  }

  bool registered() const {
    for (const auto& term : terms) {
      if (!term.time_factor.registered) return false;
      for (const auto& f : term.factors)
        if (!f.registered) return false;
    }
    return true;
  }

  double value(double t, const std::vector<double>& v) const {
    double acc = 0.0;
    for (const auto& term : terms) {
      double p = term.coeff * term.time_factor.f(t);
      for (std::size_t a = 0; a < term.slots.size(); ++a) p *= term.factors[a].f(v[term.slots[a]]);
      acc += p;
    }
    return acc;
  }

  double dt(double t, const std::vector<double>& v) const {
    double acc = 0.0;
    for (const auto& term : terms) {
      double p = term.coeff * term.time_factor.d1(t);
      for (std::size_t a = 0; a < term.slots.size(); ++a) p *= term.factors[a].f(v[term.slots[a]]);
      acc += p;
    }
    return acc;
  }

  Eigen::VectorXd grad(double t, const std::vector<double>& v) const {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(arity);
    for (const auto& term : terms) {
      const double base = term.coeff * term.time_factor.f(t);
      for (std::size_t a = 0; a < term.slots.size(); ++a) {
        double p = base * term.factors[a].d1(v[term.slots[a]]);
        for (std::size_t b = 0; b < term.slots.size(); ++b)
          if (b != a) p *= term.factors[b].f(v[term.slots[b]]);
        g(term.slots[a]) += p;
      }
    }
    return g;
  }

  Eigen::MatrixXd hess(double t, const std::vector<double>& v) const {
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(arity, arity);
    for (const auto& term : terms) {
      const double base = term.coeff * term.time_factor.f(t);
      for (std::size_t a = 0; a < term.slots.size(); ++a) {
        // Diagonal: second derivative of one factor.
        double p2 = base * term.factors[a].d2(v[term.slots[a]]);
        for (std::size_t b = 0; b < term.slots.size(); ++b)
          if (b != a) p2 *= term.factors[b].f(v[term.slots[b]]);
        H(term.slots[a], term.slots[a]) += p2;
        // Cross: first derivatives of two distinct factors.
        for (std::size_t b = a + 1; b < term.slots.size(); ++b) {
          double pc = base * term.factors[a].d1(v[term.slots[a]]) *
                      term.factors[b].d1(v[term.slots[b]]);
          for (std::size_t cidx = 0; cidx < term.slots.size(); ++cidx)
            if (cidx != a && cidx != b) pc *= term.factors[cidx].f(v[term.slots[cidx]]);
          H(term.slots[a], term.slots[b]) += pc;
          H(term.slots[b], term.slots[a]) += pc;
        }
      }
    }
    return H;
  }
};

inline Combiner combiner_identity() {
  Combiner G;
  G.arity = 1;
  CombinerTerm term;
  term.slots = {0};
  term.factors = {sf_identity()};
  G.terms.push_back(std::move(term));
  return G;
}

inline Combiner combiner_linear(const std::vector<double>& weights, double bias = 0.0) {
  Combiner G;
  G.arity = static_cast<int>(weights.size());
  if (bias != 0.0) {
    CombinerTerm c;
    c.coeff = bias;
    G.terms.push_back(std::move(c));
  }
  for (int i = 0; i < G.arity; ++i) {
    if (weights[i] == 0.0) continue;
    CombinerTerm term;
    term.coeff = weights[i];
    term.slots = {i};
    term.factors = {sf_identity()};
    G.terms.push_back(std::move(term));
  }
  return G;
}

// ---------------------------------------------------------------------------
// Functional: combiner over leaves, with the full analytic derivative set.
// ---------------------------------------------------------------------------

class Functional {
 public:
  Functional(Combiner G, std::vector<Leaf> leaves)
      : G_(std::move(G)), leaves_(std::move(leaves)) {
    if (G_.arity != static_cast<int>(leaves_.size()))
      throw std::invalid_argument("Functional: combiner arity must equal leaf count");
    G_.validate();
  }

  int num_leaves() const { return static_cast<int>(leaves_.size()); }
  const Leaf& leaf(int i) const { return leaves_.at(i); }
  const std::vector<Leaf>& leaves() const { return leaves_; }
  const Combiner& combiner() const { return G_; }

  bool growth_certified() const {
    if (!G_.registered()) return false;
    for (const auto& l : leaves_)
      if (!l.registered()) return false;
    return true;
  }

  // Values (and horizontal derivatives) of the measure leaves at (t, mu);
  // reusable across many paths.
  struct MeasureCache {
    double t = 0.0;
    std::vector<double> value;       // per leaf; unset for path leaves
    std::vector<double> horizontal;  // per leaf; unset for path leaves
  };

  MeasureCache measure_cache(double t, const ParticleMeasure& mu) const {
    MeasureCache c;
    c.t = t;
    c.value.assign(leaves_.size(), 0.0);
    c.horizontal.assign(leaves_.size(), 0.0);
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      if (leaves_[i].is_measure()) {
        detail::check_dir(leaves_[i], mu.dim());
        c.value[i] = detail::leaf_value(leaves_[i], t, mu.particle(0), mu);
        c.horizontal[i] = detail::leaf_horizontal(leaves_[i], t, mu.particle(0), mu);
      }
    return c;
  }

  std::vector<double> leaf_values(double t, const DiscretePath& w,
                                  const ParticleMeasure& mu) const {
    std::vector<double> v(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      detail::check_dir(leaves_[i], leaves_[i].is_measure() ? mu.dim() : w.dim());
      v[i] = detail::leaf_value(leaves_[i], t, w, mu);
    }
    return v;
  }

  std::vector<double> leaf_values(double t, const DiscretePath& w, const MeasureCache& c) const {
    std::vector<double> v(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      v[i] = leaves_[i].is_measure() ? c.value[i] : detail::leaf_path_value(leaves_[i], t, w);
    return v;
  }

  double value(double t, const DiscretePath& w, const ParticleMeasure& mu) const {
    return G_.value(t, leaf_values(t, w, mu));
  }

  double value(double t, const DiscretePath& w, const MeasureCache& c) const {
    return G_.value(t, leaf_values(t, w, c));
  }

  // Horizontal derivative: dG/dt plus the running-leaf time advances.
  double horizontal(double t, const DiscretePath& w, const ParticleMeasure& mu) const {
    const auto v = leaf_values(t, w, mu);
    const auto g = G_.grad(t, v);
    double acc = G_.dt(t, v);
    for (std::size_t i = 0; i < leaves_.size(); ++i)
      if (g(static_cast<int>(i)) != 0.0)
        acc += g(static_cast<int>(i)) * detail::leaf_horizontal(leaves_[i], t, w, mu);
    return acc;
  }

  double horizontal(double t, const DiscretePath& w, const MeasureCache& c) const {
    const auto v = leaf_values(t, w, c);
    const auto g = G_.grad(t, v);
    double acc = G_.dt(t, v);
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (g(static_cast<int>(i)) == 0.0) continue;
      acc += g(static_cast<int>(i)) * (leaves_[i].is_measure()
                                           ? c.horizontal[i]
                                           : detail::leaf_path_horizontal(leaves_[i], t, w));
    }
    return acc;
  }

  // Strong vertical derivative in path at cut-off tau <= t.
  Eigen::VectorXd svd1(double tau, double t, const DiscretePath& w,
                       const ParticleMeasure& mu) const {
    require_cutoff(tau, t);
    return svd1_given(w.grid().snap_index(tau), t, w, G_.grad(t, leaf_values(t, w, mu)));
  }

  Eigen::VectorXd svd1(double tau, double t, const DiscretePath& w, const MeasureCache& c) const {
    require_cutoff(tau, t);
    return svd1_given(w.grid().snap_index(tau), t, w, G_.grad(t, leaf_values(t, w, c)));
  }

  // Second strong vertical derivative in path: chain rule with the combiner
  // Hessian over leaf first derivatives plus leaf second derivatives.
  Eigen::MatrixXd svd2(double tau, double t, const DiscretePath& w,
                       const ParticleMeasure& mu) const {
    require_cutoff(tau, t);
    const int itau = w.grid().snap_index(tau);
    const auto v = leaf_values(t, w, mu);
    return svd2_given(itau, t, w, G_.grad(t, v), G_.hess(t, v));
  }

  Eigen::MatrixXd svd2(double tau, double t, const DiscretePath& w, const MeasureCache& c) const {
    require_cutoff(tau, t);
    const int itau = w.grid().snap_index(tau);
    const auto v = leaf_values(t, w, c);
    return svd2_given(itau, t, w, G_.grad(t, v), G_.hess(t, v));
  }

  // Measure derivative kernel at sample path xt. The combiner weights are
  // held at (t, omega, mu); only the kernel slot is differentiated.
  Eigen::VectorXd mu_kernel(double tau, double t, const DiscretePath& w,
                            const ParticleMeasure& mu, const DiscretePath& xt) const {
    require_cutoff(tau, t);
    const int itau = xt.grid().snap_index(tau);
    const auto v = leaf_values(t, w, mu);
    const auto g = G_.grad(t, v);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(xt.dim());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i].is_measure() || g(static_cast<int>(i)) == 0.0) continue;
      const double s = detail::leaf_path_svd_scalar(leaves_[i], itau, t, xt);
      out += g(static_cast<int>(i)) * s * leaves_[i].dir;
    }
    return out;
  }

  // Sample-path derivative of the measure kernel (the mixed second-order
  // object). The measure argument stays fixed, so no combiner Hessian enters.
  Eigen::MatrixXd mu_kernel_deriv(double tau, double t, const DiscretePath& w,
                                  const ParticleMeasure& mu, const DiscretePath& xt) const {
    require_cutoff(tau, t);
    const int itau = xt.grid().snap_index(tau);
    const auto v = leaf_values(t, w, mu);
    const auto g = G_.grad(t, v);
    const int d = xt.dim();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (!leaves_[i].is_measure() || g(static_cast<int>(i)) == 0.0) continue;
      const double s2 = detail::leaf_path_svd2_scalar(leaves_[i], itau, t, xt);
      out += g(static_cast<int>(i)) * s2 * (leaves_[i].dir * leaves_[i].dir.transpose());
    }
    return out;
  }

 private:
  static void require_cutoff(double tau, double t) {
    if (tau > t + 1e-12)
      throw std::domain_error("derivative cut-off tau must satisfy tau <= t");
  }

  Eigen::VectorXd svd1_given(int itau, double t, const DiscretePath& w,
                             const Eigen::VectorXd& g) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(w.dim());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (leaves_[i].is_measure() || g(static_cast<int>(i)) == 0.0) continue;
      const double s = detail::leaf_path_svd_scalar(leaves_[i], itau, t, w);
      out += g(static_cast<int>(i)) * s * leaves_[i].dir;
    }
    return out;
  }

  Eigen::MatrixXd svd2_given(int itau, double t, const DiscretePath& w, const Eigen::VectorXd& g,
                             const Eigen::MatrixXd& H) const {
    const int d = w.dim();
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d, d);
    std::vector<Eigen::VectorXd> first(leaves_.size());
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (leaves_[i].is_measure()) continue;
      const double s1 = detail::leaf_path_svd_scalar(leaves_[i], itau, t, w);
      first[i] = s1 * leaves_[i].dir;
      if (g(static_cast<int>(i)) != 0.0) {
        const double s2 = detail::leaf_path_svd2_scalar(leaves_[i], itau, t, w);
        out += g(static_cast<int>(i)) * s2 * (leaves_[i].dir * leaves_[i].dir.transpose());
      }
    }
    for (std::size_t i = 0; i < leaves_.size(); ++i) {
      if (leaves_[i].is_measure()) continue;
      for (std::size_t j = 0; j < leaves_.size(); ++j) {
        if (leaves_[j].is_measure()) continue;
        const double hij = H(static_cast<int>(i), static_cast<int>(j));
        if (hij != 0.0) out += hij * (first[i] * first[j].transpose());
      }
    }
    return out;
  }

  Combiner G_;
  std::vector<Leaf> leaves_;
};

// ---------------------------------------------------------------------------
// FunctionalSpec: analytic DSL functional or opaque evaluate-only functional.
// ---------------------------------------------------------------------------

class FunctionalSpec {
 public:
  using OpaqueFn = std::function<double(double, const DiscretePath&, const ParticleMeasure&)>;

  FunctionalSpec() : FunctionalSpec(constant(0.0)) {}

  explicit FunctionalSpec(Functional dsl)
      : dsl_(std::make_shared<Functional>(std::move(dsl))) {}

  static FunctionalSpec opaque(std::string name, OpaqueFn eval) {
    FunctionalSpec s;
    s.dsl_.reset();
    s.opaque_ = std::move(eval);
    s.name_ = std::move(name);
    return s;
  }

  static FunctionalSpec constant(double c) {
    Combiner G;
    G.arity = 0;
    CombinerTerm term;
    term.coeff = c;
    G.terms.push_back(std::move(term));
    return FunctionalSpec(Functional(std::move(G), {}));
  }

  // f(t, omega, mu) = h(omega(t)) and friends.
  static FunctionalSpec path_eval(SmoothFn h) { return single(leaf_path_eval(std::move(h))); }
  static FunctionalSpec frozen_eval(SmoothFn h, double t0) {
    return single(leaf_frozen_eval(std::move(h), t0));
  }
  static FunctionalSpec running_integral(TimeStateFn F) {
    return single(leaf_running_integral(std::move(F)));
  }
  static FunctionalSpec running_integral(const SmoothFn& h) {
    return single(leaf_running_integral(h));
  }
  static FunctionalSpec measure_eval(SmoothFn h) { return single(leaf_measure_eval(std::move(h))); }
  static FunctionalSpec measure_integral(const SmoothFn& h) {
    return single(leaf_measure_integral(h));
  }

  static FunctionalSpec single(Leaf l) {
    std::vector<Leaf> leaves;
    leaves.push_back(std::move(l));
    return FunctionalSpec(Functional(combiner_identity(), std::move(leaves)));
  }

  bool analytic() const { return static_cast<bool>(dsl_); }

  const Functional& dsl() const {
    if (!dsl_) throw std::logic_error("FunctionalSpec: opaque functional has no analytic form");
    return *dsl_;
  }

  bool growth_certified() const { return dsl_ ? dsl_->growth_certified() : false; }

  double value(double t, const DiscretePath& w, const ParticleMeasure& mu) const {
    return dsl_ ? dsl_->value(t, w, mu) : opaque_(t, w, mu);
  }

  const std::string& name() const { return name_; }

 private:
  std::shared_ptr<const Functional> dsl_;
  OpaqueFn opaque_;
  std::string name_ = "dsl";
};

// ---------------------------------------------------------------------------
// Finite-difference estimators
// ---------------------------------------------------------------------------

// Step sizes for finite differences; non-positive entries select the
// relative defaults at the probe point.
struct FdConfig {
  double h1 = 0.0;        // first-order central step in state
  double h2 = 0.0;        // second-order step in state
  double h_t = 0.0;       // horizontal forward step in time
  double lift_eps = 0.0;  // particle-lift step

  double h1_at(const DiscretePath& w, double t) const {
    return h1 > 0.0 ? h1 : 1e-4 * (1.0 + w.eval(t).norm());
  }
  double h2_at(const DiscretePath& w, double t) const {
    return h2 > 0.0 ? h2 : 1e-3 * (1.0 + w.eval(t).norm());
  }
  double ht_at(const TimeGrid& g) const {
    const double base = h_t > 0.0 ? h_t : 1e-4;
    return std::min(base, 0.5 * g.dt());
  }
  double lift_at(const ParticleMeasure& mu) const {
    return lift_eps > 0.0 ? lift_eps : 1e-4 * (1.0 + measure_moment(mu));
  }
};

enum class DerivMode { automatic, analytic, fd };

inline double fd_horizontal(const FunctionalSpec& f, double t, const DiscretePath& w,
                            const ParticleMeasure& mu, const FdConfig& cfg = {}) {
  const double h = cfg.ht_at(w.grid());
  if (t + h > w.grid().horizon())
    throw std::domain_error("fd_horizontal: t + h_t exceeds the horizon");
  const DiscretePath ws = stop_path(w, t);
  const ParticleMeasure ms = mu.stopped(t);
  return (f.value(t + h, ws, ms) - f.value(t, ws, ms)) / h;
}

inline Eigen::VectorXd fd_svd1(const FunctionalSpec& f, double tau, double t,
                               const DiscretePath& w, const ParticleMeasure& mu,
                               const FdConfig& cfg = {}) {
  const double h = cfg.h1_at(w, t);
  const int d = w.dim();
  Eigen::VectorXd out(d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
    e(j) = h;
    const double up = f.value(t, bump_path(w, tau, e), mu);
    const double dn = f.value(t, bump_path(w, tau, -e), mu);
    out(j) = (up - dn) / (2.0 * h);
  }
  return out;
}

inline Eigen::MatrixXd fd_svd2(const FunctionalSpec& f, double tau, double t,
                               const DiscretePath& w, const ParticleMeasure& mu,
                               const FdConfig& cfg = {}) {
  const double h = cfg.h2_at(w, t);
  const int d = w.dim();
  const double f0 = f.value(t, w, mu);
  Eigen::MatrixXd out(d, d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd ej = Eigen::VectorXd::Zero(d);
    ej(j) = h;
    const double up = f.value(t, bump_path(w, tau, ej), mu);
    const double dn = f.value(t, bump_path(w, tau, -ej), mu);
    out(j, j) = (up - 2.0 * f0 + dn) / (h * h);
    for (int l = j + 1; l < d; ++l) {
      Eigen::VectorXd el = Eigen::VectorXd::Zero(d);
      el(l) = h;
      const double pp = f.value(t, bump_path(w, tau, ej + el), mu);
      const double pm = f.value(t, bump_path(w, tau, ej - el), mu);
      const double mp = f.value(t, bump_path(w, tau, el - ej), mu);
      const double mm = f.value(t, bump_path(w, tau, -ej - el), mu);
      out(j, l) = out(l, j) = (pp - pm - mp + mm) / (4.0 * h * h);
    }
  }
  return out;
}

// Particle-lift first derivative: N * central difference of a one-particle
// bump (the Richardson +-eps pairing cancels the even error terms).
inline Eigen::VectorXd fd_mu_kernel(const FunctionalSpec& f, double tau, double t,
                                    const DiscretePath& w, const ParticleMeasure& mu,
                                    int which, const FdConfig& cfg = {}) {
  const double eps = cfg.lift_at(mu);
  const double n = static_cast<double>(mu.size());
  const int d = mu.dim();
  ParticleMeasure scratch = mu;
  const DiscretePath original = mu.particle(which);
  Eigen::VectorXd out(d);
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
    e(j) = eps;
    scratch.set_particle(which, bump_path(original, tau, e));
    const double up = f.value(t, w, scratch);
    scratch.set_particle(which, bump_path(original, tau, -e));
    const double dn = f.value(t, w, scratch);
    out(j) = n * (up - dn) / (2.0 * eps);
  }
  scratch.set_particle(which, original);
  return out;
}

// Second derivative in the same particle's bump. The estimator carries an
// O(1/N) bias from the measure curvature; it vanishes when the functional is
// linear in its measure blocks.
inline Eigen::MatrixXd fd_mu_kernel_deriv(const FunctionalSpec& f, double tau, double t,
                                          const DiscretePath& w, const ParticleMeasure& mu,
                                          int which, const FdConfig& cfg = {}) {
  const double eps = cfg.lift_at(mu);
  const double n = static_cast<double>(mu.size());
  const int d = mu.dim();
  const double f0 = f.value(t, w, mu);
  ParticleMeasure scratch = mu;
  const DiscretePath original = mu.particle(which);
  Eigen::MatrixXd out(d, d);
  auto value_with_bump = [&](const Eigen::VectorXd& x) {
    scratch.set_particle(which, bump_path(original, tau, x));
    return f.value(t, w, scratch);
  };
  for (int j = 0; j < d; ++j) {
    Eigen::VectorXd ej = Eigen::VectorXd::Zero(d);
    ej(j) = eps;
    const double up = value_with_bump(ej);
    const double dn = value_with_bump(-ej);
    out(j, j) = n * (up - 2.0 * f0 + dn) / (eps * eps);
    for (int l = j + 1; l < d; ++l) {
      Eigen::VectorXd el = Eigen::VectorXd::Zero(d);
      el(l) = eps;
      const double pp = value_with_bump(ej + el);
      const double pm = value_with_bump(ej - el);
      const double mp = value_with_bump(el - ej);
      const double mm = value_with_bump(-ej - el);
      out(j, l) = out(l, j) = n * (pp - pm - mp + mm) / (4.0 * eps * eps);
    }
  }
  scratch.set_particle(which, original);
  return out;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline double eval_functional(const FunctionalSpec& f, double t, const DiscretePath& w,
                              const ParticleMeasure& mu) {
  return f.value(w.grid().t(w.grid().snap_index(t)), w, mu);
}

inline double horizontal_derivative(const FunctionalSpec& f, double t, const DiscretePath& w,
                                    const ParticleMeasure& mu, const FdConfig& cfg = {},
                                    DerivMode mode = DerivMode::automatic) {
  const bool use_analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  if (use_analytic) return f.dsl().horizontal(t, w, mu);
  return fd_horizontal(f, t, w, mu, cfg);
}

inline Eigen::VectorXd svd_first(const FunctionalSpec& f, double tau, double t,
                                 const DiscretePath& w, const ParticleMeasure& mu,
                                 DerivMode mode = DerivMode::automatic, const FdConfig& cfg = {}) {
  if (tau > t + 1e-12) throw std::domain_error("svd_first: tau must satisfy tau <= t");
  const bool use_analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  if (use_analytic) return f.dsl().svd1(tau, t, w, mu);
  return fd_svd1(f, tau, t, w, mu, cfg);
}

inline Eigen::MatrixXd svd_second(const FunctionalSpec& f, double tau, double t,
                                  const DiscretePath& w, const ParticleMeasure& mu,
                                  DerivMode mode = DerivMode::automatic, const FdConfig& cfg = {}) {
  if (tau > t + 1e-12) throw std::domain_error("svd_second: tau must satisfy tau <= t");
  const bool use_analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  if (use_analytic) return f.dsl().svd2(tau, t, w, mu);
  return fd_svd2(f, tau, t, w, mu, cfg);
}

// Strong vertical derivative dispatcher matching the documented signature:
// order 1 returns a d x 1 column, order 2 the d x d matrix.
inline Eigen::MatrixXd strong_vertical_derivative(const FunctionalSpec& f, double tau, double t,
                                                  const DiscretePath& w, const ParticleMeasure& mu,
                                                  int order, DerivMode mode = DerivMode::automatic,
                                                  const FdConfig& cfg = {}) {
  if (order == 1) return svd_first(f, tau, t, w, mu, mode, cfg);
  if (order == 2) return svd_second(f, tau, t, w, mu, mode, cfg);
  throw std::invalid_argument("strong_vertical_derivative: order must be 1 or 2");
}

inline Eigen::VectorXd measure_derivative_first(const FunctionalSpec& f, double tau, double t,
                                                const DiscretePath& w, const ParticleMeasure& mu,
                                                int which, DerivMode mode = DerivMode::automatic,
                                                const FdConfig& cfg = {}) {
  if (tau > t + 1e-12) throw std::domain_error("measure_derivative: tau must satisfy tau <= t");
  if (which < 0 || which >= mu.size())
    throw std::invalid_argument("measure_derivative: particle index out of range");
  const bool use_analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  if (use_analytic) return f.dsl().mu_kernel(tau, t, w, mu, mu.particle(which));
  return fd_mu_kernel(f, tau, t, w, mu, which, cfg);
}

inline Eigen::MatrixXd measure_derivative_second(const FunctionalSpec& f, double tau, double t,
                                                 const DiscretePath& w, const ParticleMeasure& mu,
                                                 int which, DerivMode mode = DerivMode::automatic,
                                                 const FdConfig& cfg = {}) {
  if (tau > t + 1e-12) throw std::domain_error("measure_derivative: tau must satisfy tau <= t");
  if (which < 0 || which >= mu.size())
    throw std::invalid_argument("measure_derivative: particle index out of range");
  const bool use_analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  if (use_analytic) return f.dsl().mu_kernel_deriv(tau, t, w, mu, mu.particle(which));
  return fd_mu_kernel_deriv(f, tau, t, w, mu, which, cfg);
}

inline Eigen::MatrixXd measure_derivative(const FunctionalSpec& f, double tau, double t,
                                          const DiscretePath& w, const ParticleMeasure& mu,
                                          int which, int order,
                                          DerivMode mode = DerivMode::automatic,
                                          const FdConfig& cfg = {}) {
  if (order == 1) return measure_derivative_first(f, tau, t, w, mu, which, mode, cfg);
  if (order == 2) return measure_derivative_second(f, tau, t, w, mu, which, mode, cfg);
  throw std::invalid_argument("measure_derivative: order must be 1 or 2");
}

// Every derivative the functional Ito decomposition consumes, tagged with
// the cut-off pair and the evaluation mode actually used per field.
struct DerivativeBundle {
  double tau = 0.0;
  double t = 0.0;
  double time_deriv = 0.0;
  Eigen::VectorXd d_omega;
  Eigen::MatrixXd d2_omega;
  Eigen::MatrixXd mu_kernel_particles;                 // one row per particle
  std::vector<Eigen::MatrixXd> mu_kernel_deriv_particles;
  std::string mode_time, mode_path, mode_measure;
};

inline DerivativeBundle derivative_bundle(const FunctionalSpec& f, double tau, double t,
                                          const DiscretePath& w, const ParticleMeasure& mu,
                                          const FdConfig& cfg = {},
                                          DerivMode mode = DerivMode::automatic) {
  const bool analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());
  DerivativeBundle b;
  b.tau = tau;
  b.t = t;
  b.mode_time = b.mode_path = b.mode_measure = analytic ? "analytic" : "fd";
  if (analytic) {
    b.time_deriv = f.dsl().horizontal(t, w, mu);
    b.d_omega = f.dsl().svd1(tau, t, w, mu);
    b.d2_omega = f.dsl().svd2(tau, t, w, mu);
    b.mu_kernel_particles.resize(mu.size(), mu.dim());
    b.mu_kernel_deriv_particles.reserve(mu.size());
    for (int i = 0; i < mu.size(); ++i) {
      b.mu_kernel_particles.row(i) =
          f.dsl().mu_kernel(tau, t, w, mu, mu.particle(i)).transpose();
      b.mu_kernel_deriv_particles.push_back(
          f.dsl().mu_kernel_deriv(tau, t, w, mu, mu.particle(i)));
    }
    return b;
  }
  b.time_deriv = fd_horizontal(f, t, w, mu, cfg);
  b.d_omega = fd_svd1(f, tau, t, w, mu, cfg);
  b.d2_omega = fd_svd2(f, tau, t, w, mu, cfg);
  b.mu_kernel_particles.resize(mu.size(), mu.dim());
  b.mu_kernel_deriv_particles.reserve(mu.size());
  for (int i = 0; i < mu.size(); ++i) {
    b.mu_kernel_particles.row(i) = fd_mu_kernel(f, tau, t, w, mu, i, cfg).transpose();
    b.mu_kernel_deriv_particles.push_back(fd_mu_kernel_deriv(f, tau, t, w, mu, i, cfg));
  }
  return b;
}

}  // namespace pathfield
