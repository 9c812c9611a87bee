// pathfield: field-level interface over the two-stage solver. The decoupling
// field u(t, gamma, mu) of the state/law system, its derivative fields, a
// plain-expectation evaluation for source-only data, a finite-difference
// residual assembly of the field equation
//   du/dt + 1/2 tr[d2u/dw2 s1 s1^T] + du/dw . b1
//         + 1/2 tr[E^mu[dw~ dmu u] s2 s2^T] + E^mu[dmu u . b2]
//         + f(t, gamma, u, s1 du/dw, mu, law(u)) = 0,  u(T) = Phi,
// with an explicit error budget, flow and comparison diagnostics, and a
// catalog of closed-form fields with time-delayed blocks.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/bsde.hpp"
#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/generator.hpp"
#include "pathfield/grid.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/mollify.hpp"
#include "pathfield/path.hpp"
#include "pathfield/smooth.hpp"
#include "pathfield/tables.hpp"
#include "pathfield/variation.hpp"

namespace pathfield {

// Structural family of the problem data. The tag pins which arguments the
// terminal and the generator may read; validate_master enforces what is
// checkable (analytic blocks), and the residual assembly drops the
// differential terms that vanish identically under the tag.
enum class Preset { general, state_dependent, ppde, measure_only, path_state_mixed };

inline const char* preset_name(Preset p) {
  switch (p) {
    case Preset::general: return "general";
    case Preset::state_dependent: return "state-dependent";
    case Preset::ppde: return "ppde";
    case Preset::measure_only: return "measure-only";
    case Preset::path_state_mixed: return "path-state-mixed";
  }
  return "general";
}

inline Preset preset_from_name(const std::string& name) {
  if (name == "general") return Preset::general;
  if (name == "state-dependent") return Preset::state_dependent;
  if (name == "ppde") return Preset::ppde;
  if (name == "measure-only") return Preset::measure_only;
  if (name == "path-state-mixed") return Preset::path_state_mixed;
  throw std::invalid_argument("preset_from_name: unknown preset '" + name + "'");
}

struct MasterProblem {
  BsdeProblem base;  // terminal, generator, coefficient quadruple, grid, sampling
  Preset preset = Preset::general;
};

// A scalar estimate with one standard error of its sampling noise.
struct PointEstimate {
  double value = 0.0;
  double se = 0.0;
};

// Additive pieces of the assembled equation residual; `residual` below is
// their sum, kept as a bookkeeping identity.
struct ResidualTerms {
  double time_shift = 0.0;   // one-sided time difference on stopped arguments
  double state_drift = 0.0;  // b1 . first state derivative
  double state_diff = 0.0;   // 1/2 s1^2 . second state derivative
  double law_drift = 0.0;    // b2 . measure derivative, averaged over particles
  double law_diff = 0.0;     // 1/2 s2^2 . mixed measure derivative, averaged
  double source = 0.0;       // generator at the assembled field arguments
};

// One field evaluation with whatever derivative sub-estimates the calling
// operation produced. Unset optionals were not requested or not defined.
struct FieldEstimate {
  double t = 0.0;
  double value = 0.0;
  double value_stderr = 0.0;
  int N = 0;  // conditioned-ensemble samples
  int M = 0;  // law particles
  std::optional<PointEstimate> du_t;   // time derivative (stopped arguments)
  std::optional<PointEstimate> du_w;   // first state derivative
  std::optional<PointEstimate> du_ww;  // second state derivative
  std::vector<PointEstimate> du_mu;    // measure derivative at each law particle
  std::vector<PointEstimate> du_wmu;   // mixed second derivative at each law particle
  std::optional<PointEstimate> du_mu_probe;   // measure derivative at an explicit probe
  std::optional<PointEstimate> du_wmu_probe;  // mixed derivative at an explicit probe
  std::optional<ResidualTerms> terms;
  double residual = 0.0;
  double budget = 0.0;         // 3 x propagated sampling error + bias allowance
  double bias_constant = 0.0;  // step-halving calibration of the bias allowance
  bool near_kink = false;      // t within two grid cells of a declared time kink
  bool checks_ok = true;       // cross-checks between independent estimators
  std::vector<std::string> notes;
};

struct MasterOptions {
  FdConfig fd;                             // step policy for all finite differences
  DerivMode mode = DerivMode::automatic;   // analytic channels vs finite differences
  bool cross_check = true;                 // bump-and-resolve agreement checks
  bool calibrate_budget = true;            // half-step pass sizing the bias allowance
  std::vector<double> kink_times;          // known time kinks of the data
  int time_steps = 1;                      // grid cells of the one-sided time difference
  int flow_samples = 4;                    // nested evaluations per flow probe
  int flow_probes = 4;                     // probe times of the flow sweep
  double check_floor = 1e-2;               // absolute floor of cross-check tolerances
};

// A field evaluator the residual assembly can probe at perturbed arguments.
// `eval` is required; `eval_ordered` evaluates without canonicalizing the
// particle order (finite-difference lifts need it so a bumped particle keeps
// its noise stream); the derivative channels, when all present, admit an
// analytic residual with no stencil error. `diag` returns the field on the
// measure's own particles (the law-of-the-solution argument).
struct FieldProvider {
  std::string name;
  bool mc_backed = false;  // evaluations carry Monte Carlo noise
  std::function<PointEstimate(double, const DiscretePath&, const ParticleMeasure&)> eval;
  std::function<PointEstimate(double, const DiscretePath&, const ParticleMeasure&)> eval_ordered;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> dt_field;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> dw_field;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> dww_field;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&, int)> dmu_field;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&, int)> dwmu_field;
  std::function<std::vector<double>(double, const ParticleMeasure&)> diag;
  std::vector<double> kink_times;

  bool analytic_complete() const {
    return static_cast<bool>(dt_field) && static_cast<bool>(dw_field) &&
           static_cast<bool>(dww_field) && static_cast<bool>(dmu_field) &&
           static_cast<bool>(dwmu_field);
  }
};

// ---------------------------------------------------------------------------
// Preset validation
// ---------------------------------------------------------------------------

namespace detail {

inline void check_preset_leaves(const FunctionalSpec& spec, const char* piece, Preset preset,
                                std::vector<std::string>& notes) {
  if (!spec.analytic()) {
    notes.push_back(std::string(piece) +
                    ": preset constraints are not verifiable on an opaque functional");
    return;
  }
  for (const Leaf& l : spec.dsl().leaves()) {
    switch (preset) {
      case Preset::state_dependent:
        if (l.kind != LeafKind::path_eval && l.kind != LeafKind::measure_eval)
          throw std::invalid_argument(std::string("validate_master: ") + piece +
                                      " under the state-dependent preset admits current-value "
                                      "blocks only");
        break;
      case Preset::ppde:
        if (l.is_measure())
          throw std::invalid_argument(std::string("validate_master: ") + piece +
                                      " under the ppde preset admits no measure dependence");
        break;
      case Preset::measure_only:
        if (!l.is_measure())
          throw std::invalid_argument(std::string("validate_master: ") + piece +
                                      " under the measure-only preset admits no state-path "
                                      "dependence");
        break;
      case Preset::path_state_mixed:
        if (l.is_measure() && l.kind != LeafKind::measure_eval)
          throw std::invalid_argument(std::string("validate_master: ") + piece +
                                      " under the path-state-mixed preset admits current-value "
                                      "measure blocks only");
        break;
      case Preset::general:
        break;
    }
  }
}

inline bool unit_diffusion(const std::function<Eigen::MatrixXd(double)>& s, double t) {
  if (!s) return true;  // unset means identity by convention
  const Eigen::MatrixXd m = s(t);
  return m.rows() == m.cols() && m.isIdentity(1e-12);
}

}  // namespace detail

// Throws on verifiable preset violations; returns notes for the parts that
// cannot be checked (opaque blocks).
inline std::vector<std::string> validate_master(const MasterProblem& mp) {
  std::vector<std::string> notes;
  const BsdeProblem& p = mp.base;
  if (mp.preset == Preset::general) return notes;
  detail::check_preset_leaves(p.terminal, "terminal", mp.preset, notes);
  if (p.f.analytic()) {
    const StructuredGenerator& parts = p.f.parts();
    if (parts.has_source)
      detail::check_preset_leaves(parts.source, "generator source", mp.preset, notes);
    const bool no_nu_preset = mp.preset == Preset::ppde || mp.preset == Preset::measure_only ||
                              mp.preset == Preset::path_state_mixed;
    if (no_nu_preset && parts.has_nu)
      throw std::invalid_argument(std::string("validate_master: the ") +
                                  preset_name(mp.preset) +
                                  " preset admits no dependence on the law of the solution");
    if (mp.preset == Preset::measure_only && parts.gz.size() > 0)
      throw std::invalid_argument(
          "validate_master: the measure-only preset admits no gradient dependence");
  } else {
    notes.push_back("generator: preset constraints are not verifiable on an opaque generator");
  }
  if (mp.preset == Preset::state_dependent) {
    for (double s : {0.0, 0.5 * p.grid.horizon(), p.grid.horizon()}) {
      if (!detail::unit_diffusion(p.coeffs.sigma1, s) ||
          !detail::unit_diffusion(p.coeffs.sigma2, s))
        throw std::invalid_argument(
            "validate_master: the state-dependent preset requires unit diffusions");
    }
  }
  return notes;
}

// ---------------------------------------------------------------------------
// Two-stage evaluation plumbing
// ---------------------------------------------------------------------------

namespace detail {

struct FieldSolves {
  ParticleMeasure mu_sorted;  // canonical order; every lifted solve reuses it
  BsdeSolution diagonal;      // law-stage system, ordered as mu_sorted
  BsdeSolution conditioned;   // state-stage system under the frozen flows
  FrozenLaws frozen;
  int kt = 0;
  double tsnap = 0.0;
};

inline ParticleMeasure canonical_measure(const ParticleMeasure& mu) {
  const std::vector<int> ranks = mu.canonical_ranks();
  std::vector<int> order(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) order[ranks[i]] = static_cast<int>(i);
  std::vector<DiscretePath> sorted;
  sorted.reserve(order.size());
  for (int idx : order) sorted.push_back(mu.particle(idx));
  return ParticleMeasure(std::move(sorted));
}

inline void check_master_args(const MasterProblem& mp, const DiscretePath& gamma,
                              const ParticleMeasure& mu) {
  if (!gamma.grid().same_as(mp.base.grid) || !mu.grid().same_as(mp.base.grid))
    throw std::invalid_argument("master: path and measure grids must match the problem grid");
  if (gamma.dim() != mp.base.coeffs.dim || mu.dim() != mp.base.coeffs.dim)
    throw std::invalid_argument(
        "master: path and measure dimensions must match the coefficients");
}

inline FieldSolves base_solves(const MasterProblem& mp, const DiscretePath& gamma,
                               const ParticleMeasure& mu, double t) {
  check_master_args(mp, gamma, mu);
  FieldSolves fs;
  fs.kt = mp.base.grid.snap_index(t);
  fs.tsnap = mp.base.grid.t(fs.kt);
  fs.mu_sorted = canonical_measure(mu);
  fs.diagonal = solve_mf_bsde_ordered(mp.base, fs.mu_sorted, fs.tsnap);
  fs.frozen = FrozenLaws{fs.diagonal.law_paths, fs.diagonal.nu, mp.base.f.depends_on_law()};
  fs.conditioned = solve_bsde_regression(mp.base, gamma, fs.tsnap, fs.frozen);
  return fs;
}

// State-stage re-solve under the same frozen flows; used for bumps of the
// path argument, which leave the law stage untouched. Returns the per-sample
// pathwise column: differences of these between coupled solves cancel shared
// noise sample by sample, which the regression-smoothed start column (a
// constant) cannot.
inline Eigen::VectorXd conditioned_column(const MasterProblem& mp, const FieldSolves& fs,
                                          const DiscretePath& gamma2) {
  BsdeSolution s = solve_bsde_regression(mp.base, gamma2, fs.tsnap, fs.frozen);
  return s.pathwise;
}

// Full two-stage re-solve keeping the caller's particle order, so that a
// bumped measure stays noise-coupled to the unbumped one sample by sample.
// Returns the conditioned pathwise column of the solve started at t2.
inline Eigen::VectorXd lifted_column(const MasterProblem& mp, const DiscretePath& gamma2,
                                     const ParticleMeasure& mu2, double t2) {
  BsdeSolution diag = solve_mf_bsde_ordered(mp.base, mu2, t2);
  FrozenLaws frz{diag.law_paths, diag.nu, mp.base.f.depends_on_law()};
  BsdeSolution cond = solve_bsde_regression(mp.base, gamma2, t2, frz);
  return cond.pathwise;
}

inline ParticleMeasure bump_particle(const ParticleMeasure& mu, int which, double tau,
                                     double eps) {
  std::vector<DiscretePath> parts = mu.particles();
  parts[static_cast<std::size_t>(which)] =
      bump_path(parts[static_cast<std::size_t>(which)], tau, eps);
  return ParticleMeasure(std::move(parts));
}

inline PointEstimate column_estimate(const Eigen::VectorXd& col, bool antithetic) {
  return PointEstimate{col.mean(), mean_stderr(col, antithetic)};
}

inline void merge_notes(std::vector<std::string>& dst, const std::vector<std::string>& src) {
  for (const std::string& n : src) add_note(&dst, n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// decoupling_field: two-stage evaluation of u(t, gamma, mu)
// ---------------------------------------------------------------------------

// Stage one solves the system along the law flow started from mu; stage two
// solves the conditioned equation along continuations of gamma under the
// frozen measure and solution-law flows. Stopped arguments are implicit:
// both stages read gamma and mu only up to time t.
inline FieldEstimate decoupling_field(const MasterProblem& mp, const DiscretePath& gamma,
                                      const ParticleMeasure& mu, double t) {
  std::vector<std::string> notes = validate_master(mp);
  detail::FieldSolves fs = detail::base_solves(mp, gamma, mu, t);
  FieldEstimate est;
  est.t = fs.tsnap;
  est.value = fs.conditioned.value;
  est.value_stderr = fs.conditioned.value_stderr;
  est.N = mp.base.N;
  est.M = mu.size();
  est.notes = std::move(notes);
  detail::merge_notes(est.notes, fs.diagonal.notes);
  detail::merge_notes(est.notes, fs.conditioned.notes);
  return est;
}

// The decoupling field packaged as a provider for the residual assembly.
inline FieldProvider field_provider(const MasterProblem& mp) {
  FieldProvider pr;
  pr.name = "decoupling";
  pr.mc_backed = true;
  pr.eval = [mp](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    FieldEstimate fe = decoupling_field(mp, w, mu, t);
    return PointEstimate{fe.value, fe.value_stderr};
  };
  pr.eval_ordered = [mp](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    detail::check_master_args(mp, w, mu);
    const double ts = mp.base.grid.t(mp.base.grid.snap_index(t));
    BsdeSolution diag = detail::solve_mf_bsde_ordered(mp.base, mu, ts);
    FrozenLaws frz{diag.law_paths, diag.nu, mp.base.f.depends_on_law()};
    BsdeSolution cond = solve_bsde_regression(mp.base, w, ts, frz);
    return PointEstimate{cond.value, cond.value_stderr};
  };
  pr.diag = [mp](double t, const ParticleMeasure& mu) {
    const int kt = mp.base.grid.snap_index(t);
    BsdeSolution diag = detail::solve_mf_bsde_ordered(mp.base, mu, mp.base.grid.t(kt));
    return diag.nu[static_cast<std::size_t>(kt)];
  };
  return pr;
}

// ---------------------------------------------------------------------------
// sobolev_eval: plain expectation for source-only generators
// ---------------------------------------------------------------------------

namespace detail {

inline FieldEstimate sobolev_eval_ordered(const MasterProblem& mp, const DiscretePath& gamma,
                                          const ParticleMeasure& mu, double t) {
  const BsdeProblem& p = mp.base;
  if (!p.f.analytic())
    throw std::logic_error(
        "sobolev_eval: an opaque generator cannot be verified to be free of solution "
        "arguments; pass the source as a structured generator");
  const StructuredGenerator& parts = p.f.parts();
  if (parts.has_y || parts.gz.size() > 0 || parts.has_nu)
    throw std::invalid_argument(
        "sobolev_eval: generator must be free of (value, gradient, law-of-value) arguments");
  check_master_args(mp, gamma, mu);
  const int kt = p.grid.snap_index(t);
  const double tsnap = p.grid.t(kt);
  const int K = p.grid.nodes();
  const double dt = p.grid.dt();

  // Same stream labels and seed as the two-stage solver, so a comparison
  // between the two evaluations differs only in the backward pass.
  SimOptions lopt;
  lopt.label = "bsde-law-flow";
  lopt.antithetic = p.antithetic;
  ParticleMeasure law = continue_measure(p.coeffs, mu, tsnap, p.seed, lopt);
  SimOptions sopt;
  sopt.label = "bsde-state";
  sopt.antithetic = p.antithetic;
  ParticleMeasure ens = simulate_forward(p.coeffs, gamma, tsnap, p.N, p.seed, sopt);

  Eigen::VectorXd acc = terminal_column(p.terminal, ens, law, p.threads);
  if (parts.has_source) {
    const Eigen::MatrixXd tab = functional_value_table(parts.source, ens, law);
    for (int k = kt; k + 1 < K; ++k) acc += dt * tab.col(k);
  }
  FieldEstimate est;
  est.t = tsnap;
  est.value = acc.mean();
  est.value_stderr = mean_stderr(acc, p.antithetic);
  est.N = p.N;
  est.M = mu.size();
  return est;
}

}  // namespace detail

// When the generator reads none of (value, gradient, law of the value), the
// field is the plain expectation of terminal plus left-point source
// quadrature along the same forward ensembles the two-stage solver uses.
inline FieldEstimate sobolev_eval(const MasterProblem& mp, const DiscretePath& gamma,
                                  const ParticleMeasure& mu, double t) {
  std::vector<std::string> notes = validate_master(mp);
  FieldEstimate est =
      detail::sobolev_eval_ordered(mp, gamma, mu.size() > 0 ? detail::canonical_measure(mu) : mu, t);
  detail::merge_notes(est.notes, notes);
  return est;
}

// Convenience shape: terminal and source given directly, standard coefficients.
inline FieldEstimate sobolev_eval(const FunctionalSpec& phi, const FunctionalSpec& f,
                                  const DiscretePath& omega, const ParticleMeasure& mu,
                                  double t, int N, std::uint64_t seed) {
  MasterProblem mp;
  mp.base.coeffs = DiffusionCoeffs::standard(omega.dim());
  mp.base.grid = omega.grid();
  mp.base.terminal = phi;
  mp.base.f = Generator::zero().with_source(f);
  mp.base.N = N;
  mp.base.seed = seed;
  return sobolev_eval(mp, omega, mu, t);
}

inline FieldProvider sobolev_provider(const MasterProblem& mp) {
  FieldProvider pr;
  pr.name = "sobolev";
  pr.mc_backed = true;
  pr.eval = [mp](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    FieldEstimate fe = sobolev_eval(mp, w, mu, t);
    return PointEstimate{fe.value, fe.value_stderr};
  };
  pr.eval_ordered = [mp](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    FieldEstimate fe = detail::sobolev_eval_ordered(mp, w, mu, t);
    return PointEstimate{fe.value, fe.value_stderr};
  };
  return pr;
}

// ---------------------------------------------------------------------------
// derivative_fields: variation solves plus identity and bump cross-checks
// ---------------------------------------------------------------------------

// Derivatives of the field at time t with respect to bumps placed at an
// earlier time tau <= t: first and second state derivatives, and (against an
// explicit probe path) the measure derivative and its mixed second variant.
// order = 1 restricts to first derivatives. Every variation estimate is
// cross-checked against a bump-and-resolve difference under common random
// numbers when cross_check is set.
inline FieldEstimate derivative_fields(const MasterProblem& mp, const DiscretePath& gamma,
                                       const ParticleMeasure& mu, double t, double tau,
                                       const std::optional<DiscretePath>& probe = std::nullopt,
                                       int order = 2, const MasterOptions& opt = {}) {
  if (mp.base.coeffs.dim != 1)
    throw std::invalid_argument(
        "derivative_fields: derivative assembly is scoped to one-dimensional state (d = 1)");
  std::vector<std::string> notes = validate_master(mp);
  detail::FieldSolves fs = detail::base_solves(mp, gamma, mu, t);
  const BsdeProblem& p = mp.base;
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const bool anti = p.antithetic;
  const double tausnap = g.t(g.snap_index(tau));
  if (tausnap > fs.tsnap + 1e-12)
    throw std::invalid_argument("derivative_fields: bump time tau must not exceed t");

  FieldEstimate est;
  est.t = fs.tsnap;
  est.value = fs.conditioned.value;
  est.value_stderr = fs.conditioned.value_stderr;
  est.N = p.N;
  est.M = mu.size();
  est.notes = std::move(notes);
  detail::merge_notes(est.notes, fs.conditioned.notes);

  VariationOptions vopt;
  vopt.mode = opt.mode;
  vopt.fd = opt.fd;

  // Time derivative: one-sided grid-step difference with stopped arguments,
  // formed on the coupled pathwise columns.
  const Eigen::VectorXd Y0 = fs.conditioned.pathwise;
  const DiscretePath gamma_t = stop_path(gamma, fs.tsnap);
  const ParticleMeasure mu_t = fs.mu_sorted.stopped(fs.tsnap);
  if (fs.kt + 1 < K) {
    const int m = std::min(std::max(opt.time_steps, 1), K - 1 - fs.kt);
    const double ht = m * g.dt();
    const Eigen::VectorXd shifted = detail::lifted_column(mp, gamma_t, mu_t, g.t(fs.kt + m));
    est.du_t = detail::column_estimate((shifted - Y0) / ht, anti);
  } else {
    detail::add_note(&est.notes, "time derivative is undefined at the horizon");
  }

  // State derivatives from the variation equations.
  BsdeSolution v1 = solve_variation_bsde(VariationKind::path_first(tausnap), fs.diagonal,
                                         fs.conditioned, p, vopt);
  est.du_w = PointEstimate{v1.value, v1.value_stderr};
  detail::merge_notes(est.notes, v1.notes);
  if (order >= 2) {
    BsdeSolution v2 = solve_variation_bsde(VariationKind::path_second(tausnap), fs.diagonal,
                                           fs.conditioned, p, vopt);
    est.du_ww = PointEstimate{v2.value, v2.value_stderr};
    detail::merge_notes(est.notes, v2.notes);
  }

  // Gradient identity at tau = t: the start-node martingale weight of the
  // conditioned system equals sigma1 times the first state derivative. The
  // weight estimate at the start node is the mean of the raw regressand
  // Y(k+1) dW / dt, so its honest noise comes from that column's spread.
  const double s1 = p.coeffs.diff1(fs.tsnap)(0, 0);
  if (g.snap_index(tausnap) == fs.kt && fs.kt + 1 < K) {
    const double zbar = fs.conditioned.Z[fs.kt].col(0).mean();
    const Eigen::VectorXd zraw =
        fs.conditioned.Y.col(fs.kt + 1)
            .cwiseProduct(detail::dw_at(fs.conditioned.forward, fs.kt).col(0)) /
        g.dt();
    const double sez = detail::mean_stderr(zraw, anti);
    const double gap = std::abs(s1 * est.du_w->value - zbar);
    const double tol =
        std::max(3.0 * (std::abs(s1) * est.du_w->se + sez), opt.check_floor);
    if (gap > tol) {
      est.checks_ok = false;
      est.notes.push_back("gradient identity check failed: |sigma1*du_w - Z| = " +
                          detail::fmt_num(gap) + " > " + detail::fmt_num(tol));
    }
  }

  // Measure derivatives at an explicit probe path.
  if (probe) {
    if (!probe->grid().same_as(g))
      throw std::invalid_argument("derivative_fields: probe grid must match the problem grid");
    BsdeSolution m1 = solve_variation_bsde(VariationKind::measure_kernel(tausnap, *probe),
                                           fs.diagonal, fs.conditioned, p, vopt);
    est.du_mu_probe = PointEstimate{m1.value, m1.value_stderr};
    detail::merge_notes(est.notes, m1.notes);
    if (order >= 2) {
      try {
        BsdeSolution m2 =
            solve_variation_bsde(VariationKind::measure_kernel_second(tausnap, *probe),
                                 fs.diagonal, fs.conditioned, p, vopt);
        est.du_wmu_probe = PointEstimate{m2.value, m2.value_stderr};
        detail::merge_notes(est.notes, m2.notes);
      } catch (const std::logic_error& e) {
        detail::add_note(&est.notes,
                         std::string("mixed measure derivative unavailable: ") + e.what());
      }
    }
  }

  if (opt.cross_check) {
    // First state derivative against a bump-and-resolve difference under
    // common random numbers.
    const double e1 = opt.fd.h1_at(gamma, tausnap);
    const Eigen::VectorXd cp =
        detail::conditioned_column(mp, fs, bump_path(gamma_t, tausnap, e1));
    const Eigen::VectorXd cm =
        detail::conditioned_column(mp, fs, bump_path(gamma_t, tausnap, -e1));
    const PointEstimate fd1 = detail::column_estimate((cp - cm) / (2.0 * e1), anti);
    double gap = std::abs(est.du_w->value - fd1.value);
    double tol = std::max(3.0 * (est.du_w->se + fd1.se), opt.check_floor);
    if (gap > tol) {
      est.checks_ok = false;
      est.notes.push_back("first state derivative cross-check failed: |variation - bump| = " +
                          detail::fmt_num(gap) + " > " + detail::fmt_num(tol));
    }
    if (order >= 2 && est.du_ww) {
      const double e2 = opt.fd.h2_at(gamma, tausnap);
      const Eigen::VectorXd c2p =
          detail::conditioned_column(mp, fs, bump_path(gamma_t, tausnap, e2));
      const Eigen::VectorXd c2m =
          detail::conditioned_column(mp, fs, bump_path(gamma_t, tausnap, -e2));
      const PointEstimate fd2 =
          detail::column_estimate((c2p - 2.0 * Y0 + c2m) / (e2 * e2), anti);
      gap = std::abs(est.du_ww->value - fd2.value);
      tol = std::max(3.0 * (est.du_ww->se + fd2.se), opt.check_floor);
      if (gap > tol) {
        est.checks_ok = false;
        est.notes.push_back(
            "second state derivative cross-check failed: |variation - bump| = " +
            detail::fmt_num(gap) + " > " + detail::fmt_num(tol));
      }
    }
    if (probe && est.du_mu_probe) {
      // Measure derivative against an augmented-particle lift. The lift
      // carries an O(1/M) bias, so the floor dominates for small ensembles.
      const double em = opt.fd.lift_at(fs.mu_sorted);
      const DiscretePath probe_t = stop_path(*probe, fs.tsnap);
      const ParticleMeasure aug_p =
          detail::augment_measure(mu_t, bump_path(probe_t, tausnap, em));
      const ParticleMeasure aug_m =
          detail::augment_measure(mu_t, bump_path(probe_t, tausnap, -em));
      const double mult = static_cast<double>(mu.size() + 1);
      const Eigen::VectorXd lp = detail::lifted_column(mp, gamma, aug_p, fs.tsnap);
      const Eigen::VectorXd lm = detail::lifted_column(mp, gamma, aug_m, fs.tsnap);
      const PointEstimate fdm =
          detail::column_estimate(mult * (lp - lm) / (2.0 * em), anti);
      gap = std::abs(est.du_mu_probe->value - fdm.value);
      tol = std::max(3.0 * (est.du_mu_probe->se + fdm.se), opt.check_floor);
      if (gap > tol) {
        est.checks_ok = false;
        est.notes.push_back("measure derivative cross-check failed: |variation - lift| = " +
                            detail::fmt_num(gap) + " > " + detail::fmt_num(tol));
      }
    }
  }
  return est;
}

inline FieldEstimate derivative_fields(const MasterProblem& mp, const DiscretePath& gamma,
                                       const ParticleMeasure& mu, double t,
                                       const std::optional<DiscretePath>& probe = std::nullopt,
                                       const MasterOptions& opt = {}) {
  return derivative_fields(mp, gamma, mu, t, t, probe, 2, opt);
}

// ---------------------------------------------------------------------------
// pde_residual: assembly of the field equation from a provider
// ---------------------------------------------------------------------------

// Assembles every term of the field equation from the provider: a one-sided
// time difference with stopped arguments, centered path-bump differences at
// t, particle lifts summed over the measure, and the generator evaluated at
// (t, gamma_t, u, s1 du_w, mu_t, law of u on the particles). When the
// provider carries a complete set of analytic derivative channels and the
// mode allows it, those are used instead and the stencil error vanishes.
//
// The budget is 3 x the evaluation noise propagated through each stencil
// plus a bias allowance C_fd (h1^2 + h2) calibrated by re-assembling at half
// steps, plus a floating-point rounding allowance for the stencil divisions.
// The first-order bias of the one-sided time step is not calibrated
// separately: it rides the provider's own time discretization.
inline FieldEstimate pde_residual(const MasterProblem& mp, const FieldProvider& provider,
                                  const DiscretePath& gamma, const ParticleMeasure& mu,
                                  double t, const MasterOptions& opt = {}) {
  if (mp.base.coeffs.dim != 1)
    throw std::invalid_argument(
        "pde_residual: residual assembly is scoped to one-dimensional state (d = 1)");
  if (!provider.eval)
    throw std::invalid_argument("pde_residual: provider has no evaluator");
  detail::check_master_args(mp, gamma, mu);
  const BsdeProblem& p = mp.base;
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int kt = g.snap_index(t);
  const double tsnap = g.t(kt);
  if (kt + 1 >= K)
    throw std::invalid_argument("pde_residual: t must lie strictly before the horizon");

  FieldEstimate est;
  est.t = tsnap;
  est.N = p.N;
  est.M = mu.size();
  est.notes = validate_master(mp);

  // Kink guard: declared kinks, the provider's kinks, and the cut-off times
  // of frozen blocks in the problem data.
  std::vector<double> kinks = opt.kink_times;
  kinks.insert(kinks.end(), provider.kink_times.begin(), provider.kink_times.end());
  auto harvest = [&kinks](const FunctionalSpec& spec) {
    if (!spec.analytic()) return;
    for (const Leaf& l : spec.dsl().leaves())
      if (l.kind == LeafKind::frozen_eval || l.kind == LeafKind::measure_frozen)
        kinks.push_back(l.t0);
  };
  harvest(p.terminal);
  if (p.f.analytic() && p.f.parts().has_source) harvest(p.f.parts().source);
  for (double tk : kinks) {
    if (std::abs(tsnap - tk) <= 2.0 * g.dt() + 1e-12) {
      est.near_kink = true;
      detail::add_note(&est.notes,
                       "t lies within the kink guard band (two grid cells) of a time kink; "
                       "the residual budget does not cover the kink");
      break;
    }
  }

  const DiscretePath gamma_t = stop_path(gamma, tsnap);
  const ParticleMeasure mu_t = detail::canonical_measure(mu).stopped(tsnap);
  const int M = mu.size();
  const double Md = static_cast<double>(M);
  const double b1 = p.coeffs.drift1(tsnap)(0);
  const double s1 = p.coeffs.diff1(tsnap)(0, 0);
  const double b2 = p.coeffs.drift2(tsnap)(0);
  const double s2 = p.coeffs.diff2(tsnap)(0, 0);
  const bool skip_path = (mp.preset == Preset::measure_only);
  const bool skip_law = (mp.preset == Preset::ppde);
  const auto& E = provider.eval_ordered ? provider.eval_ordered : provider.eval;

  const PointEstimate u0 = E(tsnap, gamma_t, mu_t);
  est.value = u0.value;
  est.value_stderr = u0.se;

  const bool analytic = opt.mode == DerivMode::analytic ||
                        (opt.mode == DerivMode::automatic && provider.analytic_complete());
  if (opt.mode == DerivMode::analytic && !provider.analytic_complete())
    throw std::invalid_argument(
        "pde_residual: analytic mode requires a provider with all derivative channels");

  // The law-of-the-solution argument of the generator: the field on the
  // measure's own particles.
  std::vector<double> nu0;
  const bool needs_nu =
      !p.f.analytic() || p.f.parts().has_nu;  // opaque generators may read it
  if (needs_nu) {
    if (provider.diag) {
      nu0 = provider.diag(tsnap, mu_t);
    } else {
      nu0.reserve(static_cast<std::size_t>(M));
      for (int j = 0; j < M; ++j) nu0.push_back(E(tsnap, mu_t.particle(j), mu_t).value);
    }
  }

  auto finish = [&](const ResidualTerms& terms, double mc, double fp_allow, double cfd,
                    double e1, double e2) {
    est.terms = terms;
    est.residual = terms.time_shift + terms.state_drift + terms.state_diff + terms.law_drift +
                   terms.law_diff + terms.source;
    // Generator sensitivity to the sampled field arguments.
    Eigen::VectorXd zv(1);
    zv(0) = s1 * (std::abs(s1) > 0.0 && est.du_w ? est.du_w->value : 0.0);
    double fmc = std::abs(p.f.dy(tsnap, gamma_t, u0.value, zv, mu_t, nu0)) * u0.se;
    if (est.du_w)
      fmc += p.f.dz(tsnap, gamma_t, u0.value, zv, mu_t, nu0).cwiseAbs().sum() *
             std::abs(s1) * est.du_w->se;
    if (p.f.analytic() && p.f.parts().has_nu && !nu0.empty()) {
      const LawStat& st = p.f.parts().stat;
      if (st.separable()) {
        Eigen::VectorXd tr(static_cast<int>(nu0.size()));
        for (std::size_t i = 0; i < nu0.size(); ++i) tr(static_cast<int>(i)) = st.phi(nu0[i]);
        fmc += std::abs(p.f.parts().gnu.d1(st.value(nu0))) *
               detail::mean_stderr(tr, /*antithetic=*/false);
      } else {
        detail::add_note(&est.notes,
                         "law-statistic sampling error is not included in the budget "
                         "(non-separable statistic)");
      }
    } else if (!p.f.analytic() && !nu0.empty()) {
      detail::add_note(&est.notes,
                       "law-argument sampling error is not included in the budget "
                       "(opaque generator)");
    }
    est.bias_constant = cfd;
    est.budget = 3.0 * (mc + fmc) + cfd * (e1 * e1 + e2) + fp_allow;
  };

  if (analytic) {
    ResidualTerms terms;
    terms.time_shift = provider.dt_field(tsnap, gamma_t, mu_t);
    est.du_t = PointEstimate{terms.time_shift, 0.0};
    const double dw = provider.dw_field(tsnap, gamma_t, mu_t);
    const double dww = provider.dww_field(tsnap, gamma_t, mu_t);
    est.du_w = PointEstimate{dw, 0.0};
    est.du_ww = PointEstimate{dww, 0.0};
    terms.state_drift = b1 * dw;
    terms.state_diff = 0.5 * s1 * s1 * dww;
    double l1 = 0.0, l2 = 0.0;
    for (int j = 0; j < M; ++j) {
      const double dmu = provider.dmu_field(tsnap, gamma_t, mu_t, j);
      const double dwmu = provider.dwmu_field(tsnap, gamma_t, mu_t, j);
      est.du_mu.push_back(PointEstimate{dmu, 0.0});
      est.du_wmu.push_back(PointEstimate{dwmu, 0.0});
      l1 += dmu;
      l2 += dwmu;
    }
    terms.law_drift = b2 * l1 / Md;
    terms.law_diff = 0.5 * s2 * s2 * l2 / Md;
    Eigen::VectorXd zv(1);
    zv(0) = s1 * dw;
    terms.source = p.f.value(tsnap, gamma_t, u0.value, zv, mu_t, nu0);
    finish(terms, 0.0, 0.0, 0.0, 0.0, 0.0);
    return est;
  }

  const int m = std::min(std::max(opt.time_steps, 1), K - 1 - kt);
  const double ht = m * g.dt();
  const PointEstimate ut = E(g.t(kt + m), gamma_t, mu_t);

  struct Assembly {
    ResidualTerms terms;
    double mc = 0.0;       // propagated evaluation noise
    double fp = 0.0;       // stencil rounding allowance
    PointEstimate dw, dww;
    std::vector<PointEstimate> dmu, dwmu;
    double residual() const {
      return terms.time_shift + terms.state_drift + terms.state_diff + terms.law_drift +
             terms.law_diff + terms.source;
    }
  };
  const double eps_m = std::numeric_limits<double>::epsilon();
  const double scale = std::max(1.0, std::abs(u0.value));

  auto assemble = [&](double e1, double e2, double em) {
    Assembly a;
    a.terms.time_shift = (ut.value - u0.value) / ht;
    a.mc = std::hypot(ut.se, u0.se) / ht;
    a.fp = 2.0 * eps_m * scale / ht;
    if (!skip_path) {
      const PointEstimate up1 = E(tsnap, bump_path(gamma_t, tsnap, e1), mu_t);
      const PointEstimate um1 = E(tsnap, bump_path(gamma_t, tsnap, -e1), mu_t);
      a.dw = PointEstimate{(up1.value - um1.value) / (2.0 * e1),
                           std::hypot(up1.se, um1.se) / (2.0 * e1)};
      const PointEstimate up2 = E(tsnap, bump_path(gamma_t, tsnap, e2), mu_t);
      const PointEstimate um2 = E(tsnap, bump_path(gamma_t, tsnap, -e2), mu_t);
      a.dww = PointEstimate{
          (up2.value - 2.0 * u0.value + um2.value) / (e2 * e2),
          std::sqrt(up2.se * up2.se + 4.0 * u0.se * u0.se + um2.se * um2.se) / (e2 * e2)};
      a.terms.state_drift = b1 * a.dw.value;
      a.terms.state_diff = 0.5 * s1 * s1 * a.dww.value;
      a.mc += std::abs(b1) * a.dw.se + 0.5 * s1 * s1 * a.dww.se;
      a.fp += std::abs(b1) * eps_m * scale / e1 + 2.0 * s1 * s1 * eps_m * scale / (e2 * e2);
    }
    if (!skip_law && M > 0) {
      double l1 = 0.0, l2 = 0.0, var1 = 0.0, se2 = 0.0;
      for (int j = 0; j < M; ++j) {
        const PointEstimate lp = E(tsnap, gamma_t, detail::bump_particle(mu_t, j, tsnap, em));
        const PointEstimate lm = E(tsnap, gamma_t, detail::bump_particle(mu_t, j, tsnap, -em));
        const double fd = (lp.value - lm.value) / (2.0 * em);
        const double sd = (lp.value - 2.0 * u0.value + lm.value) / (em * em);
        const double fd_se = std::hypot(lp.se, lm.se) / (2.0 * em);
        const double sd_se = std::hypot(lp.se, lm.se) / (em * em);
        a.dmu.push_back(PointEstimate{Md * fd, Md * fd_se});
        a.dwmu.push_back(PointEstimate{Md * sd, Md * sd_se});
        l1 += fd;
        l2 += sd;
        var1 += fd_se * fd_se;
        se2 += sd_se * sd_se;
      }
      a.terms.law_drift = b2 * l1;
      a.terms.law_diff = 0.5 * s2 * s2 * l2;
      // The base value enters every same-particle second stencil; its
      // contribution to the summed term is linear and kept outside the
      // quadrature sum.
      a.mc += std::abs(b2) * std::sqrt(var1) +
              0.5 * s2 * s2 * (std::sqrt(se2) + 2.0 * Md * u0.se / (em * em));
      a.fp += std::abs(b2) * Md * eps_m * scale / em +
              2.0 * s2 * s2 * Md * eps_m * scale / (em * em);
    }
    Eigen::VectorXd zv(1);
    zv(0) = s1 * a.dw.value;
    a.terms.source = p.f.value(tsnap, gamma_t, u0.value, zv, mu_t, nu0);
    return a;
  };

  const double e1 = opt.fd.h1_at(gamma, tsnap);
  const double e2 = opt.fd.h2_at(gamma, tsnap);
  const double em = opt.fd.lift_at(mu_t);
  const Assembly full = assemble(e1, e2, em);
  est.du_t = PointEstimate{full.terms.time_shift, std::hypot(ut.se, u0.se) / ht};
  if (!skip_path) {
    est.du_w = full.dw;
    est.du_ww = full.dww;
  }
  est.du_mu = full.dmu;
  est.du_wmu = full.dwmu;
  double cfd = 0.0;
  if (opt.calibrate_budget) {
    const Assembly half = assemble(0.5 * e1, 0.5 * e2, 0.5 * em);
    cfd = std::abs(full.residual() - half.residual()) / (0.75 * e1 * e1 + 0.5 * e2);
  }
  finish(full.terms, full.mc, full.fp, cfd, e1, e2);
  if (provider.mc_backed && u0.se == 0.0 && !skip_law)
    detail::add_note(&est.notes,
                     "provider reports zero sampling error; law-flow noise of the time "
                     "stencil is not covered by the budget");
  return est;
}

inline FieldEstimate pde_residual(const MasterProblem& mp, const DiscretePath& gamma,
                                  const ParticleMeasure& mu, double t,
                                  const MasterOptions& opt = {}) {
  return pde_residual(mp, field_provider(mp), gamma, mu, t, opt);
}

// ---------------------------------------------------------------------------
// check_flow: the field evaluated along the realized system reproduces the
// backward solution
// ---------------------------------------------------------------------------

struct FlowReport {
  double t = 0.0;
  double s = 0.0;
  int samples = 0;
  double mean_gap = 0.0;
  double gap_stderr = 0.0;   // inner evaluation noise plus cross-sample spread
  double max_abs_gap = 0.0;
  double budget = 0.0;       // 3 x gap_stderr
  bool within_budget = true;
  bool bit_exact = false;    // every sampled gap is exactly zero
  std::vector<std::string> notes;
};

// Re-evaluates the field at time s >= t along states realized by the
// conditioned ensemble, against the stored backward values at s, under
// common random numbers: the law flow is replayed on its own realized paths
// (same streams, so the replay is bit-exact), and each selected state sample
// becomes the path argument of a fresh conditioned solve. At s = T both
// sides reduce to the terminal functional and the gap is exactly zero.
inline FlowReport check_flow(const MasterProblem& mp, const DiscretePath& gamma,
                             const ParticleMeasure& mu, double t, double s,
                             const MasterOptions& opt = {}) {
  FlowReport rep;
  rep.notes = validate_master(mp);
  detail::FieldSolves fs = detail::base_solves(mp, gamma, mu, t);
  const BsdeProblem& p = mp.base;
  const TimeGrid& g = p.grid;
  const int ks = g.snap_index(s);
  if (ks < fs.kt) throw std::invalid_argument("check_flow: s must not precede t");
  rep.t = fs.tsnap;
  rep.s = g.t(ks);

  BsdeSolution diag_s = detail::solve_mf_bsde_ordered(p, fs.diagonal.law_paths, rep.s);
  if ((diag_s.law_paths.particle(0).values().array() !=
       fs.diagonal.law_paths.particle(0).values().array())
          .any())
    detail::add_note(&rep.notes, "law flow replay was not bit-exact at the probe time");
  FrozenLaws frz{diag_s.law_paths, diag_s.nu, p.f.depends_on_law()};

  const int nsamp = std::max(1, std::min(opt.flow_samples, p.N));
  rep.samples = nsamp;
  double acc = 0.0, acc2 = 0.0, inner_se = 0.0;
  bool all_zero = true;
  for (int q = 0; q < nsamp; ++q) {
    const int i = (q * p.N) / nsamp;
    BsdeSolution us =
        solve_bsde_regression(p, fs.conditioned.forward.paths.particle(i), rep.s, frz);
    const double gap = us.value - fs.conditioned.Y(i, ks);
    acc += gap;
    acc2 += gap * gap;
    inner_se += us.value_stderr;
    rep.max_abs_gap = std::max(rep.max_abs_gap, std::abs(gap));
    all_zero = all_zero && gap == 0.0;
  }
  rep.mean_gap = acc / nsamp;
  const double var = std::max(0.0, acc2 / nsamp - rep.mean_gap * rep.mean_gap);
  rep.gap_stderr = inner_se / nsamp + (nsamp > 1 ? std::sqrt(var / nsamp) : 0.0);
  rep.bit_exact = all_zero;
  rep.budget = 3.0 * rep.gap_stderr;
  rep.within_budget = std::abs(rep.mean_gap) <= rep.budget + 1e-15;
  return rep;
}

struct FlowSweep {
  std::vector<FlowReport> probes;
  double max_mean_gap = 0.0;
  bool within_budget = true;
  bool terminal_identity = false;  // the s = T probe was bit-exact
};

// Probes evenly spaced interior times plus the horizon.
inline FlowSweep check_flow(const MasterProblem& mp, const DiscretePath& gamma,
                            const ParticleMeasure& mu, double t, const MasterOptions& opt = {}) {
  FlowSweep sweep;
  const TimeGrid& g = mp.base.grid;
  const int kt = g.snap_index(t);
  const int K = g.nodes();
  const int nprobe = std::max(1, opt.flow_probes);
  int last_ks = -1;
  for (int j = 1; j <= nprobe; ++j) {
    const double s = g.t(kt) + (g.horizon() - g.t(kt)) * static_cast<double>(j) /
                                   static_cast<double>(nprobe + 1);
    const int ks = g.snap_index(s);
    if (ks <= kt || ks >= K - 1 || ks == last_ks) continue;
    last_ks = ks;
    sweep.probes.push_back(check_flow(mp, gamma, mu, t, g.t(ks), opt));
  }
  sweep.probes.push_back(check_flow(mp, gamma, mu, t, g.horizon(), opt));
  sweep.terminal_identity = sweep.probes.back().bit_exact;
  for (const FlowReport& r : sweep.probes) {
    sweep.max_mean_gap = std::max(sweep.max_mean_gap, std::abs(r.mean_gap));
    sweep.within_budget = sweep.within_budget && r.within_budget;
  }
  return sweep;
}

// ---------------------------------------------------------------------------
// compare_fields: two problems evaluated under coupled noise
// ---------------------------------------------------------------------------

struct CompareReport {
  FieldEstimate first, second;
  double margin = 0.0;      // second - first (the ordering margin)
  double noise_band = 0.0;  // 3 x combined standard errors
  std::vector<std::string> notes;
};

// Evaluates both problems at the same point under the first problem's
// sampling (seed, ensemble sizes), so shared noise cancels in the margin.
inline CompareReport compare_fields(const MasterProblem& a, const MasterProblem& b,
                                    const DiscretePath& gamma, const ParticleMeasure& mu,
                                    double t) {
  if (!a.base.grid.same_as(b.base.grid))
    throw std::invalid_argument("compare_fields: problems must share the time grid");
  CompareReport rep;
  MasterProblem b2 = b;
  if (b.base.seed != a.base.seed || b.base.N != a.base.N ||
      b.base.antithetic != a.base.antithetic) {
    b2.base.seed = a.base.seed;
    b2.base.N = a.base.N;
    b2.base.antithetic = a.base.antithetic;
    rep.notes.push_back("second problem re-sampled under the first problem's seed/N");
  }
  rep.first = decoupling_field(a, gamma, mu, t);
  rep.second = decoupling_field(b2, gamma, mu, t);
  rep.margin = rep.second.value - rep.first.value;
  rep.noise_band = 3.0 * (rep.first.value_stderr + rep.second.value_stderr);
  return rep;
}

// ---------------------------------------------------------------------------
// Closed-form catalog: fields with time-delayed blocks, exact on the grid
// ---------------------------------------------------------------------------

struct ClosedFormCase {
  std::string name;
  std::string formula;
  MasterProblem problem;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> field;
  std::vector<double> kink_times;
  // Analytic derivative channels, valid away from the kinks.
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> field_dt;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> field_dw;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&)> field_dww;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&, int)> field_dmu;
  std::function<double(double, const DiscretePath&, const ParticleMeasure&, int)> field_dwmu;

  FieldProvider provider() const {
    FieldProvider pr;
    pr.name = name;
    pr.mc_backed = false;
    auto f = field;
    pr.eval = [f](double t, const DiscretePath& w, const ParticleMeasure& mu) {
      return PointEstimate{f(t, w, mu), 0.0};
    };
    pr.dt_field = field_dt;
    pr.dw_field = field_dw;
    pr.dww_field = field_dww;
    pr.dmu_field = field_dmu;
    pr.dwmu_field = field_dwmu;
    pr.diag = [f](double t, const ParticleMeasure& mu) {
      std::vector<double> out;
      out.reserve(static_cast<std::size_t>(mu.size()));
      for (int j = 0; j < mu.size(); ++j) out.push_back(f(t, mu.particle(j), mu));
      return out;
    };
    pr.kink_times = kink_times;
    return pr;
  }
};

namespace detail {

inline double path_capped(const DiscretePath& w, double t, double t0) {
  const TimeGrid& g = w.grid();
  const int k = std::min(g.snap_index(t), g.snap_index(t0));
  return w.scalar_at(k);
}

inline double measure_capped(const ParticleMeasure& mu, double t, double t0) {
  const TimeGrid& g = mu.grid();
  const int k = std::min(g.snap_index(t), g.snap_index(t0));
  double acc = 0.0;
  for (int i = 0; i < mu.size(); ++i) acc += mu.particle(i).scalar_at(k);
  return acc / static_cast<double>(mu.size());
}

inline MasterProblem shell_problem(const TimeGrid& grid, int N, std::uint64_t seed,
                                   Preset preset) {
  MasterProblem mp;
  mp.preset = preset;
  mp.base.coeffs = DiffusionCoeffs::standard(1);
  mp.base.grid = grid;
  mp.base.N = N;
  mp.base.seed = seed;
  return mp;
}

inline std::function<double(double, const DiscretePath&, const ParticleMeasure&)> cf_zero3() {
  return [](double, const DiscretePath&, const ParticleMeasure&) { return 0.0; };
}

inline std::function<double(double, const DiscretePath&, const ParticleMeasure&, int)>
cf_zero4() {
  return [](double, const DiscretePath&, const ParticleMeasure&, int) { return 0.0; };
}

}  // namespace detail

// u(t, w) = a * w(t ^ t0): heat evolution of the delayed terminal a * w(t0).
// The stopped-argument time derivative vanishes away from the kink: beyond
// t0 the block is frozen, before t0 the field reads the current value only.
inline ClosedFormCase closed_form_delayed_path(const TimeGrid& grid, double a, double t0,
                                               int N, std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "delayed-path";
  c.formula = "a*w(min(t,t0))";
  c.problem = detail::shell_problem(grid, N, seed, Preset::ppde);
  c.problem.base.terminal = FunctionalSpec::frozen_eval(sf_affine(a, 0.0), t0);
  c.field = [a, t0](double t, const DiscretePath& w, const ParticleMeasure&) {
    return a * detail::path_capped(w, t, t0);
  };
  c.kink_times = {t0};
  c.field_dt = detail::cf_zero3();
  c.field_dw = [a, t0](double t, const DiscretePath& w, const ParticleMeasure&) {
    const TimeGrid& g = w.grid();
    return g.snap_index(t) <= g.snap_index(t0) ? a : 0.0;
  };
  c.field_dww = detail::cf_zero3();
  c.field_dmu = detail::cf_zero4();
  c.field_dwmu = detail::cf_zero4();
  return c;
}

// The smoothed counterpart: the delayed block is replaced by its node-mass
// average, and the field is the same average of capped path values. Exact on
// the grid for a linear block, at every smoothing width.
inline ClosedFormCase closed_form_delayed_path_mollified(const TimeGrid& grid, double a,
                                                         double t0, double eps, int N,
                                                         std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "delayed-path-mollified";
  c.formula = "sum_k m_k a*w(min(t,t_k))";
  c.problem = detail::shell_problem(grid, N, seed, Preset::ppde);
  MollifyResult mr = mollify_terminal(sf_affine(a, 0.0), t0, eps, grid);
  c.problem.base.terminal = mr.spec;
  const std::vector<double> masses = mr.spec.dsl().leaves()[0].node_weights;
  c.field = [a, masses](double t, const DiscretePath& w, const ParticleMeasure&) {
    const TimeGrid& g = w.grid();
    const int kt = g.snap_index(t);
    double acc = 0.0;
    for (int k = 0; k < g.nodes(); ++k)
      if (masses[static_cast<std::size_t>(k)] != 0.0)
        acc += masses[static_cast<std::size_t>(k)] * a * w.scalar_at(std::min(k, kt));
    return acc;
  };
  c.field_dt = detail::cf_zero3();
  c.field_dw = [a, masses](double t, const DiscretePath& w, const ParticleMeasure&) {
    const TimeGrid& g = w.grid();
    const int kt = g.snap_index(t);
    double acc = 0.0;
    for (int k = kt; k < g.nodes(); ++k) acc += masses[static_cast<std::size_t>(k)];
    return a * acc;
  };
  c.field_dww = detail::cf_zero3();
  c.field_dmu = detail::cf_zero4();
  c.field_dwmu = detail::cf_zero4();
  return c;
}

// u(t, mu) = b * E^mu[W(t ^ t0)].
inline ClosedFormCase closed_form_delayed_measure(const TimeGrid& grid, double b, double t0,
                                                  int N, std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "delayed-measure";
  c.formula = "b*E[W(min(t,t0))]";
  c.problem = detail::shell_problem(grid, N, seed, Preset::measure_only);
  c.problem.base.terminal =
      FunctionalSpec::single(leaf_measure_frozen(sf_affine(b, 0.0), t0));
  c.field = [b, t0](double t, const DiscretePath&, const ParticleMeasure& mu) {
    return b * detail::measure_capped(mu, t, t0);
  };
  c.kink_times = {t0};
  c.field_dt = detail::cf_zero3();
  c.field_dw = detail::cf_zero3();
  c.field_dww = detail::cf_zero3();
  c.field_dmu = [b, t0](double t, const DiscretePath&, const ParticleMeasure& mu, int) {
    const TimeGrid& g = mu.grid();
    return g.snap_index(t) <= g.snap_index(t0) ? b : 0.0;
  };
  c.field_dwmu = detail::cf_zero4();
  return c;
}

inline ClosedFormCase closed_form_delayed_measure_mollified(const TimeGrid& grid, double b,
                                                            double t0, double eps, int N,
                                                            std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "delayed-measure-mollified";
  c.formula = "sum_k m_k b*E[W(min(t,t_k))]";
  c.problem = detail::shell_problem(grid, N, seed, Preset::measure_only);
  MollifyResult mr =
      mollify_terminal(sf_affine(b, 0.0), t0, eps, grid, /*measure_version=*/true);
  c.problem.base.terminal = mr.spec;
  const std::vector<double> masses = mr.spec.dsl().leaves()[0].node_weights;
  c.field = [b, masses](double t, const DiscretePath&, const ParticleMeasure& mu) {
    const TimeGrid& g = mu.grid();
    const int kt = g.snap_index(t);
    double acc = 0.0;
    for (int k = 0; k < g.nodes(); ++k) {
      if (masses[static_cast<std::size_t>(k)] == 0.0) continue;
      double m = 0.0;
      for (int i = 0; i < mu.size(); ++i) m += mu.particle(i).scalar_at(std::min(k, kt));
      acc += masses[static_cast<std::size_t>(k)] * b * m / static_cast<double>(mu.size());
    }
    return acc;
  };
  c.field_dt = detail::cf_zero3();
  c.field_dw = detail::cf_zero3();
  c.field_dww = detail::cf_zero3();
  c.field_dmu = [b, masses](double t, const DiscretePath&, const ParticleMeasure& mu, int) {
    const TimeGrid& g = mu.grid();
    const int kt = g.snap_index(t);
    double acc = 0.0;
    for (int k = kt; k < g.nodes(); ++k) acc += masses[static_cast<std::size_t>(k)];
    return b * acc;
  };
  c.field_dwmu = detail::cf_zero4();
  return c;
}

// u(t, w, mu) = a * w(t ^ t1) + b * E^mu[W(t ^ t2)].
inline ClosedFormCase closed_form_delayed_mixed(const TimeGrid& grid, double a, double t1,
                                                double b, double t2, int N,
                                                std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "delayed-mixed";
  c.formula = "a*w(min(t,t1)) + b*E[W(min(t,t2))]";
  c.problem = detail::shell_problem(grid, N, seed, Preset::general);
  std::vector<Leaf> leaves;
  leaves.push_back(leaf_frozen_eval(sf_affine(a, 0.0), t1));
  leaves.push_back(leaf_measure_frozen(sf_affine(b, 0.0), t2));
  c.problem.base.terminal =
      FunctionalSpec(Functional(combiner_linear({1.0, 1.0}), std::move(leaves)));
  c.field = [a, t1, b, t2](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    return a * detail::path_capped(w, t, t1) + b * detail::measure_capped(mu, t, t2);
  };
  c.kink_times = {t1, t2};
  c.field_dt = detail::cf_zero3();
  c.field_dw = [a, t1](double t, const DiscretePath& w, const ParticleMeasure&) {
    const TimeGrid& g = w.grid();
    return g.snap_index(t) <= g.snap_index(t1) ? a : 0.0;
  };
  c.field_dww = detail::cf_zero3();
  c.field_dmu = [b, t2](double t, const DiscretePath&, const ParticleMeasure& mu, int) {
    const TimeGrid& g = mu.grid();
    return g.snap_index(t) <= g.snap_index(t2) ? b : 0.0;
  };
  c.field_dwmu = detail::cf_zero4();
  return c;
}

// The mixed terminal of the previous case plus a source that switches on at
// t0 with the frozen weight c1*w(t0) + c2*E^mu[W(t0)]. For this linear
// weight the left-point quadrature makes the field exact on the grid.
inline ClosedFormCase closed_form_switched_source(const TimeGrid& grid, double a, double t1,
                                                  double b, double t2, double c1, double c2,
                                                  double t0, int N, std::uint64_t seed) {
  ClosedFormCase c = closed_form_delayed_mixed(grid, a, t1, b, t2, N, seed);
  c.name = "switched-source";
  c.formula =
      "a*w(min(t,t1)) + b*E[W(min(t,t2))] + (T-max(t,t0))*(c1*w(min(t,t0)) + "
      "c2*E[W(min(t,t0))])";
  // Shared by the source, the field, and the time channel so that the
  // cancellation between them is exact in floating point.
  auto weight_at = [c1, c2](const DiscretePath& w, const ParticleMeasure& mu, int k) {
    double m = 0.0;
    for (int i = 0; i < mu.size(); ++i) m += mu.particle(i).scalar_at(k);
    return c1 * w.scalar_at(k) + c2 * m / static_cast<double>(mu.size());
  };
  auto source = [weight_at, t0](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    if (t < t0 - 1e-12) return 0.0;
    return weight_at(w, mu, w.grid().snap_index(t0));
  };
  c.problem.base.f =
      Generator::zero().with_source(FunctionalSpec::opaque("switched-source", source));
  const double T = grid.horizon();
  auto base_field = c.field;
  c.field = [base_field, weight_at, t0, T](double t, const DiscretePath& w,
                                           const ParticleMeasure& mu) {
    const TimeGrid& g = w.grid();
    const int k = std::min(g.snap_index(t), g.snap_index(t0));
    return base_field(t, w, mu) + (T - std::max(t, t0)) * weight_at(w, mu, k);
  };
  c.kink_times.push_back(t0);
  auto base_dw = c.field_dw;
  auto base_dmu = c.field_dmu;
  c.field_dt = [weight_at, t0](double t, const DiscretePath& w, const ParticleMeasure& mu) {
    if (t < t0) return 0.0;
    return -weight_at(w, mu, w.grid().snap_index(t0));
  };
  c.field_dw = [base_dw, c1, t0, T](double t, const DiscretePath& w,
                                    const ParticleMeasure& mu) {
    const TimeGrid& g = w.grid();
    const double sw = g.snap_index(t) <= g.snap_index(t0)
                          ? (T - std::max(t, t0)) * c1
                          : 0.0;
    return base_dw(t, w, mu) + sw;
  };
  c.field_dmu = [base_dmu, c2, t0, T](double t, const DiscretePath& w,
                                      const ParticleMeasure& mu, int j) {
    const TimeGrid& g = mu.grid();
    const double sm = g.snap_index(t) <= g.snap_index(t0)
                          ? (T - std::max(t, t0)) * c2
                          : 0.0;
    return base_dmu(t, w, mu, j) + sm;
  };
  return c;
}

// u(t, w) = w(t)^2 + (T - t): terminal w(T)^2 under unit diffusion. The
// time decay cancels against the second state derivative.
inline ClosedFormCase closed_form_heat_square(const TimeGrid& grid, int N,
                                              std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "heat-square";
  c.formula = "w(t)^2 + (T-t)";
  c.problem = detail::shell_problem(grid, N, seed, Preset::ppde);
  c.problem.base.terminal = FunctionalSpec::path_eval(sf_square());
  const double T = grid.horizon();
  c.field = [T](double t, const DiscretePath& w, const ParticleMeasure&) {
    const double x = w.scalar_at(w.grid().snap_index(t));
    return x * x + (T - t);
  };
  c.field_dt = [](double, const DiscretePath&, const ParticleMeasure&) { return -1.0; };
  c.field_dw = [](double t, const DiscretePath& w, const ParticleMeasure&) {
    return 2.0 * w.scalar_at(w.grid().snap_index(t));
  };
  c.field_dww = [](double, const DiscretePath&, const ParticleMeasure&) { return 2.0; };
  c.field_dmu = detail::cf_zero4();
  c.field_dwmu = detail::cf_zero4();
  return c;
}

// u(t, mu) = E^mu[W(t)^2] + (T - t): the measure version; the time decay is
// cancelled by the mixed particle-lift term instead.
inline ClosedFormCase closed_form_heat_square_measure(const TimeGrid& grid, int N,
                                                      std::uint64_t seed) {
  ClosedFormCase c;
  c.name = "heat-square-measure";
  c.formula = "E[W(t)^2] + (T-t)";
  c.problem = detail::shell_problem(grid, N, seed, Preset::measure_only);
  c.problem.base.terminal = FunctionalSpec::measure_eval(sf_square());
  const double T = grid.horizon();
  c.field = [T](double t, const DiscretePath&, const ParticleMeasure& mu) {
    const int k = mu.grid().snap_index(t);
    double acc = 0.0;
    for (int i = 0; i < mu.size(); ++i) {
      const double x = mu.particle(i).scalar_at(k);
      acc += x * x;
    }
    return acc / static_cast<double>(mu.size()) + (T - t);
  };
  c.field_dt = [](double, const DiscretePath&, const ParticleMeasure&) { return -1.0; };
  c.field_dw = detail::cf_zero3();
  c.field_dww = detail::cf_zero3();
  c.field_dmu = [](double t, const DiscretePath&, const ParticleMeasure& mu, int j) {
    return 2.0 * mu.particle(j).scalar_at(mu.grid().snap_index(t));
  };
  c.field_dwmu = [](double, const DiscretePath&, const ParticleMeasure&, int) { return 2.0; };
  return c;
}

// Catalog with deterministic canonical parameters; delay centers sit on grid
// nodes so that the closed forms are exact under the grid semantics.
inline std::vector<ClosedFormCase> closed_form_library(const TimeGrid& grid, double eps, int N,
                                                       std::uint64_t seed) {
  const int K = grid.nodes();
  auto node_time = [&grid, K](double frac) {
    int k = static_cast<int>(std::lround(frac * (K - 1)));
    k = std::max(1, std::min(K - 2, k));
    return grid.t(k);
  };
  const double t0 = node_time(0.4);
  const double t1 = node_time(0.3);
  const double t2 = node_time(0.6);
  std::vector<ClosedFormCase> lib;
  lib.push_back(closed_form_delayed_path(grid, 1.0, t0, N, seed));
  lib.push_back(closed_form_delayed_path_mollified(grid, 1.0, t0, eps, N, seed));
  lib.push_back(closed_form_delayed_measure(grid, 0.5, t0, N, seed));
  lib.push_back(closed_form_delayed_measure_mollified(grid, 0.5, t0, eps, N, seed));
  lib.push_back(closed_form_delayed_mixed(grid, 1.0, t1, 0.5, t2, N, seed));
  lib.push_back(closed_form_switched_source(grid, 1.0, t1, 0.5, t2, 0.8, 0.6, t0, N, seed));
  lib.push_back(closed_form_heat_square(grid, N, seed));
  lib.push_back(closed_form_heat_square_measure(grid, N, seed));
  return lib;
}

}  // namespace pathfield
