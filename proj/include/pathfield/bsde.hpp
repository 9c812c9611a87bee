// pathfield: backward stochastic solvers. One regression core handles the
// generic backward pass; a linear core with matrix coefficients backs the
// linear mean-field solver and the variation equations; the nonlinear
// mean-field solve wraps the core in an outer fixed point on the law flow.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/generator.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/parallel.hpp"
#include "pathfield/regression.hpp"
#include "pathfield/stats.hpp"
#include "pathfield/tables.hpp"

namespace pathfield {

struct PicardConfig {
  double tol_linear = 1e-6;  // RMS gap for the linear mean-field loop
  double tol_law = 1e-4;     // quantile-coupling gap for the law loop
  int max_iter = 50;
};

struct BsdeProblem {
  FunctionalSpec terminal;  // evaluated at the horizon over (omega_T, mu_T)
  Generator f;
  DiffusionCoeffs coeffs;
  TimeGrid grid{1.0, 100};
  int N = 1024;
  std::uint64_t seed = 1;
  int threads = 1;
  bool antithetic = true;
  PicardConfig picard;
  std::vector<Leaf> extra_stats;  // additional declared regression statistics
};

// Empirical law of Y per grid node.
using LawFlow = std::vector<std::vector<double>>;

struct PicardLog {
  std::vector<double> gaps;
  int iterations = 0;
  bool converged = true;
};

class PicardError : public std::runtime_error {
 public:
  PicardError(const std::string& what, std::vector<double> gaps)
      : std::runtime_error(what), gaps(std::move(gaps)) {}
  std::vector<double> gaps;
};

struct BsdeSolution {
  EnsembleSim forward;        // ensemble the backward pass ran on
  ParticleMeasure law_paths;  // measure flow seen by terminal and source
  int start_index = 0;
  Eigen::MatrixXd Y;               // N x nodes
  std::vector<Eigen::MatrixXd> Z;  // per node: N x d
  LawFlow nu;                      // empirical law of Y per node
  PicardLog picard;
  bool ridge_used = false;
  int ridge_steps = 0;
  std::vector<double> mart_mean, mart_stderr;  // per-step regression residual
  double value = 0.0;        // Y at the start node (constant across samples)
  double value_stderr = 0.0; // sampling error of the value (spread of `pathwise`)
  // Per-sample accumulation of terminal plus source along the fitted
  // arguments. Its mean agrees with `value` up to regression smoothing, its
  // spread is the honest sampling error of the value, and differences of
  // these columns between coupled solves cancel shared noise sample by
  // sample, which the regression-smoothed start column (constant across
  // samples) cannot do.
  Eigen::VectorXd pathwise;
  std::vector<std::string> notes;  // solver warnings (finite-difference fallbacks etc.)

  double mean_at(int k) const { return Y.col(k).mean(); }
  std::vector<double> law_at(int k) const {
    const auto col = Y.col(k);
    return std::vector<double>(col.data(), col.data() + col.size());
  }
};

// Path-side leaves whose running statistics become regression features.
inline bool is_stat_leaf(const Leaf& l) {
  return l.kind == LeafKind::running_integral || l.kind == LeafKind::frozen_eval ||
         l.kind == LeafKind::mollified_path_sum;
}

inline std::vector<Leaf> declared_path_stats(const FunctionalSpec& f) {
  std::vector<Leaf> out;
  if (!f.analytic()) return out;
  for (const Leaf& l : f.dsl().leaves())
    if (is_stat_leaf(l)) out.push_back(l);
  return out;
}

inline std::vector<Leaf> declared_path_stats(const BsdeProblem& p) {
  std::vector<Leaf> out = declared_path_stats(p.terminal);
  if (p.f.analytic() && p.f.parts().has_source) {
    auto more = declared_path_stats(p.f.parts().source);
    out.insert(out.end(), more.begin(), more.end());
  }
  out.insert(out.end(), p.extra_stats.begin(), p.extra_stats.end());
  return out;
}

namespace detail {

struct StepFit {
  Eigen::VectorXd cont;  // fitted continuation values E[Y_{k+1} | features]
  Eigen::MatrixXd Zk;    // N x d
  bool ridge = false;
  double resid_mean = 0.0, resid_stderr = 0.0;
};

inline StepFit regress_step(const Eigen::MatrixXd& design, const Eigen::VectorXd& y_next,
                            const Eigen::MatrixXd& dwk, double dt, bool antithetic) {
  StepFit s;
  LsqFit fy = fit_least_squares(design, y_next);
  s.cont = fy.fitted;
  s.ridge = fy.ridge_fallback;
  const Eigen::VectorXd resid = y_next - s.cont;
  s.resid_mean = resid.mean();
  s.resid_stderr = mean_stderr(resid, antithetic);
  const int d = static_cast<int>(dwk.cols());
  s.Zk.resize(y_next.size(), d);
  for (int c = 0; c < d; ++c) {
    // Regress the centered target: subtracting the fitted continuation leaves the
    // conditional expectation unchanged (the increment has zero conditional mean)
    // while removing most of the variance of the Z projection.
    LsqFit fz = fit_least_squares(design, resid.cwiseProduct(dwk.col(c)));
    s.ridge = s.ridge || fz.ridge_fallback;
    s.Zk.col(c) = fz.fitted / dt;
  }
  return s;
}

// Raw regression state columns at node k: path state components plus the
// declared running statistics.
inline Eigen::MatrixXd raw_features(const ParticleMeasure& paths, int k,
                                    const std::vector<Eigen::MatrixXd>& stat_tabs) {
  const int n = paths.size();
  const int d = paths.dim();
  Eigen::MatrixXd raw(n, d + static_cast<int>(stat_tabs.size()));
  for (int i = 0; i < n; ++i) raw.row(i).head(d) = paths.particle(i).at_node(k).transpose();
  for (std::size_t s = 0; s < stat_tabs.size(); ++s) raw.col(d + static_cast<int>(s)) = stat_tabs[s].col(k);
  return raw;
}

inline Eigen::MatrixXd dw_at(const EnsembleSim& sim, int k) {
  const int n = static_cast<int>(sim.dw.size());
  const int d = static_cast<int>(sim.dw.front().rows());
  Eigen::MatrixXd out(n, d);
  for (int i = 0; i < n; ++i) out.row(i) = sim.dw[i].col(k).transpose();
  return out;
}

// Terminal values Phi(T, x_i, law), sharing the measure-leaf work.
inline Eigen::VectorXd terminal_column(const FunctionalSpec& phi, const ParticleMeasure& paths,
                                       const ParticleMeasure& law, int threads) {
  const double T = paths.grid().horizon();
  Eigen::VectorXd out(paths.size());
  if (phi.analytic()) {
    const auto cache = phi.dsl().measure_cache(T, law);
    parallel_for(paths.size(), threads, [&](int i) {
      out(i) = phi.dsl().value(T, paths.particle(i), cache);
    });
  } else {
    parallel_for(paths.size(), threads,
                 [&](int i) { out(i) = phi.value(T, paths.particle(i), law); });
  }
  return out;
}

struct BackwardInputs {
  const BsdeProblem* p = nullptr;
  EnsembleSim forward;
  ParticleMeasure law;
  int start_index = 0;
  Eigen::VectorXd terminal;               // per-sample terminal values
  const Eigen::MatrixXd* source = nullptr;  // N x K source table (optional)
  std::vector<Eigen::MatrixXd> stat_tabs;
  const LawFlow* nu = nullptr;            // frozen law flow (optional)
};

inline BsdeSolution run_backward(BackwardInputs& in) {
  const BsdeProblem& p = *in.p;
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = in.forward.paths.size();
  const int d = in.forward.paths.dim();
  const double dt = g.dt();
  const bool needs_law = p.f.depends_on_law();
  if (needs_law && in.nu == nullptr)
    throw std::logic_error(
        "solve_bsde_regression: generator depends on the law of Y; freeze a law flow or use "
        "solve_mf_bsde");

  BsdeSolution sol;
  sol.start_index = in.start_index;
  sol.Y.resize(N, K);
  sol.Z.assign(K, Eigen::MatrixXd::Zero(N, d));
  sol.mart_mean.assign(K, 0.0);
  sol.mart_stderr.assign(K, 0.0);
  sol.Y.col(K - 1) = in.terminal;

  Eigen::VectorXd driver(N);
  Eigen::VectorXd pathwise = in.terminal;
  for (int k = K - 2; k >= in.start_index; --k) {
    const Eigen::MatrixXd raw = raw_features(in.forward.paths, k, in.stat_tabs);
    const Eigen::MatrixXd design = quadratic_design(raw);
    const StepFit fit =
        regress_step(design, sol.Y.col(k + 1), dw_at(in.forward, k), dt, p.antithetic);
    if (fit.ridge) {
      sol.ridge_used = true;
      ++sol.ridge_steps;
    }
    sol.Z[k] = fit.Zk;
    sol.mart_mean[k] = fit.resid_mean;
    sol.mart_stderr[k] = fit.resid_stderr;
    const double tk = g.t(k);
    const std::vector<double>* nuk = needs_law ? &(*in.nu)[k] : nullptr;
    if (p.f.analytic()) {
      const auto& parts = p.f.parts();
      const double stat = (parts.has_nu && nuk) ? parts.stat.value(*nuk) : 0.0;
      parallel_for(N, p.threads, [&](int i) {
        double acc = 0.0;
        if (parts.has_y) acc += parts.gy.f(fit.cont(i));
        if (parts.gz.size() > 0) acc += parts.gz.dot(fit.Zk.row(i).transpose());
        if (parts.has_nu) acc += parts.gnu.f(stat);
        if (in.source != nullptr) acc += (*in.source)(i, k);
        driver(i) = acc;
      });
    } else {
      static const std::vector<double> kEmpty;
      parallel_for(N, p.threads, [&](int i) {
        driver(i) = p.f.value(tk, in.forward.paths.particle(i), fit.cont(i),
                              fit.Zk.row(i).transpose(), in.law, nuk ? *nuk : kEmpty);
      });
    }
    sol.Y.col(k) = fit.cont + dt * driver;
    pathwise += dt * driver;
    if (k == in.start_index) {
      sol.value = sol.Y(0, k);
      sol.value_stderr = mean_stderr(pathwise, p.antithetic);
    }
  }
  if (in.start_index == K - 1) {
    // Started at the horizon: no backward steps. An ensemble grown from a
    // single start path is a constant column, and the value must reproduce
    // the terminal functional bit for bit, so skip the (rounding) mean.
    const Eigen::VectorXd col = sol.Y.col(K - 1);
    const bool constant = (col.array() == col(0)).all();
    sol.value = constant ? col(0) : col.mean();
    sol.value_stderr = constant ? 0.0 : mean_stderr(col, p.antithetic);
  }
  sol.pathwise = std::move(pathwise);
  for (int k = 0; k < in.start_index; ++k) {
    sol.Y.col(k) = sol.Y.col(in.start_index);
    sol.Z[k].setZero();
  }
  // Z at the horizon reuses the last regression (documented O(dt) bias).
  if (K >= 2 && in.start_index < K - 1) sol.Z[K - 1] = sol.Z[K - 2];
  sol.nu.resize(K);
  for (int k = 0; k < K; ++k) sol.nu[k] = sol.law_at(k);
  return sol;
}

}  // namespace detail

struct FrozenLaws {
  ParticleMeasure mu_flow;
  LawFlow nu_flow;
  bool has_nu = false;
};

// Generic backward regression solve along continuations of gamma from t.
// Without frozen laws the measure flow defaults to the ensemble itself and
// the generator must not read the law of Y.
inline BsdeSolution solve_bsde_regression(const BsdeProblem& p, const DiscretePath& gamma,
                                          double t,
                                          const std::optional<FrozenLaws>& frozen = std::nullopt) {
  const int kt = p.grid.snap_index(t);
  SimOptions opts;
  opts.label = "bsde-state";
  opts.antithetic = p.antithetic;
  detail::BackwardInputs in;
  in.p = &p;
  in.forward = simulate_forward_sim(p.coeffs, gamma, t, p.N, p.seed, opts);
  in.law = frozen ? frozen->mu_flow : in.forward.paths;
  in.start_index = kt;
  in.terminal = detail::terminal_column(p.terminal, in.forward.paths, in.law, p.threads);
  Eigen::MatrixXd source;
  if (p.f.analytic() && p.f.parts().has_source) {
    source = functional_value_table(p.f.parts().source, in.forward.paths, in.law);
    in.source = &source;
  }
  for (const Leaf& l : declared_path_stats(p)) in.stat_tabs.push_back(leaf_path_table(l, in.forward.paths));
  in.nu = (frozen && frozen->has_nu) ? &frozen->nu_flow : nullptr;
  BsdeSolution sol = detail::run_backward(in);
  sol.forward = std::move(in.forward);
  sol.law_paths = std::move(in.law);
  sol.picard.iterations = 1;
  return sol;
}

namespace detail {

// Mean-field solve with noise streams keyed by the caller's particle order.
// The public entry canonicalizes the order first; finite-difference lifts of
// a field in its measure argument call this directly, because a lifted
// particle must keep its noise stream even when the bump changes its rank.
inline BsdeSolution solve_mf_bsde_ordered(const BsdeProblem& p, const ParticleMeasure& mu0,
                                          double t) {
  const int kt = p.grid.snap_index(t);
  SimOptions opts;
  opts.label = "bsde-law-flow";
  opts.antithetic = p.antithetic;
  detail::BackwardInputs in;
  in.p = &p;
  in.forward = continue_measure_sim(p.coeffs, mu0, t, p.seed, opts);
  in.law = in.forward.paths;
  in.start_index = kt;
  in.terminal = detail::terminal_column(p.terminal, in.forward.paths, in.law, p.threads);
  Eigen::MatrixXd source;
  if (p.f.analytic() && p.f.parts().has_source) {
    source = functional_value_table(p.f.parts().source, in.forward.paths, in.law);
    in.source = &source;
  }
  for (const Leaf& l : declared_path_stats(p)) in.stat_tabs.push_back(leaf_path_table(l, in.forward.paths));

  BsdeSolution sol;
  PicardLog log;
  if (!p.f.depends_on_law()) {
    sol = detail::run_backward(in);
    log.iterations = 1;
  } else {
    const int K = p.grid.nodes();
    LawFlow nu(K, std::vector<double>(in.terminal.data(), in.terminal.data() + in.terminal.size()));
    for (int m = 0; m < p.picard.max_iter; ++m) {
      in.nu = &nu;
      sol = detail::run_backward(in);
      double gap = 0.0;
      for (int k = kt; k < K; ++k) gap = std::max(gap, w2_samples_1d(sol.nu[k], nu[k]));
      log.gaps.push_back(gap);
      log.iterations = m + 1;
      nu = sol.nu;
      if (gap < p.picard.tol_law) break;
    }
    if (!log.gaps.empty() && log.gaps.back() >= p.picard.tol_law) {
      log.converged = false;
      throw PicardError("solve_mf_bsde: law fixed point did not converge within " +
                            std::to_string(p.picard.max_iter) + " iterations (last gap " +
                            detail::fmt_num(log.gaps.back()) + ")",
                        log.gaps);
    }
  }
  sol.picard = log;
  // Particle histories differ here, so the scalar summary is the
  // cross-particle mean at the start node.
  sol.value = sol.Y.col(kt).mean();
  sol.value_stderr = detail::mean_stderr(sol.Y.col(kt), p.antithetic);
  sol.forward = std::move(in.forward);
  sol.law_paths = sol.forward.paths;
  return sol;
}

}  // namespace detail

// Nonlinear mean-field solve on the diagonal: continuations of the
// particles of mu0 under the law-flow dynamics carry both the state and the
// empirical measure; the law of Y is found by an outer fixed point. The
// particle order is canonicalized internally so that the result is
// invariant under relabeling of mu0 (bit-exact multisets); every
// per-particle output (solution rows, ensemble, noise) is mapped back to the
// caller's order.
inline BsdeSolution solve_mf_bsde(const BsdeProblem& p, const ParticleMeasure& mu0, double t) {
  const std::vector<int> ranks = mu0.canonical_ranks();
  std::vector<int> order(ranks.size());
  for (std::size_t i = 0; i < ranks.size(); ++i) order[ranks[i]] = static_cast<int>(i);
  std::vector<DiscretePath> sorted;
  sorted.reserve(order.size());
  for (int idx : order) sorted.push_back(mu0.particle(idx));
  BsdeSolution sol = detail::solve_mf_bsde_ordered(p, ParticleMeasure(std::move(sorted)), t);

  // Undo the canonical sort: caller particle j sat at canonical rank ranks[j].
  BsdeSolution out = sol;
  const int K = p.grid.nodes();
  std::vector<DiscretePath> parts;
  std::vector<Eigen::MatrixXd> dws;
  parts.reserve(ranks.size());
  dws.reserve(ranks.size());
  for (std::size_t j = 0; j < ranks.size(); ++j) {
    const int rj = ranks[j];
    out.Y.row(static_cast<int>(j)) = sol.Y.row(rj);
    for (int k = 0; k < K; ++k) out.Z[k].row(static_cast<int>(j)) = sol.Z[k].row(rj);
    parts.push_back(sol.forward.paths.particle(rj));
    dws.push_back(sol.forward.dw[static_cast<std::size_t>(rj)]);
  }
  out.forward.paths = ParticleMeasure(std::move(parts));
  out.forward.dw = std::move(dws);
  out.law_paths = out.forward.paths;
  return out;
}

// ---------------------------------------------------------------------------
// Linear mean-field solver (explicit coefficient shape
//   dY = -(alpha Y + beta . Z + E~[g(r, c~) Y~] + h) dr + Z dB)
// by Picard iteration on the expectation term.
// ---------------------------------------------------------------------------

struct LinearMfBsde {
  FunctionalSpec terminal;                       // xi
  std::function<double(double)> alpha;           // bounded, may be null (= 0)
  std::function<Eigen::VectorXd(double)> beta;   // bounded, may be null (= 0)
  std::function<double(double, double)> kernel;  // g(r, c); null = no mean-field term
  std::function<double(double, const DiscretePath&)> carrier;  // c(r, omega); null = state
  std::function<double(double, const DiscretePath&)> inhom;    // h; null = 0
  DiffusionCoeffs coeffs = DiffusionCoeffs::standard(1);
};

inline BsdeSolution solve_linear_mf_bsde(const LinearMfBsde& spec, const TimeGrid& grid, int N,
                                         std::uint64_t seed, const PicardConfig& pic = {},
                                         int threads = 1, bool antithetic = true) {
  BsdeProblem shell;
  shell.terminal = spec.terminal;
  shell.coeffs = spec.coeffs;
  shell.grid = grid;
  shell.N = N;
  shell.seed = seed;
  shell.threads = threads;
  shell.antithetic = antithetic;
  shell.picard = pic;

  SimOptions opts;
  opts.label = "linear-mf";
  opts.antithetic = antithetic;
  const DiscretePath origin = DiscretePath::zero(grid, spec.coeffs.dim);
  EnsembleSim forward = simulate_forward_sim(spec.coeffs, origin, 0.0, N, seed, opts);
  const ParticleMeasure& paths = forward.paths;
  const int K = grid.nodes();
  const int d = spec.coeffs.dim;
  const double dt = grid.dt();

  const Eigen::VectorXd xi = detail::terminal_column(spec.terminal, paths, paths, threads);
  std::vector<Eigen::MatrixXd> stat_tabs;
  for (const Leaf& l : declared_path_stats(spec.terminal)) stat_tabs.push_back(leaf_path_table(l, paths));

  // Frozen data along the ensemble.
  Eigen::VectorXd alpha_k(K), hmean;
  Eigen::MatrixXd hval(N, K), cval(N, K);
  std::vector<Eigen::VectorXd> beta_k(K);
  for (int k = 0; k < K; ++k) {
    const double tk = grid.t(k);
    alpha_k(k) = spec.alpha ? spec.alpha(tk) : 0.0;
    beta_k[k] = spec.beta ? spec.beta(tk) : Eigen::VectorXd::Zero(d);
    for (int i = 0; i < N; ++i) {
      hval(i, k) = spec.inhom ? spec.inhom(tk, paths.particle(i)) : 0.0;
      cval(i, k) = spec.carrier ? spec.carrier(tk, paths.particle(i))
                                : paths.particle(i).scalar_at(k);
    }
  }

  const bool has_mf = static_cast<bool>(spec.kernel);
  Eigen::MatrixXd y_prev = xi.replicate(1, K);  // flat-terminal initial iterate
  BsdeSolution sol;
  PicardLog log;
  const int iter_cap = has_mf ? pic.max_iter : 1;
  for (int m = 0; m < iter_cap; ++m) {
    Eigen::VectorXd mf = Eigen::VectorXd::Zero(K);
    if (has_mf)
      for (int k = 0; k < K; ++k) {
        double acc = 0.0;
        for (int i = 0; i < N; ++i) acc += spec.kernel(grid.t(k), cval(i, k)) * y_prev(i, k);
        mf(k) = acc / static_cast<double>(N);
      }
    sol = BsdeSolution();
    sol.start_index = 0;
    sol.Y.resize(N, K);
    sol.Z.assign(K, Eigen::MatrixXd::Zero(N, d));
    sol.mart_mean.assign(K, 0.0);
    sol.mart_stderr.assign(K, 0.0);
    sol.Y.col(K - 1) = xi;
    for (int k = K - 2; k >= 0; --k) {
      const Eigen::MatrixXd raw = detail::raw_features(paths, k, stat_tabs);
      const Eigen::MatrixXd design = quadratic_design(raw);
      const detail::StepFit fit =
          detail::regress_step(design, sol.Y.col(k + 1), detail::dw_at(forward, k), dt, antithetic);
      if (fit.ridge) {
        sol.ridge_used = true;
        ++sol.ridge_steps;
      }
      sol.Z[k] = fit.Zk;
      sol.mart_mean[k] = fit.resid_mean;
      sol.mart_stderr[k] = fit.resid_stderr;
      for (int i = 0; i < N; ++i) {
        const double driver =
            alpha_k(k) * fit.cont(i) + beta_k[k].dot(fit.Zk.row(i).transpose()) + mf(k) + hval(i, k);
        sol.Y(i, k) = fit.cont(i) + dt * driver;
      }
      if (k == 0) {
        sol.value = sol.Y(0, 0);
        sol.value_stderr = detail::mean_stderr(sol.Y.col(1), antithetic);
      }
    }
    sol.Z[K - 1] = sol.Z[K - 2];
    double gap = 0.0;
    for (int k = 0; k < K; ++k)
      gap = std::max(gap, std::sqrt((sol.Y.col(k) - y_prev.col(k)).squaredNorm() /
                                    static_cast<double>(N)));
    log.gaps.push_back(gap);
    log.iterations = m + 1;
    y_prev = sol.Y;
    if (!has_mf || gap < pic.tol_linear) break;
  }
  if (has_mf && log.gaps.back() >= pic.tol_linear) {
    log.converged = false;
    throw PicardError("solve_linear_mf_bsde: Picard iteration did not converge within " +
                          std::to_string(pic.max_iter) + " iterations (last gap " +
                          detail::fmt_num(log.gaps.back()) + ")",
                      log.gaps);
  }
  sol.picard = log;
  sol.nu.resize(K);
  for (int k = 0; k < K; ++k) sol.nu[k] = sol.law_at(k);
  sol.forward = std::move(forward);
  sol.law_paths = sol.forward.paths;
  return sol;
}

}  // namespace pathfield
