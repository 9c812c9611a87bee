// pathfield: statistical verification of the functional Ito decomposition.
// The increment of a functional along a simulated diffusion / law-flow pair
// is split into its five derivative terms; the per-sample residual between
// the exact increment and the term sum is the test statistic.
#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/parallel.hpp"
#include "pathfield/rng.hpp"
#include "pathfield/stats.hpp"

namespace pathfield {

// Term columns: 0 time, 1 path increment, 2 path trace, 3 measure increment,
// 4 measure trace. residuals = lhs - terms.rowwise().sum() by construction.
struct ItoReport {
  int samples = 0;
  int mesh = 0;
  double lhs_mean = 0.0;
  double time_term = 0.0;
  double path_term = 0.0;
  double trace_term = 0.0;
  double measure_term = 0.0;
  double measure_trace_term = 0.0;
  double residual_mean = 0.0;
  double residual_stderr = 0.0;
  Eigen::VectorXd lhs;        // per sample
  Eigen::MatrixXd terms;      // samples x 5
  Eigen::VectorXd residuals;  // per sample
  StreamLedger state_streams, law_streams, tilde_streams;
  bool growth_warning = false;
  double wall_seconds = 0.0;
};

namespace detail {

inline constexpr const char* kItoStateLabel = "ito-state";
inline constexpr const char* kItoLawLabel = "ito-law";
inline constexpr const char* kItoTildeLabel = "ito-tilde";

inline void require_finite(double x, const char* op, std::size_t sample, int node) {
  if (!std::isfinite(x))
    throw std::runtime_error(std::string(op) + ": non-finite functional value at sample " +
                             std::to_string(sample) + ", node " + std::to_string(node));
}

// Shared implementation of both decomposition checks. In the running form
// (partial = false) every derivative is taken on the diagonal tau = r and the
// functional advances with r; in the partial form the evaluation time is
// frozen at v, the cut-offs stay at the running r, and the time term drops.
inline ItoReport ito_run(const char* op, const FunctionalSpec& f, const DiffusionCoeffs& coeffs,
                         bool partial, double v, double t, double s, const DiscretePath& gamma,
                         const ParticleMeasure& eta, int N, std::uint64_t seed, int threads,
                         DerivMode mode, const FdConfig& cfg) {
  const TimeGrid& g = gamma.grid();
  if (N < 2) throw std::domain_error(std::string(op) + ": need at least two samples");
  if (!g.same_as(eta.grid()))
    throw std::invalid_argument(std::string(op) + ": path and measure grids differ");
  if (gamma.dim() != coeffs.dim || eta.dim() != coeffs.dim)
    throw std::invalid_argument(std::string(op) + ": dimension does not match coefficients");
  const int kt = g.snap_index(t);
  const int ks = g.snap_index(s);
  if (ks < kt) throw std::domain_error(std::string(op) + ": need t <= s");
  const double vtime = partial ? g.t(g.snap_index(v)) : g.t(ks);
  if (partial && g.snap_index(v) < ks)
    throw std::domain_error(std::string(op) + ": need s <= v");

  const auto clock_start = std::chrono::steady_clock::now();
  const bool analytic =
      mode == DerivMode::analytic || (mode == DerivMode::automatic && f.analytic());

  SimOptions state_opts, law_opts, tilde_opts;
  state_opts.label = kItoStateLabel;
  law_opts.label = kItoLawLabel;
  tilde_opts.label = kItoTildeLabel;
  const EnsembleSim xs = simulate_forward_sim(coeffs, gamma, g.t(kt), N, seed, state_opts);
  const EnsembleSim law = continue_measure_sim(coeffs, eta, g.t(kt), seed, law_opts);
  const EnsembleSim tilde = continue_measure_sim(coeffs, eta, g.t(kt), seed, tilde_opts);
  const int ntil = tilde.paths.size();

  ItoReport rep;
  rep.samples = N;
  rep.mesh = g.steps();
  rep.state_streams.record(kItoStateLabel);
  rep.law_streams.record(kItoLawLabel);
  rep.tilde_streams.record(kItoTildeLabel);
  rep.growth_warning = !f.growth_certified();
  if (rep.growth_warning)
    std::cerr << "pathfield: functional '" << f.name()
              << "' uses unregistered smooth maps; polynomial growth is not certified\n";
  rep.terms = Eigen::MatrixXd::Zero(N, 5);
  rep.lhs = Eigen::VectorXd::Zero(N);
  const double dt = g.dt();

  for (int k = kt; k < ks; ++k) {
    const double tk = g.t(k);
    const double eval_t = partial ? vtime : tk;
    const Eigen::MatrixXd s1 = coeffs.diff1(tk);
    const Eigen::MatrixXd cov1 = s1 * s1.transpose();
    const Eigen::MatrixXd s2 = coeffs.diff2(tk);
    const Eigen::MatrixXd cov2 = s2 * s2.transpose();

    // Stopped arguments at the running time. On the diagonal the analytic
    // evaluators never read past node k, so the raw ensembles stand in for
    // their stopped versions; the finite-difference route always stops so
    // opaque functionals cannot peek past the cut-off.
    std::optional<ParticleMeasure> law_stop;
    if (partial || !analytic) law_stop = law.paths.stopped(tk);
    const ParticleMeasure& lawk = law_stop ? *law_stop : law.paths;

    if (analytic) {
      const Functional& F = f.dsl();
      const int L = F.num_leaves();
      const auto cache = F.measure_cache(eval_t, lawk);

      // Tilde-ensemble factors of the measure terms, one pair per measure
      // leaf: the kernel-weighted increment mean and the kernel-derivative
      // mean. Both are independent of the state sample.
      std::vector<double> mu_dot(L, 0.0), mu_dd(L, 0.0), qf2(L, 0.0);
      bool has_measure = false;
      for (int l = 0; l < L; ++l) {
        const Leaf& leaf = F.leaf(l);
        if (!leaf.is_measure()) continue;
        has_measure = true;
        double a = 0.0, b = 0.0;
        for (int j = 0; j < ntil; ++j) {
          const DiscretePath& raw = tilde.paths.particle(j);
          std::optional<DiscretePath> tstop;
          if (partial) tstop = stop_path(raw, tk);
          const DiscretePath& xt = tstop ? *tstop : raw;
          a += detail::leaf_path_svd_scalar(leaf, k, eval_t, xt) *
               leaf.dir.dot(raw.at_node(k + 1) - raw.at_node(k));
          b += detail::leaf_path_svd2_scalar(leaf, k, eval_t, xt);
        }
        mu_dot[l] = a / static_cast<double>(ntil);
        mu_dd[l] = b / static_cast<double>(ntil);
        qf2[l] = leaf.dir.dot(cov2 * leaf.dir);
      }

      parallel_for(static_cast<std::size_t>(N), threads, [&](std::size_t i) {
        const DiscretePath& x = xs.paths.particle(static_cast<int>(i));
        std::optional<DiscretePath> xstop;
        if (partial) xstop = stop_path(x, tk);
        const DiscretePath& w = xstop ? *xstop : x;
        const auto vleaf = F.leaf_values(eval_t, w, cache);
        require_finite(F.combiner().value(eval_t, vleaf), op, i, k);
        if (!partial) rep.terms(i, 0) += F.horizontal(tk, w, cache) * dt;
        const Eigen::VectorXd dx = x.at_node(k + 1) - x.at_node(k);
        rep.terms(i, 1) += F.svd1(tk, eval_t, w, cache).dot(dx);
        rep.terms(i, 2) += 0.5 * (F.svd2(tk, eval_t, w, cache) * cov1).trace() * dt;
        if (has_measure) {
          const Eigen::VectorXd grad = F.combiner().grad(eval_t, vleaf);
          double mt = 0.0, mtt = 0.0;
          for (int l = 0; l < L; ++l) {
            if (!F.leaf(l).is_measure()) continue;
            mt += grad(l) * mu_dot[l];
            mtt += grad(l) * mu_dd[l] * qf2[l];
          }
          rep.terms(i, 3) += mt;
          rep.terms(i, 4) += 0.5 * mtt * dt;
        }
      });
      continue;
    }

    // Finite-difference route (opaque functionals or forced fd mode).
    std::vector<DiscretePath> wstops;
    wstops.reserve(static_cast<std::size_t>(N));
    for (int i = 0; i < N; ++i) wstops.push_back(stop_path(xs.paths.particle(i), tk));

    parallel_for(static_cast<std::size_t>(N), threads, [&](std::size_t i) {
      const DiscretePath& x = xs.paths.particle(static_cast<int>(i));
      const DiscretePath& w = wstops[i];
      require_finite(f.value(eval_t, w, lawk), op, i, k);
      if (!partial) rep.terms(i, 0) += fd_horizontal(f, tk, x, law.paths, cfg) * dt;
      const Eigen::VectorXd dx = x.at_node(k + 1) - x.at_node(k);
      rep.terms(i, 1) += fd_svd1(f, tk, eval_t, w, lawk, cfg).dot(dx);
      rep.terms(i, 2) += 0.5 * (fd_svd2(f, tk, eval_t, w, lawk, cfg) * cov1).trace() * dt;
    });

    // Measure terms: probe the kernel at each tilde particle through an
    // augmented law that charges it. The augmentation perturbs the law at
    // order 1/N', matching the resolution of the empirical measure itself.
    const double eps = cfg.lift_at(lawk);
    const double n1 = static_cast<double>(lawk.size() + 1);
    const int d = coeffs.dim;
    for (int j = 0; j < ntil; ++j) {
      const DiscretePath tj = stop_path(tilde.paths.particle(j), tk);
      const Eigen::VectorXd dxt =
          tilde.paths.particle(j).at_node(k + 1) - tilde.paths.particle(j).at_node(k);
      const ParticleMeasure aug = augment_measure(lawk, tj);
      std::vector<ParticleMeasure> aug_plus, aug_minus;
      for (int c = 0; c < d; ++c) {
        Eigen::VectorXd e = Eigen::VectorXd::Zero(d);
        e(c) = eps;
        aug_plus.push_back(augment_measure(lawk, bump_path(tj, tk, e)));
        aug_minus.push_back(augment_measure(lawk, bump_path(tj, tk, -e)));
      }
      std::vector<ParticleMeasure> aug_pp, aug_pm, aug_mp, aug_mm;
      std::vector<std::pair<int, int>> pairs;
      for (int c = 0; c < d; ++c)
        for (int c2 = c + 1; c2 < d; ++c2) {
          Eigen::VectorXd ec = Eigen::VectorXd::Zero(d), e2 = Eigen::VectorXd::Zero(d);
          ec(c) = eps;
          e2(c2) = eps;
          pairs.emplace_back(c, c2);
          aug_pp.push_back(augment_measure(lawk, bump_path(tj, tk, ec + e2)));
          aug_pm.push_back(augment_measure(lawk, bump_path(tj, tk, ec - e2)));
          aug_mp.push_back(augment_measure(lawk, bump_path(tj, tk, e2 - ec)));
          aug_mm.push_back(augment_measure(lawk, bump_path(tj, tk, -ec - e2)));
        }

      parallel_for(static_cast<std::size_t>(N), threads, [&](std::size_t i) {
        const DiscretePath& w = wstops[i];
        const double f0 = f.value(eval_t, w, aug);
        Eigen::VectorXd kern(d);
        Eigen::MatrixXd kd = Eigen::MatrixXd::Zero(d, d);
        for (int c = 0; c < d; ++c) {
          const double up = f.value(eval_t, w, aug_plus[c]);
          const double dn = f.value(eval_t, w, aug_minus[c]);
          kern(c) = n1 * (up - dn) / (2.0 * eps);
          kd(c, c) = n1 * (up - 2.0 * f0 + dn) / (eps * eps);
        }
        for (std::size_t q = 0; q < pairs.size(); ++q) {
          const double pp = f.value(eval_t, w, aug_pp[q]);
          const double pm = f.value(eval_t, w, aug_pm[q]);
          const double mp = f.value(eval_t, w, aug_mp[q]);
          const double mm = f.value(eval_t, w, aug_mm[q]);
          const double cross = n1 * (pp - pm - mp + mm) / (4.0 * eps * eps);
          kd(pairs[q].first, pairs[q].second) = kd(pairs[q].second, pairs[q].first) = cross;
        }
        rep.terms(i, 3) += kern.dot(dxt) / static_cast<double>(ntil);
        rep.terms(i, 4) += 0.5 * (kd * cov2).trace() * dt / static_cast<double>(ntil);
      });
    }
  }

  // Exact increment of the functional between the frozen start and the
  // (possibly frozen-time) endpoint.
  const ParticleMeasure law_end = law.paths.stopped(g.t(ks));
  const ParticleMeasure eta_stop = eta.stopped(g.t(kt));
  const DiscretePath gamma_stop = stop_path(gamma, g.t(kt));
  const double eval_end = partial ? vtime : g.t(ks);
  const double eval_start = partial ? vtime : g.t(kt);
  const double val_start = f.value(eval_start, gamma_stop, eta_stop);
  require_finite(val_start, op, 0, kt);
  if (analytic) {
    const Functional& F = f.dsl();
    const auto cache_end = F.measure_cache(eval_end, law_end);
    parallel_for(static_cast<std::size_t>(N), threads, [&](std::size_t i) {
      const DiscretePath w = stop_path(xs.paths.particle(static_cast<int>(i)), g.t(ks));
      rep.lhs(i) = F.value(eval_end, w, cache_end) - val_start;
      require_finite(rep.lhs(i), op, i, ks);
    });
  } else {
    parallel_for(static_cast<std::size_t>(N), threads, [&](std::size_t i) {
      const DiscretePath w = stop_path(xs.paths.particle(static_cast<int>(i)), g.t(ks));
      rep.lhs(i) = f.value(eval_end, w, law_end) - val_start;
      require_finite(rep.lhs(i), op, i, ks);
    });
  }

  rep.residuals = rep.lhs - rep.terms.rowwise().sum();
  rep.lhs_mean = rep.lhs.mean();
  rep.time_term = rep.terms.col(0).mean();
  rep.path_term = rep.terms.col(1).mean();
  rep.trace_term = rep.terms.col(2).mean();
  rep.measure_term = rep.terms.col(3).mean();
  rep.measure_trace_term = rep.terms.col(4).mean();
  rep.residual_mean = rep.residuals.mean();
  rep.residual_stderr = mean_stderr(rep.residuals, false);
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return rep;
}

}  // namespace detail

// Residual check of the running-time decomposition on [t, s]: time term,
// path increment and trace terms against the state flow, measure increment
// and trace terms against an independent copy of the law flow.
inline ItoReport ito_decomposition(const FunctionalSpec& f, const DiffusionCoeffs& coeffs,
                                   double t, double s, const DiscretePath& gamma,
                                   const ParticleMeasure& eta, int N, std::uint64_t seed,
                                   int threads = 1, DerivMode mode = DerivMode::automatic,
                                   const FdConfig& cfg = {}) {
  return detail::ito_run("ito_decomposition", f, coeffs, false, s, t, s, gamma, eta, N, seed,
                         threads, mode, cfg);
}

// Residual check of the frozen-time decomposition: the functional is held at
// evaluation time v while the path and law arguments advance from t to s with
// all derivative cut-offs at the running time. There is no time term.
inline ItoReport partial_ito_decomposition(const FunctionalSpec& f, const DiffusionCoeffs& coeffs,
                                           double v, double t, double s, const DiscretePath& gamma,
                                           const ParticleMeasure& eta, int N, std::uint64_t seed,
                                           int threads = 1, DerivMode mode = DerivMode::automatic,
                                           const FdConfig& cfg = {}) {
  return detail::ito_run("partial_ito_decomposition", f, coeffs, true, v, t, s, gamma, eta, N,
                         seed, threads, mode, cfg);
}

}  // namespace pathfield
