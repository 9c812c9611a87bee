// pathfield: linearized backward solves for the derivative fields of a
// backward solution. Path variations (first and second order), lifted
// measure kernels driven by a probe path (first and mixed second order),
// and their weighted aggregates all reduce to one linear backward pass
// with per-sample coefficient tables; law-coupled kinds wrap the pass in
// a Picard iteration on the mean-field term.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/bsde.hpp"
#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/generator.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/parallel.hpp"
#include "pathfield/path.hpp"
#include "pathfield/regression.hpp"
#include "pathfield/rng.hpp"
#include "pathfield/stats.hpp"
#include "pathfield/tables.hpp"

namespace pathfield {

inline constexpr const char* kVariationProbeLabel = "variation-kernel-x";
inline constexpr const char* kVariationCopyLabel = "variation-tilde";

// Which derivative of the backward solution to solve for. tau is the bump
// cut-off (tau <= base start time); the kernel kinds probe the measure
// argument along fresh continuations of the probe path; the aggregate kind
// averages the per-particle kernels against a weight vector.
struct VariationKind {
  enum class Tag { path_first, path_second, measure_kernel, measure_kernel_second, measure_first };

  Tag tag = Tag::path_first;
  double tau = 0.0;
  std::optional<DiscretePath> probe;  // kernel kinds: the sample path x
  Eigen::VectorXd weights;            // measure_first: one weight per base particle

  static VariationKind path_first(double tau) { return make(Tag::path_first, tau); }
  static VariationKind path_second(double tau) { return make(Tag::path_second, tau); }
  static VariationKind measure_kernel(double tau, DiscretePath x) {
    VariationKind k = make(Tag::measure_kernel, tau);
    k.probe = std::move(x);
    return k;
  }
  static VariationKind measure_kernel_second(double tau, DiscretePath x) {
    VariationKind k = make(Tag::measure_kernel_second, tau);
    k.probe = std::move(x);
    return k;
  }
  static VariationKind measure_first(double tau, Eigen::VectorXd weights) {
    VariationKind k = make(Tag::measure_first, tau);
    k.weights = std::move(weights);
    return k;
  }

 private:
  static VariationKind make(Tag tag, double tau) {
    VariationKind k;
    k.tag = tag;
    k.tau = tau;
    return k;
  }
};

struct VariationOptions {
  // Derivative mode for the functionals (terminal, generator source). The
  // structured generator's own partials are always analytic; an opaque
  // generator always differentiates by finite differences.
  DerivMode mode = DerivMode::automatic;
  FdConfig fd;
  // Re-solve the independent-copy system on a disjoint stream instead of
  // reusing the base ensemble for the tilde averages.
  bool strict_tilde = false;
};

namespace detail {

inline void add_note(std::vector<std::string>* notes, std::string msg) {
  if (notes == nullptr) return;
  for (const auto& n : *notes)
    if (n == msg) return;
  notes->push_back(std::move(msg));
}

// Coefficient and source tables of one linear variation equation
//   dU = -(alpha U + beta V + coupling + source) dr + V dB,  U(T) = terminal.
struct LinearTables {
  Eigen::MatrixXd alpha;     // N x K
  Eigen::MatrixXd beta;      // N x K (scalar diffusion loading; solves are d = 1)
  Eigen::MatrixXd source;    // N x K
  Eigen::VectorXd terminal;  // N
  // Mean-field term at a node, evaluated against the previous Picard
  // iterate's U column; empty = uncoupled (single pass).
  std::function<Eigen::VectorXd(int, const Eigen::VectorXd&)> coupling;
};

// Backward regression passes for the linear equation, with an outer Picard
// iteration when a mean-field coupling is present. The regression designs
// are identical across passes and are built once.
inline BsdeSolution linear_backward(const BsdeProblem& p, const EnsembleSim& forward,
                                    const std::vector<Eigen::MatrixXd>& stat_tabs,
                                    int start_index, const LinearTables& tab) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = forward.paths.size();
  const int d = forward.paths.dim();
  const double dt = g.dt();

  BsdeSolution sol;
  sol.start_index = start_index;
  sol.Y.resize(N, K);
  sol.Z.assign(K, Eigen::MatrixXd::Zero(N, d));
  sol.mart_mean.assign(K, 0.0);
  sol.mart_stderr.assign(K, 0.0);

  const int steps = std::max(0, K - 1 - start_index);
  std::vector<Eigen::MatrixXd> designs(steps), dws(steps);
  for (int k = start_index; k < K - 1; ++k) {
    designs[k - start_index] = quadratic_design(raw_features(forward.paths, k, stat_tabs));
    dws[k - start_index] = dw_at(forward, k);
  }

  const bool coupled = static_cast<bool>(tab.coupling);
  const int iter_cap = coupled ? p.picard.max_iter : 1;
  Eigen::MatrixXd y_prev = tab.terminal.replicate(1, K);
  PicardLog log;
  for (int m = 0; m < iter_cap; ++m) {
    sol.ridge_used = false;
    sol.ridge_steps = 0;
    sol.Y.col(K - 1) = tab.terminal;
    for (int k = K - 2; k >= start_index; --k) {
      const StepFit fit = regress_step(designs[k - start_index], sol.Y.col(k + 1),
                                       dws[k - start_index], dt, p.antithetic);
      if (fit.ridge) {
        sol.ridge_used = true;
        ++sol.ridge_steps;
      }
      sol.Z[k] = fit.Zk;
      sol.mart_mean[k] = fit.resid_mean;
      sol.mart_stderr[k] = fit.resid_stderr;
      Eigen::VectorXd drive = tab.alpha.col(k).cwiseProduct(fit.cont) +
                              tab.beta.col(k).cwiseProduct(fit.Zk.col(0)) + tab.source.col(k);
      if (coupled) drive += tab.coupling(k, y_prev.col(k));
      sol.Y.col(k) = fit.cont + dt * drive;
    }
    for (int k = 0; k < start_index; ++k) sol.Y.col(k) = sol.Y.col(start_index);
    log.iterations = m + 1;
    if (!coupled) break;
    double gap = 0.0;
    for (int k = start_index; k < K; ++k)
      gap = std::max(gap, std::sqrt((sol.Y.col(k) - y_prev.col(k)).squaredNorm() /
                                    static_cast<double>(N)));
    log.gaps.push_back(gap);
    y_prev = sol.Y;
    if (gap < p.picard.tol_linear) break;
  }
  if (coupled && (log.gaps.empty() || log.gaps.back() >= p.picard.tol_linear)) {
    log.converged = false;
    throw PicardError("solve_variation_bsde: coupling iteration did not converge within " +
                          std::to_string(p.picard.max_iter) + " iterations (last gap " +
                          (log.gaps.empty() ? std::string("n/a") : fmt_num(log.gaps.back())) + ")",
                      log.gaps);
  }
  if (K >= 2 && start_index < K - 1) sol.Z[K - 1] = sol.Z[K - 2];
  sol.picard = log;
  sol.value = sol.Y.col(start_index).mean();
  sol.value_stderr = mean_stderr(sol.Y.col(start_index), p.antithetic);
  sol.nu.resize(K);
  for (int k = 0; k < K; ++k) sol.nu[k] = sol.law_at(k);
  return sol;
}

inline std::vector<Eigen::MatrixXd> path_stat_tables(const BsdeProblem& p,
                                                     const ParticleMeasure& paths) {
  std::vector<Eigen::MatrixXd> tabs;
  for (const Leaf& l : declared_path_stats(p)) tabs.push_back(leaf_path_table(l, paths));
  return tabs;
}

// alpha = d_y f and beta = d_z f along the carrier solution, with the law
// arguments held at the flows the base solve consumed.
inline void generator_coefficients(const BsdeProblem& p, const BsdeSolution& sys,
                                   const LawFlow& nu, LinearTables& tab) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = static_cast<int>(sys.Y.rows());
  tab.alpha = Eigen::MatrixXd::Zero(N, K);
  tab.beta = Eigen::MatrixXd::Zero(N, K);
  if (p.f.trivial()) return;
  if (p.f.analytic()) {
    const auto& parts = p.f.parts();
    const double bz = parts.gz.size() > 0 ? parts.gz(0) : 0.0;
    for (int k = sys.start_index; k < K; ++k)
      for (int i = 0; i < N; ++i) {
        if (parts.has_y) tab.alpha(i, k) = parts.gy.d1(sys.Y(i, k));
        tab.beta(i, k) = bz;
      }
    return;
  }
  for (int k = sys.start_index; k < K; ++k) {
    const double tk = g.t(k);
    parallel_for(N, p.threads, [&](int i) {
      const DiscretePath& w = sys.forward.paths.particle(i);
      const Eigen::VectorXd z = sys.Z[k].row(i).transpose();
      tab.alpha(i, k) = p.f.dy(tk, w, sys.Y(i, k), z, sys.law_paths, nu[k]);
      tab.beta(i, k) = p.f.dz(tk, w, sys.Y(i, k), z, sys.law_paths, nu[k])(0);
    });
  }
}

// Terminal column of a path variation: the (first or second) bump
// derivative of the terminal functional at the horizon.
inline Eigen::VectorXd variation_terminal(const FunctionalSpec& phi, double tau,
                                          const ParticleMeasure& paths,
                                          const ParticleMeasure& law, int order,
                                          const VariationOptions& opt, int threads,
                                          std::vector<std::string>* notes) {
  const int K = paths.grid().nodes();
  if (opt.mode != DerivMode::fd && phi.analytic()) {
    const Eigen::MatrixXd tab = order == 1 ? functional_svd_table(phi.dsl(), tau, paths, law)
                                           : functional_svd2_table(phi.dsl(), tau, paths, law);
    return tab.col(K - 1);
  }
  if (opt.mode == DerivMode::analytic)
    throw std::logic_error(
        "solve_variation_bsde: terminal functional has no analytic derivative form");
  add_note(notes, "terminal path variation of '" + phi.name() + "' uses finite differences");
  const double T = paths.grid().horizon();
  Eigen::VectorXd out(paths.size());
  parallel_for(paths.size(), threads, [&](int i) {
    out(i) = order == 1 ? fd_svd1(phi, tau, T, paths.particle(i), law, opt.fd)(0)
                        : fd_svd2(phi, tau, T, paths.particle(i), law, opt.fd)(0, 0);
  });
  return out;
}

// Bump derivative of the generator in its path slot along the ensemble,
// with the backward arguments frozen at the base solution.
inline Eigen::MatrixXd generator_path_source(const BsdeProblem& p, const BsdeSolution& sys,
                                             const LawFlow& nu, double tau, int order,
                                             const VariationOptions& opt,
                                             std::vector<std::string>* notes) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = static_cast<int>(sys.Y.rows());
  const int itau = g.snap_index(tau);
  if (p.f.analytic()) {
    const auto& parts = p.f.parts();
    if (!parts.has_source) return Eigen::MatrixXd::Zero(N, K);
    const FunctionalSpec& src = parts.source;
    if (opt.mode != DerivMode::fd && src.analytic())
      return order == 1 ? functional_svd_table(src.dsl(), tau, sys.forward.paths, sys.law_paths)
                        : functional_svd2_table(src.dsl(), tau, sys.forward.paths, sys.law_paths);
    if (opt.mode == DerivMode::analytic)
      throw std::logic_error(
          "solve_variation_bsde: generator source has no analytic derivative form");
    add_note(notes, "path variation of source '" + src.name() + "' uses finite differences");
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(N, K);
    for (int k = itau; k < K; ++k) {
      const double tk = g.t(k);
      parallel_for(N, p.threads, [&](int i) {
        out(i, k) =
            order == 1
                ? fd_svd1(src, tau, tk, sys.forward.paths.particle(i), sys.law_paths, opt.fd)(0)
                : fd_svd2(src, tau, tk, sys.forward.paths.particle(i), sys.law_paths, opt.fd)(0, 0);
      });
    }
    return out;
  }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(N, K);
  for (int k = itau; k < K; ++k) {
    const double tk = g.t(k);
    parallel_for(N, p.threads, [&](int i) {
      const DiscretePath& w = sys.forward.paths.particle(i);
      const Eigen::VectorXd z = sys.Z[k].row(i).transpose();
      const double y = sys.Y(i, k);
      if (order == 1) {
        const double h = opt.fd.h1_at(w, tk);
        out(i, k) = (p.f.value(tk, bump_path(w, tau, h), y, z, sys.law_paths, nu[k]) -
                     p.f.value(tk, bump_path(w, tau, -h), y, z, sys.law_paths, nu[k])) /
                    (2.0 * h);
      } else {
        const double h = opt.fd.h2_at(w, tk);
        const double f0 = p.f.value(tk, w, y, z, sys.law_paths, nu[k]);
        out(i, k) = (p.f.value(tk, bump_path(w, tau, h), y, z, sys.law_paths, nu[k]) - 2.0 * f0 +
                     p.f.value(tk, bump_path(w, tau, -h), y, z, sys.law_paths, nu[k])) /
                    (h * h);
      }
    });
  }
  return out;
}

// Quadratic first-variation terms of the second path-variation source:
//   d2y f (dY)^2 + d2z f (dZ)^2 + 2 dy dz f dY dZ + 2 dw dy f dY + 2 dw dz f dZ.
// For the structured family only the d2y term survives: z enters linearly
// with a constant loading and the parts are additively separable.
inline void add_second_path_terms(const BsdeProblem& p, const BsdeSolution& sys, const LawFlow& nu,
                                  const BsdeSolution& first, double tau,
                                  const VariationOptions& opt, Eigen::MatrixXd& source) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = static_cast<int>(sys.Y.rows());
  const int itau = g.snap_index(tau);
  if (p.f.analytic()) {
    const auto& parts = p.f.parts();
    if (!parts.has_y) return;
    for (int k = itau; k < K; ++k)
      for (int i = 0; i < N; ++i)
        source(i, k) += parts.gy.d2(sys.Y(i, k)) * first.Y(i, k) * first.Y(i, k);
    return;
  }
  for (int k = itau; k < K; ++k) {
    const double tk = g.t(k);
    parallel_for(N, p.threads, [&](int i) {
      const DiscretePath& w = sys.forward.paths.particle(i);
      const double y = sys.Y(i, k);
      const Eigen::VectorXd z = sys.Z[k].row(i).transpose();
      const double dy = first.Y(i, k);
      const double dz = first.Z[k](i, 0);
      const auto feval = [&](double ws, double ys, double zs) {
        Eigen::VectorXd zb = z;
        zb(0) += zs;
        if (ws == 0.0) return p.f.value(tk, w, y + ys, zb, sys.law_paths, nu[k]);
        return p.f.value(tk, bump_path(w, tau, ws), y + ys, zb, sys.law_paths, nu[k]);
      };
      const double hy = 1e-4 * (1.0 + std::abs(y));
      const double hz = 1e-4 * (1.0 + std::abs(z(0)));
      const double hw = opt.fd.h1_at(w, tk);
      const double f0 = feval(0.0, 0.0, 0.0);
      const double dyy = (feval(0.0, hy, 0.0) - 2.0 * f0 + feval(0.0, -hy, 0.0)) / (hy * hy);
      const double dzz = (feval(0.0, 0.0, hz) - 2.0 * f0 + feval(0.0, 0.0, -hz)) / (hz * hz);
      const double dydz = (feval(0.0, hy, hz) - feval(0.0, hy, -hz) - feval(0.0, -hy, hz) +
                           feval(0.0, -hy, -hz)) /
                          (4.0 * hy * hz);
      const double dwy = (feval(hw, hy, 0.0) - feval(hw, -hy, 0.0) - feval(-hw, hy, 0.0) +
                          feval(-hw, -hy, 0.0)) /
                         (4.0 * hw * hy);
      const double dwz = (feval(hw, 0.0, hz) - feval(hw, 0.0, -hz) - feval(-hw, 0.0, hz) +
                          feval(-hw, 0.0, -hz)) /
                         (4.0 * hw * hz);
      source(i, k) += dyy * dy * dy + dzz * dz * dz + 2.0 * dydz * dy * dz + 2.0 * dwy * dy +
                      2.0 * dwz * dz;
    });
  }
}

// Path variation of the carrier solution: linear solve with the bump
// derivatives of the terminal and of the generator's path slot as data.
// The bump does not move the law arguments, so no mean-field term enters.
inline BsdeSolution solve_path_variation(const BsdeProblem& p, const BsdeSolution& sys,
                                         const LawFlow& nu, double tau, int order,
                                         const VariationOptions& opt) {
  std::vector<std::string> notes;
  if (!p.f.analytic())
    add_note(&notes,
             "generator '" + p.f.name() + "' is opaque; its partial derivatives use finite differences");
  LinearTables tab;
  generator_coefficients(p, sys, nu, tab);
  tab.source = generator_path_source(p, sys, nu, tau, order, opt, &notes);
  if (order == 2 && (!p.f.analytic() || p.f.parts().has_y)) {
    const BsdeSolution first = solve_path_variation(p, sys, nu, tau, 1, opt);
    add_second_path_terms(p, sys, nu, first, tau, opt, tab.source);
  }
  tab.terminal = variation_terminal(p.terminal, tau, sys.forward.paths, sys.law_paths, order, opt,
                                    p.threads, &notes);
  BsdeSolution out = linear_backward(p, sys.forward, path_stat_tables(p, sys.forward.paths),
                                     sys.start_index, tab);
  out.forward = sys.forward;
  out.law_paths = sys.law_paths;
  out.notes = std::move(notes);
  return out;
}

// Tilde-ensemble average of the measure-derivative kernel of a functional
// (order 1), or of the kernel's probe-path derivative (order 2), at every
// (main sample, node) pair in [k_begin, k_end).
inline Eigen::MatrixXd kernel_average_table(const FunctionalSpec& spec, double tau,
                                            const ParticleMeasure& mains,
                                            const ParticleMeasure& law,
                                            const ParticleMeasure& tilde, int k_begin, int k_end,
                                            int order, const VariationOptions& opt, int threads,
                                            std::vector<std::string>* notes) {
  const TimeGrid& g = mains.grid();
  const int K = g.nodes();
  const int N = mains.size();
  const int itau = g.snap_index(tau);
  const int k_lo = std::max(k_begin, itau);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(N, K);
  if (opt.mode != DerivMode::fd && spec.analytic()) {
    const Functional& F = spec.dsl();
    bool any_measure = false;
    std::vector<Eigen::RowVectorXd> kappa(F.num_leaves());
    for (int l = 0; l < F.num_leaves(); ++l) {
      if (!F.leaf(l).is_measure()) continue;
      any_measure = true;
      const Eigen::MatrixXd table = order == 1 ? leaf_svd_table(F.leaf(l), itau, tilde)
                                               : leaf_svd2_table(F.leaf(l), itau, tilde);
      const double dir = F.leaf(l).dir(0);
      kappa[l] = table.colwise().mean() * (order == 1 ? dir : dir * dir);
    }
    if (!any_measure) return out;
    const LeafValueTables tabs = leaf_value_tables(F, mains, law);
    for (int k = k_lo; k < k_end; ++k) {
      const double tk = g.t(k);
      parallel_for(N, threads, [&](int i) {
        const Eigen::VectorXd grad = F.combiner().grad(tk, tabs.at(F, i, k));
        double acc = 0.0;
        for (int l = 0; l < F.num_leaves(); ++l)
          if (F.leaf(l).is_measure() && grad(l) != 0.0) acc += grad(l) * kappa[l](k);
        out(i, k) = acc;
      });
    }
    return out;
  }
  if (opt.mode == DerivMode::analytic)
    throw std::logic_error(
        "solve_variation_bsde: functional has no analytic form for the measure kernel");
  add_note(notes,
           "measure kernel of '" + spec.name() + "' uses particle-lift finite differences");
  const double eps = opt.fd.lift_at(law);
  const double n1 = static_cast<double>(law.size() + 1);
  const int M = tilde.size();
  for (int m = 0; m < M; ++m) {
    const ParticleMeasure plus = augment_measure(law, bump_path(tilde.particle(m), tau, eps));
    const ParticleMeasure minus = augment_measure(law, bump_path(tilde.particle(m), tau, -eps));
    std::optional<ParticleMeasure> mid;
    if (order == 2) mid = augment_measure(law, tilde.particle(m));
    for (int k = k_lo; k < k_end; ++k) {
      const double tk = g.t(k);
      parallel_for(N, threads, [&](int i) {
        const DiscretePath& w = mains.particle(i);
        const double up = spec.value(tk, w, plus);
        const double dn = spec.value(tk, w, minus);
        if (order == 1) {
          out(i, k) += n1 * (up - dn) / (2.0 * eps);
        } else {
          out(i, k) += n1 * (up - 2.0 * spec.value(tk, w, *mid) + dn) / (eps * eps);
        }
      });
    }
  }
  out /= static_cast<double>(M);
  return out;
}

// Probe-kernel source of an opaque generator's measure slot, by
// particle-lift differences with the backward arguments frozen.
inline Eigen::MatrixXd opaque_generator_mu_source(const BsdeProblem& p, const BsdeSolution& sys,
                                                  const LawFlow& nu, double tau,
                                                  const ParticleMeasure& tilde,
                                                  const VariationOptions& opt) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int N = static_cast<int>(sys.Y.rows());
  const int itau = g.snap_index(tau);
  const ParticleMeasure& law = sys.law_paths;
  const double eps = opt.fd.lift_at(law);
  const double n1 = static_cast<double>(law.size() + 1);
  const int M = tilde.size();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(N, K);
  for (int m = 0; m < M; ++m) {
    const ParticleMeasure plus = augment_measure(law, bump_path(tilde.particle(m), tau, eps));
    const ParticleMeasure minus = augment_measure(law, bump_path(tilde.particle(m), tau, -eps));
    for (int k = std::max(sys.start_index, itau); k < K - 1; ++k) {
      const double tk = g.t(k);
      parallel_for(N, p.threads, [&](int i) {
        const DiscretePath& w = sys.forward.paths.particle(i);
        const Eigen::VectorXd z = sys.Z[k].row(i).transpose();
        out(i, k) += n1 *
                     (p.f.value(tk, w, sys.Y(i, k), z, plus, nu[k]) -
                      p.f.value(tk, w, sys.Y(i, k), z, minus, nu[k])) /
                     (2.0 * eps);
      });
    }
  }
  out /= static_cast<double>(M);
  return out;
}

// Adds the law-coupling source (1/M) sum_m kernel(.., samples(m,k)) *
// factors(m,k) to the table, where kernel is the lifted law derivative of
// the generator (sample_slot_deriv = false) or its derivative in the sample
// slot (true). For the structured family the kernel factorizes and the term
// is shared by every main sample.
inline void add_law_source(const BsdeProblem& p, const BsdeSolution& sys, const LawFlow& nu,
                           const Eigen::MatrixXd& samples, const Eigen::MatrixXd& factors,
                           bool sample_slot_deriv, Eigen::MatrixXd& source) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int M = static_cast<int>(samples.rows());
  if (p.f.analytic()) {
    const auto& parts = p.f.parts();
    if (!parts.has_nu) return;
    if (!parts.stat.separable())
      throw std::logic_error(
          "Generator: law kernel needs a mean/second-moment statistic (non-smooth statistic)");
    for (int k = sys.start_index; k < K - 1; ++k) {
      double avg = 0.0;
      for (int m = 0; m < M; ++m) {
        const double wgt = sample_slot_deriv ? parts.stat.phi_d2(samples(m, k))
                                             : parts.stat.phi_d1(samples(m, k));
        avg += wgt * factors(m, k);
      }
      avg /= static_cast<double>(M);
      source.col(k).array() += parts.gnu.d1(parts.stat.value(nu[k])) * avg;
    }
    return;
  }
  if (sample_slot_deriv)
    throw std::logic_error(
        "Generator: second-order law kernel requires the structured family");
  const int N = static_cast<int>(sys.Y.rows());
  for (int k = sys.start_index; k < K - 1; ++k) {
    const double tk = g.t(k);
    const double stat = p.f.stat_of(nu[k]);
    parallel_for(N, p.threads, [&](int i) {
      const DiscretePath& w = sys.forward.paths.particle(i);
      const Eigen::VectorXd z = sys.Z[k].row(i).transpose();
      double acc = 0.0;
      for (int m = 0; m < M; ++m)
        acc += p.f.nu_kernel(tk, w, sys.Y(i, k), z, sys.law_paths, nu[k], samples(m, k), stat) *
               factors(m, k);
      source(i, k) += acc / static_cast<double>(M);
    });
  }
}

// Self-coupling hook: the tilde average of the lifted law kernel against
// the previous iterate's U samples on the tilde system.
inline std::function<Eigen::VectorXd(int, const Eigen::VectorXd&)> make_law_coupling(
    const BsdeProblem& p, const BsdeSolution& sys, const LawFlow& nu,
    const BsdeSolution& tilde_sys) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int Ns = static_cast<int>(sys.Y.rows());
  if (p.f.analytic()) {
    const auto& parts = p.f.parts();
    const int Nt = static_cast<int>(tilde_sys.Y.rows());
    Eigen::MatrixXd phi1(Nt, K);
    Eigen::VectorXd gk = Eigen::VectorXd::Zero(K);
    for (int k = sys.start_index; k < K; ++k) {
      for (int j = 0; j < Nt; ++j) phi1(j, k) = parts.stat.phi_d1(tilde_sys.Y(j, k));
      gk(k) = parts.gnu.d1(parts.stat.value(nu[k]));
    }
    return [phi1 = std::move(phi1), gk = std::move(gk), Ns](int k, const Eigen::VectorXd& u) {
      const double avg = phi1.col(k).dot(u) / static_cast<double>(u.size());
      return Eigen::VectorXd::Constant(Ns, gk(k) * avg);
    };
  }
  const BsdeProblem* pp = &p;
  const BsdeSolution* sp = &sys;
  const BsdeSolution* tp = &tilde_sys;
  const LawFlow* np = &nu;
  return [pp, sp, tp, np, Ns](int k, const Eigen::VectorXd& u) {
    const double tk = pp->grid.t(k);
    const double stat = pp->f.stat_of((*np)[k]);
    const int Nt = static_cast<int>(tp->Y.rows());
    Eigen::VectorXd out(Ns);
    parallel_for(Ns, pp->threads, [&](int i) {
      const DiscretePath& w = sp->forward.paths.particle(i);
      const Eigen::VectorXd z = sp->Z[k].row(i).transpose();
      double acc = 0.0;
      for (int j = 0; j < Nt; ++j)
        acc += pp->f.nu_kernel(tk, w, sp->Y(i, k), z, sp->law_paths, (*np)[k], tp->Y(j, k), stat) *
               u(j);
      out(i) = acc / static_cast<double>(Nt);
    });
    return out;
  };
}

// Measure-kernel variation driven by a probe path x. A fresh backward
// solve along continuations of x (with the base flows frozen) supplies the
// tilde samples; when the generator reads the law of Y, a companion
// mean-field equation on the independent-copy system is solved first by
// Picard iteration and its contribution enters the main equation as a
// known source.
inline BsdeSolution solve_measure_kernel_variation(const BsdeProblem& p,
                                                   const BsdeSolution& diagonal,
                                                   const BsdeSolution& conditioned, double tau,
                                                   const DiscretePath& x, int order,
                                                   const VariationOptions& opt) {
  const TimeGrid& g = p.grid;
  const int K = g.nodes();
  const int start = conditioned.start_index;
  const double t0 = g.t(start);
  std::vector<std::string> notes;
  const bool coupled = p.f.analytic() ? p.f.parts().has_nu : true;
  if (order == 2 && !p.f.analytic())
    throw std::logic_error(
        "solve_variation_bsde: the second-order measure kernel requires the structured generator "
        "family");
  if (coupled && p.f.analytic() && !p.f.parts().stat.separable())
    throw std::logic_error(
        "Generator: law kernel needs a mean/second-moment statistic (non-smooth statistic)");
  if (!p.f.analytic())
    add_note(&notes,
             "generator '" + p.f.name() + "' is opaque; its partial derivatives use finite differences");

  // Probe system: fresh continuations of x under the frozen base flows.
  BsdeProblem px = p;
  px.seed = derive_seed(p.seed, stream_offset(kVariationProbeLabel), 0, 0);
  FrozenLaws frozen;
  frozen.mu_flow = diagonal.law_paths;
  frozen.nu_flow = diagonal.nu;
  frozen.has_nu = p.f.depends_on_law();
  const BsdeSolution xsol = solve_bsde_regression(px, x, t0, frozen);
  const ParticleMeasure& tilde = xsol.forward.paths;

  BsdeSolution dx1, dx2;
  if (coupled) {
    dx1 = solve_path_variation(p, xsol, diagonal.nu, tau, 1, opt);
    for (const auto& n : dx1.notes) add_note(&notes, n);
    if (order == 2) dx2 = solve_path_variation(p, xsol, diagonal.nu, tau, 2, opt);
  }

  // Independent-copy system carrying the tilde averages.
  const BsdeSolution* tsys = &diagonal;
  BsdeSolution copy;
  if (coupled && opt.strict_tilde) {
    BsdeProblem pc = p;
    pc.seed = derive_seed(p.seed, stream_offset(kVariationCopyLabel), 0, 1);
    copy = solve_mf_bsde(pc, diagonal.law_paths.stopped(t0), t0);
    tsys = &copy;
    add_note(&notes, "strict tilde mode: independent copy re-solved on a disjoint stream");
  } else if (coupled) {
    add_note(&notes,
             "independent-copy averages reuse the base ensemble (exchangeability); set "
             "strict_tilde for a disjoint copy");
  }

  // Shared table assembly: kernel terminal plus the probe-kernel and
  // law-coupling sources of the generator along a carrier system.
  const auto build_tables = [&](const BsdeSolution& sys, const LawFlow& nu_sys) {
    LinearTables tab;
    generator_coefficients(p, sys, nu_sys, tab);
    tab.terminal = kernel_average_table(p.terminal, tau, sys.forward.paths, sys.law_paths, tilde,
                                        K - 1, K, order, opt, p.threads, &notes)
                       .col(K - 1);
    tab.source = Eigen::MatrixXd::Zero(sys.Y.rows(), K);
    if (p.f.analytic()) {
      if (p.f.parts().has_source)
        tab.source += kernel_average_table(p.f.parts().source, tau, sys.forward.paths,
                                           sys.law_paths, tilde, sys.start_index, K - 1, order,
                                           opt, p.threads, &notes);
    } else {
      tab.source += opaque_generator_mu_source(p, sys, nu_sys, tau, tilde, opt);
      add_note(&notes, "measure kernel of generator '" + p.f.name() +
                           "' uses particle-lift finite differences");
    }
    if (coupled) {
      if (order == 1) {
        add_law_source(p, sys, nu_sys, xsol.Y, dx1.Y, false, tab.source);
      } else {
        add_law_source(p, sys, nu_sys, xsol.Y, dx1.Y.cwiseProduct(dx1.Y), true, tab.source);
        add_law_source(p, sys, nu_sys, xsol.Y, dx2.Y, false, tab.source);
      }
    }
    return tab;
  };

  BsdeSolution companion;
  if (coupled) {
    LinearTables tcomp = build_tables(*tsys, tsys->nu);
    tcomp.coupling = make_law_coupling(p, *tsys, tsys->nu, *tsys);
    companion = linear_backward(p, tsys->forward, path_stat_tables(p, tsys->forward.paths),
                                tsys->start_index, tcomp);
  }

  LinearTables tmain = build_tables(conditioned, diagonal.nu);
  if (coupled) add_law_source(p, conditioned, diagonal.nu, tsys->Y, companion.Y, false, tmain.source);
  BsdeSolution out = linear_backward(p, conditioned.forward,
                                     path_stat_tables(p, conditioned.forward.paths), start, tmain);
  if (coupled) out.picard = companion.picard;
  out.forward = conditioned.forward;
  out.law_paths = conditioned.law_paths;
  out.notes = std::move(notes);
  return out;
}

// Weighted aggregate of the per-particle measure kernels: the derivative of
// the backward solution along the lifted direction with the given weight at
// each base particle. The probe solves share one stream, so the aggregate
// benefits from common random numbers.
inline BsdeSolution solve_measure_first_variation(const BsdeProblem& p,
                                                  const BsdeSolution& diagonal,
                                                  const BsdeSolution& conditioned, double tau,
                                                  const Eigen::VectorXd& weights,
                                                  const VariationOptions& opt) {
  const int Nd = static_cast<int>(diagonal.Y.rows());
  if (static_cast<int>(weights.size()) != Nd)
    throw std::invalid_argument("solve_variation_bsde: need one weight per base particle (got " +
                                std::to_string(weights.size()) + ", want " + std::to_string(Nd) +
                                ")");
  const int K = p.grid.nodes();
  BsdeSolution acc;
  bool have = false;
  for (int j = 0; j < Nd; ++j) {
    if (weights(j) == 0.0) continue;
    BsdeSolution uj = solve_measure_kernel_variation(p, diagonal, conditioned, tau,
                                                     diagonal.law_paths.particle(j), 1, opt);
    const double wj = weights(j) / static_cast<double>(Nd);
    if (!have) {
      acc = std::move(uj);
      acc.Y *= wj;
      for (auto& zk : acc.Z) zk *= wj;
      have = true;
    } else {
      acc.Y += wj * uj.Y;
      for (int k = 0; k < K; ++k) acc.Z[k] += wj * uj.Z[k];
      acc.picard.iterations = std::max(acc.picard.iterations, uj.picard.iterations);
      for (const auto& n : uj.notes) add_note(&acc.notes, n);
    }
  }
  if (!have) {
    const int N = static_cast<int>(conditioned.Y.rows());
    acc.forward = conditioned.forward;
    acc.law_paths = conditioned.law_paths;
    acc.start_index = conditioned.start_index;
    acc.Y = Eigen::MatrixXd::Zero(N, K);
    acc.Z.assign(K, Eigen::MatrixXd::Zero(N, 1));
    acc.picard.iterations = 0;
  }
  acc.mart_mean.assign(K, 0.0);
  acc.mart_stderr.assign(K, 0.0);
  acc.value = acc.Y.col(acc.start_index).mean();
  acc.value_stderr = mean_stderr(acc.Y.col(acc.start_index), p.antithetic);
  acc.nu.resize(K);
  for (int k = 0; k < K; ++k) acc.nu[k] = acc.law_at(k);
  return acc;
}

}  // namespace detail

// Derivative field of a backward solution. `diagonal` is the mean-field
// solve whose law flows the equation consumed; `conditioned` is the solve
// the derivative is taken along (they coincide on the diagonal, see the
// two-argument overload). Path kinds differentiate the conditioned state
// with the law frozen; kernel kinds differentiate the lifted measure
// argument at a probe path; the aggregate kind averages per-particle
// kernels against a weight vector.
inline BsdeSolution solve_variation_bsde(const VariationKind& kind, const BsdeSolution& diagonal,
                                         const BsdeSolution& conditioned, const BsdeProblem& p,
                                         const VariationOptions& opt = {}) {
  const TimeGrid& g = p.grid;
  if (p.coeffs.dim != 1 || diagonal.forward.paths.dim() != 1 ||
      conditioned.forward.paths.dim() != 1)
    throw std::invalid_argument(
        "solve_variation_bsde: variation solves are scoped to one-dimensional state (d = 1)");
  if (!diagonal.forward.paths.grid().same_as(g) || !conditioned.forward.paths.grid().same_as(g))
    throw std::invalid_argument("solve_variation_bsde: base solutions use a different time grid");
  if (diagonal.start_index != conditioned.start_index)
    throw std::invalid_argument("solve_variation_bsde: base solutions disagree on the start node");
  if (opt.mode == DerivMode::analytic && !p.f.analytic())
    throw std::logic_error(
        "solve_variation_bsde: analytic mode requires the structured generator family");
  const int itau = g.snap_index(kind.tau);
  if (itau > conditioned.start_index)
    throw std::invalid_argument(
        "solve_variation_bsde: the bump cut-off must not exceed the base start time");
  switch (kind.tag) {
    case VariationKind::Tag::path_first:
      return detail::solve_path_variation(p, conditioned, diagonal.nu, kind.tau, 1, opt);
    case VariationKind::Tag::path_second:
      return detail::solve_path_variation(p, conditioned, diagonal.nu, kind.tau, 2, opt);
    case VariationKind::Tag::measure_kernel:
    case VariationKind::Tag::measure_kernel_second: {
      if (!kind.probe)
        throw std::invalid_argument("solve_variation_bsde: measure-kernel kinds need a probe path");
      if (!kind.probe->grid().same_as(g) || kind.probe->dim() != 1)
        throw std::invalid_argument(
            "solve_variation_bsde: probe path does not match the problem grid/dimension");
      const int order = kind.tag == VariationKind::Tag::measure_kernel ? 1 : 2;
      return detail::solve_measure_kernel_variation(p, diagonal, conditioned, kind.tau,
                                                    *kind.probe, order, opt);
    }
    case VariationKind::Tag::measure_first:
      return detail::solve_measure_first_variation(p, diagonal, conditioned, kind.tau,
                                                   kind.weights, opt);
  }
  throw std::logic_error("solve_variation_bsde: unknown variation kind");
}

// Diagonal convenience form: the base serves as both the law-carrying and
// the conditioned system.
inline BsdeSolution solve_variation_bsde(const VariationKind& kind, const BsdeSolution& base,
                                         const BsdeProblem& p, const VariationOptions& opt = {}) {
  return solve_variation_bsde(kind, base, base, p, opt);
}

}  // namespace pathfield
