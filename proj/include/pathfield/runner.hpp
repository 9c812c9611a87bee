// pathfield: experiment runner. Dispatches a parsed RunConfig to one of the
// eight suites, writes plot-ready CSV artifacts plus a JSON manifest, and
// reports pass/fail per suite. Outputs are a pure function of (config, seed)
// at any thread count: the CSVs carry no wall-clock data, and sweep cells
// derive their seeds from the axis values rather than the enumeration order.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pathfield/bsde.hpp"
#include "pathfield/config.hpp"
#include "pathfield/csvio.hpp"
#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/ito.hpp"
#include "pathfield/master.hpp"
#include "pathfield/rng.hpp"
#include "pathfield/version.hpp"

namespace pathfield {

struct SuiteResult {
  std::string name;
  bool passed = true;
  int checks = 0;
  int failures = 0;
  double wall_seconds = 0.0;
  std::vector<std::string> stats;  // headline numbers, human readable
};

struct RunManifest {
  std::string experiment;
  std::string version = kVersion;
  json config_echo;
  std::vector<SuiteResult> suites;
  std::vector<double> gap_log;  // Picard gaps of a failed solve
  bool passed = true;
  double wall_seconds = 0.0;

  json to_json() const {
    json j;
    j["experiment"] = experiment;
    j["version"] = version;
    j["passed"] = passed;
    j["wall_seconds"] = wall_seconds;
    j["config"] = config_echo;
    j["suites"] = json::array();
    for (const SuiteResult& s : suites) {
      json sj;
      sj["name"] = s.name;
      sj["passed"] = s.passed;
      sj["checks"] = s.checks;
      sj["failures"] = s.failures;
      sj["wall_seconds"] = s.wall_seconds;
      sj["stats"] = s.stats;
      j["suites"].push_back(std::move(sj));
    }
    if (!gap_log.empty()) j["gap_log"] = gap_log;
    return j;
  }
};

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

inline void tally(SuiteResult& r, bool ok) {
  ++r.checks;
  if (!ok) {
    ++r.failures;
    r.passed = false;
  }
}

inline std::string stat_line(const std::string& key, double v) {
  return key + " = " + csv_num(v);
}

// Brownian-shaped random probe path from the counter-based noise field.
inline DiscretePath probe_path(const TimeGrid& g, const NoiseField& nf, std::uint64_t stream) {
  std::vector<double> v(static_cast<std::size_t>(g.nodes()));
  double x = 0.5 * nf.gauss(stream, 0, 3);
  v[0] = x;
  const double sdt = std::sqrt(g.dt());
  for (int k = 1; k < g.nodes(); ++k) {
    x += sdt * nf.gauss(stream, static_cast<std::uint64_t>(k), 5);
    v[static_cast<std::size_t>(k)] = x;
  }
  return DiscretePath::from_scalar(g, v);
}

inline ParticleMeasure probe_measure(const TimeGrid& g, int size, const NoiseField& nf,
                                     std::uint64_t base_stream) {
  std::vector<DiscretePath> parts;
  parts.reserve(static_cast<std::size_t>(size));
  for (int j = 0; j < size; ++j)
    parts.push_back(probe_path(g, nf, base_stream + 1 + static_cast<std::uint64_t>(j)));
  return ParticleMeasure(std::move(parts));
}

// Least-squares slope of log y against log x; NaN when degenerate.
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  int n = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0.0) || !(y[i] > 0.0)) continue;
    const double lx = std::log(x[i]), ly = std::log(y[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  const double den = n * sxx - sx * sx;
  if (n < 2 || den == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return (n * sxy - sx * sy) / den;
}

// ---------------------------------------------------------------------------
// derivcheck
// ---------------------------------------------------------------------------

struct NamedFunctional {
  std::string name;
  FunctionalSpec spec;
};

// Analytic reference corpus: plain state reads, a delayed read, running
// integrals, law statistics, and a composite mixing all three families.
inline std::vector<NamedFunctional> derivcheck_corpus(double horizon) {
  std::vector<NamedFunctional> out;
  out.push_back({"state-square", FunctionalSpec::path_eval(sf_square())});
  out.push_back({"state-sin", FunctionalSpec::path_eval(sf_sin(1.5, 0.8))});
  out.push_back(
      {"delayed-eval", FunctionalSpec::frozen_eval(sf_affine(1.0, 0.0), 0.35 * horizon)});
  out.push_back({"running-poly", FunctionalSpec::running_integral(sf_polynomial({0.0, 0.5, 1.0}))});
  out.push_back({"law-square", FunctionalSpec::measure_eval(sf_square())});
  out.push_back({"law-integral", FunctionalSpec::measure_integral(sf_polynomial({0.0, 1.0, 0.3}))});

  // Composite: 0.7 sin(1.2 w(t)) E[W(t)^2] + 0.4 Int w + 0.2 w(t) Int w.
  Combiner G;
  G.arity = 3;
  CombinerTerm t1;
  t1.coeff = 0.7;
  t1.slots = {0, 1};
  t1.factors = {sf_sin(1.2, 1.0), sf_identity()};
  CombinerTerm t2;
  t2.coeff = 0.4;
  t2.slots = {2};
  t2.factors = {sf_identity()};
  CombinerTerm t3;
  t3.coeff = 0.2;
  t3.slots = {0, 2};
  t3.factors = {sf_identity(), sf_identity()};
  G.terms = {t1, t2, t3};
  std::vector<Leaf> leaves;
  leaves.push_back(leaf_path_eval(sf_identity()));
  leaves.push_back(leaf_measure_eval(sf_square()));
  leaves.push_back(leaf_running_integral(sf_identity()));
  out.push_back({"composite", FunctionalSpec(Functional(std::move(G), std::move(leaves)))});
  return out;
}

inline SuiteResult run_derivcheck(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "derivcheck";
  const TimeGrid g = rc.grid();
  const NoiseField nf(derive_seed(rc.seed, 0xDC));
  const auto corpus = derivcheck_corpus(rc.horizon);
  const int probes = 100;
  const int msize = rc.problem.probe.measure_size;

  CsvWriter csv(out_dir + "/derivcheck.csv",
                {"functional", "probe", "kind", "tau", "t", "analytic", "fd", "abs_err", "tol",
                 "pass"});
  double worst_ratio = 0.0;
  for (std::size_t fi = 0; fi < corpus.size(); ++fi) {
    const FunctionalSpec& f = corpus[fi].spec;
    for (int p = 0; p < probes; ++p) {
      const std::uint64_t st = (static_cast<std::uint64_t>(fi) << 32) + static_cast<std::uint64_t>(p);
      const DiscretePath w = probe_path(g, nf, st * 131 + 1);
      const ParticleMeasure mu = probe_measure(g, msize, nf, st * 131 + 7);
      const int K = g.nodes();
      const int kt = 1 + static_cast<int>(nf.word(st, 0, 1) % static_cast<std::uint64_t>(K - 2));
      const int ktau = static_cast<int>(nf.word(st, 0, 2) % static_cast<std::uint64_t>(kt + 1));
      const double t = g.t(kt), tau = g.t(ktau);
      const int which = static_cast<int>(nf.word(st, 0, 3) % static_cast<std::uint64_t>(msize));

      const double h1 = rc.fd.h1_at(w, t);
      const double h2v = rc.fd.h2_at(w, t);
      const double lift = rc.fd.lift_at(mu);
      struct Row {
        const char* kind;
        double an, fd, tol;
      };
      const Row rows[4] = {
          {"path-first", svd_first(f, tau, t, w, mu, DerivMode::analytic)(0),
           svd_first(f, tau, t, w, mu, DerivMode::fd, rc.fd)(0), 10.0 * h1 * h1},
          {"path-second", svd_second(f, tau, t, w, mu, DerivMode::analytic)(0, 0),
           svd_second(f, tau, t, w, mu, DerivMode::fd, rc.fd)(0, 0), 10.0 * h2v},
          {"measure-first",
           measure_derivative_first(f, tau, t, w, mu, which, DerivMode::analytic)(0),
           measure_derivative_first(f, tau, t, w, mu, which, DerivMode::fd, rc.fd)(0),
           10.0 * lift * lift},
          {"measure-second",
           measure_derivative_second(f, tau, t, w, mu, which, DerivMode::analytic)(0, 0),
           measure_derivative_second(f, tau, t, w, mu, which, DerivMode::fd, rc.fd)(0, 0),
           10.0 * std::max(h2v, lift)},
      };
      for (const Row& r : rows) {
        const double err = std::abs(r.an - r.fd);
        const bool ok = err <= r.tol;
        worst_ratio = std::max(worst_ratio, r.tol > 0 ? err / r.tol : 0.0);
        tally(res, ok);
        csv.row({corpus[fi].name, p, r.kind, tau, t, r.an, r.fd, err, r.tol, ok});
      }
    }
  }
  res.stats.push_back(stat_line("worst abs_err / tol", worst_ratio));
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// ito-check
// ---------------------------------------------------------------------------

inline FunctionalSpec ito_default_functional() { return FunctionalSpec::path_eval(sf_square()); }

struct ItoCell {
  ItoReport rep;
  bool pass = false;
};

inline ItoCell ito_cell(const RunConfig& rc) {
  const TimeGrid g = rc.grid();
  const ProbeConfig& pb = rc.problem.probe;
  const FunctionalSpec f =
      rc.echo.contains("problem") && rc.echo["problem"].contains("terminal")
          ? rc.problem.terminal
          : ito_default_functional();
  const DiscretePath gamma = pb.path(g);
  const ParticleMeasure eta = pb.measure(g);
  const double t = pb.t;
  const double s = pb.s.value_or(rc.horizon);
  ItoCell cell;
  if (pb.v) {
    cell.rep = partial_ito_decomposition(f, rc.problem.coeffs, *pb.v, t, s, gamma, eta,
                                         rc.particles, rc.seed, rc.threads,
                                         DerivMode::automatic, rc.fd);
  } else {
    cell.rep = ito_decomposition(f, rc.problem.coeffs, t, s, gamma, eta, rc.particles, rc.seed,
                                 rc.threads, DerivMode::automatic, rc.fd);
  }
  cell.pass = std::abs(cell.rep.residual_mean) <=
              3.0 * cell.rep.residual_stderr + 1e-12 * (1.0 + std::abs(cell.rep.lhs_mean));
  return cell;
}

inline void ito_csv_row(CsvWriter& csv, const ItoReport& r, bool pass) {
  csv.row({r.mesh, r.samples, r.time_term, r.path_term, r.trace_term, r.measure_term,
           r.measure_trace_term, r.residual_mean, r.residual_stderr, pass});
}

inline SuiteResult run_ito_check(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "ito-check";
  CsvWriter csv(out_dir + "/ito_check.csv",
                {"M", "N", "time_term", "path_term", "trace_term", "measure_term",
                 "measure_trace_term", "residual_mean", "residual_stderr", "pass"});
  const ItoCell cell = ito_cell(rc);
  ito_csv_row(csv, cell.rep, cell.pass);
  tally(res, cell.pass);
  res.stats.push_back(stat_line("residual_mean", cell.rep.residual_mean));
  res.stats.push_back(stat_line("residual_stderr", cell.rep.residual_stderr));
  if (cell.rep.growth_warning)
    res.stats.push_back("growth not certified for this functional (unregistered smooth map)");
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// solve-bsde
// ---------------------------------------------------------------------------

struct BsdeCell {
  BsdeSolution sol;
  bool pass = false;
};

inline BsdeCell bsde_cell(const RunConfig& rc) {
  const BsdeProblem p = rc.base_problem();
  const TimeGrid g = rc.grid();
  // The Monte Carlo ensemble of a mean-field solve is the measure itself.
  // Without an explicit measure block the initial law is mc.N copies of the
  // base path, i.e. a point mass sampled at ensemble size.
  ProbeConfig pb = rc.problem.probe;
  if (!pb.measure_given) {
    pb.measure_size = rc.particles;
    pb.measure_spread = 0.0;
  }
  const ParticleMeasure mu0 = pb.measure(g);
  BsdeCell cell;
  cell.sol = solve_mf_bsde(p, mu0, rc.problem.probe.t);
  cell.pass = cell.sol.picard.converged && std::isfinite(cell.sol.value);
  if (rc.expect_value) {
    const double scale = std::max(1.0, std::abs(*rc.expect_value));
    cell.pass = cell.pass &&
                std::abs(cell.sol.value - *rc.expect_value) <= rc.expect_rel_tol * scale;
  }
  return cell;
}

inline SuiteResult run_solve_bsde(const RunConfig& rc, const std::string& out_dir,
                                  RunManifest& manifest) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "solve-bsde";
  CsvWriter csv(out_dir + "/bsde.csv",
                {"iteration", "k", "t_k", "mean_Y", "stderr_Y", "mean_absZ", "law_gap"});
  try {
    const BsdeCell cell = bsde_cell(rc);
    const BsdeSolution& sol = cell.sol;
    const TimeGrid g = rc.grid();
    const double last_gap = sol.picard.gaps.empty() ? 0.0 : sol.picard.gaps.back();
    for (int k = sol.start_index; k < g.nodes(); ++k) {
      const double absz =
          k < static_cast<int>(sol.Z.size()) && sol.Z[static_cast<std::size_t>(k)].size() > 0
              ? sol.Z[static_cast<std::size_t>(k)].rowwise().norm().mean()
              : 0.0;
      csv.row({sol.picard.iterations, k, g.t(k), sol.mean_at(k),
               mean_stderr(sol.Y.col(k), false), absz, last_gap});
    }
    // Summary row: the field estimate at the query point.
    csv.row({sol.picard.iterations, -1, g.t(sol.start_index), sol.value, sol.value_stderr, 0.0,
             last_gap});
    tally(res, cell.pass);
    res.stats.push_back(stat_line("value", sol.value));
    res.stats.push_back(stat_line("value_stderr", sol.value_stderr));
    res.stats.push_back(stat_line("picard_iterations", sol.picard.iterations));
    for (double gap : sol.picard.gaps) res.stats.push_back(stat_line("picard_gap", gap));
    if (rc.expect_value) res.stats.push_back(stat_line("expect_value", *rc.expect_value));
  } catch (const PicardError& e) {
    tally(res, false);
    res.stats.push_back(std::string("picard failure: ") + e.what());
    manifest.gap_log = e.gaps;
  }
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// master-eval
// ---------------------------------------------------------------------------

// Closed-form catalog entry by name. The single-kink cases take their level
// and kink from the config; the mixed and source cases keep catalog defaults
// for the parameters the config does not model.
inline ClosedFormCase closed_form_by_name(const std::string& name, const TimeGrid& g, double a,
                                          double t0, double eps, int N, std::uint64_t seed) {
  const int K = g.nodes();
  auto node_time = [&g, K](double frac) {
    int k = static_cast<int>(std::lround(frac * (K - 1)));
    k = std::max(1, std::min(K - 2, k));
    return g.t(k);
  };
  const double t0s = g.t(std::max(1, std::min(K - 2, g.snap_index(t0))));
  if (name == "delayed-path") return closed_form_delayed_path(g, a, t0s, N, seed);
  if (name == "delayed-path-mollified")
    return closed_form_delayed_path_mollified(g, a, t0s, eps, N, seed);
  if (name == "delayed-measure") return closed_form_delayed_measure(g, a, t0s, N, seed);
  if (name == "delayed-measure-mollified")
    return closed_form_delayed_measure_mollified(g, a, t0s, eps, N, seed);
  if (name == "delayed-mixed")
    return closed_form_delayed_mixed(g, a, t0s, 0.5 * a, node_time(0.6), N, seed);
  if (name == "switched-source")
    return closed_form_switched_source(g, a, node_time(0.3), 0.5 * a, node_time(0.6), 0.8, 0.6,
                                       t0s, N, seed);
  if (name == "heat-square") return closed_form_heat_square(g, N, seed);
  if (name == "heat-square-measure") return closed_form_heat_square_measure(g, N, seed);
  throw ConfigError("problem.case", "unknown closed-form case '" + name + "'");
}

// Sampling error of a field value whose reported stderr is blind to the law
// ensemble's own noise: spread over a few derived-seed replicas.
inline PointEstimate replicated_value(MasterProblem mp, const DiscretePath& gamma,
                                      const ParticleMeasure& mu, double t, int replicas) {
  std::vector<double> vals;
  double se_sum = 0.0;
  const std::uint64_t base = mp.base.seed;
  for (int r = 0; r < replicas; ++r) {
    mp.base.seed = r == 0 ? base : derive_seed(base, 0x5EED, static_cast<std::uint64_t>(r));
    const FieldEstimate fe = decoupling_field(mp, gamma, mu, t);
    vals.push_back(fe.value);
    se_sum += fe.value_stderr;
  }
  double mean = 0.0;
  for (double v : vals) mean += v;
  mean /= static_cast<double>(vals.size());
  double var = 0.0;
  for (double v : vals) var += (v - mean) * (v - mean);
  var /= std::max<std::size_t>(1, vals.size() - 1);
  return {mean, std::sqrt(var / static_cast<double>(vals.size())) +
                    se_sum / static_cast<double>(vals.size())};
}

inline SuiteResult run_master_eval(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "master-eval";
  const TimeGrid g = rc.grid();
  const DiscretePath gamma = rc.problem.probe.path(g);
  const ParticleMeasure mu = rc.problem.probe.measure(g);
  CsvWriter values(out_dir + "/master_eval.csv",
                   {"case", "t", "epsilon", "M", "N", "estimate", "stderr", "analytic",
                    "abs_err", "budget"});
  CsvWriter resid(out_dir + "/residual.csv",
                  {"case", "t", "epsilon", "M", "N", "estimate", "stderr", "analytic", "abs_err",
                   "budget"});

  MasterOptions opt;
  opt.fd = rc.fd;

  if (rc.problem.case_name.empty()) {
    // Explicit problem: evaluate at the probe time; no analytic reference.
    const MasterProblem mp = rc.master_problem();
    const FieldEstimate fe = decoupling_field(mp, gamma, mu, rc.problem.probe.t);
    const double nan = std::numeric_limits<double>::quiet_NaN();
    values.row({"explicit", fe.t, 0.0, fe.M, fe.N, fe.value, fe.value_stderr, nan, nan,
                3.0 * fe.value_stderr});
    tally(res, std::isfinite(fe.value));
    const FieldEstimate r = pde_residual(mp, gamma, mu, rc.problem.probe.t, opt);
    resid.row({"explicit", r.t, 0.0, r.M, r.N, r.residual, 0.0, 0.0, std::abs(r.residual),
               r.budget});
    tally(res, r.near_kink || std::abs(r.residual) <= r.budget);
    res.stats.push_back(stat_line("value", fe.value));
    res.stats.push_back(stat_line("residual", r.residual));
    res.wall_seconds = seconds_since(start);
    return res;
  }

  const ClosedFormCase cse = closed_form_by_name(rc.problem.case_name, g, rc.problem.case_a,
                                                 rc.problem.case_t0, rc.problem.case_eps,
                                                 rc.particles, rc.seed);
  MasterProblem mp = cse.problem;
  mp.base.threads = rc.threads;
  mp.base.picard = rc.picard;
  opt.kink_times = cse.kink_times;
  const FieldProvider provider = cse.provider();

  // Five interior probe times, the catalog kinks dodged by the guard band.
  const bool law_blind = !cse.field_dmu || rc.problem.case_name.rfind("heat-square", 0) == 0;
  double worst_value_gap = 0.0, worst_residual = 0.0;
  for (const double frac : {0.1, 0.3, 0.45, 0.7, 0.9}) {
    const double t = g.t(g.snap_index(frac * rc.horizon));
    const double analytic = cse.field(t, gamma, mu);

    PointEstimate est;
    const FieldEstimate fe = decoupling_field(mp, gamma, mu, t);
    if (fe.value_stderr == 0.0 && law_blind) {
      est = replicated_value(mp, gamma, mu, t, 5);
    } else {
      est = {fe.value, fe.value_stderr};
    }
    const double err = std::abs(est.value - analytic);
    const double band = std::max(3.0 * est.se, 1e-9 * (1.0 + std::abs(analytic)));
    values.row({cse.name, t, rc.problem.case_eps, fe.M, fe.N, est.value, est.se, analytic, err,
                band});
    tally(res, err <= band);
    worst_value_gap = std::max(worst_value_gap, err);

    const FieldEstimate r = pde_residual(mp, provider, gamma, mu, t, opt);
    resid.row({cse.name, r.t, rc.problem.case_eps, r.M, r.N, r.residual, 0.0, 0.0,
               std::abs(r.residual), r.budget});
    if (!r.near_kink) {
      tally(res, std::abs(r.residual) <= r.budget);
      worst_residual = std::max(worst_residual, std::abs(r.residual));
    }
  }
  res.stats.push_back(stat_line("worst |estimate - analytic|", worst_value_gap));
  res.stats.push_back(stat_line("worst |residual|", worst_residual));
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// mollify-sweep
// ---------------------------------------------------------------------------

struct MollifyCell {
  double t = 0.0, eps = 0.0;
  FieldEstimate est;
  double reference = 0.0;  // mollified closed form at this epsilon
  double limit = 0.0;      // sharp closed form (epsilon -> 0)
  bool pass = false;       // estimate matches the mollified closed form
};

inline MollifyCell mollify_cell(const RunConfig& rc, double eps) {
  const TimeGrid g = rc.grid();
  const std::string name =
      rc.problem.case_name.empty() ? "delayed-path-mollified" : rc.problem.case_name;
  if (name != "delayed-path-mollified" && name != "delayed-measure-mollified")
    throw ConfigError("problem.case", "mollify-sweep needs a mollified closed-form case");
  const ClosedFormCase cse = closed_form_by_name(name, g, rc.problem.case_a, rc.problem.case_t0,
                                                 eps, rc.particles, rc.seed);
  MasterProblem mp = cse.problem;
  mp.base.threads = rc.threads;
  const DiscretePath gamma = rc.problem.probe.path(g);
  const ParticleMeasure mu = rc.problem.probe.measure(g);
  MollifyCell cell;
  cell.t = g.t(g.snap_index(rc.problem.probe.t));
  cell.eps = eps;
  cell.est = sobolev_eval(mp, gamma, mu, cell.t);
  cell.reference = cse.field(cell.t, gamma, mu);
  const double t0s = g.t(std::max(1, std::min(g.nodes() - 2, g.snap_index(rc.problem.case_t0))));
  cell.limit = name == "delayed-path-mollified"
                   ? rc.problem.case_a * detail::path_capped(gamma, cell.t, t0s)
                   : rc.problem.case_a * detail::measure_capped(mu, cell.t, t0s);
  cell.pass = std::abs(cell.est.value - cell.reference) <=
              3.0 * cell.est.value_stderr + 1e-9 * (1.0 + std::abs(cell.reference));
  return cell;
}

inline SuiteResult run_mollify_sweep(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "mollify-sweep";
  std::vector<double> axis = rc.sweep.eps;
  if (axis.empty()) axis = {0.2, 0.1, 0.05, 0.025};
  CsvWriter csv(out_dir + "/mollify_sweep.csv",
                {"case", "t", "epsilon", "M", "N", "estimate", "stderr", "analytic", "abs_err",
                 "budget"});
  std::vector<double> errs;
  for (const double eps : axis) {
    const MollifyCell cell = mollify_cell(rc, eps);
    const double err = std::abs(cell.est.value - cell.limit);
    errs.push_back(err);
    csv.row({rc.problem.case_name.empty() ? "delayed-path-mollified" : rc.problem.case_name,
             cell.t, eps, cell.est.M, cell.est.N, cell.est.value, cell.est.value_stderr,
             cell.limit, err, 3.0 * cell.est.value_stderr});
    tally(res, cell.pass);
    res.stats.push_back(stat_line("abs_err(eps=" + csv_num(eps) + ")", err));
  }
  // Monotone non-increasing error toward the sharp limit, within MC noise.
  for (std::size_t i = 0; i + 1 < errs.size(); ++i)
    tally(res, errs[i + 1] <= errs[i] + 1e-9);
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// convergence
// ---------------------------------------------------------------------------

inline SuiteResult run_convergence(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "convergence";
  const std::string suite = rc.sweep.suite.empty() ? "ito-check" : rc.sweep.suite;
  if (suite != "ito-check" && suite != "solve-bsde" && suite != "mollify-sweep")
    throw ConfigError("sweep.suite", "unknown convergence suite '" + suite + "'");
  const long cells = rc.sweep.cells();
  if (cells > rc.sweep.cell_budget)
    throw ConfigError("sweep", "sweep would run " + std::to_string(cells) +
                                   " cells, over the budget of " +
                                   std::to_string(rc.sweep.cell_budget));

  std::vector<int> ms = rc.sweep.grid_steps.empty() ? std::vector<int>{rc.grid_steps}
                                                    : rc.sweep.grid_steps;
  std::vector<int> ns =
      rc.sweep.particles.empty() ? std::vector<int>{rc.particles} : rc.sweep.particles;
  std::vector<double> es = rc.sweep.eps.empty() ? std::vector<double>{rc.problem.case_eps}
                                                : rc.sweep.eps;

  CsvWriter csv(out_dir + "/convergence.csv",
                {"suite", "M", "N", "epsilon", "seed", "estimate", "stderr", "abs_err", "pass"});
  std::vector<double> maxis, stderrs, naxis, erraxis;
  for (const int m : ms)
    for (const int n : ns)
      for (const double eps : es) {
        // The cell seed depends on the axis values only, never on the
        // enumeration order, so partial sweeps reproduce full-sweep cells.
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(eps));
        std::memcpy(&bits, &eps, sizeof(bits));
        const std::uint64_t cell_seed =
            derive_seed(rc.seed, static_cast<std::uint64_t>(m), static_cast<std::uint64_t>(n),
                        bits);
        RunConfig cell = rc;
        cell.grid_steps = m;
        cell.particles = n;
        cell.problem.case_eps = eps;
        cell.seed = cell_seed;

        double estimate = 0.0, se = 0.0, abs_err = 0.0;
        bool pass = false;
        if (suite == "ito-check") {
          const ItoCell c = ito_cell(cell);
          estimate = c.rep.residual_mean;
          se = c.rep.residual_stderr;
          abs_err = std::abs(c.rep.residual_mean);
          pass = c.pass;
        } else if (suite == "solve-bsde") {
          const BsdeCell c = bsde_cell(cell);
          estimate = c.sol.value;
          se = c.sol.value_stderr;
          abs_err = rc.expect_value ? std::abs(c.sol.value - *rc.expect_value)
                                    : std::numeric_limits<double>::quiet_NaN();
          pass = c.pass;
        } else {
          const MollifyCell c = mollify_cell(cell, eps);
          estimate = c.est.value;
          se = c.est.value_stderr;
          abs_err = std::abs(c.est.value - c.limit);
          pass = c.pass;
        }
        csv.row({suite, m, n, eps, cell_seed, estimate, se, abs_err, pass});
        tally(res, pass);
        maxis.push_back(static_cast<double>(m));
        stderrs.push_back(se);
        naxis.push_back(static_cast<double>(n));
        erraxis.push_back(abs_err);
      }

  if (ms.size() > 1 && suite == "ito-check")
    res.stats.push_back(stat_line("stderr slope in M", loglog_slope(maxis, stderrs)));
  if (ns.size() > 1)
    res.stats.push_back(stat_line("abs_err slope in N", loglog_slope(naxis, erraxis)));
  res.stats.push_back(stat_line("cells", static_cast<double>(cells)));
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

inline SuiteResult run_compare(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "compare";
  if (!rc.problem2) throw ConfigError("problem2", "missing required key for compare");
  const TimeGrid g = rc.grid();
  const MasterProblem a = rc.master_problem();
  MasterProblem b = a;
  b.preset = rc.problem2->preset;
  b.base.terminal = rc.problem2->terminal;
  b.base.f = rc.problem2->generator;
  b.base.coeffs = rc.problem2->coeffs;
  const DiscretePath gamma = rc.problem.probe.path(g);
  const ParticleMeasure mu = rc.problem.probe.measure(g);
  const CompareReport rep = compare_fields(a, b, gamma, mu, rc.problem.probe.t);

  CsvWriter csv(out_dir + "/compare.csv", {"t", "first", "first_stderr", "second",
                                           "second_stderr", "margin", "noise_band", "pass"});
  bool pass = rep.margin >= -rep.noise_band - 1e-12;
  if (rc.expect_margin) {
    const double tol = rc.expect_rel_tol * std::max(1.0, std::abs(*rc.expect_margin));
    pass = std::abs(rep.margin - *rc.expect_margin) <= std::max(tol, rep.noise_band);
  }
  csv.row({rep.first.t, rep.first.value, rep.first.value_stderr, rep.second.value,
           rep.second.value_stderr, rep.margin, rep.noise_band, pass});
  tally(res, pass);
  res.stats.push_back(stat_line("margin", rep.margin));
  res.stats.push_back(stat_line("noise_band", rep.noise_band));
  if (rc.expect_margin) res.stats.push_back(stat_line("expect_margin", *rc.expect_margin));
  res.wall_seconds = seconds_since(start);
  return res;
}

// ---------------------------------------------------------------------------
// flow-check
// ---------------------------------------------------------------------------

inline SuiteResult run_flow_check(const RunConfig& rc, const std::string& out_dir) {
  const auto start = Clock::now();
  SuiteResult res;
  res.name = "flow-check";
  const TimeGrid g = rc.grid();
  const MasterProblem mp = rc.master_problem();
  const DiscretePath gamma = rc.problem.probe.path(g);
  const ParticleMeasure mu = rc.problem.probe.measure(g);
  MasterOptions opt;
  opt.fd = rc.fd;

  CsvWriter csv(out_dir + "/flow_check.csv",
                {"t", "s", "samples", "mean_gap", "gap_stderr", "max_abs_gap", "budget",
                 "within_budget", "bit_exact"});
  auto emit = [&csv, &res](const FlowReport& r) {
    csv.row({r.t, r.s, r.samples, r.mean_gap, r.gap_stderr, r.max_abs_gap, r.budget,
             r.within_budget, r.bit_exact});
    tally(res, r.within_budget);
  };
  if (rc.problem.probe.s) {
    emit(check_flow(mp, gamma, mu, rc.problem.probe.t, *rc.problem.probe.s, opt));
  } else {
    const FlowSweep sweep = check_flow(mp, gamma, mu, rc.problem.probe.t, opt);
    for (const FlowReport& r : sweep.probes) emit(r);
    tally(res, sweep.terminal_identity);
    res.stats.push_back(stat_line("max_mean_gap", sweep.max_mean_gap));
    res.stats.push_back(std::string("terminal_identity = ") +
                        (sweep.terminal_identity ? "true" : "false"));
  }
  res.wall_seconds = seconds_since(start);
  return res;
}

}  // namespace detail

// Executes the configured experiment, writes its CSV artifacts and
// run_manifest.json under the output directory, and returns the manifest.
inline RunManifest run(const RunConfig& rc) {
  const auto start = detail::Clock::now();
  RunManifest manifest;
  manifest.experiment = rc.experiment;
  manifest.config_echo = rc.echo;
  std::filesystem::create_directories(rc.out_dir);

  if (rc.experiment == "derivcheck") {
    manifest.suites.push_back(detail::run_derivcheck(rc, rc.out_dir));
  } else if (rc.experiment == "ito-check") {
    manifest.suites.push_back(detail::run_ito_check(rc, rc.out_dir));
  } else if (rc.experiment == "solve-bsde") {
    manifest.suites.push_back(detail::run_solve_bsde(rc, rc.out_dir, manifest));
  } else if (rc.experiment == "master-eval") {
    manifest.suites.push_back(detail::run_master_eval(rc, rc.out_dir));
  } else if (rc.experiment == "mollify-sweep") {
    manifest.suites.push_back(detail::run_mollify_sweep(rc, rc.out_dir));
  } else if (rc.experiment == "convergence") {
    manifest.suites.push_back(detail::run_convergence(rc, rc.out_dir));
  } else if (rc.experiment == "compare") {
    manifest.suites.push_back(detail::run_compare(rc, rc.out_dir));
  } else if (rc.experiment == "flow-check") {
    manifest.suites.push_back(detail::run_flow_check(rc, rc.out_dir));
  } else {
    throw ConfigError("experiment", "unknown experiment '" + rc.experiment + "'");
  }

  for (const SuiteResult& s : manifest.suites) manifest.passed = manifest.passed && s.passed;
  manifest.wall_seconds = detail::seconds_since(start);

  std::ofstream out(rc.out_dir + "/run_manifest.json", std::ios::binary);
  if (!out) throw std::runtime_error("run: cannot write manifest under " + rc.out_dir);
  out << manifest.to_json().dump(2) << "\n";
  return manifest;
}

}  // namespace pathfield
