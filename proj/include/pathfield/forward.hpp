// pathfield: forward simulation. State and law-flow dynamics with
// deterministic time-dependent coefficients, Euler continuation of frozen
// histories, and reproducible stream keying for ensembles.
#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/measure.hpp"
#include "pathfield/path.hpp"
#include "pathfield/rng.hpp"

namespace pathfield {

// Coefficient quadruple of the forward system: the state path follows
// (b1, sigma1), the law flow follows (b2, sigma2). All four are deterministic
// functions of time; unset entries mean zero drift / identity diffusion.
struct DiffusionCoeffs {
  int dim = 1;
  int noise_dim = 1;
  std::function<Eigen::VectorXd(double)> b1;
  std::function<Eigen::MatrixXd(double)> sigma1;
  std::function<Eigen::VectorXd(double)> b2;
  std::function<Eigen::MatrixXd(double)> sigma2;

  static DiffusionCoeffs standard(int dim = 1) {
    DiffusionCoeffs c;
    c.dim = dim;
    c.noise_dim = dim;
    return c;
  }

  Eigen::VectorXd drift1(double t) const { return b1 ? b1(t) : Eigen::VectorXd::Zero(dim); }
  Eigen::VectorXd drift2(double t) const { return b2 ? b2(t) : Eigen::VectorXd::Zero(dim); }
  Eigen::MatrixXd diff1(double t) const {
    return sigma1 ? sigma1(t) : Eigen::MatrixXd::Identity(dim, noise_dim);
  }
  Eigen::MatrixXd diff2(double t) const {
    return sigma2 ? sigma2(t) : Eigen::MatrixXd::Identity(dim, noise_dim);
  }
};

struct SimOptions {
  std::string label = "forward";
  bool antithetic = false;    // pair samples (2i, 2i+1) share a stream, odd negated
  bool rank_streams = false;  // key streams by canonical start ranks, not indices
};

// A simulated ensemble together with the driving noise increments
// (noise_dim x steps per sample) that produced it.
struct EnsembleSim {
  ParticleMeasure paths;
  std::vector<Eigen::MatrixXd> dw;
  std::string label;
};

namespace detail {

// Euler continuation in place from node kt onward; `sign` flips the noise
// for antithetic partners, drift is unaffected.
inline Eigen::MatrixXd euler_continue(DiscretePath& path, int kt,
                                      const std::function<Eigen::VectorXd(double)>& drift,
                                      const std::function<Eigen::MatrixXd(double)>& diff,
                                      int noise_dim, NoiseField& nf, std::uint64_t stream,
                                      double sign) {
  const TimeGrid& g = path.grid();
  const double dt = g.dt();
  const double sq = std::sqrt(dt);
  Eigen::MatrixXd dw = Eigen::MatrixXd::Zero(noise_dim, g.steps());
  for (int k = kt; k + 1 < g.nodes(); ++k) {
    Eigen::VectorXd inc(noise_dim);
    for (int c = 0; c < noise_dim; ++c)
      inc(c) = sign * sq * nf.gauss(stream, static_cast<std::uint64_t>(k), c);
    dw.col(k) = inc;
    path.values().col(k + 1) =
        path.at_node(k) + drift(g.t(k)) * dt + diff(g.t(k)) * inc;
  }
  return dw;
}

inline std::pair<std::uint64_t, double> stream_and_sign(const SimOptions& opts,
                                                        std::uint64_t base, int key) {
  if (!opts.antithetic) return {base + static_cast<std::uint64_t>(key), 1.0};
  return {base + static_cast<std::uint64_t>(key / 2), (key % 2 == 0) ? 1.0 : -1.0};
}

}  // namespace detail

// N Euler continuations of the frozen history gamma_t under the state
// dynamics (b1, sigma1), with the noise increments that drove them.
inline EnsembleSim simulate_forward_sim(const DiffusionCoeffs& coeffs, const DiscretePath& gamma,
                                        double t, int N, std::uint64_t seed,
                                        const SimOptions& opts = {}) {
  if (N < 1) throw std::invalid_argument("simulate_forward: need at least one sample");
  if (gamma.dim() != coeffs.dim)
    throw std::invalid_argument("simulate_forward: path dimension does not match coefficients");
  const int kt = gamma.grid().snap_index(t);
  NoiseField nf(seed);
  const std::uint64_t base = stream_offset(opts.label);
  EnsembleSim sim;
  sim.label = opts.label;
  std::vector<DiscretePath> out;
  out.reserve(N);
  sim.dw.reserve(N);
  DiscretePath start = stop_path(gamma, t);
  auto drift = [&coeffs](double r) { return coeffs.drift1(r); };
  auto diff = [&coeffs](double r) { return coeffs.diff1(r); };
  for (int i = 0; i < N; ++i) {
    auto [stream, sign] = detail::stream_and_sign(opts, base, i);
    DiscretePath p = start;
    sim.dw.push_back(detail::euler_continue(p, kt, drift, diff, coeffs.noise_dim, nf, stream, sign));
    out.push_back(std::move(p));
  }
  sim.paths = ParticleMeasure(std::move(out));
  return sim;
}

inline ParticleMeasure simulate_forward(const DiffusionCoeffs& coeffs, const DiscretePath& gamma,
                                        double t, int N, std::uint64_t seed,
                                        const SimOptions& opts = {}) {
  return simulate_forward_sim(coeffs, gamma, t, N, seed, opts).paths;
}

// One continuation per particle of mu under the law-flow dynamics
// (b2, sigma2). With rank_streams the noise stream of each particle is keyed
// by its canonical (value-sorted) rank, so relabeling the particles yields
// the same empirical flow as a multiset.
inline EnsembleSim continue_measure_sim(const DiffusionCoeffs& coeffs, const ParticleMeasure& mu,
                                        double t, std::uint64_t seed, const SimOptions& opts = {}) {
  if (mu.dim() != coeffs.dim)
    throw std::invalid_argument("continue_measure: particle dimension does not match coefficients");
  const int kt = mu.grid().snap_index(t);
  NoiseField nf(seed);
  const std::uint64_t base = stream_offset(opts.label);
  std::vector<int> key(mu.size());
  if (opts.rank_streams) {
    key = mu.canonical_ranks();
  } else {
    for (int i = 0; i < mu.size(); ++i) key[i] = i;
  }
  EnsembleSim sim;
  sim.label = opts.label;
  std::vector<DiscretePath> out;
  out.reserve(mu.size());
  sim.dw.reserve(mu.size());
  auto drift = [&coeffs](double r) { return coeffs.drift2(r); };
  auto diff = [&coeffs](double r) { return coeffs.diff2(r); };
  for (int i = 0; i < mu.size(); ++i) {
    auto [stream, sign] = detail::stream_and_sign(opts, base, key[i]);
    DiscretePath p = stop_path(mu.particle(i), t);
    sim.dw.push_back(detail::euler_continue(p, kt, drift, diff, coeffs.noise_dim, nf, stream, sign));
    out.push_back(std::move(p));
  }
  sim.paths = ParticleMeasure(std::move(out));
  return sim;
}

inline ParticleMeasure continue_measure(const DiffusionCoeffs& coeffs, const ParticleMeasure& mu,
                                        double t, std::uint64_t seed, const SimOptions& opts = {}) {
  return continue_measure_sim(coeffs, mu, t, seed, opts).paths;
}

}  // namespace pathfield
