// pathfield: uniformly weighted particle measures on path space, with
// moments, Wasserstein estimates and single-particle (lift) perturbations.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/path.hpp"

namespace pathfield {

// Empirical measure (1/N) sum of Dirac masses at particle paths.
class ParticleMeasure {
 public:
  // Empty placeholder (e.g. a solution slot before assignment); every
  // accessor except size() requires at least one particle.
  ParticleMeasure() = default;

  explicit ParticleMeasure(std::vector<DiscretePath> particles)
      : particles_(std::move(particles)) {
    if (particles_.empty()) throw std::invalid_argument("ParticleMeasure: need N >= 1 particles");
    for (const auto& p : particles_)
      if (!p.same_shape(particles_.front()))
        throw std::invalid_argument("ParticleMeasure: particles must share grid and dimension");
  }

  static ParticleMeasure single(DiscretePath p) {
    std::vector<DiscretePath> v;
    v.push_back(std::move(p));
    return ParticleMeasure(std::move(v));
  }

  int size() const { return static_cast<int>(particles_.size()); }
  int dim() const { return at_front().dim(); }
  const TimeGrid& grid() const { return at_front().grid(); }
  const DiscretePath& particle(int i) const { return particles_.at(i); }
  const std::vector<DiscretePath>& particles() const { return particles_; }

  void set_particle(int i, DiscretePath p) {
    if (!p.same_shape(particles_.front()))
      throw std::invalid_argument("ParticleMeasure: replacement particle shape mismatch");
    particles_.at(i) = std::move(p);
  }

  // Copy with particle i bumped by x * 1_{[tau, T]} (measure lift move).
  ParticleMeasure with_bumped(int i, double tau, const Eigen::VectorXd& x) const {
    ParticleMeasure out = *this;
    out.set_particle(i, bump_path(particles_.at(i), tau, x));
    return out;
  }

  // Copy with every particle stopped at t.
  ParticleMeasure stopped(double t) const {
    std::vector<DiscretePath> v;
    v.reserve(particles_.size());
    for (const auto& p : particles_) v.push_back(stop_path(p, t));
    return ParticleMeasure(std::move(v));
  }

  ParticleMeasure permuted(const std::vector<int>& perm) const {
    if (static_cast<int>(perm.size()) != size())
      throw std::invalid_argument("ParticleMeasure: permutation size mismatch");
    std::vector<DiscretePath> v;
    v.reserve(perm.size());
    for (int i : perm) v.push_back(particles_.at(i));
    return ParticleMeasure(std::move(v));
  }

  // Ranks under the lexicographic order of node values. Equal paths receive
  // consecutive ranks, which makes rank-keyed randomness invariant (as a
  // multiset of outcomes) under particle permutations.
  std::vector<int> canonical_ranks() const {
    const int n = size();
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [this](int a, int b) {
      const auto& va = particles_[a].values();
      const auto& vb = particles_[b].values();
      for (int k = 0; k < va.cols(); ++k)
        for (int r = 0; r < va.rows(); ++r) {
          if (va(r, k) < vb(r, k)) return true;
          if (va(r, k) > vb(r, k)) return false;
        }
      return false;
    });
    std::vector<int> rank(n);
    for (int r = 0; r < n; ++r) rank[idx[r]] = r;
    return rank;
  }

 private:
  const DiscretePath& at_front() const {
    if (particles_.empty())
      throw std::logic_error("ParticleMeasure: measure holds no particles");
    return particles_.front();
  }

  std::vector<DiscretePath> particles_;
};

// |||mu||| = sqrt of the mean squared sup norm of the particles.
inline double measure_moment(const ParticleMeasure& mu) {
  double acc = 0.0;
  for (int i = 0; i < mu.size(); ++i) {
    const double s = sup_norm(mu.particle(i));
    acc += s * s;
  }
  return std::sqrt(acc / static_cast<double>(mu.size()));
}

// Pairing rule used by w2_estimate.
struct Coupling {
  enum class Mode { index, sorted_1d };
  Mode mode = Mode::index;
  // sorted_1d compares the real-valued marginal at this time.
  double marginal_time = 0.0;
  std::string description;
};

namespace detail {

// Ensemble extended by one extra particle; used when lifting a measure
// derivative to a finite difference over an (n+1)-particle empirical law.
inline ParticleMeasure augment_measure(const ParticleMeasure& mu, const DiscretePath& extra) {
  std::vector<DiscretePath> parts = mu.particles();
  parts.push_back(extra);
  return ParticleMeasure(std::move(parts));
}

// Exact W2 between two empirical laws on the reals (quantile coupling);
// particle counts need not match.
inline double w2_sorted_reals(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const auto na = static_cast<double>(a.size());
  const auto nb = static_cast<double>(b.size());
  double acc = 0.0, q = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double qa = static_cast<double>(i + 1) / na;
    const double qb = static_cast<double>(j + 1) / nb;
    const double qn = std::min(qa, qb);
    const double diff = a[i] - b[j];
    acc += (qn - q) * diff * diff;
    q = qn;
    if (qa <= qn + 1e-15) ++i;
    if (qb <= qn + 1e-15) ++j;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Estimated 2-Wasserstein distance between particle measures. Index mode
// pairs particles by index (an upper bound, exact under matched randomness);
// sorted_1d returns the exact empirical W2 of a scalar marginal.
inline double w2_estimate(const ParticleMeasure& mu, const ParticleMeasure& nu,
                          const Coupling& c = {}) {
  if (c.mode == Coupling::Mode::index) {
    if (mu.size() != nu.size())
      throw std::invalid_argument("w2_estimate: index coupling needs equal particle counts");
    if (mu.dim() != nu.dim() || !mu.grid().same_as(nu.grid()))
      throw std::invalid_argument("w2_estimate: incompatible ensembles");
    double acc = 0.0;
    for (int i = 0; i < mu.size(); ++i) {
      const double d = sup_distance(mu.particle(i), nu.particle(i));
      acc += d * d;
    }
    return std::sqrt(acc / static_cast<double>(mu.size()));
  }
  if (mu.dim() != 1 || nu.dim() != 1)
    throw std::invalid_argument("w2_estimate: sorted_1d coupling requires d = 1");
  std::vector<double> a(mu.size()), b(nu.size());
  const int ka = mu.grid().snap_index(c.marginal_time);
  const int kb = nu.grid().snap_index(c.marginal_time);
  for (int i = 0; i < mu.size(); ++i) a[i] = mu.particle(i).scalar_at(ka);
  for (int i = 0; i < nu.size(); ++i) b[i] = nu.particle(i).scalar_at(kb);
  return detail::w2_sorted_reals(std::move(a), std::move(b));
}

// Exact empirical W2 between two real samples (used for law-flow gaps).
inline double w2_samples_1d(const std::vector<double>& a, const std::vector<double>& b) {
  return detail::w2_sorted_reals(a, b);
}

}  // namespace pathfield
