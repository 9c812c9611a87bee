// pathfield: grid, path and particle-measure layer tests -- exact values for
// the hand-checkable cases plus randomized structural properties.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>
#include <vector>

#include "pathfield/grid.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/path.hpp"
#include "pathfield/rng.hpp"

using namespace pathfield;

namespace {

DiscretePath ramp(const TimeGrid& g) {
  std::vector<double> v(static_cast<std::size_t>(g.nodes()));
  for (int k = 0; k < g.nodes(); ++k) v[static_cast<std::size_t>(k)] = static_cast<double>(k);
  return DiscretePath::from_scalar(g, v);
}

DiscretePath brownian_like(const TimeGrid& g, const NoiseField& nf, std::uint64_t stream) {
  std::vector<double> v(static_cast<std::size_t>(g.nodes()));
  double x = nf.gauss(stream, 0, 0);
  v[0] = x;
  for (int k = 1; k < g.nodes(); ++k) {
    x += std::sqrt(g.dt()) * nf.gauss(stream, static_cast<std::uint64_t>(k), 1);
    v[static_cast<std::size_t>(k)] = x;
  }
  return DiscretePath::from_scalar(g, v);
}

std::vector<double> nodes_of(const DiscretePath& w) {
  std::vector<double> v(static_cast<std::size_t>(w.grid().nodes()));
  for (int k = 0; k < w.grid().nodes(); ++k) v[static_cast<std::size_t>(k)] = w.scalar_at(k);
  return v;
}

}  // namespace

TEST_CASE("uniform grid basics") {
  TimeGrid g(1.0, 4);
  REQUIRE(g.steps() == 4);
  REQUIRE(g.nodes() == 5);
  CHECK(g.t(0) == 0.0);
  CHECK(g.t(4) == 1.0);
  CHECK(g.dt() == Catch::Approx(0.25));
  for (int k = 0; k + 1 < g.nodes(); ++k) CHECK(g.t(k) < g.t(k + 1));

  CHECK_THROWS_AS(TimeGrid(0.0, 4), std::domain_error);
  CHECK_THROWS_AS(TimeGrid(-1.0, 4), std::domain_error);
  CHECK_THROWS_AS(TimeGrid(1.0, 0), std::domain_error);
}

TEST_CASE("snap and floor indices") {
  TimeGrid g(1.0, 4);
  CHECK(g.snap_index(0.5) == 2);
  CHECK(g.snap_index(0.52) == 2);   // nearest node wins
  CHECK(g.snap_index(0.63) == 3);
  CHECK(g.snap_index(1.0) == 4);
  CHECK_THROWS_AS(g.snap_index(1.5), std::domain_error);
  CHECK_THROWS_AS(g.snap_index(-0.2), std::domain_error);

  // strict mode rejects anything off-grid instead of rounding.
  CHECK(g.snap_index(0.75, SnapMode::strict) == 3);
  CHECK_THROWS_AS(g.snap_index(0.7, SnapMode::strict), std::domain_error);

  // floor obeys the cadlag step convention: largest node <= s.
  CHECK(g.floor_index(0.0) == 0);
  CHECK(g.floor_index(0.26) == 1);
  CHECK(g.floor_index(0.4999) == 1);
  CHECK(g.floor_index(0.5) == 2);
  CHECK(g.floor_index(1.0) == 4);

  CHECK(g.on_grid(0.75));
  CHECK_FALSE(g.on_grid(0.7));
}

TEST_CASE("stop_path freezes the suffix") {
  TimeGrid g(1.0, 4);
  DiscretePath w = ramp(g);  // [0,1,2,3,4]

  SECTION("interior stop") {
    DiscretePath s = stop_path(w, 0.5);
    CHECK(nodes_of(s) == std::vector<double>{0, 1, 2, 2, 2});
  }
  SECTION("stop at the horizon is the identity") {
    CHECK(nodes_of(stop_path(w, 1.0)) == nodes_of(w));
  }
  SECTION("stop at zero is the constant start") {
    CHECK(nodes_of(stop_path(w, 0.0)) == std::vector<double>{0, 0, 0, 0, 0});
  }
  SECTION("out-of-range times are rejected") {
    CHECK_THROWS_AS(stop_path(w, 1.25), std::domain_error);
    CHECK_THROWS_AS(stop_path(w, -0.25), std::domain_error);
  }
}

TEST_CASE("stop_path is idempotent", "[property]") {
  TimeGrid g(1.0, 16);
  NoiseField nf(20240901u);
  for (int rep = 0; rep < 25; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    const int kt = static_cast<int>(nf.word(1000, static_cast<std::uint64_t>(rep), 0) %
                                    static_cast<std::uint64_t>(g.nodes()));
    const double t = g.t(kt);
    DiscretePath once = stop_path(w, t);
    DiscretePath twice = stop_path(once, t);
    CHECK(sup_distance(once, twice) == 0.0);
  }
}

TEST_CASE("bump_path adds an indicator") {
  TimeGrid g(1.0, 4);

  SECTION("indicator addition on the zero path") {
    DiscretePath b = bump_path(DiscretePath::zero(g), 0.5, 1.0);
    CHECK(nodes_of(b) == std::vector<double>{0, 0, 1, 1, 1});
  }
  SECTION("bump then bump back is the identity") {
    DiscretePath w = ramp(g);
    DiscretePath back = bump_path(bump_path(w, 0.25, 0.7), 0.25, -0.7);
    CHECK(sup_distance(w, back) < 1e-15);
  }
  SECTION("bump at zero shifts the whole path") {
    DiscretePath b = bump_path(ramp(g), 0.0, 2.0);
    CHECK(nodes_of(b) == std::vector<double>{2, 3, 4, 5, 6});
  }
  SECTION("zero bump is the identity") {
    DiscretePath w = ramp(g);
    CHECK(sup_distance(w, bump_path(w, 0.5, 0.0)) == 0.0);
  }
  SECTION("strict mode refuses off-grid bump times") {
    CHECK_THROWS_AS(bump_path(ramp(g), 0.3, 1.0, SnapMode::strict), std::domain_error);
  }
  SECTION("direction dimension must match the path") {
    Eigen::VectorXd x2 = Eigen::VectorXd::Ones(2);
    CHECK_THROWS_AS(bump_path(ramp(g), 0.5, x2), std::invalid_argument);
  }
}

TEST_CASE("concat_path splices at the anchor node") {
  TimeGrid g(1.0, 4);
  DiscretePath w = ramp(g);

  SECTION("concatenating a path with itself changes nothing") {
    for (int k = 0; k < g.nodes(); ++k)
      CHECK(sup_distance(concat_path(w, w, g.t(k)), w) == 0.0);
  }
  SECTION("zero prefix at t = 0 recenters the continuation") {
    DiscretePath z = DiscretePath::zero(g);
    DiscretePath c = concat_path(z, w, 0.0);
    CHECK(nodes_of(c) == std::vector<double>{0, 1, 2, 3, 4});  // w - w(0)
  }
  SECTION("constant prefix, ramp continuation") {
    DiscretePath ones = DiscretePath::constant(g, 1.0);
    DiscretePath c = concat_path(ones, w, 0.5);
    CHECK(nodes_of(c) == std::vector<double>{1, 1, 1, 2, 3});
  }
  SECTION("result at the splice time equals the prefix there") {
    NoiseField nf(77u);
    DiscretePath a = brownian_like(g, nf, 1);
    DiscretePath b = brownian_like(g, nf, 2);
    for (int k = 0; k < g.nodes(); ++k)
      CHECK(concat_path(a, b, g.t(k)).scalar_at(k) == Catch::Approx(a.scalar_at(k)));
  }
  SECTION("mismatched grids are rejected") {
    TimeGrid g2(1.0, 8);
    CHECK_THROWS_AS(concat_path(w, DiscretePath::zero(g2), 0.5), std::invalid_argument);
  }
}

TEST_CASE("concat flow: re-splicing the same continuation later is a no-op", "[property]") {
  TimeGrid g(1.0, 8);
  NoiseField nf(31u);
  for (int rep = 0; rep < 20; ++rep) {
    DiscretePath gamma = brownian_like(g, nf, 10 + static_cast<std::uint64_t>(rep));
    DiscretePath omega = brownian_like(g, nf, 200 + static_cast<std::uint64_t>(rep));
    const int kt = static_cast<int>(nf.word(2000, static_cast<std::uint64_t>(rep), 0) %
                                    static_cast<std::uint64_t>(g.nodes()));
    for (int ks = kt; ks < g.nodes(); ++ks) {
      DiscretePath once = concat_path(gamma, omega, g.t(kt));
      DiscretePath again = concat_path(once, omega, g.t(ks));
      CHECK(sup_distance(once, again) < 1e-12);
    }
  }
}

TEST_CASE("stop and bump commute below the stop time", "[property]") {
  TimeGrid g(1.0, 8);
  NoiseField nf(5150u);
  for (int rep = 0; rep < 20; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    const int kt = static_cast<int>(nf.word(3000, static_cast<std::uint64_t>(rep), 0) %
                                    static_cast<std::uint64_t>(g.nodes()));
    const int ktau = static_cast<int>(nf.word(3000, static_cast<std::uint64_t>(rep), 1) %
                                      static_cast<std::uint64_t>(kt + 1));
    const double t = g.t(kt), tau = g.t(ktau);
    DiscretePath a = stop_path(bump_path(w, tau, 0.4), t);
    DiscretePath b = bump_path(stop_path(w, t), tau, 0.4);
    // Values determined by the path up to t agree; beyond t both are frozen
    // at the (bumped) value at t, so the two orders coincide everywhere.
    CHECK(sup_distance(a, b) < 1e-15);
  }
}

TEST_CASE("sup_norm over windows") {
  TimeGrid g(1.0, 2);
  DiscretePath w = DiscretePath::from_scalar(g, {0.0, -3.0, 2.0});
  CHECK(sup_norm(w) == 3.0);
  CHECK(sup_norm(DiscretePath::zero(g)) == 0.0);
  CHECK(sup_norm(w, 0.0, 0.0) == 0.0);
  CHECK(sup_norm(w, 0.5, 0.5) == 3.0);
  CHECK(sup_norm(w, 1.0, 1.0) == 2.0);
  CHECK_THROWS_AS(sup_norm(w, 0.8, 0.2), std::domain_error);
}

TEST_CASE("particle measures enforce a shared shape") {
  TimeGrid g(1.0, 4);
  TimeGrid g2(1.0, 8);
  std::vector<DiscretePath> parts;
  parts.push_back(DiscretePath::zero(g));
  parts.push_back(DiscretePath::zero(g2));
  CHECK_THROWS_AS(ParticleMeasure(std::move(parts)), std::invalid_argument);
  CHECK_THROWS_AS(ParticleMeasure(std::vector<DiscretePath>{}), std::invalid_argument);
}

TEST_CASE("measure moment") {
  TimeGrid g(1.0, 4);

  SECTION("single constant particle") {
    ParticleMeasure mu = ParticleMeasure::single(DiscretePath::constant(g, 2.0));
    CHECK(measure_moment(mu) == Catch::Approx(2.0));
  }
  SECTION("two particles with sup norms 3 and 4") {
    std::vector<DiscretePath> parts;
    parts.push_back(DiscretePath::constant(g, 3.0));
    parts.push_back(DiscretePath::constant(g, -4.0));
    ParticleMeasure mu(std::move(parts));
    CHECK(measure_moment(mu) == Catch::Approx(5.0 / std::sqrt(2.0)));
  }
  SECTION("bumping every particle obeys the triangle inequality") {
    NoiseField nf(99u);
    std::vector<DiscretePath> parts;
    for (int i = 0; i < 6; ++i) parts.push_back(brownian_like(g, nf, static_cast<std::uint64_t>(i)));
    ParticleMeasure mu(std::move(parts));
    const double before = measure_moment(mu);
    for (double x : {0.5, -1.25, 3.0}) {
      ParticleMeasure shifted = mu;
      for (int i = 0; i < mu.size(); ++i)
        shifted.set_particle(i, bump_path(mu.particle(i), 0.0, x));
      CHECK(measure_moment(shifted) <= before + std::abs(x) + 1e-12);
    }
  }
}

TEST_CASE("w2 estimate under index coupling") {
  TimeGrid g(1.0, 4);
  NoiseField nf(12u);
  std::vector<DiscretePath> parts;
  for (int i = 0; i < 8; ++i) parts.push_back(brownian_like(g, nf, static_cast<std::uint64_t>(i)));
  ParticleMeasure mu(parts);

  SECTION("identical ensembles are at distance zero") {
    CHECK(w2_estimate(mu, mu, Coupling{}) == 0.0);
  }
  SECTION("a common translation costs exactly its size") {
    for (double c : {0.75, -2.0}) {
      ParticleMeasure nu = mu;
      for (int i = 0; i < mu.size(); ++i)
        nu.set_particle(i, bump_path(mu.particle(i), 0.0, c));
      CHECK(w2_estimate(mu, nu, Coupling{}) == Catch::Approx(std::abs(c)));
    }
  }
  SECTION("two one-particle constant measures") {
    ParticleMeasure a = ParticleMeasure::single(DiscretePath::zero(g));
    ParticleMeasure b = ParticleMeasure::single(DiscretePath::constant(g, 1.0));
    CHECK(w2_estimate(a, b, Coupling{}) == Catch::Approx(1.0));
  }
  SECTION("symmetry and the triangle inequality") {
    std::vector<DiscretePath> p2, p3;
    for (int i = 0; i < 8; ++i) {
      p2.push_back(brownian_like(g, nf, 100 + static_cast<std::uint64_t>(i)));
      p3.push_back(brownian_like(g, nf, 200 + static_cast<std::uint64_t>(i)));
    }
    ParticleMeasure nu(p2), rho(p3);
    const double ab = w2_estimate(mu, nu, Coupling{});
    const double ba = w2_estimate(nu, mu, Coupling{});
    CHECK(ab == Catch::Approx(ba));
    CHECK(w2_estimate(mu, rho, Coupling{}) <= ab + w2_estimate(nu, rho, Coupling{}) + 1e-12);
  }
  SECTION("unequal particle counts are a shape error") {
    ParticleMeasure small = ParticleMeasure::single(DiscretePath::zero(g));
    CHECK_THROWS_AS(w2_estimate(mu, small, Coupling{}), std::invalid_argument);
  }
}

TEST_CASE("w2 estimate under the sorted one-dimensional coupling") {
  TimeGrid g(1.0, 2);
  auto constant_measure = [&](std::initializer_list<double> xs) {
    std::vector<DiscretePath> parts;
    for (double x : xs) parts.push_back(DiscretePath::constant(g, x));
    return ParticleMeasure(std::move(parts));
  };
  Coupling sorted;
  sorted.mode = Coupling::Mode::sorted_1d;
  sorted.marginal_time = 1.0;

  // Quantile coupling pairs order statistics: {0,2} vs {1,3} couples 0-1, 2-3.
  ParticleMeasure a = constant_measure({0.0, 2.0});
  ParticleMeasure b = constant_measure({3.0, 1.0});
  CHECK(w2_estimate(a, b, sorted) == Catch::Approx(1.0));

  // Permuting particles never changes the sorted coupling.
  ParticleMeasure bp = b.permuted({1, 0});
  CHECK(w2_estimate(a, bp, sorted) == Catch::Approx(1.0));

  // The index coupling on the unsorted order is only an upper bound.
  CHECK(w2_estimate(a, b, Coupling{}) >= w2_estimate(a, b, sorted));
}

TEST_CASE("permutations and canonical ranks") {
  TimeGrid g(1.0, 4);
  NoiseField nf(808u);
  std::vector<DiscretePath> parts;
  for (int i = 0; i < 5; ++i) parts.push_back(brownian_like(g, nf, static_cast<std::uint64_t>(i)));
  ParticleMeasure mu(parts);

  std::vector<int> perm = {4, 2, 0, 3, 1};
  ParticleMeasure shuffled = mu.permuted(perm);
  REQUIRE(shuffled.size() == mu.size());
  for (int i = 0; i < mu.size(); ++i)
    CHECK(sup_distance(shuffled.particle(i), mu.particle(perm[static_cast<std::size_t>(i)])) == 0.0);

  // Ranks follow the particles: the multiset {(particle, rank)} is invariant.
  std::vector<int> r0 = mu.canonical_ranks();
  std::vector<int> r1 = shuffled.canonical_ranks();
  for (int i = 0; i < mu.size(); ++i)
    CHECK(r1[static_cast<std::size_t>(i)] == r0[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]);

  CHECK_THROWS_AS(mu.permuted(std::vector<int>{0, 1}), std::invalid_argument);
}

TEST_CASE("stopped measures stop every particle") {
  TimeGrid g(1.0, 4);
  NoiseField nf(404u);
  std::vector<DiscretePath> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(brownian_like(g, nf, static_cast<std::uint64_t>(i)));
  ParticleMeasure mu(parts);
  ParticleMeasure stopped = mu.stopped(0.5);
  for (int i = 0; i < mu.size(); ++i)
    CHECK(sup_distance(stopped.particle(i), stop_path(mu.particle(i), 0.5)) == 0.0);
}
