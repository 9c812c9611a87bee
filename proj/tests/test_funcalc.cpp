// pathfield: functional layer tests -- leaf catalogue values, analytic
// derivative closed forms, finite-difference agreement and the structural
// invariants (non-anticipativity, Dupire consistency, Hessian symmetry).
#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "pathfield/functional.hpp"
#include "pathfield/rng.hpp"

using namespace pathfield;

namespace {

constexpr double kT = 1.0;

DiscretePath ramp(const TimeGrid& g) {
  std::vector<double> v(static_cast<std::size_t>(g.nodes()));
  for (int k = 0; k < g.nodes(); ++k) v[static_cast<std::size_t>(k)] = static_cast<double>(k);
  return DiscretePath::from_scalar(g, v);
}

DiscretePath brownian_like(const TimeGrid& g, const NoiseField& nf, std::uint64_t stream) {
  std::vector<double> v(static_cast<std::size_t>(g.nodes()));
  double x = 0.5 * nf.gauss(stream, 0, 0);
  v[0] = x;
  for (int k = 1; k < g.nodes(); ++k) {
    x += std::sqrt(g.dt()) * nf.gauss(stream, static_cast<std::uint64_t>(k), 1);
    v[static_cast<std::size_t>(k)] = x;
  }
  return DiscretePath::from_scalar(g, v);
}

ParticleMeasure random_measure(const TimeGrid& g, int n, const NoiseField& nf,
                               std::uint64_t base) {
  std::vector<DiscretePath> parts;
  for (int i = 0; i < n; ++i)
    parts.push_back(brownian_like(g, nf, base + static_cast<std::uint64_t>(i)));
  return ParticleMeasure(std::move(parts));
}

ParticleMeasure constant_measure(const TimeGrid& g, std::initializer_list<double> xs) {
  std::vector<DiscretePath> parts;
  for (double x : xs) parts.push_back(DiscretePath::constant(g, x));
  return ParticleMeasure(std::move(parts));
}

// 0.7 sin(1.2 a) b + 0.4 c + 0.2 a c over the leaves a = omega(t),
// b = E^mu[W(t)^2], c = int_0^t omega(r) dr: the composite shape used for
// chain-rule cross-checks.
FunctionalSpec composite_functional() {
  std::vector<Leaf> leaves;
  leaves.push_back(leaf_path_eval(sf_identity()));
  leaves.push_back(leaf_measure_eval(sf_square()));
  leaves.push_back(leaf_running_integral(sf_identity()));
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
  return FunctionalSpec(Functional(std::move(G), std::move(leaves)));
}

}  // namespace

TEST_CASE("leaf catalogue values") {
  TimeGrid g(kT, 4);
  ParticleMeasure mu = constant_measure(g, {1.0, 3.0});

  SECTION("path evaluation reads the current node") {
    FunctionalSpec f = FunctionalSpec::path_eval(sf_identity());
    CHECK(eval_functional(f, 0.5, ramp(g), mu) == 2.0);
  }
  SECTION("running integral of the state, unit path") {
    FunctionalSpec f = FunctionalSpec::running_integral(sf_identity());
    DiscretePath one = DiscretePath::constant(g, 1.0);
    CHECK(eval_functional(f, 1.0, one, mu) == Catch::Approx(1.0));
    CHECK(eval_functional(f, 0.5, one, mu) == Catch::Approx(0.5));
  }
  SECTION("measure evaluation averages the particles") {
    FunctionalSpec f = FunctionalSpec::measure_eval(sf_square());
    CHECK(eval_functional(f, 0.25, DiscretePath::zero(g), mu) == Catch::Approx(5.0));
  }
  SECTION("measure integral averages running integrals") {
    FunctionalSpec f = FunctionalSpec::measure_integral(sf_identity());
    CHECK(eval_functional(f, 1.0, DiscretePath::zero(g), mu) == Catch::Approx(2.0));
  }
  SECTION("frozen evaluation reads the stopped argument") {
    FunctionalSpec f = FunctionalSpec::frozen_eval(sf_square(), 0.5);
    DiscretePath w = ramp(g);
    CHECK(eval_functional(f, 1.0, w, mu) == 4.0);   // omega(t0) = 2
    CHECK(eval_functional(f, 0.25, w, mu) == 1.0);  // omega(t ^ t0) = omega(t)
  }
  SECTION("measure composite on a single constant particle") {
    Leaf l = leaf_measure_composite(s2_product(sf_identity(), sf_identity()), sf_square());
    FunctionalSpec f = FunctionalSpec::single(std::move(l));
    ParticleMeasure one = constant_measure(g, {2.0});
    // f4(x, s) = x * s with x = 2, s = int_0^1 4 dr = 4.
    CHECK(eval_functional(f, 1.0, DiscretePath::zero(g), one) == Catch::Approx(8.0));
  }
  SECTION("constant specs ignore their arguments") {
    FunctionalSpec f = FunctionalSpec::constant(4.25);
    CHECK(eval_functional(f, 0.75, ramp(g), mu) == 4.25);
  }
}

TEST_CASE("non-anticipativity: the future never enters", "[property]") {
  TimeGrid g(kT, 8);
  NoiseField nf(321u);
  std::vector<FunctionalSpec> fs;
  fs.push_back(FunctionalSpec::path_eval(sf_sin(1.3, 0.9)));
  fs.push_back(FunctionalSpec::running_integral(sf_square()));
  fs.push_back(FunctionalSpec::measure_eval(sf_square()));
  fs.push_back(FunctionalSpec::measure_integral(sf_identity()));
  fs.push_back(FunctionalSpec::frozen_eval(sf_square(), 0.75));
  fs.push_back(composite_functional());

  for (int rep = 0; rep < 10; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    ParticleMeasure mu = random_measure(g, 4, nf, 100 + 10 * static_cast<std::uint64_t>(rep));
    const int kt = static_cast<int>(nf.word(900, static_cast<std::uint64_t>(rep), 0) %
                                    static_cast<std::uint64_t>(g.nodes()));
    const double t = g.t(kt);
    for (const auto& f : fs) {
      const double base = eval_functional(f, t, w, mu);
      // Evaluation equals evaluation on the stopped arguments...
      CHECK(eval_functional(f, t, stop_path(w, t), mu.stopped(t)) == Catch::Approx(base));
      // ...and bumps strictly after t are invisible.
      for (int kp = kt + 1; kp < g.nodes(); ++kp) {
        CHECK(eval_functional(f, t, bump_path(w, g.t(kp), 2.5), mu) == Catch::Approx(base));
        ParticleMeasure mb = mu.with_bumped(1, g.t(kp), Eigen::VectorXd::Constant(1, -1.5));
        CHECK(eval_functional(f, t, w, mb) == Catch::Approx(base));
      }
    }
  }
}

TEST_CASE("horizontal derivative closed forms") {
  TimeGrid g(kT, 10);
  ParticleMeasure mu3 = constant_measure(g, {3.0});

  SECTION("running integral differentiates to its integrand") {
    FunctionalSpec f = FunctionalSpec::running_integral(sf_square());
    DiscretePath two = DiscretePath::constant(g, 2.0);
    for (double t : {0.0, 0.3, 0.7})
      CHECK(horizontal_derivative(f, t, two, mu3) == Catch::Approx(4.0));
  }
  SECTION("path evaluation is horizontally flat") {
    FunctionalSpec f = FunctionalSpec::path_eval(sf_exp(1.0, 1.0));
    NoiseField nf(5u);
    DiscretePath w = brownian_like(g, nf, 0);
    for (double t : {0.0, 0.5, 1.0}) CHECK(horizontal_derivative(f, t, w, mu3) == 0.0);
  }
  SECTION("measure integral differentiates to the particle average") {
    FunctionalSpec f = FunctionalSpec::measure_integral(sf_identity());
    CHECK(horizontal_derivative(f, 0.5, DiscretePath::zero(g), mu3) == Catch::Approx(3.0));
  }
  SECTION("forward difference agrees with the analytic rate") {
    FunctionalSpec f = FunctionalSpec::running_integral(sf_square());
    NoiseField nf(6u);
    DiscretePath w = brownian_like(g, nf, 1);
    const double an = horizontal_derivative(f, 0.5, w, mu3, {}, DerivMode::analytic);
    const double fd = horizontal_derivative(f, 0.5, w, mu3, {}, DerivMode::fd);
    CHECK(fd == Catch::Approx(an).margin(1e-6));
  }
  SECTION("finite differences cannot step past the horizon") {
    FunctionalSpec f = FunctionalSpec::running_integral(sf_square());
    CHECK_THROWS_AS(horizontal_derivative(f, kT, DiscretePath::zero(g), mu3, {}, DerivMode::fd),
                    std::domain_error);
  }
}

TEST_CASE("strong vertical derivative closed forms") {
  TimeGrid g(kT, 10);
  ParticleMeasure mu = constant_measure(g, {0.0});

  SECTION("square of the current state") {
    FunctionalSpec f = FunctionalSpec::path_eval(sf_square());
    DiscretePath w = DiscretePath::constant(g, 3.0);
    for (double tau : {0.0, 0.3, 0.6}) {
      CHECK(svd_first(f, tau, 0.6, w, mu)(0) == Catch::Approx(6.0));
      CHECK(svd_second(f, tau, 0.6, w, mu)(0, 0) == Catch::Approx(2.0));
    }
  }
  SECTION("running integral accumulates from the cut-off") {
    FunctionalSpec f = FunctionalSpec::running_integral(sf_square());
    DiscretePath one = DiscretePath::constant(g, 1.0);
    CHECK(svd_first(f, 0.5, 1.0, one, mu)(0) == Catch::Approx(1.0));  // 2 * (1 - 0.5)
    CHECK(svd_first(f, 1.0, 1.0, one, mu)(0) == 0.0);                 // empty integral
    CHECK(svd_first(f, 0.0, 1.0, one, mu)(0) == Catch::Approx(2.0));
  }
  SECTION("frozen evaluation cuts off at its freeze time") {
    FunctionalSpec f = FunctionalSpec::frozen_eval(sf_square(), 0.5);
    DiscretePath w = DiscretePath::constant(g, 2.0);
    CHECK(svd_first(f, 0.2, 1.0, w, mu)(0) == Catch::Approx(4.0));  // tau <= t0
    CHECK(svd_first(f, 0.7, 1.0, w, mu)(0) == 0.0);                 // tau > t0
  }
  SECTION("the cut-off may not exceed the evaluation time") {
    FunctionalSpec f = FunctionalSpec::path_eval(sf_square());
    CHECK_THROWS_AS(svd_first(f, 0.7, 0.5, DiscretePath::zero(g), mu), std::domain_error);
    CHECK_THROWS_AS(svd_second(f, 0.7, 0.5, DiscretePath::zero(g), mu), std::domain_error);
  }
}

TEST_CASE("Dupire consistency at tau = t", "[property]") {
  TimeGrid g(kT, 8);
  NoiseField nf(17u);
  FunctionalSpec f = composite_functional();
  for (int rep = 0; rep < 10; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    ParticleMeasure mu = random_measure(g, 4, nf, 50 + 10 * static_cast<std::uint64_t>(rep));
    const int kt = 1 + static_cast<int>(nf.word(800, static_cast<std::uint64_t>(rep), 0) %
                                        static_cast<std::uint64_t>(g.nodes() - 1));
    const double t = g.t(kt);
    const double an = svd_first(f, t, t, w, mu, DerivMode::analytic)(0);
    const double fd = svd_first(f, t, t, w, mu, DerivMode::fd)(0);
    const double h1 = FdConfig{}.h1_at(w, t);
    CHECK(std::abs(fd - an) <= 10.0 * h1 * h1);
  }
}

TEST_CASE("Lipschitz bound on the first vertical derivative", "[property]") {
  // b sin(a x) is a*b-Lipschitz in the sup norm; its strong vertical
  // derivative must respect that constant at every cut-off.
  const double a = 1.7, b = 0.8;
  TimeGrid g(kT, 8);
  NoiseField nf(23u);
  FunctionalSpec f = FunctionalSpec::path_eval(sf_sin(a, b));
  ParticleMeasure mu = constant_measure(g, {0.0});
  for (int rep = 0; rep < 20; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    const int kt = static_cast<int>(nf.word(700, static_cast<std::uint64_t>(rep), 0) %
                                    static_cast<std::uint64_t>(g.nodes()));
    const int ktau = static_cast<int>(nf.word(700, static_cast<std::uint64_t>(rep), 1) %
                                      static_cast<std::uint64_t>(kt + 1));
    CHECK(std::abs(svd_first(f, g.t(ktau), g.t(kt), w, mu)(0)) <= a * b + 1e-12);
  }
}

TEST_CASE("measure derivatives") {
  TimeGrid g(kT, 4);

  SECTION("second-moment kernel is twice the particle state") {
    FunctionalSpec f = FunctionalSpec::measure_eval(sf_square());
    ParticleMeasure mu = constant_measure(g, {2.0, -1.0, 0.5});
    DiscretePath w = DiscretePath::zero(g);
    CHECK(measure_derivative_first(f, 0.0, 1.0, w, mu, 0)(0) == Catch::Approx(4.0));
    CHECK(measure_derivative_first(f, 0.0, 1.0, w, mu, 1)(0) == Catch::Approx(-2.0));
    CHECK(measure_derivative_second(f, 0.0, 1.0, w, mu, 0)(0, 0) == Catch::Approx(2.0));
  }
  SECTION("particle-lift differences are exact for quadratic kernels") {
    FunctionalSpec f = FunctionalSpec::measure_eval(sf_square());
    ParticleMeasure mu = constant_measure(g, {2.0, -1.0, 0.5});
    DiscretePath w = DiscretePath::zero(g);
    for (int i = 0; i < mu.size(); ++i) {
      const double an = measure_derivative_first(f, 0.0, 1.0, w, mu, i)(0);
      const double fd =
          measure_derivative_first(f, 0.0, 1.0, w, mu, i, DerivMode::fd)(0);
      CHECK(fd == Catch::Approx(an).epsilon(1e-12));
    }
  }
  SECTION("functionals blind to the measure have zero kernels") {
    FunctionalSpec f = FunctionalSpec::path_eval(sf_square());
    ParticleMeasure mu = constant_measure(g, {2.0});
    DiscretePath w = DiscretePath::constant(g, 1.0);
    CHECK(measure_derivative_first(f, 0.0, 1.0, w, mu, 0)(0) == 0.0);
    CHECK(measure_derivative_first(f, 0.0, 1.0, w, mu, 0, DerivMode::fd)(0) ==
          Catch::Approx(0.0).margin(1e-9));
  }
  SECTION("bad particle indices and cut-offs are rejected") {
    FunctionalSpec f = FunctionalSpec::measure_eval(sf_square());
    ParticleMeasure mu = constant_measure(g, {1.0});
    DiscretePath w = DiscretePath::zero(g);
    CHECK_THROWS_AS(measure_derivative_first(f, 0.0, 1.0, w, mu, 3), std::invalid_argument);
    CHECK_THROWS_AS(measure_derivative_first(f, 0.8, 0.5, w, mu, 0), std::domain_error);
  }
}

TEST_CASE("derivative bundle") {
  TimeGrid g(kT, 8);
  NoiseField nf(37u);
  DiscretePath w = brownian_like(g, nf, 0);
  ParticleMeasure mu = random_measure(g, 4, nf, 10);

  SECTION("constant functionals have an all-zero bundle") {
    DerivativeBundle b = derivative_bundle(FunctionalSpec::constant(3.0), 0.25, 0.75, w, mu);
    CHECK(b.time_deriv == 0.0);
    CHECK(b.d_omega.norm() == 0.0);
    CHECK(b.d2_omega.norm() == 0.0);
    CHECK(b.mu_kernel_particles.norm() == 0.0);
    CHECK(b.mode_path == "analytic");
  }
  SECTION("composite bundle matches the displayed chain rule") {
    FunctionalSpec f = composite_functional();
    const double t = 0.75, tau = 0.25;
    DerivativeBundle b = derivative_bundle(f, tau, t, w, mu);
    const TimeGrid& grid = w.grid();
    const int kt = grid.snap_index(t);
    const double x = w.scalar_at(kt);
    double m2 = 0.0;
    for (int i = 0; i < mu.size(); ++i) {
      const double xi = mu.particle(i).scalar_at(kt);
      m2 += xi * xi;
    }
    m2 /= static_cast<double>(mu.size());
    double run = 0.0;
    for (int j = 0; j < kt; ++j) run += w.scalar_at(j) * grid.dt();

    // d/dt: only the running integral moves: (0.4 + 0.2 a) omega(t).
    CHECK(b.time_deriv == Catch::Approx((0.4 + 0.2 * x) * x));
    // d/d omega_tau: the path slot contributes through sin' and the product
    // term; the running slot accumulates dt over [tau, t).
    const double expect_dw = 0.7 * 1.2 * std::cos(1.2 * x) * m2 + 0.2 * run +
                             (0.4 + 0.2 * x) * (t - tau);
    CHECK(b.d_omega(0) == Catch::Approx(expect_dw));
    // measure kernel at particle i: 0.7 sin(1.2 a) * 2 x_i / N-average form.
    for (int i = 0; i < mu.size(); ++i) {
      const double xi = mu.particle(i).scalar_at(kt);
      CHECK(b.mu_kernel_particles.row(i)(0) ==
            Catch::Approx(0.7 * std::sin(1.2 * x) * 2.0 * xi));
    }
    CHECK(b.mode_measure == "analytic");
  }
  SECTION("opaque functionals fall back to finite differences") {
    FunctionalSpec ref = FunctionalSpec::path_eval(sf_square());
    FunctionalSpec f = FunctionalSpec::opaque(
        "square", [](double t, const DiscretePath& w2, const ParticleMeasure&) {
          const double x = w2.scalar_at(w2.grid().snap_index(t));
          return x * x;
        });
    DerivativeBundle fb = derivative_bundle(f, 0.25, 0.75, w, mu);
    DerivativeBundle rb = derivative_bundle(ref, 0.25, 0.75, w, mu);
    CHECK(fb.mode_path == "fd");
    CHECK(fb.d_omega(0) == Catch::Approx(rb.d_omega(0)).margin(1e-6));
    CHECK(fb.d2_omega(0, 0) == Catch::Approx(rb.d2_omega(0, 0)).margin(1e-4));
  }
}

TEST_CASE("analytic and finite-difference derivatives agree on the composite",
          "[property]") {
  TimeGrid g(kT, 8);
  NoiseField nf(41u);
  FunctionalSpec f = composite_functional();
  FdConfig cfg;
  for (int rep = 0; rep < 20; ++rep) {
    DiscretePath w = brownian_like(g, nf, static_cast<std::uint64_t>(rep));
    ParticleMeasure mu = random_measure(g, 4, nf, 300 + 10 * static_cast<std::uint64_t>(rep));
    const int kt = 1 + static_cast<int>(nf.word(600, static_cast<std::uint64_t>(rep), 0) %
                                        static_cast<std::uint64_t>(g.nodes() - 2));
    const int ktau = static_cast<int>(nf.word(600, static_cast<std::uint64_t>(rep), 1) %
                                      static_cast<std::uint64_t>(kt + 1));
    const double t = g.t(kt), tau = g.t(ktau);
    const double h1 = cfg.h1_at(w, t);
    const double h2 = cfg.h2_at(w, t);
    const double lift = cfg.lift_at(mu);

    CHECK(std::abs(svd_first(f, tau, t, w, mu, DerivMode::fd)(0) -
                   svd_first(f, tau, t, w, mu, DerivMode::analytic)(0)) <= 10.0 * h1 * h1);
    CHECK(std::abs(svd_second(f, tau, t, w, mu, DerivMode::fd)(0, 0) -
                   svd_second(f, tau, t, w, mu, DerivMode::analytic)(0, 0)) <= 10.0 * h2);
    CHECK(std::abs(measure_derivative_first(f, tau, t, w, mu, 0, DerivMode::fd)(0) -
                   measure_derivative_first(f, tau, t, w, mu, 0, DerivMode::analytic)(0)) <=
          10.0 * lift * lift);
  }
}

TEST_CASE("multi-dimensional paths enter through projections") {
  TimeGrid g(kT, 4);
  Eigen::MatrixXd vals(2, 5);
  vals << 1, 1, 2, 2, 3,
          0, 1, 1, 2, 2;
  DiscretePath w(g, vals);
  ParticleMeasure mu = ParticleMeasure::single(DiscretePath::zero(g, 2));

  Leaf l = leaf_path_eval(sf_square());
  l.dir = Eigen::VectorXd(2);
  l.dir << 1.0, 2.0;
  FunctionalSpec f = FunctionalSpec::single(std::move(l));

  // p = omega_1 + 2 omega_2 = 2 + 2*1 = 4 at t = 0.5; f = p^2.
  CHECK(eval_functional(f, 0.5, w, mu) == Catch::Approx(16.0));
  Eigen::VectorXd g1 = svd_first(f, 0.0, 0.5, w, mu);
  CHECK(g1(0) == Catch::Approx(8.0));
  CHECK(g1(1) == Catch::Approx(16.0));
  Eigen::MatrixXd H = svd_second(f, 0.0, 0.5, w, mu);
  CHECK((H - H.transpose()).norm() == 0.0);
  CHECK(H(0, 1) == Catch::Approx(4.0));
  // FD agrees componentwise.
  Eigen::MatrixXd Hfd = svd_second(f, 0.0, 0.5, w, mu, DerivMode::fd);
  CHECK((H - Hfd).cwiseAbs().maxCoeff() < 1e-5);
  // A direction of the wrong size is rejected.
  Leaf bad = leaf_path_eval(sf_square());
  bad.dir = Eigen::VectorXd::Ones(3);
  FunctionalSpec fb = FunctionalSpec::single(std::move(bad));
  CHECK_THROWS_AS(eval_functional(fb, 0.5, w, mu), std::invalid_argument);
}
