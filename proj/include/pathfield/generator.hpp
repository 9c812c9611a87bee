// pathfield: backward-equation generators f(t, omega, y, z, mu, nu). The
// structured family g_y(y) + g_z . z + g_nu(stat(nu)) + F(t, omega, mu)
// carries analytic partial derivatives for the variation solvers; opaque
// callables are accepted with finite-difference partials and a warning flag.
#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pathfield/functional.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/path.hpp"
#include "pathfield/smooth.hpp"

namespace pathfield {

// Scalar statistic of an empirical law on the reals. Mean and second moment
// are sample averages of a smooth per-point map phi, which is what the
// variation kernels differentiate; quantile and custom statistics are
// value-only.
struct LawStat {
  enum class Kind { mean, second_moment, quantile, custom };
  Kind kind = Kind::mean;
  double q = 0.5;
  std::function<double(const std::vector<double>&)> custom;

  static LawStat mean() { return {}; }
  static LawStat second_moment() {
    LawStat s;
    s.kind = Kind::second_moment;
    return s;
  }
  static LawStat quantile(double level) {
    LawStat s;
    s.kind = Kind::quantile;
    s.q = level;
    return s;
  }
  static LawStat custom_map(std::function<double(const std::vector<double>&)> fn) {
    LawStat s;
    s.kind = Kind::custom;
    s.custom = std::move(fn);
    return s;
  }

  bool separable() const { return kind == Kind::mean || kind == Kind::second_moment; }

  double phi(double y) const { return kind == Kind::second_moment ? y * y : y; }
  double phi_d1(double y) const { return kind == Kind::second_moment ? 2.0 * y : 1.0; }
  double phi_d2(double) const { return kind == Kind::second_moment ? 2.0 : 0.0; }

  double value(const std::vector<double>& sample) const {
    if (sample.empty()) throw std::invalid_argument("LawStat: empty sample");
    switch (kind) {
      case Kind::mean:
      case Kind::second_moment: {
        double acc = 0.0;
        for (double y : sample) acc += phi(y);
        return acc / static_cast<double>(sample.size());
      }
      case Kind::quantile: {
        std::vector<double> s = sample;
        const int idx = std::min<int>(static_cast<int>(s.size()) - 1,
                                      static_cast<int>(std::floor(
                                          q * static_cast<double>(s.size() - 1) + 0.5)));
        std::nth_element(s.begin(), s.begin() + idx, s.end());
        return s[static_cast<std::size_t>(idx)];
      }
      case Kind::custom:
        if (!custom) throw std::logic_error("LawStat: custom map not set");
        return custom(sample);
    }
    return 0.0;
  }
};

struct StructuredGenerator {
  SmoothFn gy;
  bool has_y = false;
  Eigen::VectorXd gz;  // empty = no z dependence
  SmoothFn gnu;
  LawStat stat;
  bool has_nu = false;
  FunctionalSpec source = FunctionalSpec::constant(0.0);
  bool has_source = false;
};

class Generator {
 public:
  using OpaqueFn =
      std::function<double(double, const DiscretePath&, double, const Eigen::VectorXd&,
                           const ParticleMeasure&, const std::vector<double>&)>;

  Generator() = default;

  static Generator zero() { return Generator(); }

  static Generator opaque(std::string name, OpaqueFn fn) {
    Generator g;
    g.opaque_ = std::move(fn);
    g.name_ = std::move(name);
    return g;
  }

  Generator with_y(SmoothFn gy) const {
    Generator g = *this;
    g.parts_.gy = std::move(gy);
    g.parts_.has_y = true;
    return g;
  }

  Generator with_z(Eigen::VectorXd gz) const {
    Generator g = *this;
    g.parts_.gz = std::move(gz);
    return g;
  }

  Generator with_law(SmoothFn gnu, LawStat stat = LawStat::mean()) const {
    Generator g = *this;
    g.parts_.gnu = std::move(gnu);
    g.parts_.stat = std::move(stat);
    g.parts_.has_nu = true;
    return g;
  }

  Generator with_source(FunctionalSpec source) const {
    Generator g = *this;
    g.parts_.source = std::move(source);
    g.parts_.has_source = true;
    return g;
  }

  bool analytic() const { return !opaque_; }
  bool trivial() const {
    return analytic() && !parts_.has_y && parts_.gz.size() == 0 && !parts_.has_nu &&
           !parts_.has_source;
  }
  bool depends_on_law() const { return analytic() ? parts_.has_nu : true; }
  const StructuredGenerator& parts() const { return parts_; }
  const std::string& name() const { return name_; }

  double value(double t, const DiscretePath& w, double y, const Eigen::VectorXd& z,
               const ParticleMeasure& mu, const std::vector<double>& nu) const {
    if (opaque_) return opaque_(t, w, y, z, mu, nu);
    double acc = 0.0;
    if (parts_.has_y) acc += parts_.gy.f(y);
    if (parts_.gz.size() > 0) {
      if (parts_.gz.size() != z.size())
        throw std::invalid_argument("Generator: z coefficient size mismatch");
      acc += parts_.gz.dot(z);
    }
    if (parts_.has_nu) acc += parts_.gnu.f(parts_.stat.value(nu));
    if (parts_.has_source) acc += parts_.source.value(t, w, mu);
    return acc;
  }

  // --- partial derivatives for the variation coefficient assembly ---------

  double dy(double t, const DiscretePath& w, double y, const Eigen::VectorXd& z,
            const ParticleMeasure& mu, const std::vector<double>& nu, double h = 1e-5) const {
    if (analytic()) return parts_.has_y ? parts_.gy.d1(y) : 0.0;
    return (value(t, w, y + h, z, mu, nu) - value(t, w, y - h, z, mu, nu)) / (2.0 * h);
  }

  double dyy(double t, const DiscretePath& w, double y, const Eigen::VectorXd& z,
             const ParticleMeasure& mu, const std::vector<double>& nu, double h = 1e-4) const {
    if (analytic()) return parts_.has_y ? parts_.gy.d2(y) : 0.0;
    return (value(t, w, y + h, z, mu, nu) - 2.0 * value(t, w, y, z, mu, nu) +
            value(t, w, y - h, z, mu, nu)) /
           (h * h);
  }

  Eigen::VectorXd dz(double t, const DiscretePath& w, double y, const Eigen::VectorXd& z,
                     const ParticleMeasure& mu, const std::vector<double>& nu,
                     double h = 1e-5) const {
    if (analytic()) {
      if (parts_.gz.size() == 0) return Eigen::VectorXd::Zero(z.size());
      return parts_.gz;
    }
    Eigen::VectorXd out(z.size());
    for (int j = 0; j < z.size(); ++j) {
      Eigen::VectorXd zp = z, zm = z;
      zp(j) += h;
      zm(j) -= h;
      out(j) = (value(t, w, y, zp, mu, nu) - value(t, w, y, zm, mu, nu)) / (2.0 * h);
    }
    return out;
  }

  // Lifted law kernel: d f / d nu evaluated at a sample point ytil, i.e.
  // N times the derivative in one sample entry. For the structured family
  // this is gnu'(stat) * phi'(ytil).
  double nu_kernel(double t, const DiscretePath& w, double y, const Eigen::VectorXd& z,
                   const ParticleMeasure& mu, const std::vector<double>& nu, double ytil,
                   double stat_value) const {
    if (analytic()) {
      if (!parts_.has_nu) return 0.0;
      if (!parts_.stat.separable())
        throw std::logic_error(
            "Generator: law kernel needs a mean/second-moment statistic (non-smooth statistic)");
      return parts_.gnu.d1(stat_value) * parts_.stat.phi_d1(ytil);
    }
    // FD in the sample entry closest to ytil (the caller passes an actual
    // sample point).
    std::vector<double> bumped = nu;
    std::size_t j = 0;
    double best = std::abs(bumped[0] - ytil);
    for (std::size_t i = 1; i < bumped.size(); ++i) {
      const double dist = std::abs(bumped[i] - ytil);
      if (dist < best) {
        best = dist;
        j = i;
      }
    }
    const double h = 1e-5 * (1.0 + std::abs(ytil));
    const double n = static_cast<double>(nu.size());
    bumped[j] = ytil + h;
    const double up = value(t, w, y, z, mu, bumped);
    bumped[j] = ytil - h;
    const double dn = value(t, w, y, z, mu, bumped);
    return n * (up - dn) / (2.0 * h);
  }

  // Sample-slot derivative of the lifted kernel (statistic held fixed):
  // gnu'(stat) * phi''(ytil) for the structured family.
  double nu_kernel_deriv(double ytil, double stat_value) const {
    if (!analytic())
      throw std::logic_error("Generator: second-order law kernel requires the structured family");
    if (!parts_.has_nu) return 0.0;
    if (!parts_.stat.separable())
      throw std::logic_error(
          "Generator: law kernel needs a mean/second-moment statistic (non-smooth statistic)");
    return parts_.gnu.d1(stat_value) * parts_.stat.phi_d2(ytil);
  }

  double stat_of(const std::vector<double>& nu) const {
    if (!analytic() || !parts_.has_nu) return 0.0;
    return parts_.stat.value(nu);
  }

 private:
  StructuredGenerator parts_;
  OpaqueFn opaque_;
  std::string name_ = "structured";
};

}  // namespace pathfield
