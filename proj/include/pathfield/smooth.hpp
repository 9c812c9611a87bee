// pathfield: registry of smooth scalar maps carrying explicit first and
// second derivatives. Functional building blocks consume these instead of
// relying on automatic differentiation, keeping analytic oracles exact.
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace pathfield {

// C^2 map R -> R with value and two derivatives.
struct SmoothFn {
  std::string name = "zero";
  std::function<double(double)> f = [](double) { return 0.0; };
  std::function<double(double)> d1 = [](double) { return 0.0; };
  std::function<double(double)> d2 = [](double) { return 0.0; };
  // True when the map comes from the registry (polynomial growth is known).
  bool registered = true;

  double operator()(double x) const { return f(x); }
};

namespace detail {

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%g", v);
  return buf;
}

inline double horner(const std::vector<double>& c, double x) {
  double acc = 0.0;
  for (auto it = c.rbegin(); it != c.rend(); ++it) acc = acc * x + *it;
  return acc;
}

inline std::vector<double> poly_derivative(const std::vector<double>& c) {
  std::vector<double> d;
  for (std::size_t k = 1; k < c.size(); ++k) d.push_back(static_cast<double>(k) * c[k]);
  if (d.empty()) d.push_back(0.0);
  return d;
}

}  // namespace detail

// c0 + c1 x + c2 x^2 + ...
inline SmoothFn sf_polynomial(const std::vector<double>& coeffs) {
  if (coeffs.empty()) throw std::invalid_argument("sf_polynomial: empty coefficient list");
  const auto d1c = detail::poly_derivative(coeffs);
  const auto d2c = detail::poly_derivative(d1c);
  SmoothFn s;
  s.name = "polynomial(";
  for (std::size_t i = 0; i < coeffs.size(); ++i)
    s.name += (i ? "," : "") + detail::fmt_num(coeffs[i]);
  s.name += ")";
  s.f = [coeffs](double x) { return detail::horner(coeffs, x); };
  s.d1 = [d1c](double x) { return detail::horner(d1c, x); };
  s.d2 = [d2c](double x) { return detail::horner(d2c, x); };
  return s;
}

// a x + b
inline SmoothFn sf_affine(double a, double b) {
  SmoothFn s;
  s.name = "affine(" + detail::fmt_num(a) + "," + detail::fmt_num(b) + ")";
  s.f = [a, b](double x) { return a * x + b; };
  s.d1 = [a](double) { return a; };
  s.d2 = [](double) { return 0.0; };
  return s;
}

// b exp(a x)
inline SmoothFn sf_exp(double a, double b) {
  SmoothFn s;
  s.name = "exp-scalar(" + detail::fmt_num(a) + "," + detail::fmt_num(b) + ")";
  s.f = [a, b](double x) { return b * std::exp(a * x); };
  s.d1 = [a, b](double x) { return a * b * std::exp(a * x); };
  s.d2 = [a, b](double x) { return a * a * b * std::exp(a * x); };
  return s;
}

// b sin(a x)
inline SmoothFn sf_sin(double a, double b) {
  SmoothFn s;
  s.name = "sin(" + detail::fmt_num(a) + "," + detail::fmt_num(b) + ")";
  s.f = [a, b](double x) { return b * std::sin(a * x); };
  s.d1 = [a, b](double x) { return a * b * std::cos(a * x); };
  s.d2 = [a, b](double x) { return -a * a * b * std::sin(a * x); };
  return s;
}

inline SmoothFn sf_identity() { return sf_affine(1.0, 0.0); }
inline SmoothFn sf_constant(double c) { return sf_polynomial({c}); }
inline SmoothFn sf_square() { return sf_polynomial({0.0, 0.0, 1.0}); }

// Registry lookup used by the config layer. Names are normative.
inline SmoothFn make_smooth(const std::string& name, const std::vector<double>& params) {
  if (name == "polynomial") return sf_polynomial(params);
  if (name == "affine") {
    if (params.size() != 2) throw std::invalid_argument("affine needs params [a, b]");
    return sf_affine(params[0], params[1]);
  }
  if (name == "exp-scalar") {
    if (params.size() != 2) throw std::invalid_argument("exp-scalar needs params [a, b]");
    return sf_exp(params[0], params[1]);
  }
  if (name == "sin") {
    if (params.size() != 2) throw std::invalid_argument("sin needs params [a, b]");
    return sf_sin(params[0], params[1]);
  }
  if (name == "identity") return sf_identity();
  if (name == "constant") {
    if (params.size() != 1) throw std::invalid_argument("constant needs params [c]");
    return sf_constant(params[0]);
  }
  throw std::invalid_argument("unknown smooth map '" + name + "'");
}

// Time-dependent integrand F(r, x) for running integrals, with state
// derivatives. The time slot never needs differentiation.
struct TimeStateFn {
  std::string name = "zero";
  std::function<double(double, double)> f = [](double, double) { return 0.0; };
  std::function<double(double, double)> fx = [](double, double) { return 0.0; };
  std::function<double(double, double)> fxx = [](double, double) { return 0.0; };
  bool registered = true;
};

// F(r, x) = h(x)
inline TimeStateFn ts_state(const SmoothFn& h) {
  TimeStateFn F;
  F.name = "state:" + h.name;
  F.f = [h](double, double x) { return h.f(x); };
  F.fx = [h](double, double x) { return h.d1(x); };
  F.fxx = [h](double, double x) { return h.d2(x); };
  F.registered = h.registered;
  return F;
}

// F(r, x) = psi(r) h(x)
inline TimeStateFn ts_separable(const SmoothFn& psi, const SmoothFn& h) {
  TimeStateFn F;
  F.name = "separable:" + psi.name + "*" + h.name;
  F.f = [psi, h](double r, double x) { return psi.f(r) * h.f(x); };
  F.fx = [psi, h](double r, double x) { return psi.f(r) * h.d1(x); };
  F.fxx = [psi, h](double r, double x) { return psi.f(r) * h.d2(x); };
  F.registered = psi.registered && h.registered;
  return F;
}

// C^2 map R x R -> R for composite blocks f4(x, s), s a running statistic.
struct Smooth2Fn {
  std::string name = "zero2";
  std::function<double(double, double)> f = [](double, double) { return 0.0; };
  std::function<double(double, double)> fx = [](double, double) { return 0.0; };
  std::function<double(double, double)> fs = [](double, double) { return 0.0; };
  std::function<double(double, double)> fxx = [](double, double) { return 0.0; };
  std::function<double(double, double)> fxs = [](double, double) { return 0.0; };
  std::function<double(double, double)> fss = [](double, double) { return 0.0; };
  bool registered = true;
};

// f4(x, s) = hx(x) * hs(s)
inline Smooth2Fn s2_product(const SmoothFn& hx, const SmoothFn& hs) {
  Smooth2Fn g;
  g.name = "product:" + hx.name + "*" + hs.name;
  g.f = [hx, hs](double x, double s) { return hx.f(x) * hs.f(s); };
  g.fx = [hx, hs](double x, double s) { return hx.d1(x) * hs.f(s); };
  g.fs = [hx, hs](double x, double s) { return hx.f(x) * hs.d1(s); };
  g.fxx = [hx, hs](double x, double s) { return hx.d2(x) * hs.f(s); };
  g.fxs = [hx, hs](double x, double s) { return hx.d1(x) * hs.d1(s); };
  g.fss = [hx, hs](double x, double s) { return hx.f(x) * hs.d2(s); };
  g.registered = hx.registered && hs.registered;
  return g;
}

// f4(x, s) = hx(x) + hs(s)
inline Smooth2Fn s2_sum(const SmoothFn& hx, const SmoothFn& hs) {
  Smooth2Fn g;
  g.name = "sum:" + hx.name + "+" + hs.name;
  g.f = [hx, hs](double x, double s) { return hx.f(x) + hs.f(s); };
  g.fx = [hx, hs](double x, double) { return hx.d1(x); };
  g.fs = [hx, hs](double, double s) { return hs.d1(s); };
  g.fxx = [hx, hs](double x, double) { return hx.d2(x); };
  g.fxs = [](double, double) { return 0.0; };
  g.fss = [hx, hs](double, double s) { return hs.d2(s); };
  g.registered = hx.registered && hs.registered;
  return g;
}

}  // namespace pathfield
