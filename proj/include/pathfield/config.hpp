// pathfield: run configuration. Configs are JSON documents; key names and
// semantics are normative, and every parse failure carries the path of the
// offending key. The Monte Carlo seed is mandatory — runs never fall back to
// wall-clock entropy, so a config file pins its outputs completely.
#pragma once

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "pathfield/bsde.hpp"
#include "pathfield/forward.hpp"
#include "pathfield/functional.hpp"
#include "pathfield/generator.hpp"
#include "pathfield/grid.hpp"
#include "pathfield/master.hpp"
#include "pathfield/measure.hpp"
#include "pathfield/path.hpp"
#include "pathfield/smooth.hpp"

namespace pathfield {

using json = nlohmann::json;

// Parse or validation failure with the JSON path of the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}

  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

namespace cfg {

// -------------------------------------------------------------------------
// Typed accessors: every failure names the full key path.
// -------------------------------------------------------------------------

inline std::string join(const std::string& base, const std::string& key) {
  return base.empty() ? key : base + "." + key;
}

inline const json& require(const json& j, const std::string& key, const std::string& base) {
  if (!j.is_object()) throw ConfigError(base, "expected an object");
  const auto it = j.find(key);
  if (it == j.end()) throw ConfigError(join(base, key), "missing required key");
  return *it;
}

inline double num(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError(path, "expected a number");
  return j.get<double>();
}

inline double num_in(const json& j, const std::string& path, double lo, double hi) {
  const double v = num(j, path);
  if (!(v >= lo && v <= hi))
    throw ConfigError(path, "value " + std::to_string(v) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return v;
}

inline int integer(const json& j, const std::string& path, int lo, int hi) {
  if (!j.is_number_integer()) throw ConfigError(path, "expected an integer");
  const auto v = j.get<long long>();
  if (v < lo || v > hi)
    throw ConfigError(path, "value " + std::to_string(v) + " outside [" +
                                std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(v);
}

inline std::string text(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError(path, "expected a string");
  return j.get<std::string>();
}

inline std::vector<double> num_list(const json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of numbers");
  std::vector<double> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(num(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline std::vector<int> int_list(const json& j, const std::string& path, int lo, int hi) {
  if (!j.is_array()) throw ConfigError(path, "expected an array of integers");
  std::vector<int> out;
  out.reserve(j.size());
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(integer(j[i], path + "[" + std::to_string(i) + "]", lo, hi));
  return out;
}

// -------------------------------------------------------------------------
// Smooth maps, functionals, generators, coefficients
// -------------------------------------------------------------------------

// {"name": "polynomial"|"affine"|"exp-scalar"|"sin"|"identity"|"constant",
//  "params": [...]}.
inline SmoothFn smooth_map(const json& j, const std::string& path) {
  const std::string name = text(require(j, "name", path), join(path, "name"));
  std::vector<double> params;
  if (j.contains("params")) params = num_list(j["params"], join(path, "params"));
  try {
    return make_smooth(name, params);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path, e.what());
  }
}

// One functional term. Kinds mirror the library's leaf constructors; the
// "linear" kind combines weighted leaves with a bias.
inline Leaf leaf_spec(const json& j, const std::string& path);

inline FunctionalSpec functional_spec(const json& j, const std::string& path) {
  const std::string kind = text(require(j, "kind", path), join(path, "kind"));
  if (kind == "constant")
    return FunctionalSpec::constant(num(require(j, "value", path), join(path, "value")));
  if (kind == "linear") {
    const json& terms = require(j, "terms", path);
    if (!terms.is_array() || terms.empty())
      throw ConfigError(join(path, "terms"), "expected a non-empty array");
    std::vector<double> weights;
    std::vector<Leaf> leaves;
    for (std::size_t i = 0; i < terms.size(); ++i) {
      const std::string tp = join(path, "terms[" + std::to_string(i) + "]");
      weights.push_back(terms[i].contains("weight") ? num(terms[i]["weight"], join(tp, "weight"))
                                                    : 1.0);
      leaves.push_back(leaf_spec(terms[i], tp));
    }
    const double bias = j.contains("bias") ? num(j["bias"], join(path, "bias")) : 0.0;
    return FunctionalSpec(Functional(combiner_linear(weights, bias), std::move(leaves)));
  }
  return FunctionalSpec::single(leaf_spec(j, path));
}

inline Leaf leaf_spec(const json& j, const std::string& path) {
  const std::string kind = text(require(j, "kind", path), join(path, "kind"));
  auto map = [&j, &path]() { return smooth_map(require(j, "map", path), join(path, "map")); };
  auto t0 = [&j, &path]() { return num(require(j, "t0", path), join(path, "t0")); };
  if (kind == "path-eval") return leaf_path_eval(map());
  if (kind == "frozen-eval") return leaf_frozen_eval(map(), t0());
  if (kind == "running-integral") return leaf_running_integral(map());
  if (kind == "measure-eval") return leaf_measure_eval(map());
  if (kind == "measure-frozen") return leaf_measure_frozen(map(), t0());
  if (kind == "measure-integral") return leaf_measure_integral(map());
  throw ConfigError(join(path, "kind"), "unknown functional kind '" + kind + "'");
}

// Law statistic for generators: "mean", "second-moment", or
// {"quantile": level}.
inline LawStat law_stat(const json& j, const std::string& path) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "mean") return LawStat::mean();
    if (s == "second-moment") return LawStat::second_moment();
    throw ConfigError(path, "unknown law statistic '" + s + "'");
  }
  if (j.is_object() && j.contains("quantile"))
    return LawStat::quantile(num_in(j["quantile"], join(path, "quantile"), 0.0, 1.0));
  throw ConfigError(path, "expected \"mean\", \"second-moment\", or {\"quantile\": q}");
}

// Generator block: any subset of {"y": map, "z": [coeffs], "law": {"map":
// map, "stat": stat}, "source": functional}. An empty object is the zero
// generator.
inline Generator generator_spec(const json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  Generator g = Generator::zero();
  if (j.contains("y")) g = g.with_y(smooth_map(j["y"], join(path, "y")));
  if (j.contains("z")) {
    const std::vector<double> z = num_list(j["z"], join(path, "z"));
    g = g.with_z(Eigen::Map<const Eigen::VectorXd>(z.data(), static_cast<long>(z.size())));
  }
  if (j.contains("law")) {
    const json& lj = j["law"];
    const std::string lp = join(path, "law");
    const SmoothFn map = smooth_map(require(lj, "map", lp), join(lp, "map"));
    const LawStat stat =
        lj.contains("stat") ? law_stat(lj["stat"], join(lp, "stat")) : LawStat::mean();
    g = g.with_law(map, stat);
  }
  if (j.contains("source"))
    g = g.with_source(functional_spec(j["source"], join(path, "source")));
  return g;
}

// A deterministic time coefficient: a bare number is a constant, an object
// is a smooth map evaluated at time t.
inline std::function<double(double)> time_coeff(const json& j, const std::string& path) {
  if (j.is_number()) {
    const double c = j.get<double>();
    return [c](double) { return c; };
  }
  if (j.is_object()) {
    const SmoothFn f = smooth_map(j, path);
    return [f](double t) { return f(t); };
  }
  throw ConfigError(path, "expected a number or a smooth-map object");
}

// {"b1": c, "sigma1": c, "b2": c, "sigma2": c}; entries are constants or
// smooth maps of time; omitted entries keep the standard Brownian defaults.
inline DiffusionCoeffs coeffs_spec(const json& j, const std::string& path) {
  DiffusionCoeffs c = DiffusionCoeffs::standard(1);
  if (j.is_null()) return c;
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  auto vec1 = [](const std::function<double(double)>& f) {
    return [f](double t) { return Eigen::VectorXd::Constant(1, f(t)); };
  };
  auto mat1 = [](const std::function<double(double)>& f) {
    return [f](double t) { return Eigen::MatrixXd::Constant(1, 1, f(t)); };
  };
  if (j.contains("b1")) c.b1 = vec1(time_coeff(j["b1"], join(path, "b1")));
  if (j.contains("sigma1")) c.sigma1 = mat1(time_coeff(j["sigma1"], join(path, "sigma1")));
  if (j.contains("b2")) c.b2 = vec1(time_coeff(j["b2"], join(path, "b2")));
  if (j.contains("sigma2")) c.sigma2 = mat1(time_coeff(j["sigma2"], join(path, "sigma2")));
  return c;
}

}  // namespace cfg

// -------------------------------------------------------------------------
// RunConfig
// -------------------------------------------------------------------------

// Evaluation-point block of a problem: the path argument is a smooth map of
// time sampled on the grid; the measure argument is `size` copies of a base
// map with per-particle constant offsets evenly spread over
// [-spread/2, spread/2].
struct ProbeConfig {
  SmoothFn path_map = sf_constant(0.0);
  SmoothFn measure_map = sf_constant(0.0);
  int measure_size = 8;
  double measure_spread = 1.0;
  bool measure_given = false;  // the config carried an explicit measure block
  double t = 0.0;
  std::optional<double> s;    // flow probe / decomposition end time
  std::optional<double> v;    // evaluation time of the partial decomposition
  std::optional<double> tau;  // derivative cut-off

  DiscretePath path(const TimeGrid& g) const {
    std::vector<double> vals(static_cast<std::size_t>(g.nodes()));
    for (int k = 0; k < g.nodes(); ++k) vals[static_cast<std::size_t>(k)] = path_map(g.t(k));
    return DiscretePath::from_scalar(g, vals);
  }

  ParticleMeasure measure(const TimeGrid& g) const {
    std::vector<DiscretePath> parts;
    parts.reserve(static_cast<std::size_t>(measure_size));
    std::vector<double> vals(static_cast<std::size_t>(g.nodes()));
    for (int j = 0; j < measure_size; ++j) {
      const double off =
          measure_size > 1
              ? measure_spread * (static_cast<double>(j) / (measure_size - 1) - 0.5)
              : 0.0;
      for (int k = 0; k < g.nodes(); ++k)
        vals[static_cast<std::size_t>(k)] = measure_map(g.t(k)) + off;
      parts.push_back(DiscretePath::from_scalar(g, vals));
    }
    return ParticleMeasure(std::move(parts));
  }
};

// One experiment's problem block. Either a named closed-form case (with
// parameters) or explicit terminal/generator/coefficients.
struct ProblemConfig {
  Preset preset = Preset::general;
  std::string case_name;  // closed-form case; empty = explicit problem
  double case_a = 1.0;
  double case_t0 = 0.5;
  double case_eps = 0.1;
  FunctionalSpec terminal = FunctionalSpec::constant(0.0);
  Generator generator;
  DiffusionCoeffs coeffs = DiffusionCoeffs::standard(1);
  ProbeConfig probe;
};

struct SweepConfig {
  std::string suite;  // inner experiment of a convergence sweep
  std::vector<int> grid_steps;  // M axis
  std::vector<int> particles;   // N axis
  std::vector<double> eps;      // mollification axis
  int cell_budget = 256;

  bool trivial() const {
    return grid_steps.size() <= 1 && particles.size() <= 1 && eps.size() <= 1;
  }
  long cells() const {
    auto dim = [](std::size_t n) { return static_cast<long>(n == 0 ? 1 : n); };
    return dim(grid_steps.size()) * dim(particles.size()) * dim(eps.size());
  }
};

struct RunConfig {
  std::string experiment;
  std::string out_dir = ".";
  double horizon = 1.0;
  int grid_steps = 100;
  int particles = 1024;
  std::uint64_t seed = 0;
  int threads = 1;
  bool antithetic = true;
  FdConfig fd;
  PicardConfig picard;
  ProblemConfig problem;
  std::optional<ProblemConfig> problem2;  // compare experiments
  SweepConfig sweep;
  std::optional<double> expect_value;   // reference value for gating, when known
  std::optional<double> expect_margin;  // reference comparison margin
  double expect_rel_tol = 0.01;         // relative tolerance on the references
  json echo;  // resolved document for the manifest

  TimeGrid grid() const { return TimeGrid(horizon, grid_steps); }

  BsdeProblem base_problem() const {
    BsdeProblem p;
    p.terminal = problem.terminal;
    p.f = problem.generator;
    p.coeffs = problem.coeffs;
    p.grid = grid();
    p.N = particles;
    p.seed = seed;
    p.threads = threads;
    p.antithetic = antithetic;
    p.picard = picard;
    return p;
  }

  MasterProblem master_problem() const {
    MasterProblem mp;
    mp.base = base_problem();
    mp.preset = problem.preset;
    return mp;
  }
};

namespace cfg {

inline ProbeConfig probe_spec(const json& j, const std::string& path, double horizon) {
  ProbeConfig pc;
  if (j.contains("path")) pc.path_map = smooth_map(j["path"], join(path, "path"));
  if (j.contains("measure")) {
    const json& mj = j["measure"];
    const std::string mp = join(path, "measure");
    if (!mj.is_object()) throw ConfigError(mp, "expected an object");
    pc.measure_given = true;
    if (mj.contains("size")) pc.measure_size = integer(mj["size"], join(mp, "size"), 1, 100000);
    if (mj.contains("spread"))
      pc.measure_spread = num_in(mj["spread"], join(mp, "spread"), 0.0, 1e6);
    if (mj.contains("base")) pc.measure_map = smooth_map(mj["base"], join(mp, "base"));
  }
  if (j.contains("t")) pc.t = num_in(j["t"], join(path, "t"), 0.0, horizon);
  if (j.contains("s")) pc.s = num_in(j["s"], join(path, "s"), 0.0, horizon);
  if (j.contains("v")) pc.v = num_in(j["v"], join(path, "v"), 0.0, horizon);
  if (j.contains("tau")) pc.tau = num_in(j["tau"], join(path, "tau"), 0.0, horizon);
  return pc;
}

inline ProblemConfig problem_spec(const json& j, const std::string& path, double horizon) {
  ProblemConfig pc;
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  if (j.contains("preset")) {
    const std::string tag = text(j["preset"], join(path, "preset"));
    try {
      pc.preset = preset_from_name(tag);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(join(path, "preset"), e.what());
    }
  }
  if (j.contains("case")) pc.case_name = text(j["case"], join(path, "case"));
  if (j.contains("a")) pc.case_a = num(j["a"], join(path, "a"));
  if (j.contains("t0")) pc.case_t0 = num_in(j["t0"], join(path, "t0"), 0.0, horizon);
  if (j.contains("eps")) pc.case_eps = num_in(j["eps"], join(path, "eps"), 1e-12, 10.0);
  if (j.contains("terminal"))
    pc.terminal = functional_spec(j["terminal"], join(path, "terminal"));
  if (j.contains("generator"))
    pc.generator = generator_spec(j["generator"], join(path, "generator"));
  if (j.contains("coefficients"))
    pc.coeffs = coeffs_spec(j["coefficients"], join(path, "coefficients"));
  pc.probe = probe_spec(j, path, horizon);
  return pc;
}

}  // namespace cfg

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = {
      "derivcheck", "ito-check",   "solve-bsde", "master-eval",
      "mollify-sweep", "convergence", "compare",    "flow-check"};
  return names;
}

// Parses and validates a config document. `seed_override` and
// `threads_override` implement the CLI flags; the seed must come from one of
// the two sources.
inline RunConfig parse_config(const json& doc, std::optional<std::uint64_t> seed_override = {},
                              std::optional<int> threads_override = {}) {
  using namespace cfg;
  RunConfig rc;
  rc.experiment = text(require(doc, "experiment", ""), "experiment");
  bool known = false;
  for (const std::string& n : experiment_names()) known = known || n == rc.experiment;
  if (!known) throw ConfigError("experiment", "unknown experiment '" + rc.experiment + "'");

  if (doc.contains("out")) rc.out_dir = text(doc["out"], "out");

  if (doc.contains("grid")) {
    const json& g = doc["grid"];
    if (g.contains("T")) rc.horizon = num_in(g["T"], "grid.T", 1e-9, 1e6);
    if (g.contains("M")) rc.grid_steps = integer(g["M"], "grid.M", 1, 1000000);
  }

  if (doc.contains("mc")) {
    const json& m = doc["mc"];
    if (m.contains("N")) rc.particles = integer(m["N"], "mc.N", 2, 100000000);
    if (m.contains("seed")) {
      if (!m["seed"].is_number_unsigned() && !m["seed"].is_number_integer())
        throw ConfigError("mc.seed", "expected an unsigned integer");
      rc.seed = m["seed"].get<std::uint64_t>();
    } else if (!seed_override) {
      throw ConfigError("mc.seed", "missing required key (no wall-clock default)");
    }
    if (m.contains("threads")) rc.threads = integer(m["threads"], "mc.threads", 1, 4096);
    if (m.contains("antithetic")) {
      if (!m["antithetic"].is_boolean())
        throw ConfigError("mc.antithetic", "expected a boolean");
      rc.antithetic = m["antithetic"].get<bool>();
    }
  } else if (!seed_override) {
    throw ConfigError("mc.seed", "missing required key (no wall-clock default)");
  }
  if (seed_override) rc.seed = *seed_override;
  if (threads_override) rc.threads = *threads_override;

  if (doc.contains("fd")) {
    const json& f = doc["fd"];
    if (f.contains("h1")) rc.fd.h1 = num_in(f["h1"], "fd.h1", 0.0, 1.0);
    if (f.contains("h2")) rc.fd.h2 = num_in(f["h2"], "fd.h2", 0.0, 1.0);
    if (f.contains("h_t")) rc.fd.h_t = num_in(f["h_t"], "fd.h_t", 0.0, 1.0);
    if (f.contains("lift_eps")) rc.fd.lift_eps = num_in(f["lift_eps"], "fd.lift_eps", 0.0, 1.0);
  }

  if (doc.contains("picard")) {
    const json& p = doc["picard"];
    if (p.contains("tol")) rc.picard.tol_linear = num_in(p["tol"], "picard.tol", 1e-15, 1.0);
    if (p.contains("tol_law"))
      rc.picard.tol_law = num_in(p["tol_law"], "picard.tol_law", 1e-15, 1.0);
    if (p.contains("max_iter"))
      rc.picard.max_iter = integer(p["max_iter"], "picard.max_iter", 1, 10000);
  }

  if (doc.contains("problem"))
    rc.problem = cfg::problem_spec(doc["problem"], "problem", rc.horizon);
  if (doc.contains("problem2"))
    rc.problem2 = cfg::problem_spec(doc["problem2"], "problem2", rc.horizon);

  if (doc.contains("sweep")) {
    const json& s = doc["sweep"];
    if (!s.is_object()) throw ConfigError("sweep", "expected an object");
    if (s.contains("suite")) rc.sweep.suite = text(s["suite"], "sweep.suite");
    if (s.contains("M")) rc.sweep.grid_steps = int_list(s["M"], "sweep.M", 1, 1000000);
    if (s.contains("N")) rc.sweep.particles = int_list(s["N"], "sweep.N", 2, 100000000);
    if (s.contains("eps")) rc.sweep.eps = num_list(s["eps"], "sweep.eps");
    if (s.contains("cell_budget"))
      rc.sweep.cell_budget = integer(s["cell_budget"], "sweep.cell_budget", 1, 1000000);
  }

  if (doc.contains("expect")) {
    const json& e = doc["expect"];
    if (!e.is_object()) throw ConfigError("expect", "expected an object");
    if (e.contains("value")) rc.expect_value = num(e["value"], "expect.value");
    if (e.contains("margin")) rc.expect_margin = num(e["margin"], "expect.margin");
    if (e.contains("rel_tol"))
      rc.expect_rel_tol = num_in(e["rel_tol"], "expect.rel_tol", 1e-15, 1.0);
  }

  rc.echo = doc;
  rc.echo["mc"]["seed"] = rc.seed;
  rc.echo["mc"]["threads"] = rc.threads;
  rc.echo["out"] = rc.out_dir;
  return rc;
}

inline RunConfig parse_config_text(const std::string& body,
                                   std::optional<std::uint64_t> seed_override = {},
                                   std::optional<int> threads_override = {}) {
  json doc;
  try {
    doc = json::parse(body);
  } catch (const json::parse_error& e) {
    throw ConfigError("(document)", e.what());
  }
  return parse_config(doc, seed_override, threads_override);
}

}  // namespace pathfield
