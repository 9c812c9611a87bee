// pathfield: dense per-ensemble tables of leaf values and their bump
// derivatives, computed incrementally along the grid so that backward
// solvers and decomposition walkers never rescan path histories.
#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <vector>

#include "pathfield/functional.hpp"
#include "pathfield/measure.hpp"

namespace pathfield {

// Value of the leaf's single-path formula at every (particle, node).
inline Eigen::MatrixXd leaf_path_table(const Leaf& l, const ParticleMeasure& ens) {
  const TimeGrid& g = ens.grid();
  const int K = g.nodes();
  const int n = ens.size();
  detail::check_dir(l, ens.dim());
  Eigen::MatrixXd out(n, K);
  const double dt = g.dt();
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = 0; k < K; ++k) out(i, k) = l.h.f(detail::proj(l, w.at_node(k)));
      }
      break;
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int k0 = g.snap_index(l.t0);
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = 0; k < K; ++k)
          out(i, k) = l.h.f(detail::proj(l, w.at_node(detail::eff_node(k0, k))));
      }
      break;
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double acc = 0.0;
        for (int k = 0; k < K; ++k) {
          out(i, k) = acc;
          acc += l.F.f(g.t(k), detail::proj(l, w.at_node(k))) * dt;
        }
      }
      break;
    case LeafKind::measure_composite:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double s = 0.0;
        for (int k = 0; k < K; ++k) {
          const double p = detail::proj(l, w.at_node(k));
          out(i, k) = l.f4.f(p, s);
          s += l.f5.f(p) * dt;
        }
      }
      break;
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      if (static_cast<int>(l.node_weights.size()) != K)
        throw std::invalid_argument("mollified block: node weights do not match the grid");
      std::vector<double> tail(K + 1, 0.0);
      for (int k = K - 1; k >= 0; --k) tail[k] = tail[k + 1] + l.node_weights[k];
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double prefix = 0.0;
        for (int k = 0; k < K; ++k) {
          const double hk = l.h.f(detail::proj(l, w.at_node(k)));
          out(i, k) = prefix + hk * tail[k];
          prefix += l.node_weights[k] * hk;
        }
      }
      break;
    }
  }
  return out;
}

// First bump-derivative scalar (the factor multiplying the leaf direction)
// of the single-path formula, cut off at node itau; zero for nodes < itau.
inline Eigen::MatrixXd leaf_svd_table(const Leaf& l, int itau, const ParticleMeasure& ens) {
  const TimeGrid& g = ens.grid();
  const int K = g.nodes();
  const int n = ens.size();
  detail::check_dir(l, ens.dim());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, K);
  const double dt = g.dt();
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = itau; k < K; ++k) out(i, k) = l.h.d1(detail::proj(l, w.at_node(k)));
      }
      break;
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int k0 = g.snap_index(l.t0);
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = itau; k < K; ++k) {
          const int ke = detail::eff_node(k0, k);
          if (ke >= itau) out(i, k) = l.h.d1(detail::proj(l, w.at_node(ke)));
        }
      }
      break;
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double acc = 0.0;
        for (int k = itau; k < K; ++k) {
          out(i, k) = acc;
          acc += l.F.fx(g.t(k), detail::proj(l, w.at_node(k))) * dt;
        }
      }
      break;
    case LeafKind::measure_composite:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double s = 0.0, is = 0.0;
        for (int k = 0; k < K; ++k) {
          const double p = detail::proj(l, w.at_node(k));
          if (k >= itau) {
            out(i, k) = l.f4.fx(p, s) + l.f4.fs(p, s) * is;
            is += l.f5.d1(p) * dt;
          }
          s += l.f5.f(p) * dt;
        }
      }
      break;
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      std::vector<double> tail(K + 1, 0.0);
      for (int k = K - 1; k >= 0; --k) tail[k] = tail[k + 1] + l.node_weights[k];
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double prefix = 0.0;
        for (int k = itau; k < K; ++k) {
          const double dk = l.h.d1(detail::proj(l, w.at_node(k)));
          out(i, k) = prefix + dk * tail[k];
          prefix += l.node_weights[k] * dk;
        }
      }
      break;
    }
  }
  return out;
}

// Second bump-derivative scalar, cut off at node itau.
inline Eigen::MatrixXd leaf_svd2_table(const Leaf& l, int itau, const ParticleMeasure& ens) {
  const TimeGrid& g = ens.grid();
  const int K = g.nodes();
  const int n = ens.size();
  detail::check_dir(l, ens.dim());
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, K);
  const double dt = g.dt();
  switch (l.kind) {
    case LeafKind::path_eval:
    case LeafKind::measure_eval:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = itau; k < K; ++k) out(i, k) = l.h.d2(detail::proj(l, w.at_node(k)));
      }
      break;
    case LeafKind::frozen_eval:
    case LeafKind::measure_frozen: {
      const int k0 = g.snap_index(l.t0);
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        for (int k = itau; k < K; ++k) {
          const int ke = detail::eff_node(k0, k);
          if (ke >= itau) out(i, k) = l.h.d2(detail::proj(l, w.at_node(ke)));
        }
      }
      break;
    }
    case LeafKind::running_integral:
    case LeafKind::measure_integral:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double acc = 0.0;
        for (int k = itau; k < K; ++k) {
          out(i, k) = acc;
          acc += l.F.fxx(g.t(k), detail::proj(l, w.at_node(k))) * dt;
        }
      }
      break;
    case LeafKind::measure_composite:
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double s = 0.0, is = 0.0, is2 = 0.0;
        for (int k = 0; k < K; ++k) {
          const double p = detail::proj(l, w.at_node(k));
          if (k >= itau) {
            out(i, k) = l.f4.fxx(p, s) + 2.0 * l.f4.fxs(p, s) * is + l.f4.fss(p, s) * is * is +
                        l.f4.fs(p, s) * is2;
            is += l.f5.d1(p) * dt;
            is2 += l.f5.d2(p) * dt;
          }
          s += l.f5.f(p) * dt;
        }
      }
      break;
    case LeafKind::mollified_path_sum:
    case LeafKind::mollified_measure_sum: {
      std::vector<double> tail(K + 1, 0.0);
      for (int k = K - 1; k >= 0; --k) tail[k] = tail[k + 1] + l.node_weights[k];
      for (int i = 0; i < n; ++i) {
        const DiscretePath& w = ens.particle(i);
        double prefix = 0.0;
        for (int k = itau; k < K; ++k) {
          const double dk = l.h.d2(detail::proj(l, w.at_node(k)));
          out(i, k) = prefix + dk * tail[k];
          prefix += l.node_weights[k] * dk;
        }
      }
      break;
    }
  }
  return out;
}

// Per-leaf value columns of a functional over a path ensemble with a
// separate law ensemble: path leaves get per-particle tables, measure
// leaves a single shared row (the law-ensemble mean).
struct LeafValueTables {
  std::vector<Eigen::MatrixXd> path_leaf;  // per leaf: n x K (empty for measure leaves)
  std::vector<Eigen::RowVectorXd> measure_leaf;  // per leaf: 1 x K (empty for path leaves)

  std::vector<double> at(const Functional& F, int i, int k) const {
    std::vector<double> v(path_leaf.size());
    for (std::size_t l = 0; l < v.size(); ++l)
      v[l] = F.leaf(static_cast<int>(l)).is_measure() ? measure_leaf[l](k) : path_leaf[l](i, k);
    return v;
  }
};

inline LeafValueTables leaf_value_tables(const Functional& F, const ParticleMeasure& paths,
                                         const ParticleMeasure& law) {
  if (!paths.grid().same_as(law.grid()))
    throw std::invalid_argument("leaf tables: path and law ensembles use different grids");
  LeafValueTables t;
  t.path_leaf.resize(F.num_leaves());
  t.measure_leaf.resize(F.num_leaves());
  for (int l = 0; l < F.num_leaves(); ++l) {
    if (F.leaf(l).is_measure())
      t.measure_leaf[l] = leaf_path_table(F.leaf(l), law).colwise().mean();
    else
      t.path_leaf[l] = leaf_path_table(F.leaf(l), paths);
  }
  return t;
}

// n x K table of functional values f(t_k, x_i, law).
inline Eigen::MatrixXd functional_value_table(const FunctionalSpec& f,
                                              const ParticleMeasure& paths,
                                              const ParticleMeasure& law) {
  const TimeGrid& g = paths.grid();
  const int K = g.nodes();
  const int n = paths.size();
  Eigen::MatrixXd out(n, K);
  if (!f.analytic()) {
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < K; ++k) out(i, k) = f.value(g.t(k), paths.particle(i), law);
    return out;
  }
  const Functional& F = f.dsl();
  const LeafValueTables tabs = leaf_value_tables(F, paths, law);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < K; ++k) out(i, k) = F.combiner().value(g.t(k), tabs.at(F, i, k));
  return out;
}

// n x K table of the scalar path variation source d f / d omega_tau at the
// nodes t_k >= tau, for scalar paths.
inline Eigen::MatrixXd functional_svd_table(const Functional& F, double tau,
                                            const ParticleMeasure& paths,
                                            const ParticleMeasure& law) {
  if (paths.dim() != 1)
    throw std::invalid_argument("functional_svd_table: scalar paths required");
  const TimeGrid& g = paths.grid();
  const int K = g.nodes();
  const int n = paths.size();
  const int itau = g.snap_index(tau);
  const LeafValueTables tabs = leaf_value_tables(F, paths, law);
  std::vector<Eigen::MatrixXd> dtabs(F.num_leaves());
  for (int l = 0; l < F.num_leaves(); ++l)
    if (!F.leaf(l).is_measure()) dtabs[l] = leaf_svd_table(F.leaf(l), itau, paths);
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, K);
  for (int i = 0; i < n; ++i)
    for (int k = itau; k < K; ++k) {
      const auto v = tabs.at(F, i, k);
      const Eigen::VectorXd grad = F.combiner().grad(g.t(k), v);
      double acc = 0.0;
      for (int l = 0; l < F.num_leaves(); ++l)
        if (!F.leaf(l).is_measure() && grad(l) != 0.0)
          acc += grad(l) * dtabs[l](i, k) * F.leaf(l).dir(0);
      out(i, k) = acc;
    }
  return out;
}

// n x K table of the scalar second path variation source, full chain rule
// (combiner Hessian over leaf first derivatives plus leaf seconds).
inline Eigen::MatrixXd functional_svd2_table(const Functional& F, double tau,
                                             const ParticleMeasure& paths,
                                             const ParticleMeasure& law) {
  if (paths.dim() != 1)
    throw std::invalid_argument("functional_svd2_table: scalar paths required");
  const TimeGrid& g = paths.grid();
  const int K = g.nodes();
  const int n = paths.size();
  const int itau = g.snap_index(tau);
  const LeafValueTables tabs = leaf_value_tables(F, paths, law);
  std::vector<Eigen::MatrixXd> dtabs(F.num_leaves()), d2tabs(F.num_leaves());
  for (int l = 0; l < F.num_leaves(); ++l)
    if (!F.leaf(l).is_measure()) {
      dtabs[l] = leaf_svd_table(F.leaf(l), itau, paths);
      d2tabs[l] = leaf_svd2_table(F.leaf(l), itau, paths);
    }
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, K);
  for (int i = 0; i < n; ++i)
    for (int k = itau; k < K; ++k) {
      const auto v = tabs.at(F, i, k);
      const Eigen::VectorXd grad = F.combiner().grad(g.t(k), v);
      const Eigen::MatrixXd hess = F.combiner().hess(g.t(k), v);
      double acc = 0.0;
      for (int l = 0; l < F.num_leaves(); ++l) {
        if (F.leaf(l).is_measure()) continue;
        const double dl = F.leaf(l).dir(0);
        if (grad(l) != 0.0) acc += grad(l) * d2tabs[l](i, k) * dl * dl;
        for (int m = 0; m < F.num_leaves(); ++m) {
          if (F.leaf(m).is_measure() || hess(l, m) == 0.0) continue;
          acc += hess(l, m) * dtabs[l](i, k) * dl * dtabs[m](i, k) * F.leaf(m).dir(0);
        }
      }
      out(i, k) = acc;
    }
  return out;
}

}  // namespace pathfield
