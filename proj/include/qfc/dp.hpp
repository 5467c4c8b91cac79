#pragma once

// Backward dynamic programming for the HJB equation on rectangular grids,
// the stationary time-optimal variant, policy extraction and export.
//
// Scheme: explicit in time, upwind first differences for the drift (the
// side the characteristic comes from), central second differences for the
// diffusion. A node missing its upwind neighbour uses the inner difference.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfc/control.hpp"
#include "qfc/cost.hpp"
#include "qfc/dynamics.hpp"
#include "qfc/error.hpp"
#include "qfc/optimize.hpp"
#include "qfc/parallel.hpp"

namespace qfc {

/// Uniform rectangular grid with 1 to 3 axes plus a uniform time grid.
struct DpGrid {
  std::vector<std::vector<double>> axes;
  std::vector<double> times;

  static std::vector<double> linspace(double lo, double hi, std::size_t n) {
    if (n < 2) throw DomainError("DpGrid: an axis needs at least 2 nodes");
    std::vector<double> v(n);
    for (std::size_t i = 0; i < n; ++i)
      v[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
    return v;
  }

  int dim() const { return static_cast<int>(axes.size()); }
  std::size_t size(int axis) const { return axes[static_cast<std::size_t>(axis)].size(); }
  double spacing(int axis) const {
    const auto& a = axes[static_cast<std::size_t>(axis)];
    return a[1] - a[0];
  }
  std::size_t node_count() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.size();
    return n;
  }
  /// Axis 0 varies slowest.
  std::size_t stride(int axis) const {
    std::size_t s = 1;
    for (int i = dim() - 1; i > axis; --i) s *= size(i);
    return s;
  }
  std::size_t coord(std::size_t node, int axis) const {
    return node / stride(axis) % size(axis);
  }
  RVector node(std::size_t k) const {
    RVector x(dim());
    for (int i = 0; i < dim(); ++i) x(i) = axes[static_cast<std::size_t>(i)][coord(k, i)];
    return x;
  }
  double dt() const { return times.size() > 1 ? times[1] - times[0] : 0.0; }

  void check(bool need_times = true) const {
    if (axes.empty() || axes.size() > 3)
      throw DimensionError("DpGrid: need 1 to 3 state axes");
    auto uniform = [](const std::vector<double>& v, const char* what) {
      if (v.size() < 2) throw DomainError(std::string("DpGrid: ") + what + " needs at least 2 nodes");
      const double h = v[1] - v[0];
      if (!(h > 0)) throw DomainError(std::string("DpGrid: ") + what + " must be ascending");
      for (std::size_t i = 1; i < v.size(); ++i)
        if (std::abs((v[i] - v[i - 1]) - h) > 1e-9 * std::max(1.0, std::abs(h)) + 1e-12 * std::abs(v[i]))
          throw DomainError(std::string("DpGrid: ") + what + " must be uniform");
    };
    for (const auto& a : axes) uniform(a, "state axis");
    if (need_times) uniform(times, "time grid");
  }
};

/// Solved value function with its argmax policy. For time-dependent
/// problems slice k holds V(·, t_k) and policy k the control used on
/// [t_k, t_{k+1}), chosen from the derivatives of slice k + 1; the terminal
/// slice repeats the last policy. Stationary fields have one slice.
struct ValueField {
  DpGrid grid;
  ControlRegion region;
  bool stationary = false;
  std::vector<std::vector<double>> values;
  /// Discrete regions: option index per node. Box regions: flat control
  /// coordinates, one row per node.
  std::vector<std::vector<int>> option;
  std::vector<RMatrix> flat;
  std::size_t degenerate_nodes = 0;  ///< nodes where every candidate ties
  std::size_t iterations = 0;        ///< value iterations (stationary)
  double residual = 0.0;             ///< final max |max G - 1| (stationary)
  double pseudo_dt = 0.0;            ///< value-iteration step (stationary)
  std::vector<std::uint8_t> pinned;  ///< threshold nodes (stationary)

  std::size_t slice_count() const { return values.size(); }

  std::size_t slice_at(double t) const {
    if (stationary || values.size() == 1) return 0;
    const double dt = grid.dt();
    const double s = (t - grid.times.front()) / dt;
    const auto k = static_cast<long>(std::floor(s + 1e-9));
    return static_cast<std::size_t>(std::clamp<long>(k, 0, static_cast<long>(values.size()) - 1));
  }

  std::size_t nearest_node(const RVector& x) const {
    if (x.size() != grid.dim()) throw DimensionError("ValueField: state has wrong dimension");
    std::size_t k = 0;
    for (int i = 0; i < grid.dim(); ++i) {
      const auto& a = grid.axes[static_cast<std::size_t>(i)];
      const double s = (x(i) - a.front()) / grid.spacing(i);
      const auto j = std::clamp<long>(std::lround(s), 0, static_cast<long>(a.size()) - 1);
      k += static_cast<std::size_t>(j) * grid.stride(i);
    }
    return k;
  }

  ControlVector control(std::size_t slice, std::size_t node) const {
    if (region.is_discrete())
      return region.discrete[static_cast<std::size_t>(option[slice][node])];
    return region.at(flat[slice].row(static_cast<Eigen::Index>(node)).transpose());
  }

  /// Multilinear interpolation in x within slice k; nullopt outside.
  std::optional<double> interpolate(std::size_t k, const RVector& x) const {
    const int d = grid.dim();
    std::size_t base = 0;
    double w[3];
    std::size_t step[3];
    for (int i = 0; i < d; ++i) {
      const auto& a = grid.axes[static_cast<std::size_t>(i)];
      const double h = grid.spacing(i);
      const double s = (x(i) - a.front()) / h;
      const double n1 = static_cast<double>(a.size() - 1);
      if (s < -1e-9 || s > n1 + 1e-9) return std::nullopt;
      const double sc = std::clamp(s, 0.0, n1);
      auto j = static_cast<std::size_t>(std::floor(sc));
      if (j >= a.size() - 1) j = a.size() - 2;
      w[i] = sc - static_cast<double>(j);
      base += j * grid.stride(i);
      step[i] = grid.stride(i);
    }
    double v = 0.0;
    for (int corner = 0; corner < (1 << d); ++corner) {
      double wt = 1.0;
      std::size_t k2 = base;
      for (int i = 0; i < d; ++i) {
        if (corner >> i & 1) {
          wt *= w[i];
          k2 += step[i];
        } else {
          wt *= 1 - w[i];
        }
      }
      if (wt != 0.0) v += wt * values[k][k2];
    }
    return v;
  }

  /// V(x, t): multilinear in x, linear in t between slices.
  double value(const RVector& x, double t = 0.0) const {
    if (stationary || values.size() == 1) {
      auto v = interpolate(0, x);
      if (!v) throw DomainError("ValueField: state outside the grid");
      return *v;
    }
    const double dt = grid.dt();
    const double s = std::clamp((t - grid.times.front()) / dt, 0.0,
                                static_cast<double>(values.size() - 1));
    auto k = static_cast<std::size_t>(std::floor(s));
    if (k >= values.size() - 1) k = values.size() - 2;
    const double w = s - static_cast<double>(k);
    auto a = interpolate(k, x), b = interpolate(k + 1, x);
    if (!a || !b) throw DomainError("ValueField: state outside the grid");
    return (1 - w) * *a + w * *b;
  }

  /// Keeps nodes lo[i] <= index < lo[i] + n[i] on each axis.
  ValueField crop(const std::vector<std::size_t>& lo,
                  const std::vector<std::size_t>& n) const;
};

struct DpOptions {
  /// Options within tie_rel (relative) of the best G tie; among tied
  /// discrete options the one listed last wins.
  double tie_rel = 1e-9;
  double tie_floor = 1e-300;
  /// Box regions: candidate controls (corners when flat dim <= 4, then
  /// Halton points); the best is polished with Nelder–Mead.
  int box_samples = 16;
  bool polish = true;
  NelderMeadOptions nm;
  int workers = 1;
};

namespace detail {

/// One-sided or inner first difference along `axis` at node k, taken on
/// the side the characteristic comes from (sign of the drift).
inline double upwind_diff(const DpGrid& g, const std::vector<double>& V,
                          std::size_t k, int axis, double a) {
  const std::size_t n = g.size(axis), s = g.stride(axis), c = g.coord(k, axis);
  const double h = g.spacing(axis);
  const bool backward = a < 0;
  if (backward) {
    if (c == 0) return (V[k + s] - V[k]) / h;
    return (V[k] - V[k - s]) / h;
  }
  if (c + 1 == n) return (V[k] - V[k - s]) / h;
  return (V[k + s] - V[k]) / h;
}

/// Central second derivative; edge nodes reuse the adjacent interior
/// stencil. Zero along axes with fewer than 3 nodes.
inline double second_diff(const DpGrid& g, const std::vector<double>& V,
                          std::size_t k, int i, int j) {
  auto centre = [&](std::size_t kk, int axis) {
    const std::size_t n = g.size(axis), s = g.stride(axis), c = g.coord(kk, axis);
    if (c == 0) return kk + s;
    if (c + 1 == n) return kk - s;
    return kk;
  };
  if (g.size(i) < 3 || g.size(j) < 3) return 0.0;
  const std::size_t si = g.stride(i), sj = g.stride(j);
  const double hi = g.spacing(i), hj = g.spacing(j);
  if (i == j) {
    const std::size_t m = centre(k, i);
    return (V[m + si] - 2 * V[m] + V[m - si]) / (hi * hi);
  }
  const std::size_t m = centre(centre(k, i), j);
  return (V[m + si + sj] - V[m + si - sj] - V[m - si + sj] + V[m - si - sj]) /
         (4 * hi * hj);
}

/// G at node k from the discrete derivatives of V, plus the explicit
/// stability number dt (Σ|A_i|/h_i + Σ(BBᵀ)_ii/h_i²).
struct NodeG {
  double g = -std::numeric_limits<double>::infinity();
  double cfl = 0.0;
};

inline NodeG node_g(const DpGrid& g, const std::vector<double>& V,
                    std::size_t k, const RVector& x, double t, double dt,
                    const ControlVector& v, const Dynamics& dyn,
                    const RunningCost& L) {
  NodeG out;
  const RVector A = dyn.a(t, x, v);
  double val = 0.0;
  for (int i = 0; i < g.dim(); ++i) {
    if (A(i) != 0.0) val -= A(i) * upwind_diff(g, V, k, i, A(i));
    out.cfl += std::abs(A(i)) / g.spacing(i);
  }
  if (dyn.noise_dim > 0) {
    const RMatrix B = dyn.b(t, x, v);
    const RMatrix D = B * B.transpose();
    for (int i = 0; i < g.dim(); ++i) {
      out.cfl += D(i, i) / (g.spacing(i) * g.spacing(i));
      for (int j = 0; j < g.dim(); ++j)
        if (D(i, j) != 0.0) val -= 0.5 * D(i, j) * second_diff(g, V, k, i, j);
    }
  }
  if (L) val -= L(t, x, v);
  out.g = val;
  out.cfl *= dt;
  return out;
}

struct NodeChoice {
  double g = -std::numeric_limits<double>::infinity();
  int option = -1;
  RVector flat;
  bool degenerate = false;
};

inline std::vector<RVector> box_candidates(const ControlRegion& region,
                                           int samples) {
  std::vector<RVector> out;
  const Eigen::Index d = region.lower.size();
  if (d <= 4) {
    for (int mask = 0; mask < (1 << d); ++mask) {
      RVector c(d);
      for (Eigen::Index i = 0; i < d; ++i)
        c(i) = (mask >> i & 1) ? region.upper(i) : region.lower(i);
      out.push_back(c);
    }
  }
  for (int i = 0; i < samples; ++i)
    out.push_back(halton_point(static_cast<std::size_t>(i), region.lower, region.upper));
  return out;
}

/// argmax of G over the region at one node; throws on stability or
/// maximization failure.
inline NodeChoice choose(const DpGrid& g, const std::vector<double>& V,
                         std::size_t k, double t, double dt,
                         const ControlRegion& region,
                         const std::vector<RVector>& candidates,
                         const Dynamics& dyn, const RunningCost& L,
                         const DpOptions& opt) {
  const RVector x = g.node(k);
  NodeChoice best;
  auto stable = [&](const NodeG& r) {
    if (r.cfl > 1 + 1e-9) {
      std::ostringstream m;
      m << "explicit step unstable at x = " << x.transpose() << ", t = " << t
        << " (stability number " << r.cfl << " > 1); reduce dt or coarsen the grid";
      throw DomainError(m.str());
    }
  };
  double worst = std::numeric_limits<double>::infinity();
  if (region.is_discrete()) {
    std::vector<double> gs(region.discrete.size());
    for (std::size_t o = 0; o < gs.size(); ++o) {
      const NodeG r = node_g(g, V, k, x, t, dt, region.discrete[o], dyn, L);
      stable(r);
      gs[o] = std::isfinite(r.g) ? r.g : -std::numeric_limits<double>::infinity();
      best.g = std::max(best.g, gs[o]);
      worst = std::min(worst, gs[o]);
    }
    if (!std::isfinite(best.g)) throw NumericalError("solve_backward: no finite G at a node");
    const double tol = opt.tie_rel * std::max(std::abs(best.g), opt.tie_floor);
    for (std::size_t o = 0; o < gs.size(); ++o)
      if (gs[o] >= best.g - tol) best.option = static_cast<int>(o);
    best.degenerate = worst >= best.g - tol;
    return best;
  }
  auto f = [&](const RVector& flat) {
    const NodeG r = node_g(g, V, k, x, t, dt, region.at(flat), dyn, L);
    stable(r);
    return r.g;
  };
  for (const auto& c : candidates) {
    const double v = f(c);
    if (!std::isfinite(v)) continue;
    worst = std::min(worst, v);
    if (v > best.g) {
      best.g = v;
      best.flat = c;
    }
  }
  if (!std::isfinite(best.g)) throw NumericalError("solve_backward: no finite G at a node");
  const double tol = opt.tie_rel * std::max(std::abs(best.g), opt.tie_floor);
  best.degenerate = worst >= best.g - tol;
  if (opt.polish && !best.degenerate) {
    const auto r = nelder_mead_max(f, best.flat, region.lower, region.upper, opt.nm);
    if (r.value > best.g) {
      best.g = r.value;
      best.flat = region.clamp(r.x);
    }
  }
  return best;
}

inline void store(ValueField& vf, std::size_t slice, std::size_t k,
                  const NodeChoice& c) {
  if (vf.region.is_discrete())
    vf.option[slice][k] = c.option;
  else
    vf.flat[slice].row(static_cast<Eigen::Index>(k)) = c.flat.transpose();
}

inline void allocate_policy(ValueField& vf, std::size_t slices) {
  const std::size_t n = vf.grid.node_count();
  if (vf.region.is_discrete())
    vf.option.assign(slices, std::vector<int>(n, 0));
  else
    vf.flat.assign(slices, RMatrix::Zero(static_cast<Eigen::Index>(n), vf.region.lower.size()));
}

}  // namespace detail

/// Steps V(·, T) = M backwards: V(t_k) = V(t_{k+1}) - dt max_v G, with G
/// from the discrete derivatives of slice k + 1.
inline ValueField solve_backward(const Dynamics& dyn,
                                 const CostSpec<RVector>& spec,
                                 const ControlRegion& region,
                                 const DpGrid& grid,
                                 const DpOptions& opt = {}) {
  grid.check();
  if (dyn.state_dim != grid.dim())
    throw DimensionError("solve_backward: grid and dynamics dimensions differ");
  if (!spec.M) throw DomainError("solve_backward: terminal cost missing");
  if (std::abs(grid.times.back() - spec.T) > 1e-9 * std::max(1.0, spec.T))
    throw DomainError("solve_backward: last grid time must equal the horizon");
  region.check();
  ValueField vf;
  vf.grid = grid;
  vf.region = region;
  const std::size_t n = grid.node_count(), nt = grid.times.size();
  const double dt = grid.dt();
  vf.values.assign(nt, std::vector<double>(n));
  detail::allocate_policy(vf, nt);
  for (std::size_t k = 0; k < n; ++k) {
    const double m = spec.M(grid.node(k));
    if (!std::isfinite(m)) throw NumericalError("solve_backward: terminal cost not finite");
    vf.values[nt - 1][k] = m;
  }
  const auto candidates = region.is_discrete()
                              ? std::vector<RVector>{}
                              : detail::box_candidates(region, opt.box_samples);
  std::vector<detail::NodeChoice> choice(n);
  for (std::size_t s = nt - 1; s-- > 0;) {
    const double t = grid.times[s + 1];
    const auto& next = vf.values[s + 1];
    parallel_for(n, opt.workers, [&](std::size_t k) {
      choice[k] = detail::choose(grid, next, k, t, dt, region, candidates, dyn,
                                 spec.L, opt);
    });
    auto& cur = vf.values[s];
    for (std::size_t k = 0; k < n; ++k) {
      cur[k] = next[k] - dt * choice[k].g;
      detail::store(vf, s, k, choice[k]);
      if (choice[k].degenerate) ++vf.degenerate_nodes;
    }
  }
  // The terminal slice reuses the last step's policy.
  if (region.is_discrete())
    vf.option[nt - 1] = vf.option[nt - 2];
  else
    vf.flat[nt - 1] = vf.flat[nt - 2];
  return vf;
}

/// {x : h(x) <= h_c} (or >= when `below` is false) is the target set.
struct ThresholdSpec {
  std::function<double(const RVector&)> h;
  double hc = 0.0;
  bool below = true;

  bool reached(const RVector& x) const { return below ? h(x) <= hc : h(x) >= hc; }
};

struct TimeOptimalOptions {
  double cfl = 0.9;        ///< pseudo-time step as a fraction of the stable step
  double tol = 1e-9;       ///< stop when max |max G - 1| <= tol off the target
  std::size_t max_iterations = 1000000;
  DpOptions dp;
};

/// Expected time to reach the threshold: value iteration on
/// V ← V - dτ (max_v G - 1) with V = 0 pinned on the target set.
inline ValueField solve_time_optimal(const Dynamics& dyn,
                                     const ControlRegion& region,
                                     const ThresholdSpec& threshold,
                                     const DpGrid& grid_in,
                                     const TimeOptimalOptions& opt = {}) {
  DpGrid grid = grid_in;
  grid.times = {0.0};
  grid.check(false);
  if (dyn.state_dim != grid.dim())
    throw DimensionError("solve_time_optimal: grid and dynamics dimensions differ");
  if (!threshold.h) throw DomainError("solve_time_optimal: threshold function missing");
  region.check();
  const std::size_t n = grid.node_count();
  ValueField vf;
  vf.grid = grid;
  vf.region = region;
  vf.stationary = true;
  vf.values.assign(1, std::vector<double>(n, 0.0));
  vf.pinned.assign(n, 0);
  std::size_t pinned = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (threshold.reached(grid.node(k))) {
      vf.pinned[k] = 1;
      ++pinned;
    }
  if (pinned == 0)
    throw DomainError("solve_time_optimal: threshold set does not meet the grid");
  detail::allocate_policy(vf, 1);
  const auto candidates = region.is_discrete()
                              ? std::vector<RVector>{}
                              : detail::box_candidates(region, opt.dp.box_samples);

  // Stable pseudo-time step from the largest stability number at dτ = 1.
  const auto probe = region.is_discrete() ? std::vector<RVector>{} : candidates;
  double rate = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const RVector x = grid.node(k);
    auto visit = [&](const ControlVector& v) {
      rate = std::max(rate, detail::node_g(grid, vf.values[0], k, x, 0.0, 1.0, v, dyn, {}).cfl);
    };
    if (region.is_discrete())
      for (const auto& v : region.discrete) visit(v);
    else
      for (const auto& c : probe) visit(region.at(c));
  }
  if (!(rate > 0)) throw DomainError("solve_time_optimal: dynamics never move the state");
  const double dtau = opt.cfl / rate;
  vf.pseudo_dt = dtau;

  DpOptions dpo = opt.dp;
  std::vector<detail::NodeChoice> choice(n);
  auto& V = vf.values[0];
  for (std::size_t it = 1; it <= opt.max_iterations; ++it) {
    parallel_for(n, dpo.workers, [&](std::size_t k) {
      if (vf.pinned[k]) return;
      choice[k] = detail::choose(grid, V, k, 0.0, dtau, region, candidates, dyn, {}, dpo);
    });
    double res = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      if (vf.pinned[k]) continue;
      const double r = choice[k].g - 1.0;
      res = std::max(res, std::abs(r));
      V[k] -= dtau * r;
    }
    vf.iterations = it;
    vf.residual = res;
    if (res <= opt.tol) break;
    if (it == opt.max_iterations)
      throw NumericalError("solve_time_optimal: no convergence after " +
                           std::to_string(it) + " iterations (residual " +
                           std::to_string(res) + ")");
  }
  vf.degenerate_nodes = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (vf.pinned[k]) continue;
    detail::store(vf, 0, k, choice[k]);
    if (choice[k].degenerate) ++vf.degenerate_nodes;
  }
  return vf;
}

inline ValueField ValueField::crop(const std::vector<std::size_t>& lo,
                                   const std::vector<std::size_t>& n) const {
  if (lo.size() != grid.axes.size() || n.size() != grid.axes.size())
    throw DimensionError("ValueField::crop: one range per axis");
  ValueField out = *this;
  for (int i = 0; i < grid.dim(); ++i) {
    const auto& a = grid.axes[static_cast<std::size_t>(i)];
    if (lo[static_cast<std::size_t>(i)] + n[static_cast<std::size_t>(i)] > a.size() ||
        n[static_cast<std::size_t>(i)] < 2)
      throw DomainError("ValueField::crop: range outside the grid");
    out.grid.axes[static_cast<std::size_t>(i)] =
        std::vector<double>(a.begin() + static_cast<long>(lo[static_cast<std::size_t>(i)]),
                            a.begin() + static_cast<long>(lo[static_cast<std::size_t>(i)] +
                                                          n[static_cast<std::size_t>(i)]));
  }
  const std::size_t m = out.grid.node_count();
  std::vector<std::size_t> map(m);
  for (std::size_t k = 0; k < m; ++k) {
    std::size_t src = 0;
    for (int i = 0; i < grid.dim(); ++i)
      src += (out.grid.coord(k, i) + lo[static_cast<std::size_t>(i)]) * grid.stride(i);
    map[k] = src;
  }
  for (std::size_t s = 0; s < values.size(); ++s) {
    out.values[s].resize(m);
    for (std::size_t k = 0; k < m; ++k) out.values[s][k] = values[s][map[k]];
  }
  for (std::size_t s = 0; s < option.size(); ++s) {
    out.option[s].resize(m);
    for (std::size_t k = 0; k < m; ++k) out.option[s][k] = option[s][map[k]];
  }
  for (std::size_t s = 0; s < flat.size(); ++s) {
    out.flat[s].resize(static_cast<Eigen::Index>(m), flat[s].cols());
    for (std::size_t k = 0; k < m; ++k)
      out.flat[s].row(static_cast<Eigen::Index>(k)) = flat[s].row(static_cast<Eigen::Index>(map[k]));
  }
  if (!pinned.empty()) {
    out.pinned.resize(m);
    for (std::size_t k = 0; k < m; ++k) out.pinned[k] = pinned[map[k]];
  }
  return out;
}

/// State feedback from the stored argmax at the nearest node and the slice
/// containing t.
inline ControlProtocol<RVector> extract_policy(const ValueField& vf) {
  if (vf.values.empty()) throw DomainError("extract_policy: empty value field");
  auto shared = std::make_shared<const ValueField>(vf);
  return ControlProtocol<RVector>::feedback(
      "dp-policy", [shared](double t, const RVector& x) {
        return shared->control(shared->slice_at(t), shared->nearest_node(x));
      });
}

// --------------------------------------------------------------- checks

struct BellmanOptions {
  double tol = 1e-3;  ///< relative to max(|V|, floor)
  double floor = 1e-12;
  int box_samples = 16;
  std::size_t slice_stride = 1;
};

struct BellmanReport {
  std::size_t nodes_checked = 0;
  double max_violation = 0.0;   ///< max (V - one-step cost under any v)+
  double max_policy_gap = 0.0;  ///< max |V - one-step cost under the policy|
  bool ok = true;

  nlohmann::json to_json() const {
    return {{"nodes_checked", nodes_checked},
            {"max_violation", max_violation},
            {"max_policy_gap", max_policy_gap},
            {"ok", ok}};
  }
};

/// V(x, t_k) <= L dt + E V(x', t_{k+1}) for every sampled v, with equality
/// at the stored policy. x' is one Euler step, and the expectation uses the
/// ±√m·dt^{1/2} column rule for m noise channels. Nodes whose successors
/// leave the grid are skipped. Stationary fields use dτ and a unit running
/// cost, with target nodes skipped.
inline BellmanReport bellman_check(const ValueField& vf, const Dynamics& dyn,
                                   const RunningCost& L,
                                   const BellmanOptions& opt = {}) {
  BellmanReport rep;
  const DpGrid& g = vf.grid;
  const std::size_t n = g.node_count();
  std::vector<ControlVector> sampled;
  if (vf.region.is_discrete())
    sampled = vf.region.discrete;
  else
    for (const auto& c : detail::box_candidates(vf.region, opt.box_samples))
      sampled.push_back(vf.region.at(c));
  auto one_step = [&](std::size_t next, const RVector& x, double t, double dt,
                      const ControlVector& v) -> std::optional<double> {
    const RVector A = dyn.a(t, x, v);
    const RVector x1 = x + dt * A;
    double run = vf.stationary ? dt : (L ? L(t, x, v) * dt : 0.0);
    if (dyn.noise_dim == 0) {
      auto val = vf.interpolate(next, x1);
      if (!val) return std::nullopt;
      return run + *val;
    }
    const RMatrix B = dyn.b(t, x, v);
    const double s = std::sqrt(static_cast<double>(dyn.noise_dim) * dt);
    double acc = 0.0;
    for (int j = 0; j < dyn.noise_dim; ++j)
      for (double sign : {1.0, -1.0}) {
        auto val = vf.interpolate(next, x1 + sign * s * B.col(j));
        if (!val) return std::nullopt;
        acc += *val;
      }
    return run + acc / (2.0 * dyn.noise_dim);
  };
  const std::size_t slices = vf.stationary ? 1 : vf.values.size() - 1;
  for (std::size_t s = 0; s < slices; s += std::max<std::size_t>(1, opt.slice_stride)) {
    const std::size_t next = vf.stationary ? 0 : s + 1;
    const double t = vf.stationary ? 0.0 : g.times[s + 1];
    const double dt = vf.stationary ? vf.pseudo_dt : g.dt();
    for (std::size_t k = 0; k < n; ++k) {
      if (vf.stationary && vf.pinned[k]) continue;
      const RVector x = g.node(k);
      const double V = vf.values[s][k];
      const double scale = std::max(std::abs(V), opt.floor);
      bool inside = true;
      double viol = 0.0;
      for (const auto& v : sampled) {
        auto q = one_step(next, x, t, dt, v);
        if (!q) {
          inside = false;
          break;
        }
        viol = std::max(viol, (V - *q) / scale);
      }
      if (!inside) continue;
      auto qp = one_step(next, x, t, dt, vf.control(s, k));
      if (!qp) continue;
      ++rep.nodes_checked;
      rep.max_violation = std::max(rep.max_violation, viol);
      rep.max_policy_gap = std::max(rep.max_policy_gap, std::abs(V - *qp) / scale);
    }
  }
  rep.ok = rep.nodes_checked > 0 && rep.max_violation <= opt.tol &&
           rep.max_policy_gap <= opt.tol;
  return rep;
}

// --------------------------------------------------------------- export

namespace detail {

inline std::string fmt12(double v) {
  std::ostringstream o;
  o << std::setprecision(12) << v;
  return o.str();
}

}  // namespace detail

/// Writes one CSV per slice (slice_0000.csv, ...) and manifest.json into
/// `dir`; returns the manifest path.
/// Writes one CSV per slice plus manifest.json. Keys of `meta` (for example
/// the state coordinates) are copied into the manifest.
inline std::filesystem::path export_value_field(const ValueField& vf,
                                                const std::filesystem::path& dir,
                                                const nlohmann::json& meta = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  const DpGrid& g = vf.grid;
  nlohmann::json man = meta.is_object() ? meta : nlohmann::json::object();
  man["kind"] = vf.stationary ? "stationary" : "time-dependent";
  man["axes"] = nlohmann::json::array();
  for (const auto& a : g.axes)
    man["axes"].push_back({{"lo", a.front()}, {"hi", a.back()}, {"n", a.size()}});
  if (!vf.stationary)
    man["times"] = {{"t0", g.times.front()}, {"T", g.times.back()}, {"n", g.times.size()}};
  man["policy"] = vf.region.is_discrete() ? "option" : "flat";
  if (vf.region.is_discrete()) {
    man["options"] = nlohmann::json::array();
    for (const auto& o : vf.region.discrete) {
      const RVector f = o.flat();
      man["options"].push_back(std::vector<double>(f.data(), f.data() + f.size()));
    }
  }
  man["degenerate_nodes"] = vf.degenerate_nodes;
  if (vf.stationary) {
    man["iterations"] = vf.iterations;
    man["residual"] = vf.residual;
  }
  man["slices"] = nlohmann::json::array();
  for (std::size_t s = 0; s < vf.values.size(); ++s) {
    std::ostringstream name;
    name << "slice_" << std::setw(4) << std::setfill('0') << s << ".csv";
    std::ofstream out(dir / name.str());
    if (!out) throw Error("export_value_field: cannot write " + (dir / name.str()).string());
    for (int i = 0; i < g.dim(); ++i) out << "x" << i + 1 << ",";
    out << "value";
    if (vf.region.is_discrete()) {
      out << ",option";
    } else {
      for (Eigen::Index j = 0; j < vf.region.lower.size(); ++j) out << ",u" << j + 1;
    }
    out << "\n";
    for (std::size_t k = 0; k < g.node_count(); ++k) {
      const RVector x = g.node(k);
      for (int i = 0; i < g.dim(); ++i) out << detail::fmt12(x(i)) << ",";
      out << detail::fmt12(vf.values[s][k]);
      if (vf.region.is_discrete()) {
        out << "," << vf.option[s][k];
      } else {
        for (Eigen::Index j = 0; j < vf.flat[s].cols(); ++j)
          out << "," << detail::fmt12(vf.flat[s](static_cast<Eigen::Index>(k), j));
      }
      out << "\n";
    }
    nlohmann::json sj{{"file", name.str()}};
    if (!vf.stationary) sj["t"] = g.times[s];
    man["slices"].push_back(sj);
  }
  const auto path = dir / "manifest.json";
  std::ofstream m(path);
  m << man.dump(2) << "\n";
  return path;
}

/// Scenario-file protocol block that replays an exported policy.
inline std::string policy_block(const std::filesystem::path& manifest) {
  std::ostringstream o;
  o << "protocol {\n"
    << "  kind = \"dp-policy\"\n"
    << "  manifest = \"" << manifest.generic_string() << "\"\n"
    << "}\n";
  return o.str();
}

/// Reads an exported field back; `region` supplies the control structure.
inline ValueField load_value_field(const std::filesystem::path& manifest,
                                   const ControlRegion& region) {
  std::ifstream in(manifest);
  if (!in) throw DomainError("load_value_field: cannot open " + manifest.string());
  nlohmann::json man;
  try {
    in >> man;
  } catch (const std::exception& e) {
    throw DomainError("load_value_field: bad manifest: " + std::string(e.what()));
  }
  ValueField vf;
  vf.region = region;
  vf.stationary = man.at("kind") == "stationary";
  for (const auto& a : man.at("axes"))
    vf.grid.axes.push_back(DpGrid::linspace(a.at("lo"), a.at("hi"), a.at("n")));
  if (vf.stationary)
    vf.grid.times = {0.0};
  else
    vf.grid.times = DpGrid::linspace(man["times"].at("t0"), man["times"].at("T"),
                                     man["times"].at("n"));
  const bool discrete = man.at("policy") == "option";
  if (discrete != region.is_discrete())
    throw DomainError("load_value_field: region kind does not match the export");
  const std::size_t n = vf.grid.node_count();
  const std::size_t slices = man.at("slices").size();
  vf.values.assign(slices, std::vector<double>(n));
  detail::allocate_policy(vf, slices);
  const auto dir = manifest.parent_path();
  for (std::size_t s = 0; s < slices; ++s) {
    const std::string file = man["slices"][s].at("file");
    std::ifstream csv(dir / file);
    if (!csv) throw DomainError("load_value_field: missing slice " + file);
    std::string line;
    std::getline(csv, line);
    for (std::size_t k = 0; k < n; ++k) {
      if (!std::getline(csv, line))
        throw DomainError("load_value_field: " + file + " is short");
      std::vector<double> cells;
      std::stringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) cells.push_back(std::stod(cell));
      const auto d = static_cast<std::size_t>(vf.grid.dim());
      if (cells.size() < d + 2)
        throw DomainError("load_value_field: " + file + " has too few columns");
      vf.values[s][k] = cells[d];
      if (discrete) {
        const int o = static_cast<int>(cells[d + 1]);
        if (o < 0 || o >= static_cast<int>(region.discrete.size()))
          throw DomainError("load_value_field: option index out of range in " + file);
        vf.option[s][k] = o;
      } else {
        for (Eigen::Index j = 0; j < vf.flat[s].cols(); ++j)
          vf.flat[s](static_cast<Eigen::Index>(k), j) = cells.at(d + 1 + static_cast<std::size_t>(j));
      }
    }
  }
  vf.degenerate_nodes = man.value("degenerate_nodes", std::size_t{0});
  return vf;
}

}  // namespace qfc
