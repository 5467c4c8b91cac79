#pragma once

// Cost functionals, Monte Carlo cost-to-go estimates and queryable cost
// fields C(x, t).

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfc/control.hpp"
#include "qfc/dynamics.hpp"
#include "qfc/error.hpp"
#include "qfc/parallel.hpp"
#include "qfc/sde.hpp"

namespace qfc {

template <class State>
struct CostSpec {
  std::function<double(double, const State&, const ControlVector&)> L;
  std::function<double(const State&)> M;
  double T = 1.0;

  void check() const {
    if (!(T > 0.0)) throw DomainError("CostSpec: horizon must be positive");
  }
};

namespace detail {

template <class State>
double riemann_cost(const std::vector<double>& times,
                    const std::vector<State>& states,
                    const std::vector<ControlVector>& controls,
                    const CostSpec<State>& spec) {
  spec.check();
  if (states.empty() || times.size() != states.size() ||
      controls.size() + 1 != states.size())
    throw DomainError("path_cost: malformed trajectory");
  if (std::abs(times.back() - spec.T) > 1e-9 * std::max(1.0, spec.T))
    throw DomainError("path_cost: trajectory ends at " +
                      std::to_string(times.back()) + ", horizon is " +
                      std::to_string(spec.T));
  double j = 0.0;
  if (spec.L)
    for (std::size_t s = 0; s + 1 < states.size(); ++s)
      j += spec.L(times[s], states[s], controls[s]) * (times[s + 1] - times[s]);
  if (spec.M) j += spec.M(states.back());
  return j;
}

}  // namespace detail

/// Left-Riemann sum of L plus M at the endpoint for one realization.
inline double path_cost(const TrajectoryRecord& traj,
                        const CostSpec<DensityMatrix>& spec) {
  return detail::riemann_cost(traj.times, traj.states, traj.controls, spec);
}

inline double path_cost(const StatePath& path, const CostSpec<RVector>& spec) {
  return detail::riemann_cost(path.times, path.states, path.controls, spec);
}

struct CostEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n_traj = 0;
  std::uint64_t base_seed = 0;

  nlohmann::json to_json() const {
    return {{"mean", mean},
            {"stderr", std_error},
            {"n_traj", n_traj},
            {"base_seed", base_seed}};
  }
};

inline CostEstimate summarize(const std::vector<double>& samples,
                              std::uint64_t base_seed) {
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double s : samples) mean += s;
  mean /= n;
  double ss = 0.0;
  for (double s : samples) ss += (s - mean) * (s - mean);
  const double se = samples.size() > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
  return {mean, se, samples.size(), base_seed};
}

struct MonteCarloOptions {
  std::size_t n_traj = 1000;
  std::uint64_t base_seed = 1;
  double dt = 1e-3;
  int workers = 1;
};

/// Mean and standard error of the path cost from (x0, t0). Trajectory i uses
/// NoiseStream(base_seed, i), so two protocols estimated with the same
/// options share their noise (common random numbers).
inline CostEstimate estimate_cost_to_go(const RVector& x0, double t0,
                                        const ControlProtocol<RVector>& protocol,
                                        const CostSpec<RVector>& spec,
                                        const Dynamics& dyn,
                                        const MonteCarloOptions& opt) {
  spec.check();
  if (opt.n_traj < 2) throw DomainError("estimate_cost_to_go: n_traj < 2");
  if (x0.size() != dyn.state_dim || !x0.allFinite())
    throw DomainError("estimate_cost_to_go: invalid initial state");
  if (!(t0 < spec.T) || t0 < 0.0)
    throw DomainError("estimate_cost_to_go: need 0 <= t0 < T");
  std::vector<double> samples(opt.n_traj);
  parallel_for(opt.n_traj, opt.workers, [&](std::size_t i) {
    const auto path = simulate_sde(dyn, protocol, x0, t0, spec.T, opt.dt,
                                   NoiseStream(opt.base_seed, i));
    samples[i] = path_cost(path, spec);
  });
  return summarize(samples, opt.base_seed);
}

inline CostEstimate estimate_cost_to_go(
    const DensityMatrix& rho0, double t0,
    const ControlProtocol<DensityMatrix>& protocol,
    const CostSpec<DensityMatrix>& spec, const SmeModel& model,
    const MonteCarloOptions& opt) {
  spec.check();
  if (opt.n_traj < 2) throw DomainError("estimate_cost_to_go: n_traj < 2");
  if (!(t0 < spec.T) || t0 < 0.0)
    throw DomainError("estimate_cost_to_go: need 0 <= t0 < T");
  std::vector<double> samples(opt.n_traj);
  parallel_for(opt.n_traj, opt.workers, [&](std::size_t i) {
    auto rec = simulate_trajectory(protocol, rho0, spec.T - t0, opt.dt,
                                   NoiseStream(opt.base_seed, i), model);
    for (double& t : rec.times) t += t0;
    samples[i] = path_cost(rec, spec);
  });
  return summarize(samples, opt.base_seed);
}

/// Paired difference cost(p1) - cost(p2) on common random numbers.
inline CostEstimate compare_protocols(const RVector& x0, double t0,
                                      const ControlProtocol<RVector>& p1,
                                      const ControlProtocol<RVector>& p2,
                                      const CostSpec<RVector>& spec,
                                      const Dynamics& dyn,
                                      const MonteCarloOptions& opt) {
  spec.check();
  if (opt.n_traj < 2) throw DomainError("compare_protocols: n_traj < 2");
  std::vector<double> diff(opt.n_traj);
  parallel_for(opt.n_traj, opt.workers, [&](std::size_t i) {
    const double c1 = path_cost(simulate_sde(dyn, p1, x0, t0, spec.T, opt.dt,
                                             NoiseStream(opt.base_seed, i)),
                                spec);
    const double c2 = path_cost(simulate_sde(dyn, p2, x0, t0, spec.T, opt.dt,
                                             NoiseStream(opt.base_seed, i)),
                                spec);
    diff[i] = c1 - c2;
  });
  return summarize(diff, opt.base_seed);
}

// ----------------------------------------------------------- cost fields

/// One smooth piece of a cost field. Missing derivative callbacks are
/// replaced by finite differences of `value`.
struct FieldPiece {
  using Scalar = std::function<double(const RVector&, double)>;
  using Vector = std::function<RVector(const RVector&, double)>;
  using Matrix = std::function<RMatrix(const RVector&, double)>;

  std::string name;
  Scalar value;
  Scalar dt;
  Vector grad;
  Matrix hess;
};

struct CostQuery {
  double value = 0.0;
  double dCdt = 0.0;
  RVector grad;
  RMatrix hess;
  int piece = 0;
};

/// C(x, t) as one or more smooth pieces. With several pieces, `select`
/// names the piece owning (x, t) and `kink_level` vanishes on the interface
/// between pieces; queries within `kink_tolerance` of it must name a piece.
struct CostField {
  int state_dim = 0;
  double horizon = std::numeric_limits<double>::infinity();
  std::vector<FieldPiece> pieces;
  std::function<int(const RVector&, double)> select;
  std::function<double(const RVector&, double)> kink_level;
  double kink_tolerance = 1e-9;

  static CostField smooth(int dim, FieldPiece piece,
                          double horizon = std::numeric_limits<double>::infinity()) {
    CostField f;
    f.state_dim = dim;
    f.horizon = horizon;
    f.pieces.push_back(std::move(piece));
    return f;
  }

  int piece_at(const RVector& x, double t) const {
    if (pieces.empty()) throw DomainError("CostField: no pieces");
    if (pieces.size() == 1 || !select) return 0;
    const int k = select(x, t);
    if (k < 0 || k >= static_cast<int>(pieces.size()))
      throw DomainError("CostField: selector returned invalid piece");
    return k;
  }

  bool at_kink(const RVector& x, double t) const {
    return pieces.size() > 1 && kink_level &&
           std::abs(kink_level(x, t)) <= kink_tolerance;
  }

  double value(const RVector& x, double t) const {
    return pieces[static_cast<std::size_t>(piece_at(x, t))].value(x, t);
  }
};

inline double fd_step(double x) { return std::max(1e-4, 1e-4 * std::abs(x)); }

inline RVector fd_gradient(const FieldPiece::Scalar& f, const RVector& x,
                           double t) {
  RVector g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double h = fd_step(x(i));
    RVector xp = x, xm = x;
    xp(i) += h;
    xm(i) -= h;
    g(i) = (f(xp, t) - f(xm, t)) / (2 * h);
  }
  return g;
}

inline RMatrix fd_hessian(const FieldPiece::Scalar& f, const RVector& x,
                          double t) {
  const Eigen::Index n = x.size();
  RMatrix H(n, n);
  const double f0 = f(x, t);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double hi = fd_step(x(i));
    RVector xp = x, xm = x;
    xp(i) += hi;
    xm(i) -= hi;
    H(i, i) = (f(xp, t) - 2 * f0 + f(xm, t)) / (hi * hi);
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double hj = fd_step(x(j));
      RVector pp = x, pm = x, mp = x, mm = x;
      pp(i) += hi; pp(j) += hj;
      pm(i) += hi; pm(j) -= hj;
      mp(i) -= hi; mp(j) += hj;
      mm(i) -= hi; mm(j) -= hj;
      H(i, j) = H(j, i) =
          (f(pp, t) - f(pm, t) - f(mp, t) + f(mm, t)) / (4 * hi * hj);
    }
  }
  return H;
}

/// Central difference in t, switching to a one-sided stencil when the
/// forward point would pass the horizon.
inline double fd_time_derivative(const FieldPiece::Scalar& f, const RVector& x,
                                 double t, double horizon) {
  const double h = fd_step(t);
  if (t + h <= horizon) return (f(x, t + h) - f(x, t - h)) / (2 * h);
  return (3 * f(x, t) - 4 * f(x, t - h) + f(x, t - 2 * h)) / (2 * h);
}

/// Value and derivatives at (x, t). `piece` selects a piece explicitly
/// (one-sided mode); without it, a query on a registered kink is an error.
inline CostQuery query_cost_field(const CostField& field, const RVector& x,
                                  double t,
                                  std::optional<int> piece = std::nullopt) {
  if (x.size() != field.state_dim)
    throw DimensionError("query_cost_field: state has wrong dimension");
  if (!x.allFinite() || !std::isfinite(t))
    throw DomainError("query_cost_field: non-finite query point");
  int k;
  if (piece) {
    k = *piece;
    if (k < 0 || k >= static_cast<int>(field.pieces.size()))
      throw DomainError("query_cost_field: no such piece");
  } else {
    if (field.at_kink(x, t))
      throw DomainError(
          "query_cost_field: point lies on a registered kink; choose a piece");
    k = field.piece_at(x, t);
  }
  const FieldPiece& p = field.pieces[static_cast<std::size_t>(k)];
  CostQuery q;
  q.piece = k;
  q.value = p.value(x, t);
  q.dCdt = p.dt ? p.dt(x, t) : fd_time_derivative(p.value, x, t, field.horizon);
  q.grad = p.grad ? p.grad(x, t) : fd_gradient(p.value, x, t);
  q.hess = p.hess ? p.hess(x, t) : fd_hessian(p.value, x, t);
  if (q.grad.size() != x.size() || q.hess.rows() != x.size() ||
      q.hess.cols() != x.size())
    throw DimensionError("query_cost_field: derivative has wrong shape");
  return q;
}

/// Same field with every closed-form derivative dropped, so that queries use
/// finite differences.
inline CostField finite_difference_view(CostField f) {
  for (auto& p : f.pieces) {
    p.dt = nullptr;
    p.grad = nullptr;
    p.hess = nullptr;
  }
  return f;
}

/// max |C(x, T) - M(x)| over the given states.
inline double terminal_gap(const CostField& field,
                           const std::function<double(const RVector&)>& M,
                           const std::vector<RVector>& xs, double T) {
  double gap = 0.0;
  for (const auto& x : xs)
    gap = std::max(gap, std::abs(field.value(x, T) - M(x)));
  return gap;
}

}  // namespace qfc
