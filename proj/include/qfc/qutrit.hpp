#pragma once

// Qutrit state preparation in the good-control regime. The state is the pair
// of small eigenvalues (λ1, λ2) of ρ; λ0 = 1 - λ1 - λ2 is the target
// population. Feedback keeps the eigenbasis fixed, so observables are given
// directly in that basis.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <string>

#include "qfc/control.hpp"
#include "qfc/cost.hpp"
#include "qfc/dp.hpp"
#include "qfc/dynamics.hpp"
#include "qfc/error.hpp"
#include "qfc/hjb.hpp"
#include "qfc/qstate.hpp"
#include "qfc/viscosity.hpp"

namespace qfc::qutrit {

struct EigenState {
  double lambda1 = 0.0;
  double lambda2 = 0.0;

  double lambda0() const { return 1.0 - lambda1 - lambda2; }
  double delta() const { return lambda1 + lambda2; }
  RVector vec() const {
    RVector v(2);
    v << lambda1, lambda2;
    return v;
  }
  static EigenState from(const RVector& v) {
    if (v.size() != 2) throw DimensionError("EigenState: expected 2 values");
    return {v(0), v(1)};
  }

  bool ordered(double eps = 1e-12) const {
    return lambda0() >= lambda1 - eps && lambda1 >= lambda2 - eps &&
           lambda2 >= -eps;
  }
  bool good_control(double delta_max = 0.1) const {
    return ordered() && delta() <= delta_max;
  }
  void check(double delta_max = 0.1) const {
    if (!std::isfinite(lambda1) || !std::isfinite(lambda2))
      throw DomainError("EigenState: non-finite eigenvalue");
    if (!ordered())
      throw InvariantError("EigenState: need λ0 >= λ1 >= λ2 >= 0");
    if (delta() > delta_max)
      throw DomainError("EigenState: Δ = " + std::to_string(delta()) +
                        " exceeds the good-control bound " +
                        std::to_string(delta_max));
  }
};

struct QutritModel {
  double a = 0.1;
  double T = 1.0;
  double delta_max = 0.1;

  void check() const {
    if (!(a > 0) || !std::isfinite(a)) throw DomainError("qutrit: a must be > 0");
    if (!(T > 0) || !std::isfinite(T)) throw DomainError("qutrit: T must be > 0");
  }
  double rate() const { return 8 * a * a; }
  std::vector<double> spectrum() const { return {a, 0.0, -a}; }
};

// ------------------------------------------------------------ observables

/// X = a(|0><1| + |1><0|): couples the target to the larger error level.
inline UnitaryParams xmax_params(double a) {
  const double pi = std::numbers::pi;
  return {{pi / 4, 0.0, 0.0, 0.0, pi / 2, 0.0}, {a, 0.0, -a}};
}

/// X2 = a(|0><2| + |2><0|).
inline UnitaryParams x2_params(double a) {
  const double pi = std::numbers::pi;
  return {{0.0, 0.0, pi / 4, 0.0, 0.0, 0.0}, {a, 0.0, -a}};
}

inline ControlVector xmax_control(double a) {
  return ControlVector::observable(xmax_params(a));
}
inline ControlVector x2_control(double a) {
  return ControlVector::observable(x2_params(a));
}
/// Infinitely fast alternation between X and X2.
inline ControlVector fast_switch_control(double a) {
  ControlVector v = xmax_control(a);
  v.alternate = x2_params(a);
  return v;
}
/// X = diag(a, 0, -a) in the eigenbasis: measurement without rotation.
inline ControlVector diagonal_control(double a) {
  return ControlVector::observable(UnitaryParams::identity({a, 0.0, -a}));
}

/// Every U D U† with D = diag(a, 0, -a): Givens angles θ ∈ [0, π] and phases
/// φ ∈ [-π, π], spectrum held fixed.
inline ControlRegion unitary_region(double a) {
  const double pi = std::numbers::pi;
  UnitaryParams lo = UnitaryParams::identity({a, 0.0, -a});
  UnitaryParams hi = lo;
  for (std::size_t k = 0; k < lo.angles.size(); k += 2) {
    lo.angles[k] = 0.0;
    hi.angles[k] = pi;
    lo.angles[k + 1] = -pi;
    hi.angles[k + 1] = pi;
  }
  return ControlRegion::box(ControlVector::observable(lo),
                            ControlVector::observable(hi));
}

/// The two protocol observables and their balanced average, listed so that
/// ties resolve to the average.
inline ControlRegion restricted_region(double a) {
  return ControlRegion::finite(
      {xmax_control(a), x2_control(a), fast_switch_control(a)});
}

inline void check_spectrum(const CMatrix& X, double a) {
  if (X.rows() != 3 || X.cols() != 3)
    throw DimensionError("qutrit: observable must be 3x3");
  if (max_abs(X - X.adjoint()) > 1e-10)
    throw DomainError("qutrit: observable is not Hermitian");
  Eigen::SelfAdjointEigenSolver<CMatrix> es(X);
  const RVector ev = es.eigenvalues();  // ascending
  if (std::abs(ev(0) + a) > 1e-8 * std::max(1.0, a) ||
      std::abs(ev(1)) > 1e-8 * std::max(1.0, a) ||
      std::abs(ev(2) - a) > 1e-8 * std::max(1.0, a))
    throw DomainError("qutrit: observable spectrum is not {a, 0, -a}");
}

// --------------------------------------------------------------- dynamics

struct EigenRates {
  RVector drift;      // per unit time
  RVector diffusion;  // per √time, one Wiener process
};

/// Good-control eigenvalue equations for a measurement of X (matrix elements
/// in the current eigenbasis). The λ1λ2/(λ1-λ2) coupling is singular at
/// λ1 = λ2 unless X21 = 0.
inline EigenRates eigen_dynamics(const EigenState& s, const CMatrix& X) {
  if (X.rows() != 3 || X.cols() != 3)
    throw DimensionError("eigen_dynamics: observable must be 3x3");
  const double l1 = s.lambda1, l2 = s.lambda2;
  const double x10 = std::norm(X(1, 0)), x20 = std::norm(X(2, 0)),
               x21 = std::norm(X(2, 1));
  double coupling = 0.0;
  if (x21 > 1e-28) {
    if (std::abs(l1 - l2) <= 1e-12)
      throw DomainError(
          "eigen_dynamics: λ1 = λ2 with X21 != 0 (use fast switching)");
    coupling = x21 * l1 * l2 / (l1 - l2);
  }
  EigenRates r{RVector(2), RVector(2)};
  r.drift(0) = -8 * (x10 * l1 - coupling);
  r.drift(1) = -8 * (x20 * l2 + coupling);
  const double s8 = std::sqrt(8.0);
  r.diffusion(0) = s8 * (X(0, 0).real() - X(1, 1).real()) * l1;
  r.diffusion(1) = s8 * (X(0, 0).real() - X(2, 2).real()) * l2;
  return r;
}

/// Averaged drift of infinitely fast X/X2 alternation.
inline RVector fast_switch_dynamics(const EigenState& s, double a) {
  RVector d(2);
  d << -4 * a * a * s.lambda1, -4 * a * a * s.lambda2;
  return d;
}

/// (λ1, λ2) dynamics for the generic layers. A relaxed control averages the
/// generators of its two observables: drifts are averaged and each
/// observable drives its own noise column scaled by 1/√2, so BBᵀ is averaged
/// too. With `relabel` the projection keeps λ1 >= λ2 by swapping labels, so
/// X always addresses the currently larger error level; without it labels
/// follow the eigenvectors through a crossing.
inline Dynamics eigen_system(const QutritModel& m, bool relabel = true) {
  m.check();
  Dynamics d;
  d.state_dim = 2;
  d.noise_dim = 2;
  const double a = m.a;
  auto rates = [a](const RVector& x, const UnitaryParams& p) {
    // U D U† keeps the spectrum of D, so checking D suffices.
    std::vector<double> d = p.diag;
    std::sort(d.begin(), d.end());
    if (d.size() != 3 || std::abs(d[0] + a) > 1e-12 * a ||
        std::abs(d[1]) > 1e-12 * a || std::abs(d[2] - a) > 1e-12 * a)
      throw DomainError("qutrit: observable spectrum is not {a, 0, -a}");
    // Callers cycle through a handful of observables (one in simulations,
    // a few options in DP), so a small ring of recent ones avoids rebuilding
    // the matrix.
    struct Slot {
      UnitaryParams p;
      CMatrix X;
    };
    thread_local std::array<Slot, 4> cache;
    thread_local std::size_t next = 0;
    for (const Slot& s : cache)
      if (s.X.size() != 0 && s.p == p) return eigen_dynamics(EigenState::from(x), s.X);
    Slot& s = cache[next];
    next = (next + 1) % cache.size();
    s.p = p;
    s.X = observable_from(p).matrix();
    return eigen_dynamics(EigenState::from(x), s.X);
  };
  d.drift = [rates](double, const RVector& x, const ControlVector& v) {
    RVector A = rates(x, v.obs).drift;
    if (v.alternate) A = 0.5 * (A + rates(x, *v.alternate).drift);
    return A;
  };
  d.diffusion = [rates](double, const RVector& x, const ControlVector& v) {
    RMatrix B = RMatrix::Zero(2, 2);
    if (v.alternate) {
      B.col(0) = rates(x, v.obs).diffusion / std::sqrt(2.0);
      B.col(1) = rates(x, *v.alternate).diffusion / std::sqrt(2.0);
    } else {
      B.col(0) = rates(x, v.obs).diffusion;
    }
    return B;
  };
  d.project = [relabel](const RVector& x) {
    RVector y = x.cwiseMax(0.0);
    if (relabel && y(1) > y(0)) std::swap(y(0), y(1));
    return y;
  };
  return d;
}

/// Same dynamics in y = ln λ (Itô). Under the protocol observables the
/// drift is constant and the diffusion vanishes.
inline Dynamics log_eigen_system(const QutritModel& m) {
  Dynamics base = eigen_system(m);
  Dynamics d;
  d.state_dim = 2;
  d.noise_dim = 2;
  auto to_lambda = [](const RVector& y) { return RVector(y.array().exp()); };
  d.drift = [base, to_lambda](double t, const RVector& y, const ControlVector& v) {
    const RVector l = to_lambda(y);
    const RVector A = base.a(t, l, v);
    const RMatrix B = base.b(t, l, v);
    RVector out(2);
    for (int i = 0; i < 2; ++i)
      out(i) = A(i) / l(i) - 0.5 * B.row(i).squaredNorm() / (l(i) * l(i));
    return out;
  };
  d.diffusion = [base, to_lambda](double t, const RVector& y,
                                  const ControlVector& v) {
    const RVector l = to_lambda(y);
    RMatrix B = base.b(t, l, v);
    for (int i = 0; i < 2; ++i) B.row(i) /= l(i);
    return B;
  };
  return d;
}

// ------------------------------------------------------------- cost field

/// τ = ln(λ1/λ2)/(8a²): time for the X protocol to bring λ1 down to λ2.
/// Infinite when λ2 = 0 (regime 1 for ever).
inline double switching_time(double l1, double l2, double a) {
  if (!(a > 0)) throw DomainError("switching_time: a must be > 0");
  if (l2 < 0 || l1 < l2)
    throw DomainError("switching_time: need λ1 >= λ2 >= 0");
  if (l2 == 0) return std::numeric_limits<double>::infinity();
  return std::log(l1 / l2) / (8 * a * a);
}

/// Regime 1 means the horizon is reached before λ1 meets λ2.
inline bool in_regime1(double l1, double l2, double t, double T, double a,
                       double slack = 1e-12) {
  return T - t <= switching_time(l1, l2, a) + slack * std::max(1.0, T);
}

inline double cost_plus(double l1, double l2, double t, double T, double a) {
  if (!in_regime1(l1, l2, t, T, a))
    throw DomainError("cost_plus: (λ1, λ2, t) is outside regime 1");
  return l1 * std::exp(-8 * a * a * (T - t)) + l2;
}

inline double cost_minus(double l1, double l2, double t, double T, double a) {
  if (T - t < switching_time(l1, l2, a) - 1e-12 * std::max(1.0, T))
    throw DomainError("cost_minus: (λ1, λ2, t) is outside regime 2");
  return 2 * std::sqrt(l1 * l2) * std::exp(-4 * a * a * (T - t));
}

/// C⁺ in regime 1, C⁻ otherwise; λ1 and λ2 are sorted first.
inline double cost_piecewise(double l1, double l2, double t, double T,
                             double a) {
  if (l1 < l2) std::swap(l1, l2);
  return in_regime1(l1, l2, t, T, a) ? cost_plus(l1, l2, t, T, a)
                                     : cost_minus(l1, l2, t, T, a);
}

/// C⁺ with closed-form derivatives. `coef2` scales the λ2 term (1 for the
/// true field).
inline FieldPiece plus_piece(const QutritModel& m, double coef2 = 1.0) {
  const double r = m.rate(), T = m.T;
  FieldPiece p;
  p.name = "C+";
  p.value = [=](const RVector& x, double t) {
    return x(0) * std::exp(-r * (T - t)) + coef2 * x(1);
  };
  p.dt = [=](const RVector& x, double t) {
    return r * x(0) * std::exp(-r * (T - t));
  };
  p.grad = [=](const RVector&, double t) {
    RVector g(2);
    g << std::exp(-r * (T - t)), coef2;
    return g;
  };
  p.hess = [](const RVector&, double) { return RMatrix(RMatrix::Zero(2, 2)); };
  return p;
}

/// C⁻ = coef √(λ1λ2) e^{-4a²(T-t)}; coef = 2 for the true field.
inline FieldPiece minus_piece(const QutritModel& m, double coef = 2.0) {
  const double r = 4 * m.a * m.a, T = m.T;
  auto val = [=](const RVector& x, double t) {
    return coef * std::sqrt(x(0) * x(1)) * std::exp(-r * (T - t));
  };
  FieldPiece p;
  p.name = "C-";
  p.value = val;
  p.dt = [=](const RVector& x, double t) { return r * val(x, t); };
  p.grad = [=](const RVector& x, double t) {
    const double c = val(x, t);
    RVector g(2);
    g << c / (2 * x(0)), c / (2 * x(1));
    return g;
  };
  p.hess = [=](const RVector& x, double t) {
    const double c = val(x, t);
    RMatrix h(2, 2);
    h << -c / (4 * x(0) * x(0)), c / (4 * x(0) * x(1)),
        c / (4 * x(0) * x(1)), -c / (4 * x(1) * x(1));
    return h;
  };
  return p;
}

inline CostField plus_field(const QutritModel& m, double coef2 = 1.0) {
  return CostField::smooth(2, plus_piece(m, coef2), m.T);
}

namespace detail {

/// Evaluates a piece on sorted (λ1, λ2) and maps derivatives back.
inline FieldPiece symmetrized(FieldPiece p) {
  auto sorted = [](const RVector& x) {
    RVector y = x;
    if (y(1) > y(0)) std::swap(y(0), y(1));
    return y;
  };
  FieldPiece s;
  s.name = p.name;
  s.value = [=](const RVector& x, double t) { return p.value(sorted(x), t); };
  s.dt = [=](const RVector& x, double t) { return p.dt(sorted(x), t); };
  s.grad = [=](const RVector& x, double t) {
    RVector g = p.grad(sorted(x), t);
    if (x(1) > x(0)) std::swap(g(0), g(1));
    return g;
  };
  s.hess = [=](const RVector& x, double t) {
    RMatrix h = p.hess(sorted(x), t);
    if (x(1) > x(0)) {
      std::swap(h(0, 0), h(1, 1));
    }
    return h;
  };
  return s;
}

}  // namespace detail

/// {C⁺, C⁻} with the kink on T - t = τ(λ1, λ2). Symmetric under exchange of
/// λ1 and λ2; needs λ1, λ2 > 0.
inline CostField piecewise_field(const QutritModel& m, double minus_coef = 2.0,
                                 double plus_coef2 = 1.0) {
  CostField f;
  f.state_dim = 2;
  f.horizon = m.T;
  f.pieces = {detail::symmetrized(plus_piece(m, plus_coef2)),
              detail::symmetrized(minus_piece(m, minus_coef))};
  const double a = m.a, T = m.T;
  f.kink_level = [=](const RVector& x, double t) {
    return (T - t) - switching_time(std::max(x(0), x(1)),
                                    std::min(x(0), x(1)), a);
  };
  f.select = [level = f.kink_level](const RVector& x, double t) {
    return level(x, t) <= 0 ? 0 : 1;
  };
  return f;
}

inline TerminalCost terminal_delta() {
  return [](const RVector& x) { return x(0) + x(1); };
}

// ------------------------------------------------------------- protocols

/// X in the current eigenbasis at all times.
inline ControlProtocol<RVector> xmax_protocol(double a) {
  return ControlProtocol<RVector>::constant(xmax_control(a));
}

/// X while λ1 > λ2, then fast X/X2 alternation.
inline ControlProtocol<RVector> fast_switch_protocol(double a,
                                                     double eps = 1e-12) {
  return ControlProtocol<RVector>::feedback(
      "qutrit-fast-switch", [a, eps](double, const RVector& x) {
        return x(0) > x(1) * (1 + eps) ? xmax_control(a)
                                       : fast_switch_control(a);
      });
}

/// X until `factor` times the natural switch time from (s0, t0), then fast
/// alternation. With factor > 1 it is meant for eigen_system(m, false), so X
/// keeps acting on the λ1 level after it drops below λ2.
inline ControlProtocol<RVector> late_switch_protocol(const QutritModel& m,
                                                     const EigenState& s0,
                                                     double t0, double factor) {
  const double ts = t0 + factor * switching_time(s0.lambda1, s0.lambda2, m.a);
  return ControlProtocol<RVector>::switching(
      {ts}, {xmax_control(m.a), fast_switch_control(m.a)});
}

// ------------------------------------------------------------ objectives

struct RegimeObjectives {
  double g1 = 0.0;  // with C⁺
  double g2 = 0.0;  // with C⁻
};

/// G(X) for both pieces in closed form. Regime 1 needs λ1 != λ2 when
/// X21 != 0.
inline RegimeObjectives g_regime_objectives(const EigenState& s, double t,
                                            const QutritModel& m,
                                            const CMatrix& X) {
  check_spectrum(X, m.a);
  const double l1 = s.lambda1, l2 = s.lambda2;
  const double e = std::exp(-m.rate() * (m.T - t));
  const double x10 = std::norm(X(1, 0)), x20 = std::norm(X(2, 0)),
               x21 = std::norm(X(2, 1));
  RegimeObjectives g;
  double cross = 0.0;
  if (x21 > 1e-28) {
    if (std::abs(l1 - l2) <= 1e-12)
      throw DomainError("g_regime_objectives: λ1 = λ2 with X21 != 0");
    cross = 8 * (l1 * l2 / (l1 - l2)) * x21 * (1 - e);
  }
  g.g1 = 8 * (l1 * x10 * e + l2 * x20) + cross;
  const double cm = 2 * std::sqrt(l1 * l2) * std::exp(-4 * m.a * m.a * (m.T - t));
  const double d = X(1, 1).real() - X(2, 2).real();
  g.g2 = d * d * cm + 4 * (x10 + x20 + x21) * cm;
  return g;
}

struct Regime1Constants {
  double eta = 0.0;
  double xi = 0.0;
  bool ordered = false;  // η > 1 > ξ
};

/// η = λ1 e^{-8a²(T-t)}/λ2 and ξ = η(e^{8a²(T-t)} - 1)/(λ1/λ2 - 1).
inline Regime1Constants regime1_constants(const EigenState& s, double t,
                                          const QutritModel& m) {
  const double l1 = s.lambda1, l2 = s.lambda2;
  if (!(l2 > 0) || !(l1 > l2))
    throw DomainError("regime1_constants: need λ1 > λ2 > 0");
  const double r = m.rate() * (m.T - t);
  Regime1Constants c;
  c.eta = l1 * std::exp(-r) / l2;
  c.xi = c.eta * std::expm1(r) / (l1 / l2 - 1);
  c.ordered = c.eta > 1 && c.xi < 1;
  return c;
}

/// F(X) = 8λ2[η|X10|² + |X20|² + ξ|X21|²].
inline double reduced_objective(const EigenState& s, double t,
                                const QutritModel& m, const CMatrix& X) {
  const auto c = regime1_constants(s, t, m);
  return 8 * s.lambda2 *
         (c.eta * std::norm(X(1, 0)) + std::norm(X(2, 0)) +
          c.xi * std::norm(X(2, 1)));
}

// ---------------------------------------------------------- verification

/// λ1 = λ2 is a singular line of the drift; path points on it are moved
/// this far (relative) into λ1 > λ2, the one-sided limit.
inline constexpr double degenerate_nudge = 1e-9;

/// Switching-protocol trajectory from (s0, t0) to T in the noise-free
/// eigenvalue picture: X until λ1 meets λ2, then the fast-switch decay.
inline NominalPath nominal_path(const QutritModel& m, const EigenState& s0,
                                double t0, int samples) {
  m.check();
  s0.check();
  if (samples < 2) throw DomainError("nominal_path: need at least 2 samples");
  if (!(t0 < m.T)) throw DomainError("nominal_path: t0 must precede T");
  const double r = m.rate();
  const double ts = t0 + switching_time(s0.lambda1, s0.lambda2, m.a);
  NominalPath path;
  for (int i = 0; i < samples; ++i) {
    const double t = t0 + (m.T - t0) * i / (samples - 1);
    RVector x(2);
    if (t < ts) {
      x << s0.lambda1 * std::exp(-r * (t - t0)), s0.lambda2;
    } else {
      const double l = s0.lambda2 * std::exp(-0.5 * r * (t - ts));
      x << l * (1 + degenerate_nudge), l;
    }
    path.times.push_back(t);
    path.states.push_back(x);
  }
  return path;
}

struct QutritVerifyOptions {
  double tol = 1e-6;
  std::size_t grid = 11;  ///< nodes per axis, (λ1, λ2, t)
  /// Nelder–Mead restarts for max G at grid nodes; the protocol's control
  /// seeds the first run.
  int restarts = 4;
  int path_samples = 201;
  double minus_coef = 2.0;  ///< C⁻ coefficient, 2 for the true cost
  bool enhanced = true;
  int workers = 1;
};

/// Grid over λ1 in [max(1.05 λ2₀, λ1₀/2), λ1₀], λ2 in [λ2₀/2, λ2₀] and
/// t in [t0, T], restricted to λ1 > λ2 and the good-control regime.
inline StateTimeGrid qutrit_grid(const QutritModel& m, const EigenState& s0,
                                 double t0, std::size_t n, bool regime1_only) {
  if (n < 2) throw DomainError("qutrit_grid: need at least 2 nodes per axis");
  const double lo1 = std::max(1.05 * s0.lambda2, 0.5 * s0.lambda1);
  if (!(lo1 < s0.lambda1))
    throw DomainError("qutrit_grid: λ1₀ too close to λ2₀ for a grid");
  StateTimeGrid g;
  g.axes = {StateTimeGrid::linspace(lo1, s0.lambda1, n),
            StateTimeGrid::linspace(0.5 * s0.lambda2, s0.lambda2, n)};
  g.times = StateTimeGrid::linspace(t0, m.T, n);
  g.include = [m, regime1_only](const RVector& x, double t) {
    if (!(x(0) > x(1) * (1 + 1e-6)) || x(0) + x(1) > m.delta_max) return false;
    return !regime1_only || in_regime1(x(0), x(1), t, m.T, m.a);
  };
  return g;
}

struct QutritVerification {
  bool within_bound = false;  ///< T <= t0 + τ(λ1₀, λ2₀)
  VerificationReport classic;       ///< regime-1 nodes, protocol X
  VerificationReport classic_full;  ///< full horizon, switching protocol
  std::optional<VerificationReport> enhanced;
  double xi_max = 0.0;
  std::size_t xi_violations = 0;
  double reduction_gap = 0.0;  ///< max |G1 - F| at regime-1 nodes
  VerificationReport summary() const;
};

/// Classic verification on regime 1 and enhanced verification of the
/// switching protocol on the full horizon, plus the ξ < 1 and G1 = F checks
/// at regime-1 nodes.
inline QutritVerification verify_qutrit_detailed(
    const QutritModel& m, const EigenState& s0, double t0 = 0.0,
    const QutritVerifyOptions& opt = {}) {
  m.check();
  s0.check();
  if (!s0.good_control(m.delta_max))
    throw DomainError("verify_qutrit: initial state outside the good-control regime");
  if (!(s0.lambda1 > s0.lambda2) || !(s0.lambda2 > 0))
    throw DomainError("verify_qutrit: need λ1₀ > λ2₀ > 0");
  QutritVerification out;
  out.within_bound = in_regime1(s0.lambda1, s0.lambda2, t0, m.T, m.a);

  const Dynamics dyn = eigen_system(m);
  const ControlRegion region = unitary_region(m.a);
  const RunningCost L;
  const TerminalCost M = terminal_delta();
  const CostField field = piecewise_field(m, opt.minus_coef);

  ClassicOptions copt;
  copt.tol = opt.tol;
  copt.maximize.restarts = opt.restarts;
  copt.workers = opt.workers;

  const StateTimeGrid g1 = qutrit_grid(m, s0, t0, opt.grid, true);
  out.classic = verify_classic(xmax_protocol(m.a), field, g1, region, dyn, L, M, copt);

  // ξ and the G1 = F identity at regime-1 nodes, with random observables.
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> angle(-std::numbers::pi, std::numbers::pi);
  for (const auto& node : out.classic.nodes) {
    const EigenState s{node.x(0), node.x(1)};
    if (std::abs(m.T - node.t) < 1e-14) continue;
    const auto c = regime1_constants(s, node.t, m);
    out.xi_max = std::max(out.xi_max, c.xi);
    if (!c.ordered) ++out.xi_violations;
    UnitaryParams u = UnitaryParams::identity({m.a, 0.0, -m.a});
    for (double& th : u.angles) th = angle(rng);
    const CMatrix X = observable_from(u).matrix();
    const double g = g_regime_objectives(s, node.t, m, X).g1;
    out.reduction_gap = std::max(out.reduction_gap,
                                 std::abs(g - reduced_objective(s, node.t, m, X)) /
                                     std::max(std::abs(g), 1e-300));
  }

  const auto protocol = fast_switch_protocol(m.a, 1e-8);
  const StateTimeGrid gf = qutrit_grid(m, s0, t0, opt.grid, false);
  out.classic_full = verify_classic(protocol, field, gf, region, dyn, L, M, copt);

  if (opt.enhanced) {
    EnhancedOptions eopt;
    eopt.tol = opt.tol;
    eopt.maximize.restarts = opt.restarts;
    eopt.workers = opt.workers;
    eopt.kink_functionals = {
        {"X", fixed_control_functional(dyn, xmax_control(m.a), L)},
        {"X2", fixed_control_functional(dyn, x2_control(m.a), L)}};
    out.enhanced = verify_enhanced(protocol, PiecewiseField{field},
                                   nominal_path(m, s0, t0, opt.path_samples),
                                   gf, region, dyn, L, M, eopt);
  }
  return out;
}

/// Overall verdict: the classic one when T is inside the regime-1 bound,
/// otherwise the enhanced one. Sub-reports go to `extra`.
inline VerificationReport QutritVerification::summary() const {
  VerificationReport r =
      within_bound || !enhanced ? classic : *enhanced;
  r.method = "qutrit";
  nlohmann::json extra;
  extra["within_regime1_bound"] = within_bound;
  extra["classic"] = classic.to_json();
  extra["classic_full_horizon"] = classic_full.to_json();
  if (enhanced) extra["enhanced"] = enhanced->to_json();
  extra["xi_max"] = xi_max;
  extra["xi_violations"] = xi_violations;
  extra["reduction_gap"] = reduction_gap;
  r.extra = extra;
  return r;
}

inline VerificationReport verify_qutrit(const QutritModel& m,
                                        const EigenState& s0, double t0 = 0.0,
                                        const QutritVerifyOptions& opt = {}) {
  return verify_qutrit_detailed(m, s0, t0, opt).summary();
}

// -------------------------------------------------------------------- DP

struct QutritDpOptions {
  std::size_t nodes = 101;  ///< per axis, inside the reported window
  std::size_t steps = 100;
  double lambda_max = 0.05;
  int workers = 1;
};

struct QutritDpResult {
  /// Solution on the window, in y = ln λ coordinates.
  ValueField field;
  std::size_t pad = 0;
  double max_rel_error = 0.0;  ///< vs the piecewise C⁺/C⁻ over all slices
  /// Largest |offset| in cells between the recovered X / fast-switch
  /// boundary and λ1 e^{-8a²(T-t)} = λ2.
  double worst_boundary_offset = 0.0;
  std::size_t boundary_rows = 0;

  nlohmann::json to_json() const {
    return {{"max_rel_error", max_rel_error},
            {"worst_boundary_offset_cells", worst_boundary_offset},
            {"boundary_rows", boundary_rows},
            {"degenerate_nodes", field.degenerate_nodes},
            {"pad", pad}};
  }
};

/// Backward DP over the restricted set {X, X2, fast switch} in log
/// coordinates. The step is chosen so that X moves the state exactly one
/// cell (8a² dt = h); the window [λmax e^{-h(n-1)}, λmax]² is padded by
/// `steps` cells on the inflow side so that the edge closure cannot reach
/// it, and cropped afterwards.
inline QutritDpResult qutrit_dp(const QutritModel& m,
                                const QutritDpOptions& opt = {}) {
  m.check();
  if (opt.nodes < 3 || opt.steps < 1)
    throw DomainError("qutrit_dp: need at least 3 nodes and 1 step");
  if (!(opt.lambda_max > 0) || 2 * opt.lambda_max > 1)
    throw DomainError("qutrit_dp: lambda_max out of range");
  const double r = m.rate();
  const double h = r * m.T / static_cast<double>(opt.steps);
  const std::size_t pad = opt.steps, total = opt.nodes + pad;
  const double ymax = std::log(opt.lambda_max);
  DpGrid grid;
  const auto axis = DpGrid::linspace(ymax - h * static_cast<double>(total - 1), ymax, total);
  grid.axes = {axis, axis};
  grid.times = DpGrid::linspace(0.0, m.T, opt.steps + 1);

  CostSpec<RVector> spec;
  spec.T = m.T;
  spec.M = [](const RVector& y) { return std::exp(y(0)) + std::exp(y(1)); };
  DpOptions dpo;
  dpo.workers = opt.workers;
  const ValueField full =
      solve_backward(log_eigen_system(m), spec, restricted_region(m.a), grid, dpo);

  QutritDpResult out;
  out.pad = pad;
  out.field = full.crop({pad, pad}, {opt.nodes, opt.nodes});
  const ValueField& vf = out.field;
  const auto& y = vf.grid.axes[0];
  const std::size_t n = opt.nodes;
  for (std::size_t s = 0; s < vf.values.size(); ++s) {
    const double t = vf.grid.times[s];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const double exact = cost_piecewise(std::exp(y[i]), std::exp(y[j]), t, m.T, m.a);
        const double v = vf.values[s][i * n + j];
        out.max_rel_error = std::max(out.max_rel_error, std::abs(v - exact) / exact);
      }
  }
  // Policy k is chosen at t_{k+1}. Along each row λ2 = e^{y_j}, X should
  // take over above y* = y_j + 8a²(T - t_{k+1}).
  for (std::size_t s = 0; s + 1 < vf.values.size(); ++s) {
    const double t = vf.grid.times[s + 1];
    for (std::size_t j = 0; j < n; ++j) {
      const double ystar = y[j] + r * (m.T - t);
      if (!(ystar > y[j]) || ystar > y[n - 1] - h) continue;
      std::size_t first = n;
      for (std::size_t i = j + 1; i < n; ++i)
        if (vf.option[s][i * n + j] == 0) {
          first = i;
          break;
        }
      double offset;
      if (first == n)
        offset = (y[n - 1] + h - ystar) / h;
      else
        offset = (0.5 * (y[first] + y[first - 1]) - ystar) / h;
      ++out.boundary_rows;
      if (std::abs(offset) > std::abs(out.worst_boundary_offset))
        out.worst_boundary_offset = offset;
    }
  }
  return out;
}

}  // namespace qfc::qutrit
