#pragma once

// Second-order jets of piecewise-smooth cost fields, viscosity-solution
// checks and the enhanced verification theorem.
//
// Conventions: a jet (q, p, Q) is a super-jet of C at (x0, t0) when
//   C(x, t) - C(x0, t0) <= q Δt + p·Δx + ½ ΔxᵀQΔx + o(|Δt| + |Δx|²),
// so Q is a candidate Hessian. Time enters to first order only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfc/cost.hpp"
#include "qfc/dynamics.hpp"
#include "qfc/error.hpp"
#include "qfc/hjb.hpp"
#include "qfc/parallel.hpp"

namespace qfc {

struct Jet {
  double q = 0.0;
  RVector p;
  RMatrix Q;

  void check() const {
    if (Q.rows() != p.size() || Q.cols() != p.size())
      throw DimensionError("Jet: Q must be square with p's dimension");
    if ((Q - Q.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw InvariantError("Jet: Q is not symmetric");
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["q"] = q;
    j["p"] = vec_json(p);
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < Q.rows(); ++i) rows.push_back(vec_json(Q.row(i).transpose()));
    j["Q"] = rows;
    return j;
  }
};

enum class JetKind { super, sub };

/// `standard`: F <= tol on super-jets and F >= -tol on sub-jets, the
/// orientation under which classical solutions of -∂C/∂t + max G = 0 pass.
/// `printed` swaps the two inequalities.
enum class ViscosityOrientation { standard, printed };

/// A cost field made of smooth pieces that should join continuously.
/// Fields without time dependence (time_dependent = false) ignore t and q.
struct PiecewiseField {
  CostField field;
  bool time_dependent = true;
  double continuity_tol = 1e-9;

  int dim() const { return field.state_dim; }
};

struct JetOptions {
  double tol1 = 1e-9;  ///< first-order comparisons (absolute)
  double tol2 = 1e-7;  ///< second-order comparisons (absolute)
  double probe = 1e-6;  ///< relative displacement used to find the piece
  int random_directions = 64;
  std::uint64_t seed = 7;
};

struct Direction {
  double dt = 0.0;
  RVector dx;
};

/// One-sided Taylor data of the piece owning a set of approach directions.
struct Sector {
  int piece = 0;
  double value = 0.0;
  double dCdt = 0.0;
  RVector grad;
  RMatrix hess;
  std::vector<Direction> directions;
};

namespace detail {

/// Unit approach directions in (t, x): coordinate axes, pairwise diagonals,
/// and seeded random directions. Spatial-only directions come first.
inline std::vector<Direction> raw_directions(int n, bool with_time,
                                             const JetOptions& opt) {
  std::vector<Direction> out;
  auto add = [&](double dt, RVector dx) {
    const double norm = std::sqrt(dt * dt + dx.squaredNorm());
    if (norm == 0) return;
    out.push_back({dt / norm, dx / norm});
  };
  for (int i = 0; i < n; ++i)
    for (double s : {1.0, -1.0}) add(0.0, s * RVector::Unit(n, i));
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j)
      for (double si : {1.0, -1.0})
        for (double sj : {1.0, -1.0})
          add(0.0, si * RVector::Unit(n, i) + sj * RVector::Unit(n, j));
  std::mt19937_64 rng(opt.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  for (int k = 0; k < opt.random_directions && n > 1; ++k) {
    RVector dx(n);
    for (int i = 0; i < n; ++i) dx(i) = z(rng);
    add(0.0, dx);
  }
  if (with_time) {
    for (double s : {1.0, -1.0}) add(s, RVector::Zero(n));
    for (int i = 0; i < n; ++i)
      for (double s : {1.0, -1.0})
        for (double si : {1.0, -1.0}) add(s, si * RVector::Unit(n, i));
    for (int k = 0; k < opt.random_directions; ++k) {
      RVector dx(n);
      for (int i = 0; i < n; ++i) dx(i) = z(rng);
      add(z(rng), dx);
    }
  }
  return out;
}

inline double coordinate_scale(double v) {
  return std::max(std::abs(v), 1e-3);
}

}  // namespace detail

/// Splits the approach directions at (x, t) by the piece they enter and
/// returns each piece's one-sided value and derivatives there. Directions
/// are expressed in the displacement actually probed (coordinates scaled by
/// their magnitude), normalized.
inline std::vector<Sector> one_sided_expansions(const PiecewiseField& pf,
                                                const RVector& x, double t,
                                                const JetOptions& opt = {}) {
  const CostField& f = pf.field;
  if (x.size() != f.state_dim)
    throw DimensionError("one_sided_expansions: state has wrong dimension");
  const int n = f.state_dim;
  std::vector<Sector> sectors;
  auto sector_for = [&](int k) -> Sector& {
    for (auto& s : sectors)
      if (s.piece == k) return s;
    const auto q = query_cost_field(f, x, t, k);
    Sector s;
    s.piece = k;
    s.value = q.value;
    s.dCdt = pf.time_dependent ? q.dCdt : 0.0;
    s.grad = q.grad;
    s.hess = q.hess;
    if (!s.grad.allFinite() || !s.hess.allFinite() || !std::isfinite(s.dCdt))
      throw DomainError("one_sided_expansions: piece '" +
                        f.pieces[static_cast<std::size_t>(k)].name +
                        "' is not twice differentiable at the point");
    sectors.push_back(std::move(s));
    return sectors.back();
  };
  if (!f.at_kink(x, t)) {
    Sector& s = sector_for(f.piece_at(x, t));
    s.directions = detail::raw_directions(n, pf.time_dependent, opt);
    return sectors;
  }
  for (const Direction& d : detail::raw_directions(n, pf.time_dependent, opt)) {
    RVector step(n);
    for (int i = 0; i < n; ++i) step(i) = opt.probe * detail::coordinate_scale(x(i)) * d.dx(i);
    const double tstep = opt.probe * detail::coordinate_scale(t) * d.dt;
    const int k = f.piece_at(x + step, t + tstep);
    const double norm = std::sqrt(tstep * tstep + step.squaredNorm());
    sector_for(k).directions.push_back({tstep / norm, step / norm});
  }
  return sectors;
}

namespace detail {

/// Lexicographic jet test on precomputed sectors.
inline bool jet_member_in(const std::vector<Sector>& sectors, double value,
                          const Jet& jet, JetKind kind, const JetOptions& opt) {
  const double sign = kind == JetKind::super ? 1.0 : -1.0;
  for (const Sector& s : sectors) {
    // Zeroth order: a sector sitting above the point excludes super-jets.
    const double d0 = sign * (s.value - value);
    if (d0 > opt.tol1) return false;
    if (d0 < -opt.tol1) continue;
    for (const Direction& d : s.directions) {
      const double s1 = sign * ((jet.q - s.dCdt) * d.dt + (jet.p - s.grad).dot(d.dx));
      if (s1 > opt.tol1) continue;
      if (s1 < -opt.tol1) return false;
      // Along a direction with a time component the quadratic terms are
      // o(|Δt|).
      if (std::abs(d.dt) > 1e-12) continue;
      const RVector u = d.dx.normalized();
      const double s2 = sign * u.dot((jet.Q - s.hess) * u);
      if (s2 < -opt.tol2) return false;
    }
  }
  return true;
}

}  // namespace detail

/// Whether `jet` lies in J⁺ (super) or J⁻ (sub) of the field at (x, t).
inline bool jet_member(const PiecewiseField& pf, const RVector& x, double t,
                       const Jet& jet, JetKind kind,
                       const JetOptions& opt = {}) {
  jet.check();
  if (jet.p.size() != pf.dim())
    throw DimensionError("jet_member: jet has wrong dimension");
  const auto sectors = one_sided_expansions(pf, x, t, opt);
  const double value = pf.field.value(x, t);
  return detail::jet_member_in(sectors, value, jet, kind, opt);
}

// ------------------------------------------------------------ sampling

struct JetSampler {
  int samples = 1000;
  std::uint64_t seed = 1;
  /// Cap on member jets handed to the PDE functional per kind.
  int max_evaluations = 24;
};

namespace detail {

inline RMatrix psd_part(const RMatrix& m) {
  Eigen::SelfAdjointEigenSolver<RMatrix> es(0.5 * (m + m.transpose()));
  RVector ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// Candidate jets built from the one-sided data, filtered by membership.
/// Boundary candidates come first: each sector's first-order data paired
/// with each sector's Hessian and with the common Loewner bound of every
/// pair of Hessians; random convex combinations and bumps follow.
inline std::vector<Jet> sample_jets(const PiecewiseField& pf, const RVector& x,
                                    double t, JetKind kind,
                                    const JetSampler& sampler = {},
                                    const JetOptions& opt = {}) {
  const auto sectors = one_sided_expansions(pf, x, t, opt);
  const double value = pf.field.value(x, t);
  const int n = pf.dim();
  const double sign = kind == JetKind::super ? 1.0 : -1.0;

  std::vector<std::pair<double, RVector>> first;
  for (const auto& s : sectors) first.emplace_back(s.dCdt, s.grad);
  std::vector<RMatrix> second;
  for (const auto& s : sectors) second.push_back(s.hess);
  for (std::size_t a = 0; a < sectors.size(); ++a)
    for (std::size_t b = 0; b < sectors.size(); ++b)
      if (a != b)
        second.push_back(sectors[a].hess +
                         sign * detail::psd_part(sign * (sectors[b].hess - sectors[a].hess)));

  double scale = 1e-12;
  for (const auto& s : sectors)
    scale = std::max({scale, std::abs(s.dCdt), s.grad.cwiseAbs().maxCoeff(),
                      s.hess.size() ? s.hess.cwiseAbs().maxCoeff() : 0.0});

  std::vector<Jet> candidates;
  for (const auto& [q, p] : first)
    for (const auto& Q : second) candidates.push_back({q, p, Q});

  std::mt19937_64 rng(sampler.seed);
  std::normal_distribution<double> z(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto random_sym = [&](double s) {
    RMatrix r(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) r(i, j) = z(rng);
    return RMatrix(s * r * r.transpose());
  };
  while (static_cast<int>(candidates.size()) < sampler.samples) {
    // Convex combination of first-order data.
    std::vector<double> w(first.size());
    double total = 0.0;
    for (double& wi : w) total += (wi = -std::log(u(rng) + 1e-300));
    Jet j{0.0, RVector::Zero(n), RMatrix::Zero(n, n)};
    for (std::size_t k = 0; k < first.size(); ++k) {
      j.q += w[k] / total * first[k].first;
      j.p += w[k] / total * first[k].second;
    }
    const double mode = u(rng);
    if (mode < 0.25) {
      // Small first-order perturbation; usually rejected.
      j.q += 1e-3 * scale * z(rng);
      for (int i = 0; i < n; ++i) j.p(i) += 1e-3 * scale * z(rng);
    }
    const RMatrix& base =
        second[static_cast<std::size_t>(rng() % second.size())];
    const double mag = scale * std::pow(10.0, 4 * u(rng) - 2);
    j.Q = base + sign * random_sym(mag);
    candidates.push_back(std::move(j));
  }

  std::vector<Jet> members;
  for (const auto& c : candidates)
    if (detail::jet_member_in(sectors, value, c, kind, opt)) members.push_back(c);
  return members;
}

// ------------------------------------------------------- point checks

/// F(x, t, C, jet). The PDE reads F = 0.
using PdeFunctional =
    std::function<double(const RVector&, double, double, const Jet&)>;

/// F = -q + max_v G(x, v, p, Q).
inline PdeFunctional hjb_functional(const Dynamics& dyn,
                                    const ControlRegion& region,
                                    const RunningCost& L,
                                    const MaximizeOptions& opt = {}) {
  return [=](const RVector& x, double t, double, const Jet& j) {
    return -j.q + maximize_g(x, t, region, j.p, j.Q, dyn, L, opt).g;
  };
}

/// F = -q + G(x, v, p, Q) for one fixed control v.
inline PdeFunctional fixed_control_functional(const Dynamics& dyn,
                                              const ControlVector& v,
                                              const RunningCost& L) {
  return [=](const RVector& x, double t, double, const Jet& j) {
    return -j.q + g_value(x, v, j.p, j.Q, dyn, L, t);
  };
}

struct ViscosityOptions {
  double tol = 1e-6;          ///< relative to the local |∂C/∂t| scale
  double abs_floor = 1e-12;
  ViscosityOrientation orientation = ViscosityOrientation::standard;
  JetOptions jets;
  JetSampler sampler;
};

struct PointCheck {
  bool ok = true;
  bool smooth = true;
  bool continuous = true;
  int super_checked = 0;
  int sub_checked = 0;
  double worst = 0.0;  ///< largest violation relative to the scale
  std::optional<Jet> violating;
  std::string detail;
};

/// Viscosity test of F = 0 at one point. Smooth points use the classical
/// derivatives (|F| <= tol); kinks check continuity and then sampled
/// super- and sub-jets against the chosen orientation.
inline PointCheck viscosity_point_check(const PdeFunctional& F,
                                        const PiecewiseField& pf,
                                        const RVector& x, double t,
                                        const ViscosityOptions& opt = {}) {
  PointCheck out;
  const auto sectors = one_sided_expansions(pf, x, t, opt.jets);
  double scale = opt.abs_floor;
  for (const auto& s : sectors) scale = std::max(scale, std::abs(s.dCdt));
  const double value = pf.field.value(x, t);

  if (!pf.field.at_kink(x, t)) {
    const Sector& s = sectors.front();
    const double f = F(x, t, value, Jet{s.dCdt, s.grad, s.hess});
    out.worst = std::abs(f) / scale;
    out.ok = out.worst <= opt.tol;
    if (!out.ok) {
      out.violating = Jet{s.dCdt, s.grad, s.hess};
      out.detail = "classical residual " + std::to_string(f);
    }
    return out;
  }
  out.smooth = false;
  for (const auto& s : sectors)
    if (std::abs(s.value - value) > pf.continuity_tol) {
      out.ok = out.continuous = false;
      std::ostringstream d;
      d << "piece '" << pf.field.pieces[static_cast<std::size_t>(s.piece)].name
        << "' differs by " << s.value - value << " at the kink";
      out.detail = d.str();
      out.worst = std::abs(s.value - value) / std::max(std::abs(value), opt.abs_floor);
      return out;
    }

  const bool standard = opt.orientation == ViscosityOrientation::standard;
  for (JetKind kind : {JetKind::super, JetKind::sub}) {
    auto jets = sample_jets(pf, x, t, kind, opt.sampler, opt.jets);
    if (static_cast<int>(jets.size()) > opt.sampler.max_evaluations)
      jets.resize(static_cast<std::size_t>(opt.sampler.max_evaluations));
    // Standard orientation: super-jets need F <= tol, sub-jets F >= -tol.
    const double want = (kind == JetKind::super) == standard ? -1.0 : 1.0;
    for (const Jet& j : jets) {
      const double f = F(x, t, value, j);
      (kind == JetKind::super ? out.super_checked : out.sub_checked)++;
      const double violation = -want * f / scale;  // > 0 when violated
      if (violation > out.worst) out.worst = violation;
      if (violation > opt.tol && out.ok) {
        out.ok = false;
        out.violating = j;
        std::ostringstream d;
        d << (kind == JetKind::super ? "super" : "sub") << "-jet gives F = " << f;
        out.detail = d.str();
      }
    }
  }
  return out;
}

// ------------------------------------------------ enhanced verification

struct NominalPath {
  std::vector<double> times;
  std::vector<RVector> states;
};

struct EnhancedOptions {
  double tol = 1e-6;
  double abs_floor = 1e-12;
  double terminal_tol = 1e-9;
  ViscosityOptions viscosity;
  /// Extra functionals checked at kinks next to the full HJB one (e.g. the
  /// HJB equation of each observable a switching protocol alternates).
  std::vector<std::pair<std::string, PdeFunctional>> kink_functionals;
  /// Maximization used inside F at sampled jets.
  MaximizeOptions jet_maximize{4, {}};
  MaximizeOptions maximize;
  int max_kink_points = 16;
  int workers = 1;
};

namespace detail {

/// Root of the kink level on [ta, tb] at fixed x by bisection.
inline double kink_time(const CostField& f, const RVector& x, double ta,
                        double tb) {
  double la = f.kink_level(x, ta);
  for (int i = 0; i < 100 && tb - ta > 1e-15 * std::max(1.0, std::abs(tb)); ++i) {
    const double m = 0.5 * (ta + tb);
    const double lm = f.kink_level(x, m);
    if ((lm <= 0) == (la <= 0)) {
      ta = m;
      la = lm;
    } else {
      tb = m;
    }
  }
  return 0.5 * (ta + tb);
}

struct KinkPoint {
  RVector x;
  double t;
  std::string origin;
};

}  // namespace detail

/// Conditions: (1) C is a viscosity solution of the HJB equation with
/// C(x, T) = M(x), checked at grid nodes, at kink points located on the grid
/// and along the nominal path; (2) the protocol maximizes G along the
/// nominal path; (3) along the path some super-jet has q equal to G at the
/// protocol's control. (1) or (2) failing gives not-optimal; (3) failing
/// gives inconclusive.
inline VerificationReport verify_enhanced(
    const ControlProtocol<RVector>& protocol, const PiecewiseField& pf,
    const NominalPath& nominal, const StateTimeGrid& grid,
    const ControlRegion& region, const Dynamics& dyn, const RunningCost& L,
    const TerminalCost& M, const EnhancedOptions& opt = {}) {
  VerificationReport rep;
  rep.method = "enhanced";
  const CostField& f = pf.field;
  if (nominal.times.size() != nominal.states.size() || nominal.times.empty())
    throw DomainError("verify_enhanced: nominal path is empty or ragged");
  const std::size_t ns = grid.state_count(), nt = grid.times.size();
  if (ns == 0 || nt == 0) throw DomainError("verify_enhanced: empty grid");
  const double T = grid.times.back();
  auto rel = [&](double num, double a, double b) {
    return detail::rel(num, a, b, opt.abs_floor);
  };

  // ---- condition 1a: HJB at smooth grid nodes.
  std::vector<std::optional<NodeRecord>> recs(ns * nt);
  parallel_for(ns * nt, opt.workers, [&](std::size_t k) {
    const std::size_t s = k % ns, it = k / ns;
    const RVector x = grid.state(grid.index(s));
    const double t = grid.times[it];
    if (!grid.keep(x, t) || f.at_kink(x, t)) return;
    const auto q = query_cost_field(f, x, t);
    const ControlVector pv = protocol(t, x);
    NodeRecord r;
    r.x = x;
    r.t = t;
    r.dCdt = q.dCdt;
    r.g_protocol = g_value(x, pv, q.grad, q.hess, dyn, L, t);
    r.g_max = std::max(
        maximize_g(x, t, region, q.grad, q.hess, dyn, L, opt.maximize, &pv).g,
        r.g_protocol);
    r.residual = rel(std::abs(q.dCdt - r.g_max), q.dCdt, r.g_max);
    r.gap = rel(r.g_max - r.g_protocol, r.g_max, r.g_protocol);
    recs[k] = r;
  });
  bool grid_ok = true;
  for (auto& r : recs) {
    if (!r) continue;
    ++rep.nodes_checked;
    rep.hjb_residual_max = std::max(rep.hjb_residual_max, r->residual);
    if (r->residual > opt.tol) {
      grid_ok = false;
      std::ostringstream d;
      d << "dC/dt=" << r->dCdt << " max G=" << r->g_max;
      rep.witnesses.push_back({r->x, r->t, "hjb-residual", d.str(), r->residual});
    }
    rep.nodes.push_back(*r);
  }

  // ---- condition 1b: terminal condition.
  for (std::size_t s = 0; s < ns; ++s) {
    const RVector x = grid.state(grid.index(s));
    if (!grid.keep(x, T)) continue;
    const double gap = std::abs(f.value(x, T) - M(x));
    rep.terminal_gap = std::max(rep.terminal_gap, gap);
    if (gap > opt.terminal_tol)
      rep.witnesses.push_back({x, T, "terminal", "C(x,T) != M(x)", gap});
  }
  rep.terminal_ok = rep.terminal_gap <= opt.terminal_tol;

  // ---- kink points: on grid time lines and where the nominal path crosses.
  std::vector<detail::KinkPoint> kinks;
  if (f.pieces.size() > 1 && f.kink_level) {
    for (std::size_t s = 0; s < ns; ++s) {
      const RVector x = grid.state(grid.index(s));
      for (std::size_t it = 0; it + 1 < nt; ++it) {
        const double ta = grid.times[it], tb = grid.times[it + 1];
        if (!grid.keep(x, ta) || !grid.keep(x, tb)) continue;
        const double la = f.kink_level(x, ta), lb = f.kink_level(x, tb);
        if (std::abs(la) <= f.kink_tolerance)
          kinks.push_back({x, ta, "grid"});
        else if ((la < 0) != (lb < 0))
          kinks.push_back({x, detail::kink_time(f, x, ta, tb), "grid"});
      }
    }
    if (static_cast<int>(kinks.size()) > opt.max_kink_points) {
      std::vector<detail::KinkPoint> thin;
      const double stride = static_cast<double>(kinks.size()) / opt.max_kink_points;
      for (int i = 0; i < opt.max_kink_points; ++i)
        thin.push_back(kinks[static_cast<std::size_t>(i * stride)]);
      kinks.swap(thin);
    }
  }
  // Nominal samples, with kink crossings inserted.
  NominalPath path;
  for (std::size_t j = 0; j < nominal.times.size(); ++j) {
    if (j > 0 && f.pieces.size() > 1 && f.kink_level) {
      const double ta = nominal.times[j - 1], tb = nominal.times[j];
      const RVector &xa = nominal.states[j - 1], &xb = nominal.states[j];
      auto level = [&](double s) {
        return f.kink_level(xa + s * (xb - xa), ta + s * (tb - ta));
      };
      double la = level(0.0);
      if ((la < 0) != (level(1.0) < 0) && std::abs(la) > f.kink_tolerance) {
        double a = 0.0, b = 1.0;
        for (int i = 0; i < 100; ++i) {
          const double m = 0.5 * (a + b);
          const double lm = level(m);
          if ((lm < 0) == (la < 0)) {
            a = m;
            la = lm;
          } else {
            b = m;
          }
        }
        const double s = 0.5 * (a + b);
        const RVector xk = xa + s * (xb - xa);
        const double tk = ta + s * (tb - ta);
        path.times.push_back(tk);
        path.states.push_back(xk);
        kinks.push_back({xk, tk, "nominal"});
      }
    }
    path.times.push_back(nominal.times[j]);
    path.states.push_back(nominal.states[j]);
  }

  // ---- condition 1c: viscosity checks at kinks.
  std::vector<std::pair<std::string, PdeFunctional>> functionals;
  functionals.emplace_back("hjb", hjb_functional(dyn, region, L, opt.jet_maximize));
  for (const auto& fn : opt.kink_functionals) functionals.push_back(fn);
  bool kinks_ok = true, shortcut = !opt.kink_functionals.empty();
  nlohmann::json kink_json = nlohmann::json::array();
  std::vector<std::vector<PointCheck>> checks(kinks.size());
  parallel_for(kinks.size(), opt.workers, [&](std::size_t i) {
    for (const auto& [name, F] : functionals)
      checks[i].push_back(viscosity_point_check(F, pf, kinks[i].x, kinks[i].t,
                                                opt.viscosity));
  });
  for (std::size_t i = 0; i < kinks.size(); ++i) {
    const auto& kp = kinks[i];
    const auto sectors = one_sided_expansions(pf, kp.x, kp.t, opt.viscosity.jets);
    double first_order_gap = 0.0;
    for (const auto& s : sectors)
      first_order_gap = std::max({first_order_gap,
                                  std::abs(s.dCdt - sectors.front().dCdt),
                                  (s.grad - sectors.front().grad).cwiseAbs().maxCoeff()});
    if (first_order_gap > 1e-9) shortcut = false;
    nlohmann::json kj;
    kj["x"] = vec_json(kp.x);
    kj["t"] = kp.t;
    kj["origin"] = kp.origin;
    kj["first_order_gap"] = first_order_gap;
    for (std::size_t k = 0; k < functionals.size(); ++k) {
      const PointCheck& c = checks[i][k];
      nlohmann::json cj;
      cj["ok"] = c.ok;
      cj["continuous"] = c.continuous;
      cj["super_jets"] = c.super_checked;
      cj["sub_jets"] = c.sub_checked;
      cj["worst"] = c.worst;
      kj["functionals"][functionals[k].first] = cj;
      if (!c.continuous) {
        rep.continuity_ok = false;
        rep.max_discontinuity = std::max(rep.max_discontinuity, c.worst);
      }
      if (!c.ok) {
        kinks_ok = false;
        rep.witnesses.push_back({kp.x, kp.t, c.continuous ? "viscosity" : "continuity",
                                 functionals[k].first + ": " + c.detail, c.worst});
      }
    }
    kink_json.push_back(kj);
  }

  // ---- conditions 2 and 3 along the nominal path.
  struct PathRecord {
    double gap = 0.0;
    bool witness_found = false;
    std::optional<Jet> witness;
    bool on_kink = false;
  };
  std::vector<PathRecord> prs(path.times.size());
  parallel_for(path.times.size(), opt.workers, [&](std::size_t j) {
    const RVector& x = path.states[j];
    const double t = path.times[j];
    const ControlVector pv = protocol(t, x);
    PathRecord pr;
    pr.on_kink = f.at_kink(x, t);
    const auto sectors = one_sided_expansions(pf, x, t, opt.viscosity.jets);
    // Condition 2 with each piece's one-sided derivatives; at a kink one
    // adjacent piece has to pass.
    double best_gap = std::numeric_limits<double>::infinity();
    for (const auto& s : sectors) {
      const double gp = g_value(x, pv, s.grad, s.hess, dyn, L, t);
      const double gm = std::max(
          maximize_g(x, t, region, s.grad, s.hess, dyn, L, opt.maximize, &pv).g, gp);
      best_gap = std::min(best_gap, rel(gm - gp, gm, gp));
    }
    pr.gap = best_gap;
    // Condition 3: search the classical jets and sampled super-jets for
    // q = G(x, u, p, Q).
    std::vector<Jet> cands;
    if (!pr.on_kink) {
      const auto& s = sectors.front();
      cands.push_back({s.dCdt, s.grad, s.hess});
    } else {
      cands = sample_jets(pf, x, t, JetKind::super, opt.viscosity.sampler,
                          opt.viscosity.jets);
    }
    for (const Jet& c : cands) {
      const double g = g_value(x, pv, c.p, c.Q, dyn, L, t);
      if (rel(std::abs(c.q - g), c.q, g) <= opt.tol) {
        pr.witness_found = true;
        pr.witness = c;
        break;
      }
    }
    prs[j] = std::move(pr);
  });
  bool cond2 = true, cond3 = true;
  nlohmann::json witness_jets = nlohmann::json::array();
  for (std::size_t j = 0; j < prs.size(); ++j) {
    const auto& pr = prs[j];
    rep.g_gap_max = std::max(rep.g_gap_max, pr.gap);
    if (pr.gap > opt.tol) {
      cond2 = false;
      rep.witnesses.push_back({path.states[j], path.times[j], "protocol-gap",
                               "protocol does not maximize G on the nominal path",
                               pr.gap});
    }
    if (!pr.witness_found) {
      cond3 = false;
      rep.witnesses.push_back({path.states[j], path.times[j], "superjet",
                               "no super-jet with q = G(u) in the searched family",
                               0.0});
    } else if (pr.on_kink) {
      nlohmann::json wj = pr.witness->to_json();
      wj["t"] = path.times[j];
      wj["x"] = vec_json(path.states[j]);
      witness_jets.push_back(wj);
    }
  }
  rep.protocol_maximizes_G = cond2;

  const bool cond1 = grid_ok && rep.terminal_ok && kinks_ok;
  if (!cond1 || !cond2)
    rep.verdict = Verdict::not_optimal;
  else if (!cond3 || rep.nodes_checked == 0)
    rep.verdict = Verdict::inconclusive;
  else
    rep.verdict = Verdict::optimal;

  rep.extra["tol"] = opt.tol;
  rep.extra["orientation"] =
      opt.viscosity.orientation == ViscosityOrientation::standard ? "standard" : "printed";
  rep.extra["condition1"] = cond1;
  rep.extra["condition2"] = cond2;
  rep.extra["condition3"] = cond3;
  rep.extra["kinks"] = kink_json;
  rep.extra["kink_points"] = kinks.size();
  rep.extra["path_points"] = path.times.size();
  rep.extra["witness_jets"] = witness_jets;
  rep.extra["shortcut_applied"] = shortcut && !kinks.empty();
  return rep;
}

}  // namespace qfc
