#pragma once

// The G function, HJB residuals, control maximization and the classic
// verification procedure (continuity, HJB residual, terminal condition,
// protocol attains max G).

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
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

/// G = -1/2 Tr[Bᵀ hess B] - A·grad - L.
inline double g_value(const RVector& x, const ControlVector& v,
                      const RVector& grad, const RMatrix& hess,
                      const Dynamics& dyn, const RunningCost& L, double t) {
  if (x.size() != dyn.state_dim || grad.size() != dyn.state_dim ||
      hess.rows() != dyn.state_dim || hess.cols() != dyn.state_dim)
    throw DimensionError("g_value: inconsistent dimensions");
  double g = -dyn.a(t, x, v).dot(grad);
  if (dyn.noise_dim > 0) {
    const RMatrix B = dyn.b(t, x, v);
    g -= 0.5 * (B.transpose() * hess * B).trace();
  }
  if (L) g -= L(t, x, v);
  return g;
}

struct GMax {
  ControlVector v;
  double g = -std::numeric_limits<double>::infinity();
};

struct MaximizeOptions {
  int restarts = 20;
  NelderMeadOptions nm;
};

/// max over the region of G at fixed derivatives. Discrete regions are
/// enumerated; box regions use multi-start Nelder–Mead. `hint`, when given
/// and inside the region, seeds the first search.
inline GMax maximize_g(const RVector& x, double t, const ControlRegion& region,
                       const RVector& grad, const RMatrix& hess,
                       const Dynamics& dyn, const RunningCost& L,
                       const MaximizeOptions& opt = {},
                       const ControlVector* hint = nullptr) {
  GMax best;
  if (region.is_discrete()) {
    for (const auto& v : region.discrete) {
      const double g = g_value(x, v, grad, hess, dyn, L, t);
      if (g > best.g) best = {v, g};
    }
    return best;
  }
  auto f = [&](const RVector& flat) {
    return g_value(x, region.at(flat), grad, hess, dyn, L, t);
  };
  RVector start;
  const RVector* x0 = nullptr;
  if (hint && region.contains(*hint, 1e-9)) {
    start = hint->flat();
    x0 = &start;
  }
  const auto res =
      maximize_box(f, region.lower, region.upper, opt.restarts, x0, opt.nm);
  best.v = region.at(res.x);
  best.g = res.value;
  return best;
}

inline GMax maximize_g(const RVector& x, double t, const ControlRegion& region,
                       const CostField& field, const Dynamics& dyn,
                       const RunningCost& L, const MaximizeOptions& opt = {}) {
  const auto q = query_cost_field(field, x, t);
  return maximize_g(x, t, region, q.grad, q.hess, dyn, L, opt);
}

/// ∂C/∂t - max_v G at a smooth point of the field.
inline double hjb_residual(const CostField& field, const RVector& x, double t,
                           const ControlRegion& region, const Dynamics& dyn,
                           const RunningCost& L,
                           const MaximizeOptions& opt = {}) {
  const auto q = query_cost_field(field, x, t);
  return q.dCdt - maximize_g(x, t, region, q.grad, q.hess, dyn, L, opt).g;
}

// ------------------------------------------------------- time-optimal

/// Target set {x : h(x) <= h_c}; the cost is the expected time to reach it.
struct Threshold {
  std::function<double(const RVector&)> h;
  double h_c = 0.0;

  bool reached(const RVector& x, double eps = 1e-12) const {
    return h(x) <= h_c + eps;
  }
};

/// ∂C/∂t - (max_v G - 1) with G free of running cost. C = 0 on the
/// threshold set is a boundary condition, so queries there are rejected.
inline double hjb_residual_time_optimal(const CostField& field,
                                        const RVector& x, double t,
                                        const ControlRegion& region,
                                        const Dynamics& dyn,
                                        const Threshold& threshold,
                                        const MaximizeOptions& opt = {}) {
  if (threshold.reached(x))
    throw DomainError(
        "hjb_residual_time_optimal: point is on the threshold set, where "
        "C = 0 is imposed");
  const auto q = query_cost_field(field, x, t);
  const double g =
      maximize_g(x, t, region, q.grad, q.hess, dyn, RunningCost{}, opt).g;
  return q.dCdt - (g - 1.0);
}

// ------------------------------------------------ verification report

enum class Verdict { optimal, not_optimal, inconclusive };

inline std::string to_string(Verdict v) {
  switch (v) {
    case Verdict::optimal:
      return "optimal";
    case Verdict::not_optimal:
      return "not-optimal";
    case Verdict::inconclusive:
      return "inconclusive";
  }
  return "?";
}

struct Witness {
  RVector x;
  double t = 0.0;
  std::string check;
  std::string detail;
  double magnitude = 0.0;
};

struct NodeRecord {
  RVector x;
  double t = 0.0;
  double dCdt = 0.0;
  double g_max = 0.0;
  double g_protocol = 0.0;
  double residual = 0.0;  ///< relative |∂C/∂t - g_max|
  double gap = 0.0;       ///< relative g_max - g_protocol
  bool on_kink = false;
};

struct VerificationReport {
  std::string method = "classic";
  bool continuity_ok = true;
  double max_discontinuity = 0.0;
  double hjb_residual_max = 0.0;
  bool terminal_ok = true;
  double terminal_gap = 0.0;
  bool protocol_maximizes_G = true;
  double g_gap_max = 0.0;
  Verdict verdict = Verdict::inconclusive;
  std::vector<Witness> witnesses;
  std::vector<NodeRecord> nodes;
  std::size_t nodes_checked = 0;
  /// Method-specific extras (tolerances, condition flags, jets).
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json(std::size_t worst = 10) const;
};

inline nlohmann::json vec_json(const RVector& v) {
  auto a = nlohmann::json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

inline nlohmann::json VerificationReport::to_json(std::size_t worst) const {
  nlohmann::json j;
  j["method"] = method;
  j["verdict"] = to_string(verdict);
  j["continuity_ok"] = continuity_ok;
  j["max_discontinuity"] = max_discontinuity;
  j["hjb_residual_max"] = hjb_residual_max;
  j["terminal_ok"] = terminal_ok;
  j["terminal_gap"] = terminal_gap;
  j["protocol_maximizes_G"] = protocol_maximizes_G;
  j["g_gap_max"] = g_gap_max;
  j["nodes_checked"] = nodes_checked;
  auto w = nlohmann::json::array();
  for (const auto& x : witnesses)
    w.push_back({{"x", vec_json(x.x)},
                 {"t", x.t},
                 {"check", x.check},
                 {"detail", x.detail},
                 {"magnitude", x.magnitude}});
  j["witnesses"] = w;
  // Worst offenders by residual and by gap.
  auto pick = [&](auto key) {
    std::vector<const NodeRecord*> v;
    for (const auto& n : nodes) v.push_back(&n);
    std::sort(v.begin(), v.end(),
              [&](const NodeRecord* a, const NodeRecord* b) {
                return key(*a) > key(*b);
              });
    auto out = nlohmann::json::array();
    for (std::size_t i = 0; i < std::min(worst, v.size()); ++i)
      out.push_back({{"x", vec_json(v[i]->x)},
                     {"t", v[i]->t},
                     {"dCdt", v[i]->dCdt},
                     {"g_max", v[i]->g_max},
                     {"g_protocol", v[i]->g_protocol},
                     {"residual", v[i]->residual},
                     {"gap", v[i]->gap}});
    return out;
  };
  j["worst_residual_nodes"] = pick([](const NodeRecord& n) { return n.residual; });
  j["worst_gap_nodes"] = pick([](const NodeRecord& n) { return n.gap; });
  j["extra"] = extra;
  return j;
}

// ----------------------------------------------------------- grids

/// Rectangular state grid times a uniform time grid; `include` can drop
/// nodes outside the region of interest.
struct StateTimeGrid {
  std::vector<std::vector<double>> axes;
  std::vector<double> times;
  std::function<bool(const RVector&, double)> include;

  static std::vector<double> linspace(double a, double b, int n) {
    if (n < 1) throw DomainError("linspace: need n >= 1");
    std::vector<double> v(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = n == 1 ? a : a + (b - a) * i / (n - 1);
    return v;
  }

  std::size_t state_count() const {
    std::size_t n = 1;
    for (const auto& a : axes) n *= a.size();
    return n;
  }

  /// Multi-index of flat state node k (first axis fastest).
  std::vector<std::size_t> index(std::size_t k) const {
    std::vector<std::size_t> idx(axes.size());
    for (std::size_t d = 0; d < axes.size(); ++d) {
      idx[d] = k % axes[d].size();
      k /= axes[d].size();
    }
    return idx;
  }

  RVector state(const std::vector<std::size_t>& idx) const {
    RVector x(static_cast<Eigen::Index>(axes.size()));
    for (std::size_t d = 0; d < axes.size(); ++d)
      x(static_cast<Eigen::Index>(d)) = axes[d][idx[d]];
    return x;
  }

  bool keep(const RVector& x, double t) const { return !include || include(x, t); }
};

struct ClassicOptions {
  double tol = 1e-6;              ///< relative residual / gap tolerance
  double abs_floor = 1e-12;       ///< absolute scale floor for relative checks
  double terminal_tol = 1e-9;
  double jump_tol = 1e-6;         ///< minimum jump size for a discontinuity
  double ratio = 1.8;             ///< difference-quotient growth ratio
  bool check_continuity = true;
  MaximizeOptions maximize;
  int workers = 1;
};

namespace detail {

/// Derivative family checked for continuity: ∂C/∂t and the Hessian entries.
inline std::vector<double> second_order_data(const CostField& field,
                                             const RVector& x, double t) {
  const auto q = query_cost_field(field, x, t);
  std::vector<double> d{q.dCdt};
  for (Eigen::Index i = 0; i < q.hess.rows(); ++i)
    for (Eigen::Index j = i; j < q.hess.cols(); ++j) d.push_back(q.hess(i, j));
  return d;
}

struct JumpProbe {
  bool found = false;
  bool on_kink = false;
  RVector x;
  double t = 0.0;
  double jump = 0.0;
  std::size_t component = 0;
};

/// Ratio test on the segment (x0,t0) -> (x1,t1): difference quotients of
/// each derivative at h, h/2, h/4, following the half with the larger
/// variation. A jump shows quotients doubling with each halving.
inline JumpProbe probe_segment(const CostField& field, const RVector& x0,
                               double t0, const RVector& x1, double t1,
                               const ClassicOptions& opt) {
  JumpProbe out;
  auto data = [&](double s, std::vector<double>& d) {
    const RVector x = x0 + s * (x1 - x0);
    const double t = t0 + s * (t1 - t0);
    try {
      d = second_order_data(field, x, t);
      return true;
    } catch (const DomainError&) {
      out.found = out.on_kink = true;
      out.x = x;
      out.t = t;
      return false;
    }
  };
  std::vector<double> da, db;
  if (!data(0.0, da) || !data(1.0, db)) return out;
  for (std::size_t c = 0; c < da.size(); ++c) {
    double a = 0.0, b = 1.0;
    std::vector<double> fa = da, fb = db;
    std::vector<double> q;
    q.push_back(std::abs(fb[c] - fa[c]) / (b - a));
    for (int level = 0; level < 2; ++level) {
      const double m = 0.5 * (a + b);
      std::vector<double> fm;
      if (!data(m, fm)) return out;
      if (std::abs(fm[c] - fa[c]) >= std::abs(fb[c] - fm[c])) {
        b = m;
        fb = fm;
      } else {
        a = m;
        fa = fm;
      }
      q.push_back(std::abs(fb[c] - fa[c]) / (b - a));
    }
    const double jump = std::abs(fb[c] - fa[c]);
    const double scale = std::max({1.0, std::abs(fa[c]), std::abs(fb[c])});
    if (q[0] > 0 && q[1] > opt.ratio * q[0] && q[2] > opt.ratio * q[1] &&
        jump > opt.jump_tol * scale && jump > out.jump) {
      // Localize the jump by further bisection before reporting it.
      for (int level = 0; level < 48; ++level) {
        const double m = 0.5 * (a + b);
        std::vector<double> fm;
        if (!data(m, fm)) return out;
        if (std::abs(fm[c] - fa[c]) >= std::abs(fb[c] - fm[c])) {
          b = m;
          fb = fm;
        } else {
          a = m;
          fa = fm;
        }
      }
      out.found = true;
      out.jump = jump;
      out.component = c;
      const double s = 0.5 * (a + b);
      out.x = x0 + s * (x1 - x0);
      out.t = t0 + s * (t1 - t0);
    }
  }
  return out;
}

inline double rel(double num, double a, double b, double floor) {
  return num / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace detail

/// Classic verification of a protocol against a candidate cost-to-go.
/// Residual or protocol-gap failures give not-optimal; otherwise a
/// continuity failure gives inconclusive.
inline VerificationReport verify_classic(
    const ControlProtocol<RVector>& protocol, const CostField& field,
    const StateTimeGrid& grid, const ControlRegion& region, const Dynamics& dyn,
    const RunningCost& L, const TerminalCost& M,
    const ClassicOptions& opt = {}) {
  VerificationReport rep;
  rep.method = "classic";
  const std::size_t ns = grid.state_count();
  const std::size_t nt = grid.times.size();
  if (ns == 0 || nt == 0) throw DomainError("verify_classic: empty grid");
  const double T = grid.times.back();

  // Step 3 and 4 at every node.
  std::vector<std::optional<NodeRecord>> recs(ns * nt);
  std::vector<std::optional<Witness>> kinks(ns * nt);
  parallel_for(ns * nt, opt.workers, [&](std::size_t k) {
    const std::size_t s = k % ns, it = k / ns;
    const RVector x = grid.state(grid.index(s));
    const double t = grid.times[it];
    if (!grid.keep(x, t)) return;
    CostQuery q;
    try {
      q = query_cost_field(field, x, t);
    } catch (const DomainError& e) {
      kinks[k] = Witness{x, t, "continuity", e.what(), 0.0};
      return;
    }
    const ControlVector pv = protocol(t, x);
    NodeRecord r;
    r.x = x;
    r.t = t;
    r.dCdt = q.dCdt;
    r.g_protocol = g_value(x, pv, q.grad, q.hess, dyn, L, t);
    const GMax gm =
        maximize_g(x, t, region, q.grad, q.hess, dyn, L, opt.maximize, &pv);
    // The protocol value is itself a lower bound on the maximum.
    r.g_max = std::max(gm.g, r.g_protocol);
    r.residual = detail::rel(std::abs(q.dCdt - r.g_max), q.dCdt, r.g_max,
                             opt.abs_floor);
    r.gap = detail::rel(r.g_max - r.g_protocol, r.g_max, r.g_protocol,
                        opt.abs_floor);
    recs[k] = r;
  });
  for (std::size_t k = 0; k < recs.size(); ++k) {
    if (kinks[k]) {
      rep.continuity_ok = false;
      rep.witnesses.push_back(*kinks[k]);
    }
    if (!recs[k]) continue;
    const NodeRecord& r = *recs[k];
    ++rep.nodes_checked;
    if (r.residual > rep.hjb_residual_max) rep.hjb_residual_max = r.residual;
    if (r.gap > rep.g_gap_max) rep.g_gap_max = r.gap;
    if (r.residual > opt.tol) {
      std::ostringstream d;
      d << "dC/dt=" << r.dCdt << " max G=" << r.g_max;
      rep.witnesses.push_back({r.x, r.t, "hjb-residual", d.str(), r.residual});
    }
    if (r.gap > opt.tol) {
      std::ostringstream d;
      d << "protocol G=" << r.g_protocol << " max G=" << r.g_max;
      rep.witnesses.push_back({r.x, r.t, "protocol-gap", d.str(), r.gap});
    }
    rep.nodes.push_back(r);
  }
  rep.protocol_maximizes_G = rep.g_gap_max <= opt.tol;

  // Terminal condition on state nodes.
  for (std::size_t s = 0; s < ns; ++s) {
    const RVector x = grid.state(grid.index(s));
    if (!grid.keep(x, T)) continue;
    double c;
    try {
      c = field.value(x, T);
    } catch (const DomainError&) {
      continue;
    }
    const double gap = std::abs(c - M(x));
    rep.terminal_gap = std::max(rep.terminal_gap, gap);
    if (gap > opt.terminal_tol)
      rep.witnesses.push_back({x, T, "terminal", "C(x,T) != M(x)", gap});
  }
  rep.terminal_ok = rep.terminal_gap <= opt.terminal_tol;

  // Step 2: continuity along every grid edge (state axes and time).
  if (opt.check_continuity) {
    const std::size_t nd = grid.axes.size();
    std::vector<std::vector<detail::JumpProbe>> probes(ns * nt);
    parallel_for(ns * nt, opt.workers, [&](std::size_t k) {
      const std::size_t s = k % ns, it = k / ns;
      const auto idx = grid.index(s);
      const RVector x = grid.state(idx);
      const double t = grid.times[it];
      if (!grid.keep(x, t)) return;
      for (std::size_t d = 0; d <= nd; ++d) {
        RVector x1 = x;
        double t1 = t;
        if (d < nd) {
          if (idx[d] + 1 >= grid.axes[d].size()) continue;
          auto j = idx;
          ++j[d];
          x1 = grid.state(j);
        } else {
          if (it + 1 >= nt) continue;
          t1 = grid.times[it + 1];
        }
        if (!grid.keep(x1, t1)) continue;
        auto p = detail::probe_segment(field, x, t, x1, t1, opt);
        if (p.found) probes[k].push_back(std::move(p));
      }
    });
    for (const auto& list : probes)
      for (const auto& p : list) {
        rep.continuity_ok = false;
        rep.max_discontinuity = std::max(rep.max_discontinuity, p.jump);
        std::ostringstream d;
        if (p.on_kink)
          d << "derivatives undefined (registered kink)";
        else
          d << (p.component == 0 ? std::string("dC/dt")
                                 : "Hessian entry " + std::to_string(p.component - 1))
            << " jumps by " << p.jump;
        rep.witnesses.push_back({p.x, p.t, "continuity", d.str(), p.jump});
      }
  }

  const bool hjb_ok = rep.hjb_residual_max <= opt.tol && rep.terminal_ok;
  if (!hjb_ok || !rep.protocol_maximizes_G)
    rep.verdict = Verdict::not_optimal;
  else if (!rep.continuity_ok || rep.nodes_checked == 0)
    rep.verdict = Verdict::inconclusive;
  else
    rep.verdict = Verdict::optimal;
  rep.extra["tol"] = opt.tol;
  rep.extra["terminal_tol"] = opt.terminal_tol;
  rep.extra["restarts"] = opt.maximize.restarts;
  return rep;
}

}  // namespace qfc
