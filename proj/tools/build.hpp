#pragma once

// Scenario blocks to library objects. Every failure is reported against the
// line of the entry that caused it.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "qfc/cost.hpp"
#include "qfc/dp.hpp"
#include "qfc/parallel.hpp"
#include "qfc/qutrit.hpp"
#include "qfc/scenario.hpp"
#include "qfc/sde.hpp"

namespace qfc::cli {

struct Flags {
  std::optional<std::uint64_t> seed;
  std::optional<double> tol;
  std::vector<std::size_t> grid;
  int workers = default_workers();
  std::filesystem::path out;
};

inline std::string model_kind(const Scenario& s) {
  return s.choice("/model/kind", {"sme", "qutrit", "drift1d"});
}

inline std::uint64_t seed(const Scenario& s, const Flags& f) {
  if (f.seed) return *f.seed;
  const auto v = s.integer("/rng/seed");
  if (v < 0) s.fail("/rng/seed", "must be non-negative");
  return static_cast<std::uint64_t>(v);
}

inline std::size_t count(const Scenario& s, const std::string& ptr, std::int64_t fallback,
                         std::int64_t min = 1) {
  const auto v = s.integer(ptr, fallback);
  if (v < min) s.fail(ptr, "must be at least " + std::to_string(min));
  return static_cast<std::size_t>(v);
}

/// Grid size: --grid overrides the scenario's grid.nodes.
inline std::size_t grid_nodes(const Scenario& s, const Flags& f, std::int64_t fallback,
                              std::size_t axis = 0) {
  if (!f.grid.empty()) return f.grid[std::min(axis, f.grid.size() - 1)];
  if (s.has("/grid/nodes") && s.at("/grid/nodes").is_array()) {
    const auto v = s.numbers("/grid/nodes");
    const double n = v[std::min(axis, v.size() - 1)];
    if (n < 2 || n != std::floor(n)) s.fail("/grid/nodes", "node counts must be integers >= 2");
    return static_cast<std::size_t>(n);
  }
  return count(s, "/grid/nodes", fallback, 2);
}

inline double tolerance(const Scenario& s, const Flags& f, double fallback) {
  return f.tol ? *f.tol : s.positive("/verify/tol", fallback);
}

// ------------------------------------------------------------- controls

inline UnitaryParams unitary_params(const Scenario& s, const std::string& ptr) {
  UnitaryParams p;
  p.diag = s.numbers(ptr + "/diag");
  const auto need = UnitaryParams::angle_count(p.dim());
  if (s.has(ptr + "/angles")) {
    p.angles = s.numbers(ptr + "/angles");
    if (p.angles.size() != need)
      s.fail(ptr + "/angles", "expected " + std::to_string(need) + " angles for dimension " +
                                  std::to_string(p.dim()));
  } else {
    p.angles.assign(need, 0.0);
  }
  return p;
}

inline ControlVector control_vector(const Scenario& s, const std::string& ptr) {
  ControlVector v;
  if (s.has(ptr + "/mu")) {
    const auto mu = s.numbers(ptr + "/mu");
    v.mu = RVector::Map(mu.data(), static_cast<Eigen::Index>(mu.size()));
  } else {
    v.mu = RVector(0);
  }
  if (s.has(ptr + "/observable")) v.obs = unitary_params(s, ptr + "/observable");
  if (s.has(ptr + "/alternate")) v.alternate = unitary_params(s, ptr + "/alternate");
  return v;
}

/// Protocol kinds shared by every state type: constant and time-switching.
template <class State>
std::optional<ControlProtocol<State>> open_loop_protocol(const Scenario& s) {
  const std::string kind =
      s.choice("/protocol/kind", {"constant", "switching", "feedback", "dp-policy"});
  if (kind == "constant") return ControlProtocol<State>::constant(control_vector(s, "/protocol/control"));
  if (kind == "switching") {
    const auto times = s.numbers("/protocol/times");
    std::vector<ControlVector> controls;
    for (std::size_t i = 0; i <= times.size(); ++i)
      controls.push_back(control_vector(s, "/protocol/control" + std::to_string(i)));
    return s.guarded("/protocol/times",
                     [&] { return ControlProtocol<State>::switching(times, controls); });
  }
  return std::nullopt;
}

inline std::filesystem::path resolve(const Scenario& s, const std::string& ptr) {
  std::filesystem::path p = s.string(ptr);
  if (p.is_relative()) p = std::filesystem::path(s.source()).parent_path() / p;
  return p;
}

/// Replays an exported DP policy. Fields solved in log coordinates are
/// queried at ln x.
inline ControlProtocol<RVector> dp_policy(const Scenario& s, const ControlRegion& region) {
  const auto manifest = resolve(s, "/protocol/manifest");
  const ValueField vf =
      s.guarded("/protocol/manifest", [&] { return load_value_field(manifest, region); });
  nlohmann::json man;
  std::ifstream(manifest) >> man;
  const auto inner = extract_policy(vf);
  if (man.value("coordinates", std::string("identity")) != "log") return inner;
  return ControlProtocol<RVector>::feedback("dp-policy", [inner](double t, const RVector& x) {
    return inner(t, RVector(x.array().max(1e-300).log()));
  });
}

// ------------------------------------------------------------------ SME

inline SmeModel sme_model(const Scenario& s) {
  SmeModel m;
  if (s.has("/model/h0")) m.h0 = s.observable("/model/h0");
  if (s.has("/model/h_basis")) {
    const auto& arr = s.at("/model/h_basis");
    if (!arr.is_array()) s.fail("/model/h_basis", "expected an array of matrices");
    for (std::size_t i = 0; i < arr.size(); ++i)
      m.h_basis.push_back(s.observable("/model/h_basis/" + std::to_string(i)));
  }
  if (s.has("/model/c")) m.c = s.matrix("/model/c");
  m.gamma = s.number("/model/gamma", 0.0);
  if (m.gamma < 0) s.fail("/model/gamma", "must be non-negative");
  m.k = s.positive("/model/k", 1.0);
  m.convention = s.choice("/model/convention", {"printed", "standard"}, "printed") == "printed"
                     ? DissipatorConvention::printed
                     : DissipatorConvention::standard;
  m.backaction = s.choice("/model/backaction", {"dephasing", "literal"}, "dephasing") == "dephasing"
                     ? BackactionSign::dephasing
                     : BackactionSign::literal;
  const int n = m.dim();
  if (n == 0) s.fail("/model", "need h0, h_basis or c to fix the dimension");
  if (s.has("/model/dimension") && s.integer("/model/dimension") != n)
    s.fail("/model/dimension", "does not match the matrices (" + std::to_string(n) + ")");
  for (std::size_t i = 0; i < m.h_basis.size(); ++i)
    if (m.h_basis[i].dim() != n)
      s.fail("/model/h_basis/" + std::to_string(i), "wrong dimension");
  if (m.c.size() != 0 && m.c.rows() != n) s.fail("/model/c", "wrong dimension");
  if (m.c.size() == 0) m.c = CMatrix::Zero(n, n);
  return m;
}

inline DensityMatrix sme_initial_state(const Scenario& s, int dim) {
  const CMatrix rho = s.matrix("/state/rho0");
  if (rho.rows() != dim) s.fail("/state/rho0", "wrong dimension");
  return s.guarded("/state/rho0", [&] { return DensityMatrix(rho); });
}

/// Qutrit rules on the full density matrix: the observable is written in
/// the current eigenbasis of ρ.
inline ControlProtocol<DensityMatrix> qutrit_density_rule(const std::string& rule, double a) {
  const CMatrix ux = unitary_from(qutrit::xmax_params(a));
  const CMatrix u2 = unitary_from(qutrit::x2_params(a));
  const std::vector<double> d{a, 0.0, -a};
  const bool fast = rule == "qutrit-fast-switch";
  return ControlProtocol<DensityMatrix>::feedback(rule, [=](double, const DensityMatrix& rho) {
    if (rho.dim() != 3) throw DimensionError(rule + " needs a qutrit state");
    const auto e = eig_sorted(rho);
    ControlVector v = ControlVector::observable(unitary_params_from(e.vectors * ux, d));
    v.mu = RVector(0);
    if (fast && !(e.values(1) > e.values(2) * (1 + 1e-8)))
      v.alternate = unitary_params_from(e.vectors * u2, d);
    return v;
  });
}

inline ControlProtocol<DensityMatrix> sme_protocol(const Scenario& s) {
  if (auto p = open_loop_protocol<DensityMatrix>(s)) return *p;
  if (s.string("/protocol/kind") == "dp-policy")
    s.fail("/protocol/kind", "dp-policy protocols need a model with a real state vector");
  const std::string rule =
      s.choice("/protocol/rule", {"qutrit-xmax", "qutrit-fast-switch"});
  return qutrit_density_rule(rule, s.positive("/protocol/a"));
}

inline CostSpec<DensityMatrix> sme_cost(const Scenario& s, int dim) {
  CostSpec<DensityMatrix> c;
  c.T = s.positive("/cost/T");
  s.choice("/cost/L", {"zero"}, "zero");
  const std::string M = s.choice("/cost/M", {"zero", "infidelity"}, "infidelity");
  if (M == "infidelity") {
    const CMatrix target = s.matrix("/cost/target");
    if (target.rows() != dim) s.fail("/cost/target", "wrong dimension");
    s.guarded("/cost/target", [&] { return DensityMatrix(target); });
    c.M = [target](const DensityMatrix& rho) {
      return 1.0 - (target * rho.matrix()).trace().real();
    };
  }
  return c;
}

// --------------------------------------------------------------- qutrit

struct QutritScenario {
  qutrit::QutritModel m;
  qutrit::EigenState s0;
  double t0 = 0.0;
  double minus_coef = 2.0;
};

inline QutritScenario qutrit_scenario(const Scenario& s) {
  QutritScenario q;
  q.m.a = s.positive("/model/a", 0.1);
  q.m.delta_max = s.positive("/model/delta_max", 0.1);
  q.m.T = s.positive("/cost/T");
  s.choice("/cost/L", {"zero"}, "zero");
  s.choice("/cost/M", {"infidelity"}, "infidelity");
  q.minus_coef = s.positive("/cost/minus_coef", 2.0);
  q.s0 = {s.number("/state/lambda1"), s.number("/state/lambda2")};
  s.guarded("/state", [&] {
    q.s0.check(q.m.delta_max);
    return 0;
  });
  q.t0 = s.number("/state/t0", 0.0);
  if (q.t0 < 0 || !(q.t0 < q.m.T)) s.fail("/state/t0", "need 0 <= t0 < cost.T");
  return q;
}

inline ControlRegion qutrit_region(const Scenario& s, const qutrit::QutritModel& m) {
  return s.choice("/region/kind", {"unitary", "restricted"}, "unitary") == "unitary"
             ? qutrit::unitary_region(m.a)
             : qutrit::restricted_region(m.a);
}

inline ControlProtocol<RVector> qutrit_protocol(const Scenario& s, const qutrit::QutritModel& m) {
  if (auto p = open_loop_protocol<RVector>(s)) return *p;
  if (s.string("/protocol/kind") == "dp-policy")
    return dp_policy(s, qutrit::restricted_region(m.a));
  const std::string rule = s.choice("/protocol/rule", {"qutrit-xmax", "qutrit-fast-switch"});
  return rule == "qutrit-xmax" ? qutrit::xmax_protocol(m.a) : qutrit::fast_switch_protocol(m.a, 1e-8);
}

// -------------------------------------------------------------- drift1d

/// dx = -u x dt with u in [u_min, u_max]; the target set is x <= x_c.
struct Drift1d {
  double u_min = 0.0;
  double u_max = 1.0;
  double x_c = 1.0;
  double x_max = 10.0;

  Dynamics dynamics() const {
    Dynamics d;
    d.state_dim = 1;
    d.drift = [](double, const RVector& x, const ControlVector& v) {
      return RVector(-v.mu(0) * x);
    };
    return d;
  }
  ControlRegion region() const {
    return ControlRegion::box(ControlVector::scalar(u_min), ControlVector::scalar(u_max));
  }
};

inline Drift1d drift1d(const Scenario& s) {
  Drift1d d;
  d.u_min = s.number("/region/u_min", 0.0);
  d.u_max = s.positive("/region/u_max");
  if (d.u_min < 0 || d.u_min > d.u_max) s.fail("/region/u_min", "need 0 <= u_min <= u_max");
  d.x_c = s.positive("/target/x_c", 1.0);
  d.x_max = s.positive("/grid/x_max");
  if (!(d.x_max > d.x_c)) s.fail("/grid/x_max", "must exceed target.x_c");
  return d;
}

inline ControlProtocol<RVector> drift1d_protocol(const Scenario& s, const Drift1d& d) {
  if (auto p = open_loop_protocol<RVector>(s)) return *p;
  if (s.string("/protocol/kind") == "dp-policy") return dp_policy(s, d.region());
  s.fail("/protocol/kind", "drift1d has no built-in feedback rules");
}

}  // namespace qfc::cli
