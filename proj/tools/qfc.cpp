// qfc: scenario-driven front end for simulation, verification and DP.
//
// Exit codes: 0 success, 1 input error, 2 verification verdict not optimal
// (not-optimal or inconclusive; the JSON report says which).

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "build.hpp"
#include "json.hpp"
#include "qfc/dp.hpp"
#include "qfc/hjb.hpp"
#include "qfc/qutrit.hpp"
#include "qfc/viscosity.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace qfc;
using namespace qfc::cli;

namespace {

std::string fmt(double v) {
  std::ostringstream o;
  o << std::setprecision(12) << v;
  return o.str();
}

/// Rounds every floating-point value to 12 significant digits.
void round12(json& j) {
  if (j.is_number_float()) {
    const double v = j.get<double>();
    if (std::isfinite(v)) j = std::stod(fmt(v));
  } else if (j.is_structured()) {
    for (auto& e : j) round12(e);
  }
}

void write_json(const fs::path& path, json j) {
  round12(j);
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

fs::path out_dir(const Scenario& s, const Flags& f, const std::string& sub) {
  fs::path dir = !f.out.empty() ? f.out : fs::path(s.string("/output/dir", "qfc-out"));
  dir /= sub;
  fs::create_directories(dir);
  return dir;
}

void table(const std::vector<std::pair<std::string, std::string>>& rows) {
  std::size_t w = 0;
  for (const auto& r : rows) w = std::max(w, r.first.size());
  for (const auto& r : rows) std::cout << "  " << std::left << std::setw(static_cast<int>(w) + 2) << r.first << r.second << "\n";
}

void print_report(const VerificationReport& r, const fs::path& path) {
  std::vector<std::pair<std::string, std::string>> rows{
      {"method", r.method},
      {"verdict", to_string(r.verdict)},
      {"nodes checked", std::to_string(r.nodes_checked)},
      {"continuity ok", r.continuity_ok ? "yes" : "no"},
      {"max discontinuity", fmt(r.max_discontinuity)},
      {"max HJB residual", fmt(r.hjb_residual_max)},
      {"terminal gap", fmt(r.terminal_gap)},
      {"protocol maximizes G", r.protocol_maximizes_G ? "yes" : "no"},
      {"max G gap", fmt(r.g_gap_max)},
      {"witnesses", std::to_string(r.witnesses.size())}};
  for (std::size_t i = 0; i < std::min<std::size_t>(3, r.witnesses.size()); ++i) {
    const auto& w = r.witnesses[i];
    std::string x;
    for (Eigen::Index k = 0; k < w.x.size(); ++k) x += (k ? ", " : "") + fmt(w.x(k));
    rows.push_back({"  " + w.check, "x = (" + x + "), t = " + fmt(w.t) + ": " + w.detail});
  }
  rows.push_back({"report", path.string()});
  table(rows);
}

int verdict_code(const VerificationReport& r) { return r.verdict == Verdict::optimal ? 0 : 2; }

void write_state_path(const fs::path& path, const StatePath& p,
                      const std::vector<std::string>& names,
                      const std::function<double(const RVector&, double)>& extra = {},
                      const std::string& extra_name = "") {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "t";
  for (const auto& n : names) out << "," << n;
  if (extra) out << "," << extra_name;
  out << "\n";
  for (std::size_t i = 0; i < p.times.size(); ++i) {
    out << fmt(p.times[i]);
    for (Eigen::Index k = 0; k < p.states[i].size(); ++k) out << "," << fmt(p.states[i](k));
    if (extra) out << "," << fmt(extra(p.states[i], p.times[i]));
    out << "\n";
  }
}

std::string traj_name(std::size_t i) {
  std::ostringstream o;
  o << "traj_" << std::setw(4) << std::setfill('0') << i << ".csv";
  return o.str();
}

/// Under the protocol observables the qutrit eigenvalues decay without noise
/// at rates up to 8a², so to first order Euler stepping with dt biases a
/// cost C by at most C (8a²)² dt (T - t0).
double euler_bias_bound(double cost, double rate, double dt, double span) {
  return cost * rate * rate * dt * span;
}

// ------------------------------------------------------------- simulate

int cmd_simulate(const Scenario& s, const Flags& f) {
  const std::string kind = model_kind(s);
  const auto dir = out_dir(s, f, "simulate");
  const std::uint64_t sd = seed(s, f);
  const std::size_t n = count(s, "/rng/n_traj", 1);
  const double dt = s.positive("/rng/dt");
  json summary{{"model", kind}, {"seed", sd}, {"n_traj", n}, {"dt", dt}, {"files", json::array()}};
  if (kind == "sme") {
    const SmeModel m = sme_model(s);
    const auto rho0 = sme_initial_state(s, m.dim());
    const auto protocol = sme_protocol(s);
    const double T = s.positive("/cost/T");
    std::vector<TrajectoryRecord> recs(n);
    s.guarded("/rng", [&] {
      parallel_for(n, f.workers, [&](std::size_t i) {
        recs[i] = simulate_trajectory(protocol, rho0, T, dt, NoiseStream(sd, i), m);
      });
      return 0;
    });
    for (std::size_t i = 0; i < n; ++i) {
      std::ofstream out(dir / traj_name(i));
      write_csv(out, recs[i]);
      summary["files"].push_back(traj_name(i));
    }
  } else {
    Dynamics dyn;
    ControlProtocol<RVector> protocol = ControlProtocol<RVector>::constant(ControlVector::scalar(0));
    RVector x0;
    double t0 = 0.0, T = 0.0;
    std::vector<std::string> names;
    std::function<double(const RVector&, double)> extra;
    if (kind == "qutrit") {
      const auto q = qutrit_scenario(s);
      dyn = qutrit::eigen_system(q.m);
      protocol = qutrit_protocol(s, q.m);
      x0 = q.s0.vec();
      t0 = q.t0;
      T = q.m.T;
      names = {"lambda1", "lambda2"};
      extra = [m = q.m](const RVector& x, double t) {
        return qutrit::cost_piecewise(std::max(x(0), x(1)), std::min(x(0), x(1)), t, m.T, m.a);
      };
    } else {
      const auto d = drift1d(s);
      dyn = d.dynamics();
      protocol = drift1d_protocol(s, d);
      x0 = RVector::Constant(1, s.positive("/state/x0"));
      T = s.positive("/cost/T");
      names = {"x"};
    }
    std::vector<StatePath> paths(n);
    s.guarded("/rng", [&] {
      parallel_for(n, f.workers, [&](std::size_t i) {
        paths[i] = simulate_sde(dyn, protocol, x0, t0, T, dt, NoiseStream(sd, i));
      });
      return 0;
    });
    for (std::size_t i = 0; i < n; ++i) {
      write_state_path(dir / traj_name(i), paths[i], names, extra, "switching_cost_to_go");
      summary["files"].push_back(traj_name(i));
    }
  }
  write_json(dir / "summary.json", summary);
  table({{"model", kind}, {"trajectories", std::to_string(n)}, {"seed", std::to_string(sd)},
         {"output", dir.string()}});
  return 0;
}

// ----------------------------------------------------------------- cost

int cmd_cost(const Scenario& s, const Flags& f) {
  const std::string kind = model_kind(s);
  const auto dir = out_dir(s, f, "cost");
  MonteCarloOptions mc;
  mc.base_seed = seed(s, f);
  mc.n_traj = count(s, "/rng/n_traj", 1000, 2);
  mc.dt = s.positive("/rng/dt");
  mc.workers = f.workers;
  json out{{"model", kind}};
  std::optional<double> closed;
  double bias = 0.0;  // bound on the Euler bias of the closed-form comparison
  CostEstimate est;
  if (kind == "sme") {
    const SmeModel m = sme_model(s);
    const auto rho0 = sme_initial_state(s, m.dim());
    const auto spec = sme_cost(s, m.dim());
    const auto protocol = sme_protocol(s);
    est = s.guarded("/rng", [&] { return estimate_cost_to_go(rho0, 0.0, protocol, spec, m, mc); });
    out["t0"] = 0.0;
  } else if (kind == "qutrit") {
    const auto q = qutrit_scenario(s);
    CostSpec<RVector> spec;
    spec.T = q.m.T;
    spec.M = qutrit::terminal_delta();
    const auto protocol = qutrit_protocol(s, q.m);
    est = s.guarded("/rng", [&] {
      return estimate_cost_to_go(q.s0.vec(), q.t0, protocol, spec, qutrit::eigen_system(q.m), mc);
    });
    out["state"] = {q.s0.lambda1, q.s0.lambda2};
    out["t0"] = q.t0;
    // Closed forms: C⁺ for X inside its regime, C⁺/C⁻ for the switching rule.
    const std::string rule = s.string("/protocol/rule", "");
    const bool within = qutrit::in_regime1(q.s0.lambda1, q.s0.lambda2, q.t0, q.m.T, q.m.a);
    if (rule == "qutrit-fast-switch" || (rule == "qutrit-xmax" && within)) {
      closed = qutrit::cost_piecewise(q.s0.lambda1, q.s0.lambda2, q.t0, q.m.T, q.m.a);
      bias = euler_bias_bound(*closed, q.m.rate(), mc.dt, q.m.T - q.t0);
    }
  } else {
    const auto d = drift1d(s);
    CostSpec<RVector> spec;
    spec.T = s.positive("/cost/T");
    s.choice("/cost/M", {"x"}, "x");
    spec.M = [](const RVector& x) { return x(0); };
    const RVector x0 = RVector::Constant(1, s.positive("/state/x0"));
    const auto protocol = drift1d_protocol(s, d);
    est = s.guarded("/rng", [&] { return estimate_cost_to_go(x0, 0.0, protocol, spec, d.dynamics(), mc); });
    out["state"] = {x0(0)};
    out["t0"] = 0.0;
  }
  out["estimate"] = est.to_json();
  std::vector<std::pair<std::string, std::string>> rows{
      {"model", kind},
      {"mean", fmt(est.mean)},
      {"standard error", fmt(est.std_error)},
      {"trajectories", std::to_string(est.n_traj)}};
  if (closed) {
    const double allowed = 3 * est.std_error + bias;
    out["closed_form"] = *closed;
    out["euler_bias_bound"] = bias;
    out["consistent"] = std::abs(est.mean - *closed) <= allowed;
    rows.push_back({"closed form", fmt(*closed)});
    rows.push_back({"|mean - closed form|", fmt(std::abs(est.mean - *closed))});
    rows.push_back({"allowed (3 se + Euler bias)", fmt(allowed)});
  }
  write_json(dir / "cost.json", out);
  rows.push_back({"report", (dir / "cost.json").string()});
  table(rows);
  return 0;
}

// --------------------------------------------------------- verification

void require_qutrit(const Scenario& s, const std::string& cmd) {
  if (model_kind(s) != "qutrit") s.fail("/model/kind", cmd + " supports model kind \"qutrit\"");
}

int cmd_verify_classic(const Scenario& s, const Flags& f) {
  require_qutrit(s, "verify-classic");
  const auto q = qutrit_scenario(s);
  const auto dir = out_dir(s, f, "verify-classic");
  const bool regime1 = s.choice("/grid/domain", {"full", "regime1"}, "full") == "regime1";
  const std::size_t n = grid_nodes(s, f, 11);
  ClassicOptions opt;
  opt.tol = tolerance(s, f, 1e-6);
  opt.maximize.restarts = static_cast<int>(count(s, "/grid/restarts", 4));
  opt.workers = f.workers;
  const auto grid = s.guarded("/grid", [&] { return qutrit::qutrit_grid(q.m, q.s0, q.t0, n, regime1); });
  const auto rep = verify_classic(qutrit_protocol(s, q.m), qutrit::piecewise_field(q.m, q.minus_coef),
                                  grid, qutrit_region(s, q.m), qutrit::eigen_system(q.m), RunningCost{},
                                  qutrit::terminal_delta(), opt);
  write_json(dir / "report.json", rep.to_json());
  print_report(rep, dir / "report.json");
  return verdict_code(rep);
}

/// Noise-free path of the protocol, sampled at `samples` times. The
/// switching rule uses the exact path through λ1 = λ2.
NominalPath protocol_path(const Scenario& s, const QutritScenario& q,
                          const ControlProtocol<RVector>& protocol, int samples) {
  if (s.string("/protocol/kind") == "feedback" && s.string("/protocol/rule") == "qutrit-fast-switch")
    return qutrit::nominal_path(q.m, q.s0, q.t0, samples);
  const int sub = 50;
  const auto path = simulate_sde_with(qutrit::eigen_system(q.m), protocol, q.s0.vec(), q.t0, q.m.T,
                                      (samples - 1) * sub, [](int, int, double) { return 0.0; });
  NominalPath out;
  for (int i = 0; i < samples; ++i) {
    out.times.push_back(path.times[static_cast<std::size_t>(i * sub)]);
    out.states.push_back(path.states[static_cast<std::size_t>(i * sub)]);
  }
  return out;
}

int cmd_verify_viscosity(const Scenario& s, const Flags& f) {
  require_qutrit(s, "verify-viscosity");
  const auto q = qutrit_scenario(s);
  const auto dir = out_dir(s, f, "verify-viscosity");
  const std::size_t n = grid_nodes(s, f, 11);
  const auto dyn = qutrit::eigen_system(q.m);
  EnhancedOptions opt;
  opt.tol = tolerance(s, f, 1e-6);
  opt.maximize.restarts = static_cast<int>(count(s, "/grid/restarts", 4));
  opt.workers = f.workers;
  opt.kink_functionals = {
      {"X", fixed_control_functional(dyn, qutrit::xmax_control(q.m.a), RunningCost{})},
      {"X2", fixed_control_functional(dyn, qutrit::x2_control(q.m.a), RunningCost{})}};
  const auto protocol = qutrit_protocol(s, q.m);
  const int samples = static_cast<int>(count(s, "/grid/path_samples", 201, 2));
  const auto grid = s.guarded("/grid", [&] { return qutrit::qutrit_grid(q.m, q.s0, q.t0, n, false); });
  const auto rep = verify_enhanced(protocol, PiecewiseField{qutrit::piecewise_field(q.m, q.minus_coef)},
                                   protocol_path(s, q, protocol, samples), grid, qutrit_region(s, q.m),
                                   dyn, RunningCost{}, qutrit::terminal_delta(), opt);
  write_json(dir / "report.json", rep.to_json());
  print_report(rep, dir / "report.json");
  return verdict_code(rep);
}

// ------------------------------------------------------------------- DP

/// The manifest path is relative to the block's directory, so a scenario
/// placed next to policy.scenario can use the block unchanged.
void write_policy_block(const fs::path& dir, const fs::path& manifest) {
  std::ofstream out(dir / "policy.scenario");
  out << "# Replays the exported policy from a scenario in this directory.\n"
      << policy_block(manifest.lexically_relative(dir));
}

int cmd_solve_dp(const Scenario& s, const Flags& f) {
  const std::string kind = model_kind(s);
  if (kind == "sme") s.fail("/model/kind", "solve-dp supports model kinds \"qutrit\" and \"drift1d\"");
  const auto dir = out_dir(s, f, "solve-dp");
  json summary{{"model", kind}};
  std::vector<std::pair<std::string, std::string>> rows{{"model", kind}};
  BellmanOptions bo;
  bo.tol = s.positive("/verify/bellman_tol", 1e-3);
  if (kind == "qutrit") {
    const auto q = qutrit_scenario(s);
    qutrit::QutritDpOptions o;
    o.nodes = grid_nodes(s, f, 101);
    o.steps = count(s, "/grid/steps", 100);
    o.lambda_max = s.positive("/grid/lambda_max", 0.05);
    o.workers = f.workers;
    const auto r = s.guarded("/grid", [&] { return qutrit::qutrit_dp(q.m, o); });
    const auto b = bellman_check(r.field, qutrit::log_eigen_system(q.m), RunningCost{}, bo);
    const auto manifest = export_value_field(
        r.field, dir / "field", {{"coordinates", "log"}, {"state", {"ln lambda1", "ln lambda2"}}});
    write_policy_block(dir, manifest);
    summary["result"] = r.to_json();
    summary["bellman"] = b.to_json();
    rows.insert(rows.end(), {{"grid", std::to_string(o.nodes) + "^2 x " + std::to_string(o.steps + 1)},
                             {"max relative error", fmt(r.max_rel_error)},
                             {"worst boundary offset (cells)", fmt(r.worst_boundary_offset)},
                             {"degenerate nodes", std::to_string(r.field.degenerate_nodes)},
                             {"Bellman consistent", b.ok ? "yes" : "no"}});
  } else {
    const auto d = drift1d(s);
    CostSpec<RVector> spec;
    spec.T = s.positive("/cost/T");
    s.choice("/cost/M", {"x"}, "x");
    spec.M = [](const RVector& x) { return x(0); };
    DpGrid g;
    g.axes = {DpGrid::linspace(0.0, d.x_max, grid_nodes(s, f, 201))};
    g.times = DpGrid::linspace(0.0, spec.T, count(s, "/grid/steps", 200) + 1);
    DpOptions dpo;
    dpo.workers = f.workers;
    const auto vf = s.guarded("/grid", [&] { return solve_backward(d.dynamics(), spec, d.region(), g, dpo); });
    // Oracle: with u_max throughout, V = x e^{-u_max (T - t)}.
    double err = 0.0;
    for (std::size_t sl = 0; sl < vf.values.size(); ++sl)
      for (std::size_t k = 1; k < g.node_count(); ++k) {
        const double x = g.node(k)(0);
        const double exact = x * std::exp(-d.u_max * (spec.T - g.times[sl]));
        err = std::max(err, std::abs(vf.values[sl][k] - exact) / exact);
      }
    const auto b = bellman_check(vf, d.dynamics(), RunningCost{}, bo);
    const auto manifest = export_value_field(vf, dir / "field", {{"coordinates", "identity"}});
    write_policy_block(dir, manifest);
    summary["max_rel_error"] = err;
    summary["degenerate_nodes"] = vf.degenerate_nodes;
    summary["bellman"] = b.to_json();
    rows.insert(rows.end(), {{"max relative error", fmt(err)},
                             {"degenerate nodes", std::to_string(vf.degenerate_nodes)},
                             {"Bellman consistent", b.ok ? "yes" : "no"}});
  }
  write_json(dir / "summary.json", summary);
  rows.push_back({"output", dir.string()});
  table(rows);
  return 0;
}

int cmd_solve_time_optimal(const Scenario& s, const Flags& f) {
  if (model_kind(s) != "drift1d")
    s.fail("/model/kind", "solve-time-optimal supports model kind \"drift1d\"");
  const auto d = drift1d(s);
  const auto dir = out_dir(s, f, "solve-time-optimal");
  DpGrid g;
  g.axes = {DpGrid::linspace(d.x_c, d.x_max, grid_nodes(s, f, 401))};
  TimeOptimalOptions o;
  o.tol = s.positive("/verify/tol", 1e-9);
  o.dp.workers = f.workers;
  const ThresholdSpec target{[](const RVector& x) { return x(0); }, d.x_c, true};
  const auto vf = s.guarded("/grid", [&] { return solve_time_optimal(d.dynamics(), d.region(), target, g, o); });

  std::ofstream csv(dir / "value.csv");
  csv << "x,value,oracle,rel_error\n";
  double err = 0.0;
  for (std::size_t k = 0; k < g.node_count(); ++k) {
    const double x = g.node(k)(0);
    const double oracle = std::log(x / d.x_c) / d.u_max;
    const double rel = k == 0 ? 0.0 : std::abs(vf.values[0][k] - oracle) / oracle;
    err = std::max(err, rel);
    csv << fmt(x) << "," << fmt(vf.values[0][k]) << "," << fmt(oracle) << "," << fmt(rel) << "\n";
  }
  // HJB residual of the analytic field ln(x/x_c)/u_max.
  FieldPiece p;
  const double um = d.u_max, xc = d.x_c;
  p.value = [=](const RVector& x, double) { return std::log(x(0) / xc) / um; };
  p.dt = [](const RVector&, double) { return 0.0; };
  p.grad = [=](const RVector& x, double) { return RVector(RVector::Constant(1, 1 / (um * x(0)))); };
  p.hess = [=](const RVector& x, double) { return RMatrix(RMatrix::Constant(1, 1, -1 / (um * x(0) * x(0)))); };
  const auto field = CostField::smooth(1, p);
  const Threshold th{[](const RVector& x) { return x(0); }, d.x_c};
  double res = 0.0;
  for (std::size_t k = 1; k < g.node_count(); k += std::max<std::size_t>(1, g.node_count() / 20))
    res = std::max(res, std::abs(hjb_residual_time_optimal(field, g.node(k), 0.0, d.region(),
                                                           d.dynamics(), th)));
  BellmanOptions bo;
  bo.tol = s.positive("/verify/bellman_tol", 2e-2);
  const auto b = bellman_check(vf, d.dynamics(), RunningCost{}, bo);
  const auto manifest = export_value_field(vf, dir / "field", {{"coordinates", "identity"}});
  write_policy_block(dir, manifest);
  json summary{{"model", "drift1d"},   {"nodes", g.node_count()},
               {"iterations", vf.iterations}, {"residual", vf.residual},
               {"max_rel_error", err},   {"analytic_hjb_residual_max", res},
               {"bellman", b.to_json()}};
  write_json(dir / "summary.json", summary);
  table({{"nodes", std::to_string(g.node_count())},
         {"iterations", std::to_string(vf.iterations)},
         {"max relative error vs ln(x/x_c)/u_max", fmt(err)},
         {"analytic HJB residual", fmt(res)},
         {"Bellman consistent", b.ok ? "yes" : "no"},
         {"value", (dir / "value.csv").string()}});
  return 0;
}

// ---------------------------------------------------------- qutrit demo

struct Check {
  std::string name;
  bool pass = false;
  json detail;
};

int cmd_qutrit_demo(const Scenario& s, const Flags& f) {
  require_qutrit(s, "qutrit-demo");
  const auto q = qutrit_scenario(s);
  const auto& m = q.m;
  const double r = m.rate();
  const auto dir = out_dir(s, f, "qutrit-demo");
  const auto dyn = qutrit::eigen_system(m);
  std::vector<Check> checks;

  {  // Regime-1 decay under X, up to the earlier of 2/(8a²) and the switch.
    const double dt = s.positive("/demo/dt", 1e-4);
    const double tau = qutrit::switching_time(q.s0.lambda1, q.s0.lambda2, m.a);
    const double horizon = std::min(2.0 / r, 0.99 * tau);
    const auto path = simulate_sde(dyn, qutrit::xmax_protocol(m.a), q.s0.vec(), 0.0, horizon, dt,
                                   NoiseStream(seed(s, f), 0));
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < path.times.size(); ++i) {
      const double want = std::exp(-r * path.times[i]);
      l1 = std::max(l1, std::abs(path.states[i](0) / q.s0.lambda1 - want) / want);
      l2 = std::max(l2, std::abs(path.states[i](1) - q.s0.lambda2));
    }
    checks.push_back({"regime-1 decay", l1 <= 1e-4 && l2 <= 1e-10,
                      {{"horizon", horizon}, {"lambda1_rel_error", l1}, {"lambda2_drift", l2}}});
  }
  {  // Monte Carlo cost of the switching protocol.
    MonteCarloOptions mc;
    mc.base_seed = seed(s, f);
    mc.n_traj = count(s, "/rng/n_traj", 1000, 2);
    mc.dt = s.positive("/rng/dt");
    mc.workers = f.workers;
    CostSpec<RVector> spec;
    spec.T = m.T;
    spec.M = qutrit::terminal_delta();
    const auto est = estimate_cost_to_go(q.s0.vec(), q.t0, qutrit::fast_switch_protocol(m.a, 1e-8),
                                         spec, dyn, mc);
    const double c = qutrit::cost_piecewise(q.s0.lambda1, q.s0.lambda2, q.t0, m.T, m.a);
    const double bias = euler_bias_bound(c, r, mc.dt, m.T - q.t0);
    checks.push_back({"cost-to-go", std::abs(est.mean - c) <= 3 * est.std_error + bias,
                      {{"estimate", est.to_json()}, {"closed_form", c}, {"euler_bias_bound", bias}}});
  }
  {  // Kink consistency at t = T - τ.
    const double l1 = q.s0.lambda1, l2 = q.s0.lambda2;
    const double tk = m.T - qutrit::switching_time(l1, l2, m.a);
    const auto plus = qutrit::plus_piece(m), minus = qutrit::minus_piece(m, q.minus_coef);
    const RVector x = q.s0.vec();
    const auto qp = query_cost_field(CostField::smooth(2, plus, m.T), x, tk);
    const auto qm = query_cost_field(CostField::smooth(2, minus, m.T), x, tk);
    const double dv = std::max(std::abs(qp.value - 2 * l2), std::abs(qm.value - 2 * l2));
    const double dd = std::max(std::abs(qp.dCdt - qm.dCdt), (qp.grad - qm.grad).cwiseAbs().maxCoeff());
    checks.push_back({"kink consistency", dv <= 1e-9 && dd <= 1e-9,
                      {{"t_kink", tk}, {"value_gap", dv}, {"derivative_gap", dd}}});
  }
  {  // Maximum of G over unitaries in both regimes.
    MaximizeOptions mo;
    mo.restarts = 20;
    const auto field = qutrit::piecewise_field(m, q.minus_coef);
    const double l1 = q.s0.lambda1, l2 = q.s0.lambda2;
    const double tau = qutrit::switching_time(l1, l2, m.a);
    const double t1 = std::max(0.0, m.T - 0.5 * tau), t2 = m.T - 2 * tau;
    auto gmax = [&](double t) {
      const auto qq = query_cost_field(field, q.s0.vec(), t);
      return maximize_g(q.s0.vec(), t, qutrit::unitary_region(m.a), qq.grad, qq.hess, dyn, RunningCost{}, mo).g;
    };
    const double g1 = gmax(t1), want1 = r * l1 * std::exp(-r * (m.T - t1));
    const double g2 = gmax(t2), want2 = 0.5 * r * qutrit::cost_minus(l1, l2, t2, m.T, m.a);
    const double e1 = std::abs(g1 - want1) / want1, e2 = std::abs(g2 - want2) / want2;
    checks.push_back({"max G over unitaries", e1 <= 1e-6 && e2 <= 1e-6,
                      {{"regime1", {{"t", t1}, {"g_max", g1}, {"closed_form", want1}}},
                       {"regime2", {{"t", t2}, {"g_max", g2}, {"closed_form", want2}}}}});
  }
  {  // Classic and enhanced verification, and the perturbed C⁻.
    qutrit::QutritVerifyOptions vo;
    vo.tol = tolerance(s, f, 1e-6);
    vo.grid = grid_nodes(s, f, 7);
    vo.restarts = static_cast<int>(count(s, "/grid/restarts", 4));
    vo.workers = f.workers;
    vo.minus_coef = q.minus_coef;
    const auto v = qutrit::verify_qutrit_detailed(m, q.s0, q.t0, vo);
    write_json(dir / "verification.json", v.summary().to_json());
    checks.push_back({"classic verification (regime 1)", v.classic.verdict == Verdict::optimal,
                      {{"verdict", to_string(v.classic.verdict)}, {"xi_max", v.xi_max},
                       {"xi_violations", v.xi_violations}}});
    if (!v.within_bound) {
      bool witness_on_kink = false;
      for (const auto& w : v.classic_full.witnesses)
        witness_on_kink |= std::abs(m.T - w.t - qutrit::switching_time(w.x(0), w.x(1), m.a)) <= 1e-6;
      checks.push_back({"classic verification (full horizon) is inconclusive",
                        v.classic_full.verdict == Verdict::inconclusive && witness_on_kink,
                        {{"verdict", to_string(v.classic_full.verdict)}, {"witness_on_kink", witness_on_kink}}});
      checks.push_back({"enhanced verification", v.enhanced->verdict == Verdict::optimal,
                        {{"verdict", to_string(v.enhanced->verdict)}}});
      vo.minus_coef = 1.05 * q.minus_coef;
      const auto bad = qutrit::verify_qutrit_detailed(m, q.s0, q.t0, vo);
      checks.push_back({"perturbed C- fails", bad.enhanced->verdict != Verdict::optimal,
                        {{"minus_coef", vo.minus_coef}, {"verdict", to_string(bad.enhanced->verdict)}}});
    }
  }

  json out{{"state", {q.s0.lambda1, q.s0.lambda2}}, {"t0", q.t0}, {"T", m.T}, {"a", m.a},
           {"checks", json::array()}};
  bool all = true;
  std::vector<std::pair<std::string, std::string>> rows;
  for (const auto& c : checks) {
    all &= c.pass;
    out["checks"].push_back({{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
    rows.push_back({c.name, c.pass ? "PASS" : "FAIL"});
  }
  out["all_pass"] = all;
  write_json(dir / "demo.json", out);
  rows.push_back({"report", (dir / "demo.json").string()});
  table(rows);
  return all ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qfc: quantum feedback control toolkit"};
  app.require_subcommand(1);
  Flags flags;
  std::string scenario_path;
  std::string grid_arg;
  std::uint64_t seed_arg = 0;
  double tol_arg = 0.0;

  using Cmd = int (*)(const Scenario&, const Flags&);
  const std::vector<std::tuple<std::string, std::string, Cmd>> commands{
      {"simulate", "simulate trajectories and write one CSV per trajectory", cmd_simulate},
      {"cost", "Monte Carlo cost-to-go estimate", cmd_cost},
      {"verify-classic", "classic HJB verification of the scenario protocol", cmd_verify_classic},
      {"verify-viscosity", "viscosity-enhanced HJB verification", cmd_verify_viscosity},
      {"solve-dp", "backward dynamic programming with value-field export", cmd_solve_dp},
      {"solve-time-optimal", "time-optimal value iteration with value-field export", cmd_solve_time_optimal},
      {"qutrit-demo", "qutrit reproduction with a pass/fail summary", cmd_qutrit_demo}};
  std::vector<std::pair<CLI::App*, Cmd>> subs;
  for (const auto& [name, help, fn] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("scenario", scenario_path, "scenario file")->required();
    sub->add_option("--out", flags.out, "output directory (overrides output.dir)");
    sub->add_option("--workers", flags.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--tol", tol_arg, "verification tolerance")->check(CLI::PositiveNumber);
    sub->add_option("--seed", seed_arg, "random seed (overrides rng.seed)");
    sub->add_option("--grid", grid_arg, "grid nodes per axis, N[,N,...]");
    subs.emplace_back(sub, fn);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  for (auto [sub, fn] : subs) {
    if (!sub->parsed()) continue;
    try {
      if (sub->count("--seed")) flags.seed = seed_arg;
      if (sub->count("--tol")) flags.tol = tol_arg;
      if (sub->count("--grid")) {
        std::stringstream ss(grid_arg);
        std::string part;
        while (std::getline(ss, part, ',')) {
          std::size_t used = 0;
          long v = -1;
          try {
            v = std::stol(part, &used);
          } catch (const std::exception&) {
          }
          if (used != part.size() || v < 2) {
            std::cerr << "error: --grid expects integers >= 2, got '" << grid_arg << "'\n";
            return 1;
          }
          flags.grid.push_back(static_cast<std::size_t>(v));
        }
      }
      const Scenario s = Scenario::load(scenario_path);
      return fn(s, flags);
    } catch (const ScenarioError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    } catch (const std::exception& e) {
      std::cerr << "error: " << scenario_path << ": " << e.what() << "\n";
      return 1;
    }
  }
  return 1;
}
