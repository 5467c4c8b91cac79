#pragma once

// Stochastic master equation stepping (Euler in Kraus form, positive by
// construction) and Euler–Maruyama for generic controlled Ito dynamics.

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "qfc/control.hpp"
#include "qfc/dynamics.hpp"
#include "qfc/error.hpp"
#include "qfc/parallel.hpp"
#include "qfc/qstate.hpp"

namespace qfc {

/// Independent Gaussian stream per (seed, stream index).
class NoiseStream {
 public:
  NoiseStream(std::uint64_t seed, std::uint64_t stream)
      : seed_(seed), stream_(stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32)};
    engine_.seed(seq);
  }

  double standard_normal() { return normal_(engine_); }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }

 private:
  std::uint64_t seed_, stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

inline double wiener_increment(NoiseStream& stream, double dt) {
  if (!(dt > 0.0) || !std::isfinite(dt))
    throw DomainError("wiener_increment: dt must be positive");
  return std::sqrt(dt) * stream.standard_normal();
}

/// Fine-grid Brownian increments that can be coarsened by summing pairs, so
/// a path refined by halving dt stays the same path.
class BrownianPath {
 public:
  BrownianPath(NoiseStream stream, double T, int fine_steps) : T_(T) {
    if (fine_steps < 1) throw DomainError("BrownianPath: need >= 1 step");
    const double dt = T / fine_steps;
    inc_.resize(static_cast<std::size_t>(fine_steps));
    for (double& d : inc_) d = wiener_increment(stream, dt);
  }

  /// Increments on a grid of `steps` intervals; `steps` must divide the
  /// fine step count.
  std::vector<double> increments(int steps) const {
    const int n = static_cast<int>(inc_.size());
    if (steps < 1 || n % steps != 0)
      throw DomainError("BrownianPath: steps must divide the fine grid");
    const int r = n / steps;
    std::vector<double> out(static_cast<std::size_t>(steps), 0.0);
    for (std::size_t i = 0; i < inc_.size(); ++i)
      out[i / static_cast<std::size_t>(r)] += inc_[i];
    return out;
  }

  double horizon() const { return T_; }

 private:
  double T_;
  std::vector<double> inc_;
};

// ---------------------------------------------------------------- SME

/// Sign of the measurement back-action term. `dephasing` is
/// -k[X,[X,ρ]] = +k D[X]ρ, which keeps ρ positive and reproduces the
/// eigenvalue decay rates of the qutrit model. `literal` applies -k D[X]ρ,
/// i.e. the opposite sign; it is kept for comparison only.
enum class BackactionSign { dephasing, literal };

struct SmeModel {
  /// Fixed drift Hamiltonian, added to the controlled part.
  std::optional<Observable> h0;
  /// Controlled Hamiltonian basis: H = h0 + sum_i mu_i H_i.
  std::vector<Observable> h_basis;
  /// Environment coupling operator (empty matrix means none).
  CMatrix c;
  double gamma = 0.0;
  double k = 1.0;
  DissipatorConvention convention = DissipatorConvention::printed;
  BackactionSign backaction = BackactionSign::dephasing;
  /// With literal backaction the step is plain Euler: negative eigenvalues
  /// down to -psd_tolerance are clipped, anything lower means dt is too large.
  double psd_tolerance = 0.5;

  int dim() const;
  CMatrix hamiltonian(const ControlVector& v) const;
};

inline int SmeModel::dim() const {
  if (h0) return h0->dim();
  if (!h_basis.empty()) return h_basis.front().dim();
  return static_cast<int>(c.rows());
}

inline CMatrix SmeModel::hamiltonian(const ControlVector& v) const {
  if (v.mu.size() != static_cast<Eigen::Index>(h_basis.size()))
    throw DimensionError("SmeModel: control has " +
                         std::to_string(v.mu.size()) +
                         " Hamiltonian coefficients, basis has " +
                         std::to_string(h_basis.size()));
  const int n = v.obs.dim() > 0 ? v.obs.dim() : dim();
  CMatrix h = h0 ? h0->matrix() : CMatrix::Zero(n, n);
  for (std::size_t i = 0; i < h_basis.size(); ++i)
    h += v.mu(static_cast<Eigen::Index>(i)) * h_basis[i].matrix();
  return h;
}

/// Raw Ito increment dρ (before hermitization and renormalization).
inline CMatrix sme_increment(const CMatrix& rho, const CMatrix& H,
                             const CMatrix& X, const CMatrix& c, double gamma,
                             double k, double dt, double dW,
                             DissipatorConvention conv =
                                 DissipatorConvention::printed,
                             BackactionSign sign = BackactionSign::dephasing) {
  require_same_dim(rho, H, "sme_step");
  require_same_dim(rho, X, "sme_step");
  const cplx I(0.0, 1.0);
  const double ex = expectation(X, rho);
  CMatrix d = -I * (H * rho - rho * H) * dt;
  if (c.size() != 0 && gamma != 0.0) {
    require_same_dim(rho, c, "sme_step");
    d += gamma * dissipator(c, rho, conv) * dt;
  }
  const double ks = sign == BackactionSign::dephasing ? k : -k;
  d += ks * dissipator(X, rho, conv) * dt;
  d += std::sqrt(2.0 * k) * (X * rho + rho * X - 2.0 * ex * rho) * dW;
  return d;
}

struct SmeStep {
  DensityMatrix rho;
  double dr;
};

inline DensityMatrix project_state(const CMatrix& m, double psd_tolerance) {
  CMatrix h = hermitize(m);
  const double tr = h.trace().real();
  if (!(tr > 0.0) || !std::isfinite(tr))
    throw InvariantError("sme_step: trace collapsed; dt too large");
  h /= tr;
  Eigen::SelfAdjointEigenSolver<CMatrix> es(h);
  const double lo = es.eigenvalues().minCoeff();
  if (lo < -psd_tolerance)
    throw InvariantError("sme_step: eigenvalue " + std::to_string(lo) +
                         " after step; dt too large");
  if (lo < tol::psd) {
    RVector ev = es.eigenvalues().cwiseMax(0.0);
    ev /= ev.sum();
    h = es.eigenvectors() * ev.cast<cplx>().asDiagonal() *
        es.eigenvectors().adjoint();
    h = hermitize(h);
    h /= h.trace().real();
  }
  return DensityMatrix(h);
}

inline SmeStep sme_step(const DensityMatrix& rho, const CMatrix& H,
                        const CMatrix& X, const CMatrix& c, double gamma,
                        double k, double dt, double dW,
                        DissipatorConvention conv =
                            DissipatorConvention::printed,
                        BackactionSign sign = BackactionSign::dephasing,
                        double psd_tolerance = 0.5) {
  if (!(dt > 0.0)) throw DomainError("sme_step: dt must be positive");
  if (!(k > 0.0)) throw DomainError("sme_step: measurement rate must be > 0");
  const double ex = expectation(X, rho.matrix());
  const double dr = ex * dt + dW / std::sqrt(8.0 * k);
  if (sign == BackactionSign::literal) {
    const CMatrix d =
        sme_increment(rho.matrix(), H, X, c, gamma, k, dt, dW, conv, sign);
    return {project_state(rho.matrix() + d, psd_tolerance), dr};
  }
  // Kraus form of the Euler step: with K = L - <L>, M rho M† expands to
  // rho - i[H, rho]dt + H[L]rho dW + D[L]rho dW², i.e. Euler plus the
  // zero-mean D[L]rho (dW² - dt). It is positive by construction, so no
  // clipping bias enters ensemble means.
  require_same_dim(rho.matrix(), H, "sme_step");
  require_same_dim(rho.matrix(), X, "sme_step");
  const int n = static_cast<int>(rho.matrix().rows());
  const cplx I(0.0, 1.0);
  const CMatrix K = std::sqrt(2.0 * k) * (X - ex * CMatrix::Identity(n, n));
  const bool jumps = c.size() != 0 && gamma != 0.0;
  if (jumps) require_same_dim(rho.matrix(), c, "sme_step");
  CMatrix M = CMatrix::Identity(n, n) - I * H * dt - 0.5 * K * K * (dW * dW) +
              K * dW;
  if (jumps) M -= gamma * c.adjoint() * c * dt;
  CMatrix next = M * rho.matrix() * M.adjoint();
  if (jumps) {
    const CMatrix J =
        conv == DissipatorConvention::printed ? CMatrix(c.adjoint()) : c;
    next += 2.0 * gamma * dt * J * rho.matrix() * J.adjoint();
  }
  return {project_state(next, psd_tolerance), dr};
}

struct TrajectoryRecord {
  std::vector<double> times;
  std::vector<DensityMatrix> states;      ///< one per time
  std::vector<ControlVector> controls;    ///< control applied on each step
  std::vector<double> dr;                 ///< one per step
  std::vector<double> dW;                 ///< one per step

  std::size_t steps() const { return dr.size(); }
};

inline int step_count(double T, double dt) {
  if (!(T > 0.0)) throw DomainError("horizon T must be positive");
  if (!(dt > 0.0) || dt > T * (1.0 + 1e-12))
    throw DomainError("time step must satisfy 0 < dt <= T");
  return static_cast<int>(std::llround(std::ceil(T / dt - 1e-9)));
}

/// Steps the SME under a protocol with the given noise increments (one per
/// step). A relaxed control with an alternate observable is realized by
/// alternating the observable on successive steps.
template <class Noise>
TrajectoryRecord simulate_trajectory_with(
    const ControlProtocol<DensityMatrix>& protocol, const DensityMatrix& rho0,
    double T, int steps, const SmeModel& model, Noise&& noise,
    const std::optional<ControlRegion>& region = std::nullopt) {
  const double dt = T / steps;
  TrajectoryRecord rec;
  rec.times.reserve(static_cast<std::size_t>(steps) + 1);
  rec.states.reserve(static_cast<std::size_t>(steps) + 1);
  rec.times.push_back(0.0);
  rec.states.push_back(rho0);
  for (int j = 0; j < steps; ++j) {
    const double t = j * dt;
    const DensityMatrix& rho = rec.states.back();
    ControlVector v = region ? evaluate_protocol(protocol, t, rho, *region)
                             : protocol(t, rho);
    if (!v.is_finite())
      throw InvariantError("protocol returned non-finite control at t=" +
                           std::to_string(t));
    const UnitaryParams& op =
        (v.alternate && j % 2 == 1) ? *v.alternate : v.obs;
    const CMatrix X = observable_from(op).matrix();
    require_same_dim(rho.matrix(), X, "simulate_trajectory");
    const CMatrix H = model.hamiltonian(v);
    const double dW = noise(j, dt);
    SmeStep s = sme_step(rho, H, X, model.c, model.gamma, model.k, dt, dW,
                         model.convention, model.backaction,
                         model.psd_tolerance);
    rec.controls.push_back(std::move(v));
    rec.dr.push_back(s.dr);
    rec.dW.push_back(dW);
    rec.times.push_back((j + 1) * dt);
    rec.states.push_back(std::move(s.rho));
  }
  return rec;
}

inline TrajectoryRecord simulate_trajectory(
    const ControlProtocol<DensityMatrix>& protocol, const DensityMatrix& rho0,
    double T, double dt, NoiseStream stream, const SmeModel& model,
    const std::optional<ControlRegion>& region = std::nullopt) {
  const int n = step_count(T, dt);
  return simulate_trajectory_with(
      protocol, rho0, T, n, model,
      [&](int, double h) { return wiener_increment(stream, h); }, region);
}

inline TrajectoryRecord simulate_trajectory(
    const ControlProtocol<DensityMatrix>& protocol, const DensityMatrix& rho0,
    const BrownianPath& path, int steps, const SmeModel& model,
    const std::optional<ControlRegion>& region = std::nullopt) {
  const std::vector<double> inc = path.increments(steps);
  return simulate_trajectory_with(
      protocol, rho0, path.horizon(), steps, model,
      [&](int j, double) { return inc[static_cast<std::size_t>(j)]; }, region);
}

/// Simulates n trajectories with streams base_stream .. base_stream+n-1.
inline std::vector<TrajectoryRecord> simulate_ensemble(
    const ControlProtocol<DensityMatrix>& protocol, const DensityMatrix& rho0,
    double T, double dt, std::uint64_t seed, std::size_t n,
    const SmeModel& model, int workers = 1, std::uint64_t base_stream = 0) {
  std::vector<TrajectoryRecord> out(n);
  parallel_for(n, workers, [&](std::size_t i) {
    out[i] = simulate_trajectory(protocol, rho0, T, dt,
                                 NoiseStream(seed, base_stream + i), model);
  });
  return out;
}

struct EnsembleAverage {
  std::vector<double> times;
  std::vector<DensityMatrix> mean;
  std::vector<RMatrix> stderr_re;
  std::vector<RMatrix> stderr_im;
};

inline EnsembleAverage ensemble_average(
    const std::vector<TrajectoryRecord>& trajs) {
  if (trajs.empty()) throw DomainError("ensemble_average: empty input");
  const auto& t0 = trajs.front().times;
  for (const auto& tr : trajs)
    if (tr.times.size() != t0.size() ||
        (!t0.empty() && std::abs(tr.times.back() - t0.back()) > 1e-12))
      throw DomainError("ensemble_average: trajectories have different times");
  const double n = static_cast<double>(trajs.size());
  EnsembleAverage out;
  out.times = t0;
  for (std::size_t s = 0; s < t0.size(); ++s) {
    const int d = trajs.front().states[s].dim();
    CMatrix sum = CMatrix::Zero(d, d);
    RMatrix sq_re = RMatrix::Zero(d, d), sq_im = RMatrix::Zero(d, d);
    for (const auto& tr : trajs) sum += tr.states[s].matrix();
    const CMatrix mean = sum / n;
    for (const auto& tr : trajs) {
      const CMatrix dev = tr.states[s].matrix() - mean;
      sq_re += dev.real().cwiseAbs2();
      sq_im += dev.imag().cwiseAbs2();
    }
    const double denom = n > 1 ? n * (n - 1) : 1.0;
    out.mean.push_back(DensityMatrix::normalized(mean));
    out.stderr_re.push_back((sq_re / denom).cwiseSqrt());
    out.stderr_im.push_back((sq_im / denom).cwiseSqrt());
  }
  return out;
}

inline void write_csv(std::ostream& os, const TrajectoryRecord& rec) {
  if (rec.states.empty()) return;
  const int d = rec.states.front().dim();
  const auto ncontrol =
      rec.controls.empty() ? Eigen::Index(0) : rec.controls.front().flat_size();
  os << "t";
  for (int i = 0; i < d; ++i)
    for (int j = i; j < d; ++j)
      os << ",rho" << i << j << "_re,rho" << i << j << "_im";
  os << ",dr,dW";
  for (Eigen::Index c = 0; c < ncontrol; ++c) os << ",u" << c;
  os << "\n";
  std::ostringstream line;
  line << std::setprecision(12);
  for (std::size_t s = 0; s < rec.states.size(); ++s) {
    line.str("");
    line << rec.times[s];
    const CMatrix& m = rec.states[s].matrix();
    for (int i = 0; i < d; ++i)
      for (int j = i; j < d; ++j)
        line << "," << m(i, j).real() << "," << m(i, j).imag();
    // The final row is a state with no step after it.
    if (s < rec.steps()) {
      line << "," << rec.dr[s] << "," << rec.dW[s];
      const RVector f = rec.controls[s].flat();
      for (Eigen::Index c = 0; c < f.size(); ++c) line << "," << f(c);
    } else {
      line << ",,";
      for (Eigen::Index c = 0; c < ncontrol; ++c) line << ",";
    }
    os << line.str() << "\n";
  }
}

// ------------------------------------------------- generic Ito dynamics

struct StatePath {
  std::vector<double> times;
  std::vector<RVector> states;
  std::vector<ControlVector> controls;
  std::vector<RVector> dW;
};

template <class Noise>
StatePath simulate_sde_with(const Dynamics& dyn,
                            const ControlProtocol<RVector>& protocol,
                            const RVector& x0, double t0, double T, int steps,
                            Noise&& noise) {
  if (x0.size() != dyn.state_dim)
    throw DimensionError("simulate_sde: initial state has wrong dimension");
  if (!(T > t0)) throw DomainError("simulate_sde: need T > t0");
  const double dt = (T - t0) / steps;
  StatePath path;
  path.times.push_back(t0);
  path.states.push_back(x0);
  for (int j = 0; j < steps; ++j) {
    const double t = t0 + j * dt;
    const RVector& x = path.states.back();
    ControlVector v = protocol(t, x);
    RVector dw(dyn.noise_dim);
    for (int m = 0; m < dyn.noise_dim; ++m) dw(m) = noise(j, m, dt);
    RVector next = x + dyn.a(t, x, v) * dt;
    if (dyn.noise_dim > 0) next += dyn.b(t, x, v) * dw;
    if (dyn.project) next = dyn.project(next);
    if (!next.allFinite())
      throw NumericalError("simulate_sde: state became non-finite at t=" +
                           std::to_string(t));
    path.controls.push_back(std::move(v));
    path.dW.push_back(std::move(dw));
    path.times.push_back(t0 + (j + 1) * dt);
    path.states.push_back(std::move(next));
  }
  return path;
}

inline StatePath simulate_sde(const Dynamics& dyn,
                              const ControlProtocol<RVector>& protocol,
                              const RVector& x0, double t0, double T,
                              double dt, NoiseStream stream) {
  const int n = step_count(T - t0, dt);
  return simulate_sde_with(dyn, protocol, x0, t0, T, n,
                           [&](int, int, double h) {
                             return wiener_increment(stream, h);
                           });
}

/// The SME as a real-coordinate Dynamics over flatten(ρ). Drift and the
/// single noise column reproduce sme_increment before renormalization.
inline Dynamics sme_dynamics(const SmeModel& model) {
  const int n = model.dim();
  Dynamics d;
  d.state_dim = 2 * n * n;
  d.noise_dim = 1;
  d.drift = [model, n](double, const RVector& x, const ControlVector& v) {
    const CMatrix rho = unflatten(x, n);
    const CMatrix X = observable_from(v.obs).matrix();
    return flatten(sme_increment(rho, model.hamiltonian(v), X, model.c,
                                 model.gamma, model.k, 1.0, 0.0,
                                 model.convention, model.backaction));
  };
  d.diffusion = [model, n](double, const RVector& x, const ControlVector& v) {
    const CMatrix rho = unflatten(x, n);
    const CMatrix X = observable_from(v.obs).matrix();
    const double ex = expectation(X, rho);
    RMatrix b(2 * n * n, 1);
    b.col(0) = flatten(std::sqrt(2.0 * model.k) *
                       (X * rho + rho * X - 2.0 * ex * rho));
    return b;
  };
  return d;
}

}  // namespace qfc
