#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "qfc/sde.hpp"
#include "test_util.hpp"

using namespace qfc;

namespace {

CMatrix sigma_z() { return Observable::diagonal({1.0, -1.0}).matrix(); }

ControlVector sigma_z_control() {
  return ControlVector::observable(UnitaryParams::identity({1.0, -1.0}));
}

SmeModel bare_model(double k = 1.0) {
  SmeModel m;
  m.k = k;
  return m;
}

DensityMatrix coherent_qubit() {
  CVector psi(2);
  psi << std::sqrt(0.7), std::polar(std::sqrt(0.3), 0.4);
  const CMatrix pure = psi * psi.adjoint();
  return DensityMatrix::normalized(0.9 * pure + 0.05 * CMatrix::Identity(2, 2));
}

}  // namespace

TEST(Wiener, MeanAndVariance) {
  NoiseStream s(42, 0);
  const double dt = 0.01;
  const int n = 1000000;
  double sum = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = wiener_increment(s, dt);
    sum += w;
    sq += w * w;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  EXPECT_LT(std::abs(mean), 4.0 * std::sqrt(dt / n));
  EXPECT_LT(std::abs(var / dt - 1.0), 0.01);
}

TEST(Wiener, Deterministic) {
  NoiseStream a(7, 3), b(7, 3), c(7, 4);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const double x = wiener_increment(a, 0.1);
    EXPECT_EQ(x, wiener_increment(b, 0.1));
    differs |= x != wiener_increment(c, 0.1);
  }
  EXPECT_TRUE(differs);
}

TEST(Wiener, RejectsNonPositiveDt) {
  NoiseStream s(1, 0);
  EXPECT_THROW(wiener_increment(s, 0.0), DomainError);
  EXPECT_THROW(wiener_increment(s, -1.0), DomainError);
}

TEST(Wiener, ItoConsistency) {
  NoiseStream s(11, 0);
  const int n = 200000;
  const double dt = 1e-3;
  double sq = 0.0;
  for (int i = 0; i < n; ++i) {
    const double w = wiener_increment(s, dt);
    sq += w * w;
  }
  EXPECT_LT(std::abs(sq / (n * dt) - 1.0), 4.0 / std::sqrt(n));
}

TEST(BrownianPath, CoarseningSumsChildren) {
  BrownianPath p(NoiseStream(5, 0), 1.0, 8);
  const auto fine = p.increments(8), coarse = p.increments(4);
  for (int i = 0; i < 4; ++i)
    EXPECT_DOUBLE_EQ(coarse[i], fine[2 * i] + fine[2 * i + 1]);
  EXPECT_THROW(p.increments(3), DomainError);
}

TEST(SmeStep, PointerStateIsFixed) {
  const CMatrix X = Observable::diagonal({1.0, 0.0, -1.0}).matrix();
  const auto rho = DensityMatrix::diagonal({0.5, 0.3, 0.2});
  const auto s = sme_step(rho, CMatrix::Zero(3, 3), X, CMatrix(), 0.0, 1.0,
                          1e-3, 0.0);
  EXPECT_LT(max_abs(s.rho.matrix() - rho.matrix()), 1e-15);
}

TEST(SmeStep, DeterministicPartIsBackaction) {
  std::mt19937_64 rng(12);
  const CMatrix X = testutil::random_hermitian(3, rng);
  const auto rho = testutil::random_density(3, rng);
  const double dt = 1e-4;
  const CMatrix D = dissipator(X, rho.matrix());
  const auto lit = sme_step(rho, CMatrix::Zero(3, 3), X, CMatrix(), 0.0, 1.0,
                            dt, 0.0, DissipatorConvention::printed,
                            BackactionSign::literal);
  EXPECT_LT(max_abs(lit.rho.matrix() - rho.matrix() + D * dt), dt * dt);
  // The dephasing step carries the backaction in D[X]rho dW², so average
  // the antithetic pair dW = ±sqrt(dt).
  auto deph = [&](double dW) {
    return sme_step(rho, CMatrix::Zero(3, 3), X, CMatrix(), 0.0, 1.0, dt, dW)
        .rho.matrix();
  };
  const CMatrix avg = 0.5 * (deph(std::sqrt(dt)) + deph(-std::sqrt(dt)));
  EXPECT_LT(max_abs(avg - rho.matrix() - D * dt), 100 * dt * dt);
  // Dephasing form equals -k[X,[X,ρ]].
  const CMatrix& r = rho.matrix();
  const CMatrix comm = X * (X * r - r * X) - (X * r - r * X) * X;
  EXPECT_LT(max_abs(D + comm), 1e-12);
}

TEST(SmeStep, InnovationFormsAgree) {
  std::mt19937_64 rng(13);
  const CMatrix X = testutil::random_hermitian(3, rng);
  const CMatrix rho = testutil::random_density(3, rng).matrix();
  const double k = 2.5, dt = 1e-3, dW = 0.03;
  const double ex = expectation(X, rho);
  const double dr = ex * dt + dW / std::sqrt(8.0 * k);
  const CMatrix inn = X * rho + rho * X - 2.0 * ex * rho;
  EXPECT_LT(max_abs(4.0 * k * inn * (dr - ex * dt) -
                    std::sqrt(2.0 * k) * inn * dW),
            1e-12);
  // And sme_step reports that dr.
  const auto s = sme_step(DensityMatrix(rho), CMatrix::Zero(3, 3), X,
                          CMatrix(), 0.0, k, dt, dW);
  EXPECT_DOUBLE_EQ(s.dr, dr);
}

TEST(SmeStep, HamiltonianTermIsCommutator) {
  std::mt19937_64 rng(14);
  const CMatrix H = testutil::random_hermitian(2, rng);
  const auto rho = testutil::random_density(2, rng);
  const double dt = 1e-5;
  const auto s = sme_step(rho, H, CMatrix::Zero(2, 2), CMatrix(), 0.0, 1.0, dt,
                          0.0);
  const cplx I(0, 1);
  const CMatrix want =
      rho.matrix() - I * (H * rho.matrix() - rho.matrix() * H) * dt;
  // Exact up to the second-order H rho H dt² term.
  EXPECT_LT(max_abs(s.rho.matrix() - want), 10 * dt * dt * max_abs(H * H));
}

TEST(SmeStep, InvariantsOverManyRandomSteps) {
  std::mt19937_64 rng(15);
  int steps = 0;
  for (int traj = 0; traj < 100; ++traj) {
    const int n = 2 + traj % 3;
    const CMatrix H = testutil::random_hermitian(n, rng);
    const CMatrix X = 0.5 * testutil::random_hermitian(n, rng);
    const CMatrix c = 0.3 * testutil::random_complex(n, rng);
    DensityMatrix rho = testutil::random_density(n, rng);
    NoiseStream noise(99, static_cast<std::uint64_t>(traj));
    for (int j = 0; j < 1000; ++j, ++steps) {
      const double dt = 1e-3;
      rho = sme_step(rho, H, X, c, 0.5, 1.0, dt, wiener_increment(noise, dt))
                .rho;
      const CMatrix& m = rho.matrix();
      ASSERT_LE(std::abs(m.trace() - 1.0), 1e-12);
      ASSERT_LE(max_abs(m - m.adjoint()), 1e-12);
      ASSERT_GE(eig_sorted(m).values(n - 1), -1e-10);
    }
  }
  EXPECT_EQ(steps, 100000);
}

TEST(SmeStep, Errors) {
  const auto rho = DensityMatrix::maximally_mixed(2);
  EXPECT_THROW(sme_step(rho, CMatrix::Zero(2, 2), sigma_z(), CMatrix(), 0, 1,
                        0.0, 0.0),
               DomainError);
  EXPECT_THROW(sme_step(rho, CMatrix::Zero(3, 3), sigma_z(), CMatrix(), 0, 1,
                        0.1, 0.0),
               DimensionError);
  // A huge plain Euler step drives the state far outside the positive cone.
  EXPECT_THROW(sme_step(coherent_qubit(), CMatrix::Zero(2, 2),
                        sigma_z() * 10.0, CMatrix(), 0, 1, 1.0, 3.0,
                        DissipatorConvention::printed, BackactionSign::literal),
               InvariantError);
  // The Kraus form stays a state.
  EXPECT_NO_THROW(sme_step(coherent_qubit(), CMatrix::Zero(2, 2),
                           sigma_z() * 10.0, CMatrix(), 0, 1, 1.0, 3.0));
}

TEST(Simulate, PointerStateIsConstant) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  const auto rho0 = DensityMatrix::diagonal({1.0, 0.0});
  const auto rec =
      simulate_trajectory(p, rho0, 1.0, 0.01, NoiseStream(1, 0), bare_model());
  ASSERT_EQ(rec.states.size(), 101u);
  ASSERT_EQ(rec.dr.size(), 100u);
  for (const auto& s : rec.states)
    EXPECT_LT(max_abs(s.matrix() - rho0.matrix()), 1e-14);
  for (std::size_t j = 0; j < rec.steps(); ++j) {
    EXPECT_NEAR(rec.times[j + 1] - rec.times[j], 0.01, 1e-15);
    EXPECT_DOUBLE_EQ(rec.dr[j], 1.0 * 0.01 + rec.dW[j] / std::sqrt(8.0));
  }
}

TEST(Simulate, QutritFeedbackDecaysSecondEigenvalue) {
  // X couples the two largest eigenvectors of the current state:
  // X = a(|v0><v1| + |v1><v0|). Second-order perturbation theory gives
  // dλ1/dt = -8a²λ0λ1/(λ0-λ1), dλ0 = -dλ1, λ2 fixed.
  const double a = 0.5;
  UnitaryParams xmax = UnitaryParams::identity({a, 0, -a});
  xmax.angles = {std::numbers::pi / 4, 0, 0, 0, std::numbers::pi / 2, 0};
  const CMatrix u_xmax = unitary_from(xmax);
  {
    CMatrix want = CMatrix::Zero(3, 3);
    want(0, 1) = want(1, 0) = a;
    ASSERT_LT(max_abs(observable_from(xmax).matrix() - want), 1e-12);
  }
  const auto p = ControlProtocol<DensityMatrix>::feedback(
      "xmax", [&](double, const DensityMatrix& rho) {
        const auto e = eig_sorted(rho);
        return ControlVector::observable(
            unitary_params_from(e.vectors * u_xmax, {a, 0, -a}));
      });
  const auto rho0 = DensityMatrix::diagonal({0.9, 0.07, 0.03});
  // λ1 stays above λ2 up to T. The eigenvalues pick up noise of order
  // sqrt(dt) through the dW² - dt fluctuations, so average a few
  // trajectories. λ2 is conserved by the SDE and drifts only at O(dt).
  const double T = 0.25, dt = 2e-5;
  const int n_traj = 8;
  double l1_sim = 0.0;
  for (int w = 0; w < n_traj; ++w) {
    const auto rec = simulate_trajectory(
        p, rho0, T, dt, NoiseStream(3, static_cast<std::uint64_t>(w)),
        bare_model());
    const auto e = eig_sorted(rec.states.back());
    EXPECT_NEAR(e.values(2), 0.03, 1e-6);
    l1_sim += e.values(1) / n_traj;
  }

  // Fine RK4 on the eigenvalue ODE.
  auto f = [&](double l0, double l1) {
    return -8 * a * a * l0 * l1 / (l0 - l1);
  };
  double l0 = 0.9, l1 = 0.07;
  const int n = 20000;
  const double h = T / n;
  for (int i = 0; i < n; ++i) {
    const double k1 = f(l0, l1);
    const double k2 = f(l0 - 0.5 * h * k1, l1 + 0.5 * h * k1);
    const double k3 = f(l0 - 0.5 * h * k2, l1 + 0.5 * h * k2);
    const double k4 = f(l0 - h * k3, l1 + h * k3);
    const double d = h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
    l1 += d;
    l0 -= d;
  }
  EXPECT_NEAR(l1_sim / l1, 1.0, 0.03);
  // Good-control regime: close to the e^{-8a²t} law.
  EXPECT_NEAR(l1_sim / (0.07 * std::exp(-8 * a * a * T)), 1.0, 0.15);
}

TEST(Simulate, SameSeedIsByteIdentical) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  const auto run = [&](std::uint64_t seed) {
    std::ostringstream os;
    write_csv(os, simulate_trajectory(p, coherent_qubit(), 0.5, 0.01,
                                      NoiseStream(seed, 2), bare_model()));
    return os.str();
  };
  EXPECT_EQ(run(8), run(8));
  EXPECT_NE(run(8), run(9));
}

TEST(Simulate, CsvLayout) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  std::ostringstream os;
  write_csv(os, simulate_trajectory(p, coherent_qubit(), 0.02, 0.01,
                                    NoiseStream(1, 0), bare_model()));
  std::istringstream is(os.str());
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header,
            "t,rho00_re,rho00_im,rho01_re,rho01_im,rho11_re,rho11_im,dr,dW,"
            "u0,u1,u2,u3");
  int rows = 0;
  for (std::string line; std::getline(is, line);) ++rows;
  EXPECT_EQ(rows, 3);
}

TEST(Simulate, HorizonErrors) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  EXPECT_THROW(simulate_trajectory(p, coherent_qubit(), 0.0, 0.01,
                                   NoiseStream(1, 0), bare_model()),
               DomainError);
  EXPECT_THROW(simulate_trajectory(p, coherent_qubit(), 1.0, 2.0,
                                   NoiseStream(1, 0), bare_model()),
               DomainError);
}

TEST(Simulate, OutOfRegionProtocolIsRejected) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  auto other = UnitaryParams::identity({1.0, -1.0});
  other.angles[0] = 0.3;
  const auto region =
      ControlRegion::finite({ControlVector::observable(other)});
  EXPECT_THROW(simulate_trajectory(p, coherent_qubit(), 1.0, 0.1,
                                   NoiseStream(1, 0), bare_model(), region),
               InvariantError);
}

TEST(Ensemble, SingleTrajectoryHasZeroError) {
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  const auto rec = simulate_trajectory(p, coherent_qubit(), 0.1, 0.01,
                                       NoiseStream(1, 0), bare_model());
  const auto avg = ensemble_average({rec});
  for (std::size_t s = 0; s < rec.states.size(); ++s) {
    EXPECT_LT(max_abs(avg.mean[s].matrix() - rec.states[s].matrix()), 1e-15);
    EXPECT_EQ(avg.stderr_re[s].maxCoeff(), 0.0);
  }
  EXPECT_THROW(ensemble_average({}), DomainError);
}

class QubitEnsemble : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
    batch_a_ = new EnsembleAverage(ensemble_average(simulate_ensemble(
        p, coherent_qubit(), kT, kDt, 2024, 10000, bare_model(), 4, 0)));
    batch_b_ = new EnsembleAverage(ensemble_average(simulate_ensemble(
        p, coherent_qubit(), kT, kDt, 2024, 10000, bare_model(), 4, 10000)));
  }
  static void TearDownTestSuite() {
    delete batch_a_;
    delete batch_b_;
  }
  static constexpr double kT = 0.5, kDt = 1e-3;
  static inline EnsembleAverage* batch_a_ = nullptr;
  static inline EnsembleAverage* batch_b_ = nullptr;
};

TEST_F(QubitEnsemble, MeanFollowsUnconditionedMasterEquation) {
  // dρ/dt = k D[σz]ρ: populations fixed, coherence decays as e^{-4kt}.
  const CMatrix r0 = coherent_qubit().matrix();
  const auto& avg = *batch_a_;
  for (std::size_t s = 0; s < avg.times.size(); s += 50) {
    const double t = avg.times[s];
    CMatrix want = r0;
    want(0, 1) *= std::exp(-4.0 * t);
    want(1, 0) *= std::exp(-4.0 * t);
    const CMatrix& got = avg.mean[s].matrix();
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        EXPECT_LE(std::abs(got(i, j).real() - want(i, j).real()),
                  3.0 * avg.stderr_re[s](i, j) + 1e-12)
            << "t=" << t << " entry " << i << j;
        EXPECT_LE(std::abs(got(i, j).imag() - want(i, j).imag()),
                  3.0 * avg.stderr_im[s](i, j) + 1e-12)
            << "t=" << t << " entry " << i << j;
      }
  }
}

TEST_F(QubitEnsemble, DisjointBatchesAgree) {
  const auto& a = *batch_a_;
  const auto& b = *batch_b_;
  const std::size_t s = a.times.size() - 1;
  const CMatrix d = a.mean[s].matrix() - b.mean[s].matrix();
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) {
      const double se_re = std::hypot(a.stderr_re[s](i, j), b.stderr_re[s](i, j));
      const double se_im = std::hypot(a.stderr_im[s](i, j), b.stderr_im[s](i, j));
      EXPECT_LE(std::abs(d(i, j).real()), 3.0 * se_re + 1e-12);
      EXPECT_LE(std::abs(d(i, j).imag()), 3.0 * se_im + 1e-12);
    }
}

TEST_F(QubitEnsemble, MeasuredExpectationIsMartingale) {
  const auto& avg = *batch_a_;
  const double z0 = expectation(sigma_z(), coherent_qubit().matrix());
  for (std::size_t s = 0; s < avg.times.size(); s += 100) {
    const double z = expectation(sigma_z(), avg.mean[s].matrix());
    // <σz> = ρ00 - ρ11 = 2ρ00 - 1.
    EXPECT_LE(std::abs(z - z0), 3.0 * 2.0 * avg.stderr_re[s](0, 0) + 1e-12);
  }
}

TEST(Convergence, StrongOrderUnderPathRefinement) {
  // Endpoint errors against a fine refinement of the same Brownian path
  // shrink like dt^(1/2) (strong order of Euler–Maruyama with
  // multiplicative noise).
  const auto p = ControlProtocol<DensityMatrix>::constant(sigma_z_control());
  const double T = 0.5;
  const int fine = 1 << 11;
  const int levels[] = {1 << 5, 1 << 6, 1 << 7, 1 << 8, 1 << 9};
  std::vector<double> err(5, 0.0);
  const int paths = 200;
  for (int w = 0; w < paths; ++w) {
    BrownianPath path(NoiseStream(77, static_cast<std::uint64_t>(w)), T, fine);
    const CMatrix ref = simulate_trajectory(p, coherent_qubit(), path, fine,
                                            bare_model())
                            .states.back()
                            .matrix();
    for (int l = 0; l < 5; ++l)
      err[l] += max_abs(simulate_trajectory(p, coherent_qubit(), path,
                                            levels[l], bare_model())
                            .states.back()
                            .matrix() -
                        ref) /
                paths;
  }
  // Least-squares slope of log(err) against log(dt).
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int l = 0; l < 5; ++l) {
    const double x = std::log(T / levels[l]), y = std::log(err[l]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double slope = (5 * sxy - sx * sy) / (5 * sxx - sx * sx);
  RecordProperty("slope", std::to_string(slope));
  EXPECT_NEAR(slope, 0.5, 0.3 * 0.5);
}

TEST(SmeDynamics, MatchesIncrement) {
  std::mt19937_64 rng(16);
  SmeModel m;
  m.k = 1.7;
  m.h_basis = {Observable(testutil::random_hermitian(3, rng))};
  m.c = testutil::random_complex(3, rng);
  m.gamma = 0.4;
  const auto dyn = sme_dynamics(m);
  ControlVector v;
  v.mu = RVector::Constant(1, 0.8);
  v.obs = UnitaryParams::identity({1.0, 0.2, -0.5});
  v.obs.angles[1] = 0.3;
  const CMatrix rho = testutil::random_density(3, rng).matrix();
  const double dt = 1e-3, dW = -0.02;
  const RVector x = flatten(rho);
  const RVector got = x + dyn.a(0.0, x, v) * dt + dyn.b(0.0, x, v).col(0) * dW;
  const CMatrix X = observable_from(v.obs).matrix();
  const CMatrix want = rho + sme_increment(rho, m.hamiltonian(v), X, m.c,
                                           m.gamma, m.k, dt, dW);
  EXPECT_LT(max_abs(unflatten(got, 3) - want), 1e-14);
}
