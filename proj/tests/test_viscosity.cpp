#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qfc/qutrit.hpp"
#include "qfc/viscosity.hpp"

using namespace qfc;

namespace {

RVector vec(std::initializer_list<double> v) {
  RVector r(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) r(i++) = x;
  return r;
}

RMatrix mat1(double q) { return RMatrix::Constant(1, 1, q); }

// ln y for y <= 1, (y - 1)² for y >= 1.
PiecewiseField log_square_field() {
  FieldPiece left{"log",
                  [](const RVector& x, double) { return std::log(x(0)); },
                  [](const RVector&, double) { return 0.0; },
                  [](const RVector& x, double) { return RVector(RVector::Constant(1, 1 / x(0))); },
                  [](const RVector& x, double) {
                    return RMatrix(RMatrix::Constant(1, 1, -1 / (x(0) * x(0))));
                  }};
  FieldPiece right{"square",
                   [](const RVector& x, double) { return (x(0) - 1) * (x(0) - 1); },
                   [](const RVector&, double) { return 0.0; },
                   [](const RVector& x, double) { return RVector(RVector::Constant(1, 2 * (x(0) - 1))); },
                   [](const RVector&, double) { return RMatrix(RMatrix::Constant(1, 1, 2.0)); }};
  PiecewiseField pf;
  pf.time_dependent = false;
  pf.field.state_dim = 1;
  pf.field.pieces = {left, right};
  pf.field.kink_level = [](const RVector& x, double) { return x(0) - 1; };
  pf.field.select = [](const RVector& x, double) { return x(0) <= 1 ? 0 : 1; };
  return pf;
}

bool super_at_one(double p, double Q) {
  return jet_member(log_square_field(), vec({1.0}), 0.0, Jet{0.0, vec({p}), mat1(Q)},
                    JetKind::super);
}

// Expected J⁺(1) of the field above.
bool expected_super(double p, double Q) {
  if (p > 0 && p < 1) return true;
  if (p == 0) return Q >= 2;
  if (p == 1) return Q >= -1;
  return false;
}

}  // namespace

TEST(WorkedExample, OneSidedExpansions) {
  const auto sectors = one_sided_expansions(log_square_field(), vec({1.0}), 0.0);
  ASSERT_EQ(sectors.size(), 2u);
  for (const auto& s : sectors) {
    EXPECT_NEAR(s.value, 0.0, 1e-15);
    if (s.piece == 0) {
      EXPECT_NEAR(s.grad(0), 1.0, 1e-15);
      EXPECT_NEAR(s.hess(0, 0), -1.0, 1e-15);
      EXPECT_LT(s.directions.front().dx(0), 0.0);
    } else {
      EXPECT_NEAR(s.grad(0), 0.0, 1e-15);
      EXPECT_NEAR(s.hess(0, 0), 2.0, 1e-15);
      EXPECT_GT(s.directions.front().dx(0), 0.0);
    }
  }
}

TEST(WorkedExample, PrintedMemberships) {
  EXPECT_TRUE(super_at_one(0.5, -1000));
  EXPECT_FALSE(super_at_one(0.0, 1.9));
  EXPECT_TRUE(super_at_one(0.0, 2.0));
  EXPECT_TRUE(super_at_one(1.0, -1.0));
  EXPECT_FALSE(super_at_one(1.0, -1.1));
  EXPECT_FALSE(super_at_one(-0.01, 100));
  EXPECT_FALSE(super_at_one(1.01, 100));
}

TEST(WorkedExample, SuperJetGridMatchesCharacterization) {
  const auto pf = log_square_field();
  int checked = 0;
  for (int i = 0; i <= 40; ++i) {
    const double p = -0.5 + 0.05 * i;
    for (int k = 0; k <= 24; ++k) {
      const double Q = -1000 + 2000.0 * k / 24;
      for (double qq : {Q, 2.0, -1.0, 1.99, -1.01}) {
        const double pp = std::abs(p) < 1e-12 ? 0.0 : (std::abs(p - 1) < 1e-12 ? 1.0 : p);
        EXPECT_EQ(jet_member(pf, vec({1.0}), 0.0, Jet{0.0, vec({pp}), mat1(qq)},
                             JetKind::super),
                  expected_super(pp, qq))
            << "p=" << pp << " Q=" << qq;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 1000);
}

TEST(WorkedExample, SubJetSetIsEmpty) {
  const auto pf = log_square_field();
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> p(-2, 3), Q(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i)
    EXPECT_FALSE(jet_member(pf, vec({1.0}), 0.0, Jet{0.0, vec({p(rng)}), mat1(Q(rng))},
                            JetKind::sub));
  EXPECT_TRUE(sample_jets(pf, vec({1.0}), 0.0, JetKind::sub).empty());
}

TEST(WorkedExample, SampledSuperJetsAreMembersAndMonotone) {
  const auto pf = log_square_field();
  const auto jets = sample_jets(pf, vec({1.0}), 0.0, JetKind::super);
  ASSERT_GT(jets.size(), 100u);
  std::mt19937_64 rng(5);
  std::exponential_distribution<double> bump(0.1);
  for (const auto& j : jets) {
    EXPECT_GE(j.p(0), -1e-9);
    EXPECT_LE(j.p(0), 1 + 1e-9);
    Jet b = j;
    b.Q(0, 0) += bump(rng);
    EXPECT_TRUE(jet_member(pf, vec({1.0}), 0.0, b, JetKind::super));
  }
}

namespace {

// C(x, t) = x1² e^{t} + x1 x2 on a single smooth piece.
PiecewiseField smooth_field() {
  FieldPiece p{"smooth",
               [](const RVector& x, double t) { return x(0) * x(0) * std::exp(t) + x(0) * x(1); },
               [](const RVector& x, double t) { return x(0) * x(0) * std::exp(t); },
               [](const RVector& x, double t) {
                 return RVector(vec({2 * x(0) * std::exp(t) + x(1), x(0)}));
               },
               [](const RVector&, double t) {
                 RMatrix h(2, 2);
                 h << 2 * std::exp(t), 1, 1, 0;
                 return h;
               }};
  return PiecewiseField{CostField::smooth(2, p)};
}

}  // namespace

TEST(JetMembership, SuperAndSubMeetAtClassicalDerivatives) {
  const auto pf = smooth_field();
  const RVector x = vec({0.7, -0.3});
  const double t = 0.2;
  const auto q = query_cost_field(pf.field, x, t);
  std::mt19937_64 rng(11);
  std::normal_distribution<double> z(0, 1);
  int both = 0;
  for (int i = 0; i < 300; ++i) {
    // Half the draws sit exactly on the classical first-order data.
    const double s = i % 2 ? 1e-3 : 0.0;
    Jet j{q.dCdt + s * z(rng), q.grad + s * RVector(vec({z(rng), z(rng)})), q.hess};
    const bool sup = jet_member(pf, x, t, j, JetKind::super);
    const bool sub = jet_member(pf, x, t, j, JetKind::sub);
    if (sup && sub) {
      ++both;
      EXPECT_NEAR(j.q, q.dCdt, 1e-8);
      EXPECT_LE((j.p - q.grad).cwiseAbs().maxCoeff(), 1e-8);
    }
  }
  EXPECT_EQ(both, 150);
}

TEST(JetMembership, HessianOrderAtSmoothPoint) {
  const auto pf = smooth_field();
  const RVector x = vec({0.7, -0.3});
  const auto q = query_cost_field(pf.field, x, 0.0);
  RMatrix bump(2, 2);
  bump << 0.5, 0.2, 0.2, 0.1;  // PSD
  EXPECT_TRUE(jet_member(pf, x, 0.0, Jet{q.dCdt, q.grad, q.hess + bump}, JetKind::super));
  EXPECT_FALSE(jet_member(pf, x, 0.0, Jet{q.dCdt, q.grad, q.hess + bump}, JetKind::sub));
  EXPECT_TRUE(jet_member(pf, x, 0.0, Jet{q.dCdt, q.grad, q.hess - bump}, JetKind::sub));
  RMatrix indefinite(2, 2);
  indefinite << 1, 0, 0, -1;
  EXPECT_FALSE(jet_member(pf, x, 0.0, Jet{q.dCdt, q.grad, q.hess + indefinite}, JetKind::super));
  EXPECT_FALSE(jet_member(pf, x, 0.0, Jet{q.dCdt, q.grad, q.hess + indefinite}, JetKind::sub));
}

TEST(JetMembership, RejectsMalformedJets) {
  const auto pf = smooth_field();
  EXPECT_THROW(jet_member(pf, vec({0.1, 0.1}), 0, Jet{0, vec({1}), mat1(0)}, JetKind::super),
               DimensionError);
  RMatrix asym(2, 2);
  asym << 0, 1, 0, 0;
  EXPECT_THROW(jet_member(pf, vec({0.1, 0.1}), 0, Jet{0, vec({1, 1}), asym}, JetKind::super),
               InvariantError);
}

namespace {

// Frozen dynamics with running cost -x², so G = x² and C = x²(t - 1) + x²
// solves dC/dt = G.
Dynamics frozen1() {
  Dynamics d;
  d.state_dim = 1;
  d.drift = [](double, const RVector&, const ControlVector&) { return RVector(RVector::Zero(1)); };
  return d;
}

}  // namespace

TEST(ViscosityPoint, SmoothPointReducesToClassicalResidual) {
  const RunningCost L = [](double, const RVector& x, const ControlVector&) {
    return -x(0) * x(0);
  };
  const auto region = ControlRegion::box(ControlVector::scalar(0), ControlVector::scalar(1));
  const auto F = hjb_functional(frozen1(), region, L);
  auto field = [](double c) {
    FieldPiece p{"quad",
                 [c](const RVector& x, double t) { return c * x(0) * x(0) * (t - 1) + x(0) * x(0); },
                 [c](const RVector& x, double) { return c * x(0) * x(0); },
                 [c](const RVector& x, double t) {
                   return RVector(RVector::Constant(1, 2 * c * x(0) * (t - 1) + 2 * x(0)));
                 },
                 [c](const RVector&, double t) {
                   return RMatrix(RMatrix::Constant(1, 1, 2 * c * (t - 1) + 2));
                 }};
    return PiecewiseField{CostField::smooth(1, p)};
  };
  const auto good = viscosity_point_check(F, field(1.0), vec({0.5}), 0.3);
  EXPECT_TRUE(good.ok);
  EXPECT_TRUE(good.smooth);
  EXPECT_LE(good.worst, 1e-12);
  const auto bad = viscosity_point_check(F, field(1.1), vec({0.5}), 0.3);
  EXPECT_FALSE(bad.ok);
  ASSERT_TRUE(bad.violating.has_value());
}

namespace {

struct QutritKink {
  qutrit::QutritModel m;
  RVector x;
  double t;
};

// A point on the switching surface: T - t = τ(λ1, λ2).
QutritKink qutrit_kink() {
  QutritKink k;
  const double l2 = 0.02, l1 = l2 * std::exp(0.04);
  k.x = vec({l1, l2});
  k.t = k.m.T - qutrit::switching_time(l1, l2, k.m.a);
  return k;
}

ViscosityOptions quick() {
  ViscosityOptions o;
  o.sampler.samples = 300;
  o.sampler.max_evaluations = 12;
  return o;
}

}  // namespace

TEST(ViscosityPoint, QutritKinkIsViscositySolution) {
  const auto k = qutrit_kink();
  PiecewiseField pf{qutrit::piecewise_field(k.m)};
  ASSERT_TRUE(pf.field.at_kink(k.x, k.t));
  const auto F = hjb_functional(qutrit::eigen_system(k.m), qutrit::unitary_region(k.m.a),
                                RunningCost{}, MaximizeOptions{4, {}});
  const auto c = viscosity_point_check(F, pf, k.x, k.t, quick());
  EXPECT_TRUE(c.ok) << c.detail;
  EXPECT_FALSE(c.smooth);
  EXPECT_TRUE(c.continuous);
  EXPECT_GT(c.super_checked, 0);
  EXPECT_GT(c.sub_checked, 0);
}

TEST(ViscosityPoint, QutritKinkSuperJetsAreMonotone) {
  const auto k = qutrit_kink();
  PiecewiseField pf{qutrit::piecewise_field(k.m)};
  const auto jets = sample_jets(pf, k.x, k.t, JetKind::super, {200, 1, 24});
  ASSERT_FALSE(jets.empty());
  std::mt19937_64 rng(9);
  std::normal_distribution<double> z(0, 1);
  for (const auto& j : jets) {
    RVector r(2);
    r << z(rng), z(rng);
    Jet b = j;
    b.Q += r * r.transpose();
    EXPECT_TRUE(jet_member(pf, k.x, k.t, b, JetKind::super));
  }
}

TEST(ViscosityPoint, GluedFieldsWithWrongCoefficientFail) {
  const auto k = qutrit_kink();
  const auto F = hjb_functional(qutrit::eigen_system(k.m), qutrit::unitary_region(k.m.a),
                                RunningCost{}, MaximizeOptions{4, {}});
  for (auto field : {qutrit::piecewise_field(k.m, 2.0, 1.1),
                     qutrit::piecewise_field(k.m, 2.1, 1.0)}) {
    const auto c = viscosity_point_check(F, PiecewiseField{field}, k.x, k.t, quick());
    EXPECT_FALSE(c.ok);
    EXPECT_FALSE(c.continuous);
  }
}

TEST(ViscosityPoint, PrintedOrientationRejectsQutritKink) {
  // Super-jets with a large Q drive F far below zero.
  const auto k = qutrit_kink();
  PiecewiseField pf{qutrit::piecewise_field(k.m)};
  const auto F = hjb_functional(qutrit::eigen_system(k.m), qutrit::unitary_region(k.m.a),
                                RunningCost{}, MaximizeOptions{4, {}});
  auto opt = quick();
  opt.orientation = ViscosityOrientation::printed;
  EXPECT_FALSE(viscosity_point_check(F, pf, k.x, k.t, opt).ok);
}

// Classical fields pass the enhanced test with the same verdict as classic.
TEST(VerifyEnhanced, SmoothFieldAgreesWithClassic) {
  const double T = 1.0;
  Dynamics d;
  d.state_dim = 1;
  d.drift = [](double, const RVector& x, const ControlVector& v) {
    return RVector(-v.mu(0) * x);
  };
  FieldPiece p{"decay",
               [T](const RVector& x, double t) { return x(0) * std::exp(-(T - t)); },
               [T](const RVector& x, double t) { return x(0) * std::exp(-(T - t)); },
               [T](const RVector&, double t) { return RVector(RVector::Constant(1, std::exp(-(T - t)))); },
               [](const RVector&, double) { return RMatrix(RMatrix::Zero(1, 1)); }};
  PiecewiseField pf{CostField::smooth(1, p, T)};
  StateTimeGrid g;
  g.axes = {StateTimeGrid::linspace(0.1, 2.0, 6)};
  g.times = StateTimeGrid::linspace(0.0, T, 6);
  NominalPath path;
  for (int i = 0; i <= 10; ++i) {
    path.times.push_back(0.1 * i);
    path.states.push_back(vec({std::exp(-0.1 * i)}));
  }
  const auto region = ControlRegion::box(ControlVector::scalar(0), ControlVector::scalar(1));
  const TerminalCost M = [](const RVector& x) { return x(0); };
  const auto best = verify_enhanced(ControlProtocol<RVector>::constant(ControlVector::scalar(1)),
                                    pf, path, g, region, d, RunningCost{}, M);
  EXPECT_EQ(best.verdict, Verdict::optimal);
  EXPECT_EQ(best.method, "enhanced");
  EXPECT_EQ(best.extra["kink_points"], 0u);
  const auto half = verify_enhanced(ControlProtocol<RVector>::constant(ControlVector::scalar(0.5)),
                                    pf, path, g, region, d, RunningCost{}, M);
  EXPECT_EQ(half.verdict, Verdict::not_optimal);
  EXPECT_FALSE(half.protocol_maximizes_G);
  EXPECT_TRUE(half.extra["condition1"].get<bool>());
}
