#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "qfc/control.hpp"

using namespace qfc;

namespace {

ControlVector obs_control(double theta01, double a = 1.0) {
  auto p = UnitaryParams::identity({a, 0, -a});
  p.angles[0] = theta01;
  return ControlVector::observable(p);
}

const DensityMatrix kRho = DensityMatrix::maximally_mixed(3);

}  // namespace

TEST(ControlVector, FlatRoundTrip) {
  ControlVector v = obs_control(0.3);
  v.mu = RVector::Constant(2, 0.5);
  const RVector f = v.flat();
  ASSERT_EQ(f.size(), 2 + 6 + 3);
  EXPECT_EQ(v.with_flat(f), v);
  RVector g = f;
  g(2) = 1.1;
  EXPECT_DOUBLE_EQ(v.with_flat(g).obs.angles[0], 1.1);
  EXPECT_THROW(v.with_flat(RVector::Zero(3)), DimensionError);
}

TEST(ControlVector, NonFiniteDetected) {
  ControlVector v = ControlVector::scalar(std::nan(""));
  EXPECT_FALSE(v.is_finite());
  EXPECT_TRUE(ControlVector::scalar(2.0).is_finite());
}

TEST(ControlRegion, RejectsInvertedBounds) {
  EXPECT_THROW(ControlRegion::box(ControlVector::scalar(1.0),
                                  ControlVector::scalar(0.0)),
               InvariantError);
}

TEST(ControlRegion, BoxMembership) {
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_TRUE(r.contains(ControlVector::scalar(0.5)));
  EXPECT_TRUE(r.contains(ControlVector::scalar(1.0)));
  EXPECT_FALSE(r.contains(ControlVector::scalar(1.1)));
  EXPECT_FALSE(r.contains(ControlVector::scalar(std::nan(""))));
}

TEST(ControlRegion, DiscreteMembership) {
  const auto r = ControlRegion::finite({obs_control(0.0), obs_control(1.0)});
  EXPECT_TRUE(r.contains(obs_control(1.0)));
  EXPECT_FALSE(r.contains(obs_control(0.5)));
  ControlVector relaxed = obs_control(0.0);
  relaxed.alternate = obs_control(1.0).obs;
  EXPECT_FALSE(r.contains(relaxed));
}

TEST(EvaluateProtocol, ConstantReturnsPayload) {
  const auto v = obs_control(0.0, 0.2);
  const auto p = ControlProtocol<DensityMatrix>::constant(v);
  const auto r = ControlRegion::finite({v});
  for (double t : {0.0, 0.3, 1.0}) EXPECT_EQ(evaluate_protocol(p, t, kRho, r), v);
}

TEST(EvaluateProtocol, SwitchIsRightContinuous) {
  const auto u1 = ControlVector::scalar(1.0), u2 = ControlVector::scalar(2.0);
  const auto p = ControlProtocol<DensityMatrix>::switching({0.5}, {u1, u2});
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(3.0));
  EXPECT_EQ(evaluate_protocol(p, 0.49, kRho, r), u1);
  EXPECT_EQ(evaluate_protocol(p, 0.5, kRho, r), u2);
  EXPECT_EQ(evaluate_protocol(p, 0.51, kRho, r), u2);
}

TEST(EvaluateProtocol, OutOfRegionIsAnError) {
  const auto p =
      ControlProtocol<DensityMatrix>::constant(ControlVector::scalar(5.0));
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_THROW(evaluate_protocol(p, 0.0, kRho, r), InvariantError);
}

TEST(EvaluateProtocol, FeedbackIsMarkovian) {
  // Depends on (t, ρ) only: identical inputs give identical outputs.
  const auto p = ControlProtocol<DensityMatrix>::feedback(
      "purity", [](double t, const DensityMatrix& rho) {
        return ControlVector::scalar(
            (rho.matrix() * rho.matrix()).trace().real() + t);
      });
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(10.0));
  EXPECT_EQ(evaluate_protocol(p, 0.25, kRho, r),
            evaluate_protocol(p, 0.25, kRho, r));
  EXPECT_NEAR(evaluate_protocol(p, 0.25, kRho, r).mu(0), 1.0 / 3 + 0.25,
              1e-15);
}

TEST(ValidateRegion, AcceptsInRegionProtocol) {
  const auto p = ControlProtocol<DensityMatrix>::switching(
      {0.3, 0.6}, {ControlVector::scalar(0.0), ControlVector::scalar(0.5),
                   ControlVector::scalar(1.0)});
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_TRUE(validate_region(p, r, 50, 1.0,
                              [](int, double) { return kRho; }));
}

TEST(ValidateRegion, RejectsOutOfBoundsConstant) {
  const auto p =
      ControlProtocol<DensityMatrix>::constant(ControlVector::scalar(1.5));
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_FALSE(validate_region(p, r, 5, 1.0, [](int, double) { return kRho; }));
}

TEST(ValidateRegion, CatchesShortExcursion) {
  // The out-of-region segment is shorter than the uniform sample spacing;
  // segment midpoints must still catch it.
  const auto p = ControlProtocol<DensityMatrix>::switching(
      {0.401, 0.402}, {ControlVector::scalar(0.0), ControlVector::scalar(2.0),
                       ControlVector::scalar(0.0)});
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_FALSE(validate_region(p, r, 11, 1.0,
                               [](int, double) { return kRho; }));
}

TEST(ValidateRegion, NeedsSamples) {
  const auto p =
      ControlProtocol<DensityMatrix>::constant(ControlVector::scalar(0.0));
  const auto r = ControlRegion::box(ControlVector::scalar(0.0),
                                    ControlVector::scalar(1.0));
  EXPECT_THROW(validate_region(p, r, 0, 1.0, [](int, double) { return kRho; }),
               DomainError);
}
