#include <cmath>

#include <gtest/gtest.h>

#include "membrane_forge/material.hpp"

using namespace mforge;

namespace {

const MaterialParams kSilicone = MaterialParams::from_kpa(31.5, 39.6, 2.0);

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

}  // namespace

TEST(Gent, ZeroAtIdentity) {
  EXPECT_EQ(gent_energy(1.0, 1.0, kSilicone), 0.0);
  const auto d = gent_derivatives(1.0, 1.0, kSilicone);
  EXPECT_EQ(d.w1, 0.0);
  EXPECT_EQ(d.w2, 0.0);
}

TEST(Gent, HandValueAtTwoOne) {
  // I1 = 4 + 1 + 1/4 = 5.25
  const double expected = -(0.0315 * 39.6 / 2.0) * std::log(1.0 - 2.25 / 39.6);
  EXPECT_NEAR(gent_energy(2.0, 1.0, kSilicone), expected, 1e-15);
}

TEST(Gent, SwapSymmetry) {
  for (double a : {0.6, 1.0, 1.7, 3.1}) {
    for (double b : {0.8, 1.3, 2.2}) {
      EXPECT_EQ(gent_energy(a, b, kSilicone), gent_energy(b, a, kSilicone));
      const auto ab = gent_derivatives(a, b, kSilicone);
      const auto ba = gent_derivatives(b, a, kSilicone);
      EXPECT_DOUBLE_EQ(ab.w1, ba.w2);
      EXPECT_DOUBLE_EQ(ab.w11, ba.w22);
    }
  }
}

TEST(Gent, NonNegativeOnGrid) {
  for (int i = 0; i < 30; ++i) {
    for (int j = 0; j < 30; ++j) {
      const double a = 0.5 + 3.5 * i / 29.0, b = 0.5 + 3.5 * j / 29.0;
      if (!gent_admissible(a, b, kSilicone)) continue;
      EXPECT_GE(gent_energy(a, b, kSilicone), 0.0);
    }
  }
}

TEST(Gent, DerivativesMatchFiniteDifferencesAtReferencePoint) {
  const double a = 1.5, b = 1.2, h = 1e-5;
  auto W = [](double x, double y) { return gent_energy(x, y, kSilicone); };
  const auto d = gent_derivatives(a, b, kSilicone);
  EXPECT_LT(rel_err(d.w1, (W(a + h, b) - W(a - h, b)) / (2 * h)), 1e-6);
  EXPECT_LT(rel_err(d.w2, (W(a, b + h) - W(a, b - h)) / (2 * h)), 1e-6);
  auto W1 = [](double x, double y) { return gent_derivatives(x, y, kSilicone).w1; };
  auto W2 = [](double x, double y) { return gent_derivatives(x, y, kSilicone).w2; };
  EXPECT_LT(rel_err(d.w11, (W1(a + h, b) - W1(a - h, b)) / (2 * h)), 1e-6);
  EXPECT_LT(rel_err(d.w12, (W1(a, b + h) - W1(a, b - h)) / (2 * h)), 1e-6);
  EXPECT_LT(rel_err(d.w22, (W2(a, b + h) - W2(a, b - h)) / (2 * h)), 1e-6);
}

TEST(Gent, W11PositiveInAdmissibleRegion) {
  for (double a = 0.5; a <= 4.0; a += 0.25) {
    for (double b = 0.5; b <= 4.0; b += 0.25) {
      if (!gent_admissible(a, b, kSilicone)) continue;
      EXPECT_GT(gent_derivatives(a, b, kSilicone).w11, 0.0) << a << "," << b;
    }
  }
}

TEST(Gent, DivergesMonotonicallyTowardsLockUp) {
  // Along l2 = 1, I1 grows with l1 > 1.
  const double lock = gent_lockup_stretch(kSilicone);
  double prev = 0.0;
  for (int i = 1; i <= 200; ++i) {
    const double x = 1.0 + (lock - 1.0) * (1.0 - std::pow(0.93, i));
    const double w = gent_energy(x, 1.0, kSilicone);
    EXPECT_GT(w, prev);
    prev = w;
  }
  EXPECT_GT(prev, 10.0 * gent_energy(2.0, 1.0, kSilicone));
}

TEST(Gent, RejectsLockUpAndBadStretch) {
  const double lock = gent_lockup_stretch(kSilicone);
  EXPECT_THROW(gent_energy(lock * 1.01, 1.0, kSilicone), ExtensionLimitExceeded);
  EXPECT_THROW(gent_derivatives(lock * 1.01, 1.0, kSilicone), ExtensionLimitExceeded);
  EXPECT_THROW(gent_energy(-1.0, 1.0, kSilicone), ExtensionLimitExceeded);
  EXPECT_NO_THROW(gent_energy(lock, 1.0, kSilicone));
}

TEST(Material, RingDefaultsAreStiff) {
  MaterialSet m;
  EXPECT_DOUBLE_EQ(m.silicone(2.0).mu, 0.0315);
  EXPECT_DOUBLE_EQ(m.ring(2.0).mu, 3.15);
  EXPECT_DOUBLE_EQ(m.ring(2.0).jm, 1.0);
  EXPECT_THROW((MaterialParams{0.0, 1.0, 1.0}).validate(), InvalidDesign);
}
