#include <gtest/gtest.h>

#include <iostream>

#include "dmerl/oracles.hpp"

using namespace dmerl;

namespace {

void expect_passed(const SuiteReport& r) {
  for (const auto& c : r.checks) {
    EXPECT_TRUE(c.passed) << r.suite << ": " << c.name << " measured " << c.measured << " tol " << c.tolerance;
  }
  EXPECT_TRUE(r.passed());
}

}  // namespace

TEST(Quadrature, GaussHermiteFourthMoment) {
  EXPECT_NEAR(gauss_hermite(20).integrate([](double x) { return x * x * x * x; }), 3.0, 1e-10);
}

TEST(RklOracle, HalfSquareRewardGivesTheta) {
  for (double theta : {-1.3, 0.0, 0.4, 2.5})
    EXPECT_NEAR(oracle_rkl_gradient(theta, 1.0, {-0.5, 0.0, 0.0}, 0.0), theta, 1e-12);
}

TEST(DpiOracle, HandTables) {
  // Independent uniform chain under p, point mass x0 = 0 under q on a 2-point grid.
  const std::vector<double> p(8, 0.125);
  std::vector<double> q(8, 0.0);
  q[0] = 1.0;
  const auto kl = oracle_dpi(q, p, 2);
  EXPECT_NEAR(kl.marginal, std::log(2.0), 1e-15);
  EXPECT_NEAR(kl.joint, std::log(8.0), 1e-15);
}

TEST(DpiOracle, SupportViolationIsInfinite) {
  const std::vector<double> q{0.5, 0.5}, p{1.0, 0.0};
  EXPECT_TRUE(std::isinf(enumerated_kl(q, p)));
}

TEST(WpoOracle, RejectsNegativeCurvature) {
  EXPECT_THROW((void)oracle_wpo(0.0, 1.0, -0.5, 0.0, 0.0), ContractViolation);
}

TEST(WpoOracle, ZeroTemperatureExample) {
  const auto g = oracle_wpo(1.0, 0.5, 1.0, 0.0, 0.0);
  EXPECT_DOUBLE_EQ(g.mu, 4.0);
}

TEST(Suites, GradPasses) { expect_passed(run_grad_suite()); }
TEST(Suites, LvPasses) { expect_passed(run_lv_suite()); }
TEST(Suites, DpiPasses) { expect_passed(run_dpi_suite()); }
TEST(Suites, WpoPasses) { expect_passed(run_wpo_suite()); }
TEST(Suites, DiffusionPasses) { expect_passed(run_diffusion_suite()); }
TEST(Suites, EntropyPasses) { expect_passed(run_entropy_suite()); }

TEST(Suites, LvCatchesMissingHalf) {
  const LvLossFn broken = [](std::span<const double> ell, std::span<const double> w) {
    auto r = lv_loss(ell, w, LvVariance::population);
    for (double& d : r.d_ell) d *= 2.0;
    return r;
  };
  EXPECT_FALSE(run_lv_suite(broken, 2, 10).passed());
}

TEST(Suites, LvCatchesSampleVarianceScaling) {
  const LvLossFn broken = [](std::span<const double> ell, std::span<const double> w) {
    return lv_loss(ell, w, LvVariance::sample);
  };
  EXPECT_FALSE(run_lv_suite(broken, 2, 10).passed());
}

TEST(Suites, LvCatchesSignFlip) {
  const LvLossFn broken = [](std::span<const double> ell, std::span<const double> w) {
    auto r = lv_loss(ell, w, LvVariance::population);
    for (double& d : r.d_ell) d = -d;
    return r;
  };
  EXPECT_FALSE(run_lv_suite(broken, 2, 10).passed());
}

TEST(Suites, UnknownSelectorRefused) { EXPECT_THROW(run_verify("nope"), ConfigError); }
