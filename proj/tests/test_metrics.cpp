#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "dmerl/metrics.hpp"
#include "dmerl/quadrature.hpp"

using namespace dmerl;

namespace {

Tensor bandit_target_samples(const EnvSpec& spec, std::size_t n, Rng& rng) {
  Tensor out = Tensor::matrix(n, 1);
  std::size_t i = 0;
  while (i < n) {
    const double m = rng.uniform() < 0.5 ? -spec.mode_center : spec.mode_center;
    const double a = m + spec.mode_std * rng.normal();
    if (a < spec.bounds.lo[0] || a > spec.bounds.hi[0]) continue;
    out[i++] = a;
  }
  return out;
}

}  // namespace

TEST(Quadrature, GaussHermiteMoments) {
  for (std::size_t n : {32U, 64U}) {
    const auto rule = gauss_hermite(n);
    for (double w : rule.weights) EXPECT_GT(w, 0.0);
    EXPECT_NEAR(rule.integrate([](double x) { return x * x * x * x; }), 3.0, 1e-10);
    EXPECT_NEAR(rule.integrate([](double x) { return x * x; }), 1.0, 1e-12);
    EXPECT_NEAR(rule.integrate([](double x) { return x * x * x; }), 0.0, 1e-12);
    EXPECT_NEAR(rule.integrate([](double x) { return std::pow(x, 10); }), 945.0, 1e-7);
  }
}

TEST(Quadrature, SimpsonIsExactForCubics) {
  const auto rule = simpson(-1.0, 2.0, 6);
  EXPECT_NEAR(rule.integrate([](double x) { return x * x * x - x; }), 15.0 / 4.0 - 1.5, 1e-13);
  EXPECT_THROW(simpson(0.0, 1.0, 3), ContractViolation);
}

TEST(GridKl, GaussianClosedForm) {
  const auto rule = simpson(-30.0, 30.0, 20000);
  std::vector<double> p, q;
  for (double x : rule.nodes) {
    p.push_back(std::exp(-0.5 * x * x) / std::sqrt(2 * std::numbers::pi));
    q.push_back(std::exp(-0.125 * x * x) / (2 * std::sqrt(2 * std::numbers::pi)));
  }
  const double closed = std::numbers::ln2 + 0.125 - 0.5;
  EXPECT_NEAR(grid_kl(rule.weights, p, q), closed, 1e-4);
  EXPECT_NEAR(grid_kl(rule.weights, p, q), 0.3181, 1e-4);
  EXPECT_NEAR(grid_kl(rule.weights, p, p), 0.0, 1e-15);
}

TEST(TargetKl, SelfConsistency) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(1);
  const BoltzmannTarget target(spec, env_reset(spec, rng), 1.0);
  const Tensor samples = bandit_target_samples(spec, 100000, rng);
  EXPECT_LE(target_kl(samples, target), 0.02);
}

TEST(TargetKl, PointMassFarFromModes) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(2);
  const BoltzmannTarget target(spec, env_reset(spec, rng), 1.0);
  Tensor samples = Tensor::matrix(5000, 1);
  for (std::size_t i = 0; i < 5000; ++i) samples[i] = 1e-3 * rng.normal();
  EXPECT_GT(target_kl(samples, target), 3.0);
}

TEST(TargetKl, SingleModeCollapseIsPenalized) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(3);
  const BoltzmannTarget target(spec, env_reset(spec, rng), 1.0);
  Tensor samples = bandit_target_samples(spec, 20000, rng);
  for (double& x : samples.data()) x = std::abs(x);
  EXPECT_NEAR(target_kl(samples, target), std::numbers::ln2, 0.05);
}

TEST(TargetKl, RefusesSmallSamples) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(4);
  const BoltzmannTarget target(spec, env_reset(spec, rng), 1.0);
  EXPECT_THROW(target_kl(Tensor::matrix(999, 1), target), ContractViolation);
}

TEST(TargetKl, TwoDimensionalSelfConsistency) {
  const auto spec = EnvSpec::point_mass(2);
  EnvState s;
  s.internal = s.observation = {0.0, 0.0};
  // alpha R = -alpha (|0.1 a|^2 + 0.01 |a|^2) = -0.02 alpha |a|^2: Gaussian with variance 1 / (0.04 alpha).
  const double alpha = 100.0;
  const BoltzmannTarget target(spec, s, alpha);
  const double sd = std::sqrt(1.0 / (0.04 * alpha));
  Rng rng(5);
  Tensor samples = Tensor::matrix(50000, 2);
  std::size_t i = 0;
  while (i < 50000) {
    const double x = sd * rng.normal();
    const double y = sd * rng.normal();
    if (std::abs(x) > 1.0 || std::abs(y) > 1.0) continue;
    samples(i, 0) = x;
    samples(i, 1) = y;
    ++i;
  }
  EXPECT_LE(target_kl(samples, target), 0.02);
}

TEST(ModeMass, Examples) {
  const std::vector<double> centers{-1.0, 1.0};
  const std::vector<double> right(10, 1.0);
  const auto m = mode_mass(right, centers);
  EXPECT_EQ(m[0], 0.0);
  EXPECT_EQ(m[1], 1.0);
  const std::vector<double> tie{0.0};
  EXPECT_EQ(mode_mass(tie, centers)[0], 1.0);
  const std::vector<double> reversed{1.0, -1.0};
  EXPECT_EQ(mode_mass(tie, reversed)[1], 1.0);
}

TEST(ModeMass, TargetSamplesSplitEvenly) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(6);
  const Tensor samples = bandit_target_samples(spec, 100000, rng);
  const std::vector<double> centers{-1.0, 1.0};
  const auto m = mode_mass(samples.data(), centers);
  EXPECT_NEAR(m[0], 0.5, 0.02);
  EXPECT_NEAR(m[0] + m[1], 1.0, 1e-12);
}
