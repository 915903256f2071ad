#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <set>

#include "dmerl/env.hpp"

using namespace dmerl;

namespace {

NoiseSchedule schedule(int K) {
  NoiseSchedule s;
  s.K = K;
  return s;
}

double normal_pdf(double x, double m, double s) {
  return std::exp(-0.5 * (x - m) * (x - m) / (s * s)) / (s * std::sqrt(2 * std::numbers::pi));
}

// Drives one augmented episode with reverse steps drawn from the forward-matched kernel.
std::vector<AugmentedTransition> run_episode(const EnvSpec& spec, const NoiseSchedule& sched, Rng& rng) {
  std::vector<AugmentedTransition> out;
  AugmentedState s = augmented_reset(spec, sched, rng);
  while (true) {
    std::vector<double> a(spec.action_dim);
    for (double& x : a) x = 0.5 * s.a_k[0] + 0.3 * rng.normal();
    auto tr = augmented_step(spec, sched, s, a, 0.0, rng);
    out.push_back(tr);
    if (tr.done) break;
    s = tr.to;
  }
  return out;
}

}  // namespace

TEST(FlattenIndex, Examples) {
  EXPECT_EQ(flatten_index(0, 8, 8), 0);
  EXPECT_EQ(flatten_index(1, 0, 2), 5);
  EXPECT_THROW(flatten_index(0, 3, 2), IndexError);
  EXPECT_THROW(flatten_index(-1, 0, 2), IndexError);
  EXPECT_THROW(flatten_index(0, -1, 2), IndexError);
}

TEST(FlattenIndex, BijectionOntoContiguousRange) {
  for (int T : {0, 1, 10, 37, 100})
    for (int K : {1, 2, 8, 17, 64}) {
      std::vector<char> seen(static_cast<std::size_t>((T + 1) * (K + 1)), 0);
      for (int t = 0; t <= T; ++t)
        for (int k = 0; k <= K; ++k) {
          const long long i = flatten_index(t, k, K);
          ASSERT_GE(i, 0);
          ASSERT_LT(i, static_cast<long long>(seen.size()));
          ASSERT_EQ(seen[static_cast<std::size_t>(i)], 0) << "collision at t=" << t << " k=" << k;
          seen[static_cast<std::size_t>(i)] = 1;
        }
    }
}

TEST(Env, BanditReward) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(1);
  const auto s0 = env_reset(spec, rng);
  const std::vector<double> a{1.0};
  const auto r = env_step(spec, s0, a, rng);
  EXPECT_NEAR(r.reward, std::log(0.5 * normal_pdf(1.0, -1.0, 0.3) + 0.5 * normal_pdf(1.0, 1.0, 0.3)), 1e-12);
  EXPECT_TRUE(r.state.terminal);
  EXPECT_THROW(env_step(spec, r.state, a, rng), ContractViolation);
  const std::vector<double> out{1.6};
  EXPECT_THROW(env_step(spec, s0, out, rng), ContractViolation);
  EXPECT_NEAR(bandit_reward(spec, 40.0), std::log(0.5) - 0.5 * (39.0 / 0.3) * (39.0 / 0.3) - std::log(0.3) -
                                             0.5 * std::log(2 * std::numbers::pi),
              1e-9);
}

TEST(Env, BanditBoltzmannModesCarryEqualMass) {
  const auto spec = EnvSpec::bimodal_bandit();
  Rng rng(1);
  const BoltzmannTarget target(spec, env_reset(spec, rng), 1.0);
  double total = 0.0, neg = 0.0;
  target.for_each_node([&](std::span<const double> a, double w) {
    const double p = target.density(a);
    total += w * p;
    if (a[0] < 0.0) neg += w * p;
    if (a[0] == 0.0) neg += 0.5 * w * p;
  });
  EXPECT_NEAR(total, 1.0, 1e-6);
  EXPECT_NEAR(neg, 0.5, 1e-9);
  // At alpha = 1 the target is the mixture restricted to the box.
  const double mass = 0.5 * (std::erf((1.5 + 1.0) / (0.3 * std::sqrt(2.0))) - std::erf((-1.5 + 1.0) / (0.3 * std::sqrt(2.0))));
  const double a1[1] = {1.0};
  EXPECT_NEAR(target.density(a1), (0.5 * normal_pdf(1.0, -1.0, 0.3) + 0.5 * normal_pdf(1.0, 1.0, 0.3)) / mass, 1e-8);
}

TEST(Env, BoltzmannNormalizesIn2D) {
  const auto spec = EnvSpec::point_mass(2);
  EnvState s;
  s.internal = s.observation = {0.3, -0.6};
  for (double alpha : {0.5, 5.0, 40.0}) {
    const BoltzmannTarget target(spec, s, alpha);
    double total = 0.0;
    target.for_each_node([&](std::span<const double> a, double w) { total += w * target.density(a); });
    EXPECT_NEAR(total, 1.0, 1e-6) << alpha;
  }
}

TEST(Env, PointMassFixedPoint) {
  const auto spec = EnvSpec::point_mass(2);
  EnvState s;
  s.internal = s.observation = {0.0, 0.0};
  Rng rng(2);
  const std::vector<double> zero{0.0, 0.0};
  const auto r = env_step(spec, s, zero, rng);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_EQ(r.state.observation, zero);
  s.internal = s.observation = {0.5, -0.2};
  const std::vector<double> a{1.0, 0.5};
  const auto r2 = env_step(spec, s, a, rng);
  EXPECT_NEAR(r2.state.observation[0], 0.6, 1e-15);
  EXPECT_NEAR(r2.state.observation[1], -0.15, 1e-15);
  EXPECT_NEAR(r2.reward, -(0.36 + 0.0225) - 0.01 * 1.25, 1e-15);
}

TEST(Env, PendulumUprightIsGoal) {
  const auto spec = EnvSpec::pendulum();
  EnvState s;
  s.internal = {0.0, 0.0};
  s.observation = {1.0, 0.0, 0.0};
  Rng rng(3);
  const std::vector<double> zero{0.0};
  const auto r = env_step(spec, s, zero, rng);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_EQ(r.state.internal, (std::vector<double>{0.0, 0.0}));
  s.internal = {std::numbers::pi, 1.0};
  EXPECT_LT(env_step(spec, s, zero, rng).reward, -9.0);
}

TEST(Env, EpisodesTerminateAfterHorizon) {
  const auto spec = EnvSpec::point_mass(2, 3);
  Rng rng(4);
  auto s = env_reset(spec, rng);
  const std::vector<double> zero{0.0, 0.0};
  int steps = 0;
  while (!s.terminal) {
    s = env_step(spec, s, zero, rng).state;
    ++steps;
  }
  EXPECT_EQ(steps, 4);
  EXPECT_EQ(s.t, 4);
}

TEST(Env, StepsAreSeedDeterministic) {
  const auto spec = EnvSpec::point_mass(2, 5, 0.1);
  auto run = [&](std::uint64_t seed) {
    Rng rng(seed);
    auto s = env_reset(spec, rng);
    const std::vector<double> a{0.2, -0.4};
    for (int i = 0; i < 5; ++i) s = env_step(spec, s, a, rng).state;
    return s;
  };
  EXPECT_EQ(run(7), run(7));
  EXPECT_NE(run(7), run(8));
}

TEST(Augmented, IntermediateStepHasNoEnvReward) {
  const auto spec = EnvSpec::point_mass(1, 4);
  const auto sched = schedule(3);
  Rng rng(5);
  const auto s = augmented_reset(spec, sched, rng);
  EXPECT_EQ(s.k, 3);
  const std::vector<double> a{0.4};
  const auto tr = augmented_step(spec, sched, s, a, -1.0, rng);
  EXPECT_EQ(tr.to.k, 2);
  EXPECT_EQ(tr.env_reward, 0.0);
  EXPECT_FALSE(tr.landing);
  EXPECT_EQ(tr.to.env, s.env);
  EXPECT_EQ(tr.to.a_k, a);
  EXPECT_EQ(tr.to.flat_index, 1);
  EXPECT_DOUBLE_EQ(tr.forward_log_density, forward_step_density(sched, 3, a).log_density(s.a_k));
}

TEST(Augmented, SingleStepChainLandsImmediately) {
  const auto spec = EnvSpec::point_mass(1, 4);
  const auto sched = schedule(1);
  Rng rng(6);
  const auto s = augmented_reset(spec, sched, rng);
  const std::vector<double> a{0.3};
  const auto tr = augmented_step(spec, sched, s, a, 0.0, rng);
  EXPECT_TRUE(tr.landing);
  EXPECT_EQ(tr.to.k, 1);
  EXPECT_EQ(tr.to.env.t, 1);
  EXPECT_DOUBLE_EQ(tr.env_reward, immediate_reward(spec, s.env, squash_action(a, spec.bounds)));
  EXPECT_DOUBLE_EQ(tr.squash_log_det, squash_log_det(a, spec.bounds));
}

TEST(Augmented, EpisodeTransitionCount) {
  const auto spec = EnvSpec::point_mass(1, 2);
  const auto sched = schedule(2);
  Rng rng(7);
  const auto ep = run_episode(spec, sched, rng);
  EXPECT_EQ(ep.size(), 6U);
  for (std::size_t i = 0; i < ep.size(); ++i) EXPECT_EQ(ep[i].from.flat_index, static_cast<long long>(i + i / 2));
  EXPECT_TRUE(ep.back().done);
  auto terminal = ep.back().to;
  EXPECT_THROW(augmented_step(spec, sched, terminal, std::vector<double>{0.0}, 0.0, rng), ContractViolation);
}

TEST(Augmented, RewardOnlyAtLandings) {
  Rng meta(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int K = 1 + static_cast<int>(meta.below(5));
    const int T = 1 + static_cast<int>(meta.below(4));
    const auto spec = EnvSpec::point_mass(1, T);
    const auto sched = schedule(K);
    const auto ep = run_episode(spec, sched, meta);
    ASSERT_EQ(ep.size(), static_cast<std::size_t>((T + 1) * K));
    for (const auto& tr : ep) {
      EXPECT_EQ(tr.landing, tr.from.k == 1);
      if (!tr.landing) EXPECT_EQ(tr.env_reward, 0.0);
      else EXPECT_LT(tr.env_reward, 0.0);
    }
  }
}

TEST(Augmented, StepsAreSeedDeterministic) {
  const auto spec = EnvSpec::pendulum(5);
  const auto sched = schedule(3);
  Rng a(9), b(9);
  const auto ea = run_episode(spec, sched, a);
  const auto eb = run_episode(spec, sched, b);
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    EXPECT_EQ(ea[i].to.a_k, eb[i].to.a_k);
    EXPECT_EQ(ea[i].env_reward, eb[i].env_reward);
  }
}
