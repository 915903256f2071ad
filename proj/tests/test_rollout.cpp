#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "dmerl/objectives.hpp"
#include "dmerl/rollout.hpp"

using namespace dmerl;

namespace {

NoiseSchedule schedule(int K, double nu = 2.2) {
  NoiseSchedule s;
  s.K = K;
  s.nu = nu;
  return s;
}

ReplayItem item(double tag, int k = 0) {
  return ReplayItem{{tag}, {}, k, {tag + 0.5}, tag * 2.0, true, false, {tag + 1.0}, {}, 0};
}

}  // namespace

// ---------------------------------------------------------------------------
// GAE
// ---------------------------------------------------------------------------

TEST(Gae, HandExample) {
  const std::vector<double> r{1, 1, 1}, v{0, 0, 0, 0};
  const std::vector<char> d{0, 0, 0};
  const auto g = gae(r, v, d, 0.5, 0.5);
  EXPECT_DOUBLE_EQ(g.advantages[0], 1.3125);
  EXPECT_DOUBLE_EQ(g.advantages[1], 1.25);
  EXPECT_DOUBLE_EQ(g.advantages[2], 1.0);
}

TEST(Gae, TdZeroReduction) {
  const auto g = gae(std::vector<double>{0.7}, std::vector<double>{0.2, 1.5}, std::vector<char>{0}, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(g.advantages[0], 0.7 + 0.9 * 1.5 - 0.2);
  const auto z = gae(std::vector<double>{0.7}, std::vector<double>{0.0, 0.0}, std::vector<char>{0}, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(z.advantages[0], 0.7);
}

TEST(Gae, MonteCarloReductionIsRewardToGo) {
  Rng rng(3);
  std::vector<double> r(12);
  for (double& x : r) x = rng.normal();
  std::vector<char> d(12, 0);
  d[4] = 1;
  d[11] = 1;
  const auto g = gae(r, std::vector<double>(13, 0.0), d, 1.0, 1.0);
  std::vector<double> to_go(r.size());
  for (std::size_t t = r.size(); t-- > 0;) to_go[t] = r[t] + (d[t] || t + 1 == r.size() ? 0.0 : to_go[t + 1]);
  for (std::size_t t = 0; t < r.size(); ++t) {
    EXPECT_EQ(g.advantages[t], to_go[t]);
    EXPECT_EQ(g.returns[t], g.advantages[t]);
  }
}

TEST(Gae, ReturnsAreAdvantagesPlusValues) {
  const std::vector<double> r{0.5, -1.0, 2.0}, v{0.1, 0.4, -0.3, 0.9};
  const auto g = gae(r, v, std::vector<char>{0, 0, 1}, 0.95, 0.9);
  for (std::size_t t = 0; t < 3; ++t) EXPECT_DOUBLE_EQ(g.returns[t], g.advantages[t] + v[t]);
  EXPECT_THROW(gae(r, std::vector<double>{0, 0, 0}, std::vector<char>{0, 0, 0}, 1, 1), DimensionError);
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

TEST(Collect, SingleStepChainVisitsFourStates) {
  const auto spec = EnvSpec::point_mass(1, 1);
  const auto s = schedule(1);
  Rng init(1);
  const auto pol = DiffusionPolicy::make(1, 1, {4}, Activation::tanh, s, init);
  Rng rng(2);
  const auto buf = collect_rollout(pol, nullptr, spec, 1, 1, rng);
  EXPECT_EQ(buf.visited.size(), 4u);
  EXPECT_EQ(buf.visited, (std::vector<long long>{0, 1, 2, 3}));
  EXPECT_EQ(buf.size(), 2u);
  EXPECT_TRUE(buf.done.back());
}

TEST(Collect, ArraysAlignAndEpisodesEnd) {
  const auto spec = EnvSpec::point_mass(2, 3);
  const auto s = schedule(3);
  Rng init(3);
  const auto pol = DiffusionPolicy::make(2, 2, {4}, Activation::tanh, s, init);
  Rng rng(4);
  const std::size_t n_envs = 5;
  const auto buf = collect_rollout(pol, nullptr, spec, n_envs, 2, rng);
  const std::size_t N = buf.size();
  EXPECT_EQ(N, n_envs * 2 * 4 * 3);
  EXPECT_EQ(buf.obs.size(), N * 2);
  EXPECT_EQ(buf.a_k.size(), N * 2);
  EXPECT_EQ(buf.action.size(), N * 2);
  for (const auto* v : {&buf.env_reward, &buf.log_prob, &buf.forward_log_prob, &buf.squash_log_det, &buf.value})
    EXPECT_EQ(v->size(), N);
  EXPECT_EQ(buf.landing.size(), N);
  EXPECT_EQ(buf.done.size(), N);
  EXPECT_EQ(buf.episode_returns.size(), n_envs * 2);
  std::size_t landings = 0;
  for (std::size_t i = 0; i < N; ++i) {
    landings += buf.landing[i];
    if (!buf.landing[i]) {
      EXPECT_EQ(buf.env_reward[i], 0.0);
    }
    EXPECT_EQ(buf.landing[i] != 0, buf.k[i] == 1);
  }
  EXPECT_EQ(landings, n_envs * 2 * 4);
}

TEST(Collect, DeterministicUnderSeed) {
  const auto spec = EnvSpec::point_mass(2, 4, 0.05);
  const auto s = schedule(2);
  Rng init(5);
  const auto pol = DiffusionPolicy::make(2, 2, {4}, Activation::tanh, s, init);
  Rng a(6), b(6);
  const auto x = collect_rollout(pol, nullptr, spec, 3, 2, a);
  const auto y = collect_rollout(pol, nullptr, spec, 3, 2, b);
  EXPECT_EQ(x.obs, y.obs);
  EXPECT_EQ(x.a_k, y.a_k);
  EXPECT_EQ(x.action, y.action);
  EXPECT_EQ(x.env_reward, y.env_reward);
  EXPECT_EQ(x.log_prob, y.log_prob);
  EXPECT_EQ(x.forward_log_prob, y.forward_log_prob);
  EXPECT_EQ(x.visited, y.visited);
}

TEST(Collect, ZeroInitBanditMatchesPriorPushforward) {
  const auto spec = EnvSpec::bimodal_bandit();
  const auto s = schedule(4);
  Rng init(7);
  const auto pol = DiffusionPolicy::make(1, 1, {8}, Activation::tanh, s, init);
  Rng rng(8);
  const auto buf = collect_rollout(pol, nullptr, spec, 200, 30, rng);
  std::vector<double> a0;
  for (std::size_t i = 0; i < buf.size(); ++i)
    if (buf.landing[i]) a0.push_back(buf.action[i]);
  ASSERT_EQ(a0.size(), 6000u);
  // Zero score: a^{k-1} = (1 + bd/2) a^k + std * xi, started from N(0, nu^2).
  double var = s.nu * s.nu;
  for (int k = s.K; k >= 1; --k) {
    const auto c = step_coefficients(s, k);
    var = c.reverse_scale * c.reverse_scale * var + c.std * c.std;
  }
  const double n = static_cast<double>(a0.size());
  double m = 0.0, v = 0.0;
  for (double x : a0) m += x / n;
  for (double x : a0) v += (x - m) * (x - m) / (n - 1.0);
  EXPECT_LE(std::abs(m), 3.0 * std::sqrt(var / n));
  EXPECT_LE(std::abs(v - var), 3.0 * var * std::sqrt(2.0 / (n - 1.0)));
}

TEST(Collect, IntermediateRewardsComeOnlyFromLogRatio) {
  const auto spec = EnvSpec::point_mass(1, 2);
  const auto s = schedule(3);
  Rng init(9);
  const auto pol = DiffusionPolicy::make(1, 1, {4}, Activation::tanh, s, init);
  Rng rng(10);
  const auto buf = collect_rollout(pol, nullptr, spec, 4, 1, rng);
  for (std::size_t i = 0; i < buf.size(); ++i) {
    if (buf.landing[i]) continue;
    const double r0 = diff_maxent_reward(buf.env_reward[i], false, buf.log_prob[i], buf.forward_log_prob[i],
                                         buf.squash_log_det[i], 0.0);
    EXPECT_EQ(r0, 0.0);
    const double r1 = diff_maxent_reward(buf.env_reward[i], false, buf.log_prob[i], buf.forward_log_prob[i],
                                         buf.squash_log_det[i], 0.3);
    EXPECT_DOUBLE_EQ(r1, -0.3 * (buf.log_prob[i] - buf.forward_log_prob[i]));
  }
}

TEST(Collect, GaussianRolloutShape) {
  const auto spec = EnvSpec::point_mass(2, 4);
  Rng init(11);
  const auto pol = GaussianPolicy::make(2, 2, {4}, Activation::tanh, init);
  Rng rng(12);
  const auto buf = collect_gaussian_rollout(pol, nullptr, spec, 3, 1, rng);
  EXPECT_EQ(buf.size(), 3u * 5u);
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_TRUE(buf.landing[i]);
  EXPECT_TRUE(buf.a_k.empty());
}

TEST(Collect, AdvantagesComputedOnce) {
  const auto spec = EnvSpec::point_mass(1, 2);
  const auto s = schedule(2);
  Rng init(13);
  const auto pol = DiffusionPolicy::make(1, 1, {4}, Activation::tanh, s, init);
  const auto value = ValueNet::make(1, 1, {4}, Activation::tanh, true, 2, init);
  Rng rng(14);
  auto buf = collect_rollout(pol, &value, spec, 2, 1, rng);
  EXPECT_THROW(compute_advantages(buf, 0.99, 0.95), ContractViolation);
  buf.rewards.assign(buf.size(), 0.0);
  for (std::size_t i = 0; i < buf.size(); ++i) buf.rewards[i] = buf.landing[i] ? buf.env_reward[i] : 0.0;
  compute_advantages(buf, 0.99, 0.95);
  EXPECT_EQ(buf.advantages.size(), buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) EXPECT_DOUBLE_EQ(buf.returns[i], buf.advantages[i] + buf.value[i]);
  EXPECT_THROW(compute_advantages(buf, 0.99, 0.95), ContractViolation);
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

TEST(Replay, FifoEviction) {
  ReplayBuffer rb(2, 1, 1, false);
  rb.push(item(1));
  rb.push(item(2));
  rb.push(item(3));
  EXPECT_EQ(rb.size(), 2u);
  EXPECT_EQ(rb.at(0), item(2));
  EXPECT_EQ(rb.at(1), item(3));
  EXPECT_THROW((void)rb.at(2), IndexError);
}

TEST(Replay, ReproducibleSampling) {
  ReplayBuffer rb(100, 1, 1, false);
  for (int i = 0; i < 50; ++i) rb.push(item(i));
  Rng a(5), b(5);
  EXPECT_EQ(rb.sample_indices(32, a), rb.sample_indices(32, b));
}

TEST(Replay, UniformChiSquare) {
  ReplayBuffer rb(10, 1, 1, false);
  for (int i = 0; i < 10; ++i) rb.push(item(i));
  Rng rng(17);
  std::vector<double> counts(10, 0.0);
  const std::size_t draws = 100000;
  for (std::size_t done = 0; done < draws; done += 10)
    for (std::size_t i : rb.sample_indices(10, rng)) counts[i] += 1.0;
  double chi2 = 0.0;
  const double expected = static_cast<double>(draws) / 10.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 21.666);  // chi-square(9) upper 1% point
}

TEST(Replay, RoundTripBitIdentical) {
  const auto spec = EnvSpec::point_mass(2, 3, 0.1);
  const auto s = schedule(2);
  Rng rng(21);
  ReplayBuffer rb(64, 2, 2, true);
  std::vector<ReplayItem> pushed;
  auto state = augmented_reset(spec, s, rng);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> a{rng.normal(), rng.normal()};
    auto tr = augmented_step(spec, s, state, a, -1.25, rng);
    pushed.push_back(replay_item(tr));
    rb.push(pushed.back());
    state = tr.done ? augmented_reset(spec, s, rng) : tr.to;
  }
  for (std::size_t i = 0; i < pushed.size(); ++i) EXPECT_EQ(rb.at(i), pushed[i]);
  std::vector<std::size_t> idx(pushed.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  const auto batch = rb.gather(idx);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    EXPECT_EQ(batch.obs(i, 1), pushed[i].obs[1]);
    EXPECT_EQ(batch.action(i, 0), pushed[i].action[0]);
    EXPECT_EQ(batch.a_k(i, 1), pushed[i].a_k[1]);
    EXPECT_EQ(batch.k[i], pushed[i].k);
    EXPECT_EQ(batch.env_reward[i], pushed[i].env_reward);
    EXPECT_EQ(batch.next_k[i], pushed[i].next_k);
  }
}

TEST(Replay, UndersizedAndMalformedRefused) {
  ReplayBuffer rb(8, 1, 1, false);
  rb.push(item(0));
  Rng rng(1);
  EXPECT_THROW((void)rb.sample(2, rng), ContractViolation);
  ReplayItem bad = item(1);
  bad.obs = {1.0, 2.0};
  EXPECT_THROW(rb.push(bad), DimensionError);
  EXPECT_THROW(ReplayBuffer(0, 1, 1, false), ConfigError);
}

TEST(Replay, StratifiedSamplingBalancesSteps) {
  ReplayBuffer rb(1000, 1, 1, false);
  // 90% of stored items at k = 1, the rest at k = 2.
  for (int i = 0; i < 1000; ++i) rb.push(item(i, i % 10 == 0 ? 2 : 1));
  Rng rng(3);
  std::size_t k2 = 0;
  for (int rep = 0; rep < 4; ++rep)
    for (std::size_t i : rb.sample_indices(1000, rng, 2)) k2 += rb.at(i).k == 2;
  EXPECT_NEAR(static_cast<double>(k2) / 4000.0, 0.5, 0.05);
}
