// Acceptance gate. Usage: acceptance [all | core | <criterion number>...]
// Prints one "criterion N PASS|FAIL ..." line per criterion and exits 1 if
// any selected criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dmerl/dmerl.hpp"

#ifndef DMERL_CONFIG_DIR
#define DMERL_CONFIG_DIR "configs"
#endif

using namespace dmerl;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double sample_var(const std::vector<double>& x) {
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return s / static_cast<double>(x.size() - 1);
}

double pooled_sd(const std::vector<double>& a, const std::vector<double>& b) {
  return std::sqrt(0.5 * (sample_var(a) + sample_var(b)));
}

json load_config(const std::string& name) {
  std::ifstream in(std::string(DMERL_CONFIG_DIR) + "/" + name);
  if (!in) throw std::runtime_error("missing config " + name);
  return json::parse(in);
}

Agent train(json doc, std::uint64_t seed) {
  doc["training"]["seed"] = seed;
  const RunConfig rc = resolve_config(doc);
  Agent agent(rc.agent);
  while (agent.env_steps() < rc.total_env_steps)
    (void)agent.iterate(static_cast<double>(agent.env_steps()) / static_cast<double>(rc.total_env_steps));
  return agent;
}

std::size_t budget(const json& doc) { return doc["training"]["total_env_steps"].get<std::size_t>(); }

// ---------------------------------------------------------------------------
// Oracle-backed criteria

Outcome from_suite(const SuiteReport& r, double max_seconds) {
  const OracleCheck* worst = nullptr;
  double worst_ratio = -INFINITY;
  for (const auto& c : r.checks) {
    const double ratio = c.tolerance > 0.0 ? c.measured / c.tolerance : (c.passed ? 0.0 : 1e300);
    if (!c.passed) {
      worst = &c;
      break;
    }
    if (ratio > worst_ratio) worst_ratio = ratio, worst = &c;
  }
  const bool in_time = r.seconds < max_seconds;
  Outcome o;
  o.pass = r.passed() && in_time;
  o.detail = fmt("%s: %zu checks, worst %s = %.3g (tol %.3g), %.1fs", r.suite.c_str(), r.checks.size(),
                 worst ? worst->name.c_str() : "-", worst ? worst->measured : 0.0, worst ? worst->tolerance : 0.0,
                 r.seconds);
  if (std::isfinite(max_seconds)) o.detail += fmt(" (limit %.0fs)", max_seconds);
  return o;
}

Outcome criterion_1() { return from_suite(run_grad_suite(), 60.0); }
Outcome criterion_2() { return from_suite(run_lv_suite(), 10.0); }
Outcome criterion_3() { return from_suite(run_dpi_suite(), 10.0); }
Outcome criterion_4() { return from_suite(run_wpo_suite(), INFINITY); }
Outcome criterion_5() { return from_suite(run_diffusion_suite(), 30.0); }
Outcome criterion_8() { return from_suite(run_entropy_suite(), INFINITY); }

// ---------------------------------------------------------------------------
// Temperature zero: the max-entropy DiffPPO learner against the reward-only one

double max_abs_diff(const MlpParams& a, const MlpParams& b) {
  double m = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    for (std::size_t i = 0; i < a.layers[l].weight.size(); ++i)
      m = std::max(m, std::abs(a.layers[l].weight[i] - b.layers[l].weight[i]));
    for (std::size_t i = 0; i < a.layers[l].bias.size(); ++i)
      m = std::max(m, std::abs(a.layers[l].bias[i] - b.layers[l].bias[i]));
  }
  return m;
}

Outcome criterion_6() {
  constexpr double tol = 1e-12;
  constexpr int iterations = 3;
  double worst_reward = 0.0, worst_loss = 0.0, worst_param = 0.0;
  std::size_t compared = 0;
  for (int K : {1, 4}) {
    for (std::uint64_t seed : {11u, 12u}) {
      json doc = {{"algo", "diffppo"},
                  {"env", {{"kind", "point_mass"}, {"dim", 2}, {"horizon", 9}}},
                  {"diffusion", {{"K", K}}},
                  {"network", {{"policy_hidden", {16, 16}}, {"critic_hidden", {16, 16}}}},
                  {"training",
                   {{"seed", seed}, {"n_envs", 4}, {"epochs", 2}, {"minibatch_size", 32}, {"env_only_reward", false}}},
                  {"temperature", {{"mode", "fixed"}, {"value", 0.0}}}};
      Agent maxent(resolve_config(doc).agent);
      doc["training"]["env_only_reward"] = true;
      Agent reward_only(resolve_config(doc).agent);
      for (int it = 0; it < iterations; ++it) {
        const auto a = maxent.iterate(0.0);
        const auto b = reward_only.iterate(0.0);
        worst_loss = std::max({worst_loss, std::abs(a.loss_actor - b.loss_actor),
                               std::abs(a.loss_critic - b.loss_critic)});
        if (!std::isfinite(a.loss_actor) || !std::isfinite(b.loss_actor)) worst_loss = INFINITY;
        const RolloutBuffer& buf = *maxent.last_rollout();
        const auto ra = maxent.shaped_rewards(buf);
        const auto rb = reward_only.shaped_rewards(*reward_only.last_rollout());
        if (ra.size() != rb.size()) worst_reward = INFINITY;
        for (std::size_t i = 0; i < ra.size() && i < rb.size(); ++i) {
          const double direct = buf.landing[i] ? buf.env_reward[i] : 0.0;
          worst_reward = std::max({worst_reward, std::abs(ra[i] - rb[i]), std::abs(ra[i] - direct)});
        }
        compared += ra.size();
        worst_param = std::max(worst_param, max_abs_diff(maxent.diffusion_policy().score.trunk,
                                                         reward_only.diffusion_policy().score.trunk));
      }
    }
  }
  Outcome o;
  o.pass = worst_reward <= tol && worst_loss <= tol && worst_param <= tol;
  o.detail = fmt("%zu per-step rewards, max |reward diff| %.3g, |loss diff| %.3g, |param diff| %.3g (tol %.0e)",
                 compared, worst_reward, worst_loss, worst_param, tol);
  return o;
}

// ---------------------------------------------------------------------------
// Augmented process structure

Outcome criterion_7() {
  std::size_t bad_bijection = 0;
  for (int K = 1; K <= 64; ++K) {
    const long long T = 100;
    const long long n = (T + 1) * (K + 1);
    std::vector<char> seen(static_cast<std::size_t>(n), 0);
    for (long long t = 0; t <= T; ++t)
      for (int k = 0; k <= K; ++k) {
        const long long i = flatten_index(t, k, K);
        if (i < 0 || i >= n || seen[static_cast<std::size_t>(i)]) {
          ++bad_bijection;
          continue;
        }
        seen[static_cast<std::size_t>(i)] = 1;
        if (i / (K + 1) != t || K - static_cast<int>(i % (K + 1)) != k) ++bad_bijection;
      }
    for (char c : seen) bad_bijection += c ? 0 : 1;
  }

  Rng rng(2024);
  std::size_t bad_reward = 0, bad_landing = 0, bad_index = 0, bad_count = 0, transitions = 0, landings_total = 0;
  constexpr int rollouts = 1000;
  for (int ep = 0; ep < rollouts; ++ep) {
    EnvSpec spec;
    const double noise = rng.uniform() < 0.5 ? 0.0 : 0.1;
    switch (rng.below(3)) {
      case 0: spec = EnvSpec::bimodal_bandit(); break;
      case 1: spec = EnvSpec::point_mass(1 + rng.below(3), 1 + static_cast<int>(rng.below(20)), noise); break;
      default: spec = EnvSpec::pendulum(1 + static_cast<int>(rng.below(20)), noise); break;
    }
    NoiseSchedule sched;
    sched.K = 1 + static_cast<int>(rng.below(16));
    const int K = sched.K;
    AugmentedState s = augmented_reset(spec, sched, rng);
    std::size_t landings = 0, steps = 0;
    while (!s.env.terminal) {
      std::vector<double> a(spec.action_dim);
      for (double& x : a) x = 1.5 * rng.normal();
      Rng replay = rng;
      const auto tr = augmented_step(spec, sched, s, a, 0.0, rng);
      ++transitions, ++steps;
      if (tr.landing != (s.k == 1)) ++bad_landing;
      if (tr.from.flat_index != flatten_index(s.env.t, s.k, K)) ++bad_index;
      if (!tr.done && (tr.to.flat_index != flatten_index(tr.to.env.t, tr.to.k, K) ||
                       tr.to.flat_index != tr.from.flat_index + (tr.landing ? 2 : 1)))
        ++bad_index;
      if (tr.landing) {
        ++landings;
        const auto bounded = squash_action(a, spec.bounds);
        const double expected = env_step(spec, s.env, bounded, replay).reward;
        if (tr.env_reward != expected) ++bad_reward;
        if (spec.dynamics_noise == 0.0 && std::abs(tr.env_reward - immediate_reward(spec, s.env, bounded)) > 1e-12)
          ++bad_reward;
      } else {
        if (tr.env_reward != 0.0) ++bad_reward;
        if (tr.to.env.t != s.env.t || tr.to.k != s.k - 1) ++bad_index;
      }
      s = tr.to;
    }
    landings_total += landings;
    if (landings != static_cast<std::size_t>(spec.horizon) + 1 || steps != landings * static_cast<std::size_t>(K))
      ++bad_count;
  }
  Outcome o;
  o.pass = bad_bijection == 0 && bad_reward == 0 && bad_landing == 0 && bad_index == 0 && bad_count == 0;
  o.detail = fmt("bijection errors %zu (T<=100, K<=64); %d rollouts, %zu transitions, %zu landings; "
                 "reward errors %zu, landing errors %zu, index errors %zu, episode-length errors %zu",
                 bad_bijection, rollouts, transitions, landings_total, bad_reward, bad_landing, bad_index, bad_count);
  return o;
}

// ---------------------------------------------------------------------------
// Bimodal bandit

struct BanditStats {
  double kl = 0.0;
  double low = 0.0;
  double high = 0.0;
};

BanditStats bandit_stats(const Agent& agent, std::size_t n, Rng rng) {
  const auto& spec = agent.config().env;
  const auto state = env_reset(spec, rng);
  Tensor obs = Tensor::matrix(n, spec.obs_dim);
  for (std::size_t i = 0; i < n; ++i) std::copy(state.observation.begin(), state.observation.end(), obs.row(i).begin());
  const Tensor samples = agent.sample_actions(obs, rng);
  const double centers[2] = {-spec.mode_center, spec.mode_center};
  const auto mm = mode_mass(samples.data(), centers);
  return {target_kl(samples, BoltzmannTarget(spec, state, 1.0 / agent.temperature().value)), mm[0], mm[1]};
}

Outcome criterion_9() {
  const auto t0 = std::chrono::steady_clock::now();
  const json diff = load_config("bandit_diffsac.json");
  const json sac = load_config("bandit_sac.json");
  constexpr std::size_t samples = 10000;
  int diff_ok = 0, sac_collapsed = 0;
  std::string per_seed;
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const auto d = bandit_stats(train(diff, seed), samples, Rng(900 + seed));
    const auto g = bandit_stats(train(sac, seed), samples, Rng(900 + seed));
    if (d.kl <= 0.1 && d.low >= 0.25 && d.high >= 0.25) ++diff_ok;
    if (std::min(g.low, g.high) < 0.05) ++sac_collapsed;
    per_seed += fmt(" [seed %llu diffsac kl %.3f modes %.2f/%.2f, sac kl %.3f modes %.2f/%.2f]",
                    static_cast<unsigned long long>(seed), d.kl, d.low, d.high, g.kl, g.low, g.high);
  }
  const double secs = seconds_since(t0);
  const bool in_budget = budget(diff) <= 50000 && budget(sac) == budget(diff) &&
                         diff["diffusion"]["K"].get<int>() == 8;
  Outcome o;
  o.pass = diff_ok >= 3 && sac_collapsed >= 3 && secs < 900.0 && in_budget;
  o.detail = fmt("diffsac K=8 ok in %d/4 seeds, sac collapsed in %d/4 seeds, %zu env steps, %.0fs (limit 900s);",
                 diff_ok, sac_collapsed, budget(diff), secs) +
             per_seed;
  return o;
}

// ---------------------------------------------------------------------------
// Point mass

constexpr std::size_t kEvalEpisodes = 100;
constexpr std::uint64_t kSeeds = 4;

std::vector<double> final_returns(const json& doc) {
  std::vector<double> out;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng eval(7000 + seed);
    out.push_back(mean(train(doc, seed).evaluate(kEvalEpisodes, eval)));
  }
  return out;
}

Outcome criterion_10() {
  const auto t0 = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  for (const char* name : {"point_mass_diffsac.json", "point_mass_diffppo.json"}) {
    json doc = load_config(name);
    std::vector<std::vector<double>> by_k;
    for (int K : {2, 4, 8}) {
      doc["diffusion"]["K"] = K;
      by_k.push_back(final_returns(doc));
    }
    detail += fmt(" %s means K2 %.2f, K4 %.2f, K8 %.2f;", doc["algo"].get<std::string>().c_str(), mean(by_k[0]),
                  mean(by_k[1]), mean(by_k[2]));
    for (std::size_t i = 0; i + 1 < by_k.size(); ++i) {
      const double slack = pooled_sd(by_k[i], by_k[i + 1]);
      detail += fmt(" pooled sd K%d/K%d %.2f;", 2 << i, 4 << i, slack);
      if (mean(by_k[i + 1]) < mean(by_k[i]) - slack) {
        pass = false;
        detail += fmt(" drop between K%d and K%d exceeds pooled sd %.2f;", 2 << i, 4 << i, slack);
      }
    }
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = pass && secs < 1800.0;
  o.detail = fmt("%.0fs (limit 1800s);", secs) + detail;
  return o;
}

std::vector<double> random_policy_returns(const EnvSpec& spec) {
  std::vector<double> out;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    Rng rng(7000 + seed);
    std::vector<double> rets;
    for (std::size_t e = 0; e < kEvalEpisodes; ++e) {
      EnvState s = env_reset(spec, rng);
      double ret = 0.0;
      while (!s.terminal) {
        std::vector<double> a(spec.action_dim);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(spec.bounds.lo[i], spec.bounds.hi[i]);
        auto step = env_step(spec, s, a, rng);
        ret += step.reward;
        s = std::move(step.state);
      }
      rets.push_back(ret);
    }
    out.push_back(mean(rets));
  }
  return out;
}

Outcome criterion_11() {
  const auto t0 = std::chrono::steady_clock::now();
  bool pass = true;
  std::string detail;
  std::vector<double> random;
  for (const char* name : {"point_mass_sac.json", "point_mass_ppo.json", "point_mass_diffsac.json",
                           "point_mass_diffppo.json", "point_mass_diffwpo.json"}) {
    const json doc = load_config(name);
    if (random.empty()) random = random_policy_returns(resolve_config(doc).agent.env);
    const auto trained = final_returns(doc);
    const double sd = pooled_sd(trained, random);
    const double margin = (mean(trained) - mean(random)) / sd;
    const bool ok = margin >= 5.0 && budget(doc) <= 100000;
    pass = pass && ok;
    detail += fmt(" %s %.2f (%.1f sd, %zu steps%s);", doc["algo"].get<std::string>().c_str(), mean(trained), margin,
                  budget(doc), ok ? "" : ", short");
  }
  Outcome o;
  o.pass = pass;
  o.detail = fmt("random policy %.2f, %.0fs;", mean(random), seconds_since(t0)) + detail;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::function<Outcome()>> criteria = {
      {1, criterion_1}, {2, criterion_2}, {3, criterion_3},   {4, criterion_4},   {5, criterion_5},  {6, criterion_6},
      {7, criterion_7}, {8, criterion_8}, {9, criterion_9}, {10, criterion_10}, {11, criterion_11}};
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "all") {
      for (const auto& [id, fn] : criteria) selected.push_back(id);
    } else if (arg == "core") {
      for (int id : {1, 2, 3, 4, 5, 6, 7, 8}) selected.push_back(id);
    } else {
      const int id = std::atoi(arg.c_str());
      if (!criteria.contains(id)) {
        std::fprintf(stderr, "unknown criterion '%s'\n", arg.c_str());
        return 2;
      }
      selected.push_back(id);
    }
  }
  if (argc == 1)
    for (const auto& [id, fn] : criteria) selected.push_back(id);

  bool all_pass = true;
  for (int id : selected) {
    Outcome o;
    try {
      o = criteria.at(id)();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    all_pass = all_pass && o.pass;
    std::printf("criterion %d %s %s\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  return all_pass ? 0 : 1;
}
