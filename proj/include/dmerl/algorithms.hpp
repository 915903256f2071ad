#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dmerl/adam.hpp"
#include "dmerl/checkpoint.hpp"
#include "dmerl/critic.hpp"
#include "dmerl/diffusion.hpp"
#include "dmerl/env.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/objectives.hpp"
#include "dmerl/policy.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/rollout.hpp"

namespace dmerl {

enum class AlgoKind { sac, ppo, wpo, diffsac, diffppo, diffwpo };

inline std::string_view to_string(AlgoKind a) {
  switch (a) {
    case AlgoKind::sac: return "sac";
    case AlgoKind::ppo: return "ppo";
    case AlgoKind::wpo: return "wpo";
    case AlgoKind::diffsac: return "diffsac";
    case AlgoKind::diffppo: return "diffppo";
    case AlgoKind::diffwpo: return "diffwpo";
  }
  return "?";
}

inline AlgoKind algo_from_string(std::string_view s) {
  for (AlgoKind a : {AlgoKind::sac, AlgoKind::ppo, AlgoKind::wpo, AlgoKind::diffsac, AlgoKind::diffppo,
                     AlgoKind::diffwpo})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown algo '" + std::string(s) + "' (expected sac|ppo|wpo|diffsac|diffppo|diffwpo)");
}

inline bool is_diffusion(AlgoKind a) {
  return a == AlgoKind::diffsac || a == AlgoKind::diffppo || a == AlgoKind::diffwpo;
}
inline bool is_on_policy(AlgoKind a) { return a == AlgoKind::ppo || a == AlgoKind::diffppo; }

/// Discount per step of the process the agent acts in: 0.9991^(1/K) per
/// augmented step for diffusion agents, 0.99 per environment step otherwise.
inline double default_gamma(AlgoKind a, int K) {
  return is_diffusion(a) ? std::pow(0.9991, 1.0 / static_cast<double>(K)) : 0.99;
}

struct AgentConfig {
  AlgoKind algo = AlgoKind::diffsac;
  EnvSpec env;
  NoiseSchedule diffusion;
  std::vector<std::size_t> policy_hidden{128, 128};
  std::vector<std::size_t> critic_hidden{256, 256};
  Activation activation = Activation::tanh;
  double learning_rate = 3e-4;
  double gamma = 0.99;
  TemperatureController temperature = TemperatureController::fixed(0.1);
  bool squash_correction = true;
  std::uint64_t seed = 0;

  // Off-policy (sac, wpo, diffsac, diffwpo).
  std::size_t batch_size = 256;
  std::size_t replay_capacity = 1000000;
  std::size_t learning_starts = 1000;  // environment steps before the first update
  double updates_per_transition = 1.0;
  double polyak = 0.005;
  bool stratify_k = false;

  // On-policy (ppo, diffppo).
  std::size_t n_envs = 8;
  std::size_t episodes_per_collection = 1;
  std::size_t epochs = 10;
  bool scale_epochs_with_k = true;
  std::size_t minibatch_size = 256;
  double clip_eps = 0.2;
  double gae_lambda = 0.95;
  bool env_only_reward = false;

  [[nodiscard]] int K() const { return is_diffusion(algo) ? diffusion.K : 0; }

  [[nodiscard]] std::size_t update_epochs() const {
    return scale_epochs_with_k && is_diffusion(algo) ? epochs * static_cast<std::size_t>(diffusion.K) : epochs;
  }

  void validate() const {
    env.validate();
    if (is_diffusion(algo)) diffusion.validate();
    if (policy_hidden.empty() || critic_hidden.empty()) throw ConfigError("network hidden sizes must be non-empty");
    if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in (0, 1]");
    if (batch_size == 0 || minibatch_size == 0 || n_envs == 0 || episodes_per_collection == 0 || epochs == 0)
      throw ConfigError("batch sizes, env count, episodes and epochs must be positive");
    if (updates_per_transition < 0.0) throw ConfigError("updates_per_transition must be >= 0");
    if (!(polyak > 0.0 && polyak <= 1.0)) throw ConfigError("polyak must lie in (0, 1]");
    if (!(clip_eps > 0.0)) throw ConfigError("clip_eps must be > 0");
    if (gae_lambda < 0.0 || gae_lambda > 1.0) throw ConfigError("gae_lambda must lie in [0, 1]");
    if ((algo == AlgoKind::wpo || algo == AlgoKind::diffwpo) && activation != Activation::tanh)
      throw ConfigError("wpo and diffwpo need tanh activations");
  }
};

/// What one training iteration did.
struct IterationStats {
  std::size_t env_steps = 0;  // environment steps added
  std::size_t updates = 0;    // gradient updates applied
  double loss_actor = std::numeric_limits<double>::quiet_NaN();
  double loss_critic = std::numeric_limits<double>::quiet_NaN();
  double entropy = std::numeric_limits<double>::quiet_NaN();  // estimate driving automatic temperature
  std::vector<double> episode_returns;                       // episodes finished during the iteration
};

/// One learner for any of the six algorithms. Off-policy iterations take one
/// environment step (K augmented steps for diffusion agents); on-policy
/// iterations collect `n_envs * episodes_per_collection` episodes and update.
class Agent {
 public:
  explicit Agent(AgentConfig cfg) : cfg_(std::move(cfg)), rng_(Rng(cfg_.seed).split(1)) {
    cfg_.validate();
    Rng init = Rng(cfg_.seed).split(0);
    const auto& e = cfg_.env;
    const AdamConfig adam{cfg_.learning_rate};
    if (diffusion()) {
      dpolicy_ = DiffusionPolicy::make(e.obs_dim, e.action_dim, cfg_.policy_hidden, cfg_.activation, cfg_.diffusion,
                                       init);
      policy_opt_ = AdamState::for_params(dpolicy_.score.trunk, adam);
    } else {
      gpolicy_ = GaussianPolicy::make(e.obs_dim, e.action_dim, cfg_.policy_hidden, cfg_.activation, init);
      policy_opt_ = AdamState::for_params(gpolicy_.net, adam);
    }
    if (is_on_policy(cfg_.algo)) {
      value_ = ValueNet::make(e.obs_dim, e.action_dim, cfg_.critic_hidden, cfg_.activation, diffusion(), cfg_.K(),
                              init);
      value_opt_ = AdamState::for_params(value_->net, adam);
    } else {
      critics_ = TwinCritic::make(e.obs_dim, e.action_dim, cfg_.critic_hidden, cfg_.activation, diffusion(),
                                  std::max(cfg_.K(), 1), adam, init);
      replay_.emplace(cfg_.replay_capacity, e.obs_dim, e.action_dim, diffusion());
    }
    temperature_ = cfg_.temperature;
  }

  [[nodiscard]] const AgentConfig& config() const { return cfg_; }
  [[nodiscard]] bool diffusion() const { return is_diffusion(cfg_.algo); }
  [[nodiscard]] std::size_t env_steps() const { return env_steps_; }
  [[nodiscard]] std::uint64_t updates() const { return updates_; }
  [[nodiscard]] const TemperatureController& temperature() const { return temperature_; }
  [[nodiscard]] const DiffusionPolicy& diffusion_policy() const { return dpolicy_; }
  [[nodiscard]] const GaussianPolicy& gaussian_policy() const { return gpolicy_; }
  [[nodiscard]] const RolloutBuffer* last_rollout() const { return last_rollout_ ? &*last_rollout_ : nullptr; }
  [[nodiscard]] const ReplayBuffer* replay() const { return replay_ ? &*replay_ : nullptr; }

  IterationStats iterate(double progress) {
    return is_on_policy(cfg_.algo) ? iterate_on_policy(progress) : iterate_off_policy(progress);
  }

  /// Bounded actions, one per observation row.
  [[nodiscard]] Tensor sample_actions(const Tensor& obs, Rng& rng) const {
    const std::size_t B = obs.rows();
    const std::size_t d = cfg_.env.action_dim;
    Tensor out = Tensor::matrix(B, d);
    if (diffusion()) {
      const auto chains = sample_chains(dpolicy_.sched, dpolicy_.score, obs, cfg_.env.bounds, rng);
      for (std::size_t r = 0; r < B; ++r) std::copy_n(chains[r].squashed_action.begin(), d, out.row(r).begin());
    } else {
      const auto head = gaussian_forward(gpolicy_, obs);
      std::vector<double> u(d);
      for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t i = 0; i < d; ++i) u[i] = head.mean(r, i) + head.std(r, i) * rng.normal();
        const auto b = squash_action(u, cfg_.env.bounds);
        std::copy(b.begin(), b.end(), out.row(r).begin());
      }
    }
    return out;
  }

  /// Undiscounted returns of `episodes` stochastic-policy episodes run in lockstep.
  [[nodiscard]] std::vector<double> evaluate(std::size_t episodes, Rng& rng) const {
    if (episodes == 0) throw ContractViolation("evaluate: episodes must be >= 1");
    const auto& spec = cfg_.env;
    std::vector<EnvState> states(episodes);
    for (auto& s : states) s = env_reset(spec, rng);
    std::vector<double> returns(episodes, 0.0);
    for (;;) {
      std::vector<std::size_t> live;
      for (std::size_t e = 0; e < episodes; ++e)
        if (!states[e].terminal) live.push_back(e);
      if (live.empty()) break;
      Tensor obs = Tensor::matrix(live.size(), spec.obs_dim);
      for (std::size_t r = 0; r < live.size(); ++r)
        std::copy(states[live[r]].observation.begin(), states[live[r]].observation.end(), obs.row(r).begin());
      const Tensor acts = sample_actions(obs, rng);
      for (std::size_t r = 0; r < live.size(); ++r) {
        auto step = env_step(spec, states[live[r]], acts.row(r), rng);
        returns[live[r]] += step.reward;
        states[live[r]] = std::move(step.state);
      }
    }
    return returns;
  }

  [[nodiscard]] Checkpoint save() const {
    Checkpoint ck;
    auto add_opt = [&](const std::string& name, const AdamState& s) {
      ck.add_network(name + ".m", s.first_moment);
      ck.add_network(name + ".v", s.second_moment);
      ck.meta[name + ".step"] = std::to_string(s.step);
    };
    ck.add_network("policy", policy_net());
    add_opt("opt.policy", policy_opt_);
    if (value_) {
      ck.add_network("value", value_->net);
      add_opt("opt.value", value_opt_);
    }
    if (critics_) {
      ck.add_network("q1", critics_->q1.net);
      ck.add_network("q2", critics_->q2.net);
      ck.add_network("q1_target", critics_->target1.net);
      ck.add_network("q2_target", critics_->target2.net);
      add_opt("opt.q1", critics_->opt1);
      add_opt("opt.q2", critics_->opt2);
    }
    ck.meta["algo"] = std::string(to_string(cfg_.algo));
    ck.meta["env_steps"] = std::to_string(env_steps_);
    ck.meta["updates"] = std::to_string(updates_);
    ck.meta["temperature"] = format_double(temperature_.value);
    ck.meta["rng.key"] = std::to_string(rng_.key());
    ck.meta["rng.counter"] = std::to_string(rng_.counter());
    return ck;
  }

  /// Restores parameters, optimizer moments, counters and temperature. The
  /// replay buffer and any in-flight episode are not part of a checkpoint.
  void load(const Checkpoint& ck) {
    auto meta = [&](const std::string& key) -> const std::string& {
      auto it = ck.meta.find(key);
      if (it == ck.meta.end()) throw LoadError("checkpoint has no meta entry '" + key + "'");
      return it->second;
    };
    if (meta("algo") != to_string(cfg_.algo))
      throw LoadError("checkpoint algo is " + meta("algo") + ", expected " + std::string(to_string(cfg_.algo)));
    auto load_opt = [&](const std::string& name, AdamState& s) {
      s.first_moment = ck.network(name + ".m", s.first_moment);
      s.second_moment = ck.network(name + ".v", s.second_moment);
      s.step = std::stoull(meta(name + ".step"));
    };
    if (diffusion()) dpolicy_.score.trunk = ck.network("policy", dpolicy_.score.trunk);
    else gpolicy_.net = ck.network("policy", gpolicy_.net);
    load_opt("opt.policy", policy_opt_);
    if (value_) {
      value_->net = ck.network("value", value_->net);
      load_opt("opt.value", value_opt_);
    }
    if (critics_) {
      critics_->q1.net = ck.network("q1", critics_->q1.net);
      critics_->q2.net = ck.network("q2", critics_->q2.net);
      critics_->target1.net = ck.network("q1_target", critics_->target1.net);
      critics_->target2.net = ck.network("q2_target", critics_->target2.net);
      load_opt("opt.q1", critics_->opt1);
      load_opt("opt.q2", critics_->opt2);
    }
    env_steps_ = std::stoull(meta("env_steps"));
    updates_ = std::stoull(meta("updates"));
    temperature_.value = std::stod(meta("temperature"));
    rng_ = Rng(std::stoull(meta("rng.key")), std::stoull(meta("rng.counter")));
    episode_.reset();
  }

  /// Rewards the on-policy learner optimizes for a collected buffer.
  [[nodiscard]] std::vector<double> shaped_rewards(const RolloutBuffer& buf) const {
    const double T = temperature_.value;
    std::vector<double> r(buf.size());
    for (std::size_t i = 0; i < buf.size(); ++i) {
      if (diffusion()) {
        r[i] = cfg_.env_only_reward
                   ? (buf.landing[i] ? buf.env_reward[i] : 0.0)
                   : diff_maxent_reward(buf.env_reward[i], buf.landing[i], buf.log_prob[i], buf.forward_log_prob[i],
                                        buf.squash_log_det[i], T, cfg_.squash_correction);
      } else {
        const double ld = cfg_.squash_correction ? buf.squash_log_det[i] : 0.0;
        r[i] = cfg_.env_only_reward ? buf.env_reward[i] : buf.env_reward[i] - T * (buf.log_prob[i] - ld);
      }
    }
    return r;
  }

 private:
  static std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  [[nodiscard]] const MlpParams& policy_net() const { return diffusion() ? dpolicy_.score.trunk : gpolicy_.net; }
  [[nodiscard]] const ActionBox* squash_box() const { return cfg_.squash_correction ? &cfg_.env.bounds : nullptr; }

  [[nodiscard]] double prior_entropy() const {
    return static_cast<double>(cfg_.env.action_dim) * (0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e) +
                                                       std::log(cfg_.diffusion.nu));
  }

  void tune_temperature(double progress, double entropy) {
    temperature_ = anneal_or_tune_temperature(temperature_, std::clamp(progress, 0.0, 1.0), entropy);
  }

  // -------------------------------------------------------------------------
  // Off-policy
  // -------------------------------------------------------------------------

  struct Episode {
    AugmentedState aug;  // diffusion agents
    EnvState env;        // Gaussian agents
    double ret = 0.0;
  };

  IterationStats iterate_off_policy(double progress) {
    IterationStats st;
    const auto& spec = cfg_.env;
    if (!episode_) {
      episode_.emplace();
      if (diffusion()) episode_->aug = augmented_reset(spec, cfg_.diffusion, rng_);
      else episode_->env = env_reset(spec, rng_);
    }
    bool finished = false;
    if (diffusion()) {
      for (;;) {
        const auto& s = episode_->aug;
        const Tensor obs = Tensor::matrix(1, spec.obs_dim, s.env.observation);
        const Tensor a_k = Tensor::matrix(1, spec.action_dim, s.a_k);
        const int ks[1] = {s.k};
        const auto head = reverse_forward(dpolicy_, obs, a_k, ks);
        Tensor a_prev = Tensor::matrix(1, spec.action_dim);
        for (std::size_t i = 0; i < spec.action_dim; ++i) a_prev(0, i) = head.mean(0, i) + head.std[0] * rng_.normal();
        const double logp = reverse_log_prob(head, a_prev)[0];
        auto tr = augmented_step(spec, cfg_.diffusion, s, a_prev.row(0), logp, rng_);
        replay_->push(replay_item(tr));
        episode_->ret += tr.env_reward;
        const bool landing = tr.landing;
        finished = tr.done;
        episode_->aug = std::move(tr.to);
        if (landing) ++env_steps_;
        run_updates(progress, st);
        if (landing) break;
      }
    } else {
      const auto& s = episode_->env;
      const Tensor obs = Tensor::matrix(1, spec.obs_dim, s.observation);
      const auto head = gaussian_forward(gpolicy_, obs);
      std::vector<double> u(spec.action_dim);
      for (std::size_t i = 0; i < u.size(); ++i) u[i] = head.mean(0, i) + head.std(0, i) * rng_.normal();
      auto step = env_step(spec, s, squash_action(u, spec.bounds), rng_);
      ReplayItem it{s.observation, {}, 0, u, step.reward, true, step.state.terminal, step.state.observation, {}, 0};
      replay_->push(it);
      episode_->ret += step.reward;
      finished = step.state.terminal;
      episode_->env = std::move(step.state);
      ++env_steps_;
      run_updates(progress, st);
    }
    st.env_steps = 1;
    if (finished) {
      st.episode_returns.push_back(episode_->ret);
      episode_.reset();
    }
    return st;
  }

  void run_updates(double progress, IterationStats& st) {
    pending_updates_ += cfg_.updates_per_transition;
    if (env_steps_ < cfg_.learning_starts || replay_->size() < cfg_.batch_size) {
      pending_updates_ = 0.0;
      return;
    }
    while (pending_updates_ >= 1.0) {
      pending_updates_ -= 1.0;
      if (diffusion()) update_diffusion_off_policy(progress, st);
      else update_gaussian_off_policy(progress, st);
      ++st.updates;
      ++updates_;
    }
  }

  void fit_critics(const ReplayBatch& b, const Tensor& input, const std::vector<double>& y, IterationStats& st) {
    const auto l1 = critic_loss(critics_->q1, input, y);
    const auto l2 = critic_loss(critics_->q2, input, y);
    adam_update(critics_->opt1, critics_->q1.net, l1.grad);
    adam_update(critics_->opt2, critics_->q2.net, l2.grad);
    st.loss_critic = 0.5 * (l1.loss + l2.loss);
    (void)b;
  }

  void update_gaussian_off_policy(double progress, IterationStats& st) {
    const auto& spec = cfg_.env;
    const ReplayBatch b = replay_->sample(cfg_.batch_size, rng_);
    const std::size_t B = b.size();
    const std::size_t d = spec.action_dim;
    const double T = temperature_.value;
    const ActionBox* box = squash_box();

    // Soft TD targets from fresh next actions under the target critics.
    const auto next = gaussian_forward(gpolicy_, b.next_obs);
    Tensor u_next = Tensor::matrix(B, d);
    for (std::size_t k = 0; k < u_next.size(); ++k) u_next[k] = next.mean[k] + next.std[k] * rng_.normal();
    auto next_log = gaussian_log_prob(next, u_next);
    if (box)
      for (std::size_t r = 0; r < B; ++r) next_log[r] -= squash_log_det(u_next.row(r), *box);
    const Tensor bounded_next = squash_rows(u_next);
    const auto q_next = twin_min(critics_->target1, critics_->target2,
                                 critic_input(critics_->target1, b.next_obs, bounded_next), false);
    const auto y = soft_td_targets(b.env_reward, b.done, q_next.value, next_log, cfg_.gamma, T);
    fit_critics(b, critic_input(critics_->q1, b.obs, squash_rows(b.action)), y, st);

    double entropy = 0.0;
    for (double l : next_log) entropy -= l / static_cast<double>(B);
    st.entropy = entropy;

    const ActionValueFn q = squashed_action_value(critics_->online_fn(), spec.bounds);
    LossGrad lg;
    if (cfg_.algo == AlgoKind::sac) {
      Tensor noise = Tensor::matrix(B, d);
      for (std::size_t k = 0; k < noise.size(); ++k) noise[k] = rng_.normal();
      lg = maxent_actor_loss(gpolicy_, b.obs, noise, q, T, box);
    } else {
      const auto head = gaussian_forward(gpolicy_, b.obs);
      Tensor u = Tensor::matrix(B, d);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] = head.mean[k] + head.std[k] * rng_.normal();
      lg = wpo_loss(gpolicy_, b.obs, u, q, T, box, true);
    }
    adam_update(policy_opt_, gpolicy_.net, lg.grad);
    st.loss_actor = lg.loss;
    critics_->polyak(cfg_.polyak);
    tune_temperature(progress, entropy);
  }

  void update_diffusion_off_policy(double progress, IterationStats& st) {
    const ReplayBatch b = replay_->sample(cfg_.batch_size, rng_, cfg_.stratify_k ? cfg_.diffusion.K : 0);
    const std::size_t B = b.size();
    const std::size_t d = cfg_.env.action_dim;
    const double T = temperature_.value;
    const ActionBox* box = squash_box();
    const auto& sched = cfg_.diffusion;

    // Targets: fresh a' from the reverse kernel at the next augmented state.
    const auto next = reverse_forward(dpolicy_, b.next_obs, b.next_a_k, b.next_k);
    Tensor a_next = Tensor::matrix(B, d);
    for (std::size_t r = 0; r < B; ++r)
      for (std::size_t i = 0; i < d; ++i) a_next(r, i) = next.mean(r, i) + next.std[r] * rng_.normal();
    auto next_log = reverse_log_prob(next, a_next);
    const auto next_fwd = forward_log_prob(sched, b.next_a_k, a_next, b.next_k);
    for (std::size_t r = 0; r < B; ++r) {
      next_log[r] -= next_fwd[r];
      if (box && b.next_k[r] == 1) next_log[r] -= squash_log_det(a_next.row(r), *box);
    }
    const auto q_next =
        twin_min(critics_->target1, critics_->target2,
                 critic_input(critics_->target1, b.next_obs, b.next_a_k, b.next_k, a_next), false);
    std::vector<double> rewards(B);
    for (std::size_t r = 0; r < B; ++r) rewards[r] = b.landing[r] ? b.env_reward[r] : 0.0;
    const auto y = soft_td_targets(rewards, b.done, q_next.value, next_log, cfg_.gamma, T);
    fit_critics(b, critic_input(critics_->q1, b.obs, b.a_k, b.k, b.action), y, st);

    // K * mean(-log ratio) + prior entropy estimates the entropy lower bound.
    double mean_ratio = 0.0;
    for (double l : next_log) mean_ratio += l / static_cast<double>(B);
    const double entropy = static_cast<double>(sched.K) * -mean_ratio + prior_entropy();
    st.entropy = entropy;

    const DiffActionValueFn q = critics_->online_diff_fn();
    LossGrad lg;
    if (cfg_.algo == AlgoKind::diffsac) {
      Tensor noise = Tensor::matrix(B, d);
      for (std::size_t k = 0; k < noise.size(); ++k) noise[k] = rng_.normal();
      lg = diffsac_actor_loss(dpolicy_, b.obs, b.a_k, b.k, noise, q, T, box);
    } else {
      const auto head = reverse_forward(dpolicy_, b.obs, b.a_k, b.k);
      Tensor a_prev = Tensor::matrix(B, d);
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t i = 0; i < d; ++i) a_prev(r, i) = head.mean(r, i) + head.std[r] * rng_.normal();
      lg = diffwpo_loss(dpolicy_, b.obs, b.a_k, b.k, a_prev, q, T, box, true);
    }
    adam_update(policy_opt_, dpolicy_.score.trunk, lg.grad);
    st.loss_actor = lg.loss;
    critics_->polyak(cfg_.polyak);
    tune_temperature(progress, entropy);
  }

  [[nodiscard]] Tensor squash_rows(const Tensor& u) const {
    Tensor out = Tensor::matrix(u.rows(), u.cols());
    for (std::size_t r = 0; r < u.rows(); ++r) {
      const auto b = squash_action(u.row(r), cfg_.env.bounds);
      std::copy(b.begin(), b.end(), out.row(r).begin());
    }
    return out;
  }

  // -------------------------------------------------------------------------
  // On-policy
  // -------------------------------------------------------------------------

  IterationStats iterate_on_policy(double progress) {
    IterationStats st;
    RolloutBuffer buf =
        diffusion() ? collect_rollout(dpolicy_, &*value_, cfg_.env, cfg_.n_envs, cfg_.episodes_per_collection, rng_)
                    : collect_gaussian_rollout(gpolicy_, &*value_, cfg_.env, cfg_.n_envs,
                                               cfg_.episodes_per_collection, rng_);
    buf.rewards = shaped_rewards(buf);
    compute_advantages(buf, cfg_.gamma, cfg_.gae_lambda);
    for (std::size_t i = 0; i < buf.size(); ++i) st.env_steps += buf.landing[i] ? 1 : 0;
    env_steps_ += st.env_steps;
    st.episode_returns = buf.episode_returns;

    // Entropy estimate from the behavior log-densities of this collection.
    double mean_ratio = 0.0;
    for (std::size_t i = 0; i < buf.size(); ++i) {
      double l = buf.log_prob[i] - buf.forward_log_prob[i];
      if (cfg_.squash_correction && buf.landing[i]) l -= buf.squash_log_det[i];
      mean_ratio += l / static_cast<double>(buf.size());
    }
    st.entropy = diffusion() ? static_cast<double>(cfg_.diffusion.K) * -mean_ratio + prior_entropy() : -mean_ratio;

    const std::size_t N = buf.size();
    const std::size_t mb = std::min(cfg_.minibatch_size, N);
    std::vector<std::size_t> order(N);
    for (std::size_t i = 0; i < N; ++i) order[i] = i;
    double actor_sum = 0.0;
    double critic_sum = 0.0;
    std::size_t n_mb = 0;
    for (std::size_t epoch = 0; epoch < cfg_.update_epochs(); ++epoch) {
      std::shuffle(order.begin(), order.end(), rng_);
      for (std::size_t start = 0; start + mb <= N; start += mb) {
        const std::span<const std::size_t> rows(order.data() + start, mb);
        const Tensor obs = buf.obs_tensor(rows);
        const Tensor a_k = buf.a_k_tensor(rows);
        const Tensor act = buf.action_tensor(rows);
        std::vector<int> ks(mb);
        std::vector<double> logp_old(mb), adv(mb), ret(mb);
        for (std::size_t j = 0; j < mb; ++j) {
          ks[j] = buf.k[rows[j]];
          logp_old[j] = buf.log_prob[rows[j]];
          adv[j] = buf.advantages[rows[j]];
          ret[j] = buf.returns[rows[j]];
        }
        normalize_advantages(adv);
        const LossGrad pl = diffusion() ? ppo_diffusion_loss(dpolicy_, obs, a_k, ks, act, logp_old, adv, cfg_.clip_eps)
                                        : ppo_gaussian_loss(gpolicy_, obs, act, logp_old, adv, cfg_.clip_eps);
        adam_update(policy_opt_, diffusion() ? dpolicy_.score.trunk : gpolicy_.net, pl.grad);
        const LossGrad vl = mse_loss(value_->net, value_input(*value_, obs, a_k, ks), ret);
        adam_update(value_opt_, value_->net, vl.grad);
        actor_sum += pl.loss;
        critic_sum += vl.loss;
        ++n_mb;
        ++updates_;
      }
    }
    st.updates = n_mb;
    if (n_mb > 0) {
      st.loss_actor = actor_sum / static_cast<double>(n_mb);
      st.loss_critic = critic_sum / static_cast<double>(n_mb);
    }
    tune_temperature(progress, st.entropy);
    last_rollout_ = std::move(buf);
    return st;
  }

  AgentConfig cfg_;
  Rng rng_;
  GaussianPolicy gpolicy_;
  DiffusionPolicy dpolicy_;
  AdamState policy_opt_;
  std::optional<ValueNet> value_;
  AdamState value_opt_;
  std::optional<TwinCritic> critics_;
  std::optional<ReplayBuffer> replay_;
  std::optional<RolloutBuffer> last_rollout_;
  std::optional<Episode> episode_;
  TemperatureController temperature_;
  std::size_t env_steps_ = 0;
  std::uint64_t updates_ = 0;
  double pending_updates_ = 0.0;
};

}  // namespace dmerl
