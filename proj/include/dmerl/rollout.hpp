#pragma once

#include <span>
#include <vector>

#include "dmerl/critic.hpp"
#include "dmerl/env.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/policy.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

// ---------------------------------------------------------------------------
// Value networks
// ---------------------------------------------------------------------------

/// V(s) for Gaussian policies or V_Diff(s, a^k, k) for diffusion policies.
struct ValueNet {
  MlpParams net;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  bool diffusion = false;
  int K = 1;

  static ValueNet make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                       Activation act, bool diffusion, int K, Rng& rng) {
    ValueNet v{{}, obs_dim, action_dim, diffusion, K};
    v.net = make_mlp(v.input_dim(), hidden, 1, act, rng);
    return v;
  }

  [[nodiscard]] std::size_t input_dim() const {
    return diffusion ? obs_dim + action_dim + kTimeEmbeddingDim : obs_dim;
  }
};

inline Tensor value_input(const ValueNet& v, const Tensor& obs, const Tensor& a_k, std::span<const int> ks) {
  if (!v.diffusion) return obs;
  Tensor emb = Tensor::matrix(obs.rows(), kTimeEmbeddingDim);
  for (std::size_t r = 0; r < obs.rows(); ++r) time_embedding(ks[r], v.K, emb.row(r));
  return concat_cols({&obs, &a_k, &emb});
}

inline std::vector<double> value_predict(const ValueNet& v, const Tensor& obs, const Tensor& a_k,
                                         std::span<const int> ks) {
  const Tensor out = mlp_forward(v.net, value_input(v, obs, a_k, ks));
  return {out.data().begin(), out.data().end()};
}

// ---------------------------------------------------------------------------
// On-policy rollouts
// ---------------------------------------------------------------------------

/// Transitions of one collection, time-major with `n_envs` interleaved lanes:
/// row = step * n_envs + lane. For Gaussian policies K = 0 and a_k is empty.
struct RolloutBuffer {
  std::size_t n_envs = 0;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  int K = 0;
  std::vector<double> obs;       // [N, obs_dim]
  std::vector<double> a_k;       // [N, action_dim] (diffusion only)
  std::vector<int> k;            // [N]
  std::vector<double> action;    // [N, action_dim]: a^{k-1} or pre-squash u
  std::vector<double> env_reward;
  std::vector<char> landing;
  std::vector<char> done;
  std::vector<double> log_prob;  // behavior log-density of the action
  std::vector<double> forward_log_prob;
  std::vector<double> squash_log_det;
  std::vector<double> value;
  std::vector<double> rewards;   // shaped rewards, filled by the algorithm
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<long long> visited;  // flattened indices of every augmented state entered
  std::vector<double> episode_returns;
  bool advantages_ready = false;

  [[nodiscard]] std::size_t size() const { return k.size(); }

  [[nodiscard]] Tensor obs_tensor(std::span<const std::size_t> rows) const { return gather(obs, obs_dim, rows); }
  [[nodiscard]] Tensor a_k_tensor(std::span<const std::size_t> rows) const {
    return gather(a_k, K > 0 ? action_dim : 0, rows);
  }
  [[nodiscard]] Tensor action_tensor(std::span<const std::size_t> rows) const {
    return gather(action, action_dim, rows);
  }

  static Tensor gather(const std::vector<double>& src, std::size_t width, std::span<const std::size_t> rows) {
    Tensor t = Tensor::matrix(rows.size(), width);
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) t(r, j) = src[rows[r] * width + j];
    return t;
  }
};

/// Generalized advantage estimation over one lane. `values` has one more
/// entry than `rewards` (bootstrap); done[t] cuts the recursion after t.
struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

inline GaeResult gae(std::span<const double> rewards, std::span<const double> values, std::span<const char> dones,
                     double gamma, double lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n + 1 || dones.size() != n) throw DimensionError("gae: array lengths do not align");
  GaeResult g;
  g.advantages.assign(n, 0.0);
  g.returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_v = dones[i] ? 0.0 : values[i + 1];
    const double delta = rewards[i] + gamma * next_v - values[i];
    next_adv = delta + (dones[i] ? 0.0 : gamma * lambda * next_adv);
    g.advantages[i] = next_adv;
    g.returns[i] = next_adv + values[i];
  }
  return g;
}

/// Computes advantages and returns for every lane of a buffer from its
/// `rewards`, `value` and `done` arrays. Episodes end inside the buffer.
inline void compute_advantages(RolloutBuffer& buf, double gamma, double lambda) {
  if (buf.advantages_ready) throw ContractViolation("compute_advantages: already computed for this collection");
  if (buf.rewards.size() != buf.size()) throw ContractViolation("compute_advantages: shaped rewards missing");
  const std::size_t steps = buf.size() / buf.n_envs;
  buf.advantages.assign(buf.size(), 0.0);
  buf.returns.assign(buf.size(), 0.0);
  for (std::size_t lane = 0; lane < buf.n_envs; ++lane) {
    std::vector<double> r(steps), v(steps + 1, 0.0);
    std::vector<char> d(steps);
    for (std::size_t t = 0; t < steps; ++t) {
      const std::size_t row = t * buf.n_envs + lane;
      r[t] = buf.rewards[row];
      v[t] = buf.value[row];
      d[t] = buf.done[row];
    }
    if (!d.back()) throw ContractViolation("compute_advantages: collection must end on episode boundaries");
    const auto g = gae(r, v, d, gamma, lambda);
    for (std::size_t t = 0; t < steps; ++t) {
      buf.advantages[t * buf.n_envs + lane] = g.advantages[t];
      buf.returns[t * buf.n_envs + lane] = g.returns[t];
    }
  }
  buf.advantages_ready = true;
}

namespace detail {

inline void init_buffer(RolloutBuffer& b, const EnvSpec& spec, std::size_t n_envs, int K) {
  b.n_envs = n_envs;
  b.obs_dim = spec.obs_dim;
  b.action_dim = spec.action_dim;
  b.K = K;
}

inline Tensor stack_observations(const std::vector<AugmentedState>& s, std::size_t obs_dim) {
  Tensor t = Tensor::matrix(s.size(), obs_dim);
  for (std::size_t r = 0; r < s.size(); ++r)
    for (std::size_t j = 0; j < obs_dim; ++j) t(r, j) = s[r].env.observation[j];
  return t;
}

}  // namespace detail

/// Runs `episodes` rounds of `n_envs` lockstep episodes through the augmented
/// MDP with a diffusion policy. `value` may be null (zeros recorded).
inline RolloutBuffer collect_rollout(const DiffusionPolicy& policy, const ValueNet* value, const EnvSpec& spec,
                                     std::size_t n_envs, std::size_t episodes, Rng& rng) {
  const NoiseSchedule& sched = policy.sched;
  const int K = sched.K;
  const std::size_t d = spec.action_dim;
  RolloutBuffer buf;
  detail::init_buffer(buf, spec, n_envs, K);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    std::vector<AugmentedState> states(n_envs);
    std::vector<double> ep_return(n_envs, 0.0);
    for (auto& s : states) {
      s = augmented_reset(spec, sched, rng);
      buf.visited.push_back(s.flat_index);
    }
    bool running = true;
    while (running) {
      const Tensor obs = detail::stack_observations(states, spec.obs_dim);
      Tensor a_k = Tensor::matrix(n_envs, d);
      std::vector<int> ks(n_envs);
      for (std::size_t e = 0; e < n_envs; ++e) {
        ks[e] = states[e].k;
        for (std::size_t i = 0; i < d; ++i) a_k(e, i) = states[e].a_k[i];
      }
      const auto head = reverse_forward(policy, obs, a_k, ks);
      const auto v = value ? value_predict(*value, obs, a_k, ks) : std::vector<double>(n_envs, 0.0);
      Tensor a_prev = Tensor::matrix(n_envs, d);
      for (std::size_t e = 0; e < n_envs; ++e)
        for (std::size_t i = 0; i < d; ++i) a_prev(e, i) = head.mean(e, i) + head.std[e] * rng.normal();
      const auto logp = reverse_log_prob(head, a_prev);
      running = false;
      for (std::size_t e = 0; e < n_envs; ++e) {
        const auto tr = augmented_step(spec, sched, states[e], a_prev.row(e), logp[e], rng);
        buf.obs.insert(buf.obs.end(), states[e].env.observation.begin(), states[e].env.observation.end());
        buf.a_k.insert(buf.a_k.end(), states[e].a_k.begin(), states[e].a_k.end());
        buf.k.push_back(states[e].k);
        buf.action.insert(buf.action.end(), tr.action.begin(), tr.action.end());
        buf.env_reward.push_back(tr.env_reward);
        buf.landing.push_back(tr.landing);
        buf.done.push_back(tr.done);
        buf.log_prob.push_back(logp[e]);
        buf.forward_log_prob.push_back(tr.forward_log_density);
        buf.squash_log_det.push_back(tr.squash_log_det);
        buf.value.push_back(v[e]);
        ep_return[e] += tr.env_reward;
        if (tr.landing) {
          // The landing state (s_t, a^0, 0) is entered before the environment advances.
          buf.visited.push_back(flatten_index(states[e].env.t, 0, K));
          if (!tr.done) buf.visited.push_back(tr.to.flat_index);
        } else {
          buf.visited.push_back(tr.to.flat_index);
        }
        if (!tr.done) running = true;
        states[e] = tr.to;
      }
    }
    buf.episode_returns.insert(buf.episode_returns.end(), ep_return.begin(), ep_return.end());
  }
  return buf;
}

/// Same collection for a Gaussian policy over the base MDP (K = 0).
inline RolloutBuffer collect_gaussian_rollout(const GaussianPolicy& policy, const ValueNet* value,
                                              const EnvSpec& spec, std::size_t n_envs, std::size_t episodes,
                                              Rng& rng) {
  const std::size_t d = spec.action_dim;
  RolloutBuffer buf;
  detail::init_buffer(buf, spec, n_envs, 0);
  for (std::size_t ep = 0; ep < episodes; ++ep) {
    std::vector<EnvState> states(n_envs);
    std::vector<double> ep_return(n_envs, 0.0);
    for (auto& s : states) s = env_reset(spec, rng);
    bool running = true;
    while (running) {
      Tensor obs = Tensor::matrix(n_envs, spec.obs_dim);
      for (std::size_t e = 0; e < n_envs; ++e)
        for (std::size_t j = 0; j < spec.obs_dim; ++j) obs(e, j) = states[e].observation[j];
      const auto head = gaussian_forward(policy, obs);
      const std::vector<int> ks(n_envs, 0);
      const auto v = value ? value_predict(*value, obs, Tensor::matrix(n_envs, 0), ks)
                           : std::vector<double>(n_envs, 0.0);
      Tensor u = Tensor::matrix(n_envs, d);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] = head.mean[k] + head.std[k] * rng.normal();
      const auto logp = gaussian_log_prob(head, u);
      running = false;
      for (std::size_t e = 0; e < n_envs; ++e) {
        const auto bounded = squash_action(u.row(e), spec.bounds);
        const auto step = env_step(spec, states[e], bounded, rng);
        buf.obs.insert(buf.obs.end(), states[e].observation.begin(), states[e].observation.end());
        buf.k.push_back(0);
        buf.action.insert(buf.action.end(), u.row(e).begin(), u.row(e).end());
        buf.env_reward.push_back(step.reward);
        buf.landing.push_back(1);
        buf.done.push_back(step.state.terminal);
        buf.log_prob.push_back(logp[e]);
        buf.forward_log_prob.push_back(0.0);
        buf.squash_log_det.push_back(squash_log_det(u.row(e), spec.bounds));
        buf.value.push_back(v[e]);
        ep_return[e] += step.reward;
        if (!step.state.terminal) running = true;
        states[e] = step.state;
      }
    }
    buf.episode_returns.insert(buf.episode_returns.end(), ep_return.begin(), ep_return.end());
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

/// One stored transition. For Gaussian policies k = next_k = 0 and the a_k
/// fields are empty; `action` is the pre-squash action in both cases.
struct ReplayItem {
  std::vector<double> obs;
  std::vector<double> a_k;
  int k = 0;
  std::vector<double> action;
  double env_reward = 0.0;
  bool landing = true;
  bool done = false;
  std::vector<double> next_obs;
  std::vector<double> next_a_k;
  int next_k = 0;

  friend bool operator==(const ReplayItem&, const ReplayItem&) = default;
};

inline ReplayItem replay_item(const AugmentedTransition& tr) {
  return ReplayItem{tr.from.env.observation, tr.from.a_k, tr.from.k, tr.action, tr.env_reward, tr.landing, tr.done,
                    tr.to.env.observation, tr.to.a_k, tr.to.k};
}

struct ReplayBatch {
  Tensor obs, a_k, action, next_obs, next_a_k;
  std::vector<int> k, next_k;
  std::vector<double> env_reward;
  std::vector<char> landing, done;
  std::vector<std::size_t> indices;

  [[nodiscard]] std::size_t size() const { return k.size(); }
};

/// Fixed-capacity FIFO ring with uniform sampling (with replacement).
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, std::size_t obs_dim, std::size_t action_dim, bool diffusion)
      : capacity_(capacity), obs_dim_(obs_dim), action_dim_(action_dim), ak_dim_(diffusion ? action_dim : 0) {
    if (capacity == 0) throw ConfigError("replay capacity must be positive");
  }

  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }

  void push(const ReplayItem& it) {
    if (it.obs.size() != obs_dim_ || it.next_obs.size() != obs_dim_ || it.action.size() != action_dim_ ||
        it.a_k.size() != ak_dim_ || (!it.done && it.next_a_k.size() != ak_dim_))
      throw DimensionError("replay push: field widths do not match the buffer");
    if (items_.size() < capacity_) {
      items_.push_back(it);
    } else {
      items_[head_] = it;
    }
    head_ = (head_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }

  /// i = 0 is the oldest stored item.
  [[nodiscard]] const ReplayItem& at(std::size_t i) const {
    if (i >= size_) throw IndexError("replay index out of range");
    const std::size_t start = size_ < capacity_ ? 0 : head_;
    return items_[(start + i) % capacity_];
  }

  [[nodiscard]] std::vector<std::size_t> sample_indices(std::size_t batch, Rng& rng, int stratify_K = 0) const {
    if (batch > size_ || size_ == 0) throw ContractViolation("replay sample: buffer holds fewer items than the batch");
    std::vector<std::size_t> idx(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      idx[b] = rng.below(size_);
      if (stratify_K > 0) {
        const int want = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(stratify_K)));
        for (int tries = 0; tries < 64 && at(idx[b]).k != want; ++tries) idx[b] = rng.below(size_);
      }
    }
    return idx;
  }

  [[nodiscard]] ReplayBatch sample(std::size_t batch, Rng& rng, int stratify_K = 0) const {
    return gather(sample_indices(batch, rng, stratify_K));
  }

  [[nodiscard]] ReplayBatch gather(std::vector<std::size_t> idx) const {
    const std::size_t B = idx.size();
    ReplayBatch out;
    out.obs = Tensor::matrix(B, obs_dim_);
    out.next_obs = Tensor::matrix(B, obs_dim_);
    out.a_k = Tensor::matrix(B, ak_dim_);
    out.next_a_k = Tensor::matrix(B, ak_dim_);
    out.action = Tensor::matrix(B, action_dim_);
    for (std::size_t b = 0; b < B; ++b) {
      const auto& it = at(idx[b]);
      std::copy(it.obs.begin(), it.obs.end(), out.obs.row(b).begin());
      std::copy(it.next_obs.begin(), it.next_obs.end(), out.next_obs.row(b).begin());
      std::copy(it.a_k.begin(), it.a_k.end(), out.a_k.row(b).begin());
      if (it.next_a_k.size() == ak_dim_) std::copy(it.next_a_k.begin(), it.next_a_k.end(), out.next_a_k.row(b).begin());
      std::copy(it.action.begin(), it.action.end(), out.action.row(b).begin());
      out.k.push_back(it.k);
      out.next_k.push_back(it.next_k);
      out.env_reward.push_back(it.env_reward);
      out.landing.push_back(it.landing);
      out.done.push_back(it.done);
    }
    out.indices = std::move(idx);
    return out;
  }

 private:
  std::size_t capacity_;
  std::size_t obs_dim_;
  std::size_t action_dim_;
  std::size_t ak_dim_;
  std::vector<ReplayItem> items_;
  std::size_t head_ = 0;
  std::size_t size_ = 0;
};

}  // namespace dmerl
