#pragma once

#include <functional>
#include <span>
#include <vector>

#include "dmerl/adam.hpp"
#include "dmerl/diffusion.hpp"
#include "dmerl/mlp.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

/// Values and action gradients of an action-value function on a batch.
struct QEval {
  std::vector<double> value;
  Tensor grad_action;  // [B, d]; empty when not requested
};

/// Q(s, a) over bounded actions.
using ActionValueFn = std::function<QEval(const Tensor& obs, const Tensor& action, bool want_grad)>;

/// Q_Diff((s, a^k, k), a^{k-1}) over pre-squash chain states.
using DiffActionValueFn = std::function<QEval(const Tensor& obs, const Tensor& a_k, std::span<const int> ks,
                                              const Tensor& a_prev, bool want_grad)>;

/// Scalar critic. Vanilla input is [obs, action]; diffusion input is
/// [obs, a^k, embed(k / K), a^{k-1}].
struct CriticNet {
  MlpParams net;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  bool diffusion = false;
  int K = 1;

  static CriticNet make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                        Activation act, bool diffusion, int K, Rng& rng) {
    CriticNet c;
    c.obs_dim = obs_dim;
    c.action_dim = action_dim;
    c.diffusion = diffusion;
    c.K = K;
    c.net = make_mlp(c.input_dim(), hidden, 1, act, rng);
    return c;
  }

  [[nodiscard]] std::size_t input_dim() const {
    return diffusion ? obs_dim + 2 * action_dim + kTimeEmbeddingDim : obs_dim + action_dim;
  }
  [[nodiscard]] std::size_t action_offset() const { return input_dim() - action_dim; }
};

inline Tensor critic_input(const CriticNet& c, const Tensor& obs, const Tensor& action) {
  if (c.diffusion) throw ConfigError("critic_input: diffusion critic needs (a^k, k) conditioning");
  return concat_cols({&obs, &action});
}

inline Tensor critic_input(const CriticNet& c, const Tensor& obs, const Tensor& a_k, std::span<const int> ks,
                           const Tensor& a_prev) {
  if (!c.diffusion) throw ConfigError("critic_input: vanilla critic does not take diffusion conditioning");
  const std::size_t B = obs.rows();
  if (ks.size() != B) throw DimensionError("critic_input: step index count mismatch");
  Tensor emb = Tensor::matrix(B, kTimeEmbeddingDim);
  for (std::size_t r = 0; r < B; ++r) time_embedding(ks[r], c.K, emb.row(r));
  return concat_cols({&obs, &a_k, &emb, &a_prev});
}

/// Single-network evaluation with optional gradient w.r.t. the action block.
inline QEval critic_eval(const CriticNet& c, const Tensor& input, bool want_grad, MlpCache* cache_out = nullptr) {
  MlpCache cache;
  const Tensor out = mlp_forward(c.net, input, cache);
  QEval q;
  q.value.assign(out.data().begin(), out.data().end());
  if (want_grad) {
    const Tensor g = mlp_input_gradient(c.net, cache, Tensor::matrix(input.rows(), 1, 1.0));
    q.grad_action = slice_cols(g, c.action_offset(), c.action_dim);
  }
  if (cache_out) *cache_out = std::move(cache);
  return q;
}

/// Element-wise minimum of two critics; the gradient follows the selected one.
inline QEval twin_min(const CriticNet& a, const CriticNet& b, const Tensor& input, bool want_grad) {
  QEval qa = critic_eval(a, input, want_grad);
  QEval qb = critic_eval(b, input, want_grad);
  for (std::size_t r = 0; r < qa.value.size(); ++r) {
    if (qb.value[r] < qa.value[r]) {
      qa.value[r] = qb.value[r];
      if (want_grad)
        for (std::size_t i = 0; i < qa.grad_action.cols(); ++i) qa.grad_action(r, i) = qb.grad_action(r, i);
    }
  }
  return qa;
}

/// Online twin critics, their slow targets and optimizer states.
struct TwinCritic {
  CriticNet q1, q2, target1, target2;
  AdamState opt1, opt2;

  static TwinCritic make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                         Activation act, bool diffusion, int K, const AdamConfig& adam, Rng& rng) {
    TwinCritic t;
    t.q1 = CriticNet::make(obs_dim, action_dim, hidden, act, diffusion, K, rng);
    t.q2 = CriticNet::make(obs_dim, action_dim, hidden, act, diffusion, K, rng);
    t.target1 = t.q1;
    t.target2 = t.q2;
    t.opt1 = AdamState::for_params(t.q1.net, adam);
    t.opt2 = AdamState::for_params(t.q2.net, adam);
    return t;
  }

  /// target <- (1 - tau) target + tau online.
  void polyak(double tau) {
    auto blend = [tau](MlpParams& target, const MlpParams& online) {
      scale(target, 1.0 - tau);
      axpy(target, tau, online);
    };
    blend(target1.net, q1.net);
    blend(target2.net, q2.net);
  }

  [[nodiscard]] ActionValueFn online_fn() const {
    return [this](const Tensor& obs, const Tensor& action, bool want_grad) {
      return twin_min(q1, q2, critic_input(q1, obs, action), want_grad);
    };
  }
  [[nodiscard]] DiffActionValueFn online_diff_fn() const {
    return [this](const Tensor& obs, const Tensor& a_k, std::span<const int> ks, const Tensor& a_prev, bool want_grad) {
      return twin_min(q1, q2, critic_input(q1, obs, a_k, ks, a_prev), want_grad);
    };
  }
};

}  // namespace dmerl
