#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmerl/critic.hpp"
#include "dmerl/diffusion.hpp"
#include "dmerl/env.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/policy.hpp"

namespace dmerl {

// ---------------------------------------------------------------------------
// Temperature
// ---------------------------------------------------------------------------

enum class TemperatureMode { fixed, anneal, automatic };

inline std::string_view to_string(TemperatureMode m) {
  switch (m) {
    case TemperatureMode::fixed: return "fixed";
    case TemperatureMode::anneal: return "anneal";
    case TemperatureMode::automatic: return "auto";
  }
  return "fixed";
}

inline TemperatureMode temperature_mode_from_string(std::string_view s) {
  if (s == "fixed") return TemperatureMode::fixed;
  if (s == "anneal") return TemperatureMode::anneal;
  if (s == "auto") return TemperatureMode::automatic;
  throw ConfigError("unknown temperature mode '" + std::string(s) + "'");
}

/// Holds the temperature T (alpha = 1 / T) under fixed, annealed or automatic control.
struct TemperatureController {
  TemperatureMode mode = TemperatureMode::fixed;
  double value = 0.0;
  double start = 0.0;            // anneal: T at progress 0
  double halving_period = 0.1;   // anneal: fraction of training per halving
  double target_entropy = 0.0;   // auto
  double dual_step = 1e-3;       // auto: step size on log T

  static TemperatureController fixed(double t) {
    if (t < 0.0) throw ContractViolation("temperature must be >= 0");
    TemperatureController c;
    c.value = c.start = t;
    return c;
  }

  /// T_start = c / dim(A), halved every `period` of training.
  static TemperatureController annealed(double c, std::size_t action_dim, double period = 0.1) {
    if (c < 0.0) throw ContractViolation("temperature scale must be >= 0");
    TemperatureController t;
    t.mode = TemperatureMode::anneal;
    t.value = t.start = c / static_cast<double>(action_dim);
    t.halving_period = period;
    return t;
  }

  static TemperatureController automatic(double initial, double target_entropy, double dual_step) {
    if (!(initial > 0.0)) throw ContractViolation("automatic temperature needs a positive initial value");
    TemperatureController t;
    t.mode = TemperatureMode::automatic;
    t.value = t.start = initial;
    t.target_entropy = target_entropy;
    t.dual_step = dual_step;
    return t;
  }

  [[nodiscard]] double alpha() const {
    if (!(value > 0.0)) throw ContractViolation("alpha = 1 / T is undefined at T = 0");
    return 1.0 / value;
  }
};

/// Target entropy for automatic control: scale * dim(A), scale = -10 for
/// diffusion policies and -1 for Gaussian ones.
inline double default_target_entropy(std::size_t action_dim, bool diffusion) {
  return (diffusion ? -10.0 : -1.0) * static_cast<double>(action_dim);
}

/// Anneal: T = T_start * 2^-floor(progress / period). Auto: one dual-ascent
/// step on log T toward the target entropy using the measured bound.
inline TemperatureController anneal_or_tune_temperature(TemperatureController c, double progress,
                                                        double measured_entropy) {
  if (progress < 0.0 || progress > 1.0) throw ContractViolation("temperature progress must lie in [0, 1]");
  switch (c.mode) {
    case TemperatureMode::fixed: break;
    case TemperatureMode::anneal: {
      const double halvings = std::floor(progress / c.halving_period + 1e-9);
      c.value = std::min(c.value, c.start * std::exp2(-halvings));
      break;
    }
    case TemperatureMode::automatic: {
      if (!std::isfinite(measured_entropy)) throw NumericError("temperature: non-finite entropy estimate");
      const double log_t = std::log(c.value) + c.dual_step * (c.target_entropy - measured_entropy);
      c.value = std::exp(std::clamp(log_t, -20.0, 5.0));
      break;
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Gradient containers and preconditioning
// ---------------------------------------------------------------------------

/// Loss value and per-sample gradients w.r.t. a Gaussian head's outputs.
struct HeadGrads {
  double loss = 0.0;
  Tensor d_mean;     // [B, d]
  Tensor d_log_std;  // [B, d]; all zero for fixed-variance heads
};

struct LossGrad {
  double loss = 0.0;
  MlpParams grad;
};

/// Per-sample WPO preconditioner: grad_mean -> std^2 grad_mean and
/// grad_std -> std^2 / 2 grad_std (the same factor applies to log std).
struct GradScale {
  static double mean_factor(double std) { return std * std; }
  static double std_factor(double std) { return 0.5 * std * std; }

  static void apply(HeadGrads& g, const Tensor& std) {
    for (std::size_t r = 0; r < g.d_mean.rows(); ++r)
      for (std::size_t i = 0; i < g.d_mean.cols(); ++i) {
        g.d_mean(r, i) *= mean_factor(std(r, i));
        g.d_log_std(r, i) *= std_factor(std(r, i));
      }
  }
};

namespace detail {

inline std::vector<double> resolve_weights(std::span<const double> weights, std::size_t B) {
  if (weights.empty()) return std::vector<double>(B, 1.0 / static_cast<double>(B));
  if (weights.size() != B) throw DimensionError("loss weights length does not match batch size");
  return {weights.begin(), weights.end()};
}

inline Tensor row_broadcast(std::span<const double> per_row, std::size_t cols) {
  Tensor t = Tensor::matrix(per_row.size(), cols);
  for (std::size_t r = 0; r < per_row.size(); ++r)
    for (std::size_t i = 0; i < cols; ++i) t(r, i) = per_row[r];
  return t;
}

/// Bounded action and per-coordinate d(bounded)/d(u).
inline void squash_with_jacobian(const Tensor& u, const ActionBox& box, Tensor& bounded, Tensor& jac) {
  bounded = Tensor::matrix(u.rows(), u.cols());
  jac = Tensor::matrix(u.rows(), u.cols());
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i) {
      const double t = std::tanh(u(r, i));
      const double half = 0.5 * (box.hi[i] - box.lo[i]);
      bounded(r, i) = box.lo[i] + half * (t + 1.0);
      jac(r, i) = half * (1.0 - t * t);
    }
}

inline double row_log_det(const Tensor& u, std::size_t r, const ActionBox& box) {
  return squash_log_det(u.row(r), box);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Gaussian-policy losses
// ---------------------------------------------------------------------------

/// Lifts Q over bounded actions to pre-squash actions u: Q(s, squash(u)),
/// with the action gradient chained through the squash.
inline ActionValueFn squashed_action_value(ActionValueFn q, ActionBox box) {
  return [q = std::move(q), box = std::move(box)](const Tensor& obs, const Tensor& u, bool want_grad) {
    Tensor bounded, jac;
    detail::squash_with_jacobian(u, box, bounded, jac);
    QEval e = q(obs, bounded, want_grad);
    if (want_grad)
      for (std::size_t k = 0; k < jac.size(); ++k) e.grad_action[k] *= jac[k];
    return e;
  };
}

/// Reparameterized MaxEnt actor loss mean_w[T log q(u|s) - Q(s, u)] with
/// u = mean + std * noise. With a squash box, log q is the density of the
/// bounded action, log q(u) - log|det J(u)|; Q is read at u as given.
inline HeadGrads maxent_actor_head(const Tensor& obs, const Tensor& mean, const Tensor& std, const Tensor& noise,
                                   const ActionValueFn& q, double temperature, const ActionBox* squash,
                                   std::span<const double> weights = {}) {
  if (temperature < 0.0) throw ContractViolation("maxent_actor_loss: temperature must be >= 0");
  const std::size_t B = mean.rows();
  const std::size_t d = mean.cols();
  const auto w = detail::resolve_weights(weights, B);
  Tensor u = Tensor::matrix(B, d);
  for (std::size_t k = 0; k < u.size(); ++k) u[k] = mean[k] + std[k] * noise[k];
  const QEval qe = q(obs, u, true);
  HeadGrads g{0.0, Tensor::matrix(B, d), Tensor::matrix(B, d)};
  for (std::size_t r = 0; r < B; ++r) {
    double log_q = 0.0;
    for (std::size_t i = 0; i < d; ++i) log_q += gaussian_log_density(u(r, i), mean(r, i), std(r, i));
    if (squash) log_q -= detail::row_log_det(u, r, *squash);
    g.loss += w[r] * (temperature * log_q - qe.value[r]);
    for (std::size_t i = 0; i < d; ++i) {
      // d/du of [T (-log det) - Q]; log q(u) itself is reparameterization-invariant in the mean.
      double du = -qe.grad_action(r, i);
      if (squash) du -= temperature * squash_log_det_grad(u(r, i));
      g.d_mean(r, i) = w[r] * du;
      g.d_log_std(r, i) = w[r] * (du * std(r, i) * noise(r, i) - temperature);
    }
  }
  return g;
}

inline LossGrad maxent_actor_loss(const GaussianPolicy& p, const Tensor& obs, const Tensor& noise,
                                  const ActionValueFn& q, double temperature, const ActionBox* squash,
                                  std::span<const double> weights = {}) {
  const auto b = gaussian_forward(p, obs);
  const auto h = maxent_actor_head(obs, b.mean, b.std, noise, q, temperature, squash, weights);
  return {h.loss, gaussian_backward(p, b, h.d_mean, h.d_log_std)};
}

/// Squared-error regression of a scalar network onto fixed targets: mean_w (f(x) - y)^2.
inline LossGrad mse_loss(const MlpParams& net, const Tensor& input, std::span<const double> targets,
                         std::span<const double> weights = {}) {
  const std::size_t B = input.rows();
  if (targets.size() != B) throw DimensionError("regression loss: target count mismatch");
  const auto w = detail::resolve_weights(weights, B);
  MlpCache cache;
  const Tensor out = mlp_forward(net, input, cache);
  Tensor up = Tensor::matrix(B, 1);
  LossGrad lg{0.0, zeros_like(net)};
  for (std::size_t r = 0; r < B; ++r) {
    const double e = out[r] - targets[r];
    lg.loss += w[r] * e * e;
    up[r] = 2.0 * w[r] * e;
  }
  mlp_backward_into(net, cache, up, lg.grad, nullptr);
  return lg;
}

inline LossGrad critic_loss(const CriticNet& c, const Tensor& input, std::span<const double> targets,
                            std::span<const double> weights = {}) {
  return mse_loss(c.net, input, targets, weights);
}

/// y = r + gamma (1 - done) (Q'(s', a') - T * log-density term of a').
inline std::vector<double> soft_td_targets(std::span<const double> rewards, std::span<const char> dones,
                                           std::span<const double> next_q, std::span<const double> next_log_term,
                                           double gamma, double temperature) {
  const std::size_t B = rewards.size();
  if (dones.size() != B || next_q.size() != B || next_log_term.size() != B)
    throw DimensionError("soft_td_targets: length mismatch");
  std::vector<double> y(B);
  for (std::size_t r = 0; r < B; ++r)
    y[r] = dones[r] ? rewards[r] : rewards[r] + gamma * (next_q[r] - temperature * next_log_term[r]);
  return y;
}

/// Clipped surrogate: mean_w of -min(rho A, clip(rho, 1 - eps, 1 + eps) A)
/// with rho = exp(logp_new - logp_old). Returns dL/dlogp_new per sample.
struct ClipResult {
  double loss = 0.0;
  std::vector<double> d_logp;
  double clip_fraction = 0.0;
};

inline ClipResult ppo_clip_loss(std::span<const double> logp_new, std::span<const double> logp_old,
                                std::span<const double> advantages, double eps, std::span<const double> weights = {}) {
  const std::size_t B = logp_new.size();
  if (logp_old.size() != B || advantages.size() != B) throw DimensionError("ppo_clip_loss: length mismatch");
  const auto w = detail::resolve_weights(weights, B);
  ClipResult c;
  c.d_logp.assign(B, 0.0);
  for (std::size_t r = 0; r < B; ++r) {
    const double rho = std::exp(logp_new[r] - logp_old[r]);
    const double A = advantages[r];
    const double unclipped = rho * A;
    const double clipped = std::clamp(rho, 1.0 - eps, 1.0 + eps) * A;
    if (unclipped <= clipped) {
      c.loss -= w[r] * unclipped;
      c.d_logp[r] = -w[r] * unclipped;
    } else {
      c.loss -= w[r] * clipped;
      c.clip_fraction += w[r];
    }
  }
  return c;
}

/// Zero-mean, unit-variance advantages (unchanged if the spread vanishes).
inline void normalize_advantages(std::vector<double>& a) {
  if (a.size() < 2) return;
  double m = 0.0;
  for (double v : a) m += v;
  m /= static_cast<double>(a.size());
  double s = 0.0;
  for (double v : a) s += (v - m) * (v - m);
  s = std::sqrt(s / static_cast<double>(a.size() - 1));
  for (double& v : a) v = s > 1e-12 ? (v - m) / s : v - m;
}

inline LossGrad ppo_gaussian_loss(const GaussianPolicy& p, const Tensor& obs, const Tensor& u,
                                  std::span<const double> logp_old, std::span<const double> advantages, double eps,
                                  double* clip_fraction = nullptr) {
  const auto b = gaussian_forward(p, obs);
  const auto logp = gaussian_log_prob(b, u);
  const auto c = ppo_clip_loss(logp, logp_old, advantages, eps);
  if (clip_fraction) *clip_fraction = c.clip_fraction;
  Tensor dm = Tensor::matrix(u.rows(), u.cols());
  Tensor ds = Tensor::matrix(u.rows(), u.cols());
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i) {
      const double z = (u(r, i) - b.mean(r, i)) / b.std(r, i);
      dm(r, i) = c.d_logp[r] * z / b.std(r, i);
      ds(r, i) = c.d_logp[r] * (z * z - 1.0);
    }
  return {c.loss, gaussian_backward(p, b, dm, ds)};
}

/// Frozen WPO field g = grad_u(T log q*(u|s) - Q(s, u)); with a squash box
/// the log-det joins log q*.
inline Tensor wpo_field(const Tensor& obs, const Tensor& mean, const Tensor& std, const Tensor& u,
                        const ActionValueFn& q, double temperature, const ActionBox* squash) {
  if (temperature < 0.0) throw ContractViolation("wpo_loss: temperature must be >= 0");
  const QEval qe = q(obs, u, true);
  Tensor g = Tensor::matrix(u.rows(), u.cols());
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i) {
      const double s2 = std(r, i) * std(r, i);
      g(r, i) = -temperature * (u(r, i) - mean(r, i)) / s2 - qe.grad_action(r, i);
      if (squash) g(r, i) -= temperature * squash_log_det_grad(u(r, i));
    }
  return g;
}

/// mean_w[g . grad_u log N(u; mean, std^2)] for a frozen field g.
inline double wpo_surrogate(const Tensor& mean, const Tensor& std, const Tensor& u, const Tensor& field,
                            std::span<const double> weights = {}) {
  const auto w = detail::resolve_weights(weights, u.rows());
  double l = 0.0;
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i)
      l += w[r] * field(r, i) * (-(u(r, i) - mean(r, i)) / (std(r, i) * std(r, i)));
  return l;
}

/// Head gradients of the WPO surrogate, before preconditioning.
inline HeadGrads wpo_head(const Tensor& obs, const Tensor& mean, const Tensor& std, const Tensor& u,
                          const ActionValueFn& q, double temperature, const ActionBox* squash,
                          std::span<const double> weights = {}) {
  const std::size_t B = u.rows();
  const std::size_t d = u.cols();
  const auto w = detail::resolve_weights(weights, B);
  const Tensor field = wpo_field(obs, mean, std, u, q, temperature, squash);
  HeadGrads g{wpo_surrogate(mean, std, u, field, w), Tensor::matrix(B, d), Tensor::matrix(B, d)};
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      const double s2 = std(r, i) * std(r, i);
      const double dev = u(r, i) - mean(r, i);
      g.d_mean(r, i) = w[r] * field(r, i) / s2;
      g.d_log_std(r, i) = w[r] * field(r, i) * 2.0 * dev / s2;
    }
  return g;
}

/// Rejects policy networks whose hidden activations are not twice differentiable.
inline void require_smooth(const MlpParams& p, std::string_view what) {
  for (const auto& l : p.layers)
    if (l.activation == Activation::relu)
      throw ConfigError(std::string(what) + ": WPO needs smooth (tanh) activations, relu found");
}

inline LossGrad wpo_loss(const GaussianPolicy& p, const Tensor& obs, const Tensor& u, const ActionValueFn& q,
                         double temperature, const ActionBox* squash, bool precondition = true) {
  require_smooth(p.net, "wpo_loss");
  const auto b = gaussian_forward(p, obs);
  auto h = wpo_head(obs, b.mean, b.std, u, q, temperature, squash);
  if (precondition) GradScale::apply(h, b.std);
  return {h.loss, gaussian_backward(p, b, h.d_mean, h.d_log_std)};
}

/// Log-variance loss: half the variance of l around the weighted baseline
/// b = sum_w l_i. `sample` applies the reliability-weight correction
/// 1 / (1 - sum w^2) (B / (B - 1) for uniform weights); `population` treats the
/// weights as an exact measure, as quadrature does. Returns dL/dl_i.
enum class LvVariance { sample, population };

struct LvResult {
  double loss = 0.0;
  double baseline = 0.0;
  std::vector<double> d_ell;
};

inline LvResult lv_loss(std::span<const double> ell, std::span<const double> weights = {},
                        LvVariance mode = LvVariance::sample) {
  const std::size_t B = ell.size();
  if (B < 2) throw ContractViolation("lv_loss: needs at least two samples");
  const auto w = detail::resolve_weights(weights, B);
  double scale = 1.0;
  if (mode == LvVariance::sample) {
    double w2 = 0.0;
    for (double x : w) w2 += x * x;
    if (!(w2 < 1.0)) throw ContractViolation("lv_loss: weights concentrate on a single sample");
    scale = 1.0 / (1.0 - w2);
  }
  LvResult res;
  for (std::size_t i = 0; i < B; ++i) res.baseline += w[i] * ell[i];
  res.d_ell.resize(B);
  for (std::size_t i = 0; i < B; ++i) {
    const double e = ell[i] - res.baseline;
    res.loss += 0.5 * scale * w[i] * e * e;
    res.d_ell[i] = scale * w[i] * e;
  }
  return res;
}

/// LV loss for a Gaussian policy on fixed samples u with
/// l_i = log q_theta(u_i|s_i) - log_target_i; gradients flow through log q only.
inline LossGrad lv_gaussian_loss(const GaussianPolicy& p, const Tensor& obs, const Tensor& u,
                                 std::span<const double> log_target, std::span<const double> weights = {},
                                 LvVariance mode = LvVariance::sample) {
  const auto b = gaussian_forward(p, obs);
  const auto logq = gaussian_log_prob(b, u);
  std::vector<double> ell(logq.size());
  for (std::size_t i = 0; i < ell.size(); ++i) ell[i] = logq[i] - log_target[i];
  const auto lv = lv_loss(ell, weights, mode);
  Tensor dm = Tensor::matrix(u.rows(), u.cols());
  Tensor ds = Tensor::matrix(u.rows(), u.cols());
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i) {
      const double z = (u(r, i) - b.mean(r, i)) / b.std(r, i);
      dm(r, i) = lv.d_ell[r] * z / b.std(r, i);
      ds(r, i) = lv.d_ell[r] * (z * z - 1.0);
    }
  return {lv.loss, gaussian_backward(p, b, dm, ds)};
}

// ---------------------------------------------------------------------------
// Diffusion objectives
// ---------------------------------------------------------------------------

/// R_env on landing steps minus T times the step log-ratio. With the squash
/// correction the landing ratio uses the density of the bounded action.
inline double diff_maxent_reward(double env_reward, bool landing, double reverse_log_density,
                                 double forward_log_density, double squash_log_det, double temperature,
                                 bool squash_correction = true) {
  double ratio = reverse_log_density - forward_log_density;
  if (landing && squash_correction) ratio -= squash_log_det;
  return (landing ? env_reward : 0.0) - temperature * ratio;
}

inline double diff_maxent_reward(const AugmentedTransition& tr, double temperature, bool squash_correction = true) {
  return diff_maxent_reward(tr.env_reward, tr.landing, tr.reverse_log_density, tr.forward_log_density,
                            tr.squash_log_det, temperature, squash_correction);
}

/// Reward-only variant used by the zero-temperature reduction.
inline double env_only_reward(const AugmentedTransition& tr) { return tr.landing ? tr.env_reward : 0.0; }

/// Reparameterized diffusion actor loss at the head level:
/// mean_w[T (log q(a'|a^k) - log p(a^k|a') - [k = 1] log det) - Q_Diff(s~, a')],
/// a' = mean + std * noise. Returns dL/dmean (no learned variance).
inline HeadGrads diffsac_actor_head(const NoiseSchedule& sched, const Tensor& obs, const Tensor& a_k,
                                    std::span<const int> ks, const Tensor& mean, std::span<const double> std,
                                    const Tensor& noise, const DiffActionValueFn& q, double temperature,
                                    const ActionBox* squash, std::span<const double> weights = {}) {
  if (temperature < 0.0) throw ContractViolation("diffsac_actor_loss: temperature must be >= 0");
  const std::size_t B = mean.rows();
  const std::size_t d = mean.cols();
  const auto w = detail::resolve_weights(weights, B);
  Tensor a_prev = Tensor::matrix(B, d);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < d; ++i) a_prev(r, i) = mean(r, i) + std[r] * noise(r, i);
  const QEval qe = q(obs, a_k, ks, a_prev, true);
  HeadGrads g{0.0, Tensor::matrix(B, d), Tensor::matrix(B, d)};
  for (std::size_t r = 0; r < B; ++r) {
    const auto c = step_coefficients(sched, ks[r]);
    double log_q = 0.0;
    double log_p = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      log_q += gaussian_log_density(a_prev(r, i), mean(r, i), std[r]);
      log_p += gaussian_log_density(a_k(r, i), c.forward_scale * a_prev(r, i), c.std);
    }
    const bool landing = ks[r] == 1 && squash;
    double ratio = log_q - log_p;
    if (landing) ratio -= detail::row_log_det(a_prev, r, *squash);
    g.loss += w[r] * (temperature * ratio - qe.value[r]);
    for (std::size_t i = 0; i < d; ++i) {
      const double dlogp = c.forward_scale * (a_k(r, i) - c.forward_scale * a_prev(r, i)) / (c.std * c.std);
      double da = -temperature * dlogp - qe.grad_action(r, i);
      if (landing) da -= temperature * squash_log_det_grad(a_prev(r, i));
      g.d_mean(r, i) = w[r] * da;
    }
  }
  return g;
}

inline LossGrad diffsac_actor_loss(const DiffusionPolicy& p, const Tensor& obs, const Tensor& a_k,
                                   std::span<const int> ks, const Tensor& noise, const DiffActionValueFn& q,
                                   double temperature, const ActionBox* squash, std::span<const double> weights = {}) {
  const auto b = reverse_forward(p, obs, a_k, ks);
  const auto h = diffsac_actor_head(p.sched, obs, a_k, ks, b.mean, b.std, noise, q, temperature, squash, weights);
  return {h.loss, reverse_backward(p, b, h.d_mean)};
}

/// Frozen diffusion WPO field g = grad_a'(T (log q*(a'|a^k) - log p(a^k|a') -
/// [k = 1] log det) - Q_Diff(s~, a')) at reverse-kernel samples a'.
inline Tensor diffwpo_field(const NoiseSchedule& sched, const Tensor& obs, const Tensor& a_k, std::span<const int> ks,
                            const Tensor& mean, std::span<const double> std, const Tensor& a_prev,
                            const DiffActionValueFn& q, double temperature, const ActionBox* squash) {
  if (temperature < 0.0) throw ContractViolation("diffwpo_loss: temperature must be >= 0");
  const QEval qe = q(obs, a_k, ks, a_prev, true);
  Tensor g = Tensor::matrix(a_prev.rows(), a_prev.cols());
  for (std::size_t r = 0; r < a_prev.rows(); ++r) {
    const auto c = step_coefficients(sched, ks[r]);
    const double s2 = std[r] * std[r];
    for (std::size_t i = 0; i < a_prev.cols(); ++i) {
      const double dev = a_prev(r, i) - mean(r, i);
      const double dlogp = c.forward_scale * (a_k(r, i) - c.forward_scale * a_prev(r, i)) / (c.std * c.std);
      g(r, i) = temperature * (-dev / s2 - dlogp) - qe.grad_action(r, i);
      if (ks[r] == 1 && squash) g(r, i) -= temperature * squash_log_det_grad(a_prev(r, i));
    }
  }
  return g;
}

/// Head gradients (w.r.t. the reverse mean) of the diffusion WPO surrogate,
/// before preconditioning.
inline HeadGrads diffwpo_head(const NoiseSchedule& sched, const Tensor& obs, const Tensor& a_k,
                              std::span<const int> ks, const Tensor& mean, std::span<const double> std,
                              const Tensor& a_prev, const DiffActionValueFn& q, double temperature,
                              const ActionBox* squash, std::span<const double> weights = {}) {
  const std::size_t B = a_prev.rows();
  const std::size_t d = a_prev.cols();
  const auto w = detail::resolve_weights(weights, B);
  const Tensor field = diffwpo_field(sched, obs, a_k, ks, mean, std, a_prev, q, temperature, squash);
  const Tensor std_m = detail::row_broadcast(std, d);
  HeadGrads g{wpo_surrogate(mean, std_m, a_prev, field, w), Tensor::matrix(B, d), Tensor::matrix(B, d)};
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < d; ++i) g.d_mean(r, i) = w[r] * field(r, i) / (std[r] * std[r]);
  return g;
}

inline LossGrad diffwpo_loss(const DiffusionPolicy& p, const Tensor& obs, const Tensor& a_k, std::span<const int> ks,
                             const Tensor& a_prev, const DiffActionValueFn& q, double temperature,
                             const ActionBox* squash, bool precondition = true) {
  require_smooth(p.score.trunk, "diffwpo_loss");
  const auto b = reverse_forward(p, obs, a_k, ks);
  auto h = diffwpo_head(p.sched, obs, a_k, ks, b.mean, b.std, a_prev, q, temperature, squash);
  if (precondition) GradScale::apply(h, detail::row_broadcast(b.std, a_prev.cols()));
  return {h.loss, reverse_backward(p, b, h.d_mean)};
}

inline LossGrad ppo_diffusion_loss(const DiffusionPolicy& p, const Tensor& obs, const Tensor& a_k,
                                   std::span<const int> ks, const Tensor& a_prev, std::span<const double> logp_old,
                                   std::span<const double> advantages, double eps, double* clip_fraction = nullptr) {
  const auto b = reverse_forward(p, obs, a_k, ks);
  const auto logp = reverse_log_prob(b, a_prev);
  const auto c = ppo_clip_loss(logp, logp_old, advantages, eps);
  if (clip_fraction) *clip_fraction = c.clip_fraction;
  Tensor dm = Tensor::matrix(a_prev.rows(), a_prev.cols());
  for (std::size_t r = 0; r < a_prev.rows(); ++r)
    for (std::size_t i = 0; i < a_prev.cols(); ++i)
      dm(r, i) = c.d_logp[r] * (a_prev(r, i) - b.mean(r, i)) / (b.std[r] * b.std[r]);
  return {c.loss, reverse_backward(p, b, dm)};
}

/// mean_w over chains of [sum_k (log p(a^k|a^{k-1}) - log q(a^{k-1}|a^k)) - log q(a^K)],
/// a lower bound on the entropy of the a^0 marginal.
inline double entropy_lower_bound(std::span<const DiffusionChain> chains, std::span<const double> weights = {}) {
  if (chains.empty()) throw ContractViolation("entropy_lower_bound: no chains");
  const auto w = detail::resolve_weights(weights, chains.size());
  double h = 0.0;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    double s = -chains[c].prior_log_density;
    for (int k = 1; k <= chains[c].K(); ++k) s -= log_ratio_step(chains[c], k);
    h += w[c] * s;
  }
  return h;
}

}  // namespace dmerl
