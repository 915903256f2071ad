#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dmerl/errors.hpp"
#include "dmerl/mlp.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

inline constexpr double kLogSqrt2Pi = 0.91893853320467274178;

// ---------------------------------------------------------------------------
// Noise schedule
// ---------------------------------------------------------------------------

enum class ScheduleKind { linear };

/// Discrete variance-preserving schedule on k = 1..K with step 1/K.
/// beta grows linearly from the data end (k -> 0) to beta_max at k = K.
struct NoiseSchedule {
  int K = 1;
  double nu = 2.2;
  double beta_min = 0.05;
  double beta_max = 3.0;
  ScheduleKind kind = ScheduleKind::linear;

  [[nodiscard]] double delta() const { return 1.0 / static_cast<double>(K); }

  void validate() const {
    if (K < 1) throw ConfigError("diffusion.K must be >= 1");
    if (!(nu > 0.0)) throw ConfigError("diffusion.nu must be > 0");
    if (!(beta_min > 0.0) || !(beta_max > 0.0)) throw ConfigError("diffusion beta bounds must be > 0");
  }
};

inline void check_step(const NoiseSchedule& s, int k) {
  if (k < 1 || k > s.K)
    throw IndexError("diffusion step " + std::to_string(k) + " outside 1.." + std::to_string(s.K));
}

inline double beta_at(const NoiseSchedule& s, int k) {
  check_step(s, k);
  return s.beta_min + (s.beta_max - s.beta_min) * (static_cast<double>(k) / static_cast<double>(s.K));
}

/// Per-step coefficients shared by the forward and reverse kernels.
struct StepCoefficients {
  double beta_delta;      // beta_k * delta_k
  double forward_scale;   // 1 - beta_delta / 2
  double reverse_scale;   // 1 + beta_delta / 2
  double score_scale;     // nu^2 * beta_delta
  double std;             // nu * sqrt(beta_delta)
};

inline StepCoefficients step_coefficients(const NoiseSchedule& s, int k) {
  const double bd = beta_at(s, k) * s.delta();
  return {bd, 1.0 - 0.5 * bd, 1.0 + 0.5 * bd, s.nu * s.nu * bd, s.nu * std::sqrt(bd)};
}

// ---------------------------------------------------------------------------
// Gaussian kernels
// ---------------------------------------------------------------------------

/// Diagonal Gaussian N(mean, diag(std^2)).
struct GaussianHead {
  std::vector<double> mean;
  std::vector<double> std;

  [[nodiscard]] std::size_t dim() const { return mean.size(); }

  [[nodiscard]] double log_density(std::span<const double> x) const {
    if (x.size() != mean.size()) throw DimensionError("GaussianHead::log_density: dimension mismatch");
    double lp = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double z = (x[i] - mean[i]) / std[i];
      lp += -0.5 * z * z - std::log(std[i]) - kLogSqrt2Pi;
    }
    return lp;
  }

  [[nodiscard]] std::vector<double> sample(Rng& rng) const {
    std::vector<double> x(mean.size());
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = mean[i] + std[i] * rng.normal();
    return x;
  }
};

inline double gaussian_log_density(double x, double mean, double std) {
  const double z = (x - mean) / std;
  return -0.5 * z * z - std::log(std) - kLogSqrt2Pi;
}

/// p(a^k | a^{k-1}).
inline GaussianHead forward_step_density(const NoiseSchedule& s, int k, std::span<const double> a_prev) {
  const auto c = step_coefficients(s, k);
  GaussianHead h;
  h.mean.resize(a_prev.size());
  h.std.assign(a_prev.size(), c.std);
  for (std::size_t i = 0; i < a_prev.size(); ++i) h.mean[i] = c.forward_scale * a_prev[i];
  return h;
}

/// q_theta(a^{k-1} | a^k) given the score estimate at (a^k, k).
inline GaussianHead reverse_step_density(const NoiseSchedule& s, int k, std::span<const double> a_k,
                                         std::span<const double> score) {
  if (a_k.size() != score.size()) throw DimensionError("reverse_step_density: score dimension mismatch");
  const auto c = step_coefficients(s, k);
  GaussianHead h;
  h.mean.resize(a_k.size());
  h.std.assign(a_k.size(), c.std);
  for (std::size_t i = 0; i < a_k.size(); ++i) {
    if (!std::isfinite(score[i]))
      throw NumericError("reverse_step_density: non-finite score at step " + std::to_string(k));
    h.mean[i] = c.reverse_scale * a_k[i] + c.score_scale * score[i];
  }
  return h;
}

/// Prior N(0, nu^2 I) over a^K.
inline GaussianHead prior_density(const NoiseSchedule& s, std::size_t dim) {
  return GaussianHead{std::vector<double>(dim, 0.0), std::vector<double>(dim, s.nu)};
}

// ---------------------------------------------------------------------------
// Action squashing
// ---------------------------------------------------------------------------

/// Per-dimension action box.
struct ActionBox {
  std::vector<double> lo;
  std::vector<double> hi;

  [[nodiscard]] std::size_t dim() const { return lo.size(); }

  static ActionBox uniform(std::size_t dim, double lo, double hi) {
    return ActionBox{std::vector<double>(dim, lo), std::vector<double>(dim, hi)};
  }

  void validate() const {
    if (lo.size() != hi.size()) throw ConfigError("action bounds: lo/hi dimension mismatch");
    for (std::size_t i = 0; i < lo.size(); ++i)
      if (!(lo[i] < hi[i])) throw ConfigError("action bounds: lo must be < hi in every dimension");
  }

  [[nodiscard]] bool contains(std::span<const double> a) const {
    for (std::size_t i = 0; i < a.size(); ++i)
      if (!(a[i] >= lo[i] && a[i] <= hi[i])) return false;
    return true;
  }
};

inline std::vector<double> squash_action(std::span<const double> a0, const ActionBox& box) {
  if (a0.size() != box.dim()) throw DimensionError("squash_action: dimension mismatch");
  std::vector<double> out(a0.size());
  for (std::size_t i = 0; i < a0.size(); ++i)
    out[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * 0.5 * (std::tanh(a0[i]) + 1.0);
  return out;
}

/// log(1 - tanh(x)^2), stable for large |x|.
inline double log_one_minus_tanh_sq(double x) {
  const double ax = std::abs(x);
  return 2.0 * (std::numbers::ln2 - ax - std::log1p(std::exp(-2.0 * ax)));
}

/// log |det d squash / d a0|.
inline double squash_log_det(std::span<const double> a0, const ActionBox& box) {
  double s = 0.0;
  for (std::size_t i = 0; i < a0.size(); ++i)
    s += std::log(0.5 * (box.hi[i] - box.lo[i])) + log_one_minus_tanh_sq(a0[i]);
  return s;
}

/// d/da0 of squash_log_det, per coordinate: -2 tanh(a0).
inline double squash_log_det_grad(double a0) { return -2.0 * std::tanh(a0); }

// ---------------------------------------------------------------------------
// Score network
// ---------------------------------------------------------------------------

inline constexpr std::size_t kTimeFrequencies = 8;
inline constexpr std::size_t kTimeEmbeddingDim = 2 * kTimeFrequencies;

/// Sinusoidal features of k / K.
inline void time_embedding(int k, int K, std::span<double> out) {
  const double x = static_cast<double>(k) / static_cast<double>(K);
  for (std::size_t j = 0; j < kTimeFrequencies; ++j) {
    const double w = std::numbers::pi * static_cast<double>(1U << j) * 0.5;
    out[2 * j] = std::sin(w * x);
    out[2 * j + 1] = std::cos(w * x);
  }
}

/// s_theta(s, a^k, k): an MLP over [observation, a^k, embedding(k / K)].
struct ScoreNet {
  MlpParams trunk;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;

  static ScoreNet make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                       Activation act, Rng& rng) {
    ScoreNet net{make_mlp(obs_dim + action_dim + kTimeEmbeddingDim, hidden, action_dim, act, rng, true), obs_dim,
                 action_dim};
    return net;
  }

  [[nodiscard]] std::size_t input_dim() const { return obs_dim + action_dim + kTimeEmbeddingDim; }

  void validate() const {
    trunk.validate();
    if (trunk.in_dim() != input_dim())
      throw DimensionError("score net input width " + std::to_string(trunk.in_dim()) + " != obs + action + time (" +
                           std::to_string(input_dim()) + ")");
    if (trunk.out_dim() != action_dim)
      throw DimensionError("score net output width " + std::to_string(trunk.out_dim()) + " != action dimension " +
                           std::to_string(action_dim));
  }
};

/// Row-wise network input [obs, a^k, embed(k)].
inline Tensor score_input(const ScoreNet& net, const Tensor& obs, const Tensor& a_k, std::span<const int> k, int K) {
  const std::size_t B = obs.rows();
  if (a_k.rows() != B || k.size() != B) throw DimensionError("score_input: batch size mismatch");
  if (obs.cols() != net.obs_dim || a_k.cols() != net.action_dim)
    throw DimensionError("score_input: observation/action width mismatch");
  Tensor x = Tensor::matrix(B, net.input_dim());
  for (std::size_t r = 0; r < B; ++r) {
    auto row = x.row(r);
    std::copy(obs.row(r).begin(), obs.row(r).end(), row.begin());
    std::copy(a_k.row(r).begin(), a_k.row(r).end(), row.begin() + static_cast<std::ptrdiff_t>(net.obs_dim));
    time_embedding(k[r], K, row.subspan(net.obs_dim + net.action_dim));
  }
  return x;
}

// ---------------------------------------------------------------------------
// Chains
// ---------------------------------------------------------------------------

/// One reverse-diffusion sample a^K -> a^0 with the per-step log-densities.
/// states[k] holds a^k; reverse_log_density[k-1] = log q(a^{k-1} | a^k, s) and
/// forward_log_density[k-1] = log p(a^k | a^{k-1}).
struct DiffusionChain {
  std::vector<std::vector<double>> states;
  std::vector<double> reverse_log_density;
  std::vector<double> forward_log_density;
  double prior_log_density = 0.0;
  std::vector<double> squashed_action;

  [[nodiscard]] int K() const { return static_cast<int>(reverse_log_density.size()); }
  [[nodiscard]] const std::vector<double>& action() const { return states.front(); }
};

inline double log_ratio_step(const DiffusionChain& chain, int k) {
  if (k < 1 || k > chain.K())
    throw IndexError("log_ratio_step: step " + std::to_string(k) + " outside 1.." + std::to_string(chain.K()));
  return chain.reverse_log_density[k - 1] - chain.forward_log_density[k - 1];
}

/// log q(a^{0:K}) - log p_forward(a^{1:K} | a^0): the chain log-ratio excluding the target term.
inline double chain_log_ratio(const DiffusionChain& chain) {
  double s = chain.prior_log_density;
  for (int k = 1; k <= chain.K(); ++k) s += log_ratio_step(chain, k);
  return s;
}

/// Samples B chains in lockstep, one network evaluation per diffusion step.
/// `obs` is [B, obs_dim].
inline std::vector<DiffusionChain> sample_chains(const NoiseSchedule& sched, const ScoreNet& net, const Tensor& obs,
                                                 const ActionBox& box, Rng& rng) {
  sched.validate();
  if (net.trunk.out_dim() != net.action_dim) throw DimensionError("sample_chain: score net output != action dim");
  const std::size_t B = obs.rows();
  const std::size_t d = net.action_dim;
  const int K = sched.K;
  std::vector<DiffusionChain> chains(B);
  Tensor a = Tensor::matrix(B, d);
  const GaussianHead prior = prior_density(sched, d);
  for (std::size_t b = 0; b < B; ++b) {
    auto& c = chains[b];
    c.states.assign(static_cast<std::size_t>(K) + 1, std::vector<double>(d));
    c.reverse_log_density.resize(static_cast<std::size_t>(K));
    c.forward_log_density.resize(static_cast<std::size_t>(K));
    for (std::size_t i = 0; i < d; ++i) a(b, i) = sched.nu * rng.normal();
    c.states[static_cast<std::size_t>(K)].assign(a.row(b).begin(), a.row(b).end());
    c.prior_log_density = prior.log_density(a.row(b));
  }
  std::vector<int> ks(B);
  for (int k = K; k >= 1; --k) {
    std::fill(ks.begin(), ks.end(), k);
    const Tensor score = mlp_forward(net.trunk, score_input(net, obs, a, ks, K));
    const auto coef = step_coefficients(sched, k);
    Tensor next = Tensor::matrix(B, d);
    for (std::size_t b = 0; b < B; ++b) {
      double rev = 0.0;
      double fwd = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double s = score(b, i);
        if (!std::isfinite(s))
          throw NumericError("sample_chain: non-finite score at diffusion step " + std::to_string(k));
        const double mean = coef.reverse_scale * a(b, i) + coef.score_scale * s;
        const double x = mean + coef.std * rng.normal();
        if (!std::isfinite(x))
          throw NumericError("sample_chain: non-finite sample at diffusion step " + std::to_string(k));
        next(b, i) = x;
        rev += gaussian_log_density(x, mean, coef.std);
        fwd += gaussian_log_density(a(b, i), coef.forward_scale * x, coef.std);
      }
      auto& c = chains[b];
      c.reverse_log_density[static_cast<std::size_t>(k - 1)] = rev;
      c.forward_log_density[static_cast<std::size_t>(k - 1)] = fwd;
      c.states[static_cast<std::size_t>(k - 1)].assign(next.row(b).begin(), next.row(b).end());
    }
    a = std::move(next);
  }
  for (auto& c : chains) c.squashed_action = squash_action(c.states.front(), box);
  return chains;
}

inline DiffusionChain sample_chain(const NoiseSchedule& sched, const ScoreNet& net, std::span<const double> obs,
                                   const ActionBox& box, Rng& rng) {
  Tensor o = Tensor::matrix(1, obs.size(), std::vector<double>(obs.begin(), obs.end()));
  return std::move(sample_chains(sched, net, o, box, rng).front());
}

/// Log-densities of a given state sequence (states[k] = a^k) under the
/// network's reverse kernels and the forward kernels.
inline DiffusionChain evaluate_chain(const NoiseSchedule& sched, const ScoreNet& net, std::span<const double> obs,
                                     std::vector<std::vector<double>> states, const ActionBox& box) {
  const int K = sched.K;
  if (static_cast<int>(states.size()) != K + 1) throw DimensionError("evaluate_chain: expected K+1 states");
  DiffusionChain c;
  c.states = std::move(states);
  c.reverse_log_density.resize(static_cast<std::size_t>(K));
  c.forward_log_density.resize(static_cast<std::size_t>(K));
  c.prior_log_density = prior_density(sched, net.action_dim).log_density(c.states.back());
  Tensor o = Tensor::matrix(1, obs.size(), std::vector<double>(obs.begin(), obs.end()));
  for (int k = K; k >= 1; --k) {
    const auto& ak = c.states[static_cast<std::size_t>(k)];
    const auto& akm1 = c.states[static_cast<std::size_t>(k - 1)];
    Tensor a = Tensor::matrix(1, ak.size(), ak);
    const int kk[1] = {k};
    const Tensor score = mlp_forward(net.trunk, score_input(net, o, a, kk, K));
    const auto rev = reverse_step_density(sched, k, ak, score.data());
    const auto fwd = forward_step_density(sched, k, akm1);
    c.reverse_log_density[static_cast<std::size_t>(k - 1)] = rev.log_density(akm1);
    c.forward_log_density[static_cast<std::size_t>(k - 1)] = fwd.log_density(ak);
  }
  c.squashed_action = squash_action(c.states.front(), box);
  return c;
}

}  // namespace dmerl
