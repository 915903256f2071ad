#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "dmerl/diffusion.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/mlp.hpp"
#include "dmerl/rng.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

/// Diagonal Gaussian policy over pre-squash actions. The network emits
/// [mean, raw] per row; log std = lo + (hi - lo) * (tanh(raw) + 1) / 2.
struct GaussianPolicy {
  MlpParams net;
  std::size_t obs_dim = 0;
  std::size_t action_dim = 0;
  double log_std_min = -5.0;
  double log_std_max = 2.0;

  static GaussianPolicy make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                             Activation act, Rng& rng) {
    GaussianPolicy p;
    p.net = make_mlp(obs_dim, hidden, 2 * action_dim, act, rng);
    p.obs_dim = obs_dim;
    p.action_dim = action_dim;
    return p;
  }

  void validate() const {
    net.validate();
    if (net.in_dim() != obs_dim) throw DimensionError("gaussian policy input width != observation dimension");
    if (net.out_dim() != 2 * action_dim) throw DimensionError("gaussian policy output width != 2 * action dimension");
  }
};

/// Batched Gaussian head outputs with what the backward pass needs.
struct GaussianBatch {
  Tensor mean;     // [B, d]
  Tensor log_std;  // [B, d]
  Tensor std;      // [B, d]
  Tensor raw;      // [B, d] pre-clamp network output
  MlpCache cache;
};

inline GaussianBatch gaussian_forward(const GaussianPolicy& p, const Tensor& obs) {
  GaussianBatch b;
  const Tensor out = mlp_forward(p.net, obs, b.cache);
  const std::size_t B = obs.rows();
  const std::size_t d = p.action_dim;
  b.mean = Tensor::matrix(B, d);
  b.log_std = Tensor::matrix(B, d);
  b.std = Tensor::matrix(B, d);
  b.raw = Tensor::matrix(B, d);
  const double half_span = 0.5 * (p.log_std_max - p.log_std_min);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      b.mean(r, i) = out(r, i);
      const double raw = out(r, d + i);
      b.raw(r, i) = raw;
      b.log_std(r, i) = p.log_std_min + half_span * (std::tanh(raw) + 1.0);
      b.std(r, i) = std::exp(b.log_std(r, i));
    }
  return b;
}

/// Parameter gradients from per-sample head gradients dL/dmean and dL/dlog_std.
inline MlpParams gaussian_backward(const GaussianPolicy& p, const GaussianBatch& b, const Tensor& d_mean,
                                   const Tensor& d_log_std) {
  const std::size_t B = b.mean.rows();
  const std::size_t d = p.action_dim;
  Tensor up = Tensor::matrix(B, 2 * d);
  const double half_span = 0.5 * (p.log_std_max - p.log_std_min);
  for (std::size_t r = 0; r < B; ++r)
    for (std::size_t i = 0; i < d; ++i) {
      up(r, i) = d_mean(r, i);
      const double t = std::tanh(b.raw(r, i));
      up(r, d + i) = d_log_std(r, i) * half_span * (1.0 - t * t);
    }
  MlpParams g = zeros_like(p.net);
  mlp_backward_into(p.net, b.cache, up, g, nullptr);
  return g;
}

/// Sum over coordinates of log N(u; mean, std^2) per row.
inline std::vector<double> gaussian_log_prob(const GaussianBatch& b, const Tensor& u) {
  std::vector<double> lp(u.rows(), 0.0);
  for (std::size_t r = 0; r < u.rows(); ++r)
    for (std::size_t i = 0; i < u.cols(); ++i) lp[r] += gaussian_log_density(u(r, i), b.mean(r, i), b.std(r, i));
  return lp;
}

/// Reverse-diffusion policy: a score network and its schedule.
struct DiffusionPolicy {
  ScoreNet score;
  NoiseSchedule sched;

  static DiffusionPolicy make(std::size_t obs_dim, std::size_t action_dim, const std::vector<std::size_t>& hidden,
                              Activation act, const NoiseSchedule& sched, Rng& rng) {
    return DiffusionPolicy{ScoreNet::make(obs_dim, action_dim, hidden, act, rng), sched};
  }
};

/// Reverse-kernel heads for a batch of augmented states (obs, a^k, k).
struct ReverseBatch {
  Tensor mean;              // [B, d]
  std::vector<double> std;  // per row, shared across coordinates
  std::vector<double> score_scale;
  MlpCache cache;
};

inline ReverseBatch reverse_forward(const DiffusionPolicy& p, const Tensor& obs, const Tensor& a_k,
                                    std::span<const int> ks) {
  ReverseBatch b;
  const Tensor score = mlp_forward(p.score.trunk, score_input(p.score, obs, a_k, ks, p.sched.K), b.cache);
  const std::size_t B = obs.rows();
  const std::size_t d = p.score.action_dim;
  b.mean = Tensor::matrix(B, d);
  b.std.resize(B);
  b.score_scale.resize(B);
  for (std::size_t r = 0; r < B; ++r) {
    const auto c = step_coefficients(p.sched, ks[r]);
    b.std[r] = c.std;
    b.score_scale[r] = c.score_scale;
    for (std::size_t i = 0; i < d; ++i) {
      if (!std::isfinite(score(r, i)))
        throw NumericError("reverse_forward: non-finite score at diffusion step " + std::to_string(ks[r]));
      b.mean(r, i) = c.reverse_scale * a_k(r, i) + c.score_scale * score(r, i);
    }
  }
  return b;
}

/// Parameter gradients from per-sample dL/dmean of the reverse kernel.
inline MlpParams reverse_backward(const DiffusionPolicy& p, const ReverseBatch& b, const Tensor& d_mean) {
  Tensor up = d_mean;
  for (std::size_t r = 0; r < up.rows(); ++r)
    for (std::size_t i = 0; i < up.cols(); ++i) up(r, i) *= b.score_scale[r];
  MlpParams g = zeros_like(p.score.trunk);
  mlp_backward_into(p.score.trunk, b.cache, up, g, nullptr);
  return g;
}

inline std::vector<double> reverse_log_prob(const ReverseBatch& b, const Tensor& a_prev) {
  std::vector<double> lp(a_prev.rows(), 0.0);
  for (std::size_t r = 0; r < a_prev.rows(); ++r)
    for (std::size_t i = 0; i < a_prev.cols(); ++i) lp[r] += gaussian_log_density(a_prev(r, i), b.mean(r, i), b.std[r]);
  return lp;
}

/// Per-row log p(a^k | a^{k-1}) under the forward kernel.
inline std::vector<double> forward_log_prob(const NoiseSchedule& s, const Tensor& a_k, const Tensor& a_prev,
                                            std::span<const int> ks) {
  std::vector<double> lp(a_k.rows(), 0.0);
  for (std::size_t r = 0; r < a_k.rows(); ++r) {
    const auto c = step_coefficients(s, ks[r]);
    for (std::size_t i = 0; i < a_k.cols(); ++i)
      lp[r] += gaussian_log_density(a_k(r, i), c.forward_scale * a_prev(r, i), c.std);
  }
  return lp;
}

}  // namespace dmerl
