#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dmerl/diffusion.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/quadrature.hpp"
#include "dmerl/rng.hpp"

namespace dmerl {

enum class EnvKind { bimodal_bandit, point_mass, pendulum };

inline std::string_view to_string(EnvKind k) {
  switch (k) {
    case EnvKind::bimodal_bandit: return "bimodal_bandit";
    case EnvKind::point_mass: return "point_mass";
    case EnvKind::pendulum: return "pendulum";
  }
  return "point_mass";
}

inline EnvKind env_kind_from_string(std::string_view s) {
  if (s == "bimodal_bandit") return EnvKind::bimodal_bandit;
  if (s == "point_mass") return EnvKind::point_mass;
  if (s == "pendulum") return EnvKind::pendulum;
  throw ConfigError("unknown env kind '" + std::string(s) + "'");
}

/// Static description of an environment. Episodes run t = 0..horizon, so a
/// horizon-T episode takes T + 1 decisions; the bandit is a single decision.
struct EnvSpec {
  EnvKind kind = EnvKind::point_mass;
  std::size_t obs_dim = 2;
  std::size_t action_dim = 2;
  ActionBox bounds = ActionBox::uniform(2, -1.0, 1.0);
  int horizon = 19;
  double dynamics_noise = 0.0;
  double mode_center = 1.0;  // bandit modes at +-mode_center
  double mode_std = 0.3;

  static EnvSpec bimodal_bandit(double mode_center = 1.0, double mode_std = 0.3, double lo = -1.5, double hi = 1.5) {
    EnvSpec s;
    s.kind = EnvKind::bimodal_bandit;
    s.obs_dim = 1;
    s.action_dim = 1;
    s.bounds = ActionBox::uniform(1, lo, hi);
    s.horizon = 0;
    s.mode_center = mode_center;
    s.mode_std = mode_std;
    return s;
  }

  static EnvSpec point_mass(std::size_t dim = 2, int horizon = 19, double noise = 0.0) {
    EnvSpec s;
    s.kind = EnvKind::point_mass;
    s.obs_dim = dim;
    s.action_dim = dim;
    s.bounds = ActionBox::uniform(dim, -1.0, 1.0);
    s.horizon = horizon;
    s.dynamics_noise = noise;
    return s;
  }

  static EnvSpec pendulum(int horizon = 199, double noise = 0.0) {
    EnvSpec s;
    s.kind = EnvKind::pendulum;
    s.obs_dim = 3;
    s.action_dim = 1;
    s.bounds = ActionBox::uniform(1, -2.0, 2.0);
    s.horizon = horizon;
    s.dynamics_noise = noise;
    return s;
  }

  void validate() const {
    bounds.validate();
    if (bounds.dim() != action_dim) throw ConfigError("env.bounds dimension does not match action dimension");
    if (kind == EnvKind::bimodal_bandit && horizon != 0) throw ConfigError("env.horizon must be 0 for bimodal_bandit");
    if (kind != EnvKind::bimodal_bandit && horizon < 1) throw ConfigError("env.horizon must be >= 1");
    if (dynamics_noise < 0.0) throw ConfigError("env.dynamics_noise must be >= 0");
    if (kind == EnvKind::bimodal_bandit && !(mode_std > 0.0)) throw ConfigError("env.mode_std must be > 0");
  }
};

struct EnvState {
  std::vector<double> observation;
  std::vector<double> internal;  // physical state; equals the observation except for the pendulum
  int t = 0;
  bool terminal = false;

  friend bool operator==(const EnvState&, const EnvState&) = default;
};

namespace detail {

inline double log_normal_pdf(double x, double m, double s) { return gaussian_log_density(x, m, s); }

inline double angle_normalize(double x) {
  return std::fmod(std::fmod(x + std::numbers::pi, 2 * std::numbers::pi) + 2 * std::numbers::pi,
                   2 * std::numbers::pi) -
         std::numbers::pi;
}

inline std::vector<double> pendulum_observation(std::span<const double> internal) {
  return {std::cos(internal[0]), std::sin(internal[0]), internal[1]};
}

}  // namespace detail

/// log(0.5 N(a; -m, s^2) + 0.5 N(a; m, s^2)).
inline double bandit_reward(const EnvSpec& spec, double a) {
  const double l1 = detail::log_normal_pdf(a, -spec.mode_center, spec.mode_std);
  const double l2 = detail::log_normal_pdf(a, spec.mode_center, spec.mode_std);
  const double hi = std::max(l1, l2);
  return std::log(0.5) + hi + std::log(std::exp(l1 - hi) + std::exp(l2 - hi));
}

inline EnvState env_reset(const EnvSpec& spec, Rng& rng) {
  EnvState s;
  switch (spec.kind) {
    case EnvKind::bimodal_bandit: s.internal = {0.0}; break;
    case EnvKind::point_mass:
      s.internal.resize(spec.obs_dim);
      for (double& x : s.internal) x = rng.uniform(-1.0, 1.0);
      break;
    case EnvKind::pendulum: s.internal = {rng.uniform(-std::numbers::pi, std::numbers::pi), rng.uniform(-1.0, 1.0)}; break;
  }
  s.observation = spec.kind == EnvKind::pendulum ? detail::pendulum_observation(s.internal) : s.internal;
  return s;
}

struct EnvStepResult {
  EnvState state;
  double reward = 0.0;
};

/// Advances one environment step with an action inside the bounds.
inline EnvStepResult env_step(const EnvSpec& spec, const EnvState& state, std::span<const double> action, Rng& rng) {
  if (state.terminal) throw ContractViolation("env_step: state is terminal");
  if (action.size() != spec.action_dim) throw DimensionError("env_step: action dimension mismatch");
  if (!spec.bounds.contains(action)) throw ContractViolation("env_step: action outside bounds");
  EnvStepResult r;
  r.state = state;
  auto& next = r.state;
  switch (spec.kind) {
    case EnvKind::bimodal_bandit: r.reward = bandit_reward(spec, action[0]); break;
    case EnvKind::point_mass: {
      double pos2 = 0.0;
      double act2 = 0.0;
      for (std::size_t i = 0; i < spec.obs_dim; ++i) {
        double x = state.internal[i] + 0.1 * action[i];
        if (spec.dynamics_noise > 0.0) x += spec.dynamics_noise * rng.normal();
        next.internal[i] = x;
        pos2 += x * x;
        act2 += action[i] * action[i];
      }
      r.reward = -pos2 - 0.01 * act2;
      break;
    }
    case EnvKind::pendulum: {
      constexpr double g = 10.0, m = 1.0, l = 1.0, dt = 0.05, max_speed = 8.0;
      const double th = state.internal[0];
      const double thdot = state.internal[1];
      const double u = action[0];
      const double ang = detail::angle_normalize(th);
      r.reward = -(ang * ang + 0.1 * thdot * thdot + 0.001 * u * u);
      double new_thdot = thdot + (3.0 * g / (2.0 * l) * std::sin(th) + 3.0 / (m * l * l) * u) * dt;
      if (spec.dynamics_noise > 0.0) new_thdot += spec.dynamics_noise * rng.normal();
      new_thdot = std::clamp(new_thdot, -max_speed, max_speed);
      next.internal = {th + new_thdot * dt, new_thdot};
      break;
    }
  }
  next.observation = spec.kind == EnvKind::pendulum ? detail::pendulum_observation(next.internal) : next.internal;
  next.t = state.t + 1;
  next.terminal = next.t > spec.horizon;
  return r;
}

/// Noise-free immediate reward of taking `action` in `state`.
inline double immediate_reward(const EnvSpec& spec, const EnvState& state, std::span<const double> action) {
  EnvSpec quiet = spec;
  quiet.dynamics_noise = 0.0;
  EnvState s = state;
  s.terminal = false;
  Rng unused(0);
  return env_step(quiet, s, action, unused).reward;
}

// ---------------------------------------------------------------------------
// Boltzmann target
// ---------------------------------------------------------------------------

/// pi(a | s) proportional to exp(alpha R(s, a)) on the action box, normalized by
/// composite Simpson quadrature (2048 intervals in 1-D, 256 x 256 in 2-D).
class BoltzmannTarget {
 public:
  BoltzmannTarget(EnvSpec spec, EnvState state, double alpha) : spec_(std::move(spec)), state_(std::move(state)), alpha_(alpha) {
    if (!(alpha_ > 0.0)) throw ContractViolation("BoltzmannTarget: alpha must be positive");
    if (spec_.action_dim == 1) {
      grid_x_ = simpson(spec_.bounds.lo[0], spec_.bounds.hi[0], 2048);
    } else if (spec_.action_dim == 2) {
      grid_x_ = simpson(spec_.bounds.lo[0], spec_.bounds.hi[0], 256);
      grid_y_ = simpson(spec_.bounds.lo[1], spec_.bounds.hi[1], 256);
    } else {
      throw ContractViolation("BoltzmannTarget: quadrature supports 1- or 2-dimensional actions");
    }
    // Normalize in log space relative to the grid maximum.
    double max_log = -std::numeric_limits<double>::infinity();
    for_each_node([&](std::span<const double> a, double) { max_log = std::max(max_log, unnormalized_log_density(a)); });
    double z = 0.0;
    for_each_node([&](std::span<const double> a, double w) { z += w * std::exp(unnormalized_log_density(a) - max_log); });
    if (!(z > 0.0) || !std::isfinite(z)) throw NumericError("BoltzmannTarget: normalizer is not positive and finite");
    log_z_ = max_log + std::log(z);
  }

  [[nodiscard]] double alpha() const { return alpha_; }
  [[nodiscard]] double log_normalizer() const { return log_z_; }
  [[nodiscard]] const EnvSpec& spec() const { return spec_; }

  [[nodiscard]] double unnormalized_log_density(std::span<const double> a) const {
    return alpha_ * immediate_reward(spec_, state_, a);
  }

  [[nodiscard]] double density(std::span<const double> a) const {
    if (!spec_.bounds.contains(a)) return 0.0;
    return std::exp(unnormalized_log_density(a) - log_z_);
  }

  /// Calls f(point, weight) for every quadrature node.
  template <typename F>
  void for_each_node(F&& f) const {
    if (spec_.action_dim == 1) {
      for (std::size_t i = 0; i < grid_x_.size(); ++i) {
        const double a[1] = {grid_x_.nodes[i]};
        f(std::span<const double>(a, 1), grid_x_.weights[i]);
      }
    } else {
      for (std::size_t i = 0; i < grid_x_.size(); ++i)
        for (std::size_t j = 0; j < grid_y_.size(); ++j) {
          const double a[2] = {grid_x_.nodes[i], grid_y_.nodes[j]};
          f(std::span<const double>(a, 2), grid_x_.weights[i] * grid_y_.weights[j]);
        }
    }
  }

  [[nodiscard]] const QuadratureRule& grid_x() const { return grid_x_; }
  [[nodiscard]] const QuadratureRule& grid_y() const { return grid_y_; }

 private:
  EnvSpec spec_;
  EnvState state_;
  double alpha_;
  double log_z_ = 0.0;
  QuadratureRule grid_x_;
  QuadratureRule grid_y_;
};

// ---------------------------------------------------------------------------
// Augmented diffusion MDP
// ---------------------------------------------------------------------------

/// Position of (environment step t, diffusion index k) in the flattened process.
inline long long flatten_index(long long t, int k, int K) {
  if (t < 0 || k < 0 || k > K)
    throw IndexError("flatten_index: need t >= 0 and 0 <= k <= K (t=" + std::to_string(t) +
                     ", k=" + std::to_string(k) + ", K=" + std::to_string(K) + ")");
  return t * (K + 1) + (K - k);
}

/// (s_t, a_t^k, k) plus the flattened index.
struct AugmentedState {
  EnvState env;
  std::vector<double> a_k;
  int k = 0;
  long long flat_index = 0;
};

/// One descent step a^k -> a^{k-1}. The environment reward is nonzero only on
/// landing transitions (k - 1 == 0), which also advance the environment.
struct AugmentedTransition {
  AugmentedState from;
  std::vector<double> action;  // a^{k-1}
  AugmentedState to;
  double env_reward = 0.0;
  double reverse_log_density = 0.0;  // log q(a^{k-1} | a^k, s)
  double forward_log_density = 0.0;  // log p(a^k | a^{k-1})
  double squash_log_det = 0.0;       // log |d squash / d a^0|, landing steps only
  bool landing = false;
  bool done = false;
};

inline std::vector<double> sample_prior(const NoiseSchedule& sched, std::size_t dim, Rng& rng) {
  std::vector<double> a(dim);
  for (double& x : a) x = sched.nu * rng.normal();
  return a;
}

inline AugmentedState augmented_reset(const EnvSpec& spec, const NoiseSchedule& sched, Rng& rng) {
  AugmentedState s;
  s.env = env_reset(spec, rng);
  s.a_k = sample_prior(sched, spec.action_dim, rng);
  s.k = sched.K;
  s.flat_index = flatten_index(0, sched.K, sched.K);
  return s;
}

inline AugmentedTransition augmented_step(const EnvSpec& spec, const NoiseSchedule& sched, const AugmentedState& aug,
                                          std::span<const double> action, double reverse_log_density, Rng& rng) {
  if (aug.env.terminal) throw ContractViolation("augmented_step: state is terminal");
  if (aug.k < 1) throw ContractViolation("augmented_step: diffusion index must be >= 1");
  if (action.size() != spec.action_dim) throw DimensionError("augmented_step: action dimension mismatch");
  AugmentedTransition tr;
  tr.from = aug;
  tr.action.assign(action.begin(), action.end());
  tr.reverse_log_density = reverse_log_density;
  tr.forward_log_density = forward_step_density(sched, aug.k, action).log_density(aug.a_k);
  const int K = sched.K;
  if (aug.k - 1 > 0) {
    tr.to.env = aug.env;
    tr.to.a_k = tr.action;
    tr.to.k = aug.k - 1;
    tr.to.flat_index = flatten_index(aug.env.t, tr.to.k, K);
    return tr;
  }
  tr.landing = true;
  tr.squash_log_det = squash_log_det(action, spec.bounds);
  const auto bounded = squash_action(action, spec.bounds);
  auto step = env_step(spec, aug.env, bounded, rng);
  tr.env_reward = step.reward;
  tr.to.env = std::move(step.state);
  tr.done = tr.to.env.terminal;
  tr.to.k = K;
  if (!tr.done) tr.to.a_k = sample_prior(sched, spec.action_dim, rng);
  else tr.to.a_k.assign(spec.action_dim, 0.0);
  tr.to.flat_index = flatten_index(tr.to.env.t, K, K);
  return tr;
}

}  // namespace dmerl
