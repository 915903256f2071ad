#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

#include "dmerl/errors.hpp"
#include "dmerl/mlp.hpp"

namespace dmerl {

struct AdamConfig {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  MlpParams first_moment;
  MlpParams second_moment;
  std::uint64_t step = 0;
  AdamConfig config;

  static AdamState for_params(const MlpParams& p, AdamConfig cfg = {}) {
    return AdamState{zeros_like(p), zeros_like(p), 0, cfg};
  }
};

/// In-place bias-corrected Adam update. Rejects non-finite gradients before
/// touching either the state or the parameters.
inline void adam_update(AdamState& state, MlpParams& params, const MlpParams& grads) {
  if (!all_finite(grads)) throw NumericError("adam: non-finite gradient, update rejected");
  const auto& c = state.config;
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const double step_size = c.learning_rate / bc1;
  const double inv_sqrt_bc2 = 1.0 / std::sqrt(bc2);
  auto update = [&](Tensor& p, const Tensor& g, Tensor& m, Tensor& v) {
    auto pa = p.mat().array();
    auto ga = g.mat().array();
    auto ma = m.mat().array();
    auto va = v.mat().array();
    ma = c.beta1 * ma + (1.0 - c.beta1) * ga;
    va = c.beta2 * va + (1.0 - c.beta2) * ga.square();
    pa -= step_size * ma / (va.sqrt() * inv_sqrt_bc2 + c.epsilon);
  };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    update(params.layers[i].weight, grads.layers[i].weight, state.first_moment.layers[i].weight,
           state.second_moment.layers[i].weight);
    update(params.layers[i].bias, grads.layers[i].bias, state.first_moment.layers[i].bias,
           state.second_moment.layers[i].bias);
  }
}

/// Value-returning form of adam_update.
inline std::pair<AdamState, MlpParams> adam_step(AdamState state, MlpParams params, const MlpParams& grads) {
  adam_update(state, params, grads);
  return {std::move(state), std::move(params)};
}

/// Scalar Adam used for single learned quantities (temperature dual, log-std vectors).
struct ScalarAdam {
  AdamConfig config;
  double m = 0.0;
  double v = 0.0;
  std::uint64_t step = 0;

  double update(double value, double grad) {
    if (!std::isfinite(grad)) throw NumericError("adam: non-finite scalar gradient, update rejected");
    step += 1;
    const double t = static_cast<double>(step);
    m = config.beta1 * m + (1 - config.beta1) * grad;
    v = config.beta2 * v + (1 - config.beta2) * grad * grad;
    const double mh = m / (1 - std::pow(config.beta1, t));
    const double vh = v / (1 - std::pow(config.beta2, t));
    return value - config.learning_rate * mh / (std::sqrt(vh) + config.epsilon);
  }
};

}  // namespace dmerl
