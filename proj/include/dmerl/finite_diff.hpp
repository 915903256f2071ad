#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dmerl/errors.hpp"
#include "dmerl/mlp.hpp"

namespace dmerl {

/// Central-difference gradient of a scalar loss over every network parameter.
/// Throws NumericError naming the coordinate if any evaluation is non-finite.
template <typename LossFn>
MlpParams finite_diff_grad(LossFn&& loss_fn, const MlpParams& params, double h) {
  if (!(h > 0.0)) throw ContractViolation("finite_diff_grad: step size must be positive");
  std::vector<double> theta = flatten(params);
  std::vector<double> grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double up = loss_fn(unflatten(theta, params));
    theta[i] = saved - h;
    const double down = loss_fn(unflatten(theta, params));
    theta[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite loss at coordinate " + std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return unflatten(grad, params);
}

/// Central difference over a plain vector of scalars.
template <typename LossFn>
std::vector<double> finite_diff_grad(LossFn&& loss_fn, std::vector<double> x, double h) {
  if (!(h > 0.0)) throw ContractViolation("finite_diff_grad: step size must be positive");
  std::vector<double> grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = loss_fn(x);
    x[i] = saved - h;
    const double down = loss_fn(x);
    x[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("finite_diff_grad: non-finite loss at coordinate " + std::to_string(i));
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

struct GradientComparison {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t count = 0;
};

/// max_i |a_i - f_i| / max(|f_i|, floor).
inline GradientComparison compare_gradients(std::span<const double> analytic, std::span<const double> numeric,
                                            double floor = 1e-8) {
  if (analytic.size() != numeric.size()) throw DimensionError("compare_gradients: length mismatch");
  GradientComparison c;
  c.count = analytic.size();
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double abs_err = std::abs(analytic[i] - numeric[i]);
    const double rel = abs_err / std::max(std::abs(numeric[i]), floor);
    c.max_abs_error = std::max(c.max_abs_error, abs_err);
    if (rel > c.max_rel_error) {
      c.max_rel_error = rel;
      c.worst_index = i;
    }
  }
  return c;
}

inline GradientComparison compare_gradients(const MlpParams& analytic, const MlpParams& numeric,
                                            double floor = 1e-8) {
  const auto a = flatten(analytic);
  const auto f = flatten(numeric);
  return compare_gradients(a, f, floor);
}

}  // namespace dmerl
