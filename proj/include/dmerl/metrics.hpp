#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "dmerl/env.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/quadrature.hpp"
#include "dmerl/tensor.hpp"

namespace dmerl {

/// KL(p || q) = sum_j w_j p_j log(p_j / q_j) over quadrature nodes, with
/// 0 log 0 = 0. Both density arrays are renormalized on the grid first.
inline double grid_kl(std::span<const double> weights, std::span<const double> p, std::span<const double> q) {
  if (weights.size() != p.size() || p.size() != q.size()) throw DimensionError("grid_kl: length mismatch");
  double zp = 0.0;
  double zq = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    zp += weights[j] * p[j];
    zq += weights[j] * q[j];
  }
  if (!(zp > 0.0) || !(zq > 0.0)) throw NumericError("grid_kl: density has no mass on the grid");
  double kl = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) {
    const double pj = p[j] / zp;
    if (pj <= 0.0) continue;
    const double qj = std::max(q[j] / zq, std::numeric_limits<double>::min());
    kl += weights[j] * pj * std::log(pj / qj);
  }
  return kl;
}

/// Silverman's rule-of-thumb bandwidth for 1-D data.
inline double silverman_bandwidth(std::vector<double> x) {
  const double n = static_cast<double>(x.size());
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / std::max(n - 1.0, 1.0));
  std::sort(x.begin(), x.end());
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (pos - static_cast<double>(lo)) * (x[hi] - x[lo]);
  };
  const double iqr = quantile(0.75) - quantile(0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(sd, iqr / 1.34);
  return 0.9 * spread * std::pow(n, -0.2);
}

namespace detail {

/// Linear binning of samples onto a uniform grid followed by a truncated
/// Gaussian convolution. Returns density values at the grid nodes.
inline std::vector<double> binned_kde_1d(std::span<const double> xs, std::span<const double> nodes, double h) {
  const std::size_t m = nodes.size();
  const double x0 = nodes.front();
  const double dx = nodes[1] - nodes[0];
  std::vector<double> counts(m, 0.0);
  for (double x : xs) {
    const double pos = (x - x0) / dx;
    if (pos <= 0.0) {
      counts.front() += 1.0;
      continue;
    }
    if (pos >= static_cast<double>(m - 1)) {
      counts.back() += 1.0;
      continue;
    }
    const auto i = static_cast<std::size_t>(pos);
    const double f = pos - static_cast<double>(i);
    counts[i] += 1.0 - f;
    counts[i + 1] += f;
  }
  const auto half = static_cast<std::ptrdiff_t>(std::ceil(5.0 * h / dx));
  std::vector<double> kernel(static_cast<std::size_t>(2 * half + 1));
  for (std::ptrdiff_t o = -half; o <= half; ++o) {
    const double z = static_cast<double>(o) * dx / h;
    kernel[static_cast<std::size_t>(o + half)] = std::exp(-0.5 * z * z) / (h * std::sqrt(2.0 * std::numbers::pi));
  }
  const double n = static_cast<double>(xs.size());
  std::vector<double> dens(m, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    if (counts[i] == 0.0) continue;
    const auto ii = static_cast<std::ptrdiff_t>(i);
    for (std::ptrdiff_t o = -half; o <= half; ++o) {
      const std::ptrdiff_t j = ii + o;
      if (j < 0 || j >= static_cast<std::ptrdiff_t>(m)) continue;
      dens[static_cast<std::size_t>(j)] += counts[i] * kernel[static_cast<std::size_t>(o + half)] / n;
    }
  }
  return dens;
}

}  // namespace detail

inline constexpr std::size_t kMinKlSamples = 1000;

/// KL(kernel-smoothed policy || Boltzmann target) on the target's quadrature
/// grid. `samples` is [n, action_dim] of bounded actions.
inline double target_kl(const Tensor& samples, const BoltzmannTarget& target) {
  const std::size_t n = samples.rows();
  const std::size_t d = samples.cols();
  if (n < kMinKlSamples) throw ContractViolation("target_kl: need at least 1000 policy samples");
  if (d != target.spec().action_dim) throw DimensionError("target_kl: sample dimension mismatch");
  std::vector<double> weights;
  std::vector<double> target_density;
  target.for_each_node([&](std::span<const double> a, double w) {
    weights.push_back(w);
    target_density.push_back(target.density(a));
  });
  auto column = [&](std::size_t j) {
    std::vector<double> c(n);
    for (std::size_t i = 0; i < n; ++i) c[i] = samples(i, j);
    return c;
  };
  auto floor_bandwidth = [](double h, const QuadratureRule& g) {
    return std::max(h, 2.0 * (g.nodes[1] - g.nodes[0]));
  };
  std::vector<double> policy_density;
  if (d == 1) {
    const auto xs = column(0);
    const double h = floor_bandwidth(silverman_bandwidth(xs), target.grid_x());
    policy_density = detail::binned_kde_1d(xs, target.grid_x().nodes, h);
  } else {
    // Product kernel; bandwidths from the bivariate normal-reference rule.
    const auto xs = column(0);
    const auto ys = column(1);
    auto sd = [](const std::vector<double>& v) {
      double m = 0.0;
      for (double x : v) m += x;
      m /= static_cast<double>(v.size());
      double s = 0.0;
      for (double x : v) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(v.size() - 1));
    };
    const double factor = std::pow(static_cast<double>(n), -1.0 / 6.0);
    const double hx = floor_bandwidth(sd(xs) * factor, target.grid_x());
    const double hy = floor_bandwidth(sd(ys) * factor, target.grid_y());
    const auto& gx = target.grid_x();
    const auto& gy = target.grid_y();
    // Bin onto x, then convolve along y for each x bin: separable product kernel.
    const std::size_t mx = gx.size();
    const std::size_t my = gy.size();
    std::vector<std::vector<double>> ys_by_x(mx);
    std::vector<std::vector<double>> wts_by_x(mx);
    const double dx = gx.nodes[1] - gx.nodes[0];
    for (std::size_t i = 0; i < n; ++i) {
      const double pos = std::clamp((xs[i] - gx.nodes.front()) / dx, 0.0, static_cast<double>(mx - 1));
      const auto b = std::min(static_cast<std::size_t>(pos), mx - 2);
      const double f = pos - static_cast<double>(b);
      ys_by_x[b].push_back(ys[i]);
      wts_by_x[b].push_back(1.0 - f);
      ys_by_x[b + 1].push_back(ys[i]);
      wts_by_x[b + 1].push_back(f);
    }
    std::vector<double> row_density(mx * my, 0.0);
    for (std::size_t b = 0; b < mx; ++b) {
      if (ys_by_x[b].empty()) continue;
      // Weighted 1-D KDE along y scaled by bin weight; reuse binning with weights.
      std::vector<double> counts(my, 0.0);
      const double dy = gy.nodes[1] - gy.nodes[0];
      for (std::size_t s = 0; s < ys_by_x[b].size(); ++s) {
        const double pos = std::clamp((ys_by_x[b][s] - gy.nodes.front()) / dy, 0.0, static_cast<double>(my - 1));
        const auto c = std::min(static_cast<std::size_t>(pos), my - 2);
        const double f = pos - static_cast<double>(c);
        counts[c] += wts_by_x[b][s] * (1.0 - f);
        counts[c + 1] += wts_by_x[b][s] * f;
      }
      const auto half = static_cast<std::ptrdiff_t>(std::ceil(5.0 * hy / dy));
      for (std::size_t c = 0; c < my; ++c) {
        if (counts[c] == 0.0) continue;
        for (std::ptrdiff_t o = -half; o <= half; ++o) {
          const std::ptrdiff_t j = static_cast<std::ptrdiff_t>(c) + o;
          if (j < 0 || j >= static_cast<std::ptrdiff_t>(my)) continue;
          const double z = static_cast<double>(o) * dy / hy;
          row_density[b * my + static_cast<std::size_t>(j)] += counts[c] * std::exp(-0.5 * z * z);
        }
      }
    }
    policy_density.assign(mx * my, 0.0);
    const auto half = static_cast<std::ptrdiff_t>(std::ceil(5.0 * hx / dx));
    for (std::size_t b = 0; b < mx; ++b)
      for (std::ptrdiff_t o = -half; o <= half; ++o) {
        const std::ptrdiff_t i = static_cast<std::ptrdiff_t>(b) + o;
        if (i < 0 || i >= static_cast<std::ptrdiff_t>(mx)) continue;
        const double z = static_cast<double>(o) * dx / hx;
        const double k = std::exp(-0.5 * z * z);
        for (std::size_t c = 0; c < my; ++c)
          policy_density[static_cast<std::size_t>(i) * my + c] += k * row_density[b * my + c];
      }
  }
  return grid_kl(weights, policy_density, target_density);
}

/// Fraction of 1-D samples nearest to each mode center. Centers are taken in
/// the given order; an exact tie goes to the more negative center.
inline std::vector<double> mode_mass(std::span<const double> samples, std::span<const double> centers) {
  if (centers.empty()) throw ContractViolation("mode_mass: need at least one mode");
  std::vector<double> counts(centers.size(), 0.0);
  for (double x : samples) {
    std::size_t best = 0;
    double best_d = std::abs(x - centers[0]);
    for (std::size_t j = 1; j < centers.size(); ++j) {
      const double dj = std::abs(x - centers[j]);
      if (dj < best_d || (dj == best_d && centers[j] < centers[best])) {
        best = j;
        best_d = dj;
      }
    }
    counts[best] += 1.0;
  }
  const double n = static_cast<double>(samples.size());
  for (double& c : counts) c /= n;
  return counts;
}

}  // namespace dmerl
