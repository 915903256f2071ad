#pragma once

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "dmerl/errors.hpp"

namespace dmerl {

/// Nodes and weights of a 1-D quadrature rule.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  [[nodiscard]] std::size_t size() const { return nodes.size(); }

  template <typename F>
  [[nodiscard]] double integrate(F&& f) const {
    double s = 0.0;
    for (std::size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

/// Gauss-Hermite rule for expectations under N(0, 1) (probabilists' weight),
/// via Golub-Welsch. Weights sum to one; exact for polynomials of degree < 2n.
inline QuadratureRule gauss_hermite(std::size_t n) {
  if (n == 0) throw ContractViolation("gauss_hermite: need at least one node");
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (std::size_t i = 1; i < n; ++i) {
    const double off = std::sqrt(static_cast<double>(i));
    J(static_cast<Eigen::Index>(i - 1), static_cast<Eigen::Index>(i)) = off;
    J(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i - 1)) = off;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(J);
  QuadratureRule rule;
  rule.nodes.resize(n);
  rule.weights.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    rule.nodes[i] = eig.eigenvalues()(static_cast<Eigen::Index>(i));
    const double v = eig.eigenvectors()(0, static_cast<Eigen::Index>(i));
    rule.weights[i] = v * v;
  }
  // Symmetrize to remove eigen-solver round-off.
  for (std::size_t i = 0; i < n / 2; ++i) {
    const std::size_t j = n - 1 - i;
    const double x = 0.5 * (rule.nodes[j] - rule.nodes[i]);
    const double w = 0.5 * (rule.weights[i] + rule.weights[j]);
    rule.nodes[i] = -x;
    rule.nodes[j] = x;
    rule.weights[i] = rule.weights[j] = w;
  }
  if (n % 2 == 1) rule.nodes[n / 2] = 0.0;
  double total = 0.0;
  for (double w : rule.weights) total += w;
  for (double& w : rule.weights) w /= total;
  return rule;
}

/// Composite Simpson rule on [a, b] with `intervals` (even) sub-intervals.
inline QuadratureRule simpson(double a, double b, std::size_t intervals) {
  if (intervals < 2 || intervals % 2 != 0) throw ContractViolation("simpson: interval count must be even and >= 2");
  if (!(b > a)) throw ContractViolation("simpson: need a < b");
  QuadratureRule rule;
  rule.nodes.resize(intervals + 1);
  rule.weights.resize(intervals + 1);
  const double h = (b - a) / static_cast<double>(intervals);
  for (std::size_t i = 0; i <= intervals; ++i) {
    rule.nodes[i] = a + h * static_cast<double>(i);
    const double c = (i == 0 || i == intervals) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
    rule.weights[i] = c * h / 3.0;
  }
  return rule;
}

/// Tensor-product grid of two 1-D rules, flattened row-major (x outer, y inner).
struct Grid2D {
  QuadratureRule x;
  QuadratureRule y;

  [[nodiscard]] std::size_t size() const { return x.size() * y.size(); }
  [[nodiscard]] double weight(std::size_t flat) const { return x.weights[flat / y.size()] * y.weights[flat % y.size()]; }
};

}  // namespace dmerl
