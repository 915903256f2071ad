#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "dmerl/diffusion.hpp"
#include "dmerl/errors.hpp"
#include "dmerl/finite_diff.hpp"
#include "dmerl/objectives.hpp"
#include "dmerl/quadrature.hpp"
#include "dmerl/rng.hpp"

namespace dmerl {

// Oracles recompute every quantity with their own arithmetic; library losses
// appear only on the other side of a comparison.

/// One measured quantity against its tolerance.
struct OracleCheck {
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct SuiteReport {
  std::string suite;
  std::vector<OracleCheck> checks;
  double seconds = 0.0;

  [[nodiscard]] bool passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const OracleCheck& c) { return c.passed; });
  }

  /// Records `measured <= tolerance`.
  void at_most(std::string name, double measured, double tolerance) {
    checks.push_back({std::move(name), measured, tolerance, measured <= tolerance});
  }
};

// ---------------------------------------------------------------------------
// Shared pieces
// ---------------------------------------------------------------------------

/// R(a) = c2 a^2 + c1 a + c0.
struct QuadraticReward {
  double c2 = -0.5;
  double c1 = 0.0;
  double c0 = 0.0;

  [[nodiscard]] double operator()(double a) const { return (c2 * a + c1) * a + c0; }
  [[nodiscard]] double derivative(double a) const { return 2.0 * c2 * a + c1; }
};

namespace oracle_detail {

inline double log_normal(double x, double m, double s) {
  const double z = (x - m) / s;
  return -0.5 * z * z - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double beta_delta(const NoiseSchedule& s, int k) {
  const double K = static_cast<double>(s.K);
  return (s.beta_min + (s.beta_max - s.beta_min) * static_cast<double>(k) / K) / K;
}

inline void randomize(MlpParams& p, Rng& rng, double scale) {
  for (auto& l : p.layers) {
    for (double& w : l.weight.data()) w = scale * rng.normal();
    for (double& b : l.bias.data()) b = 0.1 * rng.normal();
  }
}

inline Tensor random_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor t = Tensor::matrix(rows, cols);
  for (double& x : t.data()) x = rng.normal();
  return t;
}

inline ActionValueFn reward_as_q(const QuadraticReward& R) {
  return [R](const Tensor&, const Tensor& a, bool want_grad) {
    QEval e;
    e.value.resize(a.rows());
    if (want_grad) e.grad_action = Tensor::matrix(a.rows(), a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
      e.value[r] = R(a(r, 0));
      if (want_grad) e.grad_action(r, 0) = R.derivative(a(r, 0));
    }
    return e;
  };
}

}  // namespace oracle_detail

// ---------------------------------------------------------------------------
// Reverse-KL gradient
// ---------------------------------------------------------------------------

/// d/dtheta E_{a ~ N(theta, sigma^2)}[T log q(a) - R(a)], differentiating under
/// the Gauss-Hermite integral with a = theta + sigma z. log q(theta + sigma z)
/// does not depend on theta, so only -R'(a) survives.
inline double oracle_rkl_gradient(double theta, double sigma, const QuadraticReward& R, double temperature,
                                  std::size_t nodes = 32) {
  (void)temperature;
  const auto gh = gauss_hermite(nodes);
  double g = 0.0;
  for (std::size_t i = 0; i < gh.size(); ++i) g -= gh.weights[i] * R.derivative(theta + sigma * gh.nodes[i]);
  return g;
}

/// The library's reparameterized actor gradient for the same problem, taken
/// at the head with quadrature nodes as the noise.
inline double library_rkl_gradient(double theta, double sigma, const QuadraticReward& R, double temperature,
                                   std::size_t nodes = 32) {
  const auto gh = gauss_hermite(nodes);
  const std::size_t n = gh.size();
  const Tensor obs = Tensor::matrix(n, 1);
  const Tensor mean = Tensor::matrix(n, 1, std::vector<double>(n, theta));
  const Tensor std = Tensor::matrix(n, 1, std::vector<double>(n, sigma));
  const Tensor noise = Tensor::matrix(n, 1, gh.nodes);
  const auto h = maxent_actor_head(obs, mean, std, noise, oracle_detail::reward_as_q(R), temperature, nullptr,
                                   gh.weights);
  double g = 0.0;
  for (std::size_t r = 0; r < n; ++r) g += h.d_mean(r, 0);
  return g;
}

// ---------------------------------------------------------------------------
// Log-variance / reverse-KL equivalence
// ---------------------------------------------------------------------------

/// Log-variance loss under test: (log-ratios, weights) -> loss and dL/dl.
using LvLossFn = std::function<LvResult(std::span<const double> ell, std::span<const double> weights)>;

inline LvLossFn library_lv_loss() {
  return [](std::span<const double> ell, std::span<const double> w) { return lv_loss(ell, w, LvVariance::population); };
}

struct GradientPair {
  double lv = 0.0;
  double rkl = 0.0;
  [[nodiscard]] double gap() const { return std::abs(lv - rkl); }
};

/// Linear-Gaussian bandit: states s_j with fixed weights rho_j (on-policy when
/// there is a single state), q(a|s) = N(theta s, sigma^2), target
/// log pi(a|s) = R_j(a) / T up to a state-dependent constant. The LV gradient
/// is sum_i dL/dl_i grad_theta l_i with samples frozen; the rKL gradient is the
/// reparameterized surrogate gradient sum_j rho_j E[-R_j'(a) s_j] / T.
inline GradientPair oracle_lv_equivalence(double theta, double sigma, std::span<const double> states,
                                          std::span<const double> state_weights,
                                          std::span<const QuadraticReward> rewards, double temperature,
                                          const LvLossFn& lv, std::size_t nodes = 32) {
  if (!(temperature > 0.0)) throw ContractViolation("oracle_lv_equivalence: temperature must be positive");
  const auto gh = gauss_hermite(nodes);
  std::vector<double> ell, w, dtheta;
  GradientPair out;
  for (std::size_t j = 0; j < states.size(); ++j) {
    const double mu = theta * states[j];
    for (std::size_t i = 0; i < gh.size(); ++i) {
      const double a = mu + sigma * gh.nodes[i];
      ell.push_back(oracle_detail::log_normal(a, mu, sigma) - rewards[j](a) / temperature);
      w.push_back(state_weights[j] * gh.weights[i]);
      dtheta.push_back((a - mu) / (sigma * sigma) * states[j]);
      out.rkl -= state_weights[j] * gh.weights[i] * rewards[j].derivative(a) / temperature * states[j];
    }
  }
  const auto res = lv(ell, w);
  for (std::size_t i = 0; i < ell.size(); ++i) out.lv += res.d_ell[i] * dtheta[i];
  return out;
}

// ---------------------------------------------------------------------------
// Data processing inequality
// ---------------------------------------------------------------------------

struct KlPair {
  double marginal = 0.0;
  double joint = 0.0;
  [[nodiscard]] double gap() const { return joint - marginal; }
};

/// Exact KL by enumeration with 0 log(0/0) = 0 and q > 0 = p giving +inf.
inline double enumerated_kl(std::span<const double> q, std::span<const double> p) {
  double kl = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    if (q[i] <= 0.0) continue;
    if (p[i] <= 0.0) return std::numeric_limits<double>::infinity();
    kl += q[i] * std::log(q[i] / p[i]);
  }
  return kl;
}

/// Joint tables over (x0, x1, ..., xK), flattened with x0 slowest. Returns the
/// KL of the x0 marginals and the KL of the joints.
inline KlPair oracle_dpi(std::span<const double> q_joint, std::span<const double> p_joint, std::size_t n0) {
  if (q_joint.size() != p_joint.size() || n0 == 0 || q_joint.size() % n0 != 0)
    throw DimensionError("oracle_dpi: table shapes do not match");
  const std::size_t rest = q_joint.size() / n0;
  std::vector<double> qm(n0, 0.0), pm(n0, 0.0);
  for (std::size_t x0 = 0; x0 < n0; ++x0)
    for (std::size_t r = 0; r < rest; ++r) {
      qm[x0] += q_joint[x0 * rest + r];
      pm[x0] += p_joint[x0 * rest + r];
    }
  return {enumerated_kl(qm, pm), enumerated_kl(q_joint, p_joint)};
}

namespace oracle_detail {

inline std::vector<double> random_simplex(std::size_t n, Rng& rng, double zero_prob) {
  std::vector<double> v(n);
  double s = 0.0;
  for (double& x : v) {
    x = rng.uniform() < zero_prob ? 0.0 : -std::log(1.0 - rng.uniform());
    s += x;
  }
  if (s == 0.0) {
    v[rng.below(n)] = 1.0;
    return v;
  }
  for (double& x : v) x /= s;
  return v;
}

}  // namespace oracle_detail

/// Random K = 2 chain pair on an n-point grid: q runs x2 -> x1 -> x0 (reverse
/// sampler, zeros allowed), p runs x0 -> x1 -> x2 (forward noising from a
/// strictly positive target). Tables are indexed (x0, x1, x2).
inline std::pair<std::vector<double>, std::vector<double>> random_chain_tables(std::size_t n, Rng& rng) {
  using oracle_detail::random_simplex;
  std::vector<double> q(n * n * n), p(n * n * n);
  const auto q2 = random_simplex(n, rng, 0.2);
  std::vector<std::vector<double>> q1(n), q0(n), p1(n), p2(n);
  for (std::size_t i = 0; i < n; ++i) {
    q1[i] = random_simplex(n, rng, 0.2);
    q0[i] = random_simplex(n, rng, 0.2);
    p1[i] = random_simplex(n, rng, 0.0);
    p2[i] = random_simplex(n, rng, 0.0);
  }
  const auto p0 = random_simplex(n, rng, 0.0);
  for (std::size_t x0 = 0; x0 < n; ++x0)
    for (std::size_t x1 = 0; x1 < n; ++x1)
      for (std::size_t x2 = 0; x2 < n; ++x2) {
        const std::size_t idx = (x0 * n + x1) * n + x2;
        q[idx] = q2[x2] * q1[x2][x1] * q0[x1][x0];
        p[idx] = p0[x0] * p1[x0][x1] * p2[x1][x2];
      }
  return {q, p};
}

// ---------------------------------------------------------------------------
// WPO closed form
// ---------------------------------------------------------------------------

/// Gradient of the WPO surrogate w.r.t. (mu, sigma) before preconditioning.
struct WpoGradient {
  double mu = 0.0;
  double sigma = 0.0;
};

/// Closed form for q = N(mu, sigma^2) and Q(a) = -c/2 (a - a*)^2:
/// field g = -T (a - mu) / sigma^2 + c (a - a*), d/dmu = E[g] / sigma^2 and
/// d/dsigma = E[2 g (a - mu)] / sigma^3.
inline WpoGradient oracle_wpo(double mu, double sigma, double c, double a_star, double temperature) {
  if (c < 0.0) throw ContractViolation("oracle_wpo: curvature c must be >= 0");
  if (!(sigma > 0.0)) throw ContractViolation("oracle_wpo: sigma must be positive");
  return {c * (mu - a_star) / (sigma * sigma), 2.0 * c / sigma - 2.0 * temperature / (sigma * sigma * sigma)};
}

/// The same expectation by Gauss-Hermite quadrature.
inline WpoGradient oracle_wpo_quadrature(double mu, double sigma, double c, double a_star, double temperature,
                                         std::size_t nodes = 32) {
  const auto gh = gauss_hermite(nodes);
  WpoGradient g;
  for (std::size_t i = 0; i < gh.size(); ++i) {
    const double a = mu + sigma * gh.nodes[i];
    const double field = -temperature * (a - mu) / (sigma * sigma) + c * (a - a_star);
    g.mu += gh.weights[i] * field / (sigma * sigma);
    g.sigma += gh.weights[i] * field * 2.0 * (a - mu) / (sigma * sigma * sigma);
  }
  return g;
}

/// Library head gradients mapped to (mu, sigma), with and without GradScale.
struct LibraryWpo {
  WpoGradient raw;
  double scaled_mu = 0.0;
  bool per_sample_exact = true;  // every scaled mean gradient equals sigma^2 times its raw value bitwise
};

inline LibraryWpo library_wpo(double mu, double sigma, double c, double a_star, double temperature,
                              std::size_t nodes = 32) {
  const auto gh = gauss_hermite(nodes);
  const std::size_t n = gh.size();
  const Tensor obs = Tensor::matrix(n, 1);
  const Tensor mean = Tensor::matrix(n, 1, std::vector<double>(n, mu));
  const Tensor std = Tensor::matrix(n, 1, std::vector<double>(n, sigma));
  Tensor u = Tensor::matrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) u(i, 0) = mu + sigma * gh.nodes[i];
  const QuadraticReward q{-0.5 * c, c * a_star, -0.5 * c * a_star * a_star};
  auto h = wpo_head(obs, mean, std, u, oracle_detail::reward_as_q(q), temperature, nullptr, gh.weights);
  LibraryWpo out;
  const HeadGrads raw = h;
  for (std::size_t i = 0; i < n; ++i) {
    out.raw.mu += h.d_mean(i, 0);
    out.raw.sigma += h.d_log_std(i, 0) / sigma;
  }
  GradScale::apply(h, std);
  for (std::size_t i = 0; i < n; ++i) {
    out.scaled_mu += h.d_mean(i, 0);
    if (h.d_mean(i, 0) != sigma * sigma * raw.d_mean(i, 0)) out.per_sample_exact = false;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Diffusion fixed point
// ---------------------------------------------------------------------------

struct MomentErrors {
  double mean_error = 0.0;  // |mean - m| / nu
  double var_error = 0.0;   // |var / nu^2 - 1|
};

/// Samples n reverse chains of the discretized VP process driven by the exact
/// score of N(m, nu^2). The chains run in the frame centered at m (score
/// -a / nu^2) and are shifted back at the end.
inline MomentErrors oracle_diffusion_moments(const NoiseSchedule& s, double m, std::size_t n, Rng rng) {
  std::vector<double> bd(static_cast<std::size_t>(s.K) + 1);
  for (int k = 1; k <= s.K; ++k) bd[static_cast<std::size_t>(k)] = oracle_detail::beta_delta(s, k);
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    double a = s.nu * rng.normal();
    for (int k = s.K; k >= 1; --k) {
      const double b = bd[static_cast<std::size_t>(k)];
      const double drift = (1.0 + 0.5 * b) * a + s.nu * s.nu * b * (-a / (s.nu * s.nu));
      a = drift + s.nu * std::sqrt(b) * rng.normal();
    }
    a += m;
    sum += a;
    sum2 += a * a;
  }
  const double N = static_cast<double>(n);
  const double mean = sum / N;
  const double var = (sum2 - N * mean * mean) / (N - 1.0);
  return {std::abs(mean - m) / s.nu, std::abs(var / (s.nu * s.nu) - 1.0)};
}

/// The same experiment through the library's reverse kernel.
inline MomentErrors library_diffusion_moments(const NoiseSchedule& s, double m, std::size_t n, Rng rng) {
  double sum = 0.0, sum2 = 0.0;
  std::vector<double> a(1), score(1);
  for (std::size_t c = 0; c < n; ++c) {
    a[0] = s.nu * rng.normal();
    for (int k = s.K; k >= 1; --k) {
      score[0] = -a[0] / (s.nu * s.nu);
      const auto head = reverse_step_density(s, k, a, score);
      a[0] = head.mean[0] + head.std[0] * rng.normal();
    }
    const double x = a[0] + m;
    sum += x;
    sum2 += x * x;
  }
  const double N = static_cast<double>(n);
  const double mean = sum / N;
  const double var = (sum2 - N * mean * mean) / (N - 1.0);
  return {std::abs(mean - m) / s.nu, std::abs(var / (s.nu * s.nu) - 1.0)};
}

// ---------------------------------------------------------------------------
// Entropy lower bound
// ---------------------------------------------------------------------------

struct EntropyPair {
  double bound = 0.0;    // library H_lower, exact by quadrature chains
  double entropy = 0.0;  // differential entropy of the a^0 marginal
};

namespace oracle_detail {

/// Reverse-kernel means at points x for diffusion step k (observation 0).
inline std::vector<double> reverse_means(const ScoreNet& net, const NoiseSchedule& s, int k,
                                         std::span<const double> x) {
  const std::size_t n = x.size();
  const Tensor obs = Tensor::matrix(n, net.obs_dim);
  const Tensor a = Tensor::matrix(n, 1, std::vector<double>(x.begin(), x.end()));
  const std::vector<int> ks(n, k);
  const Tensor score = mlp_forward(net.trunk, score_input(net, obs, a, ks, s.K));
  const double b = beta_delta(s, k);
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = (1.0 + 0.5 * b) * x[i] + s.nu * s.nu * b * score(i, 0);
  return m;
}

/// Density of a^{k-1} on `grid` from point masses (nodes, weights) for a^k.
inline std::vector<double> propagate(const ScoreNet& net, const NoiseSchedule& s, int k,
                                     std::span<const double> nodes, std::span<const double> weights,
                                     std::span<const double> grid) {
  const auto m = reverse_means(net, s, k, nodes);
  const double sd = s.nu * std::sqrt(beta_delta(s, k));
  std::vector<double> dens(grid.size(), 0.0);
  for (std::size_t j = 0; j < nodes.size(); ++j) {
    if (weights[j] == 0.0) continue;
    for (std::size_t g = 0; g < grid.size(); ++g) dens[g] += weights[j] * std::exp(log_normal(grid[g], m[j], sd));
  }
  return dens;
}

inline QuadratureRule covering_grid(std::span<const double> means, double sd, std::size_t intervals) {
  const auto [lo, hi] = std::minmax_element(means.begin(), means.end());
  return simpson(*lo - 10.0 * sd, *hi + 10.0 * sd, intervals);
}

}  // namespace oracle_detail

/// H_lower from the library (chains on a Gauss-Hermite product grid, weighted)
/// against the a^0 marginal entropy propagated on Simpson grids. K in {1, 2}.
inline EntropyPair oracle_entropy(const ScoreNet& net, const NoiseSchedule& s, std::size_t chain_nodes = 24,
                                  std::size_t grid_intervals = 1500) {
  using namespace oracle_detail;
  if (s.K < 1 || s.K > 2) throw ContractViolation("oracle_entropy: supports K = 1 or 2");
  if (net.action_dim != 1) throw ContractViolation("oracle_entropy: 1-D actions only");
  const auto gh = gauss_hermite(chain_nodes);
  const std::vector<double> obs(net.obs_dim, 0.0);
  const ActionBox box = ActionBox::uniform(1, -1.0, 1.0);

  // Library bound on quadrature chains a^K -> ... -> a^0.
  std::vector<std::vector<double>> paths;  // states a^0..a^K per chain
  std::vector<double> weights;
  for (std::size_t i = 0; i < gh.size(); ++i) {
    paths.push_back(std::vector<double>(static_cast<std::size_t>(s.K) + 1));
    paths.back()[static_cast<std::size_t>(s.K)] = s.nu * gh.nodes[i];
    weights.push_back(gh.weights[i]);
  }
  for (int k = s.K; k >= 1; --k) {
    std::vector<double> x(paths.size());
    for (std::size_t p = 0; p < paths.size(); ++p) x[p] = paths[p][static_cast<std::size_t>(k)];
    const auto m = reverse_means(net, s, k, x);
    const double sd = s.nu * std::sqrt(beta_delta(s, k));
    std::vector<std::vector<double>> next;
    std::vector<double> next_w;
    for (std::size_t p = 0; p < paths.size(); ++p)
      for (std::size_t i = 0; i < gh.size(); ++i) {
        auto path = paths[p];
        path[static_cast<std::size_t>(k - 1)] = m[p] + sd * gh.nodes[i];
        next.push_back(std::move(path));
        next_w.push_back(weights[p] * gh.weights[i]);
      }
    paths = std::move(next);
    weights = std::move(next_w);
  }
  std::vector<DiffusionChain> chains;
  chains.reserve(paths.size());
  for (auto& p : paths) {
    std::vector<std::vector<double>> states;
    for (double v : p) states.push_back({v});
    chains.push_back(evaluate_chain(s, net, obs, std::move(states), box));
  }
  EntropyPair out;
  out.bound = entropy_lower_bound(chains, weights);

  // Marginal density of a^0 propagated from the prior.
  const auto prior = gauss_hermite(64);
  std::vector<double> nodes(prior.size());
  for (std::size_t i = 0; i < prior.size(); ++i) nodes[i] = s.nu * prior.nodes[i];
  std::vector<double> node_w = prior.weights;
  for (int k = s.K; k >= 1; --k) {
    const double sd = s.nu * std::sqrt(beta_delta(s, k));
    const auto grid = covering_grid(reverse_means(net, s, k, nodes), sd, grid_intervals);
    const auto dens = propagate(net, s, k, nodes, node_w, grid.nodes);
    nodes = grid.nodes;
    node_w.resize(grid.size());
    for (std::size_t g = 0; g < grid.size(); ++g) node_w[g] = grid.weights[g] * dens[g];
    if (k == 1) {
      double h = 0.0;
      for (std::size_t g = 0; g < grid.size(); ++g)
        if (dens[g] > 0.0) h -= grid.weights[g] * dens[g] * std::log(dens[g]);
      out.entropy = h;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

namespace oracle_detail {

template <typename Body>
SuiteReport timed_suite(std::string name, Body&& body) {
  SuiteReport r;
  r.suite = std::move(name);
  const auto t0 = std::chrono::steady_clock::now();
  body(r);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

template <typename LossOf>
double fd_error(const MlpParams& params, LossOf&& loss_of, const MlpParams& analytic) {
  const auto numeric = finite_diff_grad(loss_of, params, 1e-5);
  return compare_gradients(analytic, numeric, 1e-8).max_rel_error;
}

}  // namespace oracle_detail

/// Finite-difference battery over every loss on nets with at most 200 parameters.
inline SuiteReport run_grad_suite(std::uint64_t seed = 1, int instances = 3) {
  using namespace oracle_detail;
  return timed_suite("grad", [&](SuiteReport& rep) {
    constexpr double tol = 1e-4;
    double e_maxent = 0, e_critic = 0, e_ppo = 0, e_wpo = 0, e_lv = 0, e_diffsac = 0, e_diffwpo = 0, e_dppo = 0;
    std::size_t max_params = 0;
    for (int inst = 0; inst < instances; ++inst) {
      Rng rng = Rng(seed).split(static_cast<std::uint64_t>(inst));
      const std::size_t B = 6;
      const ActionBox box = ActionBox::uniform(1, -1.0, 1.0);
      auto pol = GaussianPolicy::make(2, 1, {6}, Activation::tanh, rng);
      randomize(pol.net, rng, 0.3);
      auto critic = CriticNet::make(2, 1, {6}, Activation::tanh, false, 1, rng);
      randomize(critic.net, rng, 0.5);
      NoiseSchedule sched;
      sched.K = 3;
      auto dpol = DiffusionPolicy::make(2, 1, {4}, Activation::tanh, sched, rng);
      randomize(dpol.score.trunk, rng, 0.5);
      auto dcritic = CriticNet::make(2, 1, {5}, Activation::tanh, true, 3, rng);
      randomize(dcritic.net, rng, 0.5);
      for (const MlpParams* p : {&pol.net, &critic.net, &dpol.score.trunk, &dcritic.net})
        max_params = std::max(max_params, p->param_count());

      const Tensor obs = random_matrix(B, 2, rng);
      const Tensor noise = random_matrix(B, 1, rng);
      const auto head0 = gaussian_forward(pol, obs);
      Tensor u = Tensor::matrix(B, 1);
      for (std::size_t r = 0; r < B; ++r) u(r, 0) = head0.mean(r, 0) + head0.std(r, 0) * rng.normal();
      const Tensor ak = random_matrix(B, 1, rng);
      std::vector<int> ks(B);
      for (std::size_t r = 0; r < B; ++r) ks[r] = 1 + static_cast<int>(r % 3);
      const ActionValueFn q = squashed_action_value(
          [&](const Tensor& o, const Tensor& a, bool g) { return critic_eval(critic, critic_input(critic, o, a), g); },
          box);
      const DiffActionValueFn dq = [&](const Tensor& o, const Tensor& a_k, std::span<const int> k, const Tensor& a,
                                       bool g) { return critic_eval(dcritic, critic_input(dcritic, o, a_k, k, a), g); };
      auto with_policy = [&](auto make_loss) {
        return [&, make_loss](const MlpParams& p) {
          GaussianPolicy x = pol;
          x.net = p;
          return make_loss(x);
        };
      };
      auto with_dpolicy = [&](auto make_loss) {
        return [&, make_loss](const MlpParams& p) {
          DiffusionPolicy x = dpol;
          x.score.trunk = p;
          return make_loss(x);
        };
      };
      const double T = 0.3;

      auto maxent = [&](const GaussianPolicy& x) { return maxent_actor_loss(x, obs, noise, q, T, &box); };
      e_maxent = std::max(e_maxent, fd_error(pol.net, with_policy([&](const GaussianPolicy& x) { return maxent(x).loss; }),
                                             maxent(pol).grad));

      const Tensor cin = critic_input(critic, obs, u);
      std::vector<double> y(B);
      for (double& v : y) v = rng.normal();
      e_critic = std::max(e_critic, fd_error(
                                        critic.net,
                                        [&](const MlpParams& p) {
                                          CriticNet x = critic;
                                          x.net = p;
                                          return critic_loss(x, cin, y).loss;
                                        },
                                        critic_loss(critic, cin, y).grad));

      const auto lp = gaussian_log_prob(gaussian_forward(pol, obs), u);
      // Log-ratio offsets kept clear of the clip boundaries.
      const double offsets[] = {0.6, -0.6, 0.05, -0.08, 0.02, 0.1};
      std::vector<double> old(B), adv(B);
      for (std::size_t r = 0; r < B; ++r) {
        old[r] = lp[r] + offsets[r % 6];
        adv[r] = rng.normal();
      }
      auto ppo = [&](const GaussianPolicy& x) { return ppo_gaussian_loss(x, obs, u, old, adv, 0.2); };
      e_ppo = std::max(e_ppo, fd_error(pol.net, with_policy([&](const GaussianPolicy& x) { return ppo(x).loss; }),
                                       ppo(pol).grad));

      const auto head = gaussian_forward(pol, obs);
      const Tensor field = wpo_field(obs, head.mean, head.std, u, q, T, &box);
      e_wpo = std::max(e_wpo, fd_error(pol.net, with_policy([&](const GaussianPolicy& x) {
                                         const auto b = gaussian_forward(x, obs);
                                         return wpo_surrogate(b.mean, b.std, u, field);
                                       }),
                                       wpo_loss(pol, obs, u, q, T, &box, false).grad));

      std::vector<double> target(B);
      for (double& v : target) v = rng.normal();
      auto lv = [&](const GaussianPolicy& x) { return lv_gaussian_loss(x, obs, u, target); };
      e_lv = std::max(e_lv, fd_error(pol.net, with_policy([&](const GaussianPolicy& x) { return lv(x).loss; }),
                                     lv(pol).grad));

      auto dsac = [&](const DiffusionPolicy& x) { return diffsac_actor_loss(x, obs, ak, ks, noise, dq, T, &box); };
      e_diffsac = std::max(e_diffsac, fd_error(dpol.score.trunk,
                                               with_dpolicy([&](const DiffusionPolicy& x) { return dsac(x).loss; }),
                                               dsac(dpol).grad));

      const auto rhead = reverse_forward(dpol, obs, ak, ks);
      Tensor ap = Tensor::matrix(B, 1);
      for (std::size_t r = 0; r < B; ++r) ap(r, 0) = rhead.mean(r, 0) + rhead.std[r] * rng.normal();
      const Tensor dfield = diffwpo_field(sched, obs, ak, ks, rhead.mean, rhead.std, ap, dq, T, &box);
      const Tensor dstd = Tensor::matrix(B, 1, rhead.std);
      e_diffwpo = std::max(e_diffwpo, fd_error(dpol.score.trunk, with_dpolicy([&](const DiffusionPolicy& x) {
                                                 return wpo_surrogate(reverse_forward(x, obs, ak, ks).mean, dstd, ap,
                                                                      dfield);
                                               }),
                                               diffwpo_loss(dpol, obs, ak, ks, ap, dq, T, &box, false).grad));

      const auto dlp = reverse_log_prob(rhead, ap);
      std::vector<double> dold(B);
      for (std::size_t r = 0; r < B; ++r) dold[r] = dlp[r] + (r % 2 ? 0.03 : -0.7);
      auto dppo = [&](const DiffusionPolicy& x) { return ppo_diffusion_loss(x, obs, ak, ks, ap, dold, adv, 0.2); };
      e_dppo = std::max(e_dppo, fd_error(dpol.score.trunk,
                                         with_dpolicy([&](const DiffusionPolicy& x) { return dppo(x).loss; }),
                                         dppo(dpol).grad));
    }
    rep.at_most("max parameter count", static_cast<double>(max_params), 200.0);
    rep.at_most("maxent_actor_loss rel error", e_maxent, tol);
    rep.at_most("critic_loss rel error", e_critic, tol);
    rep.at_most("ppo_clip_loss rel error", e_ppo, tol);
    rep.at_most("wpo_loss (pre-scaling) rel error", e_wpo, tol);
    rep.at_most("lv_loss rel error", e_lv, tol);
    rep.at_most("diffsac_actor_loss rel error", e_diffsac, tol);
    rep.at_most("diffwpo_loss rel error", e_diffwpo, tol);
    rep.at_most("ppo_diffusion_loss rel error", e_dppo, tol);
  });
}

/// Reverse-KL gradient oracle, LV equivalence on- and off-policy, and the q = pi case.
inline SuiteReport run_lv_suite(const LvLossFn& lv = library_lv_loss(), std::uint64_t seed = 2,
                                int instances = 50) {
  using namespace oracle_detail;
  return timed_suite("lv", [&](SuiteReport& rep) {
    Rng rng(seed);
    const QuadraticReward half_square{-0.5, 0.0, 0.0};
    rep.at_most("rkl oracle R=-a^2/2, T=0, sigma=1 at theta=0.7: |grad - theta|",
                std::abs(oracle_rkl_gradient(0.7, 1.0, half_square, 0.0) - 0.7), 1e-12);
    rep.at_most("rkl oracle constant R: |grad|", std::abs(oracle_rkl_gradient(0.3, 0.8, {0.0, 0.0, 2.0}, 0.0)), 1e-12);
    double lib_gap = 0.0, on_gap = 0.0, off_gap = 0.0;
    for (int i = 0; i < instances; ++i) {
      const double theta = rng.uniform(-2, 2), sigma = rng.uniform(0.3, 2.0), T = rng.uniform(0.2, 2.0);
      const QuadraticReward R{rng.uniform(-2.0, -0.1), rng.uniform(-2, 2), rng.uniform(-1, 1)};
      lib_gap = std::max(lib_gap, std::abs(library_rkl_gradient(theta, sigma, R, T) -
                                           oracle_rkl_gradient(theta, sigma, R, T)));
      const double one[1] = {1.0};
      const QuadraticReward rs[1] = {R};
      on_gap = std::max(on_gap, oracle_lv_equivalence(theta, sigma, one, one, rs, T, lv).gap());

      std::vector<double> states(5), rho(5);
      std::vector<QuadraticReward> rewards(5);
      double total = 0.0;
      for (std::size_t j = 0; j < 5; ++j) {
        states[j] = rng.uniform(-1.5, 1.5);
        rho[j] = rng.uniform(0.1, 1.0);
        total += rho[j];
        rewards[j] = {rng.uniform(-2.0, -0.1), rng.uniform(-2, 2), rng.uniform(-3, 3)};
      }
      for (double& r : rho) r /= total;
      off_gap = std::max(off_gap, oracle_lv_equivalence(theta, sigma, states, rho, rewards, T, lv).gap());
    }
    rep.at_most("library maxent gradient vs rkl oracle", lib_gap, 1e-6);
    rep.at_most("on-policy |LV - rKL| over instances", on_gap, 1e-6);
    rep.at_most("off-policy states |LV - surrogate| over instances", off_gap, 1e-6);

    // q = pi: R / T = log N(a; theta, sigma^2) + const.
    const double theta = 0.4, sigma = 0.9, T = 0.7;
    const QuadraticReward match{-T / (2 * sigma * sigma), T * theta / (sigma * sigma), 1.3};
    const double one[1] = {1.0};
    const QuadraticReward rs[1] = {match};
    const auto zero = oracle_lv_equivalence(theta, sigma, one, one, rs, T, lv);
    rep.at_most("q = pi: |LV gradient|", std::abs(zero.lv), 1e-10);
    rep.at_most("q = pi: |rKL gradient|", std::abs(zero.rkl), 1e-10);
  });
}

inline SuiteReport run_dpi_suite(std::uint64_t seed = 3, int instances = 100) {
  return oracle_detail::timed_suite("dpi", [&](SuiteReport& rep) {
    Rng rng(seed);
    double worst = std::numeric_limits<double>::infinity();
    for (int i = 0; i < instances; ++i) {
      const std::size_t n = 2 + rng.below(20);
      const auto [q, p] = random_chain_tables(n, rng);
      worst = std::min(worst, oracle_dpi(q, p, n).gap());
    }
    rep.at_most("min over random K=2 chains of (joint KL - marginal KL), negated", -worst, 1e-9);

    // Identical conditionals given x0: the joint gap vanishes.
    const std::size_t n = 9;
    auto [q, p] = random_chain_tables(n, rng);
    std::vector<double> p0(n, 0.0), q0 = oracle_detail::random_simplex(n, rng, 0.0);
    for (std::size_t x0 = 0; x0 < n; ++x0)
      for (std::size_t r = 0; r < n * n; ++r) p0[x0] += p[x0 * n * n + r];
    std::vector<double> tilted(p.size());
    for (std::size_t x0 = 0; x0 < n; ++x0)
      for (std::size_t r = 0; r < n * n; ++r) tilted[x0 * n * n + r] = p[x0 * n * n + r] / p0[x0] * q0[x0];
    rep.at_most("identical conditionals |gap|", std::abs(oracle_dpi(tilted, p, n).gap()), 1e-12);

    // One-point grid for x1, x2: the joint is the marginal.
    const auto qa = oracle_detail::random_simplex(n, rng, 0.0);
    const auto pa = oracle_detail::random_simplex(n, rng, 0.0);
    const auto pair = oracle_dpi(qa, pa, n);
    rep.at_most("degenerate one-point chain |joint - marginal|", std::abs(pair.gap()), 1e-15);
  });
}

inline SuiteReport run_wpo_suite(std::uint64_t seed = 4, int instances = 50) {
  return oracle_detail::timed_suite("wpo", [&](SuiteReport& rep) {
    Rng rng(seed);
    double closed_vs_quad = 0.0, lib_vs_oracle = 0.0, scale_gap = 0.0;
    bool exact = true;
    for (int i = 0; i < instances; ++i) {
      const double mu = rng.uniform(-2, 2), sigma = rng.uniform(0.2, 2.0), c = rng.uniform(0.0, 3.0);
      const double a_star = rng.uniform(-2, 2), T = i % 5 == 0 ? 0.0 : rng.uniform(0.0, 1.5);
      const auto closed = oracle_wpo(mu, sigma, c, a_star, T);
      const auto quad = oracle_wpo_quadrature(mu, sigma, c, a_star, T);
      const auto lib = library_wpo(mu, sigma, c, a_star, T);
      closed_vs_quad = std::max({closed_vs_quad, std::abs(closed.mu - quad.mu), std::abs(closed.sigma - quad.sigma)});
      lib_vs_oracle = std::max({lib_vs_oracle, std::abs(lib.raw.mu - closed.mu), std::abs(lib.raw.sigma - closed.sigma)});
      scale_gap = std::max(scale_gap, std::abs(lib.scaled_mu - sigma * sigma * lib.raw.mu) /
                                          std::max(1.0, std::abs(lib.scaled_mu)));
      exact = exact && lib.per_sample_exact;
    }
    const auto unit = oracle_wpo(0.8, 0.5, 1.0, -0.2, 0.0);
    rep.at_most("T=0, c=1: |mu-component - (mu - a*)/sigma^2|", std::abs(unit.mu - (0.8 + 0.2) / 0.25), 1e-12);
    rep.at_most("a* = mu: |mu-component|", std::abs(oracle_wpo(0.3, 1.1, 2.0, 0.3, 0.4).mu), 0.0);
    rep.at_most("closed form vs Gauss-Hermite", closed_vs_quad, 1e-10);
    rep.at_most("library wpo_loss (pre-scaling) vs oracle", lib_vs_oracle, 1e-6);
    rep.at_most("GradScale mean: |scaled - sigma^2 * raw| (relative)", scale_gap, 1e-12);
    rep.at_most("GradScale per-sample mismatches", exact ? 0.0 : 1.0, 0.0);
    bool rejected = false;
    try {
      (void)oracle_wpo(0.0, 1.0, -1.0, 0.0, 0.0);
    } catch (const ContractViolation&) {
      rejected = true;
    }
    rep.at_most("negative curvature rejected", rejected ? 0.0 : 1.0, 0.0);
  });
}

inline SuiteReport run_diffusion_suite(std::uint64_t seed = 5, std::size_t samples = 100000) {
  return oracle_detail::timed_suite("diffusion", [&](SuiteReport& rep) {
    NoiseSchedule s;
    s.nu = 2.2;
    s.K = 100;
    const Rng root(seed);
    const auto fine = oracle_diffusion_moments(s, 0.0, samples, root.split(0));
    rep.at_most("K=100, m=0: |mean| / nu", fine.mean_error, 0.02);
    rep.at_most("K=100, m=0: |var / nu^2 - 1|", fine.var_error, 0.05);
    const auto shifted = oracle_diffusion_moments(s, 3.0, samples, root.split(1));
    rep.at_most("K=100, m=3: |mean - 3| / nu", shifted.mean_error, 0.02);
    rep.at_most("K=100, m=3: |var / nu^2 - 1|", shifted.var_error, 0.05);
    const auto lib = library_diffusion_moments(s, 3.0, samples, root.split(2));
    rep.at_most("library kernel K=100, m=3: |mean - 3| / nu", lib.mean_error, 0.02);
    rep.at_most("library kernel K=100, m=3: |var / nu^2 - 1|", lib.var_error, 0.05);

    // Discretization probe: K=1 errors exceed K=100 errors, averaged over 10 seeds.
    double coarse_sum = 0.0, fine_sum = 0.0;
    NoiseSchedule one = s;
    one.K = 1;
    for (std::uint64_t i = 0; i < 10; ++i) {
      const auto a = oracle_diffusion_moments(one, 0.0, samples / 10, root.split(100 + i));
      const auto b = oracle_diffusion_moments(s, 0.0, samples / 10, root.split(200 + i));
      coarse_sum += a.mean_error + a.var_error;
      fine_sum += b.mean_error + b.var_error;
    }
    rep.at_most("K=100 error minus K=1 error (10-seed mean, must be negative)", (fine_sum - coarse_sum) / 10.0, 0.0);
  });
}

inline SuiteReport run_entropy_suite(std::uint64_t seed = 6, int policies = 50) {
  return oracle_detail::timed_suite("entropy", [&](SuiteReport& rep) {
    Rng rng(seed);
    double worst = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < policies; ++i) {
      NoiseSchedule s;
      s.K = 1 + i % 2;
      s.nu = rng.uniform(0.5, 2.2);
      ScoreNet net = ScoreNet::make(1, 1, {6}, Activation::tanh, rng);
      oracle_detail::randomize(net.trunk, rng, 0.4);
      const auto pair = oracle_entropy(net, s);
      worst = std::max(worst, pair.bound - pair.entropy);
    }
    rep.at_most("max over random policies of (H_lower - marginal entropy)", worst, 1e-3);
  });
}

inline const std::vector<std::string>& verify_suite_names() {
  static const std::vector<std::string> names{"grad", "lv", "dpi", "wpo", "diffusion", "entropy"};
  return names;
}

/// Runs one suite or, for "all", every suite in order.
inline std::vector<SuiteReport> run_verify(const std::string& selector) {
  std::vector<SuiteReport> out;
  auto run = [&](const std::string& name) {
    if (name == "grad") out.push_back(run_grad_suite());
    else if (name == "lv") out.push_back(run_lv_suite());
    else if (name == "dpi") out.push_back(run_dpi_suite());
    else if (name == "wpo") out.push_back(run_wpo_suite());
    else if (name == "diffusion") out.push_back(run_diffusion_suite());
    else if (name == "entropy") out.push_back(run_entropy_suite());
    else throw ConfigError("unknown verify suite '" + name + "' (expected all|grad|lv|dpi|wpo|diffusion|entropy)");
  };
  if (selector == "all")
    for (const auto& n : verify_suite_names()) run(n);
  else
    run(selector);
  return out;
}

}  // namespace dmerl
