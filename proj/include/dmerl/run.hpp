#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dmerl/algorithms.hpp"
#include "dmerl/checkpoint.hpp"
#include "dmerl/config.hpp"
#include "dmerl/env.hpp"
#include "dmerl/metrics.hpp"

namespace dmerl {

namespace fs = std::filesystem;

inline constexpr const char* kMetricsHeader =
    "step,env_steps,return_mean,return_std,temperature,loss_actor,loss_critic,entropy_bound,target_kl";
inline constexpr std::size_t kEvalPolicySamples = 2000;
inline constexpr std::size_t kEntropyChains = 256;

/// Shortest text that reads back to the same double; empty for NaN.
inline std::string csv_number(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline json json_number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

struct EvalReport {
  std::vector<double> returns;
  double return_mean = 0.0;
  double return_std = 0.0;
  double target_kl = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> mode_mass;  // bandit only: mass at (-center, +center)
  double entropy_bound = std::numeric_limits<double>::quiet_NaN();  // diffusion only

  [[nodiscard]] json to_json() const {
    json j;
    j["episodes"] = returns.size();
    j["return_mean"] = return_mean;
    j["return_std"] = return_std;
    j["target_kl"] = json_number(target_kl);
    j["entropy_bound"] = json_number(entropy_bound);
    if (!mode_mass.empty()) j["mode_mass"] = mode_mass;
    return j;
  }
};

/// Policy evaluation without parameter updates. The bandit also reports the
/// KL to its Boltzmann target at alpha = 1 / T and the two mode masses.
inline EvalReport evaluate_agent(const Agent& agent, std::size_t episodes, Rng rng) {
  EvalReport r;
  r.returns = agent.evaluate(episodes, rng);
  for (double x : r.returns) r.return_mean += x;
  r.return_mean /= static_cast<double>(r.returns.size());
  if (r.returns.size() > 1) {
    double s = 0.0;
    for (double x : r.returns) s += (x - r.return_mean) * (x - r.return_mean);
    r.return_std = std::sqrt(s / static_cast<double>(r.returns.size() - 1));
  }
  const auto& spec = agent.config().env;
  if (agent.diffusion()) {
    Tensor obs = Tensor::matrix(kEntropyChains, spec.obs_dim);
    for (std::size_t i = 0; i < kEntropyChains; ++i) {
      const auto s = env_reset(spec, rng);
      std::copy(s.observation.begin(), s.observation.end(), obs.row(i).begin());
    }
    const auto& p = agent.diffusion_policy();
    r.entropy_bound = entropy_lower_bound(sample_chains(p.sched, p.score, obs, spec.bounds, rng));
  }
  if (spec.kind == EnvKind::bimodal_bandit) {
    const auto state = env_reset(spec, rng);
    const Tensor obs = Tensor::matrix(kEvalPolicySamples, spec.obs_dim);
    Tensor tiled = obs;
    for (std::size_t i = 0; i < kEvalPolicySamples; ++i)
      std::copy(state.observation.begin(), state.observation.end(), tiled.row(i).begin());
    const Tensor samples = agent.sample_actions(tiled, rng);
    const double centers[2] = {-spec.mode_center, spec.mode_center};
    r.mode_mass = mode_mass(samples.data(), centers);
    const double T = agent.temperature().value;
    if (T > 0.0) r.target_kl = target_kl(samples, BoltzmannTarget(spec, state, 1.0 / T));
  }
  return r;
}

struct TrainOptions {
  bool resume = false;
  std::vector<std::string> warnings;
  std::ostream* log = nullptr;
};

namespace run_detail {

inline void write_json(const fs::path& p, const json& j) {
  std::ofstream f(p);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

inline Checkpoint run_checkpoint(const Agent& agent, const RunConfig& rc, std::size_t next_eval, std::size_t rows) {
  Checkpoint ck = agent.save();
  ck.meta["run.config"] = rc.resolved.dump();
  ck.meta["run.next_eval"] = std::to_string(next_eval);
  ck.meta["run.rows"] = std::to_string(rows);
  return ck;
}

/// Keeps the header and the first `rows` data lines of an existing CSV.
inline void truncate_metrics(const fs::path& p, std::size_t rows) {
  std::ifstream in(p);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line) && lines.size() < rows + 1;) lines.push_back(line);
  in.close();
  std::ofstream out(p, std::ios::trunc);
  if (lines.empty()) lines.push_back(kMetricsHeader);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace run_detail

/// Rebuilds an agent and its run config from a run checkpoint.
inline std::pair<RunConfig, Agent> agent_from_checkpoint(const Checkpoint& ck) {
  const auto it = ck.meta.find("run.config");
  if (it == ck.meta.end()) throw LoadError("checkpoint carries no run config");
  RunConfig rc = resolve_config(json::parse(it->second));
  Agent agent(rc.agent);
  agent.load(ck);
  return {std::move(rc), std::move(agent)};
}

/// Trains one run into `out`: manifest.json, metrics.csv (a row per eval
/// interval plus a final row), checkpoint.bin and summary.json.
inline json train_run(const RunConfig& rc, const fs::path& out, const TrainOptions& opt = {}) {
  fs::create_directories(out);
  const fs::path ckpt_path = out / "checkpoint.bin";
  const fs::path metrics_path = out / "metrics.csv";

  json manifest;
  manifest["format_version"] = kConfigFormatVersion;
  manifest["checkpoint_format_version"] = kCheckpointFormatVersion;
  manifest["seed"] = rc.agent.seed;
  manifest["config"] = rc.resolved;
  manifest["metrics_columns"] = kMetricsHeader;
  manifest["warnings"] = opt.warnings;
  run_detail::write_json(out / "manifest.json", manifest);

  Agent agent(rc.agent);
  std::size_t next_eval = rc.eval_interval;
  std::size_t rows = 0;
  if (opt.resume && fs::exists(ckpt_path)) {
    const Checkpoint ck = load_checkpoint(ckpt_path);
    agent.load(ck);
    next_eval = std::stoull(ck.meta.at("run.next_eval"));
    rows = std::stoull(ck.meta.at("run.rows"));
    run_detail::truncate_metrics(metrics_path, rows);
    if (opt.log) *opt.log << "resumed at " << agent.env_steps() << " env steps\n";
  } else {
    std::ofstream(metrics_path, std::ios::trunc) << kMetricsHeader << '\n';
  }
  std::ofstream metrics(metrics_path, std::ios::app);

  const Rng eval_root = Rng(rc.agent.seed).split(2);
  double actor_sum = 0.0, critic_sum = 0.0;
  std::size_t actor_n = 0, critic_n = 0;
  std::size_t last_row_steps = rows > 0 ? agent.env_steps() : 0;
  std::size_t next_ckpt = rc.checkpoint_interval ? (agent.env_steps() / rc.checkpoint_interval + 1) * rc.checkpoint_interval : 0;
  EvalReport last;

  auto write_row = [&]() {
    last = evaluate_agent(agent, rc.eval_episodes, eval_root.split(rows));
    const double la = actor_n ? actor_sum / static_cast<double>(actor_n) : std::numeric_limits<double>::quiet_NaN();
    const double lc = critic_n ? critic_sum / static_cast<double>(critic_n) : std::numeric_limits<double>::quiet_NaN();
    metrics << agent.updates() << ',' << agent.env_steps() << ',' << csv_number(last.return_mean) << ','
            << csv_number(last.return_std) << ',' << csv_number(agent.temperature().value) << ',' << csv_number(la)
            << ',' << csv_number(lc) << ',' << csv_number(last.entropy_bound) << ',' << csv_number(last.target_kl)
            << '\n';
    metrics.flush();
    if (opt.log)
      *opt.log << "env_steps " << agent.env_steps() << " return " << last.return_mean << " +- " << last.return_std
               << '\n';
    actor_sum = critic_sum = 0.0;
    actor_n = critic_n = 0;
    last_row_steps = agent.env_steps();
    ++rows;
  };

  while (agent.env_steps() < rc.total_env_steps) {
    const double progress = static_cast<double>(agent.env_steps()) / static_cast<double>(rc.total_env_steps);
    const auto st = agent.iterate(progress);
    if (std::isfinite(st.loss_actor)) actor_sum += st.loss_actor, ++actor_n;
    if (std::isfinite(st.loss_critic)) critic_sum += st.loss_critic, ++critic_n;
    if (agent.env_steps() >= next_eval) {
      write_row();
      while (next_eval <= agent.env_steps()) next_eval += rc.eval_interval;
    }
    if (rc.checkpoint_interval && agent.env_steps() >= next_ckpt) {
      save_checkpoint(ckpt_path, run_detail::run_checkpoint(agent, rc, next_eval, rows));
      while (next_ckpt <= agent.env_steps()) next_ckpt += rc.checkpoint_interval;
    }
  }
  if (rc.total_env_steps > 0 && last_row_steps != agent.env_steps()) write_row();
  if (rows == 0 || rc.total_env_steps == 0) last = evaluate_agent(agent, rc.eval_episodes, eval_root.split(rows));
  save_checkpoint(ckpt_path, run_detail::run_checkpoint(agent, rc, next_eval, rows));

  json summary;
  summary["algo"] = std::string(to_string(rc.agent.algo));
  summary["env"] = rc.resolved["env"]["kind"];
  summary["seed"] = rc.agent.seed;
  summary["env_steps"] = agent.env_steps();
  summary["updates"] = agent.updates();
  summary["temperature"] = agent.temperature().value;
  summary["final"] = last.to_json();
  run_detail::write_json(out / "summary.json", summary);
  return summary;
}

/// One run per value per seed under out/<param>=<value>/seed<i>, plus
/// out/aggregate.csv with the final evaluation of every run.
inline json sweep_runs(const json& base, const std::string& param, const std::vector<std::string>& values,
                       std::size_t seeds, const fs::path& out, std::ostream* log = nullptr) {
  if (values.empty()) throw ConfigError("sweep: values list is empty");
  if (seeds == 0) throw ConfigError("sweep: seeds must be >= 1");
  if (!is_scalar_path(param)) throw ConfigError("sweep: '" + param + "' does not address a scalar config field");
  const auto seed_ptr = config_detail::pointer("training.seed");
  const std::uint64_t base_seed = base.contains(seed_ptr) ? base[seed_ptr].get<std::uint64_t>() : 0;

  // Validate every value before any run starts.
  std::vector<RunConfig> runs;
  std::vector<std::pair<std::string, std::size_t>> labels;
  for (const auto& v : values) {
    for (std::size_t s = 0; s < seeds; ++s) {
      json doc = base;
      apply_override(doc, param + "=" + v);
      doc[seed_ptr] = base_seed + s;
      runs.push_back(resolve_config(doc));
      labels.emplace_back(v, s);
    }
  }
  fs::create_directories(out);
  std::ofstream agg(out / "aggregate.csv");
  agg << "param,value,seed,env_steps,return_mean,return_std,target_kl\n";
  json all = json::array();
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& [v, s] = labels[i];
    const fs::path dir = out / (param + "=" + v) / ("seed" + std::to_string(s));
    if (log) *log << "sweep run " << param << "=" << v << " seed " << runs[i].agent.seed << '\n';
    TrainOptions opt;
    opt.log = log;
    const json summary = train_run(runs[i], dir, opt);
    const auto& f = summary["final"];
    agg << param << ',' << v << ',' << runs[i].agent.seed << ',' << summary["env_steps"].get<std::size_t>() << ','
        << csv_number(f["return_mean"].get<double>()) << ',' << csv_number(f["return_std"].get<double>()) << ','
        << (f["target_kl"].is_null() ? "" : csv_number(f["target_kl"].get<double>())) << '\n';
    agg.flush();
    all.push_back({{"value", v}, {"seed", runs[i].agent.seed}, {"dir", dir.string()}, {"summary", summary}});
  }
  return all;
}

}  // namespace dmerl
