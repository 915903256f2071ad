#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "dmerl/config.hpp"
#include "dmerl/oracles.hpp"
#include "dmerl/run.hpp"

using namespace dmerl;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

json read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

/// DMERL_SEED wins over the config's training.seed.
void apply_seed_env(json& doc) {
  if (const char* s = std::getenv("DMERL_SEED")) {
    try {
      doc[config_detail::pointer("training.seed")] = std::stoull(s);
    } catch (const std::exception&) {
      throw ConfigError("DMERL_SEED must be a non-negative integer (got '" + std::string(s) + "')");
    }
  }
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string item; std::getline(ss, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

json suite_json(const SuiteReport& r) {
  json checks = json::array();
  for (const auto& c : r.checks)
    checks.push_back({{"name", c.name}, {"measured", c.measured}, {"tolerance", c.tolerance}, {"passed", c.passed}});
  return {{"passed", r.passed()}, {"seconds", r.seconds}, {"checks", checks}};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Diffusion-policy maximum-entropy RL: train, evaluate, sweep and verify"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::vector<std::string> overrides;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train one run");
  train->add_option("--config", config_path, "JSON config")->required();
  train->add_option("--set", overrides, "Override a field: path=value (repeatable)");
  train->add_option("--out", out_dir, "Run directory (default: config 'out')");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  std::string param, values;
  std::size_t seeds = 1;
  auto* sweep = app.add_subcommand("sweep", "One run per value per seed");
  sweep->add_option("--config", config_path, "JSON config")->required();
  sweep->add_option("--param", param, "Dotted scalar field, e.g. diffusion.K")->required();
  sweep->add_option("--values", values, "Comma-separated values")->required();
  sweep->add_option("--seeds", seeds, "Seeds per value")->check(CLI::PositiveNumber);
  sweep->add_option("--set", overrides, "Override a field: path=value (repeatable)");
  sweep->add_option("--out", out_dir, "Sweep directory (default: config 'out' or runs/sweep)");

  std::string checkpoint;
  long long episodes = 10;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", checkpoint, "checkpoint.bin of a run")->required();
  eval->add_option("--episodes", episodes, "Episodes to run");
  eval->add_option("--out", out_dir, "Also write the report to this file");

  std::string suite = "all";
  auto* verify = app.add_subcommand("verify", "Run oracle suites");
  verify->add_option("--suite", suite, "all|grad|lv|dpi|wpo|diffusion|entropy");
  verify->add_option("--out", out_dir, "Also write the report to this file");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train || *sweep) {
      json doc = read_config(config_path);
      for (const auto& o : overrides) apply_override(doc, o);
      apply_seed_env(doc);
      if (*train) {
        std::vector<std::string> warnings;
        const RunConfig rc = resolve_config(doc, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
        const fs::path out = !out_dir.empty() ? fs::path(out_dir) : !rc.out.empty() ? fs::path(rc.out) : fs::path();
        if (out.empty()) throw ConfigError("no output directory: pass --out or set 'out' in the config");
        TrainOptions opt;
        opt.resume = resume;
        opt.warnings = warnings;
        opt.log = &std::cerr;
        const json summary = train_run(rc, out, opt);
        std::cout << summary.dump(2) << '\n';
      } else {
        fs::path out = out_dir;
        if (out.empty()) out = doc.contains("out") && doc["out"].is_string() ? doc["out"].get<std::string>() : "runs/sweep";
        const auto vals = split_csv(values);
        const json runs = sweep_runs(doc, param, vals, seeds, out, &std::cerr);
        std::cout << "wrote " << runs.size() << " runs and " << (out / "aggregate.csv").string() << '\n';
      }
      return 0;
    }
    if (*eval) {
      if (episodes <= 0) throw ConfigError("--episodes must be >= 1");
      const Checkpoint ck = load_checkpoint(checkpoint);
      auto [rc, agent] = agent_from_checkpoint(ck);
      std::uint64_t seed = rc.agent.seed;
      if (const char* s = std::getenv("DMERL_SEED")) seed = std::stoull(s);
      const EvalReport r = evaluate_agent(agent, static_cast<std::size_t>(episodes), Rng(seed).split(3));
      json report = r.to_json();
      report["algo"] = std::string(to_string(rc.agent.algo));
      report["env_steps"] = agent.env_steps();
      std::cout << report.dump(2) << '\n';
      if (!out_dir.empty()) std::ofstream(out_dir) << report.dump(2) << '\n';
      return 0;
    }
    if (*verify) {
      const auto& names = verify_suite_names();
      if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end()) {
        std::cerr << "unknown suite '" << suite << "' (expected all|grad|lv|dpi|wpo|diffusion|entropy)\n";
        return kExitUsage;
      }
      const auto reports = run_verify(suite);
      json report;
      bool ok = true;
      for (const auto& r : reports) {
        report["suites"][r.suite] = suite_json(r);
        ok = ok && r.passed();
      }
      report["passed"] = ok;
      std::cout << report.dump(2) << '\n';
      if (!out_dir.empty()) std::ofstream(out_dir) << report.dump(2) << '\n';
      return ok ? 0 : kExitFailure;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return 0;
}
