#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "dmerl/config.hpp"
#include "dmerl/run.hpp"

using namespace dmerl;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dmerl_test_cli_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json small_point_mass(const std::string& algo) {
  json doc = {{"algo", algo},
              {"env", {{"kind", "point_mass"}, {"dim", 1}, {"horizon", 4}}},
              {"network", {{"policy_hidden", {8}}, {"critic_hidden", {8}}}},
              {"training",
               {{"total_env_steps", 120},
                {"eval_interval", 40},
                {"eval_episodes", 3},
                {"batch_size", 16},
                {"learning_starts", 20},
                {"n_envs", 2},
                {"epochs", 2},
                {"minibatch_size", 16}}}};
  if (algo.rfind("diff", 0) == 0) doc["diffusion"] = {{"K", 2}};
  return doc;
}

}  // namespace

TEST(Config, ListsEveryViolation) {
  const json doc = {{"algo", "diffppo"},
                    {"env", {{"kind", "point_mass"}, {"horizn", 3}}},
                    {"training", {{"batch_size", -1}, {"gamma", 2.0}}},
                    {"temperature", {{"mode", "hot"}}}};
  try {
    (void)resolve_config(doc);
    FAIL() << "expected SchemaError";
  } catch (const SchemaError& e) {
    const auto& v = e.violations();
    ASSERT_EQ(v.size(), 5u);
    auto mentions = [&](const std::string& field) {
      return std::any_of(v.begin(), v.end(), [&](const std::string& s) { return s.rfind(field, 0) == 0; });
    };
    EXPECT_TRUE(mentions("env.horizn"));
    EXPECT_TRUE(mentions("diffusion"));
    EXPECT_TRUE(mentions("training.batch_size"));
    EXPECT_TRUE(mentions("training.gamma"));
    EXPECT_TRUE(mentions("temperature.mode"));
  }
}

TEST(Config, MissingAlgoAndWrongTypes) {
  const json doc = {{"env", {{"kind", 3}}}, {"training", {{"stratify_k", "yes"}}}};
  try {
    (void)resolve_config(doc);
    FAIL();
  } catch (const SchemaError& e) {
    EXPECT_EQ(e.violations().size(), 3u);
  }
}

TEST(Config, DiffusionGammaDefault) {
  const auto rc = resolve_config({{"algo", "diffppo"}, {"diffusion", {{"K", 4}}}});
  EXPECT_DOUBLE_EQ(rc.agent.gamma, std::pow(0.9991, 0.25));
  EXPECT_DOUBLE_EQ(rc.resolved["training"]["gamma"].get<double>(), std::pow(0.9991, 0.25));
}

TEST(Config, ExplicitGammaWins) {
  const auto rc = resolve_config({{"algo", "diffsac"}, {"diffusion", json::object()}, {"training", {{"gamma", 0.9}}}});
  EXPECT_DOUBLE_EQ(rc.agent.gamma, 0.9);
}

TEST(Config, DefaultsRecorded) {
  const auto rc = resolve_config({{"algo", "sac"}});
  const auto& r = rc.resolved;
  EXPECT_EQ(r["network"]["policy_hidden"], json::array({128, 128}));
  EXPECT_EQ(r["network"]["critic_hidden"], json::array({256, 256}));
  EXPECT_EQ(r["network"]["activation"], "tanh");
  EXPECT_EQ(r["training"]["learning_rate_grid"], json::array({3e-4, 1e-3, 3e-3}));
  EXPECT_DOUBLE_EQ(r["training"]["gamma"].get<double>(), 0.99);
  EXPECT_DOUBLE_EQ(r["temperature"]["target_entropy_scale"].get<double>(), -1.0);
  EXPECT_EQ(r["env"]["horizon"], 19);
  EXPECT_FALSE(r.contains("diffusion"));
}

TEST(Config, VanillaDiffusionSectionWarnsAndIsDropped) {
  std::vector<std::string> warnings;
  const auto rc = resolve_config({{"algo", "ppo"}, {"diffusion", {{"K", 8}}}}, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_FALSE(rc.resolved.contains("diffusion"));
  EXPECT_EQ(rc.agent.K(), 0);
}

TEST(Config, DiffusionTargetEntropyScale) {
  const auto rc =
      resolve_config({{"algo", "diffsac"}, {"diffusion", json::object()}, {"temperature", {{"mode", "auto"}}}});
  EXPECT_DOUBLE_EQ(rc.agent.temperature.target_entropy, -20.0);
}

TEST(Config, AnnealStartsAtScaleOverDim) {
  const auto rc = resolve_config({{"algo", "sac"}, {"temperature", {{"mode", "anneal"}, {"c", 0.3}}}});
  EXPECT_DOUBLE_EQ(rc.agent.temperature.value, 0.15);
}

TEST(Config, Overrides) {
  json doc = {{"algo", "diffsac"}, {"diffusion", {{"K", 2}}}};
  apply_override(doc, "diffusion.K=8");
  apply_override(doc, "temperature.mode=anneal");
  apply_override(doc, "network.policy_hidden=[16,16]");
  const auto rc = resolve_config(doc);
  EXPECT_EQ(rc.agent.diffusion.K, 8);
  EXPECT_EQ(rc.agent.temperature.mode, TemperatureMode::anneal);
  EXPECT_EQ(rc.agent.policy_hidden, (std::vector<std::size_t>{16, 16}));
  EXPECT_THROW(apply_override(doc, "diffusion.KK=3"), ConfigError);
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
}

TEST(Config, WpoNeedsTanh) {
  EXPECT_THROW((void)resolve_config({{"algo", "wpo"}, {"network", {{"activation", "relu"}}}}), SchemaError);
}

TEST(Run, ZeroStepsGivesHeaderOnlyCsv) {
  auto doc = small_point_mass("sac");
  doc["training"]["total_env_steps"] = 0;
  const auto out = scratch("zero");
  (void)train_run(resolve_config(doc), out);
  EXPECT_EQ(slurp(out / "metrics.csv"), std::string(kMetricsHeader) + "\n");
  EXPECT_TRUE(fs::exists(out / "summary.json"));
  EXPECT_TRUE(fs::exists(out / "checkpoint.bin"));
}

TEST(Run, ManifestReproducesMetricsBitIdentically) {
  for (const std::string algo : {"sac", "diffppo"}) {
    const auto a = scratch("repro_a_" + algo);
    const auto b = scratch("repro_b_" + algo);
    (void)train_run(resolve_config(small_point_mass(algo)), a);
    const json manifest = json::parse(slurp(a / "manifest.json"));
    (void)train_run(resolve_config(manifest["config"]), b);
    EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv")) << algo;
  }
}

TEST(Run, MetricsColumnsAndRows) {
  const auto out = scratch("rows");
  (void)train_run(resolve_config(small_point_mass("diffsac")), out);
  std::ifstream in(out / "metrics.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 8);
    EXPECT_EQ(line.back(), ',');  // target_kl is empty off the bandit
  }
  EXPECT_EQ(rows, 3u);
}

TEST(Run, ResumeContinuesFromCheckpoint) {
  auto doc = small_point_mass("sac");
  doc["training"]["checkpoint_interval"] = 40;
  doc["training"]["total_env_steps"] = 80;
  const auto out = scratch("resume");
  (void)train_run(resolve_config(doc), out);
  doc["training"]["total_env_steps"] = 160;
  TrainOptions opt;
  opt.resume = true;
  const json s = train_run(resolve_config(doc), out, opt);
  EXPECT_EQ(s["env_steps"], 160);
  std::ifstream in(out / "metrics.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 1u + 4u);
}

TEST(Run, EvalOfCheckpointIsDeterministicAndUpdatesNothing) {
  const auto out = scratch("eval");
  (void)train_run(resolve_config(small_point_mass("ppo")), out);
  const Checkpoint ck = load_checkpoint(out / "checkpoint.bin");
  auto [rc, agent] = agent_from_checkpoint(ck);
  const auto r1 = evaluate_agent(agent, 7, Rng(5));
  const auto r2 = evaluate_agent(agent, 7, Rng(5));
  EXPECT_EQ(r1.returns, r2.returns);
  Checkpoint agent_only = ck;
  for (const char* key : {"run.config", "run.next_eval", "run.rows"}) agent_only.meta.erase(key);
  EXPECT_TRUE(encode_checkpoint(agent.save()) == encode_checkpoint(agent_only));
  EXPECT_THROW((void)evaluate_agent(agent, 0, Rng(5)), ContractViolation);
}

TEST(Run, UntrainedPointMassReturnIsNonPositive) {
  Agent agent(resolve_config(small_point_mass("diffsac")).agent);
  for (double r : evaluate_agent(agent, 20, Rng(1)).returns) EXPECT_LE(r, 0.0);
}

TEST(Run, BanditEvalReportsModeMasses) {
  const auto rc = resolve_config({{"algo", "diffsac"},
                                  {"env", {{"kind", "bimodal_bandit"}}},
                                  {"diffusion", {{"K", 2}}},
                                  {"network", {{"policy_hidden", {8}}, {"critic_hidden", {8}}}},
                                  {"temperature", {{"value", 1.0}}}});
  Agent agent(rc.agent);
  const auto r = evaluate_agent(agent, 4, Rng(2));
  ASSERT_EQ(r.mode_mass.size(), 2u);
  EXPECT_NEAR(r.mode_mass[0] + r.mode_mass[1], 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(r.target_kl));
  EXPECT_TRUE(std::isfinite(r.entropy_bound));
}

TEST(Sweep, RunsEveryValueAndSeed) {
  auto doc = small_point_mass("diffsac");
  doc["training"]["total_env_steps"] = 40;
  const auto out = scratch("sweep");
  const json runs = sweep_runs(doc, "diffusion.K", {"1", "3"}, 2, out);
  EXPECT_EQ(runs.size(), 4u);
  std::ifstream in(out / "aggregate.csv");
  std::string line;
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 5u);
  EXPECT_TRUE(fs::exists(out / "diffusion.K=3" / "seed1" / "metrics.csv"));
}

TEST(Sweep, TemperatureScaleValues) {
  auto doc = small_point_mass("sac");
  doc["training"]["total_env_steps"] = 20;
  doc["temperature"] = {{"mode", "anneal"}};
  const json runs = sweep_runs(doc, "temperature.c", {"0.1", "0.3"}, 1, scratch("sweep_c"));
  EXPECT_EQ(runs.size(), 2u);
}

TEST(Sweep, RefusesBadInput) {
  const auto doc = small_point_mass("sac");
  EXPECT_THROW((void)sweep_runs(doc, "diffusion.K", {}, 1, scratch("bad1")), ConfigError);
  EXPECT_THROW((void)sweep_runs(doc, "network.policy_hidden", {"3"}, 1, scratch("bad2")), ConfigError);
  EXPECT_THROW((void)sweep_runs(doc, "nope.x", {"3"}, 1, scratch("bad3")), ConfigError);
}
