#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dmerl/algorithms.hpp"
#include "dmerl/errors.hpp"

namespace dmerl {

using json = nlohmann::json;

inline constexpr int kConfigFormatVersion = 1;

/// Every violated field of a config document.
class SchemaError : public ConfigError {
 public:
  explicit SchemaError(std::vector<std::string> violations)
      : ConfigError(join(violations)), violations_(std::move(violations)) {}

  [[nodiscard]] const std::vector<std::string>& violations() const { return violations_; }

 private:
  static std::string join(const std::vector<std::string>& v) {
    std::string s = "invalid config (" + std::to_string(v.size()) + " problem" + (v.size() == 1 ? "" : "s") + "):";
    for (const auto& e : v) s += "\n  " + e;
    return s;
  }
  std::vector<std::string> violations_;
};

/// A validated run: agent settings plus the run loop's own knobs.
struct RunConfig {
  AgentConfig agent;
  std::size_t total_env_steps = 100000;
  std::size_t eval_interval = 5000;
  std::size_t eval_episodes = 10;
  std::size_t checkpoint_interval = 0;  // 0: only at the end
  std::string out;
  json resolved;  // full document with every default filled in
};

namespace config_detail {

enum class Kind { integer, number, boolean, string, int_list, number_list };

/// Returns an error message or nothing.
using Check = std::function<std::optional<std::string>(const json&)>;

struct Field {
  std::string path;  // dotted
  Kind kind;
  json fallback;     // null: resolved later or optional
  bool nullable = false;
  Check check = nullptr;
};

inline std::string num(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

inline Check at_least(double lo) {
  return [lo](const json& v) -> std::optional<std::string> {
    if (v.get<double>() < lo) return "must be >= " + num(lo);
    return std::nullopt;
  };
}

inline Check positive() {
  return [](const json& v) -> std::optional<std::string> {
    if (!(v.get<double>() > 0.0)) return "must be > 0";
    return std::nullopt;
  };
}

inline Check interval(double lo, double hi, bool open_lo) {
  return [=](const json& v) -> std::optional<std::string> {
    const double x = v.get<double>();
    if ((open_lo ? !(x > lo) : !(x >= lo)) || !(x <= hi))
      return std::string("must lie in ") + (open_lo ? "(" : "[") + num(lo) + ", " + num(hi) + "]";
    return std::nullopt;
  };
}

inline Check one_of(std::vector<std::string> names) {
  return [names](const json& v) -> std::optional<std::string> {
    const auto s = v.get<std::string>();
    for (const auto& n : names)
      if (n == s) return std::nullopt;
    std::string all;
    for (const auto& n : names) all += (all.empty() ? "" : "|") + n;
    return "must be one of " + all + " (got '" + s + "')";
  };
}

inline Check non_empty_positive_list() {
  return [](const json& v) -> std::optional<std::string> {
    if (v.empty()) return "must be non-empty";
    for (const auto& x : v)
      if (x.get<long long>() < 1) return "entries must be >= 1";
    return std::nullopt;
  };
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"format_version", Kind::integer, kConfigFormatVersion, false,
       [](const json& v) -> std::optional<std::string> {
         if (v.get<long long>() != kConfigFormatVersion)
           return "unsupported version (expected " + std::to_string(kConfigFormatVersion) + ")";
         return std::nullopt;
       }},
      {"algo", Kind::string, nullptr, false, one_of({"sac", "ppo", "wpo", "diffsac", "diffppo", "diffwpo"})},
      {"env.kind", Kind::string, "point_mass", false, one_of({"bimodal_bandit", "point_mass", "pendulum"})},
      {"env.horizon", Kind::integer, nullptr, true, at_least(0)},
      {"env.dim", Kind::integer, 2, false, at_least(1)},
      {"env.bounds", Kind::number_list, nullptr, true,
       [](const json& v) -> std::optional<std::string> {
         if (v.size() != 2) return "must be [lo, hi]";
         if (!(v[0].get<double>() < v[1].get<double>())) return "lo must be < hi";
         return std::nullopt;
       }},
      {"env.dynamics_noise", Kind::number, 0.0, false, at_least(0.0)},
      {"env.mode_center", Kind::number, 1.0, false, positive()},
      {"env.mode_std", Kind::number, 0.3, false, positive()},
      {"diffusion.K", Kind::integer, 4, false, at_least(1)},
      {"diffusion.nu", Kind::number, 2.2, false, positive()},
      {"diffusion.beta_min", Kind::number, 0.05, false, positive()},
      {"diffusion.beta_max", Kind::number, 3.0, false, positive()},
      {"network.policy_hidden", Kind::int_list, json::array({128, 128}), false, non_empty_positive_list()},
      {"network.critic_hidden", Kind::int_list, json::array({256, 256}), false, non_empty_positive_list()},
      {"network.activation", Kind::string, "tanh", false, one_of({"tanh", "relu", "identity"})},
      {"training.total_env_steps", Kind::integer, 100000, false, at_least(0)},
      {"training.eval_interval", Kind::integer, 5000, false, at_least(1)},
      {"training.eval_episodes", Kind::integer, 10, false, at_least(1)},
      {"training.checkpoint_interval", Kind::integer, 0, false, at_least(0)},
      {"training.seed", Kind::integer, 0, false, at_least(0)},
      {"training.learning_rate", Kind::number, 3e-4, false, positive()},
      {"training.learning_rate_grid", Kind::number_list, json::array({3e-4, 1e-3, 3e-3}), false, nullptr},
      {"training.gamma", Kind::number, nullptr, true, interval(0.0, 1.0, true)},
      {"training.batch_size", Kind::integer, 256, false, at_least(1)},
      {"training.replay_capacity", Kind::integer, 1000000, false, at_least(1)},
      {"training.learning_starts", Kind::integer, 1000, false, at_least(0)},
      {"training.updates_per_transition", Kind::number, 1.0, false, at_least(0.0)},
      {"training.polyak", Kind::number, 0.005, false, interval(0.0, 1.0, true)},
      {"training.stratify_k", Kind::boolean, false, false, nullptr},
      {"training.n_envs", Kind::integer, 8, false, at_least(1)},
      {"training.episodes_per_collection", Kind::integer, 1, false, at_least(1)},
      {"training.epochs", Kind::integer, 10, false, at_least(1)},
      {"training.scale_epochs_with_k", Kind::boolean, true, false, nullptr},
      {"training.minibatch_size", Kind::integer, 256, false, at_least(1)},
      {"training.clip_eps", Kind::number, 0.2, false, positive()},
      {"training.gae_lambda", Kind::number, 0.95, false, interval(0.0, 1.0, false)},
      {"training.env_only_reward", Kind::boolean, false, false, nullptr},
      {"training.squash_correction", Kind::boolean, true, false, nullptr},
      {"temperature.mode", Kind::string, "fixed", false, one_of({"fixed", "anneal", "auto"})},
      {"temperature.value", Kind::number, 0.1, false, at_least(0.0)},
      {"temperature.c", Kind::number, 0.3, false, at_least(0.0)},
      {"temperature.halving_period", Kind::number, 0.1, false, interval(0.0, 1.0, true)},
      {"temperature.initial", Kind::number, 0.1, false, positive()},
      {"temperature.target_entropy_scale", Kind::number, nullptr, true, nullptr},
      {"temperature.dual_step", Kind::number, 1e-3, false, positive()},
      {"out", Kind::string, nullptr, true, nullptr},
  };
  return f;
}

inline json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::stringstream ss(dotted);
  std::string part;
  while (std::getline(ss, part, '.')) p += "/" + part;
  return json::json_pointer(p);
}

inline const Field* find_field(const std::string& path) {
  for (const auto& f : fields())
    if (f.path == path) return &f;
  return nullptr;
}

inline bool has_section(const std::string& name) {
  for (const auto& f : fields())
    if (f.path.rfind(name + ".", 0) == 0) return true;
  return false;
}

inline std::string kind_name(Kind k) {
  switch (k) {
    case Kind::integer: return "an integer";
    case Kind::number: return "a number";
    case Kind::boolean: return "a boolean";
    case Kind::string: return "a string";
    case Kind::int_list: return "a list of integers";
    case Kind::number_list: return "a list of numbers";
  }
  return "?";
}

inline bool kind_matches(Kind k, const json& v) {
  switch (k) {
    case Kind::integer: return v.is_number_integer() || (v.is_number_float() && std::floor(v.get<double>()) == v.get<double>());
    case Kind::number: return v.is_number();
    case Kind::boolean: return v.is_boolean();
    case Kind::string: return v.is_string();
    case Kind::int_list:
      if (!v.is_array()) return false;
      for (const auto& x : v)
        if (!x.is_number_integer()) return false;
      return true;
    case Kind::number_list:
      if (!v.is_array()) return false;
      for (const auto& x : v)
        if (!x.is_number()) return false;
      return true;
  }
  return false;
}

inline std::size_t as_size(const json& v) { return static_cast<std::size_t>(v.get<double>()); }

}  // namespace config_detail

/// Parses "value" in a --set override: JSON when it parses, a bare string otherwise.
inline json parse_override_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

/// True when `path` names a scalar field of the schema.
inline bool is_scalar_path(const std::string& path) {
  const auto* f = config_detail::find_field(path);
  return f && f->kind != config_detail::Kind::int_list && f->kind != config_detail::Kind::number_list;
}

/// Applies `path=value` to a config document. Unknown paths are refused.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form path=value");
  const std::string path = assignment.substr(0, eq);
  if (!config_detail::find_field(path)) throw ConfigError("override path '" + path + "' does not address a config field");
  doc[config_detail::pointer(path)] = parse_override_value(assignment.substr(eq + 1));
}

/// Validates a config document, fills defaults and builds the run settings.
/// Throws SchemaError listing every violated field; `warnings` collects
/// non-fatal notes.
inline RunConfig resolve_config(const json& doc, std::vector<std::string>* warnings = nullptr) {
  using namespace config_detail;
  std::vector<std::string> errors;
  auto warn = [&](std::string w) {
    if (warnings) warnings->push_back(std::move(w));
  };
  if (!doc.is_object()) throw SchemaError({"<root>: must be a JSON object"});

  // Unknown keys anywhere in the document.
  for (const auto& [key, value] : doc.items()) {
    if (value.is_object()) {
      if (!has_section(key)) {
        errors.push_back(key + ": unknown section");
        continue;
      }
      for (const auto& [sub, _] : value.items())
        if (!find_field(key + "." + sub)) errors.push_back(key + "." + sub + ": unknown field");
    } else if (!find_field(key)) {
      errors.push_back(key + (has_section(key) ? ": must be an object" : ": unknown field"));
    }
  }

  const std::string algo_name = doc.contains("algo") && doc["algo"].is_string() ? doc["algo"].get<std::string>() : "";
  const bool diffusion_algo = algo_name.rfind("diff", 0) == 0;
  const bool has_diffusion = doc.contains("diffusion");
  if (!doc.contains("algo")) errors.push_back("algo: required field is missing");
  if (diffusion_algo && !has_diffusion) errors.push_back("diffusion: section required for algo '" + algo_name + "'");

  json resolved = json::object();
  for (const auto& f : fields()) {
    const auto ptr = pointer(f.path);
    const bool present = doc.contains(ptr) && !doc[ptr].is_null();
    if (f.path.rfind("diffusion.", 0) == 0 && !diffusion_algo) continue;
    if (!present) {
      if (f.fallback.is_null() && !f.nullable) continue;  // reported above when required
      resolved[ptr] = f.fallback;
      continue;
    }
    const json& v = doc[ptr];
    if (!kind_matches(f.kind, v)) {
      errors.push_back(f.path + ": must be " + kind_name(f.kind) + " (got " + v.dump() + ")");
      continue;
    }
    if (f.check) {
      if (auto msg = f.check(v)) {
        errors.push_back(f.path + ": " + *msg);
        continue;
      }
    }
    resolved[ptr] = v;
  }
  if (has_diffusion && !diffusion_algo && !algo_name.empty())
    warn("diffusion section ignored: algo '" + algo_name + "' does not use a diffusion policy");

  if (errors.empty()) {
    const auto& e = resolved["env"];
    const std::string kind = e["kind"];
    if (kind == "bimodal_bandit" && !e["horizon"].is_null() && e["horizon"].get<long long>() != 0)
      errors.push_back("env.horizon: must be 0 for bimodal_bandit");
    if (kind != "bimodal_bandit" && !e["horizon"].is_null() && e["horizon"].get<long long>() < 1)
      errors.push_back("env.horizon: must be >= 1 for " + kind);
    if (kind != "point_mass" && doc.contains(pointer("env.dim")))
      errors.push_back("env.dim: only point_mass has a configurable dimension");
    if (diffusion_algo && resolved["diffusion"]["beta_min"].get<double>() > resolved["diffusion"]["beta_max"].get<double>())
      errors.push_back("diffusion.beta_min: must be <= diffusion.beta_max");
    if ((algo_name == "wpo" || algo_name == "diffwpo") && resolved["network"]["activation"] != "tanh")
      errors.push_back("network.activation: wpo and diffwpo need tanh");
  }
  if (!errors.empty()) throw SchemaError(std::move(errors));

  RunConfig rc;
  AgentConfig& a = rc.agent;
  a.algo = algo_from_string(algo_name);
  auto& e = resolved["env"];
  const std::string kind = e["kind"];
  if (kind == "bimodal_bandit") {
    a.env = EnvSpec::bimodal_bandit(e["mode_center"], e["mode_std"]);
    e.erase("dim");
  } else if (kind == "point_mass") {
    a.env = EnvSpec::point_mass(as_size(e["dim"]));
  } else {
    a.env = EnvSpec::pendulum();
    e.erase("dim");
  }
  if (kind != "bimodal_bandit") {
    e.erase("mode_center");
    e.erase("mode_std");
  }
  if (!e["horizon"].is_null()) a.env.horizon = e["horizon"].get<int>();
  e["horizon"] = a.env.horizon;
  if (!e["bounds"].is_null())
    a.env.bounds = ActionBox::uniform(a.env.action_dim, e["bounds"][0].get<double>(), e["bounds"][1].get<double>());
  e["bounds"] = json::array({a.env.bounds.lo[0], a.env.bounds.hi[0]});
  a.env.dynamics_noise = e["dynamics_noise"];

  if (diffusion_algo) {
    const auto& d = resolved["diffusion"];
    a.diffusion.K = d["K"].get<int>();
    a.diffusion.nu = d["nu"];
    a.diffusion.beta_min = d["beta_min"];
    a.diffusion.beta_max = d["beta_max"];
  }

  const auto& n = resolved["network"];
  a.policy_hidden = n["policy_hidden"].get<std::vector<std::size_t>>();
  a.critic_hidden = n["critic_hidden"].get<std::vector<std::size_t>>();
  a.activation = activation_from_string(n["activation"].get<std::string>());

  auto& t = resolved["training"];
  a.seed = t["seed"].get<std::uint64_t>();
  a.learning_rate = t["learning_rate"];
  if (t["gamma"].is_null()) t["gamma"] = default_gamma(a.algo, diffusion_algo ? a.diffusion.K : 1);
  a.gamma = t["gamma"];
  a.batch_size = as_size(t["batch_size"]);
  a.replay_capacity = as_size(t["replay_capacity"]);
  a.learning_starts = as_size(t["learning_starts"]);
  a.updates_per_transition = t["updates_per_transition"];
  a.polyak = t["polyak"];
  a.stratify_k = t["stratify_k"];
  a.n_envs = as_size(t["n_envs"]);
  a.episodes_per_collection = as_size(t["episodes_per_collection"]);
  a.epochs = as_size(t["epochs"]);
  a.scale_epochs_with_k = t["scale_epochs_with_k"];
  a.minibatch_size = as_size(t["minibatch_size"]);
  a.clip_eps = t["clip_eps"];
  a.gae_lambda = t["gae_lambda"];
  a.env_only_reward = t["env_only_reward"];
  a.squash_correction = t["squash_correction"];
  rc.total_env_steps = as_size(t["total_env_steps"]);
  rc.eval_interval = as_size(t["eval_interval"]);
  rc.eval_episodes = as_size(t["eval_episodes"]);
  rc.checkpoint_interval = as_size(t["checkpoint_interval"]);

  auto& temp = resolved["temperature"];
  const std::string mode = temp["mode"];
  if (temp["target_entropy_scale"].is_null()) temp["target_entropy_scale"] = diffusion_algo ? -10.0 : -1.0;
  if (mode == "fixed") {
    a.temperature = TemperatureController::fixed(temp["value"]);
  } else if (mode == "anneal") {
    a.temperature = TemperatureController::annealed(temp["c"], a.env.action_dim, temp["halving_period"]);
  } else {
    a.temperature = TemperatureController::automatic(
        temp["initial"], temp["target_entropy_scale"].get<double>() * static_cast<double>(a.env.action_dim),
        temp["dual_step"]);
  }
  if (!resolved["out"].is_null()) rc.out = resolved["out"].get<std::string>();

  try {
    a.validate();
  } catch (const ConfigError& err) {
    throw SchemaError({err.what()});
  }
  rc.resolved = std::move(resolved);
  return rc;
}

}  // namespace dmerl
