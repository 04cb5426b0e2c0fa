#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddrl/error.hpp"
#include "ddrl/net.hpp"
#include "ddrl/reward_service.hpp"
#include "ddrl/rl.hpp"
#include "ddrl/schedule.hpp"
#include "ddrl/sft.hpp"
#include "ddrl/tasks.hpp"

namespace ddrl::cli {

using json = nlohmann::json;

/// Every problem found while loading or validating a config, reported together.
struct ValidationError : Error {
  explicit ValidationError(std::vector<std::string> problems)
      : Error(join(problems)), problems(std::move(problems)) {}
  std::vector<std::string> problems;

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string out = "invalid configuration:";
    for (const auto& s : p) out += "\n  " + s;
    return out;
  }
};

struct TaskBlock {
  std::string name = "gauss1d";
  json params = json::object();
};

struct ModelBlock {
  std::uint64_t seed = 0;
  int hidden_width = 64;
  int hidden_layers = 3;
  int time_frequencies = 8;
  int cond_embed_dim = 8;
  std::string init_checkpoint;  // empty: fresh initialization from `seed`
};

struct ScheduleBlock {
  int steps = 20;
  double beta_min = 1e-3;
  double beta_max = 0.4;
  std::string variance = "beta";
};

struct RewardBlock {
  std::string mode = "in_process";  // or "remote"
  std::string endpoint = "127.0.0.1:7461";
  int workers = 2;
  int batch_window = 8;
  int queue_capacity = 1024;
};

struct ServeBlock {
  std::string bind = "127.0.0.1:7461";
  std::string snapshot;  // JSONL dump of the result store on shutdown
};

struct EvalBlock {
  std::string checkpoint;  // empty: <output.dir>/rl_ema.json
  int samples = 100000;
  std::uint64_t seed = 12345;
  double guidance_scale = 1.0;
  int condition = 0;
};

struct OutputBlock {
  std::string dir = "runs/default";
  bool wallclock = false;  // wallclock_ms in metrics breaks byte-identical reruns
  bool resume = false;
  int checkpoint_every = 500;
};

struct RunConfig {
  TaskBlock task;
  ModelBlock model;
  ScheduleBlock schedule;
  SftConfig sft;
  RLConfig rl;
  RewardBlock reward;
  ServeBlock serve;
  EvalBlock eval;
  OutputBlock output;
};

// ---------------------------------------------------------------------------
// JSON mapping.

inline json to_json(const RunConfig& c) {
  const RLConfig& r = c.rl;
  return json{
      {"task", {{"name", c.task.name}, {"params", c.task.params}}},
      {"model",
       {{"seed", c.model.seed},
        {"hidden_width", c.model.hidden_width},
        {"hidden_layers", c.model.hidden_layers},
        {"time_frequencies", c.model.time_frequencies},
        {"cond_embed_dim", c.model.cond_embed_dim},
        {"init_checkpoint", c.model.init_checkpoint}}},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"beta_min", c.schedule.beta_min},
        {"beta_max", c.schedule.beta_max},
        {"variance", c.schedule.variance}}},
      {"sft",
       {{"iterations", c.sft.iterations},
        {"batch", c.sft.batch},
        {"lr", c.sft.lr},
        {"cond_dropout", c.sft.cond_dropout},
        {"ema_decay", c.sft.ema_decay},
        {"seed", c.sft.seed}}},
      {"rl",
       {{"algorithm", std::string(to_string(r.algorithm))},
        {"objective", std::string(to_string(r.objective))},
        {"beta", r.beta},
        {"group_size", r.group_size},
        {"batch", r.batch},
        {"stride", r.stride},
        {"lr", r.lr},
        {"ema_decay", r.ema_decay},
        {"cond_dropout", r.cond_dropout},
        {"std_guard", r.std_guard},
        {"iterations", r.iterations},
        {"seed", r.seed},
        {"importance_sampling", r.importance_sampling},
        {"clip_range", r.clip_range},
        {"shared_initial_noise", r.shared_initial_noise},
        {"diffusion_weight", r.diffusion_weight},
        {"data_source", std::string(to_string(r.data_source))},
        {"synthetic_pool", r.synthetic_pool},
        {"z_samples", r.z_samples},
        {"holdout_every", r.holdout_every},
        {"fetch_timeout_ms", r.fetch_timeout_ms}}},
      {"reward",
       {{"mode", c.reward.mode},
        {"endpoint", c.reward.endpoint},
        {"workers", c.reward.workers},
        {"batch_window", c.reward.batch_window},
        {"queue_capacity", c.reward.queue_capacity}}},
      {"serve", {{"bind", c.serve.bind}, {"snapshot", c.serve.snapshot}}},
      {"eval",
       {{"checkpoint", c.eval.checkpoint},
        {"samples", c.eval.samples},
        {"seed", c.eval.seed},
        {"guidance_scale", c.eval.guidance_scale},
        {"condition", c.eval.condition}}},
      {"output",
       {{"dir", c.output.dir},
        {"wallclock", c.output.wallclock},
        {"resume", c.output.resume},
        {"checkpoint_every", c.output.checkpoint_every}}},
  };
}

namespace detail {

// Reads typed fields out of a JSON tree, collecting type errors by path.
class Reader {
 public:
  Reader(const json& root, std::vector<std::string>& problems) : root_(root), problems_(problems) {}

  template <class T>
  void get(const char* section, const char* key, T& out) {
    const std::string path = std::string(section) + "." + key;
    try {
      const json& v = root_.at(section).at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
        out = v.get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (v.is_number_float()) {
          const double d = v.get<double>();
          if (d != static_cast<double>(static_cast<T>(d))) throw ConfigError(path, "expected an integer");
          out = static_cast<T>(d);
        } else if (v.is_number_integer()) {
          if constexpr (std::is_unsigned_v<T>) {
            if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
              out = v.get<T>();
            } else {
              throw ConfigError(path, "must be >= 0");
            }
          } else {
            out = v.get<T>();
          }
        } else {
          throw ConfigError(path, "expected an integer");
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(path, "expected a number");
        out = v.get<T>();
      } else {
        if (!v.is_string()) throw ConfigError(path, "expected a string");
        out = v.get<std::string>();
      }
    } catch (const ConfigError& e) {
      problems_.push_back(e.what());
    }
  }

  template <class E, class Parse>
  void get_enum(const char* section, const char* key, E& out, Parse parse) {
    std::string s;
    const std::size_t before = problems_.size();
    get(section, key, s);
    if (problems_.size() != before) return;
    try {
      out = parse(s);
    } catch (const ConfigError& e) {
      problems_.push_back(e.what());
    }
  }

 private:
  const json& root_;
  std::vector<std::string>& problems_;
};

// Overlays `patch` onto `base`. Keys absent from `base` are reported, except
// below free-form subtrees such as task.params.
inline void overlay(json& base, const json& patch, const std::string& prefix, std::vector<std::string>& problems) {
  if (!patch.is_object()) {
    problems.push_back((prefix.empty() ? std::string("config") : prefix) + ": expected an object");
    return;
  }
  for (const auto& [k, v] : patch.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (path == "task.params") {
      if (!v.is_object()) {
        problems.push_back(path + ": expected an object");
      } else {
        base[k].merge_patch(v);
      }
      continue;
    }
    if (!base.contains(k)) {
      problems.push_back(path + ": unknown key");
      continue;
    }
    if (base[k].is_object()) {
      overlay(base[k], v, path, problems);
    } else {
      base[k] = v;
    }
  }
}

// "1e-4" -> number, "true" -> bool, anything unparseable -> string.
inline json parse_scalar(const std::string& s) {
  json v = json::parse(s, nullptr, false);
  if (v.is_discarded() || v.is_object() || v.is_array()) return json(s);
  return v;
}

// Sets a dotted path; unknown paths are reported.
inline void set_path(json& root, const std::string& dotted, const json& value, const std::string& origin,
                     std::vector<std::string>& problems) {
  json patch = value;
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  if (parts.size() < 2 || std::any_of(parts.begin(), parts.end(), [](const auto& p) { return p.empty(); })) {
    problems.push_back(dotted + ": malformed key (from " + origin + ")");
    return;
  }
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  std::vector<std::string> local;
  overlay(root, patch, "", local);
  for (auto& p : local) problems.push_back(p + " (from " + origin + ")");
}

}  // namespace detail

/// Reads a complete tree (defaults already merged in), appending type errors.
inline RunConfig read_config(const json& merged, std::vector<std::string>& problems) {
  RunConfig c;
  detail::Reader rd(merged, problems);
  rd.get("task", "name", c.task.name);
  c.task.params = merged.at("task").at("params");

  rd.get("model", "seed", c.model.seed);
  rd.get("model", "hidden_width", c.model.hidden_width);
  rd.get("model", "hidden_layers", c.model.hidden_layers);
  rd.get("model", "time_frequencies", c.model.time_frequencies);
  rd.get("model", "cond_embed_dim", c.model.cond_embed_dim);
  rd.get("model", "init_checkpoint", c.model.init_checkpoint);

  rd.get("schedule", "steps", c.schedule.steps);
  rd.get("schedule", "beta_min", c.schedule.beta_min);
  rd.get("schedule", "beta_max", c.schedule.beta_max);
  rd.get("schedule", "variance", c.schedule.variance);

  rd.get("sft", "iterations", c.sft.iterations);
  rd.get("sft", "batch", c.sft.batch);
  rd.get("sft", "lr", c.sft.lr);
  rd.get("sft", "cond_dropout", c.sft.cond_dropout);
  rd.get("sft", "ema_decay", c.sft.ema_decay);
  rd.get("sft", "seed", c.sft.seed);

  RLConfig& r = c.rl;
  rd.get_enum("rl", "algorithm", r.algorithm, parse_algorithm);
  rd.get_enum("rl", "objective", r.objective, parse_objective);
  rd.get("rl", "beta", r.beta);
  rd.get("rl", "group_size", r.group_size);
  rd.get("rl", "batch", r.batch);
  rd.get("rl", "stride", r.stride);
  rd.get("rl", "lr", r.lr);
  rd.get("rl", "ema_decay", r.ema_decay);
  rd.get("rl", "cond_dropout", r.cond_dropout);
  rd.get("rl", "std_guard", r.std_guard);
  rd.get("rl", "iterations", r.iterations);
  rd.get("rl", "seed", r.seed);
  rd.get("rl", "importance_sampling", r.importance_sampling);
  rd.get("rl", "clip_range", r.clip_range);
  rd.get("rl", "shared_initial_noise", r.shared_initial_noise);
  rd.get("rl", "diffusion_weight", r.diffusion_weight);
  rd.get_enum("rl", "data_source", r.data_source, parse_data_source);
  rd.get("rl", "synthetic_pool", r.synthetic_pool);
  rd.get("rl", "z_samples", r.z_samples);
  rd.get("rl", "holdout_every", r.holdout_every);
  rd.get("rl", "fetch_timeout_ms", r.fetch_timeout_ms);

  rd.get("reward", "mode", c.reward.mode);
  rd.get("reward", "endpoint", c.reward.endpoint);
  rd.get("reward", "workers", c.reward.workers);
  rd.get("reward", "batch_window", c.reward.batch_window);
  rd.get("reward", "queue_capacity", c.reward.queue_capacity);

  rd.get("serve", "bind", c.serve.bind);
  rd.get("serve", "snapshot", c.serve.snapshot);

  rd.get("eval", "checkpoint", c.eval.checkpoint);
  rd.get("eval", "samples", c.eval.samples);
  rd.get("eval", "seed", c.eval.seed);
  rd.get("eval", "guidance_scale", c.eval.guidance_scale);
  rd.get("eval", "condition", c.eval.condition);

  rd.get("output", "dir", c.output.dir);
  rd.get("output", "wallclock", c.output.wallclock);
  rd.get("output", "resume", c.output.resume);
  rd.get("output", "checkpoint_every", c.output.checkpoint_every);
  return c;
}

// ---------------------------------------------------------------------------
// Construction of runtime objects.

inline TaskPtr make_task(const TaskBlock& b) {
  const json& p = b.params;
  auto num = [&](const char* key, double def) {
    if (!p.contains(key)) return def;
    if (!p[key].is_number()) throw ConfigError(std::string("task.params.") + key, "expected a number");
    return p[key].get<double>();
  };
  auto allow_only = [&](std::initializer_list<const char*> keys) {
    for (const auto& [k, v] : p.items()) {
      if (std::find_if(keys.begin(), keys.end(), [&](const char* a) { return k == a; }) == keys.end()) {
        throw ConfigError("task.params." + k, "unknown parameter for task '" + b.name + "'");
      }
    }
  };
  if (b.name == "gauss1d") {
    allow_only({"m", "s"});
    Gauss1dParams gp;
    gp.m = num("m", gp.m);
    gp.s = num("s", gp.s);
    return std::make_shared<Gauss1d>(gp);
  }
  if (b.name == "gmm2d") {
    allow_only({"means", "component_std", "reward_std", "preferred"});
    Gmm2dParams gp;
    gp.component_std = num("component_std", gp.component_std);
    gp.reward_std = num("reward_std", gp.reward_std);
    try {
      if (p.contains("means")) gp.means = p["means"].get<std::vector<std::array<Point, 2>>>();
      if (p.contains("preferred")) gp.preferred = p["preferred"].get<std::vector<int>>();
    } catch (const json::exception& e) {
      throw ConfigError("task.params", std::string("malformed gmm2d parameters: ") + e.what());
    }
    return std::make_shared<Gmm2d>(gp);
  }
  if (b.name == "hackable2d") {
    allow_only({});
    return std::make_shared<Hackable2d>();
  }
  throw ConfigError("task.name", "unknown task '" + b.name + "' (gauss1d, gmm2d, hackable2d)");
}

inline NoiseSchedule make_schedule(const ScheduleBlock& b) {
  return NoiseSchedule::linear(b.steps, b.beta_min, b.beta_max, parse_variance_convention(b.variance));
}

inline Architecture make_architecture(const ModelBlock& m, const Task& task, int steps) {
  Architecture a;
  a.data_dim = task.dim();
  a.num_conditions = task.num_conditions();
  a.steps = steps;
  a.hidden_width = m.hidden_width;
  a.hidden_layers = m.hidden_layers;
  a.time_frequencies = m.time_frequencies;
  a.cond_embed_dim = m.cond_embed_dim;
  return a;
}

/// Semantic checks across blocks; every violation is collected.
inline std::vector<std::string> problems(const RunConfig& c) {
  std::vector<std::string> out;
  auto attempt = [&](auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      out.push_back(e.what());
    }
  };
  TaskPtr task;
  attempt([&] { task = make_task(c.task); });
  attempt([&] { make_schedule(c.schedule); });
  if (task) attempt([&] { make_architecture(c.model, *task, c.schedule.steps).validate(); });
  for (auto& p : c.sft.problems()) out.push_back(p);
  for (auto& p : c.rl.problems()) out.push_back(p);
  if (c.reward.mode != "in_process" && c.reward.mode != "remote") {
    out.push_back(ConfigError("reward.mode", "must be in_process or remote").what());
  }
  if (c.reward.mode == "remote") attempt([&] { reward::detail::parse_endpoint(c.reward.endpoint, "reward.endpoint"); });
  if (c.reward.workers < 1) out.push_back(ConfigError("reward.workers", "must be >= 1").what());
  if (c.reward.batch_window < 1) out.push_back(ConfigError("reward.batch_window", "must be >= 1").what());
  if (c.reward.queue_capacity < 1) out.push_back(ConfigError("reward.queue_capacity", "must be >= 1").what());
  attempt([&] { reward::detail::parse_endpoint(c.serve.bind, "serve.bind"); });
  if (c.eval.samples < 1) out.push_back(ConfigError("eval.samples", "must be >= 1").what());
  if (task && (c.eval.condition < 0 || c.eval.condition >= task->num_conditions())) {
    out.push_back(ConfigError("eval.condition", "outside the task's condition range").what());
  }
  if (c.output.dir.empty()) out.push_back(ConfigError("output.dir", "must not be empty").what());
  if (c.output.checkpoint_every < 0) out.push_back(ConfigError("output.checkpoint_every", "must be >= 0").what());
  return out;
}

inline void validate(const RunConfig& c) {
  auto p = problems(c);
  if (!p.empty()) throw ValidationError(std::move(p));
}

/// Builds a RunConfig from a JSON tree layered over the defaults. Collects
/// every unknown key, type error and range violation before throwing.
inline RunConfig from_json(const json& tree) {
  std::vector<std::string> found;
  json merged = to_json(RunConfig{});
  detail::overlay(merged, tree, "", found);
  RunConfig c = read_config(merged, found);
  for (auto& p : problems(c)) found.push_back(std::move(p));
  if (!found.empty()) throw ValidationError(std::move(found));
  return c;
}

/// Hash of the settings that determine a run's numbers. Iteration budgets,
/// transport and output settings are excluded so a resumed or extended run
/// keeps its hash.
inline std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("reward");
  j.erase("serve");
  j.erase("eval");
  j.erase("output");
  j["sft"].erase("iterations");
  j["rl"].erase("iterations");
  j["rl"].erase("fetch_timeout_ms");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Layered loading: file < environment < flags.

inline constexpr const char* kEnvPrefix = "DDRL__";

/// DDRL__RL__LR=1e-4 -> {"rl.lr", "1e-4"}. Sections and keys are lowercased.
inline std::vector<std::pair<std::string, std::string>> env_overrides(char** envp) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!envp) return out;
  const std::string prefix = kEnvPrefix;
  for (char** e = envp; *e; ++e) {
    const std::string kv = *e;
    if (kv.rfind(prefix, 0) != 0) continue;
    const auto eq = kv.find('=');
    if (eq == std::string::npos) continue;
    std::string key = kv.substr(prefix.size(), eq - prefix.size());
    std::string dotted;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key.compare(i, 2, "__") == 0) {
        dotted += '.';
        ++i;
      } else {
        dotted += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    out.emplace_back(dotted, kv.substr(eq + 1));
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline json read_json_file(const std::string& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw ConfigError(field, "cannot open '" + path + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(field, "'" + path + "' is not valid JSON");
  return j;
}

/// Loads and validates. `flags` are "a.b=v" strings (leading dashes removed).
inline RunConfig load_config(const std::string& file, const std::vector<std::pair<std::string, std::string>>& env,
                             const std::vector<std::pair<std::string, std::string>>& flags) {
  std::vector<std::string> problems_found;
  json tree = to_json(RunConfig{});
  if (!file.empty()) {
    try {
      detail::overlay(tree, read_json_file(file, "--config"), "", problems_found);
    } catch (const ConfigError& e) {
      throw ValidationError({e.what()});
    }
  }
  for (const auto& [k, v] : env) {
    std::string var = kEnvPrefix;
    for (char ch : k) var += ch == '.' ? std::string("__") : std::string(1, static_cast<char>(std::toupper(ch)));
    detail::set_path(tree, k, detail::parse_scalar(v), var, problems_found);
  }
  for (const auto& [k, v] : flags) detail::set_path(tree, k, detail::parse_scalar(v), "--" + k, problems_found);
  RunConfig c = read_config(tree, problems_found);
  for (auto& p : problems(c)) problems_found.push_back(std::move(p));
  if (!problems_found.empty()) throw ValidationError(std::move(problems_found));
  return c;
}

}  // namespace ddrl::cli
