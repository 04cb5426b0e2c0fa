#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddrl/cli/config.hpp"
#include "ddrl/error.hpp"
#include "ddrl/net.hpp"
#include "ddrl/rl.hpp"
#include "ddrl/sft.hpp"

namespace ddrl::cli {

inline constexpr int kCheckpointVersion = 1;

struct TrainingMeta {
  std::string stage;  // "sft" or "rl"
  int iteration = 0;
  std::optional<double> holdout_baseline;
  std::optional<double> last_holdout;

  bool operator==(const TrainingMeta&) const = default;
};

/// One JSON document: architecture, schedule, decimal parameter arrays and
/// whatever optimizer and training state is needed to resume.
struct Checkpoint {
  Architecture arch;
  ScheduleBlock schedule;
  std::vector<double> params;
  std::optional<AdamState> optimizer;
  std::optional<std::vector<double>> ema;
  std::optional<std::vector<double>> reference;
  std::optional<TrainingMeta> training;
  std::string config_hash;

  EpsNet net() const { return with_params(params); }
  EpsNet ema_net() const { return with_params(ema ? *ema : params); }

  EpsNet with_params(const std::vector<double>& p) const {
    EpsNet n(arch);
    n.set_params(p);
    return n;
  }
};

namespace detail {

inline json arch_json(const Architecture& a) {
  return json{{"data_dim", a.data_dim},
              {"num_conditions", a.num_conditions},
              {"steps", a.steps},
              {"hidden_width", a.hidden_width},
              {"hidden_layers", a.hidden_layers},
              {"time_frequencies", a.time_frequencies},
              {"cond_embed_dim", a.cond_embed_dim}};
}

inline Architecture arch_from(const json& j) {
  Architecture a;
  a.data_dim = j.at("data_dim").get<int>();
  a.num_conditions = j.at("num_conditions").get<int>();
  a.steps = j.at("steps").get<int>();
  a.hidden_width = j.at("hidden_width").get<int>();
  a.hidden_layers = j.at("hidden_layers").get<int>();
  a.time_frequencies = j.at("time_frequencies").get<int>();
  a.cond_embed_dim = j.at("cond_embed_dim").get<int>();
  a.validate();
  return a;
}

inline json opt_double(const std::optional<double>& v) {
  return v && std::isfinite(*v) ? json(*v) : json(nullptr);
}

inline std::optional<double> opt_double_from(const json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

}  // namespace detail

inline json to_json(const Checkpoint& c) {
  json j = {
      {"version", kCheckpointVersion},
      {"architecture", detail::arch_json(c.arch)},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"beta_min", c.schedule.beta_min},
        {"beta_max", c.schedule.beta_max},
        {"variance", c.schedule.variance}}},
      {"params", c.params},
  };
  if (c.optimizer) {
    const AdamState& a = *c.optimizer;
    j["optimizer"] = {{"lr", a.config.lr},
                      {"beta1", a.config.beta1},
                      {"beta2", a.config.beta2},
                      {"eps", a.config.eps},
                      {"step", a.step},
                      {"m", a.m},
                      {"v", a.v}};
  }
  if (c.ema) j["ema"] = *c.ema;
  if (c.reference) j["reference"] = *c.reference;
  if (c.training) {
    j["training"] = {{"stage", c.training->stage},
                     {"iteration", c.training->iteration},
                     {"holdout_baseline", detail::opt_double(c.training->holdout_baseline)},
                     {"last_holdout", detail::opt_double(c.training->last_holdout)}};
  }
  j["config_hash"] = c.config_hash;
  return j;
}

inline Checkpoint checkpoint_from_json(const json& j, const std::string& origin) {
  try {
    const int version = j.at("version").get<int>();
    if (version != kCheckpointVersion) {
      throw ArgumentError(origin + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint c;
    c.arch = detail::arch_from(j.at("architecture"));
    const json& s = j.at("schedule");
    c.schedule.steps = s.at("steps").get<int>();
    c.schedule.beta_min = s.at("beta_min").get<double>();
    c.schedule.beta_max = s.at("beta_max").get<double>();
    c.schedule.variance = s.at("variance").get<std::string>();
    c.params = j.at("params").get<std::vector<double>>();
    if (c.params.size() != c.arch.param_count()) throw ShapeError(origin + ": parameter count does not match architecture");
    if (j.contains("optimizer")) {
      const json& o = j["optimizer"];
      AdamState a(AdamConfig{o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                             o.at("eps").get<double>()},
                  0);
      a.step = o.at("step").get<std::int64_t>();
      a.m = o.at("m").get<std::vector<double>>();
      a.v = o.at("v").get<std::vector<double>>();
      if (a.m.size() != c.params.size() || a.v.size() != c.params.size()) {
        throw ShapeError(origin + ": optimizer moments do not match parameter count");
      }
      c.optimizer = std::move(a);
    }
    auto flat = [&](const char* key) -> std::optional<std::vector<double>> {
      if (!j.contains(key)) return std::nullopt;
      auto v = j[key].get<std::vector<double>>();
      if (v.size() != c.params.size()) throw ShapeError(origin + ": '" + key + "' does not match parameter count");
      return v;
    };
    c.ema = flat("ema");
    c.reference = flat("reference");
    if (j.contains("training")) {
      const json& t = j["training"];
      c.training = TrainingMeta{t.at("stage").get<std::string>(), t.at("iteration").get<int>(),
                                detail::opt_double_from(t.at("holdout_baseline")),
                                detail::opt_double_from(t.at("last_holdout"))};
    }
    c.config_hash = j.at("config_hash").get<std::string>();
    return c;
  } catch (const json::exception& e) {
    throw ArgumentError(origin + ": malformed checkpoint (" + e.what() + ")");
  }
}

inline std::string serialize(const Checkpoint& c) { return to_json(c).dump() + "\n"; }

/// Writes through a temporary file so an interrupted save never leaves a
/// truncated checkpoint behind.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint '" + tmp.string() + "'");
    out << serialize(c);
    if (!out) throw Error("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArgumentError("cannot open checkpoint '" + path.string() + "'");
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ArgumentError("'" + path.string() + "' is not valid JSON");
  return checkpoint_from_json(j, path.string());
}

/// Throws when a checkpoint cannot drive the configured task and schedule.
inline void check_compatible(const Checkpoint& c, const Architecture& arch, const ScheduleBlock& sched,
                             const std::string& field) {
  if (detail::arch_json(c.arch) != detail::arch_json(arch)) {
    throw ConfigError(field, "checkpoint architecture " + detail::arch_json(c.arch).dump() +
                                 " does not match the configured " + detail::arch_json(arch).dump());
  }
  if (c.schedule.steps != sched.steps || c.schedule.beta_min != sched.beta_min ||
      c.schedule.beta_max != sched.beta_max || c.schedule.variance != sched.variance) {
    throw ConfigError(field, "checkpoint schedule does not match the configured schedule");
  }
}

inline Checkpoint sft_checkpoint(const SftState& st, const RunConfig& cfg) {
  Checkpoint c;
  c.arch = st.net.architecture();
  c.schedule = cfg.schedule;
  c.params.assign(st.net.params().begin(), st.net.params().end());
  c.optimizer = st.adam;
  c.ema = std::vector<double>(st.ema.params().begin(), st.ema.params().end());
  c.training = TrainingMeta{"sft", st.iteration, std::nullopt, std::nullopt};
  c.config_hash = config_hash(cfg);
  return c;
}

inline Checkpoint rl_checkpoint(const TrainingState& st, const RunConfig& cfg) {
  Checkpoint c;
  c.arch = st.net.architecture();
  c.schedule = cfg.schedule;
  c.params.assign(st.net.params().begin(), st.net.params().end());
  c.optimizer = st.adam;
  c.ema = std::vector<double>(st.ema.params().begin(), st.ema.params().end());
  if (st.reference) c.reference = std::vector<double>(st.reference->params().begin(), st.reference->params().end());
  std::optional<double> last;
  if (!std::isnan(st.last_holdout)) last = st.last_holdout;
  c.training = TrainingMeta{"rl", st.iteration, st.holdout_baseline, last};
  c.config_hash = config_hash(cfg);
  return c;
}

/// EMA weights as a plain model checkpoint, for evaluation.
inline Checkpoint ema_only(const Checkpoint& full) {
  Checkpoint c;
  c.arch = full.arch;
  c.schedule = full.schedule;
  c.params = full.ema ? *full.ema : full.params;
  c.config_hash = full.config_hash;
  return c;
}

inline TrainingState restore_rl_state(const Checkpoint& c) {
  if (!c.training || c.training->stage != "rl" || !c.optimizer) {
    throw ArgumentError("checkpoint does not hold resumable RL state");
  }
  TrainingState st;
  st.net = c.net();
  st.ema = c.ema_net();
  if (c.reference) st.reference = c.with_params(*c.reference);
  st.adam = *c.optimizer;
  st.iteration = c.training->iteration;
  st.holdout_baseline = c.training->holdout_baseline;
  st.last_holdout = c.training->last_holdout.value_or(std::numeric_limits<double>::quiet_NaN());
  return st;
}

}  // namespace ddrl::cli
