#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddrl/error.hpp"
#include "ddrl/rl.hpp"
#include "ddrl/sft.hpp"

namespace ddrl::cli {

using json = nlohmann::json;

inline constexpr int kMetricsSchemaVersion = 1;

inline json report_json(const IterationReport& r, bool wallclock) {
  json j = {
      {"iter", r.iter},
      {"aborted", r.aborted},
      {"mean_reward", r.mean_reward},
      {"reward_std", r.reward_std},
      {"adv_min", r.adv_min},
      {"adv_max", r.adv_max},
      {"diffusion_loss", r.diffusion_loss ? json(*r.diffusion_loss) : json(nullptr)},
      {"policy_loss", r.policy_loss},
      {"loss", r.loss},
      {"holdout_loss", r.holdout_loss},
      {"holdout_ratio", r.holdout_ratio},
      {"grad_norm", r.grad_norm},
      {"step_kl_mean", r.step_kl_mean ? json(*r.step_kl_mean) : json(nullptr)},
      {"loss_evaluations", r.loss_evaluations},
      {"clamped", r.clamped},
      {"clipped", r.clipped},
  };
  if (r.aborted) j["abort_reason"] = r.abort_reason;
  if (wallclock) j["wallclock_ms"] = r.wallclock_ms;
  return j;
}

inline json report_json(const SftReport& r) {
  return json{{"iter", r.iter}, {"loss", r.loss}, {"grad_norm", r.grad_norm}};
}

/// JSONL metrics log. Line 1 is a header carrying schema_version; each later
/// line is one iteration record with an "iter" field.
class MetricsLog {
 public:
  /// Starts a fresh log, or with `resume_at` keeps the header and every record
  /// before that iteration and appends from there.
  MetricsLog(std::filesystem::path path, const json& header, std::optional<int> resume_at = std::nullopt)
      : path_(std::move(path)) {
    std::vector<std::string> keep;
    if (resume_at && std::filesystem::exists(path_)) {
      std::ifstream in(path_);
      std::string line;
      bool first = true;
      while (std::getline(in, line)) {
        if (first) {
          first = false;
          keep.push_back(line);
          continue;
        }
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("iter")) continue;
        if (j["iter"].get<int>() < *resume_at) keep.push_back(line);
      }
    }
    if (keep.empty()) {
      json h = header;
      h["schema_version"] = kMetricsSchemaVersion;
      keep.push_back(h.dump());
    }
    out_.open(path_, std::ios::binary | std::ios::trunc);
    if (!out_) throw Error("cannot write metrics log '" + path_.string() + "'");
    for (const auto& l : keep) out_ << l << '\n';
    out_.flush();
  }

  void write(const json& record) {
    out_ << record.dump() << '\n';
    out_.flush();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

/// Reads every record (header excluded) of a metrics log.
inline std::vector<json> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read metrics log '" + path.string() + "'");
  std::vector<json> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (first) {
      first = false;
      continue;
    }
    out.push_back(json::parse(line));
  }
  return out;
}

/// Two-column CSV projection (iter, field) of an RL metrics log; aborted
/// iterations are skipped.
inline void write_curve_csv(const std::vector<json>& records, const std::string& field,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "iter," << field << '\n';
  for (const json& r : records) {
    if (r.value("aborted", false) || !r.contains(field) || r[field].is_null()) continue;
    out << r["iter"].get<int>() << ',' << r[field].dump() << '\n';
  }
}

}  // namespace ddrl::cli
