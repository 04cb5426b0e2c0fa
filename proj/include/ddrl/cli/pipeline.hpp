#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ddrl/cli/checkpoint.hpp"
#include "ddrl/cli/config.hpp"
#include "ddrl/diffusion.hpp"
#include "ddrl/oracle.hpp"
#include "ddrl/reward_service.hpp"
#include "ddrl/rl.hpp"
#include "ddrl/sft.hpp"

namespace ddrl::cli {

/// Runtime objects derived from a validated RunConfig.
struct Context {
  RunConfig cfg;
  TaskPtr task;
  NoiseSchedule sched;
  Architecture arch;

  explicit Context(RunConfig c)
      : cfg(std::move(c)), task(make_task(cfg.task)), sched(make_schedule(cfg.schedule)),
        arch(make_architecture(cfg.model, *task, cfg.schedule.steps)) {}
};

/// model.init_checkpoint when set, otherwise a fresh net from model.seed.
inline EpsNet initial_net(const Context& ctx) {
  if (ctx.cfg.model.init_checkpoint.empty()) return EpsNet::initialized(ctx.arch, ctx.cfg.model.seed);
  const Checkpoint c = load_checkpoint(ctx.cfg.model.init_checkpoint);
  check_compatible(c, ctx.arch, ctx.cfg.schedule, "model.init_checkpoint");
  // Start from the averaged weights, the same ones eval would score.
  return c.ema_net();
}

inline SftState train_sft(const Context& ctx, const EpsNet& init,
                          const std::function<void(const SftReport&)>& on_report = {}) {
  SftState st = sft_init(init, ctx.cfg.sft);
  run_sft(st, *ctx.task, ctx.sched, ctx.cfg.sft, on_report);
  return st;
}

/// A reward client plus whatever it needs kept alive.
struct RewardConnection {
  std::shared_ptr<reward::ScoringPipeline> pipeline;  // in-process only
  std::unique_ptr<reward::RewardClient> client;
};

inline reward::PipelineOptions pipeline_options(const RewardBlock& r) {
  reward::PipelineOptions o;
  o.workers = r.workers;
  o.batch_window = r.batch_window;
  o.queue_capacity = static_cast<std::size_t>(r.queue_capacity);
  return o;
}

inline RewardConnection connect_rewards(const Context& ctx) {
  RewardConnection conn;
  if (ctx.cfg.reward.mode == "remote") {
    conn.client = std::make_unique<reward::TcpClient>(ctx.cfg.reward.endpoint);
  } else {
    conn.pipeline = std::make_shared<reward::ScoringPipeline>(reward::TaskRegistry{{ctx.task->name(), ctx.task}},
                                                              pipeline_options(ctx.cfg.reward));
    conn.client = std::make_unique<reward::InProcessClient>(conn.pipeline);
  }
  return conn;
}

struct EvalResult {
  int samples = 0;
  int condition = 0;
  std::vector<double> mean;
  std::vector<double> variance;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  Histogram histogram;
  std::optional<GridDensity> target;  // tilted target on the task grid
  std::optional<double> kl;           // KL(histogram || target)
  std::vector<double> target_mean;
  std::vector<double> target_variance;
};

/// Samples `m` terminal points (stochastic chain, noiseless final step),
/// scores them, and compares their histogram with the tilted target at `beta`.
inline EvalResult evaluate_model(const EpsNet& net, const Task& task, const NoiseSchedule& sched, double beta, int m,
                                 std::uint64_t seed, double guidance_scale = 1.0, int condition = 0) {
  if (m < 1) throw ArgumentError("eval: sample count M must be >= 1");
  task.check_condition(condition);
  SamplerOptions opt;
  opt.guidance_scale = guidance_scale;
  const std::vector<Point> xs = sample_endpoints(net, condition, m, sched, opt, seed);

  EvalResult r;
  r.samples = m;
  r.condition = condition;
  const int d = task.dim();
  r.mean.assign(d, 0.0);
  r.variance.assign(d, 0.0);
  for (const Point& x : xs) {
    for (int k = 0; k < d; ++k) r.mean[k] += x[k];
  }
  for (double& v : r.mean) v /= m;
  for (const Point& x : xs) {
    for (int k = 0; k < d; ++k) r.variance[k] += (x[k] - r.mean[k]) * (x[k] - r.mean[k]);
  }
  for (double& v : r.variance) v /= m;

  double rs = 0.0, rq = 0.0;
  for (const Point& x : xs) rs += task.reward(x, condition);
  r.mean_reward = rs / m;
  for (const Point& x : xs) {
    const double e = task.reward(x, condition) - r.mean_reward;
    rq += e * e;
  }
  r.reward_std = std::sqrt(rq / m);

  r.histogram = histogram_density(xs, task.grid());
  try {
    r.target = reference_target(task, condition, beta);
    r.kl = kl_grid(r.histogram.density, *r.target);
    for (int k = 0; k < d; ++k) {
      r.target_mean.push_back(r.target->mean(k));
      r.target_variance.push_back(r.target->variance(k));
    }
  } catch (const DegenerateTargetError& e) {
    log_warning(std::string("eval: no tilted target (") + e.what() + ")");
  }
  return r;
}

inline json to_json(const EvalResult& r) {
  auto opt_vec = [](const std::vector<double>& v) { return v.empty() ? json(nullptr) : json(v); };
  return json{{"samples", r.samples},
              {"condition", r.condition},
              {"mean", r.mean},
              {"variance", r.variance},
              {"mean_reward", r.mean_reward},
              {"reward_std", r.reward_std},
              {"outside_fraction", r.histogram.outside_fraction()},
              {"kl", r.kl ? json(*r.kl) : json(nullptr)},
              {"target_mean", opt_vec(r.target_mean)},
              {"target_variance", opt_vec(r.target_variance)}};
}

}  // namespace ddrl::cli
