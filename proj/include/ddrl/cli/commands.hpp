#pragma once

#include <pthread.h>
#include <signal.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include "ddrl/cli/checkpoint.hpp"
#include "ddrl/cli/config.hpp"
#include "ddrl/cli/metrics.hpp"
#include "ddrl/cli/pipeline.hpp"
#include "ddrl/cli/verify.hpp"
#include "ddrl/log.hpp"

namespace ddrl::cli {

namespace fs = std::filesystem;

/// Output file names inside output.dir.
struct OutputFiles {
  fs::path dir;
  fs::path sft_checkpoint() const { return dir / "sft.json"; }
  fs::path sft_metrics() const { return dir / "sft_metrics.jsonl"; }
  fs::path rl_state() const { return dir / "rl_state.json"; }
  fs::path rl_ema() const { return dir / "rl_ema.json"; }
  fs::path rl_metrics() const { return dir / "rl_metrics.jsonl"; }
  fs::path reward_curve() const { return dir / "reward_curve.csv"; }
  fs::path holdout_curve() const { return dir / "holdout_ratio.csv"; }
  fs::path eval_record() const { return dir / "eval.json"; }
  fs::path eval_density() const { return dir / "eval_density.csv"; }
  fs::path eval_target() const { return dir / "eval_target.csv"; }
};

inline OutputFiles prepare_output(const RunConfig& cfg) {
  OutputFiles out{cfg.output.dir};
  std::error_code ec;
  fs::create_directories(out.dir, ec);
  const fs::path probe = out.dir / ".write_probe";
  std::ofstream p(probe);
  if (ec || !p) throw ConfigError("output.dir", "'" + cfg.output.dir + "' is not writable");
  p.close();
  fs::remove(probe, ec);
  return out;
}

inline json run_header(const Context& ctx, const std::string& command) {
  return json{{"command", command},
              {"task", ctx.task->name()},
              {"config_hash", config_hash(ctx.cfg)},
              {"config", to_json(ctx.cfg)}};
}

inline void cmd_sft(const Context& ctx) {
  const OutputFiles out = prepare_output(ctx.cfg);
  MetricsLog log(out.sft_metrics(), run_header(ctx, "sft"));
  const SftState st = train_sft(ctx, initial_net(ctx), [&](const SftReport& r) {
    log.write(report_json(r));
    if ((r.iter + 1) % 250 == 0) log_info("sft iter " + std::to_string(r.iter + 1) + " loss " + std::to_string(r.loss));
  });
  save_checkpoint(sft_checkpoint(st, ctx.cfg), out.sft_checkpoint());
  std::cout << "sft: " << st.iteration << " iterations, checkpoint " << out.sft_checkpoint().string() << "\n";
}

inline void cmd_rl(const Context& ctx) {
  const OutputFiles out = prepare_output(ctx.cfg);
  const std::string hash = config_hash(ctx.cfg);
  std::optional<int> resume_at;
  TrainingState state;
  if (ctx.cfg.output.resume && fs::exists(out.rl_state())) {
    const Checkpoint c = load_checkpoint(out.rl_state());
    check_compatible(c, ctx.arch, ctx.cfg.schedule, "output.resume");
    if (c.config_hash != hash) {
      throw ConfigError("output.resume", "checkpoint was written under a different configuration (hash " +
                                             c.config_hash + ", now " + hash + ")");
    }
    state = restore_rl_state(c);
    resume_at = state.iteration;
    log_info("resuming at iteration " + std::to_string(state.iteration));
  } else {
    state = TrainingState::fresh(initial_net(ctx), ctx.cfg.rl);
  }

  Trainer trainer(ctx.cfg.rl, ctx.task, ctx.sched, std::move(state));
  RewardConnection conn = connect_rewards(ctx);
  MetricsLog log(out.rl_metrics(), run_header(ctx, "rl"), resume_at);
  const int every = ctx.cfg.output.checkpoint_every;
  trainer.run(*conn.client, [&](const IterationReport& r) {
    log.write(report_json(r, ctx.cfg.output.wallclock));
    const int done = trainer.state().iteration;
    if (done % 100 == 0) {
      log_info("rl iter " + std::to_string(done) + " mean_reward " + std::to_string(r.mean_reward) + " holdout_ratio " +
               std::to_string(r.holdout_ratio));
    }
    if (every > 0 && done % every == 0 && done < ctx.cfg.rl.iterations) {
      save_checkpoint(rl_checkpoint(trainer.state(), ctx.cfg), out.rl_state());
    }
  });
  const Checkpoint full = rl_checkpoint(trainer.state(), ctx.cfg);
  save_checkpoint(full, out.rl_state());
  save_checkpoint(ema_only(full), out.rl_ema());
  const std::vector<json> records = read_metrics(out.rl_metrics());
  write_curve_csv(records, "mean_reward", out.reward_curve());
  write_curve_csv(records, "holdout_ratio", out.holdout_curve());
  std::cout << "rl: " << trainer.state().iteration << " iterations, checkpoints " << out.rl_state().string() << ", "
            << out.rl_ema().string() << "\n";
}

inline EvalResult cmd_eval(const Context& ctx) {
  const OutputFiles out = prepare_output(ctx.cfg);
  const fs::path path = ctx.cfg.eval.checkpoint.empty() ? out.rl_ema() : fs::path(ctx.cfg.eval.checkpoint);
  const Checkpoint c = load_checkpoint(path);
  check_compatible(c, ctx.arch, ctx.cfg.schedule, "eval.checkpoint");
  const EvalBlock& e = ctx.cfg.eval;
  const EvalResult r =
      evaluate_model(c.ema_net(), *ctx.task, ctx.sched, ctx.cfg.rl.beta, e.samples, e.seed, e.guidance_scale, e.condition);
  json rec = to_json(r);
  rec["checkpoint"] = path.string();
  rec["task"] = ctx.task->name();
  rec["beta"] = ctx.cfg.rl.beta;
  rec["seed"] = e.seed;
  rec["guidance_scale"] = e.guidance_scale;
  {
    std::ofstream f(out.eval_record(), std::ios::binary | std::ios::trunc);
    f << rec.dump(2) << "\n";
    if (!f) throw Error("cannot write '" + out.eval_record().string() + "'");
  }
  {
    std::ofstream f(out.eval_density(), std::ios::binary | std::ios::trunc);
    r.histogram.density.write_csv(f);
  }
  if (r.target) {
    std::ofstream f(out.eval_target(), std::ios::binary | std::ios::trunc);
    r.target->write_csv(f);
  }
  std::cout << rec.dump(2) << "\n";
  return r;
}

/// Returns true when every check passed.
inline bool cmd_verify(const std::string& which, const Context& ctx) {
  SuiteResult res;
  if (which == "theorem1") {
    res = verify_theorem1(ctx, [](const std::string& s) { log_info("theorem1: " + s); });
  } else if (which == "kl_equivalence") {
    res = verify_kl_equivalence();
  } else if (which == "gradients") {
    res = verify_gradients();
  } else if (which == "advantages") {
    res = verify_advantages();
  } else {
    throw ArgumentError("verify: unknown suite '" + which + "' (theorem1, kl_equivalence, gradients, advantages)");
  }
  print(std::cout, res);
  return res.passed();
}

/// Every known task: the configured one with its parameters, others with
/// defaults.
inline reward::TaskRegistry serve_registry(const Context& ctx) {
  reward::TaskRegistry reg;
  for (const char* name : {"gauss1d", "gmm2d", "hackable2d"}) reg[name] = make_task(TaskBlock{name, json::object()});
  reg[ctx.task->name()] = ctx.task;
  return reg;
}

/// Runs the reward service until SIGINT/SIGTERM or a shutdown message.
inline void cmd_serve(const Context& ctx) {
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  // Block before any thread starts so only the watcher below receives them.
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  reward::ServerOptions opt;
  opt.bind = ctx.cfg.serve.bind;
  opt.pipeline = pipeline_options(ctx.cfg.reward);
  opt.pipeline.snapshot_path = ctx.cfg.serve.snapshot;
  reward::RewardServer server(serve_registry(ctx), opt);

  std::atomic<bool> done{false};
  std::thread watcher([&] {
    const timespec tick{0, 100'000'000};
    while (!done.load()) {
      const int sig = sigtimedwait(&signals, nullptr, &tick);
      if (sig == SIGINT || sig == SIGTERM) {
        log_info(std::string("received ") + (sig == SIGINT ? "SIGINT" : "SIGTERM") + ", draining");
        server.request_shutdown();
        return;
      }
    }
  });
  std::cout << "listening on " << server.endpoint() << std::endl;
  server.wait_for_shutdown_request();
  server.stop();
  done.store(true);
  watcher.join();
  std::cout << "reward service stopped" << std::endl;
}

}  // namespace ddrl::cli
