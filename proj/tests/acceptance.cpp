// Acceptance report: one PASS/FAIL line per criterion. With no arguments all
// ten run; otherwise only the listed criterion numbers.
#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "ddrl/cli/commands.hpp"

namespace {

using namespace ddrl;
using namespace ddrl::cli;
using namespace std::chrono_literals;
namespace fs = std::filesystem;
using Flags = std::vector<std::pair<std::string, std::string>>;

void progress(const std::string& s) { std::cerr << "  .. " << s << std::endl; }

Context context(const Flags& flags) { return Context(load_config("", {}, flags)); }

struct RunOutcome {
  TrainingState state;
  std::vector<IterationReport> reports;
};

RunOutcome train(const Context& ctx, const EpsNet& init, const std::string& label) {
  progress(label + ": " + std::to_string(ctx.cfg.rl.iterations) + " iterations of " + std::string(to_string(ctx.cfg.rl.algorithm)));
  Trainer trainer(ctx.cfg.rl, ctx.task, ctx.sched, TrainingState::fresh(init, ctx.cfg.rl));
  RewardConnection conn = connect_rewards(ctx);
  std::vector<IterationReport> reports;
  trainer.run(*conn.client, [&](const IterationReport& r) { reports.push_back(r); });
  return {trainer.state(), std::move(reports)};
}

EvalResult eval_ema(const Context& ctx, const TrainingState& st) {
  return evaluate_model(st.ema, *ctx.task, ctx.sched, ctx.cfg.rl.beta, ctx.cfg.eval.samples, ctx.cfg.eval.seed, 1.0,
                        ctx.cfg.eval.condition);
}

double tail_mean_reward(const std::vector<IterationReport>& reps, std::size_t window) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = reps.size() > window ? reps.size() - window : 0; i < reps.size(); ++i) {
    if (reps[i].aborted) continue;
    sum += reps[i].mean_reward;
    ++n;
  }
  return n ? sum / static_cast<double>(n) : NAN;
}

void hackable_band(SuiteResult& res, const std::string& who, const EvalResult& ev, const GaussianTarget& target) {
  for (int k = 0; k < 2; ++k) {
    const std::string ax = "[" + std::to_string(k) + "]";
    res.below(who + " sample mean" + ax + " error", std::abs(ev.mean[k] - target.mean[k]), 0.08);
    res.below(who + " sample variance" + ax + " error", std::abs(ev.variance[k] - target.variance[k]), 0.15);
  }
}

SuiteResult criterion1() { return verify_theorem1(context({}), progress); }

SuiteResult criterion2() { return verify_theorem1(context({{"task.name", "hackable2d"}}), progress); }

SuiteResult criterion3() {
  SuiteResult res{"hacking", {}};
  const Context ddrl_ctx = context({{"task.name", "hackable2d"}});
  const Context grpo_ctx = context({{"task.name", "hackable2d"}, {"rl.algorithm", "grpo_noreg"}});
  progress("sft: " + std::to_string(ddrl_ctx.cfg.sft.iterations) + " iterations");
  const SftState sft = train_sft(ddrl_ctx, initial_net(ddrl_ctx));
  const RunOutcome ddrl = train(ddrl_ctx, sft.ema, "ddrl");
  const RunOutcome grpo = train(grpo_ctx, sft.ema, "grpo_noreg");

  const std::size_t window = 100;
  const double r_ddrl = tail_mean_reward(ddrl.reports, window);
  const double r_grpo = tail_mean_reward(grpo.reports, window);
  res.above("grpo_noreg minus ddrl mean reward, last " + std::to_string(window) + " iterations", r_grpo - r_ddrl, 0.0);
  res.above("grpo_noreg holdout diffusion-loss ratio", grpo.reports.back().holdout_ratio, 1.10);
  res.below("ddrl holdout diffusion-loss ratio", ddrl.reports.back().holdout_ratio, 1.10);
  const auto target = ddrl_ctx.task->closed_form_tilt(0, ddrl_ctx.cfg.rl.beta);
  hackable_band(res, "ddrl EMA", eval_ema(ddrl_ctx, ddrl.state), *target);
  return res;
}

SuiteResult criterion4() { return verify_kl_equivalence(); }
SuiteResult criterion5() { return verify_gradients(); }
SuiteResult criterion6() { return verify_advantages(); }

SuiteResult criterion7() {
  SuiteResult res{"reduced", {}};
  for (const char* objective : {"exact", "simplified"}) {
    const Flags base = {{"rl.objective", objective}, {"rl.iterations", "1"}};
    const Context full = context(base);
    Flags red_flags = base;
    red_flags.push_back({"rl.algorithm", "ddrl_reduced"});
    const Context red = context(red_flags);
    // Pretrained briefly: an untrained net overflows the exact advantages.
    const EpsNet init = train_sft(context({{"sft.iterations", "200"}}), initial_net(full)).ema;
    Trainer a(full.cfg.rl, full.task, full.sched, TrainingState::fresh(init, full.cfg.rl));
    Trainer b(red.cfg.rl, red.task, red.sched, TrainingState::fresh(init, red.cfg.rl));
    RewardConnection ca = connect_rewards(full), cb = connect_rewards(red);
    const IterationReport ra = a.step(*ca.client), rb = b.step(*cb.client);
    const auto n = static_cast<std::uint64_t>(full.cfg.rl.group_size);
    const auto steps_a = static_cast<std::uint64_t>(a.policy_steps().size());
    const auto steps_b = static_cast<std::uint64_t>(b.policy_steps().size());
    const auto batch = static_cast<std::uint64_t>(full.cfg.rl.batch);
    res.exact(std::string(objective) + " ddrl evaluations per condition = 2N|T| (" +
                  std::to_string(ra.loss_evaluations / batch) + ")",
              ra.loss_evaluations == batch * 2 * n * steps_a);
    res.exact(std::string(objective) + " ddrl_reduced evaluations per condition = N(1+|T|) (" +
                  std::to_string(rb.loss_evaluations / batch) + ")",
              rb.loss_evaluations == batch * n * (1 + steps_b));
  }
  const SuiteResult band = verify_theorem1(context({{"rl.algorithm", "ddrl_reduced"}, {"rl.iterations", "6000"}}), progress);
  res.checks.insert(res.checks.end(), band.checks.begin(), band.checks.end());
  return res;
}

std::vector<Point> probe_points(int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Point> xs;
  for (int i = 0; i < n; ++i) xs.push_back(Point{3.0 * rng.normal(), 3.0 * rng.normal()});
  return xs;
}

SuiteResult criterion8() {
  SuiteResult res{"reward_service", {}};
  const auto t0 = std::chrono::steady_clock::now();
  const Context ctx = context({{"task.name", "hackable2d"}});
  const reward::TaskRegistry reg = serve_registry(ctx);
  reward::ServerOptions opt;
  opt.bind = "127.0.0.1:0";
  opt.pipeline.workers = 4;
  reward::RewardServer server(reg, opt);

  const int clients = 4, per_client = 25, size = 16;
  std::atomic<int> done{0}, equal{0};
  std::vector<std::thread> threads;
  for (int c = 0; c < clients; ++c) {
    threads.emplace_back([&, c] {
      reward::TcpClient client(server.endpoint());
      std::vector<std::pair<std::string, std::vector<Point>>> sent;
      for (int k = 0; k < per_client; ++k) {
        auto xs = probe_points(size, 1000u * static_cast<std::uint64_t>(c) + static_cast<std::uint64_t>(k));
        sent.emplace_back(client.submit("hackable2d", xs, std::vector<int>(size, 0)), std::move(xs));
      }
      const Task& task = *reg.at("hackable2d");
      for (const auto& [id, xs] : sent) {
        const reward::FetchResult r = client.fetch(id, 10000ms);
        if (r.status != reward::Status::done) continue;
        ++done;
        std::vector<double> local;
        for (const Point& x : xs) local.push_back(task.reward(x, 0));
        if (r.rewards == local) ++equal;
      }
    });
  }
  for (auto& t : threads) t.join();
  res.exact("100 submissions over 4 connections reach done (" + std::to_string(done.load()) + ")", done == 100);
  res.exact("rewards bit-equal to in-process evaluation (" + std::to_string(equal.load()) + ")", equal == 100);
  {
    reward::TcpClient client(server.endpoint());
    res.exact("unknown uuid returns not_found",
              client.fetch("00000000-0000-4000-8000-000000000000", 0ms).status == reward::Status::not_found);
  }

  // Overlap: loss-path network work sits between submit and fetch.
  // A briefly pretrained net so the step is not aborted for overflow.
  const Context small = context({{"rl.iterations", "1"}, {"sft.iterations", "200"}});
  const SftState sft = train_sft(small, initial_net(small));
  Trainer trainer(small.cfg.rl, small.task, small.sched, TrainingState::fresh(sft.ema, small.cfg.rl));
  Trace trace;
  trainer.set_trace(&trace);
  RewardConnection conn = connect_rewards(small);
  trainer.step(*conn.client);
  using K = TraceEvent::Kind;
  const K order[] = {K::rollouts,    K::submit,    K::precompute_begin, K::precompute_end,
                     K::fetch_begin, K::fetch_end, K::backward,         K::update};
  bool ordered = true;
  std::optional<std::uint64_t> prev;
  for (K k : order) {
    const auto seq = trace.first(k, 0);
    if (!seq || (prev && *seq <= *prev)) ordered = false;
    prev = seq;
  }
  res.exact("training-loop event order rollouts < submit < precompute < fetch < backward < update", ordered);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.below("suite wall time (s)", secs, 60.0);
  return res;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    files[e.path().filename().string()] = ss.str();
  }
  return files;
}

SuiteResult criterion9() {
  SuiteResult res{"determinism", {}};
  const fs::path dir = fs::temp_directory_path() / ("ddrl_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  for (const char* algorithm : {"ddrl", "ddrl_reduced", "grpo_rkl"}) {
    const Flags flags = {{"output.dir", dir.string()},   {"sft.iterations", "100"},    {"rl.iterations", "40"},
                         {"rl.algorithm", algorithm},    {"task.name", "gmm2d"},       {"eval.samples", "5000"},
                         {"output.checkpoint_every", "15"}};
    std::map<std::string, std::string> first;
    for (int run = 0; run < 2; ++run) {
      fs::remove_all(dir);
      const Context ctx = context(flags);
      cmd_sft(ctx);
      Flags rl_flags = flags;
      rl_flags.push_back({"model.init_checkpoint", OutputFiles{dir}.sft_checkpoint().string()});
      const Context rl = context(rl_flags);
      cmd_rl(rl);
      cmd_eval(rl);
      if (run == 0) first = snapshot(dir);
    }
    const auto second = snapshot(dir);
    std::string differing;
    for (const auto& [name, bytes] : first) {
      const auto it = second.find(name);
      if (it == second.end() || it->second != bytes) differing += " " + name;
    }
    res.exact(std::string(algorithm) + ": sft, rl and eval outputs byte-identical across reruns (" +
                  std::to_string(first.size()) + " files" + (differing.empty() ? "" : ", differ:" + differing) + ")",
              differing.empty() && first.size() == second.size() && !first.empty());
  }
  fs::remove_all(dir);
  return res;
}

SuiteResult criterion10() {
  SuiteResult res{"sft_rl_integration", {}};
  const Context base = context({});
  const int sft_budget = base.cfg.sft.iterations / 10;
  const int rl_budget = 2 * base.cfg.rl.iterations;
  const Context ctx = context({{"sft.iterations", std::to_string(sft_budget)}, {"rl.iterations", std::to_string(rl_budget)}});
  progress("sft: " + std::to_string(sft_budget) + " iterations");
  const SftState sft = train_sft(ctx, initial_net(ctx));
  const int every = 500;
  std::optional<int> reached;
  double last_kl = INFINITY;
  progress("ddrl: up to " + std::to_string(rl_budget) + " iterations");
  Trainer trainer(ctx.cfg.rl, ctx.task, ctx.sched, TrainingState::fresh(sft.ema, ctx.cfg.rl));
  RewardConnection conn = connect_rewards(ctx);
  while (!reached && trainer.state().iteration < rl_budget) {
    trainer.step(*conn.client);
    const int done = trainer.state().iteration;
    if (done % every != 0) continue;
    last_kl = eval_ema(ctx, trainer.state()).kl.value_or(INFINITY);
    progress("iteration " + std::to_string(done) + ": EMA KL " + std::to_string(last_kl));
    if (last_kl < 0.02) reached = done;
  }
  res.below("EMA KL to tilted target when first checked inside the band (or at budget end)", last_kl, 0.02);
  res.exact("band reached within " + std::to_string(rl_budget) + " iterations" +
                (reached ? " (at " + std::to_string(*reached) + ")" : ""),
            reached.has_value());
  return res;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, SuiteResult (*)()>> criteria = {
      {"convergence to the tilted target, gauss1d", criterion1},
      {"convergence to the tilted target, hackable2d", criterion2},
      {"hacking reproduction", criterion3},
      {"forward-KL and diffusion-loss equivalence", criterion4},
      {"gradient correctness", criterion5},
      {"advantage algebra", criterion6},
      {"reduced-schedule parity", criterion7},
      {"reward service", criterion8},
      {"determinism", criterion9},
      {"SFT/RL integration", criterion10},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    const int k = std::atoi(argv[i]);
    if (k < 1 || k > static_cast<int>(criteria.size())) {
      std::cerr << "usage: acceptance [criterion numbers 1-10]\n";
      return 1;
    }
    selected.push_back(k);
  }
  if (selected.empty()) {
    for (int k = 1; k <= static_cast<int>(criteria.size()); ++k) selected.push_back(k);
  }

  int failed = 0;
  std::vector<std::string> summary;
  for (int k : selected) {
    const auto& [name, fn] = criteria[static_cast<std::size_t>(k - 1)];
    std::cerr << "criterion " << k << ": " << name << std::endl;
    const auto t0 = std::chrono::steady_clock::now();
    bool pass = false;
    try {
      const SuiteResult res = fn();
      print(std::cout, res);
      pass = res.passed();
    } catch (const std::exception& e) {
      std::cout << "  error: " << e.what() << "\n";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    char line[160];
    std::snprintf(line, sizeof line, "criterion %2d: %s  %s (%.0f s)", k, pass ? "PASS" : "FAIL", name.c_str(), secs);
    std::cout << line << std::endl;
    summary.emplace_back(line);
    failed += pass ? 0 : 1;
  }
  if (selected.size() > 1) {
    std::cout << "\n";
    for (const auto& s : summary) std::cout << s << "\n";
  }
  return failed == 0 ? 0 : 1;
}
