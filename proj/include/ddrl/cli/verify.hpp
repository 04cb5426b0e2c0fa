#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "ddrl/cli/pipeline.hpp"
#include "ddrl/diffusion.hpp"
#include "ddrl/oracle.hpp"
#include "ddrl/rl.hpp"

namespace ddrl::cli {

struct Check {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  std::string relation;  // how value is compared with tolerance, e.g. "<"
  bool pass = false;
};

struct SuiteResult {
  std::string suite;
  std::vector<Check> checks;

  bool passed() const {
    return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }

  void below(std::string name, double value, double tol) {
    checks.push_back({std::move(name), value, tol, "<", value < tol});
  }
  void above(std::string name, double value, double tol) {
    checks.push_back({std::move(name), value, tol, ">", value > tol});
  }
  void exact(std::string name, bool ok) { checks.push_back({std::move(name), ok ? 0.0 : 1.0, 0.0, "==", ok}); }
};

inline void print(std::ostream& os, const SuiteResult& r) {
  for (const Check& c : r.checks) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g %s %.6g", c.value, c.relation.c_str(), c.tolerance);
    os << (c.pass ? "PASS " : "FAIL ") << r.suite << "/" << c.name << ": " << buf << "\n";
  }
  os << (r.passed() ? "PASS " : "FAIL ") << r.suite << "\n";
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Largest per-coordinate relative error between an analytic gradient and
/// central differences of `f`. Coordinates whose gradient magnitudes are both
/// below `floor` are compared on an absolute scale of `floor`.
inline double max_fd_rel_error(std::vector<double>& params, const std::vector<double>& analytic,
                               const std::function<double()>& f, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double p0 = params[i];
    const double h = 1e-5 * std::max(1.0, std::abs(p0));
    params[i] = p0 + h;
    const double up = f();
    params[i] = p0 - h;
    const double dn = f();
    params[i] = p0;
    const double numeric = (up - dn) / (2.0 * h);
    const double scale = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(numeric - analytic[i]) / scale);
  }
  return worst;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

inline EpsNet perturbed(const EpsNet& base, double scale, std::uint64_t seed) {
  EpsNet n = base;
  Rng rng(seed);
  for (double& p : n.params()) p += scale * rng.normal();
  return n;
}

inline constexpr double kGradTolerance = 1e-4;

/// Every training loss against central differences on a small seeded net.
inline SuiteResult verify_gradients() {
  SuiteResult res{"gradients", {}};
  Architecture arch;
  arch.data_dim = 2;
  arch.num_conditions = 2;
  arch.steps = 6;
  arch.hidden_width = 10;
  arch.hidden_layers = 2;
  arch.time_frequencies = 3;
  arch.cond_embed_dim = 3;
  const NoiseSchedule sched = NoiseSchedule::linear(arch.steps, 1e-2, 0.3);
  auto task = std::make_shared<Gmm2d>();
  const EpsNet base = EpsNet::initialized(arch, 2024);
  Rng rng(77);

  auto check_objective = [&](const std::string& name, const Objective& obj) {
    EpsNet net = base;
    const Gradient g = grad(net, obj);
    std::vector<double> p(net.params().begin(), net.params().end());
    const double err = max_fd_rel_error(p, g.grad, [&] {
      net.set_params(p);
      return obj.value(net);
    });
    res.below(name + " max rel err", err, kGradTolerance);
  };

  {
    std::vector<Example> batch;
    for (int i = 0; i < 12; ++i) {
      const int c = i % 2;
      batch.push_back({task->sample_data(c, 1, rng).front(), c});
    }
    const DiffusionDraws draws = draw_diffusion_noise(batch.size(), 2, sched, 0.25, rng);
    check_objective("diffusion_loss", diffusion_objective(batch, draws, sched));
    check_objective("diffusion_loss elbo-weighted", diffusion_objective(batch, draws, sched, LossWeighting::elbo));
  }
  {
    const Trajectory tr = sample_trajectory(base, 1, sched, {}, 5);
    const int t = 3;
    const Objective obj = step_log_prob_objective(tr.x(t - 1), tr.x(t), t, 1, sched);
    const double direct = step_log_prob(base, tr.x(t - 1), tr.x(t), t, 1, sched);
    res.below("step_log_prob value mismatch", std::abs(obj.value(base) - direct), 1e-12);
    check_objective("step_log_prob", obj);
    const EpsNet ref = perturbed(base, 0.05, 9);
    const Point ref_eps = ref.predict(tr.x(t), t, 1);
    const Objective kl = step_kl_objective(ref_eps, tr.x(t), t, 1, sched);
    res.below("step_kl value mismatch", std::abs(kl.value(base) - step_kl(base, ref, tr.x(t), t, 1, sched)), 1e-12);
    check_objective("step_kl", kl);
  }

  struct Variant {
    std::string name;
    Algorithm alg;
    DdrlObjective objective;
  };
  const std::vector<Variant> variants = {
      {"ddrl exact L", Algorithm::ddrl, DdrlObjective::exact},
      {"ddrl simplified L", Algorithm::ddrl, DdrlObjective::simplified},
      {"ddrl_reduced exact L", Algorithm::ddrl_reduced, DdrlObjective::exact},
      {"ddrl_reduced simplified L", Algorithm::ddrl_reduced, DdrlObjective::simplified},
      {"grpo_rkl loss", Algorithm::grpo_rkl, DdrlObjective::exact},
      {"grpo_noreg loss", Algorithm::grpo_noreg, DdrlObjective::exact},
  };
  for (const Variant& v : variants) {
    RLConfig cfg;
    cfg.algorithm = v.alg;
    cfg.objective = v.objective;
    cfg.batch = 2;
    cfg.group_size = 3;
    cfg.beta = 4.0;  // keeps exp(-(r - Z) / beta) moderate for an untrained net
    cfg.z_samples = 512;
    cfg.seed = 31;
    TrainingState st = TrainingState::fresh(base, cfg);
    if (st.reference) st.reference = perturbed(base, 0.05, 10);
    Trainer tr(cfg, task, sched, st);
    Rng prng(mix_seed(cfg.seed, 1));
    const IterationPlan plan = tr.plan(prng);
    std::vector<std::vector<double>> rewards;
    for (const GroupPlan& g : plan.groups) {
      std::vector<double> r;
      for (const Trajectory& t : g.rollouts) r.push_back(task->reward(t.sample(), g.c));
      rewards.push_back(r);
    }
    const Gradient g = tr.loss_and_grad(plan, rewards);
    std::vector<double> p(g.grad.size());
    std::copy(tr.state().net.params().begin(), tr.state().net.params().end(), p.begin());
    const double err = max_fd_rel_error(p, g.grad, [&] {
      tr.state().net.set_params(p);
      return tr.loss_and_grad(plan, rewards).value;
    });
    res.below(v.name + " max rel err", err, kGradTolerance);
  }
  return res;
}

/// Forward-KL estimator differences against w_t-weighted diffusion-loss
/// differences under common random numbers, plus matched-noise gradients.
inline SuiteResult verify_kl_equivalence(int samples = 2000) {
  SuiteResult res{"kl_equivalence", {}};
  Architecture arch;
  arch.data_dim = 2;
  arch.num_conditions = 2;
  arch.steps = 20;
  arch.hidden_width = 32;
  arch.hidden_layers = 2;
  const NoiseSchedule sched = NoiseSchedule::linear(arch.steps, 1e-3, 0.4);
  const Gmm2d task;
  Rng rng(4242);
  std::vector<Example> data;
  for (int i = 0; i < samples; ++i) {
    const int c = i % 2;
    data.push_back({task.sample_data(c, 1, rng).front(), c});
  }
  const ChainNoise noise = draw_chain_noise(data.size(), arch.data_dim, sched, rng);
  const NetInput in = ddrl::detail::elbo_inputs(data, noise, sched);
  const int T = sched.steps();

  // Per-sample sum_t w_t ||eps_hat - eps||^2, computed directly.
  auto weighted_mse = [&](const EpsNet& net) {
    const Matrix out = net.predict(in);
    std::vector<double> per(data.size(), 0.0);
    for (int s = 0; s < out.cols; ++s) {
      const int i = s / T, t = s % T + 1;
      double sq = 0.0;
      for (int k = 0; k < out.rows; ++k) {
        const double r = out(k, s) - noise.eps[i][t - 1][k];
        sq += r * r;
      }
      per[i] += sched.weight(t) * sq;
    }
    return per;
  };

  const EpsNet theta0 = EpsNet::initialized(arch, 99);
  const std::vector<double> e0 = elbo_kl_per_sample(theta0, data, sched, noise);
  const std::vector<double> w0 = weighted_mse(theta0);
  const Objective kl_obj = elbo_kl_objective(data, sched, noise);
  const Objective diff_obj = weighted_chain_diffusion_objective(data, sched, noise);
  const double n = static_cast<double>(data.size());
  for (int i = 1; i <= 5; ++i) {
    const EpsNet theta = perturbed(theta0, 0.05, 1000 + i);
    const std::vector<double> e = elbo_kl_per_sample(theta, data, sched, noise);
    const std::vector<double> w = weighted_mse(theta);
    double de = 0.0, dw = 0.0, sq = 0.0;
    for (std::size_t s = 0; s < data.size(); ++s) {
      de += e[s] - e0[s];
      dw += w[s] - w0[s];
    }
    de /= n;
    dw /= n;
    for (std::size_t s = 0; s < data.size(); ++s) {
      const double r = (e[s] - e0[s]) - de;
      sq += r * r;
    }
    const double se = std::sqrt(sq / (n - 1.0) / n);
    res.below("perturbation " + std::to_string(i) + " |dKL - dL| / (3 SE)", std::abs(de - dw) / (3.0 * se), 1.0);
    const Gradient gk = grad(theta, kl_obj);
    const Gradient gd = grad(theta, diff_obj);
    res.above("perturbation " + std::to_string(i) + " gradient cosine", cosine(gk.grad, gd.grad), 0.999);
  }
  return res;
}

/// Hand-value table for the advantage transforms.
inline SuiteResult verify_advantages() {
  SuiteResult res{"advantages", {}};
  {
    const std::vector<double> r = {1, 2, 3};
    const auto a = compute_advantages(r, 0.01, 1e-6);
    res.below("[1,2,3] beta=0.01 A[0] + 122.474", std::abs(a[0] + 122.474), 1e-3);
    res.exact("[1,2,3] beta=0.01 A[1] == 0", a[1] == 0.0);
    res.below("[1,2,3] beta=0.01 A[2] - 122.474", std::abs(a[2] - 122.474), 1e-3);
  }
  {
    const auto a = compute_advantages(std::vector<double>{0.0, 1.0}, 1.0, 1e-6);
    res.below("[0,1] beta=1 A[1] - 0.999998", std::abs(a[1] - 0.999998000004), 1e-12);
    res.below("[0,1] beta=1 A[0] + A[1]", std::abs(a[0] + a[1]), 1e-15);
  }
  {
    const std::vector<double> r = {0.5, 1.25, -3.0, 2.0};
    std::vector<double> shifted;
    for (double v : r) shifted.push_back(v + 1024.0);
    const auto a = compute_advantages(r, 0.3, 1e-6);
    const auto b = compute_advantages(shifted, 0.3, 1e-6);
    res.exact("shift invariance (bitwise)", a == b);
  }
  {
    const auto a = compute_advantages(std::vector<double>(8, 2.5), 0.01, 1e-6);
    res.exact("equal rewards give zeros", std::all_of(a.begin(), a.end(), [](double v) { return v == 0.0; }));
    const auto z = compute_advantages(std::vector<double>(4, -1.0), 1.0, 0.0);
    res.exact("equal rewards with zero guard give zeros",
              std::all_of(z.begin(), z.end(), [](double v) { return v == 0.0; }));
  }
  {
    // beta=1, Z=0: -exp(-r) = [-1, -0.5]; centered and scaled by n/(n-1).
    const auto a = transformed_advantages(std::vector<double>{0.0, std::log(2.0)}, 1.0, 0.0);
    res.below("leave-one-out [0, ln 2] A[0] + 0.5", std::abs(a[0] + 0.5), 1e-15);
    res.below("leave-one-out [0, ln 2] A[1] - 0.5", std::abs(a[1] - 0.5), 1e-15);
  }
  return res;
}

/// Grid oracle against the closed form, then SFT followed by RL and an EMA
/// evaluation against the tilted target.
inline SuiteResult verify_theorem1(const Context& ctx, const std::function<void(const std::string&)>& progress = {}) {
  SuiteResult res{"theorem1", {}};
  const Task& task = *ctx.task;
  const double beta = ctx.cfg.rl.beta;
  const int c = ctx.cfg.eval.condition;
  const auto closed = task.closed_form_tilt(c, beta);
  if (!closed) throw ArgumentError("theorem1: task '" + task.name() + "' has no closed-form tilted target");
  const GridDensity grid_target = task_tilted_target(task, c, beta);
  const GridDensity closed_target = gaussian_on_grid(task.grid(), closed->mean, closed->variance);
  for (int k = 0; k < task.dim(); ++k) {
    const std::string ax = "[" + std::to_string(k) + "]";
    res.below("grid oracle mean" + ax + " vs closed form", std::abs(grid_target.mean(k) - closed->mean[k]), 1e-4);
    res.below("grid oracle variance" + ax + " vs closed form",
              std::abs(grid_target.variance(k) - closed->variance[k]), 1e-4);
  }
  res.below("grid oracle total variation vs closed form", total_variation(grid_target, closed_target), 1e-4);

  if (progress) progress("sft: " + std::to_string(ctx.cfg.sft.iterations) + " iterations");
  const SftState sft = train_sft(ctx, initial_net(ctx));
  RLConfig rl = ctx.cfg.rl;
  if (!rl.is_ddrl()) throw ArgumentError("theorem1: rl.algorithm must be ddrl or ddrl_reduced");
  Trainer trainer(rl, ctx.task, ctx.sched, TrainingState::fresh(sft.ema, rl));
  RewardConnection conn = connect_rewards(ctx);
  if (progress) progress("rl: " + std::to_string(rl.iterations) + " iterations");
  trainer.run(*conn.client);
  const EvalResult ev =
      evaluate_model(trainer.state().ema, task, ctx.sched, beta, ctx.cfg.eval.samples, ctx.cfg.eval.seed, 1.0, c);
  if (task.dim() == 1) {
    res.below("EMA histogram KL to tilted target", ev.kl.value_or(INFINITY), 0.02);
    res.below("EMA sample mean error", std::abs(ev.mean[0] - grid_target.mean(0)), 0.05);
  } else {
    for (int k = 0; k < task.dim(); ++k) {
      const std::string ax = "[" + std::to_string(k) + "]";
      res.below("EMA sample mean" + ax + " error", std::abs(ev.mean[k] - closed->mean[k]), 0.08);
      res.below("EMA sample variance" + ax + " error", std::abs(ev.variance[k] - closed->variance[k]), 0.15);
    }
  }
  return res;
}

}  // namespace ddrl::cli
