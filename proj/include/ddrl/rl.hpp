#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddrl/diffusion.hpp"
#include "ddrl/error.hpp"
#include "ddrl/log.hpp"
#include "ddrl/net.hpp"
#include "ddrl/oracle.hpp"
#include "ddrl/random.hpp"
#include "ddrl/reward_service.hpp"
#include "ddrl/schedule.hpp"
#include "ddrl/tasks.hpp"

namespace ddrl {

enum class Algorithm { ddrl, ddrl_reduced, grpo_rkl, grpo_noreg };

// simplified: group-standardized advantages, unweighted diffusion term on the
//             strided step set, condition dropout, deterministic final step.
// exact:      leave-one-out advantages of -exp(-(r - Z)/beta) with Z from data,
//             w_t-weighted diffusion term and policy term over every step,
//             stochastic final step. Its fixed point is p_data exp(r/beta).
enum class DdrlObjective { simplified, exact };

enum class DataSource { task, synthetic };

inline std::string_view to_string(Algorithm a) {
  switch (a) {
    case Algorithm::ddrl: return "ddrl";
    case Algorithm::ddrl_reduced: return "ddrl_reduced";
    case Algorithm::grpo_rkl: return "grpo_rkl";
    case Algorithm::grpo_noreg: return "grpo_noreg";
  }
  return "?";
}

inline Algorithm parse_algorithm(std::string_view s) {
  if (s == "ddrl") return Algorithm::ddrl;
  if (s == "ddrl_reduced") return Algorithm::ddrl_reduced;
  if (s == "grpo_rkl") return Algorithm::grpo_rkl;
  if (s == "grpo_noreg") return Algorithm::grpo_noreg;
  throw ConfigError("rl.algorithm", "unknown algorithm '" + std::string(s) + "'");
}

inline std::string_view to_string(DdrlObjective o) { return o == DdrlObjective::exact ? "exact" : "simplified"; }

inline DdrlObjective parse_objective(std::string_view s) {
  if (s == "exact") return DdrlObjective::exact;
  if (s == "simplified") return DdrlObjective::simplified;
  throw ConfigError("rl.objective", "unknown objective '" + std::string(s) + "'");
}

inline std::string_view to_string(DataSource d) { return d == DataSource::task ? "task" : "synthetic"; }

inline DataSource parse_data_source(std::string_view s) {
  if (s == "task") return DataSource::task;
  if (s == "synthetic") return DataSource::synthetic;
  throw ConfigError("rl.data_source", "unknown data source '" + std::string(s) + "'");
}

struct RLConfig {
  Algorithm algorithm = Algorithm::ddrl;
  DdrlObjective objective = DdrlObjective::exact;
  double beta = 1.0;
  int group_size = 8;  // N
  int batch = 4;       // conditions per iteration
  int stride = 2;      // step set {T, T - stride, ...} ∩ {2..T}
  double lr = 4e-4;
  double ema_decay = 0.995;
  double cond_dropout = 0.2;
  double std_guard = 1e-6;
  int iterations = 3000;
  std::uint64_t seed = 0;
  bool importance_sampling = false;
  double clip_range = 0.2;
  bool shared_initial_noise = false;
  double diffusion_weight = 1.0;
  DataSource data_source = DataSource::task;
  int synthetic_pool = 8192;  // per condition
  int z_samples = 65536;      // data draws per condition for Z
  int holdout_every = 10;
  int fetch_timeout_ms = 30000;

  bool is_ddrl() const { return algorithm == Algorithm::ddrl || algorithm == Algorithm::ddrl_reduced; }
  bool exact() const { return is_ddrl() && objective == DdrlObjective::exact; }

  /// Every violated constraint as a ConfigError message.
  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto bad = [&](const char* field, const std::string& what) { out.push_back(ConfigError(field, what).what()); };
    if (algorithm != Algorithm::grpo_noreg && !(beta > 0.0)) bad("rl.beta", "must be > 0 for this algorithm");
    if (algorithm == Algorithm::grpo_noreg && !(beta >= 0.0)) bad("rl.beta", "must be >= 0");
    if (group_size < 2) bad("rl.group_size", "must be >= 2");
    if (batch < 1) bad("rl.batch", "must be >= 1");
    if (stride < 1) bad("rl.stride", "must be >= 1");
    if (!(lr > 0.0)) bad("rl.lr", "must be > 0");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) bad("rl.ema_decay", "must lie in [0, 1]");
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) bad("rl.cond_dropout", "must lie in [0, 1]");
    if (!(std_guard >= 0.0)) bad("rl.std_guard", "must be >= 0");
    if (iterations < 0) bad("rl.iterations", "must be >= 0");
    if (!(clip_range > 0.0 && clip_range < 1.0)) bad("rl.clip_range", "must lie in (0, 1)");
    if (!(diffusion_weight >= 0.0)) bad("rl.diffusion_weight", "must be >= 0");
    if (synthetic_pool < 1) bad("rl.synthetic_pool", "must be >= 1");
    if (z_samples < 1) bad("rl.z_samples", "must be >= 1");
    if (holdout_every < 1) bad("rl.holdout_every", "must be >= 1");
    if (fetch_timeout_ms < 0) bad("rl.fetch_timeout_ms", "must be >= 0");
    return out;
  }

  void validate() const {
    const auto p = problems();
    if (!p.empty()) {
      std::string msg;
      for (const auto& s : p) msg += (msg.empty() ? "" : "; ") + s;
      throw ConfigError("rl", msg);
    }
  }
};

/// {T, T - stride, T - 2 stride, ...} ∩ {2..T}, descending.
inline std::vector<int> select_timesteps(int T, int stride) {
  if (stride < 1) throw ArgumentError("select_timesteps: stride must be >= 1");
  std::vector<int> out;
  for (int t = T; t >= 2; t -= stride) out.push_back(t);
  return out;
}

/// (r - mean) / (beta (std + guard)) with the population std.
inline std::vector<double> compute_advantages(std::span<const double> rewards, double beta, double std_guard) {
  if (rewards.size() < 2) throw ArgumentError("compute_advantages: need at least 2 rewards");
  if (!(beta > 0.0)) throw ArgumentError("compute_advantages: beta must be > 0");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  var /= n;
  const double denom = beta * (std::sqrt(var) + std_guard);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    const double centered = rewards[i] - mean;
    out[i] = centered == 0.0 ? 0.0 : centered / denom;
  }
  return out;
}

/// Leave-one-out centered -exp(-(r - Z)/beta): an unbiased per-rollout
/// weight for the REINFORCE gradient of E[-exp(-(r - Z)/beta)].
inline std::vector<double> transformed_advantages(std::span<const double> rewards, double beta, double Z,
                                                  std::size_t* clamped = nullptr) {
  if (rewards.size() < 2) throw ArgumentError("transformed_advantages: need at least 2 rewards");
  const double n = static_cast<double>(rewards.size());
  std::vector<double> g(rewards.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    bool c = false;
    g[i] = reward_transform(rewards[i], Z, beta, &c);
    if (c && clamped) ++*clamped;
    mean += g[i];
  }
  mean /= n;
  for (double& v : g) v = (v - mean) * n / (n - 1.0);
  return g;
}

/// exp(log_ratio) clipped to [1 - clip, 1 + clip]; a non-finite ratio maps to
/// the nearer boundary (NaN to the lower one).
inline double clip_ratio(double log_ratio, double clip, bool* clipped = nullptr) {
  const double lo = 1.0 - clip, hi = 1.0 + clip;
  const double r = std::exp(log_ratio);
  double out = r;
  if (std::isnan(r)) {
    out = lo;
  } else if (r > hi) {
    out = hi;
  } else if (r < lo) {
    out = lo;
  }
  if (out != r && clipped) *clipped = true;
  return out;
}

/// Clipped p_net / p_old ratio of one stored transition.
template <class M, class O>
double importance_weight(const M& net, const O& old_net, const Trajectory& tr, int t, const NoiseSchedule& sched,
                         double clip_range, bool final_noise = false) {
  const double lp = step_log_prob(net, tr.x(t - 1), tr.x(t), t, tr.c, sched, final_noise);
  const double lo = step_log_prob(old_net, tr.x(t - 1), tr.x(t), t, tr.c, sched, final_noise);
  bool clipped = false;
  const double w = clip_ratio(lp - lo, clip_range, &clipped);
  if (!std::isfinite(lp - lo)) log_warning("importance_weight: non-finite log-ratio clipped");
  return w;
}

// ---------------------------------------------------------------------------
// Iteration records.

struct IterationReport {
  int iter = 0;
  bool aborted = false;
  std::string abort_reason;
  double mean_reward = 0.0;
  double reward_std = 0.0;
  std::vector<double> rewards;     // group-major
  std::vector<double> advantages;  // group-major
  double adv_min = 0.0;
  double adv_max = 0.0;
  std::optional<double> diffusion_loss;  // mean unweighted ||eps_hat - eps||^2 over diffusion columns
  double policy_loss = 0.0;              // -sum A rho log p / (batch N)
  double loss = 0.0;                     // total / (batch N)
  std::optional<double> step_kl_mean;
  double holdout_loss = 0.0;
  double holdout_ratio = 1.0;
  double grad_norm = 0.0;
  std::uint64_t loss_evaluations = 0;  // policy-net evaluations on the loss path
  std::size_t clamped = 0;
  std::size_t clipped = 0;
  double wallclock_ms = 0.0;
};

/// Ordered instrumentation of one step, for the overlap contract.
struct TraceEvent {
  enum class Kind { rollouts, submit, precompute_begin, precompute_end, fetch_begin, fetch_end, backward, update };
  Kind kind;
  int iter;
  std::uint64_t seq;
};

class Trace {
 public:
  void record(TraceEvent::Kind k, int iter) {
    std::lock_guard lock(mu_);
    events_.push_back({k, iter, next_++});
  }
  std::vector<TraceEvent> events() const {
    std::lock_guard lock(mu_);
    return events_;
  }
  /// Sequence number of the first event of kind `k` in iteration `iter`.
  std::optional<std::uint64_t> first(TraceEvent::Kind k, int iter) const {
    std::lock_guard lock(mu_);
    for (const auto& e : events_) {
      if (e.kind == k && e.iter == iter) return e.seq;
    }
    return std::nullopt;
  }

 private:
  mutable std::mutex mu_;
  std::vector<TraceEvent> events_;
  std::uint64_t next_ = 0;
};

// ---------------------------------------------------------------------------
// Iteration plan: everything drawn before rewards are known.

struct LossColumn {
  enum class Kind { diffusion, policy };
  Kind kind;
  int group;
  int rollout;
  int t;
  double weight = 1.0;  // diffusion only
  Point target;         // diffusion: eps; policy: x_{t-1}
};

struct GroupPlan {
  int c = 0;
  std::vector<Trajectory> rollouts;
  std::vector<Point> data;  // x~_0 draws used by the diffusion term
};

struct IterationPlan {
  std::vector<GroupPlan> groups;
  std::vector<LossColumn> columns;  // (group, rollout, step, term) order
  NetInput inputs;
};

struct LossResult {
  double total = 0.0;
  double diffusion_sq = 0.0;  // sum of unweighted squared errors
  int diffusion_columns = 0;
  double policy = 0.0;
  double kl = 0.0;
  int kl_columns = 0;
  std::size_t clipped = 0;
  Matrix d_out;
};

struct TrainingState {
  EpsNet net;
  EpsNet ema;
  std::optional<EpsNet> reference;  // frozen: KL anchor and synthetic-data source
  AdamState adam;
  int iteration = 0;
  std::optional<double> holdout_baseline;
  double last_holdout = std::numeric_limits<double>::quiet_NaN();

  static TrainingState fresh(const EpsNet& init, const RLConfig& cfg) {
    TrainingState s;
    s.net = init;
    s.ema = init;
    if (cfg.algorithm == Algorithm::grpo_rkl || (cfg.is_ddrl() && cfg.data_source == DataSource::synthetic)) {
      s.reference = init;
    }
    s.adam = AdamState(AdamConfig{cfg.lr, 0.9, 0.99, 1e-8}, init.param_count());
    return s;
  }
};

/// Drives one RL run. All randomness of iteration i comes from a stream
/// derived from (seed, i), so a resumed run continues bit-identically.
class Trainer {
 public:
  static constexpr std::uint64_t kIterationStream = 0x1000;
  static constexpr std::uint64_t kZStream = 0x2000;
  static constexpr std::uint64_t kPoolStream = 0x3000;
  static constexpr std::uint64_t kHoldoutSeed = 0x5eed;
  static constexpr int kMaxConsecutiveAborts = 10;

  Trainer(RLConfig cfg, TaskPtr task, NoiseSchedule sched, TrainingState state)
      : cfg_(cfg), task_(std::move(task)), sched_(std::move(sched)), state_(std::move(state)) {
    cfg_.validate();
    if (!task_) throw ArgumentError("Trainer: null task");
    const Architecture& arch = state_.net.architecture();
    if (arch.data_dim != task_->dim()) throw ConfigError("model.data_dim", "does not match the task dimension");
    if (arch.num_conditions != task_->num_conditions()) {
      throw ConfigError("model.num_conditions", "does not match the task condition count");
    }
    if (arch.steps != sched_.steps()) throw ConfigError("schedule.steps", "does not match the network's step count");
    if (cfg_.algorithm == Algorithm::grpo_rkl && !state_.reference) {
      throw ArgumentError("grpo_rkl needs a frozen reference network");
    }
    if (cfg_.is_ddrl() && cfg_.data_source == DataSource::synthetic && !state_.reference) {
      throw ArgumentError("synthetic data source needs a frozen reference network");
    }
    state_.adam.config.lr = cfg_.lr;
    if (state_.adam.m.size() != state_.net.param_count()) {
      state_.adam = AdamState(state_.adam.config, state_.net.param_count());
    }

    policy_steps_ = cfg_.exact() ? all_steps() : select_timesteps(sched_.steps(), cfg_.stride);
    if (policy_steps_.empty()) throw ConfigError("schedule.steps", "no optimizable steps (need T >= 2)");
    build_pool();
    if (cfg_.exact()) build_z();
    build_holdout();
  }

  const RLConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return sched_; }
  const Task& task() const { return *task_; }
  const TrainingState& state() const { return state_; }
  TrainingState& state() { return state_; }
  const std::vector<int>& policy_steps() const { return policy_steps_; }
  double Z(int c) const { return z_.at(static_cast<std::size_t>(c)); }
  bool final_noise() const { return cfg_.exact(); }

  void set_trace(Trace* trace) { trace_ = trace; }
  // Forces the reduced variant's diffusion step (0 restores sampling).
  void set_reduced_step_override(int t) { reduced_override_ = t; }

  /// Draws conditions, data, diffusion noise and rollouts for one iteration.
  IterationPlan plan(Rng& rng) const {
    const int N = cfg_.group_size;
    const int d = task_->dim();
    const int T = sched_.steps();
    const bool exact = cfg_.exact();
    const bool reduced = cfg_.algorithm == Algorithm::ddrl_reduced;

    struct Draw {
      int t;
      Point eps;
      bool dropped;
    };
    IterationPlan p;
    p.groups.resize(static_cast<std::size_t>(cfg_.batch));
    std::vector<std::uint64_t> seed_base(cfg_.batch);
    std::vector<std::optional<Point>> initial(cfg_.batch);
    std::vector<std::vector<std::vector<Draw>>> draws(cfg_.batch);  // [group][rollout][k]

    for (int b = 0; b < cfg_.batch; ++b) {
      GroupPlan& g = p.groups[b];
      g.c = rng.uniform_int(0, task_->num_conditions() - 1);
      seed_base[b] = rng.next_u64();
      if (cfg_.shared_initial_noise) {
        Point x(d);
        for (double& v : x) v = rng.normal();
        initial[b] = std::move(x);
      }
      if (!cfg_.is_ddrl()) continue;
      g.data = draw_data(g.c, exact ? N : 1, rng);
      auto& gd = draws[b];
      gd.resize(N);
      const double dropout = exact ? 0.0 : cfg_.cond_dropout;
      auto draw = [&](int t) {
        Draw dr{t, Point(d), false};
        for (double& v : dr.eps) v = rng.normal();
        dr.dropped = dropout > 0.0 && rng.bernoulli(dropout);
        return dr;
      };
      for (int n = 0; n < N; ++n) {
        if (reduced) {
          const int t = reduced_override_ > 0 ? reduced_override_ : rng.uniform_int(1, T);
          gd[n].push_back(draw(t));
        } else {
          for (int t : policy_steps_) gd[n].push_back(draw(t));
        }
      }
    }

    // Rollouts: per-rollout seeds, so batching does not change them.
    SamplerOptions opt;
    opt.final_noise = final_noise();
    if (cfg_.shared_initial_noise) {
      for (int b = 0; b < cfg_.batch; ++b) {
        std::vector<Condition> conds(N, p.groups[b].c);
        std::vector<std::uint64_t> seeds(N);
        for (int n = 0; n < N; ++n) seeds[n] = seed_base[b] + static_cast<std::uint64_t>(n);
        p.groups[b].rollouts = sample_trajectories(state_.net, conds, seeds, sched_, opt, &*initial[b]);
      }
    } else {
      std::vector<Condition> conds;
      std::vector<std::uint64_t> seeds;
      for (int b = 0; b < cfg_.batch; ++b) {
        for (int n = 0; n < N; ++n) {
          conds.push_back(p.groups[b].c);
          seeds.push_back(seed_base[b] + static_cast<std::uint64_t>(n));
        }
      }
      auto all = sample_trajectories(state_.net, conds, seeds, sched_, opt);
      for (int b = 0; b < cfg_.batch; ++b) {
        auto first = all.begin() + static_cast<std::ptrdiff_t>(b) * N;
        p.groups[b].rollouts.assign(std::make_move_iterator(first), std::make_move_iterator(first + N));
      }
    }

    // Loss columns.
    p.inputs = NetInput(d);
    for (int b = 0; b < cfg_.batch; ++b) {
      const GroupPlan& g = p.groups[b];
      for (int n = 0; n < N; ++n) {
        const Trajectory& tr = g.rollouts[n];
        auto add_diffusion = [&](const Draw& dr) {
          const Point& x0 = g.data[exact ? n : 0];
          double w = cfg_.diffusion_weight;
          if (exact) w *= (reduced ? T : 1) * sched_.weight(dr.t);
          p.columns.push_back({LossColumn::Kind::diffusion, b, n, dr.t, w, dr.eps});
          p.inputs.add(forward_noise(x0, dr.t, dr.eps, sched_), dr.t, dr.dropped ? Condition{} : Condition{g.c});
        };
        auto add_policy = [&](int t) {
          p.columns.push_back({LossColumn::Kind::policy, b, n, t, 0.0, tr.x(t - 1)});
          p.inputs.add(tr.x(t), t, g.c);
        };
        if (!cfg_.is_ddrl()) {
          for (int t : policy_steps_) add_policy(t);
        } else if (reduced) {
          add_diffusion(draws[b][n][0]);
          for (int t : policy_steps_) add_policy(t);
        } else {
          for (std::size_t k = 0; k < policy_steps_.size(); ++k) {
            add_diffusion(draws[b][n][k]);
            add_policy(policy_steps_[k]);
          }
        }
      }
    }
    return p;
  }

  /// Per-group advantages for the configured algorithm.
  std::vector<double> advantages(std::span<const double> rewards, int c, std::size_t* clamped = nullptr) const {
    if (cfg_.exact()) return transformed_advantages(rewards, cfg_.beta, Z(c), clamped);
    const double scale = cfg_.is_ddrl() ? cfg_.beta : 1.0;
    return compute_advantages(rewards, scale, cfg_.std_guard);
  }

  /// Loss value and output cotangents from precomputed network outputs.
  /// `ref_eps` holds the frozen reference's outputs on the same columns.
  LossResult evaluate(const IterationPlan& p, const Matrix& eps_hat, const Matrix* ref_eps,
                      const std::vector<std::vector<double>>& adv) const {
    const int d = task_->dim();
    LossResult res;
    res.d_out = Matrix(d, static_cast<int>(p.columns.size()));
    const bool kl = cfg_.algorithm == Algorithm::grpo_rkl;
    if (kl && !ref_eps) throw ArgumentError("evaluate: grpo_rkl needs reference outputs");
    Point mu(d), mu_ref(d);
    for (std::size_t j = 0; j < p.columns.size(); ++j) {
      const LossColumn& col = p.columns[j];
      const int s = static_cast<int>(j);
      const double* e = eps_hat.col(s);
      double* g = res.d_out.col(s);
      if (col.kind == LossColumn::Kind::diffusion) {
        double sq = 0.0;
        for (int k = 0; k < d; ++k) {
          const double r = e[k] - col.target[k];
          sq += r * r;
          g[k] = 2.0 * col.weight * r;
        }
        res.total += col.weight * sq;
        res.diffusion_sq += sq;
        ++res.diffusion_columns;
        continue;
      }
      const Trajectory& tr = p.groups[col.group].rollouts[col.rollout];
      const int t = col.t;
      const double sigma = step_sigma(sched_, t, final_noise());
      const double var = sigma * sigma;
      const double* xt = p.inputs.x.col(s);
      reverse_mean(xt, e, d, t, sched_, mu.data());
      const double dmu = -sched_.eps_coef(t) / std::sqrt(1.0 - sched_.beta(t));
      const double logp = gaussian_log_density(col.target, mu, sigma);
      double coef = adv[col.group][col.rollout];
      if (cfg_.importance_sampling) {
        const double logp_old = gaussian_log_density(col.target, tr.mean(t), sigma);
        bool clipped = false;
        coef *= clip_ratio(logp - logp_old, cfg_.clip_range, &clipped);
        if (clipped) ++res.clipped;
      }
      // d(-coef log p)/d mu = -coef (x_prev - mu) / var
      for (int k = 0; k < d; ++k) g[k] = -coef * (col.target[k] - mu[k]) / var * dmu;
      res.total += -coef * logp;
      res.policy += -coef * logp;
      if (kl) {
        reverse_mean(xt, ref_eps->col(s), d, t, sched_, mu_ref.data());
        double sq = 0.0;
        for (int k = 0; k < d; ++k) {
          const double r = mu[k] - mu_ref[k];
          sq += r * r;
          g[k] += cfg_.beta * r / var * dmu;
        }
        const double step = sq / (2.0 * var);
        res.total += cfg_.beta * step;
        res.kl += step;
        ++res.kl_columns;
      }
    }
    return res;
  }

  /// Loss and exact gradient of a plan given rewards; used by tests and
  /// finite-difference checks. Does not touch the optimizer.
  Gradient loss_and_grad(const IterationPlan& p, const std::vector<std::vector<double>>& rewards_per_group,
                         LossResult* breakdown = nullptr) const {
    std::vector<std::vector<double>> adv;
    for (std::size_t b = 0; b < p.groups.size(); ++b) adv.push_back(advantages(rewards_per_group[b], p.groups[b].c));
    const ForwardCache cache = state_.net.forward(p.inputs);
    Matrix eps = cache.out;
    eps.cols = cache.n;
    std::optional<Matrix> ref;
    if (cfg_.algorithm == Algorithm::grpo_rkl) ref = state_.reference->predict(p.inputs);
    LossResult res = evaluate(p, eps, ref ? &*ref : nullptr, adv);
    Gradient g;
    g.value = res.total;
    g.grad.assign(state_.net.param_count(), 0.0);
    state_.net.backward(cache, res.d_out, g.grad);
    if (breakdown) *breakdown = std::move(res);
    return g;
  }

  /// Mean unweighted eps-MSE on the task's held-out set with fixed draws.
  double holdout_loss(const EpsNet& net) const {
    const Matrix out = net.predict(holdout_inputs_);
    double total = 0.0;
    for (int s = 0; s < out.cols; ++s) {
      for (int k = 0; k < out.rows; ++k) {
        const double r = out(k, s) - holdout_eps_[static_cast<std::size_t>(s)][k];
        total += r * r;
      }
    }
    return total / out.cols;
  }

  /// One full iteration: plan, submit, precompute, fetch, update.
  IterationReport step(reward::RewardClient& client) {
    const auto wall0 = std::chrono::steady_clock::now();
    const int iter = state_.iteration;
    IterationReport rep;
    rep.iter = iter;

    if (iter % cfg_.holdout_every == 0 || std::isnan(state_.last_holdout)) {
      state_.last_holdout = holdout_loss(state_.net);
      if (!state_.holdout_baseline) state_.holdout_baseline = state_.last_holdout;
    }
    rep.holdout_loss = state_.last_holdout;
    rep.holdout_ratio = state_.last_holdout / *state_.holdout_baseline;

    Rng rng(mix_seed(cfg_.seed, kIterationStream + static_cast<std::uint64_t>(iter)));
    const IterationPlan p = plan(rng);
    mark(TraceEvent::Kind::rollouts, iter);

    std::vector<std::string> uuids;
    for (const GroupPlan& g : p.groups) {
      std::vector<Point> xs;
      for (const Trajectory& tr : g.rollouts) xs.push_back(tr.sample());
      uuids.push_back(client.submit(task_->name(), xs, std::vector<int>(xs.size(), g.c)));
    }
    mark(TraceEvent::Kind::submit, iter);

    // Overlap: network work for every loss column happens while scoring runs.
    mark(TraceEvent::Kind::precompute_begin, iter);
    const std::uint64_t ev0 = state_.net.evaluations();
    const ForwardCache cache = state_.net.forward(p.inputs);
    rep.loss_evaluations = state_.net.evaluations() - ev0;
    std::optional<Matrix> ref;
    if (cfg_.algorithm == Algorithm::grpo_rkl) ref = state_.reference->predict(p.inputs);
    mark(TraceEvent::Kind::precompute_end, iter);

    mark(TraceEvent::Kind::fetch_begin, iter);
    std::vector<std::vector<double>> rewards;
    for (const std::string& id : uuids) {
      const reward::FetchResult r = client.fetch(id, std::chrono::milliseconds(cfg_.fetch_timeout_ms));
      if (r.status != reward::Status::done) {
        mark(TraceEvent::Kind::fetch_end, iter);
        return abort(rep, r.status == reward::Status::pending ? "reward fetch timed out"
                                                               : "reward request " + reward::to_string(r.status) + ": " + r.reason,
                     wall0);
      }
      rewards.push_back(r.rewards);
    }
    mark(TraceEvent::Kind::fetch_end, iter);

    std::vector<std::vector<double>> adv;
    double rsum = 0.0, rsq = 0.0;
    for (std::size_t b = 0; b < rewards.size(); ++b) {
      adv.push_back(advantages(rewards[b], p.groups[b].c, &rep.clamped));
      for (double r : rewards[b]) {
        rep.rewards.push_back(r);
        rsum += r;
      }
      rep.advantages.insert(rep.advantages.end(), adv.back().begin(), adv.back().end());
    }
    const double nr = static_cast<double>(rep.rewards.size());
    rep.mean_reward = rsum / nr;
    for (double r : rep.rewards) rsq += (r - rep.mean_reward) * (r - rep.mean_reward);
    rep.reward_std = std::sqrt(rsq / nr);
    rep.adv_min = *std::min_element(rep.advantages.begin(), rep.advantages.end());
    rep.adv_max = *std::max_element(rep.advantages.begin(), rep.advantages.end());
    if (rep.clamped > 0) log_warning("iteration " + std::to_string(iter) + ": clamped reward exponents");

    Matrix eps = cache.out;
    eps.cols = cache.n;
    const LossResult res = evaluate(p, eps, ref ? &*ref : nullptr, adv);
    std::vector<double> grad(state_.net.param_count(), 0.0);
    state_.net.backward(cache, res.d_out, grad);
    mark(TraceEvent::Kind::backward, iter);

    const double groups = static_cast<double>(cfg_.batch) * cfg_.group_size;
    rep.loss = res.total / groups;
    rep.policy_loss = res.policy / groups;
    if (res.diffusion_columns > 0) rep.diffusion_loss = res.diffusion_sq / res.diffusion_columns;
    if (res.kl_columns > 0) rep.step_kl_mean = res.kl / res.kl_columns;
    rep.clipped = res.clipped;
    rep.grad_norm = l2_norm(grad);
    if (!std::isfinite(res.total) || !std::isfinite(rep.grad_norm)) {
      return abort(rep, "non-finite loss or gradient (loss " + std::to_string(res.total) + ")", wall0);
    }
    try {
      adam_step(state_.adam, state_.net.params(), grad);
    } catch (const NumericError& e) {
      return abort(rep, e.what(), wall0);
    }
    ema_update(state_.ema.params(), state_.net.params(), cfg_.ema_decay);
    mark(TraceEvent::Kind::update, iter);
    state_.iteration += 1;
    consecutive_aborts_ = 0;
    rep.wallclock_ms = elapsed_ms(wall0);
    return rep;
  }

  /// Runs until state().iteration reaches cfg.iterations.
  void run(reward::RewardClient& client, const std::function<void(const IterationReport&)>& on_report = {}) {
    while (state_.iteration < cfg_.iterations) {
      const IterationReport rep = step(client);
      if (on_report) on_report(rep);
      if (rep.aborted && consecutive_aborts_ >= kMaxConsecutiveAborts) {
        throw Error("training stopped after " + std::to_string(consecutive_aborts_) +
                    " consecutive aborted iterations: " + rep.abort_reason);
      }
    }
  }

 private:
  static double elapsed_ms(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }

  IterationReport abort(IterationReport rep, std::string reason, std::chrono::steady_clock::time_point t0) {
    rep.aborted = true;
    rep.abort_reason = std::move(reason);
    log_warning("iteration " + std::to_string(rep.iter) + " aborted: " + rep.abort_reason);
    state_.iteration += 1;
    ++consecutive_aborts_;
    rep.wallclock_ms = elapsed_ms(t0);
    return rep;
  }

  void mark(TraceEvent::Kind k, int iter) {
    if (trace_) trace_->record(k, iter);
  }

  std::vector<int> all_steps() const {
    std::vector<int> out;
    for (int t = sched_.steps(); t >= 1; --t) out.push_back(t);
    return out;
  }

  std::vector<Point> draw_data(int c, int n, Rng& rng) const {
    if (cfg_.data_source == DataSource::task) return task_->sample_data(c, n, rng);
    const auto& pool = pool_[static_cast<std::size_t>(c)];
    std::vector<Point> out;
    for (int i = 0; i < n; ++i) out.push_back(pool[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))]);
    return out;
  }

  // Synthetic data: terminal samples of the frozen reference, drawn once.
  void build_pool() {
    if (!cfg_.is_ddrl() || cfg_.data_source != DataSource::synthetic) return;
    SamplerOptions opt;
    for (int c = 0; c < task_->num_conditions(); ++c) {
      pool_.push_back(sample_endpoints(*state_.reference, c, cfg_.synthetic_pool, sched_, opt,
                                       mix_seed(cfg_.seed, kPoolStream + static_cast<std::uint64_t>(c))));
    }
  }

  void build_z() {
    for (int c = 0; c < task_->num_conditions(); ++c) {
      Rng rng(mix_seed(cfg_.seed, kZStream + static_cast<std::uint64_t>(c)));
      std::vector<Point> xs = cfg_.data_source == DataSource::task ? task_->sample_data(c, cfg_.z_samples, rng)
                                                                   : pool_[static_cast<std::size_t>(c)];
      std::vector<double> r;
      r.reserve(xs.size());
      for (const Point& x : xs) r.push_back(task_->reward(x, c));
      z_.push_back(estimate_Z(r, cfg_.beta));
    }
  }

  // Fixed (t, eps) per held-out point, shared by every run on this task.
  void build_holdout() {
    Rng rng(kHoldoutSeed);
    holdout_inputs_ = NetInput(task_->dim());
    for (int c = 0; c < task_->num_conditions(); ++c) {
      for (const Point& x0 : task_->holdout(c)) {
        const int t = rng.uniform_int(1, sched_.steps());
        Point e(x0.size());
        for (double& v : e) v = rng.normal();
        holdout_inputs_.add(forward_noise(x0, t, e, sched_), t, c);
        holdout_eps_.push_back(std::move(e));
      }
    }
  }

  RLConfig cfg_;
  TaskPtr task_;
  NoiseSchedule sched_;
  TrainingState state_;
  std::vector<int> policy_steps_;
  std::vector<std::vector<Point>> pool_;
  std::vector<double> z_;
  NetInput holdout_inputs_;
  std::vector<Point> holdout_eps_;
  Trace* trace_ = nullptr;
  int reduced_override_ = 0;
  int consecutive_aborts_ = 0;
};

}  // namespace ddrl
