#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ddrl/diffusion.hpp"
#include "ddrl/error.hpp"
#include "ddrl/net.hpp"
#include "ddrl/random.hpp"
#include "ddrl/schedule.hpp"
#include "ddrl/tasks.hpp"

namespace ddrl {

struct SftConfig {
  int iterations = 2000;
  int batch = 256;
  double lr = 1e-3;
  double cond_dropout = 0.2;
  double ema_decay = 0.99;  // 0: EMA tracks the raw weights
  std::uint64_t seed = 1;

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    auto bad = [&](const char* field, const std::string& what) { out.push_back(ConfigError(field, what).what()); };
    if (iterations < 0) bad("sft.iterations", "must be >= 0");
    if (batch < 1) bad("sft.batch", "must be >= 1");
    if (!(lr > 0.0)) bad("sft.lr", "must be > 0");
    if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) bad("sft.cond_dropout", "must lie in [0, 1]");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) bad("sft.ema_decay", "must lie in [0, 1]");
    return out;
  }
};

struct SftReport {
  int iter = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
};

struct SftState {
  EpsNet net;
  EpsNet ema;
  AdamState adam;
  int iteration = 0;
};

/// One diffusion-loss step on a fresh data batch. Iteration i draws from a
/// stream derived from (seed, i).
inline SftReport sft_step(SftState& st, const Task& task, const NoiseSchedule& sched, const SftConfig& cfg) {
  Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(st.iteration)));
  std::vector<Example> batch;
  batch.reserve(cfg.batch);
  for (int i = 0; i < cfg.batch; ++i) {
    const int c = rng.uniform_int(0, task.num_conditions() - 1);
    batch.push_back({task.sample_data(c, 1, rng).front(), c});
  }
  const DiffusionDraws draws = draw_diffusion_noise(batch.size(), task.dim(), sched, cfg.cond_dropout, rng);
  const Gradient g = grad(st.net, diffusion_objective(batch, draws, sched));
  SftReport rep{st.iteration, g.value, l2_norm(g.grad)};
  adam_step(st.adam, st.net.params(), g.grad);
  ema_update(st.ema.params(), st.net.params(), cfg.ema_decay);
  st.iteration += 1;
  return rep;
}

inline SftState sft_init(const EpsNet& net, const SftConfig& cfg) {
  return {net, net, AdamState(AdamConfig{cfg.lr, 0.9, 0.99, 1e-8}, net.param_count()), 0};
}

inline void run_sft(SftState& st, const Task& task, const NoiseSchedule& sched, const SftConfig& cfg,
                    const std::function<void(const SftReport&)>& on_report = {}) {
  while (st.iteration < cfg.iterations) {
    const SftReport rep = sft_step(st, task, sched, cfg);
    if (on_report) on_report(rep);
  }
}

}  // namespace ddrl
