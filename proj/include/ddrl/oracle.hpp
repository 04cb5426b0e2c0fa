#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "ddrl/diffusion.hpp"
#include "ddrl/error.hpp"
#include "ddrl/grid.hpp"
#include "ddrl/log.hpp"
#include "ddrl/tasks.hpp"

namespace ddrl {

/// Cellwise p * exp(r / beta), renormalized in log space.
inline GridDensity tilted_target(const GridDensity& data, std::span<const double> rewards, double beta) {
  if (!(beta > 0.0)) throw ArgumentError("tilted_target: beta must be > 0");
  if (rewards.size() != data.mass.size()) throw ShapeError("tilted_target: reward grid does not match density grid");
  const std::size_t n = data.mass.size();
  std::vector<double> logw(n, -std::numeric_limits<double>::infinity());
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (data.mass[i] < 0.0) throw ArgumentError("tilted_target: negative mass");
    if (data.mass[i] > 0.0) {
      logw[i] = std::log(data.mass[i]) + rewards[i] / beta;
      if (std::isnan(logw[i])) throw DegenerateTargetError("tilted_target: NaN reward");
      top = std::max(top, logw[i]);
    }
  }
  if (!std::isfinite(top)) throw DegenerateTargetError("tilted_target: product vanishes on every cell");
  GridDensity out{data.spec, std::vector<double>(n, 0.0)};
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    out.mass[i] = std::exp(logw[i] - top);
    sum += out.mass[i];
  }
  if (!(sum > 0.0) || !std::isfinite(sum)) throw DegenerateTargetError("tilted_target: normalizer underflow");
  for (double& m : out.mass) m /= sum;
  return out;
}

/// Grid tilted target for one condition of a task.
inline GridDensity task_tilted_target(const Task& task, int c, double beta) {
  const GridSpec spec = task.grid();
  const GridDensity data = density_on_grid(spec, [&](std::span<const double> x) { return task.data_density(x, c); });
  std::vector<double> r(data.mass.size());
  double pt[2];
  for (std::size_t i = 0; i < r.size(); ++i) {
    data.cell_center(i, pt);
    r[i] = task.reward(std::span<const double>(pt, static_cast<std::size_t>(spec.dims)), c);
  }
  return tilted_target(data, r, beta);
}

/// The best available target on the task grid: the closed form when the task
/// has one, otherwise the grid computation.
inline GridDensity reference_target(const Task& task, int c, double beta) {
  if (auto g = task.closed_form_tilt(c, beta)) return gaussian_on_grid(task.grid(), g->mean, g->variance);
  return task_tilted_target(task, c, beta);
}

/// beta * log mean exp(r / beta).
inline double estimate_Z(std::span<const double> rewards, double beta) {
  if (!(beta > 0.0)) throw ArgumentError("estimate_Z: beta must be > 0");
  if (rewards.empty()) throw ArgumentError("estimate_Z: empty reward list");
  double top = -std::numeric_limits<double>::infinity();
  for (double r : rewards) top = std::max(top, r / beta);
  double s = 0.0;
  for (double r : rewards) s += std::exp(r / beta - top);
  return beta * (top + std::log(s / static_cast<double>(rewards.size())));
}

/// KL(p || q) = sum over p > 0 of p log(p / (q + floor)).
inline double kl_grid(const GridDensity& p, const GridDensity& q, double floor = 1e-12) {
  if (!(p.spec == q.spec)) throw ArgumentError("kl_grid: grids differ");
  if (!(floor > 0.0)) throw ArgumentError("kl_grid: floor must be > 0");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.mass.size(); ++i) {
    if (p.mass[i] > 0.0) kl += p.mass[i] * std::log(p.mass[i] / (q.mass[i] + floor));
  }
  return kl;
}

struct Histogram {
  GridDensity density;
  std::size_t outside = 0;  // samples clipped into an edge cell
  std::size_t total = 0;

  double outside_fraction() const {
    return total > 0 ? static_cast<double>(outside) / static_cast<double>(total) : 0.0;
  }
};

inline Histogram histogram_density(std::span<const Point> samples, const GridSpec& spec) {
  spec.validate();
  if (samples.empty()) throw ArgumentError("histogram_density: empty sample set");
  Histogram h{GridDensity{spec, std::vector<double>(spec.cells(), 0.0)}, 0, samples.size()};
  for (const Point& x : samples) {
    if (static_cast<int>(x.size()) != spec.dims) throw ShapeError("histogram_density: sample dimension mismatch");
    bool clipped = false;
    std::size_t idx = static_cast<std::size_t>(spec.axis_index(x[0], clipped));
    if (spec.dims == 2) idx = idx * spec.points + static_cast<std::size_t>(spec.axis_index(x[1], clipped));
    if (clipped) ++h.outside;
    h.density.mass[idx] += 1.0;
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (double& m : h.density.mass) m *= inv;
  return h;
}

struct DdrlObjectiveValue {
  double value = 0.0;
  double reward_term = 0.0;  // mean of -exp(-(r - Z) / beta)
  double kl_term = 0.0;      // forward-KL estimate (up to a constant)
  std::size_t clamped = 0;   // exponent clamps applied
};

inline constexpr double kMaxExpArgument = 700.0;

/// -exp(-(r - Z) / beta) with the exponent clamped at kMaxExpArgument.
inline double reward_transform(double r, double Z, double beta, bool* clamped = nullptr) {
  double a = -(r - Z) / beta;
  if (a > kMaxExpArgument) {
    a = kMaxExpArgument;
    if (clamped) *clamped = true;
  }
  return -std::exp(a);
}

/// Monte-Carlo value of E_{p_theta}[-exp(-(r - Z)/beta)] - KL(p_data || p_theta)
/// given terminal samples of the model and data samples.
template <class M>
DdrlObjectiveValue ddrl_objective(const M& model, const Task& task, double beta, double Z,
                                  std::span<const Example> data_samples, std::span<const Example> rollout_samples,
                                  const NoiseSchedule& sched, Rng& rng) {
  if (!(beta > 0.0)) throw ArgumentError("ddrl_objective: beta must be > 0");
  if (rollout_samples.empty()) throw ArgumentError("ddrl_objective: no rollout samples");
  DdrlObjectiveValue out;
  for (const Example& e : rollout_samples) {
    bool clamped = false;
    out.reward_term += reward_transform(task.reward(e.x0, e.c.value_or(0)), Z, beta, &clamped);
    if (clamped) ++out.clamped;
  }
  out.reward_term /= static_cast<double>(rollout_samples.size());
  if (out.clamped > 0) {
    log_warning("ddrl_objective: clamped " + std::to_string(out.clamped) + " reward exponents");
  }
  out.kl_term = elbo_kl_estimate(model, data_samples, sched, rng);
  out.value = out.reward_term - out.kl_term;
  return out;
}

}  // namespace ddrl
