#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "ddrl/error.hpp"
#include "ddrl/net.hpp"
#include "ddrl/random.hpp"
#include "ddrl/schedule.hpp"

namespace ddrl {

/// Anything that predicts epsilon for a batch of (x_t, t, c).
template <class M>
concept EpsModel = requires(const M& m, const NetInput& in) {
  { m.predict(in) } -> std::same_as<Matrix>;
  { m.data_dim() } -> std::convertible_to<int>;
};

inline int model_dim(const EpsNet& net) { return net.architecture().data_dim; }

/// Adapter so EpsNet satisfies EpsModel without widening its own interface.
struct NetModel {
  const EpsNet& net;
  Matrix predict(const NetInput& in) const { return net.predict(in); }
  int data_dim() const { return net.architecture().data_dim; }
};

template <class M>
decltype(auto) as_model(const M& m) {
  if constexpr (std::same_as<M, EpsNet>) {
    return NetModel{m};
  } else {
    return (m);
  }
}

/// One reverse-process rollout. Index k of states/noises/means corresponds to
/// step T - k; use the accessors for 1-based step lookups.
struct Trajectory {
  Condition c;
  std::vector<Point> states;  // x_T .. x_0, length T + 1
  std::vector<Point> noises;  // z_T .. z_1, length T
  std::vector<Point> means;   // mu_theta(x_t, t, c) for t = T .. 1
  std::uint64_t seed = 0;
  std::optional<double> reward;

  int steps() const { return static_cast<int>(noises.size()); }
  const Point& x(int t) const { return states[static_cast<std::size_t>(steps() - t)]; }
  const Point& z(int t) const { return noises[static_cast<std::size_t>(steps() - t)]; }
  const Point& mean(int t) const { return means[static_cast<std::size_t>(steps() - t)]; }
  const Point& sample() const { return states.back(); }
};

struct SamplerOptions {
  double guidance_scale = 1.0;  // 1 disables guidance
  bool stochastic = true;       // false: every z_t = 0
  bool final_noise = false;     // true: z_1 is drawn as well (sigma_1^2 = beta_1)
};

/// mu = (x_t - k_t eps_hat) / sqrt(1 - beta_t), written into `out`.
inline void reverse_mean(const double* x, const double* eps_hat, int d, int t, const NoiseSchedule& s,
                         double* out) {
  const double k = s.eps_coef(t);
  const double inv = 1.0 / std::sqrt(1.0 - s.beta(t));
  for (int i = 0; i < d; ++i) out[i] = (x[i] - k * eps_hat[i]) * inv;
}

inline Point reverse_mean(std::span<const double> x, std::span<const double> eps_hat, int t,
                          const NoiseSchedule& s) {
  Point out(x.size());
  reverse_mean(x.data(), eps_hat.data(), static_cast<int>(x.size()), t, s, out.data());
  return out;
}

/// sigma of step t as used by samplers and densities; the first step is
/// noise-free unless `final_noise` is set.
inline double step_sigma(const NoiseSchedule& s, int t, bool final_noise) {
  if (t == 1 && !final_noise) return 0.0;
  return s.sigma(t);
}

/// Ancestral sampling for a batch of rollouts, each driven by its own seed.
/// If `initial` is given, every rollout starts from that x_T (its seed still
/// drives the per-step noise).
template <class M>
std::vector<Trajectory> sample_trajectories(const M& model_in, std::span<const Condition> conds,
                                            std::span<const std::uint64_t> seeds,
                                            const NoiseSchedule& sched, const SamplerOptions& opt,
                                            const Point* initial = nullptr) {
  decltype(auto) model = as_model(model_in);
  if (conds.size() != seeds.size()) throw ShapeError("sample_trajectories: conds/seeds length mismatch");
  if (!(opt.guidance_scale >= 0.0)) throw ArgumentError("guidance_scale must be >= 0");
  const int d = model.data_dim();
  const int T = sched.steps();
  const int n = static_cast<int>(conds.size());
  const bool guided = opt.guidance_scale != 1.0;

  std::vector<Rng> rngs;
  rngs.reserve(n);
  std::vector<Trajectory> out(n);
  for (int i = 0; i < n; ++i) {
    rngs.emplace_back(seeds[i]);
    Trajectory& tr = out[i];
    tr.c = conds[i];
    tr.seed = seeds[i];
    tr.states.reserve(T + 1);
    tr.noises.reserve(T);
    tr.means.reserve(T);
    Point xT(d);
    for (int k = 0; k < d; ++k) xT[k] = rngs[i].normal();
    if (initial) {
      if (static_cast<int>(initial->size()) != d) throw ShapeError("initial state dimension mismatch");
      xT = *initial;
    }
    tr.states.push_back(std::move(xT));
  }

  for (int t = T; t >= 1; --t) {
    NetInput in(d);
    in.reserve(guided ? 2 * n : n);
    for (int i = 0; i < n; ++i) in.add(out[i].states.back(), t, out[i].c);
    if (guided) {
      for (int i = 0; i < n; ++i) in.add(out[i].states.back(), t, std::nullopt);
    }
    const Matrix eps = model.predict(in);
    const double sigma = opt.stochastic ? step_sigma(sched, t, opt.final_noise) : 0.0;
    Point eps_hat(d);
    for (int i = 0; i < n; ++i) {
      Trajectory& tr = out[i];
      const double* ec = eps.col(i);
      if (guided) {
        const double* eu = eps.col(n + i);
        for (int k = 0; k < d; ++k) eps_hat[k] = eu[k] + opt.guidance_scale * (ec[k] - eu[k]);
      } else {
        for (int k = 0; k < d; ++k) eps_hat[k] = ec[k];
      }
      Point mu(d);
      reverse_mean(tr.states.back().data(), eps_hat.data(), d, t, sched, mu.data());
      Point z(d, 0.0);
      if (sigma > 0.0) {
        for (int k = 0; k < d; ++k) z[k] = rngs[i].normal();
      }
      Point next(d);
      for (int k = 0; k < d; ++k) next[k] = mu[k] + sigma * z[k];
      tr.means.push_back(std::move(mu));
      tr.noises.push_back(std::move(z));
      tr.states.push_back(std::move(next));
    }
  }
  return out;
}

template <class M>
Trajectory sample_trajectory(const M& model, Condition c, const NoiseSchedule& sched,
                             const SamplerOptions& opt, std::uint64_t seed) {
  const Condition conds[1] = {c};
  const std::uint64_t seeds[1] = {seed};
  return std::move(sample_trajectories(model, conds, seeds, sched, opt).front());
}

/// Terminal samples x_0 for `n` rollouts with seeds seed, seed+1, ...,
/// evaluated in chunks.
template <class M>
std::vector<Point> sample_endpoints(const M& model, Condition c, int n, const NoiseSchedule& sched,
                                    const SamplerOptions& opt, std::uint64_t seed, int chunk = 1024) {
  std::vector<Point> xs;
  xs.reserve(n);
  for (int start = 0; start < n; start += chunk) {
    const int m = std::min(chunk, n - start);
    std::vector<Condition> conds(m, c);
    std::vector<std::uint64_t> seeds(m);
    for (int i = 0; i < m; ++i) seeds[i] = seed + static_cast<std::uint64_t>(start + i);
    for (auto& tr : sample_trajectories(model, conds, seeds, sched, opt)) xs.push_back(tr.sample());
  }
  return xs;
}

inline double gaussian_log_density(std::span<const double> x, std::span<const double> mean, double sigma) {
  if (!(sigma > 0.0)) throw UndefinedDensityError("zero-variance step carries no density");
  const double var = sigma * sigma;
  double sq = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = x[i] - mean[i];
    sq += r * r;
  }
  const double d = static_cast<double>(x.size());
  return -0.5 * d * std::log(2.0 * std::numbers::pi * var) - sq / (2.0 * var);
}

/// log N(x_prev; mu_theta(x_t, t, c), sigma_t^2 I).
template <class M>
double step_log_prob(const M& model_in, std::span<const double> x_prev, std::span<const double> x_t, int t,
                     Condition c, const NoiseSchedule& sched, bool final_noise = false) {
  decltype(auto) model = as_model(model_in);
  const double sigma = step_sigma(sched, t, final_noise);
  if (!(sigma > 0.0)) throw UndefinedDensityError("step " + std::to_string(t) + " is deterministic");
  NetInput in(model.data_dim());
  in.add(x_t, t, c);
  const Matrix eps = model.predict(in);
  const Point mu = reverse_mean(x_t, std::span<const double>(eps.col(0), eps.rows), t, sched);
  return gaussian_log_density(x_prev, mu, sigma);
}

/// Exact KL between the equal-variance Gaussian reverse steps of two models.
template <class M, class R>
double step_kl(const M& model_in, const R& ref_in, std::span<const double> x_t, int t, Condition c,
               const NoiseSchedule& sched, bool final_noise = false) {
  decltype(auto) model = as_model(model_in);
  decltype(auto) ref = as_model(ref_in);
  const double sigma = step_sigma(sched, t, final_noise);
  if (!(sigma > 0.0)) throw UndefinedDensityError("step " + std::to_string(t) + " is deterministic");
  NetInput in(model.data_dim());
  in.add(x_t, t, c);
  const Matrix a = model.predict(in);
  const Matrix b = ref.predict(in);
  const Point mu_a = reverse_mean(x_t, std::span<const double>(a.col(0), a.rows), t, sched);
  const Point mu_b = reverse_mean(x_t, std::span<const double>(b.col(0), b.rows), t, sched);
  double sq = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) sq += (mu_a[i] - mu_b[i]) * (mu_a[i] - mu_b[i]);
  return sq / (2.0 * sigma * sigma);
}

/// step_log_prob as a differentiable Objective in the network parameters.
inline Objective step_log_prob_objective(Point x_prev, Point x_t, int t, Condition c, const NoiseSchedule& sched,
                                         bool final_noise = false) {
  const double sigma = step_sigma(sched, t, final_noise);
  if (!(sigma > 0.0)) throw UndefinedDensityError("step " + std::to_string(t) + " is deterministic");
  NetInput in(static_cast<int>(x_t.size()));
  in.add(x_t, t, c);
  const double dmu = -sched.eps_coef(t) / std::sqrt(1.0 - sched.beta(t));
  Objective obj;
  obj.add_output_term(std::move(in), [x_prev = std::move(x_prev), x_t = std::move(x_t), t, sigma, dmu,
                                      sched](const Matrix& out, Matrix& d_out) {
    const Point mu = reverse_mean(x_t, std::span<const double>(out.col(0), out.rows), t, sched);
    for (int k = 0; k < out.rows; ++k) d_out(k, 0) = (x_prev[k] - mu[k]) / (sigma * sigma) * dmu;
    return gaussian_log_density(x_prev, mu, sigma);
  });
  return obj;
}

/// step_kl against a frozen reference output `ref_eps` at the same input, as
/// a differentiable Objective in the policy's parameters.
inline Objective step_kl_objective(Point ref_eps, Point x_t, int t, Condition c, const NoiseSchedule& sched,
                                   bool final_noise = false) {
  const double sigma = step_sigma(sched, t, final_noise);
  if (!(sigma > 0.0)) throw UndefinedDensityError("step " + std::to_string(t) + " is deterministic");
  NetInput in(static_cast<int>(x_t.size()));
  in.add(x_t, t, c);
  const double dmu = -sched.eps_coef(t) / std::sqrt(1.0 - sched.beta(t));
  const Point mu_ref = reverse_mean(x_t, ref_eps, t, sched);
  Objective obj;
  obj.add_output_term(std::move(in), [mu_ref, x_t = std::move(x_t), t, sigma, dmu, sched](const Matrix& out,
                                                                                         Matrix& d_out) {
    const Point mu = reverse_mean(x_t, std::span<const double>(out.col(0), out.rows), t, sched);
    double sq = 0.0;
    for (int k = 0; k < out.rows; ++k) {
      const double r = mu[k] - mu_ref[k];
      sq += r * r;
      d_out(k, 0) = r / (sigma * sigma) * dmu;
    }
    return sq / (2.0 * sigma * sigma);
  });
  return obj;
}

/// A labelled data point (x0, c).
struct Example {
  Point x0;
  Condition c;
};

enum class LossWeighting {
  uniform,  // plain eps-MSE
  elbo,     // w_t-weighted, scaled by T so the expectation over uniform t is sum_t w_t MSE_t
};

/// Noise draws for one diffusion-loss evaluation, so the same draws can be
/// replayed for value and gradient.
struct DiffusionDraws {
  std::vector<int> t;
  std::vector<Point> eps;
  std::vector<bool> dropped;
};

inline DiffusionDraws draw_diffusion_noise(std::size_t n, int dim, const NoiseSchedule& sched,
                                           double cond_dropout, Rng& rng) {
  if (!(cond_dropout >= 0.0 && cond_dropout <= 1.0)) throw ArgumentError("cond_dropout must lie in [0, 1]");
  DiffusionDraws d;
  d.t.reserve(n);
  d.eps.reserve(n);
  d.dropped.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    d.t.push_back(rng.uniform_int(1, sched.steps()));
    Point e(dim);
    for (double& v : e) v = rng.normal();
    d.eps.push_back(std::move(e));
    d.dropped.push_back(rng.bernoulli(cond_dropout));
  }
  return d;
}

/// Builds network inputs x_t (and targets eps) for the given draws.
inline NetInput diffusion_inputs(std::span<const Example> batch, const DiffusionDraws& draws,
                                 const NoiseSchedule& sched) {
  const int d = static_cast<int>(batch.front().x0.size());
  NetInput in(d);
  in.reserve(static_cast<int>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Point xt = forward_noise(batch[i].x0, draws.t[i], draws.eps[i], sched);
    in.add(xt, draws.t[i], draws.dropped[i] ? Condition{} : batch[i].c);
  }
  return in;
}

inline double diffusion_term_weight(LossWeighting w, int t, const NoiseSchedule& sched) {
  return w == LossWeighting::uniform ? 1.0 : sched.steps() * sched.weight(t);
}

/// Mean over the batch of ||eps_theta(x_t, t, c~) - eps||^2 as an Objective.
inline Objective diffusion_objective(std::span<const Example> batch, const DiffusionDraws& draws,
                                     const NoiseSchedule& sched, LossWeighting weighting = LossWeighting::uniform) {
  if (batch.empty()) throw ArgumentError("diffusion_loss: empty batch");
  Objective obj;
  NetInput in = diffusion_inputs(batch, draws, sched);
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  std::vector<double> wts(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) wts[i] = diffusion_term_weight(weighting, draws.t[i], sched) * inv_n;
  obj.add_output_term(std::move(in), [eps = draws.eps, wts](const Matrix& out, Matrix& d_out) {
    double total = 0.0;
    for (int s = 0; s < out.cols; ++s) {
      double sq = 0.0;
      for (int k = 0; k < out.rows; ++k) {
        const double r = out(k, s) - eps[s][k];
        sq += r * r;
        d_out(k, s) = 2.0 * wts[s] * r;
      }
      total += wts[s] * sq;
    }
    return total;
  });
  return obj;
}

template <class M>
double diffusion_loss(const M& model_in, std::span<const Example> batch, const NoiseSchedule& sched,
                      double cond_dropout, Rng& rng, LossWeighting weighting = LossWeighting::uniform) {
  decltype(auto) model = as_model(model_in);
  if (batch.empty()) throw ArgumentError("diffusion_loss: empty batch");
  const DiffusionDraws draws = draw_diffusion_noise(batch.size(), model.data_dim(), sched, cond_dropout, rng);
  const NetInput in = diffusion_inputs(batch, draws, sched);
  const Matrix out = model.predict(in);
  double total = 0.0;
  for (int s = 0; s < in.size(); ++s) {
    double sq = 0.0;
    for (int k = 0; k < out.rows; ++k) {
      const double r = out(k, s) - draws.eps[s][k];
      sq += r * r;
    }
    total += diffusion_term_weight(weighting, draws.t[s], sched) * sq;
  }
  return total / static_cast<double>(batch.size());
}

// ---------------------------------------------------------------------------
// Forward-KL (ELBO) estimator.

/// eps[i][t-1] drives x_t for sample i.
struct ChainNoise {
  std::vector<std::vector<Point>> eps;
};

inline ChainNoise draw_chain_noise(std::size_t n, int dim, const NoiseSchedule& sched, Rng& rng) {
  ChainNoise noise;
  noise.eps.resize(n);
  for (auto& per_sample : noise.eps) {
    per_sample.resize(sched.steps());
    for (auto& e : per_sample) {
      e.resize(dim);
      for (double& v : e) v = rng.normal();
    }
  }
  return noise;
}

struct ElboTerms {
  double total = 0.0;     // prior + transition KLs + reconstruction
  double mean_gap = 0.0;  // theta-dependent quadratic part (the w_t-weighted eps-MSE)
  double prior = 0.0;
  double constant = 0.0;  // variance-mismatch and normalization terms
};

namespace detail {

// Posterior q(x_{t-1} | x_t, x_0) mean coefficients and variance (t >= 2).
struct Posterior {
  double c0, ct, var;
};

inline Posterior posterior(const NoiseSchedule& s, int t) {
  const double ab = s.alpha_bar(t), abp = s.alpha_bar_prev(t), b = s.beta(t);
  return {std::sqrt(abp) * b / (1.0 - ab), std::sqrt(1.0 - b) * (1.0 - abp) / (1.0 - ab),
          b * (1.0 - abp) / (1.0 - ab)};
}

// Inputs for every (sample, t) pair, ordered sample-major.
inline NetInput elbo_inputs(std::span<const Example> data, const ChainNoise& noise, const NoiseSchedule& s) {
  const int d = static_cast<int>(data.front().x0.size());
  NetInput in(d);
  in.reserve(static_cast<int>(data.size()) * s.steps());
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (int t = 1; t <= s.steps(); ++t) in.add(forward_noise(data[i].x0, t, noise.eps[i][t - 1], s), t, data[i].c);
  }
  return in;
}

// Per-sample ELBO contributions from predicted eps (x-space Gaussian KLs).
// If d_out is non-null, writes d(sample average)/d eps_hat.
inline std::vector<ElboTerms> elbo_terms(std::span<const Example> data, const NetInput& in, const Matrix& eps_hat,
                                         const NoiseSchedule& s, Matrix* d_out) {
  const int d = in.x.rows;
  const int T = s.steps();
  const double inv_n = 1.0 / static_cast<double>(data.size());
  std::vector<ElboTerms> terms(data.size());
  Point mu(d);
  for (std::size_t i = 0; i < data.size(); ++i) {
    ElboTerms& e = terms[i];
    const Point& x0 = data[i].x0;
    const double abT = s.alpha_bar(T);
    double x0sq = 0.0;
    for (double v : x0) x0sq += v * v;
    e.prior = 0.5 * (d * (1.0 - abT) + abT * x0sq - d - d * std::log(1.0 - abT));
    for (int t = 1; t <= T; ++t) {
      const int col = static_cast<int>(i) * T + (t - 1);
      const double* xt = in.x.col(col);
      reverse_mean(xt, eps_hat.col(col), d, t, s, mu.data());
      const double var = s.sigma(t) * s.sigma(t);
      // dmu/deps_hat = -k_t / sqrt(1 - beta_t)
      const double dmu = -s.eps_coef(t) / std::sqrt(1.0 - s.beta(t));
      double gap = 0.0;
      if (t >= 2) {
        const Posterior q = posterior(s, t);
        for (int k = 0; k < d; ++k) {
          const double target = q.c0 * x0[k] + q.ct * xt[k];
          const double r = mu[k] - target;
          gap += r * r;
          if (d_out) (*d_out)(k, col) = inv_n * dmu * r / var;
        }
        e.constant += 0.5 * d * (q.var / var - 1.0 + std::log(var / q.var));
      } else {
        // -log N(x0; mu, sigma_1^2)
        for (int k = 0; k < d; ++k) {
          const double r = mu[k] - x0[k];
          gap += r * r;
          if (d_out) (*d_out)(k, col) = inv_n * dmu * r / var;
        }
        e.constant += 0.5 * d * std::log(2.0 * std::numbers::pi * var);
      }
      e.mean_gap += gap / (2.0 * var);
    }
    e.total = e.prior + e.constant + e.mean_gap;
  }
  return terms;
}

}  // namespace detail

/// Monte-Carlo forward-KL estimate from explicit chain noise: the average
/// over samples of prior KL + sum_{t>=2} KL(q(x_{t-1}|x_t,x_0) || p_theta) +
/// reconstruction NLL. Equals KL(data chain || model chain) up to a
/// theta-independent constant.
template <class M>
ElboTerms elbo_kl_terms(const M& model_in, std::span<const Example> data, const NoiseSchedule& sched,
                        const ChainNoise& noise) {
  decltype(auto) model = as_model(model_in);
  if (data.empty()) throw ArgumentError("elbo_kl_estimate: empty sample set");
  const NetInput in = detail::elbo_inputs(data, noise, sched);
  const Matrix eps = model.predict(in);
  ElboTerms avg;
  const double inv_n = 1.0 / static_cast<double>(data.size());
  for (const ElboTerms& e : detail::elbo_terms(data, in, eps, sched, nullptr)) {
    avg.total += e.total * inv_n;
    avg.mean_gap += e.mean_gap * inv_n;
    avg.prior += e.prior * inv_n;
    avg.constant += e.constant * inv_n;
  }
  return avg;
}

/// Per-sample totals, for standard errors.
template <class M>
std::vector<double> elbo_kl_per_sample(const M& model_in, std::span<const Example> data, const NoiseSchedule& sched,
                                       const ChainNoise& noise) {
  decltype(auto) model = as_model(model_in);
  const NetInput in = detail::elbo_inputs(data, noise, sched);
  const Matrix eps = model.predict(in);
  std::vector<double> out;
  for (const ElboTerms& e : detail::elbo_terms(data, in, eps, sched, nullptr)) out.push_back(e.total);
  return out;
}

template <class M>
double elbo_kl_estimate(const M& model, std::span<const Example> data, const NoiseSchedule& sched, Rng& rng) {
  if (data.empty()) throw ArgumentError("elbo_kl_estimate: empty sample set");
  const ChainNoise noise = draw_chain_noise(data.size(), static_cast<int>(data.front().x0.size()), sched, rng);
  return elbo_kl_terms(model, data, sched, noise).total;
}

/// The ELBO estimate as a differentiable Objective.
inline Objective elbo_kl_objective(std::span<const Example> data, const NoiseSchedule& sched, const ChainNoise& noise) {
  if (data.empty()) throw ArgumentError("elbo_kl_estimate: empty sample set");
  Objective obj;
  NetInput in = detail::elbo_inputs(data, noise, sched);
  std::vector<Example> copy(data.begin(), data.end());
  obj.add_output_term(in, [copy = std::move(copy), in, sched](const Matrix& out, Matrix& d_out) {
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(copy.size());
    for (const ElboTerms& e : detail::elbo_terms(copy, in, out, sched, &d_out)) total += e.total * inv_n;
    return total;
  });
  return obj;
}

/// sum_t w_t ||eps_theta(x_t, t, c) - eps||^2 averaged over samples, evaluated
/// on the same chain noise as the ELBO estimator (common random numbers).
inline Objective weighted_chain_diffusion_objective(std::span<const Example> data, const NoiseSchedule& sched,
                                                    const ChainNoise& noise) {
  if (data.empty()) throw ArgumentError("weighted diffusion loss: empty sample set");
  Objective obj;
  NetInput in = detail::elbo_inputs(data, noise, sched);
  const int T = sched.steps();
  const double inv_n = 1.0 / static_cast<double>(data.size());
  std::vector<double> w(T);
  for (int t = 1; t <= T; ++t) w[t - 1] = sched.weight(t) * inv_n;
  obj.add_output_term(std::move(in), [noise, w, T](const Matrix& out, Matrix& d_out) {
    double total = 0.0;
    for (int s = 0; s < out.cols; ++s) {
      const int i = s / T;
      const int t = s % T + 1;
      const Point& e = noise.eps[i][t - 1];
      double sq = 0.0;
      for (int k = 0; k < out.rows; ++k) {
        const double r = out(k, s) - e[k];
        sq += r * r;
        d_out(k, s) = 2.0 * w[t - 1] * r;
      }
      total += w[t - 1] * sq;
    }
    return total;
  });
  return obj;
}

}  // namespace ddrl
