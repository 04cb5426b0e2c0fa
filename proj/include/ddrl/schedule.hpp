#pragma once

#include <cmath>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ddrl/error.hpp"

namespace ddrl {

using Point = std::vector<double>;

enum class ScheduleKind { linear };

// Variance of the reverse transition p(x_{t-1} | x_t).
//   beta:      sigma_t^2 = beta_t
//   posterior: sigma_t^2 = beta_t (1 - abar_{t-1}) / (1 - abar_t)
// Under both conventions the first step uses sigma_1^2 = beta_1 when it is
// sampled stochastically; deterministic evaluation skips its noise.
enum class VarianceConvention { beta, posterior };

inline std::string_view to_string(VarianceConvention v) {
  return v == VarianceConvention::beta ? "beta" : "posterior";
}

inline VarianceConvention parse_variance_convention(std::string_view s) {
  if (s == "beta") return VarianceConvention::beta;
  if (s == "posterior") return VarianceConvention::posterior;
  throw ConfigError("schedule.variance", "unknown variance convention '" + std::string(s) + "'");
}

/// Discrete-time noise schedule. Timesteps are 1-based: t = 1..T, x_0 is data
/// and x_T is prior noise. Immutable after construction.
class NoiseSchedule {
 public:
  static NoiseSchedule linear(int steps, double beta_min, double beta_max,
                              VarianceConvention variance = VarianceConvention::beta) {
    if (steps < 1) throw ConfigError("schedule.steps", "must be >= 1");
    if (!(beta_min > 0.0) || !(beta_min < 1.0)) {
      throw ConfigError("schedule.beta_min", "must lie in (0, 1)");
    }
    if (!(beta_max >= beta_min) || !(beta_max < 1.0)) {
      throw ConfigError("schedule.beta_max", "must lie in [beta_min, 1)");
    }
    NoiseSchedule s;
    s.variance_ = variance;
    s.beta_min_ = beta_min;
    s.beta_max_ = beta_max;
    s.beta_.resize(steps);
    for (int i = 0; i < steps; ++i) {
      const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
      s.beta_[i] = beta_min + (beta_max - beta_min) * frac;
    }
    s.derive();
    return s;
  }

  int steps() const { return static_cast<int>(beta_.size()); }
  VarianceConvention variance() const { return variance_; }
  double beta_min() const { return beta_min_; }
  double beta_max() const { return beta_max_; }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  // abar_0 = 1.
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bar_[index(t - 1)]; }
  double sigma(int t) const { return sigma_[index(t)]; }
  double weight(int t) const { return weight_[index(t)]; }

  // Coefficient k_t in mu = (x_t - k_t eps_hat)/sqrt(1 - beta_t), i.e. beta_t/sqrt(1 - abar_t).
  double eps_coef(int t) const { return beta(t) / std::sqrt(1.0 - alpha_bar(t)); }

  std::span<const double> betas() const { return beta_; }
  std::span<const double> alpha_bars() const { return alpha_bar_; }
  std::span<const double> sigmas() const { return sigma_; }
  std::span<const double> weights() const { return weight_; }

  void check_step(int t) const { (void)index(t); }

 private:
  NoiseSchedule() = default;

  std::size_t index(int t) const {
    if (t < 1 || t > steps()) {
      throw IndexError("timestep " + std::to_string(t) + " outside [1, " +
                       std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t - 1);
  }

  void derive() {
    const int n = steps();
    alpha_bar_.resize(n);
    sigma_.resize(n);
    weight_.resize(n);
    double prod = 1.0;
    for (int i = 0; i < n; ++i) {
      prod *= 1.0 - beta_[i];
      alpha_bar_[i] = prod;
    }
    for (int t = 1; t <= n; ++t) {
      const double b = beta_[t - 1];
      double var = b;
      if (variance_ == VarianceConvention::posterior && t >= 2) {
        var = b * (1.0 - alpha_bar_[t - 2]) / (1.0 - alpha_bar_[t - 1]);
      }
      sigma_[t - 1] = std::sqrt(var);
      // KL weight for the eps-parameterized mean gap at step t.
      weight_[t - 1] = b * b / (2.0 * var * (1.0 - b) * (1.0 - alpha_bar_[t - 1]));
    }
  }

  VarianceConvention variance_ = VarianceConvention::beta;
  double beta_min_ = 0.0;
  double beta_max_ = 0.0;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
  std::vector<double> weight_;
};

/// Marginal forward noising x_t = sqrt(abar) x0 + sqrt(1 - abar) eps at a given abar.
inline Point forward_noise_at(std::span<const double> x0, double alpha_bar,
                              std::span<const double> eps) {
  if (x0.size() != eps.size()) throw ShapeError("forward_noise: eps dimension differs from x0");
  const double a = std::sqrt(alpha_bar);
  const double s = std::sqrt(1.0 - alpha_bar);
  Point out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + s * eps[i];
  return out;
}

inline Point forward_noise(std::span<const double> x0, int t, std::span<const double> eps,
                           const NoiseSchedule& sched) {
  return forward_noise_at(x0, sched.alpha_bar(t), eps);
}

}  // namespace ddrl
