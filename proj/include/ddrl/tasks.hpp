#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddrl/error.hpp"
#include "ddrl/grid.hpp"
#include "ddrl/random.hpp"
#include "ddrl/schedule.hpp"

namespace ddrl {

/// Diagonal Gaussian descriptor of a closed-form tilted target.
struct GaussianTarget {
  Point mean;
  Point variance;
};

/// A synthetic world: conditional data sampler, analytic reward, and
/// optionally a closed-form tilted target p_data(x|c) exp(r(x, c) / beta).
/// Immutable after construction; samplers draw from caller-owned streams.
class Task {
 public:
  static constexpr int kHoldoutSize = 4096;

  virtual ~Task() = default;

  virtual std::string name() const = 0;
  virtual int dim() const = 0;
  virtual int num_conditions() const = 0;
  virtual bool reward_bounded() const = 0;
  virtual double reward(std::span<const double> x, int c) const = 0;
  // Unnormalized p_data(x | c); used by the grid oracle.
  virtual double data_density(std::span<const double> x, int c) const = 0;
  virtual GridSpec grid() const = 0;
  virtual std::optional<GaussianTarget> closed_form_tilt(int /*c*/, double /*beta*/) const { return std::nullopt; }

  std::vector<Point> sample_data(int c, int n, Rng& rng) const {
    check_condition(c);
    if (n < 1) throw ArgumentError("sample_data: n must be >= 1");
    std::vector<Point> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(sample_one(c, rng));
    return out;
  }

  /// Fixed held-out draws from p_data(.|c), used for hacking diagnostics.
  const std::vector<Point>& holdout(int c) const {
    check_condition(c);
    return holdout_[static_cast<std::size_t>(c)];
  }

  void check_condition(int c) const {
    if (c < 0 || c >= num_conditions()) {
      throw ArgumentError(name() + ": condition " + std::to_string(c) + " outside [0, " +
                          std::to_string(num_conditions()) + ")");
    }
  }

  void check_point(std::span<const double> x) const {
    if (static_cast<int>(x.size()) != dim()) throw ShapeError(name() + ": point dimension mismatch");
  }

 protected:
  virtual Point sample_one(int c, Rng& rng) const = 0;

  // Call at the end of every concrete constructor.
  void init_holdout(std::uint64_t seed) {
    holdout_.clear();
    for (int c = 0; c < num_conditions(); ++c) {
      Rng rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
      std::vector<Point> xs;
      xs.reserve(kHoldoutSize);
      for (int i = 0; i < kHoldoutSize; ++i) xs.push_back(sample_one(c, rng));
      holdout_.push_back(std::move(xs));
    }
  }

 private:
  std::vector<std::vector<Point>> holdout_;
};

using TaskPtr = std::shared_ptr<const Task>;

struct Gauss1dParams {
  double m = 2.0;
  double s = 1.0;
};

/// p_data = N(0, 1); r(x) = -(x - m)^2 / (2 s^2).
class Gauss1d final : public Task {
 public:
  using Params = Gauss1dParams;

  explicit Gauss1d(Params p = {}, std::uint64_t holdout_seed = 7) : p_(p) {
    if (!(p_.s > 0.0)) throw ConfigError("task.params.s", "must be > 0");
    init_holdout(holdout_seed);
  }

  const Params& params() const { return p_; }

  std::string name() const override { return "gauss1d"; }
  int dim() const override { return 1; }
  int num_conditions() const override { return 1; }
  bool reward_bounded() const override { return true; }

  double reward(std::span<const double> x, int /*c*/) const override {
    const double r = x[0] - p_.m;
    return -r * r / (2.0 * p_.s * p_.s);
  }

  double data_density(std::span<const double> x, int /*c*/) const override { return std::exp(-0.5 * x[0] * x[0]); }

  GridSpec grid() const override { return GridSpec::default_1d(); }

  std::optional<GaussianTarget> closed_form_tilt(int c, double beta) const override {
    check_condition(c);
    const double k = 1.0 / (beta * p_.s * p_.s);
    const double v = 1.0 / (1.0 + k);
    return GaussianTarget{{v * p_.m * k}, {v}};
  }

 protected:
  Point sample_one(int /*c*/, Rng& rng) const override { return {rng.normal()}; }

 private:
  Params p_;
};

struct Gmm2dParams {
  // means[c] = {component 0 mean, component 1 mean}
  std::vector<std::array<Point, 2>> means = {
      {Point{-2.0, 0.0}, Point{2.0, 0.0}},
      {Point{0.0, -2.0}, Point{0.0, 2.0}},
  };
  double component_std = 0.5;
  double reward_std = 1.0;
  std::vector<int> preferred = {0, 0};
};

/// Per-condition two-component isotropic mixtures in 2-D; the reward is the
/// log-density of the condition's preferred component.
class Gmm2d final : public Task {
 public:
  using Params = Gmm2dParams;

  explicit Gmm2d(Params p = {}, std::uint64_t holdout_seed = 11) : p_(std::move(p)) {
    if (p_.means.empty()) throw ConfigError("task.params.means", "need at least one condition");
    if (p_.preferred.size() != p_.means.size()) throw ConfigError("task.params.preferred", "one entry per condition");
    for (const auto& pair : p_.means) {
      for (const auto& m : pair) {
        if (m.size() != 2) throw ConfigError("task.params.means", "component means must be 2-D");
      }
    }
    for (int k : p_.preferred) {
      if (k != 0 && k != 1) throw ConfigError("task.params.preferred", "must be 0 or 1");
    }
    if (!(p_.component_std > 0.0)) throw ConfigError("task.params.component_std", "must be > 0");
    if (!(p_.reward_std > 0.0)) throw ConfigError("task.params.reward_std", "must be > 0");
    init_holdout(holdout_seed);
  }

  const Params& params() const { return p_; }

  std::string name() const override { return "gmm2d"; }
  int dim() const override { return 2; }
  int num_conditions() const override { return static_cast<int>(p_.means.size()); }
  bool reward_bounded() const override { return true; }

  double reward(std::span<const double> x, int c) const override {
    const Point& mu = p_.means[static_cast<std::size_t>(c)][static_cast<std::size_t>(p_.preferred[c])];
    const double v = p_.reward_std * p_.reward_std;
    const double sq = (x[0] - mu[0]) * (x[0] - mu[0]) + (x[1] - mu[1]) * (x[1] - mu[1]);
    return -sq / (2.0 * v) - std::log(2.0 * std::numbers::pi * v);
  }

  double data_density(std::span<const double> x, int c) const override {
    const double v = p_.component_std * p_.component_std;
    double p = 0.0;
    for (const Point& mu : p_.means[static_cast<std::size_t>(c)]) {
      const double sq = (x[0] - mu[0]) * (x[0] - mu[0]) + (x[1] - mu[1]) * (x[1] - mu[1]);
      p += 0.5 * std::exp(-sq / (2.0 * v));
    }
    return p;
  }

  GridSpec grid() const override { return GridSpec::default_2d(); }

 protected:
  Point sample_one(int c, Rng& rng) const override {
    const int k = rng.uniform() < 0.5 ? 0 : 1;
    const Point& mu = p_.means[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
    return {mu[0] + p_.component_std * rng.normal(), mu[1] + p_.component_std * rng.normal()};
  }

 private:
  Params p_;
};

/// p_data = N(0, I) in 2-D; r(x) = x_1, unbounded off the data manifold.
class Hackable2d final : public Task {
 public:
  explicit Hackable2d(std::uint64_t holdout_seed = 13) { init_holdout(holdout_seed); }

  std::string name() const override { return "hackable2d"; }
  int dim() const override { return 2; }
  int num_conditions() const override { return 1; }
  bool reward_bounded() const override { return false; }

  double reward(std::span<const double> x, int /*c*/) const override { return x[0]; }

  double data_density(std::span<const double> x, int /*c*/) const override {
    return std::exp(-0.5 * (x[0] * x[0] + x[1] * x[1]));
  }

  GridSpec grid() const override { return GridSpec::default_2d(); }

  std::optional<GaussianTarget> closed_form_tilt(int c, double beta) const override {
    check_condition(c);
    return GaussianTarget{{1.0 / beta, 0.0}, {1.0, 1.0}};
  }

 protected:
  Point sample_one(int /*c*/, Rng& rng) const override { return {rng.normal(), rng.normal()}; }
};

}  // namespace ddrl
