#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <numeric>

#include "ddrl/diffusion.hpp"

namespace ddrl {
namespace {

// Predicts the exact noise for data concentrated at x0.
struct PointMassOracle {
  Point x0;
  const NoiseSchedule* sched;
  int data_dim() const { return static_cast<int>(x0.size()); }
  Matrix predict(const NetInput& in) const {
    Matrix out(in.x.rows, in.size());
    for (int s = 0; s < in.size(); ++s) {
      const double ab = sched->alpha_bar(in.t[s]);
      for (int k = 0; k < in.x.rows; ++k) out(k, s) = (in.x(k, s) - std::sqrt(ab) * x0[k]) / std::sqrt(1.0 - ab);
    }
    return out;
  }
};

struct ConstModel {
  Point v;
  int data_dim() const { return static_cast<int>(v.size()); }
  Matrix predict(const NetInput& in) const {
    Matrix out(in.x.rows, in.size());
    for (int s = 0; s < in.size(); ++s) {
      for (int k = 0; k < in.x.rows; ++k) out(k, s) = v[k];
    }
    return out;
  }
};

// Delegates conditional queries to a network and poisons unconditional ones.
struct PoisonedNull {
  const EpsNet& net;
  int data_dim() const { return net.architecture().data_dim; }
  Matrix predict(const NetInput& in) const {
    Matrix out = net.predict(in);
    for (int s = 0; s < in.size(); ++s) {
      if (!in.c[s]) {
        for (int k = 0; k < out.rows; ++k) out(k, s) = NAN;
      }
    }
    return out;
  }
};

Architecture arch(int dim, int conds, int steps) {
  Architecture a;
  a.data_dim = dim;
  a.num_conditions = conds;
  a.steps = steps;
  a.hidden_width = 16;
  a.hidden_layers = 2;
  a.time_frequencies = 3;
  a.cond_embed_dim = 3;
  return a;
}

EpsNet scaled_net(const Architecture& a, std::uint64_t seed, double scale) {
  EpsNet net = EpsNet::initialized(a, seed);
  std::vector<double> p(net.params().begin(), net.params().end());
  for (double& v : p) v *= scale;
  net.set_params(p);
  return net;
}

TEST(DiffusionLoss, ExactNoisePredictorHasZeroLoss) {
  const auto sched = NoiseSchedule::linear(10, 0.01, 0.3);
  const PointMassOracle oracle{Point{0.7, -1.2}, &sched};
  std::vector<Example> batch(64, Example{Point{0.7, -1.2}, 0});
  Rng rng(5);
  EXPECT_LT(diffusion_loss(oracle, batch, sched, 0.0, rng), 1e-20);
  EXPECT_LT(diffusion_loss(oracle, batch, sched, 0.0, rng, LossWeighting::elbo), 1e-20);
}

TEST(DiffusionLoss, ZeroNetworkLossIsChiSquareMean) {
  const auto sched = NoiseSchedule::linear(10, 0.01, 0.3);
  const EpsNet zero(arch(2, 1, 10));
  const int n = 20000;
  std::vector<Example> batch(n, Example{Point{0.5, 0.5}, 0});
  Rng rng(6);
  const double loss = diffusion_loss(zero, batch, sched, 0.0, rng);
  EXPECT_NEAR(loss, 2.0, 4.0 * std::sqrt(2.0 * 2.0 / n));
}

TEST(DiffusionLoss, FullDropoutEqualsUnconditionalEvaluation) {
  const auto sched = NoiseSchedule::linear(6, 0.02, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 3, 6), 8);
  std::vector<Example> batch;
  for (int i = 0; i < 40; ++i) batch.push_back({Point{0.1 * i, -0.05 * i}, i % 3});
  Rng a(99);
  const double dropped = diffusion_loss(net, batch, sched, 1.0, a);

  Rng b(99);
  const DiffusionDraws draws = draw_diffusion_noise(batch.size(), 2, sched, 1.0, b);
  NetInput in(2);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    in.add(forward_noise(batch[i].x0, draws.t[i], draws.eps[i], sched), draws.t[i], std::nullopt);
  }
  const Matrix out = net.predict(in);
  double total = 0.0;
  for (int s = 0; s < in.size(); ++s) {
    for (int k = 0; k < 2; ++k) total += (out(k, s) - draws.eps[s][k]) * (out(k, s) - draws.eps[s][k]);
  }
  EXPECT_DOUBLE_EQ(dropped, total / static_cast<double>(batch.size()));
}

TEST(DiffusionLoss, RejectsEmptyBatchAndBadDropout) {
  const auto sched = NoiseSchedule::linear(3, 0.1, 0.2);
  const EpsNet net(arch(1, 1, 3));
  Rng rng(1);
  EXPECT_THROW(diffusion_loss(net, std::vector<Example>{}, sched, 0.0, rng), ArgumentError);
  EXPECT_THROW(diffusion_loss(net, std::vector<Example>{{Point{0.0}, 0}}, sched, 1.5, rng), ArgumentError);
}

TEST(Sampler, ZeroNetworkSingleStepRescalesInitialState) {
  const auto sched = NoiseSchedule::linear(1, 0.2, 0.2);
  const EpsNet zero(arch(2, 1, 1));
  SamplerOptions opt;
  opt.stochastic = false;
  const Trajectory tr = sample_trajectory(zero, 0, sched, opt, 17);
  ASSERT_EQ(tr.states.size(), 2u);
  for (int k = 0; k < 2; ++k) EXPECT_DOUBLE_EQ(tr.sample()[k], tr.x(1)[k] / std::sqrt(0.8));
}

TEST(Sampler, SameSeedSameTrajectory) {
  const auto sched = NoiseSchedule::linear(8, 0.01, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 8), 4);
  const SamplerOptions opt;
  const Trajectory a = sample_trajectory(net, 1, sched, opt, 123);
  const Trajectory b = sample_trajectory(net, 1, sched, opt, 123);
  const Trajectory c = sample_trajectory(net, 1, sched, opt, 124);
  EXPECT_EQ(a.states, b.states);
  EXPECT_NE(a.states, c.states);
}

TEST(Sampler, RecordedMeansAndNoisesReplayEachStep) {
  const auto sched = NoiseSchedule::linear(8, 0.01, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 8), 4);
  for (bool final_noise : {false, true}) {
    SamplerOptions opt;
    opt.final_noise = final_noise;
    const std::vector<Condition> conds = {0, 1, std::nullopt};
    const std::vector<std::uint64_t> seeds = {1, 2, 3};
    for (const Trajectory& tr : sample_trajectories(net, conds, seeds, sched, opt)) {
      for (int t = 8; t >= 1; --t) {
        const Point eps = net.predict(tr.x(t), t, tr.c);
        EXPECT_EQ(tr.mean(t), reverse_mean(tr.x(t), eps, t, sched));
        const double sigma = step_sigma(sched, t, final_noise);
        for (int k = 0; k < 2; ++k) EXPECT_EQ(tr.x(t - 1)[k], tr.mean(t)[k] + sigma * tr.z(t)[k]);
      }
      if (!final_noise) {
        EXPECT_EQ(tr.z(1), (Point{0.0, 0.0}));
      }
    }
  }
}

TEST(Sampler, SharedInitialState) {
  const auto sched = NoiseSchedule::linear(4, 0.05, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 1, 4), 4);
  const Point x_T = {0.25, -0.5};
  const std::vector<Condition> conds(3, 0);
  const std::vector<std::uint64_t> seeds = {7, 8, 9};
  const auto trs = sample_trajectories(net, conds, seeds, sched, SamplerOptions{}, &x_T);
  for (const auto& tr : trs) EXPECT_EQ(tr.x(4), x_T);
  EXPECT_NE(trs[0].sample(), trs[1].sample());
}

TEST(Sampler, UnitGuidanceNeverQueriesUnconditionalBranch) {
  const auto sched = NoiseSchedule::linear(6, 0.02, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 6), 21);
  const PoisonedNull poisoned{net};
  SamplerOptions opt;
  const Trajectory plain = sample_trajectory(net, 1, sched, opt, 5);
  const Trajectory guarded = sample_trajectory(poisoned, 1, sched, opt, 5);
  EXPECT_EQ(plain.states, guarded.states);
  opt.guidance_scale = 2.0;
  const Trajectory guided = sample_trajectory(poisoned, 1, sched, opt, 5);
  EXPECT_TRUE(std::isnan(guided.sample()[0]));
}

TEST(Sampler, GuidanceCombinesBranchesLinearly) {
  const auto sched = NoiseSchedule::linear(1, 0.3, 0.3);
  const EpsNet net = EpsNet::initialized(arch(1, 2, 1), 21);
  const Point x1 = {0.8};
  const std::vector<Condition> conds = {1};
  const std::vector<std::uint64_t> seeds = {3};
  SamplerOptions opt;
  opt.guidance_scale = 3.0;
  const Point got = sample_trajectories(net, conds, seeds, sched, opt, &x1).front().sample();
  const double ec = net.predict(x1, 1, 1)[0];
  const double eu = net.predict(x1, 1, std::nullopt)[0];
  const Point eps = {eu + 3.0 * (ec - eu)};
  EXPECT_EQ(got, reverse_mean(x1, eps, 1, sched));
  opt.guidance_scale = -1.0;
  EXPECT_THROW(sample_trajectories(net, conds, seeds, sched, opt), ArgumentError);
}

TEST(StepLogProb, GaussianHandValues) {
  EXPECT_NEAR(gaussian_log_density(Point{0.0}, Point{0.0}, 1.0), -0.91893853320467274, 1e-14);
  EXPECT_NEAR(gaussian_log_density(Point{0.6, 0.8}, Point{0.0, 0.0}, 0.5), -std::log(2.0 * std::numbers::pi * 0.25) - 2.0,
              1e-14);
  EXPECT_NEAR(gaussian_log_density(Point{0.6, 0.8}, Point{0.0, 0.0}, 0.5), -2.4515827, 1e-7);
  EXPECT_THROW(gaussian_log_density(Point{0.0}, Point{0.0}, 0.0), UndefinedDensityError);
}

TEST(StepLogProb, AtTheMeanIsNormalizer) {
  const auto sched = NoiseSchedule::linear(5, 0.05, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 1, 5), 9);
  const Point x = {0.3, 0.1};
  const Point mu = reverse_mean(x, net.predict(x, 3, 0), 3, sched);
  EXPECT_NEAR(step_log_prob(net, mu, x, 3, 0, sched), -std::log(2.0 * std::numbers::pi * sched.beta(3)), 1e-12);
  EXPECT_THROW(step_log_prob(net, mu, x, 1, 0, sched), UndefinedDensityError);
  EXPECT_NO_THROW(step_log_prob(net, mu, x, 1, 0, sched, true));
}

TEST(StepLogProb, ChainDensityMatchesNoiseDensity) {
  // x_{t-1} = mu + sigma_t z_t, so the chain density is the standard normal
  // density of the z's divided by prod sigma_t^d.
  const auto sched = NoiseSchedule::linear(7, 0.02, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 7), 13);
  SamplerOptions opt;
  opt.final_noise = true;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Trajectory tr = sample_trajectory(net, 0, sched, opt, seed);
    double chain = 0.0, oracle = 0.0;
    for (int t = 1; t <= 7; ++t) {
      chain += step_log_prob(net, tr.x(t - 1), tr.x(t), t, tr.c, sched, true);
      const Point& z = tr.z(t);
      oracle += -0.5 * (z[0] * z[0] + z[1] * z[1]) - std::log(2.0 * std::numbers::pi) - 2.0 * std::log(sched.sigma(t));
    }
    EXPECT_NEAR(chain, oracle, 1e-9 * std::fabs(oracle));
  }
}

TEST(StepLogProb, ObjectiveValueMatchesDirectEvaluation) {
  const auto sched = NoiseSchedule::linear(5, 0.05, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 5), 9);
  const Point x = {0.3, 0.1}, prev = {0.2, -0.4};
  const Objective obj = step_log_prob_objective(prev, x, 4, 1, sched);
  EXPECT_NEAR(obj.value(net), step_log_prob(net, prev, x, 4, 1, sched), 1e-12);
}

TEST(StepKl, IdenticalModelsGiveZero) {
  const auto sched = NoiseSchedule::linear(5, 0.05, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 1, 5), 9);
  EXPECT_EQ(step_kl(net, net, Point{1.0, -1.0}, 3, 0, sched), 0.0);
  EXPECT_THROW(step_kl(net, net, Point{1.0, -1.0}, 1, 0, sched), UndefinedDensityError);
}

TEST(StepKl, UnitMeanGapAndQuadraticScaling) {
  const auto sched = NoiseSchedule::linear(5, 0.05, 0.3);
  const int t = 4;
  // Chosen so the reverse means differ by exactly (1, 0).
  const double e = std::sqrt(1.0 - sched.beta(t)) / sched.eps_coef(t);
  const ConstModel ref{Point{0.0, 0.0}};
  const double kl1 = step_kl(ConstModel{Point{-e, 0.0}}, ref, Point{0.2, 0.3}, t, 0, sched);
  EXPECT_NEAR(kl1, 1.0 / (2.0 * sched.beta(t)), 1e-12);
  const double kl2 = step_kl(ConstModel{Point{-2.0 * e, 0.0}}, ref, Point{0.2, 0.3}, t, 0, sched);
  EXPECT_NEAR(kl2, 4.0 * kl1, 1e-12);
}

TEST(StepKl, NonNegativeAndObjectiveAgrees) {
  const auto sched = NoiseSchedule::linear(5, 0.05, 0.3);
  const EpsNet a = EpsNet::initialized(arch(2, 2, 5), 1);
  const EpsNet b = EpsNet::initialized(arch(2, 2, 5), 2);
  Rng rng(3);
  for (int i = 0; i < 20; ++i) {
    const Point x = {rng.normal(), rng.normal()};
    const int t = 2 + i % 4;
    const double kl = step_kl(a, b, x, t, i % 2, sched);
    EXPECT_GE(kl, 0.0);
    const Objective obj = step_kl_objective(b.predict(x, t, i % 2), x, t, i % 2, sched);
    EXPECT_NEAR(obj.value(a), kl, 1e-12 + 1e-10 * kl);
  }
}

TEST(ElboKl, ExactPredictorHasNoMeanGap) {
  const auto sched = NoiseSchedule::linear(6, 0.02, 0.3);
  const PointMassOracle oracle{Point{1.5, -0.5}, &sched};
  std::vector<Example> data(50, Example{Point{1.5, -0.5}, 0});
  Rng rng(4);
  const ChainNoise noise = draw_chain_noise(data.size(), 2, sched, rng);
  const ElboTerms e = elbo_kl_terms(oracle, data, sched, noise);
  EXPECT_LT(e.mean_gap, 1e-18);
}

TEST(ElboKl, PerSampleValuesFollowTheirData) {
  const auto sched = NoiseSchedule::linear(4, 0.05, 0.3);
  const EpsNet net = EpsNet::initialized(arch(2, 2, 4), 6);
  Rng rng(8);
  std::vector<Example> data;
  for (int i = 0; i < 9; ++i) data.push_back({Point{rng.normal(), rng.normal()}, i % 2});
  const ChainNoise noise = draw_chain_noise(data.size(), 2, sched, rng);
  const std::vector<double> base = elbo_kl_per_sample(net, data, sched, noise);

  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::reverse(perm.begin(), perm.end());
  std::rotate(perm.begin(), perm.begin() + 3, perm.end());
  std::vector<Example> pdata;
  ChainNoise pnoise;
  for (std::size_t j : perm) {
    pdata.push_back(data[j]);
    pnoise.eps.push_back(noise.eps[j]);
  }
  const std::vector<double> permuted = elbo_kl_per_sample(net, pdata, sched, pnoise);
  for (std::size_t i = 0; i < perm.size(); ++i) EXPECT_EQ(permuted[i], base[perm[i]]);
  EXPECT_NEAR(elbo_kl_terms(net, pdata, sched, pnoise).total, elbo_kl_terms(net, data, sched, noise).total, 1e-12);
}

// E_q[log p_theta(x_1 | x_2) + log p_theta(x_0 | x_1)] for a 1-d, two-step
// chain over two-atom data, integrated on a trapezoid grid in standardized
// coordinates. Differences of this quantity are differences of the full-chain
// KL, since everything else is theta-free.
double chain_cross_entropy(const EpsNet& net, const NoiseSchedule& s, const std::vector<std::pair<double, double>>& atoms) {
  const double b1 = s.beta(1), b2 = s.beta(2);
  const double h = 0.1;
  const int m = 181;  // nodes on [-9, 9]
  std::vector<double> u(m), w(m);
  for (int i = 0; i < m; ++i) {
    u[i] = -9.0 + h * i;
    w[i] = h * std::exp(-0.5 * u[i] * u[i]) / std::sqrt(2.0 * std::numbers::pi);
  }
  auto logn = [](double x, double mu, double var) {
    return -0.5 * std::log(2.0 * std::numbers::pi * var) - (x - mu) * (x - mu) / (2.0 * var);
  };
  double total = 0.0;
  for (const auto& [x0, p] : atoms) {
    NetInput in1(1), in2(1);
    for (int i = 0; i < m; ++i) {
      const double x1 = std::sqrt(1.0 - b1) * x0 + std::sqrt(b1) * u[i];
      in1.add(Point{x1}, 1, 0);
      for (int j = 0; j < m; ++j) in2.add(Point{std::sqrt(1.0 - b2) * x1 + std::sqrt(b2) * u[j]}, 2, 0);
    }
    const Matrix e1 = net.predict(in1);
    const Matrix e2 = net.predict(in2);
    double acc = 0.0;
    for (int i = 0; i < m; ++i) {
      const double x1 = in1.x(0, i);
      const double mu1 = (x1 - s.eps_coef(1) * e1(0, i)) / std::sqrt(1.0 - b1);
      double inner = 0.0;
      for (int j = 0; j < m; ++j) {
        const int col = i * m + j;
        const double x2 = in2.x(0, col);
        const double mu2 = (x2 - s.eps_coef(2) * e2(0, col)) / std::sqrt(1.0 - b2);
        inner += w[j] * logn(x1, mu2, b2);
      }
      acc += w[i] * (logn(x0, mu1, b1) + inner);
    }
    total += p * acc;
  }
  return total;
}

TEST(ElboKl, DifferencesMatchFullChainKlOnTwoStepChain) {
  const auto sched = NoiseSchedule::linear(2, 0.1, 0.3);
  const EpsNet a = scaled_net(arch(1, 1, 2), 31, 3.0);
  const EpsNet b = scaled_net(arch(1, 1, 2), 32, 3.0);
  const std::vector<std::pair<double, double>> atoms = {{-1.0, 0.3}, {1.5, 0.7}};
  const double oracle = chain_cross_entropy(b, sched, atoms) - chain_cross_entropy(a, sched, atoms);

  Rng rng(77);
  const int n = 40000;
  std::vector<Example> data;
  for (int i = 0; i < n; ++i) data.push_back({Point{rng.bernoulli(0.3) ? -1.0 : 1.5}, 0});
  const ChainNoise noise = draw_chain_noise(n, 1, sched, rng);
  const std::vector<double> ea = elbo_kl_per_sample(a, data, sched, noise);
  const std::vector<double> eb = elbo_kl_per_sample(b, data, sched, noise);
  double mean = 0.0, sq = 0.0;
  for (int i = 0; i < n; ++i) mean += (ea[i] - eb[i]) / n;
  for (int i = 0; i < n; ++i) sq += (ea[i] - eb[i] - mean) * (ea[i] - eb[i] - mean);
  const double se = std::sqrt(sq / (n - 1) / n);
  EXPECT_GT(std::fabs(oracle), 10.0 * se);
  EXPECT_NEAR(mean, oracle, 4.0 * se);
}

}  // namespace
}  // namespace ddrl
