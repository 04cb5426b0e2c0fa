#pragma once

#include <atomic>
#include <cstring>
#include <iterator>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddrl/error.hpp"
#include "ddrl/random.hpp"
#include "ddrl/schedule.hpp"

namespace ddrl {

/// A condition index, or nullopt for the reserved null (unconditional) slot.
using Condition = std::optional<int>;

/// Column-major batch: column j holds one sample.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, 0.0) {}

  double* col(int j) { return data.data() + static_cast<std::size_t>(j) * rows; }
  const double* col(int j) const { return data.data() + static_cast<std::size_t>(j) * rows; }
  double& operator()(int i, int j) { return col(j)[i]; }
  double operator()(int i, int j) const { return col(j)[i]; }
};

namespace kernel {

inline int padded(int n) { return (n + 3) / 4 * 4; }

// Four-lane vectors; each lane performs the same IEEE operations as scalar
// code would, so vectorized results are bit-identical per element.
typedef double v4d __attribute__((vector_size(32)));
typedef long long v4i __attribute__((vector_size(32)));

inline v4d load4(const double* p) {
  v4d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store4(double* p, v4d v) { std::memcpy(p, &v, sizeof v); }

inline v4d splat(double x) { return v4d{x, x, x, x}; }

// Y[:, s] = W X[:, s] (+ b) for s in [0, ncols), ncols a multiple of 4.
// W is column-major (out x in). Every column runs through the same
// instruction sequence, so a sample's output never depends on which batch it
// was evaluated in. Each output is bias + sum_k in ascending k.
inline void affine(const double* W, const double* bias, int out, int in, const double* X, int ncols, double* Y) {
  for (int s = 0; s < ncols; s += 4) {
    const double* x[4];
    double* y[4];
    for (int c = 0; c < 4; ++c) {
      x[c] = X + static_cast<std::size_t>(s + c) * in;
      y[c] = Y + static_cast<std::size_t>(s + c) * out;
    }
    int j0 = 0;
    for (; j0 + 8 <= out; j0 += 8) {
      v4d lo[4], hi[4];
      const v4d blo = bias ? load4(bias + j0) : splat(0.0);
      const v4d bhi = bias ? load4(bias + j0 + 4) : splat(0.0);
      for (int c = 0; c < 4; ++c) {
        lo[c] = blo;
        hi[c] = bhi;
      }
      for (int k = 0; k < in; ++k) {
        const double* w = W + static_cast<std::size_t>(k) * out + j0;
        const v4d wlo = load4(w), whi = load4(w + 4);
        for (int c = 0; c < 4; ++c) {
          const v4d a = splat(x[c][k]);
          lo[c] += wlo * a;
          hi[c] += whi * a;
        }
      }
      for (int c = 0; c < 4; ++c) {
        store4(y[c] + j0, lo[c]);
        store4(y[c] + j0 + 4, hi[c]);
      }
    }
    for (; j0 + 4 <= out; j0 += 4) {
      v4d acc[4];
      const v4d b = bias ? load4(bias + j0) : splat(0.0);
      for (int c = 0; c < 4; ++c) acc[c] = b;
      for (int k = 0; k < in; ++k) {
        const v4d w = load4(W + static_cast<std::size_t>(k) * out + j0);
        for (int c = 0; c < 4; ++c) acc[c] += w * splat(x[c][k]);
      }
      for (int c = 0; c < 4; ++c) store4(y[c] + j0, acc[c]);
    }
    for (int j = j0; j < out; ++j) {
      const double b = bias ? bias[j] : 0.0;
      v4d acc = splat(b);
      for (int k = 0; k < in; ++k) {
        const double w = W[static_cast<std::size_t>(k) * out + j];
        acc += splat(w) * v4d{x[0][k], x[1][k], x[2][k], x[3][k]};
      }
      for (int c = 0; c < 4; ++c) y[c][j] = acc[c];
    }
  }
}

// B (cols x rows, column-major) = A^T for A (rows x cols, column-major).
inline void transpose(const double* A, int rows, int cols, double* B) {
  for (int k = 0; k < cols; ++k) {
    for (int j = 0; j < rows; ++j) B[static_cast<std::size_t>(j) * cols + k] = A[static_cast<std::size_t>(k) * rows + j];
  }
}

// tanh from plain arithmetic (range-reduced exp). Absolute error ~1e-16.
inline v4d tanh4(v4d v) {
  const v4d hi = splat(20.0), lo = splat(-20.0);
  v4d x = v > hi ? hi : v;
  x = x < lo ? lo : x;
  const v4d z = x + x;
  // z = m ln2 + r with |r| <= ln2 / 2; m recovered from the shifter's mantissa.
  const v4d shifter = splat(6755399441055744.0);  // 1.5 * 2^52
  const v4d y = z * splat(1.4426950408889634) + shifter;
  const v4d mf = y - shifter;
  const v4d r = (z - mf * splat(6.93147180369123816490e-01)) - mf * splat(1.90821492927058770002e-10);
  static constexpr double coef[] = {1.0 / 479001600.0, 1.0 / 39916800.0, 1.0 / 3628800.0, 1.0 / 362880.0,
                                    1.0 / 40320.0,     1.0 / 5040.0,     1.0 / 720.0,     1.0 / 120.0,
                                    1.0 / 24.0,        1.0 / 6.0,        0.5,             1.0,
                                    1.0};
  v4d p = splat(coef[0]);
  for (std::size_t i = 1; i < std::size(coef); ++i) p = p * r + splat(coef[i]);
  v4i m;
  std::memcpy(&m, &y, sizeof m);
  m -= v4i{0x4338000000000000LL, 0x4338000000000000LL, 0x4338000000000000LL, 0x4338000000000000LL};
  const v4i bits = (m + 1023) << 52;
  v4d scale;
  std::memcpy(&scale, &bits, sizeof scale);
  const v4d e = p * scale;
  return (e - 1.0) / (e + 1.0);
}

inline void tanh_inplace(double* v, std::size_t n) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) store4(v + i, tanh4(load4(v + i)));
  if (i < n) {
    double tail[4] = {0.0, 0.0, 0.0, 0.0};
    std::copy(v + i, v + n, tail);
    store4(tail, tanh4(load4(tail)));
    std::copy(tail, tail + (n - i), v + i);
  }
}

}  // namespace kernel

struct Architecture {
  int data_dim = 1;
  int num_conditions = 1;
  int steps = 20;  // T; time features are periodic in t/T
  int hidden_width = 64;
  int hidden_layers = 3;
  int time_frequencies = 8;
  int cond_embed_dim = 8;

  int input_dim() const { return data_dim + 2 * time_frequencies + cond_embed_dim; }

  int layer_in(int l) const { return l == 0 ? input_dim() : hidden_width; }
  int layer_out(int l) const { return l == hidden_layers ? data_dim : hidden_width; }
  int num_layers() const { return hidden_layers + 1; }

  std::size_t embedding_size() const {
    return static_cast<std::size_t>(num_conditions + 1) * cond_embed_dim;
  }

  std::size_t param_count() const {
    std::size_t n = embedding_size();
    for (int l = 0; l < num_layers(); ++l) {
      n += static_cast<std::size_t>(layer_in(l)) * layer_out(l) + layer_out(l);
    }
    return n;
  }

  void validate() const {
    if (data_dim < 1) throw ConfigError("model.data_dim", "must be >= 1");
    if (num_conditions < 1) throw ConfigError("model.num_conditions", "must be >= 1");
    if (steps < 1) throw ConfigError("model.steps", "must be >= 1");
    if (hidden_width < 1) throw ConfigError("model.hidden_width", "must be >= 1");
    if (hidden_layers < 1) throw ConfigError("model.hidden_layers", "must be >= 1");
    if (time_frequencies < 0) throw ConfigError("model.time_frequencies", "must be >= 0");
    if (cond_embed_dim < 0) throw ConfigError("model.cond_embed_dim", "must be >= 0");
  }

  bool operator==(const Architecture&) const = default;
};

/// Network inputs for a batch of (x_t, t, c) triples.
struct NetInput {
  Matrix x;
  std::vector<int> t;
  std::vector<Condition> c;

  NetInput() = default;
  explicit NetInput(int dim) { x.rows = dim; }

  int size() const { return static_cast<int>(t.size()); }

  void add(std::span<const double> point, int step, Condition cond) {
    if (static_cast<int>(point.size()) != x.rows) throw ShapeError("NetInput: point dimension mismatch");
    x.data.insert(x.data.end(), point.begin(), point.end());
    ++x.cols;
    t.push_back(step);
    c.push_back(cond);
  }

  void reserve(int n) {
    x.data.reserve(static_cast<std::size_t>(n) * x.rows);
    t.reserve(n);
    c.reserve(n);
  }
};

/// Activations retained by a forward pass for the backward pass.
struct ForwardCache {
  int n = 0;
  std::vector<Matrix> acts;  // acts[0] = input features, acts[l] = output of hidden layer l
  Matrix out;                // data_dim x padded(n); only the first n columns are meaningful
  std::vector<int> embed_rows;
};

/// Epsilon predictor eps_theta(x_t, t, c): an MLP with tanh hidden layers over
/// [x_t, sinusoidal time features, learned condition embedding]. Row
/// `num_conditions` of the embedding table is the null condition.
///
/// Parameter layout (canonical order): embedding table (row-major, one row
/// per condition then the null row), then for each layer its weight matrix
/// (column-major, out x in) followed by its bias.
class EpsNet {
 public:
  EpsNet() = default;

  explicit EpsNet(Architecture arch) : arch_(arch) {
    arch_.validate();
    params_.assign(arch_.param_count(), 0.0);
    layout();
  }

  EpsNet(const EpsNet& o)
      : arch_(o.arch_), params_(o.params_), offsets_(o.offsets_), time_features_(o.time_features_) {
    evaluations_.store(o.evaluations_.load());
  }
  EpsNet& operator=(const EpsNet& o) {
    arch_ = o.arch_;
    params_ = o.params_;
    offsets_ = o.offsets_;
    time_features_ = o.time_features_;
    evaluations_.store(o.evaluations_.load());
    return *this;
  }

  /// Uniform fan-in initialization; embedding rows uniform in [-1, 1].
  static EpsNet initialized(Architecture arch, std::uint64_t seed) {
    EpsNet net(arch);
    Rng rng(seed);
    auto& p = net.params_;
    for (std::size_t i = 0; i < arch.embedding_size(); ++i) p[i] = 2.0 * rng.uniform() - 1.0;
    for (int l = 0; l < arch.num_layers(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(arch.layer_in(l)));
      const std::size_t nw = static_cast<std::size_t>(arch.layer_in(l)) * arch.layer_out(l);
      double* w = p.data() + net.offsets_[l];
      for (std::size_t i = 0; i < nw + arch.layer_out(l); ++i) w[i] = bound * (2.0 * rng.uniform() - 1.0);
    }
    return net;
  }

  const Architecture& architecture() const { return arch_; }
  std::size_t param_count() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  void set_params(std::span<const double> p) {
    if (p.size() != params_.size()) throw ShapeError("set_params: length mismatch");
    params_.assign(p.begin(), p.end());
  }

  /// Number of sample evaluations run through forward() since construction.
  std::uint64_t evaluations() const { return evaluations_.load(); }
  void reset_evaluations() { evaluations_.store(0); }

  Point predict(std::span<const double> x, int t, Condition c) const {
    NetInput in(arch_.data_dim);
    in.add(x, t, c);
    const ForwardCache cache = forward(in);
    return Point(cache.out.col(0), cache.out.col(0) + arch_.data_dim);
  }

  Matrix predict(const NetInput& in) const {
    ForwardCache cache = forward(in);
    Matrix out = std::move(cache.out);
    out.cols = in.size();
    out.data.resize(static_cast<std::size_t>(out.rows) * out.cols);
    return out;
  }

  ForwardCache forward(const NetInput& in) const {
    if (in.x.rows != arch_.data_dim) throw ShapeError("EpsNet: input dimension mismatch");
    const int n = in.size();
    const int np = kernel::padded(n);
    ForwardCache cache;
    cache.n = n;
    cache.embed_rows.resize(n);
    cache.acts.reserve(arch_.num_layers());

    const int din = arch_.input_dim();
    Matrix a0(din, np);
    const int d = arch_.data_dim;
    const int nf = arch_.time_frequencies;
    const int ne = arch_.cond_embed_dim;
    for (int s = 0; s < n; ++s) {
      const int t = in.t[s];
      if (t < 1 || t > arch_.steps) throw IndexError("EpsNet: timestep " + std::to_string(t) + " out of range");
      const int row = embed_row(in.c[s]);
      cache.embed_rows[s] = row;
      double* col = a0.col(s);
      const double* xs = in.x.col(s);
      for (int i = 0; i < d; ++i) col[i] = xs[i];
      const double* tf = time_features_.data() + static_cast<std::size_t>(t - 1) * 2 * nf;
      for (int k = 0; k < 2 * nf; ++k) col[d + k] = tf[k];
      const double* emb = params_.data() + static_cast<std::size_t>(row) * ne;
      for (int k = 0; k < ne; ++k) col[d + 2 * nf + k] = emb[k];
    }
    cache.acts.push_back(std::move(a0));

    for (int l = 0; l < arch_.num_layers(); ++l) {
      const int lin = arch_.layer_in(l);
      const int lout = arch_.layer_out(l);
      const double* W = params_.data() + offsets_[l];
      const double* b = W + static_cast<std::size_t>(lin) * lout;
      Matrix y(lout, np);
      kernel::affine(W, b, lout, lin, cache.acts.back().data.data(), np, y.data.data());
      if (l + 1 < arch_.num_layers()) {
        kernel::tanh_inplace(y.data.data(), y.data.size());
        cache.acts.push_back(std::move(y));
      } else {
        cache.out = std::move(y);
      }
    }
    evaluations_.fetch_add(static_cast<std::uint64_t>(n));
    return cache;
  }

  /// Accumulates sum_s <d_out[:, s], d eps(s) / d theta> into `grad`.
  /// Columns are reduced in index order.
  void backward(const ForwardCache& cache, const Matrix& d_out, std::span<double> grad) const {
    if (grad.size() != params_.size()) throw ShapeError("backward: gradient length mismatch");
    if (d_out.rows != arch_.data_dim || d_out.cols < cache.n) throw ShapeError("backward: cotangent shape mismatch");
    const int n = cache.n;
    const int np = kernel::padded(n);
    Matrix delta(arch_.data_dim, np);
    std::copy(d_out.data.begin(), d_out.data.begin() + static_cast<std::ptrdiff_t>(arch_.data_dim) * n,
              delta.data.begin());

    for (int l = arch_.num_layers() - 1; l >= 0; --l) {
      const int lin = arch_.layer_in(l);
      const int lout = arch_.layer_out(l);
      const double* W = params_.data() + offsets_[l];
      double* gW = grad.data() + offsets_[l];
      double* gb = gW + static_cast<std::size_t>(lin) * lout;
      const Matrix& a = cache.acts[l];
      // gW = delta a^T, reduced over samples in ascending order.
      const int lin_p = kernel::padded(lin);
      std::vector<double> at(static_cast<std::size_t>(np) * lin_p, 0.0);
      kernel::transpose(a.data.data(), lin, np, at.data());
      std::vector<double> gw(static_cast<std::size_t>(lout) * lin_p);
      kernel::affine(delta.data.data(), nullptr, lout, np, at.data(), lin_p, gw.data());
      for (std::size_t i = 0; i < static_cast<std::size_t>(lout) * lin; ++i) gW[i] += gw[i];
      std::vector<double> bsum(static_cast<std::size_t>(lout), 0.0);
      for (int s = 0; s < n; ++s) {
        const double* ds = delta.col(s);
        for (int j = 0; j < lout; ++j) bsum[j] += ds[j];
      }
      for (int j = 0; j < lout; ++j) gb[j] += bsum[j];
      std::vector<double> Wt(static_cast<std::size_t>(lin) * lout);
      kernel::transpose(W, lout, lin, Wt.data());
      Matrix prev(lin, np);
      kernel::affine(Wt.data(), nullptr, lin, lout, delta.data.data(), np, prev.data.data());
      if (l > 0) {
        for (int s = 0; s < n; ++s) {
          double* p = prev.col(s);
          const double* h = a.col(s);
          for (int k = 0; k < lin; ++k) p[k] *= 1.0 - h[k] * h[k];
        }
      } else {
        const int off = arch_.data_dim + 2 * arch_.time_frequencies;
        const int ne = arch_.cond_embed_dim;
        for (int s = 0; s < n; ++s) {
          double* ge = grad.data() + static_cast<std::size_t>(cache.embed_rows[s]) * ne;
          const double* p = prev.col(s) + off;
          for (int k = 0; k < ne; ++k) ge[k] += p[k];
        }
      }
      delta = std::move(prev);
    }
  }

  int embed_row(Condition c) const {
    if (!c) return arch_.num_conditions;
    if (*c < 0 || *c >= arch_.num_conditions) {
      throw ArgumentError("condition " + std::to_string(*c) + " outside [0, " +
                          std::to_string(arch_.num_conditions) + ")");
    }
    return *c;
  }

 private:
  void layout() {
    const int nf = arch_.time_frequencies;
    time_features_.resize(static_cast<std::size_t>(arch_.steps) * 2 * nf);
    for (int t = 1; t <= arch_.steps; ++t) {
      const double phase = std::numbers::pi * static_cast<double>(t) / arch_.steps;
      double* tf = time_features_.data() + static_cast<std::size_t>(t - 1) * 2 * nf;
      for (int k = 0; k < nf; ++k) {
        tf[k] = std::sin((k + 1) * phase);
        tf[nf + k] = std::cos((k + 1) * phase);
      }
    }
    offsets_.resize(arch_.num_layers());
    std::size_t off = arch_.embedding_size();
    for (int l = 0; l < arch_.num_layers(); ++l) {
      offsets_[l] = off;
      off += static_cast<std::size_t>(arch_.layer_in(l)) * arch_.layer_out(l) + arch_.layer_out(l);
    }
  }

  Architecture arch_{};
  std::vector<double> params_;
  std::vector<std::size_t> offsets_;
  std::vector<double> time_features_;  // [t - 1][sin..., cos...]
  mutable std::atomic<std::uint64_t> evaluations_{0};
};

/// FNV-1a over the raw parameter bytes; used to assert frozen copies stay frozen.
inline std::uint64_t param_hash(std::span<const double> p) {
  std::uint64_t h = 1469598103934665603ULL;
  const auto* bytes = reinterpret_cast<const unsigned char*>(p.data());
  for (std::size_t i = 0; i < p.size_bytes(); ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

/// Loss on network outputs: returns the value and writes d loss / d output
/// (same shape as `out`, first `out.cols` columns).
using OutputLoss = std::function<double(const Matrix& out, Matrix& d_out)>;

/// A differentiable scalar functional of the parameters, built only from
/// pieces the gradient engine supports: losses on network outputs at fixed
/// inputs, an L2 penalty on parameters, and constants.
class Objective {
 public:
  void add_output_term(NetInput input, OutputLoss loss) {
    terms_.push_back({std::move(input), std::move(loss)});
  }
  void add_param_penalty(double coef) { l2_ += coef; }
  void add_constant(double c) { constant_ += c; }

  double value(const EpsNet& net) const { return evaluate(net, nullptr); }

  /// Returns the value and overwrites `grad` with the exact gradient.
  double value_and_grad(const EpsNet& net, std::vector<double>& grad) const {
    grad.assign(net.param_count(), 0.0);
    return evaluate(net, &grad);
  }

 private:
  struct Term {
    NetInput input;
    OutputLoss loss;
  };

  double evaluate(const EpsNet& net, std::vector<double>* grad) const {
    double total = constant_;
    for (const Term& term : terms_) {
      if (term.input.size() == 0) continue;
      ForwardCache cache = net.forward(term.input);
      Matrix out = cache.out;
      out.cols = cache.n;
      Matrix d_out(out.rows, cache.n);
      total += term.loss(out, d_out);
      if (grad) net.backward(cache, d_out, *grad);
    }
    if (l2_ != 0.0) {
      const auto p = net.params();
      double sq = 0.0;
      for (double v : p) sq += v * v;
      total += 0.5 * l2_ * sq;
      if (grad) {
        for (std::size_t i = 0; i < p.size(); ++i) (*grad)[i] += l2_ * p[i];
      }
    }
    return total;
  }

  std::vector<Term> terms_;
  double l2_ = 0.0;
  double constant_ = 0.0;
};

struct Gradient {
  double value = 0.0;
  std::vector<double> grad;
};

inline Gradient grad(const EpsNet& net, const Objective& objective) {
  Gradient g;
  g.value = objective.value_and_grad(net, g.grad);
  return g;
}

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<double> m;
  std::vector<double> v;
  std::int64_t step = 0;

  AdamState() = default;
  AdamState(AdamConfig cfg, std::size_t n) : config(cfg), m(n, 0.0), v(n, 0.0) {}
};

/// One bias-corrected Adam update (no weight decay). A non-finite gradient
/// leaves params and state untouched and throws NumericError.
inline void adam_step(AdamState& state, std::span<double> params, std::span<const double> g) {
  if (params.size() != g.size() || state.m.size() != g.size() || state.v.size() != g.size()) {
    throw ShapeError("adam_step: length mismatch");
  }
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw NumericError("adam_step: non-finite gradient at index " + std::to_string(i));
    }
  }
  const auto& c = state.config;
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < g.size(); ++i) {
    state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g[i];
    state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g[i] * g[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    params[i] -= c.lr * mhat / (std::sqrt(vhat) + c.eps);
  }
}

/// ema' = decay * ema + (1 - decay) * current, in place.
inline void ema_update(std::span<double> ema, std::span<const double> current, double decay) {
  if (!(decay >= 0.0 && decay <= 1.0)) throw ConfigError("ema_decay", "must lie in [0, 1]");
  if (ema.size() != current.size()) throw ShapeError("ema_update: length mismatch");
  for (std::size_t i = 0; i < ema.size(); ++i) ema[i] = decay * ema[i] + (1.0 - decay) * current[i];
}

inline double l2_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace ddrl
