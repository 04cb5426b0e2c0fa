#pragma once

#include <cmath>
#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "ddrl/error.hpp"

namespace ddrl {

/// A 1-D or 2-D lattice of `points` cell centers per axis spanning [lo, hi].
/// Cell i on an axis covers [lo + (i - 1/2) h, lo + (i + 1/2) h].
struct GridSpec {
  int dims = 1;
  double lo = -10.0;
  double hi = 10.0;
  int points = 4001;

  static GridSpec default_1d() { return {1, -10.0, 10.0, 4001}; }
  static GridSpec default_2d() { return {2, -6.0, 6.0, 241}; }

  double spacing() const { return (hi - lo) / (points - 1); }
  double center(int i) const { return lo + i * spacing(); }
  std::size_t cells() const {
    return dims == 1 ? static_cast<std::size_t>(points) : static_cast<std::size_t>(points) * points;
  }
  double cell_volume() const { return dims == 1 ? spacing() : spacing() * spacing(); }

  // Index of the cell containing x on one axis, clamped to the edge cells.
  // `clipped` is set when x lies outside the window.
  int axis_index(double x, bool& clipped) const {
    const double h = spacing();
    const double pos = std::floor((x - lo) / h + 0.5);
    if (pos < 0.0) {
      clipped = true;
      return 0;
    }
    if (pos > points - 1) {
      clipped = true;
      return points - 1;
    }
    return static_cast<int>(pos);
  }

  void validate() const {
    if (dims != 1 && dims != 2) throw ArgumentError("grid: dims must be 1 or 2");
    if (points < 2) throw ArgumentError("grid: need at least 2 points per axis");
    if (!(hi > lo)) throw ArgumentError("grid: hi must exceed lo");
  }

  bool operator==(const GridSpec&) const = default;
};

/// Probability masses on a GridSpec. For 2-D grids, cell (i, j) is stored at
/// i * points + j where i indexes the first coordinate.
struct GridDensity {
  GridSpec spec;
  std::vector<double> mass;

  double total() const {
    double s = 0.0;
    for (double m : mass) s += m;
    return s;
  }

  // Center coordinates of a flat cell index.
  void cell_center(std::size_t idx, double* out) const {
    if (spec.dims == 1) {
      out[0] = spec.center(static_cast<int>(idx));
    } else {
      out[0] = spec.center(static_cast<int>(idx / spec.points));
      out[1] = spec.center(static_cast<int>(idx % spec.points));
    }
  }

  double mean(int axis) const {
    double m = 0.0;
    double c[2];
    for (std::size_t i = 0; i < mass.size(); ++i) {
      cell_center(i, c);
      m += mass[i] * c[axis];
    }
    return m;
  }

  double variance(int axis) const {
    const double mu = mean(axis);
    double v = 0.0;
    double c[2];
    for (std::size_t i = 0; i < mass.size(); ++i) {
      cell_center(i, c);
      v += mass[i] * (c[axis] - mu) * (c[axis] - mu);
    }
    return v;
  }

  /// CSV with header: x[,y],mass
  void write_csv(std::ostream& os) const {
    os << (spec.dims == 1 ? "x,mass\n" : "x,y,mass\n");
    os.precision(17);
    double c[2];
    for (std::size_t i = 0; i < mass.size(); ++i) {
      cell_center(i, c);
      os << c[0];
      if (spec.dims == 2) os << ',' << c[1];
      os << ',' << mass[i] << '\n';
    }
  }
};

inline double total_variation(const GridDensity& p, const GridDensity& q) {
  if (!(p.spec == q.spec)) throw ArgumentError("total_variation: grids differ");
  double s = 0.0;
  for (std::size_t i = 0; i < p.mass.size(); ++i) s += std::abs(p.mass[i] - q.mass[i]);
  return 0.5 * s;
}

/// Evaluates an unnormalized density at every cell center and normalizes.
template <class F>
GridDensity density_on_grid(const GridSpec& spec, F&& density) {
  spec.validate();
  GridDensity g{spec, std::vector<double>(spec.cells())};
  double c[2];
  double sum = 0.0;
  for (std::size_t i = 0; i < g.mass.size(); ++i) {
    g.cell_center(i, c);
    g.mass[i] = density(std::span<const double>(c, static_cast<std::size_t>(spec.dims)));
    sum += g.mass[i];
  }
  if (!(sum > 0.0)) throw DegenerateTargetError("density vanishes on the whole grid");
  for (double& m : g.mass) m /= sum;
  return g;
}

/// Diagonal Gaussian discretized at cell centers.
inline GridDensity gaussian_on_grid(const GridSpec& spec, std::span<const double> mean, std::span<const double> var) {
  return density_on_grid(spec, [&](std::span<const double> x) {
    double e = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) e += (x[k] - mean[k]) * (x[k] - mean[k]) / var[k];
    return std::exp(-0.5 * e);
  });
}

}  // namespace ddrl
