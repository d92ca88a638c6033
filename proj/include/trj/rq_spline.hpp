#pragma once

#include "trj/core.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace trj {

enum class Direction { Forward, Inverse };

/// Monotone rational-quadratic spline on [0,1] with B bins.
///
/// Knots (x_j, y_j), j = 0..B, are strictly increasing with x_0 = y_0 = 0 and
/// x_B = y_B = 1; derivatives d_j at the knots are positive.
struct RQSpline {
  std::vector<double> knot_x;
  std::vector<double> knot_y;
  std::vector<double> deriv;

  std::size_t bins() const { return knot_x.empty() ? 0 : knot_x.size() - 1; }

  /// Identity spline with uniform knots.
  static RQSpline identity(std::size_t bins);

  /// Builds a spline from unconstrained conditioner outputs.
  ///
  /// Widths/heights: min_bin + (1 - min_bin * B) * softmax(raw); derivatives:
  /// min_deriv + softplus(raw + c) with c chosen so that raw = 0 gives 1.
  static RQSpline from_raw(std::span<const double> raw_w, std::span<const double> raw_h,
                           std::span<const double> raw_d);

  void validate() const;
};

struct SplineValue {
  double y;
  double logderiv;
};

inline constexpr double kMinBinSize = 1e-3;
inline constexpr double kMinDerivative = 1e-3;

/// Evaluates the spline (forward: x -> y, logderiv = log dy/dx; inverse:
/// y -> x, logderiv = log dx/dy). Throws DomainError outside [0,1].
SplineValue rq_spline_eval(const RQSpline& spline, double x, Direction dir);

/// Locates the bin containing `v` among `knots` (last bin includes the right end).
std::size_t search_bin(std::span<const double> knots, double v);

/// Single-bin rational-quadratic map, generic in the scalar type so the
/// training code can differentiate it with dual numbers.
/// Inputs: x in [x0, x1], knot ends (x0,x1,y0,y1) and end derivatives (d0,d1).
template <typename T>
struct RQBinOut {
  T y;
  T logderiv;
};

template <typename T>
RQBinOut<T> rq_bin_forward(const T& x, const T& x0, const T& x1, const T& y0, const T& y1,
                           const T& d0, const T& d1) {
  using std::log;
  const T w = x1 - x0;
  const T h = y1 - y0;
  const T s = h / w;
  const T xi = (x - x0) / w;
  const T omx = T(1.0) - xi;
  const T xi1mxi = xi * omx;
  const T num = h * (s * xi * xi + d0 * xi1mxi);
  const T den = s + (d1 + d0 - T(2.0) * s) * xi1mxi;
  const T dnum = d1 * xi * xi + T(2.0) * s * xi1mxi + d0 * omx * omx;
  return {y0 + num / den, T(2.0) * log(s) + log(dnum) - T(2.0) * log(den)};
}

}  // namespace trj
