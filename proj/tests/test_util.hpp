#pragma once

// Shared oracles and generators for the test suites. Nothing here calls the
// code paths it is used to check (finite differences use only map.forward).

#include "trj/flow.hpp"
#include "trj/transport.hpp"

#include <cmath>
#include <functional>

namespace trj::testing {

/// Central-difference Jacobian of f at x.
inline Mat fd_jacobian(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  const Vec f0 = f(x);
  Mat j(f0.size(), x.size());
  for (Eigen::Index c = 0; c < x.size(); ++c) {
    Vec xp = x, xm = x;
    xp[c] += h;
    xm[c] -= h;
    j.col(c) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return j;
}

inline double fd_logabsdet(const std::function<Vec(const Vec&)>& f, const Vec& x, double h = 1e-5) {
  return std::log(std::abs(fd_jacobian(f, x, h).determinant()));
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

inline Mat random_lower(std::size_t n, Rng& rng, double off = 0.5) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> d(0.5, 1.5);
  Mat l = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    l(i, i) = d(rng);
    for (Eigen::Index j = 0; j < i; ++j) l(i, j) = off * z(rng);
  }
  return l;
}

/// Flow with random conditioner weights everywhere (including the output
/// layer), so the splines are far from the identity.
inline FlowParams random_flow_params(std::size_t n, Rng& rng, std::size_t layers = 3, std::size_t bins = 6,
                                     std::size_t hidden = 8, std::size_t contexts = 1, bool conditional = false,
                                     double out_scale = 0.5) {
  std::normal_distribution<double> z;
  std::uniform_real_distribution<double> sc(0.6, 1.4);
  Mat shift(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(contexts));
  Mat scale(shift.rows(), shift.cols());
  for (Eigen::Index i = 0; i < shift.size(); ++i) {
    shift.data()[i] = 0.3 * z(rng);
    scale.data()[i] = sc(rng);
  }
  std::vector<std::vector<bool>> mask;
  if (conditional) {
    for (std::size_t k = 0; k < contexts; ++k) {
      std::vector<bool> row(n, false);
      for (std::size_t i = n - std::min(k, n - 1); i < n; ++i) row[i] = true;  // k auxiliaries at the tail
      mask.push_back(row);
    }
  }
  FlowConfig cfg{layers, bins, hidden};
  FlowParams p = init_flow_params(n, contexts, conditional, cfg, shift, scale, mask, Reference(1.3), rng);
  for (auto& l : p.layers) {
    for (Eigen::Index i = 0; i < l.w3.size(); ++i) l.w3.data()[i] = out_scale * z(rng) * l.m3.data()[i];
    for (Eigen::Index i = 0; i < l.b3.size(); ++i) l.b3[i] = out_scale * z(rng);
  }
  if (conditional) {
    for (Eigen::Index i = 0; i < p.base_mean.size(); ++i) {
      p.base_mean.data()[i] = 0.2 * z(rng);
      p.base_log_scale.data()[i] = 0.2 * z(rng);
    }
  }
  return p;
}

}  // namespace trj::testing
