#pragma once

#include "trj/core.hpp"

#include <cmath>

namespace trj {

/// Univariate reference density nu. Only centred Gaussians are needed by the
/// proposals here; `scale` covers both the standard reference and prior-as-
/// reference (e.g. N(0, 10^2)) cases.
class Reference {
 public:
  explicit Reference(double scale = 1.0) : scale_(scale) {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw std::invalid_argument("Reference: scale must be positive");
  }

  double scale() const { return scale_; }

  double log_pdf(double u) const {
    const double z = u / scale_;
    return -0.5 * z * z - 0.5 * kLog2Pi - std::log(scale_);
  }

  double log_pdf(const Vec& u) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < u.size(); ++i) s += log_pdf(u[i]);
    return s;
  }

  double cdf(double u) const { return 0.5 * std::erfc(-u / (scale_ * std::sqrt(2.0))); }

  /// Phi^{-1}(F_nu(u)); closed form for a centred Gaussian.
  double gaussianize(double u) const { return u / scale_; }
  double degaussianize(double z) const { return z * scale_; }
  /// log d/du of gaussianize.
  double gaussianize_logderiv() const { return -std::log(scale_); }

  Vec sample(std::size_t n, Rng& rng) const { return scale_ * standard_normal(n, rng); }

 private:
  double scale_;
};

}  // namespace trj
