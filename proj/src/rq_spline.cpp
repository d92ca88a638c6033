#include "trj/rq_spline.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace trj {

namespace {

double softplus(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

std::vector<double> knots_from_raw(std::span<const double> raw) {
  const std::size_t bins = raw.size();
  const double mx = *std::max_element(raw.begin(), raw.end());
  std::vector<double> e(bins);
  double total = 0.0;
  for (std::size_t i = 0; i < bins; ++i) {
    e[i] = std::exp(raw[i] - mx);
    total += e[i];
  }
  const double spread = 1.0 - kMinBinSize * static_cast<double>(bins);
  std::vector<double> knots(bins + 1, 0.0);
  for (std::size_t i = 0; i < bins; ++i) knots[i + 1] = knots[i] + kMinBinSize + spread * e[i] / total;
  knots[bins] = 1.0;
  return knots;
}

}  // namespace

RQSpline RQSpline::identity(std::size_t bins) {
  std::vector<double> zeros(bins, 0.0);
  std::vector<double> zd(bins + 1, 0.0);
  return from_raw(zeros, zeros, zd);
}

RQSpline RQSpline::from_raw(std::span<const double> raw_w, std::span<const double> raw_h,
                            std::span<const double> raw_d) {
  if (raw_w.empty() || raw_w.size() != raw_h.size() || raw_d.size() != raw_w.size() + 1) {
    throw DimensionError("RQSpline::from_raw: inconsistent raw parameter lengths");
  }
  RQSpline s;
  s.knot_x = knots_from_raw(raw_w);
  s.knot_y = knots_from_raw(raw_h);
  const double offset = std::log(std::expm1(1.0 - kMinDerivative));
  s.deriv.resize(raw_d.size());
  for (std::size_t i = 0; i < raw_d.size(); ++i) s.deriv[i] = kMinDerivative + softplus(raw_d[i] + offset);
  return s;
}

void RQSpline::validate() const {
  const std::size_t b = bins();
  if (b == 0 || knot_y.size() != b + 1 || deriv.size() != b + 1) {
    throw std::invalid_argument("RQSpline: knot/derivative tables must have B+1 entries");
  }
  auto check_knots = [](const std::vector<double>& k, const char* name) {
    if (k.front() != 0.0 || k.back() != 1.0) {
      throw std::invalid_argument(std::string("RQSpline: ") + name + " must span [0,1]");
    }
    for (std::size_t i = 1; i < k.size(); ++i) {
      if (!(k[i] > k[i - 1])) throw std::invalid_argument(std::string("RQSpline: ") + name + " not strictly increasing");
    }
  };
  check_knots(knot_x, "knot_x");
  check_knots(knot_y, "knot_y");
  for (double d : deriv) {
    if (!(d > 0.0) || !std::isfinite(d)) throw std::invalid_argument("RQSpline: derivatives must be positive");
  }
}

std::size_t search_bin(std::span<const double> knots, double v) {
  // upper_bound over the interior knots; the right end belongs to the last bin.
  const auto it = std::upper_bound(knots.begin() + 1, knots.end() - 1, v);
  return static_cast<std::size_t>(it - knots.begin()) - 1;
}

SplineValue rq_spline_eval(const RQSpline& spline, double x, Direction dir) {
  if (!(x >= 0.0 && x <= 1.0)) {
    std::ostringstream msg;
    msg << "rq_spline_eval: input " << x << " outside [0,1]";
    throw DomainError(msg.str());
  }
  if (dir == Direction::Forward) {
    const std::size_t j = search_bin(spline.knot_x, x);
    const auto out = rq_bin_forward<double>(x, spline.knot_x[j], spline.knot_x[j + 1], spline.knot_y[j],
                                            spline.knot_y[j + 1], spline.deriv[j], spline.deriv[j + 1]);
    return {out.y, out.logderiv};
  }

  const std::size_t j = search_bin(spline.knot_y, x);
  const double x0 = spline.knot_x[j];
  const double w = spline.knot_x[j + 1] - x0;
  const double y0 = spline.knot_y[j];
  const double h = spline.knot_y[j + 1] - y0;
  const double s = h / w;
  const double d0 = spline.deriv[j];
  const double d1 = spline.deriv[j + 1];
  const double dy = x - y0;
  const double mix = d1 + d0 - 2.0 * s;
  const double a = h * (s - d0) + dy * mix;
  const double b = h * d0 - dy * mix;
  const double c = -s * dy;
  const double disc = std::max(b * b - 4.0 * a * c, 0.0);
  // Stable root: 2c / (-b - sqrt(disc)) avoids cancellation when a ~ 0.
  const double denom = -b - std::sqrt(disc);
  const double xi = denom == 0.0 ? 0.0 : std::clamp(2.0 * c / denom, 0.0, 1.0);
  const double xin = x0 + xi * w;
  const auto fwd = rq_bin_forward<double>(xin, x0, spline.knot_x[j + 1], y0, spline.knot_y[j + 1], d0, d1);
  return {xin, -fwd.logderiv};
}

}  // namespace trj
