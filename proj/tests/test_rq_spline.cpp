#include "trj/rq_spline.hpp"

#include <doctest.h>

#include <cmath>

using namespace trj;

namespace {

RQSpline random_spline(Rng& rng, std::size_t bins) {
  std::normal_distribution<double> z(0.0, 1.5);
  std::vector<double> w(bins), h(bins), d(bins + 1);
  for (auto& v : w) v = z(rng);
  for (auto& v : h) v = z(rng);
  for (auto& v : d) v = z(rng);
  return RQSpline::from_raw(w, h, d);
}

}  // namespace

TEST_CASE("identity spline is the identity") {
  const RQSpline s = RQSpline::identity(10);
  const auto v = rq_spline_eval(s, 0.37, Direction::Forward);
  CHECK(v.y == doctest::Approx(0.37).epsilon(1e-14));
  CHECK(std::abs(v.logderiv) < 1e-12);
  const auto inv = rq_spline_eval(s, 0.37, Direction::Inverse);
  CHECK(inv.y == doctest::Approx(0.37).epsilon(1e-14));
}

TEST_CASE("knots interpolate exactly") {
  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    const RQSpline s = random_spline(rng, 8);
    s.validate();
    for (std::size_t j = 0; j <= s.bins(); ++j) {
      CHECK(rq_spline_eval(s, s.knot_x[j], Direction::Forward).y == s.knot_y[j]);
    }
  }
}

TEST_CASE("inverse round trip and finite-difference derivative") {
  Rng rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_rt = 0.0, worst_fd = 0.0;
  for (int rep = 0; rep < 10; ++rep) {
    const RQSpline s = random_spline(rng, 10);
    for (int i = 0; i < 100; ++i) {
      const double x = u(rng);
      const auto f = rq_spline_eval(s, x, Direction::Forward);
      const auto b = rq_spline_eval(s, f.y, Direction::Inverse);
      worst_rt = std::max(worst_rt, std::abs(b.y - x));
      CHECK(b.logderiv == doctest::Approx(-f.logderiv).epsilon(1e-9));
      // Five-point stencil kept inside one bin; skip points too close to a knot.
      const std::size_t j = search_bin(s.knot_x, x);
      const double h = std::min(1e-5, 0.4 * std::min(x - s.knot_x[j], s.knot_x[j + 1] - x));
      if (h > 1e-7) {
        auto f_at = [&](double v) { return rq_spline_eval(s, v, Direction::Forward).y; };
        const double fd = (f_at(x - 2 * h) - 8 * f_at(x - h) + 8 * f_at(x + h) - f_at(x + 2 * h)) / (12 * h);
        worst_fd = std::max(worst_fd, std::abs(fd - std::exp(f.logderiv)) / std::exp(f.logderiv));
      }
    }
  }
  CHECK(worst_rt < 1e-12);
  CHECK(worst_fd < 1e-6);
}

TEST_CASE("forward is strictly increasing on a fine grid") {
  Rng rng(5);
  for (int rep = 0; rep < 5; ++rep) {
    const RQSpline s = random_spline(rng, 10);
    double prev = -1.0;
    for (int i = 0; i <= 10000; ++i) {
      const double y = rq_spline_eval(s, i / 10000.0, Direction::Forward).y;
      REQUIRE(y > prev);
      prev = y;
    }
    CHECK(prev == 1.0);
  }
}

TEST_CASE("endpoints map to endpoints and out-of-range input is rejected") {
  Rng rng(7);
  const RQSpline s = random_spline(rng, 5);
  CHECK(rq_spline_eval(s, 0.0, Direction::Forward).y == 0.0);
  CHECK(rq_spline_eval(s, 1.0, Direction::Forward).y == doctest::Approx(1.0).epsilon(1e-15));
  CHECK_THROWS_AS(rq_spline_eval(s, -1e-9, Direction::Forward), DomainError);
  CHECK_THROWS_AS(rq_spline_eval(s, 1.0 + 1e-9, Direction::Inverse), DomainError);
  CHECK_THROWS_AS(rq_spline_eval(s, std::nan(""), Direction::Forward), DomainError);
}

TEST_CASE("validate rejects malformed tables") {
  RQSpline s = RQSpline::identity(3);
  s.knot_x[1] = s.knot_x[2];
  CHECK_THROWS(s.validate());
  s = RQSpline::identity(3);
  s.deriv[0] = 0.0;
  CHECK_THROWS(s.validate());
}
