#include "trj/training.hpp"

#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace trj;
using namespace trj::testing;

namespace {

Mat gaussian_rows(std::size_t rows, std::size_t n, Rng& rng, double scale = 1.0) {
  Mat m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(n));
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r) = scale * standard_normal(n, rng).transpose();
  return m;
}

/// Worst relative error between the analytic gradient and central differences.
double gradient_check(FlowParams p, const Mat& batch, const std::vector<std::size_t>& ctx) {
  Vec grad;
  loss_and_grad(p, batch, ctx, &grad);
  const Vec base = p.flatten();
  REQUIRE(grad.size() == base.size());
  double worst = 0.0;
  for (Eigen::Index i = 0; i < base.size(); ++i) {
    Vec plus = base, minus = base;
    plus[i] += 1e-5;
    minus[i] -= 1e-5;
    p.unflatten(plus);
    const double lp = batch_nll(p, batch, ctx);
    p.unflatten(minus);
    const double lm = batch_nll(p, batch, ctx);
    const double fd = (lp - lm) / 2e-5;
    // Relative error with an absolute floor for near-zero entries.
    worst = std::max(worst, std::abs(fd - grad[i]) / std::max(1e-3, std::abs(fd)));
  }
  p.unflatten(base);
  return worst;
}

}  // namespace

TEST_CASE("gradient matches central differences on a small flow") {
  Rng rng(100);
  for (int rep = 0; rep < 20; ++rep) {
    const FlowParams p = random_flow_params(2, rng, 1, 4, 6, 1, false, 0.8);
    const Mat batch = gaussian_rows(16, 2, rng);
    const double worst = gradient_check(p, batch, {});
    INFO("rep ", rep);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("gradient check through stacked and conditional flows") {
  Rng rng(101);
  SUBCASE("three layers, n = 3") {
    const FlowParams p = random_flow_params(3, rng, 3, 5, 7);
    CHECK(gradient_check(p, gaussian_rows(10, 3, rng), {}) < 1e-4);
  }
  SUBCASE("conditional, n = 3, three contexts") {
    const FlowParams p = random_flow_params(3, rng, 2, 4, 6, 3, true);
    std::vector<std::size_t> ctx;
    for (int i = 0; i < 12; ++i) ctx.push_back(static_cast<std::size_t>(i % 3));
    CHECK(gradient_check(p, gaussian_rows(12, 3, rng), ctx) < 1e-4);
  }
}

TEST_CASE("loss of the initialized flow is the base density of the standardized data") {
  Rng rng(7);
  FlowParams p = init_flow_params(3, 1, false, FlowConfig{3, 10, 16}, Mat::Zero(3, 1), Mat::Ones(3, 1), {},
                                  Reference(1.0), rng);
  const Mat batch = gaussian_rows(64, 3, rng);
  double expected = 0.0;
  for (Eigen::Index r = 0; r < batch.rows(); ++r) {
    expected += 0.5 * batch.row(r).squaredNorm() + 1.5 * std::log(2.0 * M_PI);
  }
  expected /= static_cast<double>(batch.rows());
  CHECK(batch_nll(p, batch) == doctest::Approx(expected).epsilon(1e-10));
}

TEST_CASE("duplicating the batch leaves loss and gradient unchanged") {
  Rng rng(8);
  const FlowParams p = random_flow_params(2, rng, 2, 4, 6);
  const Mat batch = gaussian_rows(20, 2, rng);
  Mat doubled(40, 2);
  doubled << batch, batch;
  Vec g1, g2;
  const double l1 = loss_and_grad(p, batch, {}, &g1);
  const double l2 = loss_and_grad(p, doubled, {}, &g2);
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-13));
  CHECK((g1 - g2).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("loss_and_grad input errors") {
  Rng rng(9);
  const FlowParams p = random_flow_params(2, rng);
  Vec g;
  CHECK_THROWS(loss_and_grad(p, Mat(0, 2), {}, &g));
  CHECK_THROWS_AS(loss_and_grad(p, Mat::Zero(3, 3), {}, &g), DimensionError);
  Mat far = Mat::Zero(2, 2);
  far(1, 0) = 1e4;
  CHECK_THROWS_AS(loss_and_grad(p, far, {}, &g), DomainError);
}

TEST_CASE("fit_flow recovers a standard Gaussian") {
  Rng rng(12);
  const Mat s = gaussian_rows(10000, 2, rng);
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.batch_size = 256;
  cfg.flow = FlowConfig{3, 10, 16};
  const FitResult fit = fit_flow(s, cfg);
  CHECK(flow_log_density(*fit.map, Vec::Zero(2)) == doctest::Approx(-std::log(2.0 * M_PI)).epsilon(0.05 / 1.83788));
  CHECK(fit.report.val_nll.size() == fit.report.epochs_run);
  const double best_val = fit.report.best_epoch == 0 ? fit.report.initial_val_nll
                                                      : fit.report.val_nll[fit.report.best_epoch - 1];
  CHECK(best_val <= fit.report.initial_val_nll);
}

TEST_CASE("fit_flow with zero epochs returns the standardization") {
  Rng rng(13);
  Mat s = gaussian_rows(200, 2, rng, 3.0);
  s.col(1).array() += 5.0;
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.batch_size = 32;
  const FitResult fit = fit_flow(s, cfg);
  Vec shift, scale;
  moment_standardization(s, shift, scale);
  const Vec t = s.row(3).transpose();
  const Vec expect = scale.cwiseProduct(t - shift);
  CHECK((fit.map->forward(t).value - expect).cwiseAbs().maxCoeff() < 1e-10);
  CHECK(fit.report.epochs_run == 0);
}

TEST_CASE("training is deterministic and leaves the standardization frozen") {
  Rng rng(14);
  Mat s = gaussian_rows(400, 2, rng);
  s.col(0) = s.col(0).array().exp().matrix();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  cfg.flow = FlowConfig{2, 6, 8};
  const FitResult a = fit_flow(s, cfg);
  const FitResult b = fit_flow(s, cfg);
  CHECK(a.report.train_nll == b.report.train_nll);
  CHECK(a.report.val_nll == b.report.val_nll);
  Vec shift, scale;
  moment_standardization(s, shift, scale);
  CHECK(a.map->params().shift.col(0) == shift);
  CHECK(a.map->params().scale.col(0) == scale);

  std::ostringstream csv;
  a.report.write_csv(csv);
  CHECK(csv.str().rfind("epoch,train_nll,val_nll\n1,", 0) == 0);
}

TEST_CASE("fit_flow input validation") {
  Rng rng(15);
  TrainConfig cfg;
  cfg.batch_size = 16;
  Mat s = gaussian_rows(100, 2, rng);
  s.col(1).setConstant(2.0);
  CHECK_THROWS_WITH_AS(fit_flow(s, cfg), doctest::Contains("zero variance"), std::invalid_argument);
  CHECK_THROWS(fit_flow(gaussian_rows(20, 2, rng), cfg));
  cfg.validation_fraction = 0.7;
  CHECK_THROWS(fit_flow(gaussian_rows(100, 2, rng), cfg));
}

TEST_CASE("conditional fit improves on its standardization") {
  Rng rng(16);
  std::vector<SlotLayout> layouts{SlotLayout::concatenated(1, 2), SlotLayout::concatenated(2, 2)};
  Mat s(2000, 2);
  std::vector<std::size_t> ctx;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const std::size_t k = static_cast<std::size_t>(r % 2);
    ctx.push_back(k);
    const Vec z = standard_normal(2, rng);
    s.row(r) << std::exp(z[0]), (k == 0 ? z[1] : z[1] + z[0] * z[0]);
  }
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 64;
  cfg.flow = FlowConfig{2, 6, 8};
  const auto fit = fit_conditional_flow(s, ctx, layouts, Reference(1.0), cfg);
  CHECK(fit.map->contexts() == 2);
  double best = fit.report.initial_val_nll;
  for (double v : fit.report.val_nll) best = std::min(best, v);
  CHECK(best < fit.report.initial_val_nll);
}
