#include "trj/targets.hpp"

#include "test_util.hpp"

#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/distributions/normal.hpp>
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

using namespace trj;
using namespace trj::testing;

namespace {

double trapezoid(const std::function<double(double)>& f, double lo, double hi, std::size_t n) {
  const double h = (hi - lo) / static_cast<double>(n);
  double s = 0.5 * (f(lo) + f(hi));
  for (std::size_t i = 1; i < n; ++i) s += f(lo + h * static_cast<double>(i));
  return s * h;
}

}  // namespace

TEST_CASE("sas target parameters and density") {
  const auto t = sas_target();
  CHECK(t->num_models() == 2);
  CHECK(t->dim(0) == 1);
  CHECK(t->dim(1) == 2);
  const Vec pi = *t->true_marginals();
  CHECK(pi[0] == 0.25);
  CHECK(pi[1] == 0.75);
  const Mat& l = t->components()[1].params.chol;
  CHECK((l * l.transpose() - (Mat(2, 2) << 1.0, 0.99, 0.99, 1.0).finished()).cwiseAbs().maxCoeff() < 1e-15);

  const auto maps = t->exact_maps();
  // theta = S_{-2,1}(0) = sinh(-2)
  const Vec at = Vec::Constant(1, std::sinh(-2.0));
  CHECK(t->log_density(0, at) == doctest::Approx(std::log(0.25) + flow_log_density(*maps[0], at)).epsilon(1e-12));
  Rng rng(1);
  std::normal_distribution<double> z(0.0, 2.0);
  for (int i = 0; i < 100; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      Vec th(static_cast<Eigen::Index>(t->dim(k)));
      for (Eigen::Index c = 0; c < th.size(); ++c) th[c] = z(rng);
      const double expect = std::log(pi[static_cast<Eigen::Index>(k)]) + flow_log_density(*maps[k], th);
      CHECK(std::abs(t->log_density(k, th) - expect) < 1e-10 * std::max(1.0, std::abs(expect)));
    }
  }
  CHECK_THROWS_AS(t->log_density(1, Vec::Zero(1)), DimensionError);
  CHECK_THROWS_AS(t->log_density(2, Vec::Zero(1)), std::out_of_range);
  CHECK(t->log_density(0, Vec::Constant(1, std::nan(""))) == kNegInf);
}

TEST_CASE("sas exact sampler") {
  const auto t = sas_target();
  Rng rng(2);
  std::size_t k2 = 0;
  const std::size_t n = 1000000;
  for (std::size_t i = 0; i < n; ++i) k2 += t->sample(rng).k == 1 ? 1 : 0;
  CHECK(std::abs(static_cast<double>(k2) / n - 0.75) < 0.005);

  // Undo S then L: the draws must be white.
  const SasParams& p = t->components()[1].params;
  Mat w(1000000, 2);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const Vec th = t->sample_model(1, rng);
    Vec v(2);
    for (Eigen::Index i = 0; i < 2; ++i) v[i] = std::sinh(p.delta[i] * std::asinh(th[i]) - p.epsilon[i]);
    w.row(r) = p.chol.triangularView<Eigen::Lower>().solve(v).transpose();
  }
  const Vec mean = w.colwise().mean().transpose();
  const Mat c = w.rowwise() - mean.transpose();
  const Mat cov = c.transpose() * c / static_cast<double>(w.rows() - 1);
  CHECK((cov - Mat::Identity(2, 2)).cwiseAbs().maxCoeff() < 0.01);

  SUBCASE("ecdf of model 1 matches the quadrature cdf") {
    std::vector<double> xs(100000);
    for (auto& x : xs) x = t->sample_model(0, rng)[0];
    std::sort(xs.begin(), xs.end());
    // cdf by trapezoid on a fine grid covering the support
    const double lo = -400.0, hi = 20.0;
    const std::size_t m = 2000000;
    const double h = (hi - lo) / m;
    const SasParams& p1 = t->components()[0].params;
    auto dens = [&](double x) { return std::exp(sas_log_pdf(p1, Vec::Constant(1, x))); };
    double sup = 0.0, acc = 0.0, prev = dens(lo);
    std::size_t idx = 0;
    for (std::size_t g = 1; g <= m && idx < xs.size(); ++g) {
      const double x = lo + h * static_cast<double>(g);
      const double cur = dens(x);
      acc += 0.5 * h * (prev + cur);
      prev = cur;
      while (idx < xs.size() && xs[idx] <= x) {
        sup = std::max(sup, std::abs(static_cast<double>(idx + 1) / xs.size() - acc));
        ++idx;
      }
    }
    CHECK(sup < 0.01);
  }
}

TEST_CASE("factor analysis dimensions and packing") {
  const FaTarget fa(Mat::Zero(0, 6), {2, 3});
  CHECK(fa.dim(0) == 17);
  CHECK(fa.dim(1) == 21);
  CHECK(fa_dim(6, 2) == 17);
  CHECK(fa_dim(4, 1) == 8);
  Rng rng(3);
  const Vec th = standard_normal(17, rng);
  Mat b;
  Vec l;
  fa.unpack(0, th, b, l);
  CHECK(b(0, 1) == 0.0);
  CHECK(b(1, 1) == th[2]);
  CHECK(fa.pack(0, b, l) == th);
  const auto mask = fa.positive_mask(0);
  CHECK(std::count(mask.begin(), mask.end(), true) == 8);
  CHECK(mask[0]);
  CHECK(mask[2]);
  CHECK_FALSE(mask[1]);
}

TEST_CASE("factor analysis prior term by term") {
  const FaTarget fa(Mat::Zero(0, 4), {1, 2});
  namespace bm = boost::math;
  const bm::normal_distribution<double> nrm;
  const bm::inverse_gamma_distribution<double> ig(1.1, 0.05);
  Rng rng(4);
  std::uniform_real_distribution<double> pos(0.1, 2.0);
  for (int rep = 0; rep < 5; ++rep) {
    Mat b = Mat::Zero(4, 2);
    for (Eigen::Index i = 0; i < 4; ++i) {
      for (Eigen::Index j = 0; j <= std::min<Eigen::Index>(i, 1); ++j) b(i, j) = i == j ? pos(rng) : standard_normal(1, rng)[0];
    }
    Vec l(4);
    for (auto& v : l) v = pos(rng);
    const Vec th = fa.pack(1, b, l);
    double expect = -std::log(2.0);  // uniform p(k)
    for (Eigen::Index i = 0; i < 4; ++i) {
      for (Eigen::Index j = 0; j <= std::min<Eigen::Index>(i, 1); ++j) {
        expect += std::log((i == j ? 2.0 : 1.0) * bm::pdf(nrm, b(i, j)));
      }
      expect += std::log(bm::pdf(ig, l[i]));
    }
    CHECK(fa.log_density(1, th) == doctest::Approx(expect).epsilon(1e-12));
  }
  Vec th = fa.pack(0, Mat::Constant(4, 1, 0.5), Vec::Ones(4));
  th[0] = -0.1;
  CHECK(fa.log_density(0, th) == kNegInf);
  th[0] = 0.5;
  th[5] = 0.0;
  CHECK(fa.log_density(0, th) == kNegInf);
}

TEST_CASE("factor analysis likelihood") {
  SUBCASE("single zero observation at beta = 0, Lambda = I") {
    const FaTarget fa(Mat::Zero(1, 6), {2});
    const Vec th = fa.pack(0, Mat::Zero(6, 2), Vec::Ones(6));
    CHECK(fa.log_likelihood(0, th) == doctest::Approx(-3.0 * std::log(2.0 * M_PI)).epsilon(1e-14));
  }
  SUBCASE("Cholesky path equals determinant and inverse") {
    Rng rng(5);
    Mat y(20, 6);
    for (Eigen::Index r = 0; r < y.rows(); ++r) y.row(r) = standard_normal(6, rng).transpose();
    const FaTarget fa(y, {2});
    for (int rep = 0; rep < 10; ++rep) {
      Mat b = Mat::Zero(6, 2);
      for (Eigen::Index i = 0; i < 6; ++i) {
        for (Eigen::Index j = 0; j <= std::min<Eigen::Index>(i, 1); ++j) b(i, j) = std::abs(standard_normal(1, rng)[0]);
      }
      const Vec l = (standard_normal(6, rng).array().square() + 0.1).matrix();
      Mat sigma = b * b.transpose();
      sigma.diagonal() += l;
      const Mat inv = sigma.inverse();
      double direct = 0.0;
      for (Eigen::Index r = 0; r < y.rows(); ++r) {
        const Vec yi = y.row(r).transpose();
        direct += -0.5 * yi.dot(inv * yi) - 0.5 * std::log(sigma.determinant()) - 3.0 * kLog2Pi;
      }
      CHECK(fa.log_likelihood(0, fa.pack(0, b, l)) == doctest::Approx(direct).epsilon(1e-10));
    }
  }
}

TEST_CASE("simulated factor analysis data") {
  const Dataset a = simulate_fa_data(Mat::Zero(4, 1), Vec::Ones(4), 100000, 7);
  const Mat ca = a.y.transpose() * a.y / static_cast<double>(a.y.rows());
  CHECK((ca - Mat::Identity(4, 4)).cwiseAbs().maxCoeff() < 0.05);

  Mat b(4, 2);
  b << 0.9, 0.0, 0.5, 0.7, -0.3, 0.4, 0.8, -0.2;
  const Vec l = (Vec(4) << 0.2, 0.3, 0.25, 0.4).finished();
  const Dataset d = simulate_fa_data(b, l, 100000, 8);
  Mat sigma = b * b.transpose();
  sigma.diagonal() += l;
  const Mat cd = d.y.transpose() * d.y / static_cast<double>(d.y.rows());
  CHECK((cd - sigma).cwiseAbs().maxCoeff() < 0.05);
  CHECK(simulate_fa_data(b, l, 10, 8).y == simulate_fa_data(b, l, 10, 8).y);
  Mat bad = b;
  bad(0, 1) = 1.0;
  CHECK_THROWS(simulate_fa_data(bad, l, 10, 1));
  CHECK_THROWS(simulate_fa_data(b, -l, 10, 1));
}

TEST_CASE("variable selection target") {
  const Dataset ds = simulate_vs_data(11);
  const VsTarget vs(ds.x, ds.y.col(0));
  CHECK(vs.dim(3) == 4);
  CHECK(vs.dim(1) == 2);
  CHECK(vs.model_label(2) == "(1,0,1,1)");
  CHECK(vs.layout(2).param_slots == std::vector<std::size_t>{0, 2, 3});

  SUBCASE("all-zero responses") {
    const VsTarget zero(ds.x, Vec::Zero(80));
    const double w = 0.9;
    const double per = std::log(w / std::sqrt(2.0 * M_PI) + (1.0 - w) / (5.0 * std::sqrt(2.0 * M_PI)));
    const double prior = -0.5 * std::log(2.0 * M_PI) - std::log(10.0);
    CHECK(zero.log_density(0, Vec::Zero(1)) == doctest::Approx(-std::log(4.0) + prior + 80.0 * per).epsilon(1e-13));
  }
  SUBCASE("naive oracle") {
    Rng rng(12);
    for (int rep = 0; rep < 5; ++rep) {
      for (std::size_t k = 0; k < 4; ++k) {
        const Vec th = 2.0 * standard_normal(vs.dim(k), rng);
        Vec full = Vec::Zero(4);
        for (std::size_t i = 0; i < vs.dim(k); ++i) full[static_cast<Eigen::Index>(vs.active(k)[i])] = th[static_cast<Eigen::Index>(i)];
        double naive = std::log(0.25);
        for (Eigen::Index i = 0; i < th.size(); ++i) {
          naive += std::log(std::exp(-0.5 * th[i] * th[i] / 100.0) / std::sqrt(2.0 * M_PI * 100.0));
        }
        for (Eigen::Index r = 0; r < 80; ++r) {
          const double res = ds.y(r, 0) - full[0] - full[1] * ds.x(r, 0) - full[2] * ds.x(r, 1) - full[3] * ds.x(r, 2);
          naive += std::log(0.9 * std::exp(-0.5 * res * res) / std::sqrt(2.0 * M_PI) +
                            0.1 * std::exp(-0.5 * res * res / 25.0) / std::sqrt(2.0 * M_PI * 25.0));
        }
        CHECK(vs.log_density(k, th) == doctest::Approx(naive).epsilon(1e-12));
      }
    }
  }
  CHECK_THROWS_AS(VsTarget(Mat::Zero(80, 2), Vec::Zero(80)), DimensionError);
}

TEST_CASE("simulated variable selection data") {
  const Dataset a = simulate_vs_data(1), b = simulate_vs_data(1);
  CHECK(a.y == b.y);
  CHECK(a.x == b.x);
  CHECK(a.y.rows() == 80);
  auto residual_var = [](const Dataset& d) {
    Vec res(80);
    for (Eigen::Index r = 0; r < 80; ++r) res[r] = d.y(r, 0) - (r < 40 ? 1.0 : 6.0) - d.x(r, 0);
    return (res.array() - res.mean()).square().sum() / 79.0;
  };
  // Default experiment seed.
  CHECK(std::abs(residual_var(a) - 25.0) < 5.0);
  CHECK(a.x.colwise().mean().cwiseAbs().maxCoeff() < 0.4);
  // Across seeds the sample variance averages to 25; sd of one value is 25 sqrt(2/79).
  double total = 0.0;
  for (std::uint64_t s = 100; s < 300; ++s) total += residual_var(simulate_vs_data(s));
  CHECK(std::abs(total / 200.0 - 25.0) < 3.0 * 25.0 * std::sqrt(2.0 / 79.0) / std::sqrt(200.0));
}

TEST_CASE("conjugate Gaussian toy evidence matches quadrature") {
  const auto toy = gaussian_toy(1);
  // log_density includes the uniform model prior 1/2
  const double z1 = trapezoid([&](double b) { return std::exp(toy->log_density(0, Vec::Constant(1, b))); }, -10, 10, 20000);
  CHECK(std::log(2.0 * z1) == doctest::Approx(toy->log_evidence(0)).epsilon(1e-8));
  double z2 = 0.0;
  const Vec m = toy->posterior_mean(1);
  const double h = 0.01;
  for (double a = m[0] - 3; a <= m[0] + 3; a += h) {
    for (double b = m[1] - 3; b <= m[1] + 3; b += h) z2 += std::exp(toy->log_density(1, (Vec(2) << a, b).finished()));
  }
  z2 *= h * h;
  CHECK(std::log(2.0 * z2) == doctest::Approx(toy->log_evidence(1)).epsilon(1e-6));
  const Vec pi = *toy->true_marginals();
  CHECK(pi.sum() == doctest::Approx(1.0));
  CHECK(pi[0] > 0.1);
  CHECK(pi[0] < 0.9);
  // exact whitening map pushes the posterior to N(0, I)
  Rng rng(3);
  const auto maps = toy->exact_maps();
  Mat w(100000, 2);
  for (Eigen::Index r = 0; r < w.rows(); ++r) w.row(r) = maps[1]->forward(toy->sample_model(1, rng)).value.transpose();
  CHECK(w.colwise().mean().cwiseAbs().maxCoeff() < 0.02);
}

TEST_CASE("augmented target") {
  const auto base = sas_target();
  const AugmentedTarget aug = augment(base, Reference(1.0));
  CHECK(aug.n_max() == 2);
  const Vec th2 = (Vec(2) << 0.3, -0.4).finished();
  CHECK(aug.log_density(1, th2, Vec()) == base->log_density(1, th2));
  const Vec th1 = Vec::Constant(1, -1.5);
  CHECK(aug.log_density(0, th1, Vec::Zero(1)) == doctest::Approx(base->log_density(0, th1) - 0.5 * kLog2Pi).epsilon(1e-14));
  CHECK_THROWS_AS(aug.log_density(0, th1, Vec()), DimensionError);

  const AugmentedTarget wide = augment(base, Reference(3.0));
  const double integral = trapezoid([&](double u) { return std::exp(wide.log_density(0, th1, Vec::Constant(1, u))); }, -40, 40, 8000);
  CHECK(integral == doctest::Approx(std::exp(base->log_density(0, th1))).epsilon(1e-3));
}

TEST_CASE("csv loader") {
  const std::string path = "test_targets_tmp.csv";
  {
    std::ofstream f(path);
    f << "a,b,c\n1,2,3\n4.5,-6e-1,7\n";
  }
  const Mat m = read_csv_matrix(path, 3);
  CHECK(m.rows() == 2);
  CHECK(m(1, 1) == -0.6);
  CHECK_THROWS(read_csv_matrix(path, 6));
  {
    std::ofstream f(path);
    f << "a,b\n1,2\n3\n";
  }
  CHECK_THROWS_WITH(read_csv_matrix(path), doctest::Contains("ragged"));
  {
    std::ofstream f(path);
    f << "a,b\n1,x\n";
  }
  CHECK_THROWS_WITH(read_csv_matrix(path), doctest::Contains("not a number"));
  std::remove(path.c_str());
}
