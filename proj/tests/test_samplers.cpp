#include "trj/estimators.hpp"
#include "trj/samplers.hpp"

#include "test_util.hpp"

#include <boost/math/distributions/inverse_gamma.hpp>
#include <boost/math/special_functions/digamma.hpp>
#include <doctest.h>

#include <cmath>
#include <sstream>

using namespace trj;
using namespace trj::testing;

namespace {

/// Single-model N(mean, 1) target in one dimension.
class NormalTarget final : public TransdimensionalTarget {
 public:
  explicit NormalTarget(double mean) : mean_(mean) {}
  std::string name() const override { return "normal"; }
  std::size_t num_models() const override { return 1; }
  std::size_t dim(std::size_t) const override { return 1; }

 protected:
  double do_log_density(std::size_t, const Vec& t) const override { return -0.5 * (t[0] - mean_) * (t[0] - mean_); }

 private:
  double mean_;
};

/// Maps that are deliberately not the exact transports.
std::vector<MapPtr> perturbed_maps(const GaussianToyTarget& toy, double scale, double shift) {
  std::vector<MapPtr> maps;
  for (std::size_t k = 0; k < toy.num_models(); ++k) {
    const Vec c = toy.posterior_mean(k).array() + shift;
    maps.push_back(std::make_shared<AffineMap>(c, scale * toy.posterior_chol(k)));
  }
  return maps;
}

std::vector<SlotLayout> layouts_of(const TransdimensionalTarget& t) {
  std::vector<SlotLayout> l;
  for (std::size_t k = 0; k < t.num_models(); ++k) l.push_back(t.layout(k));
  return l;
}

}  // namespace

TEST_CASE("jump distribution") {
  const auto u = JumpDistribution::uniform_others(4);
  CHECK(u.prob(0, 0) == 0.0);
  CHECK(u.prob(2, 1) == doctest::Approx(1.0 / 3.0));
  const auto m = JumpDistribution::from_marginals((Vec(2) << 0.25, 0.75).finished());
  CHECK(m.prob(0, 1) == 0.75);
  CHECK(m.prob(1, 1) == 0.75);
  CHECK_THROWS(JumpDistribution((Mat(2, 2) << 0.5, 0.6, 0.5, 0.5).finished()));
  CHECK_THROWS(JumpDistribution((Mat(2, 2) << -0.5, 1.5, 0.5, 0.5).finished()));
  Rng rng(1);
  std::size_t hits = 0;
  for (int i = 0; i < 100000; ++i) hits += m.draw(0, rng) == 1 ? 1 : 0;
  CHECK(std::abs(hits / 1e5 - 0.75) < 0.005);
  for (int i = 0; i < 1000; ++i) CHECK(u.draw(3, rng) != 3);
}

TEST_CASE("reduced acceptance values") {
  const auto sas = sas_target();
  const auto marg = JumpDistribution::from_marginals(*sas->true_marginals());
  const auto unif = JumpDistribution::uniform_others(2);
  CHECK(acceptance_reduced(*sas, 0, 1, marg) == 1.0);
  CHECK(acceptance_reduced(*sas, 1, 0, unif) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(acceptance_reduced(*sas, 1, 1, unif) == 1.0);
  const FaTarget fa(Mat::Zero(0, 3), {1, 2});
  CHECK_THROWS_AS(acceptance_reduced(fa, 0, 1, unif), std::logic_error);
}

TEST_CASE("exact transports reproduce the reduced acceptance") {
  const auto sas = sas_target();
  const TrjMove move(sas->exact_maps());
  Rng rng(2);
  for (const auto& j : {JumpDistribution::uniform_others(2), JumpDistribution::from_marginals(*sas->true_marginals())}) {
    double worst = 0.0;
    for (int i = 0; i < 2000; ++i) {
      const TransPoint x = sas->sample(rng);
      const auto c = move.propose(*sas, make_state(*sas, x.k, x.theta), 1 - x.k, j, rng);
      worst = std::max(worst, std::abs(c.record.alpha - acceptance_reduced(*sas, x.k, 1 - x.k, j)));
    }
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("equal-dimension jumps draw no auxiliaries") {
  SasParams a{Vec::Constant(1, 0.5), Vec::Constant(1, 1.2), Mat::Identity(1, 1)};
  SasParams b{Vec::Constant(1, -1.0), Vec::Constant(1, 0.8), Mat::Constant(1, 1, 2.0)};
  const auto t = std::make_shared<SasTarget>(std::vector<SasComponent>{{0.4, a}, {0.6, b}});
  const TrjMove move(t->exact_maps());
  const auto j = JumpDistribution::uniform_others(2);
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const TransPoint x = t->sample(rng);
    const auto c = move.propose(*t, make_state(*t, x.k, x.theta), 1 - x.k, j, rng);
    CHECK(c.record.log_aux == 0.0);
    CHECK(c.record.alpha == doctest::Approx(acceptance_reduced(*t, x.k, 1 - x.k, j)).epsilon(1e-10));
  }
}

TEST_CASE("ascending then descending moves are inverse with opposite log ratios") {
  const auto toy = gaussian_toy(1, 30, {1, 3}, (Vec(3) << 1.0, 0.3, -0.2).finished());
  Rng rng(4);
  std::vector<MapPtr> maps{std::make_shared<SplineFlowMap>(random_flow_params(1, rng, 2, 5, 6)),
                           std::make_shared<SplineFlowMap>(random_flow_params(3, rng, 2, 5, 6))};
  const TrjMove move(maps);
  const auto j = JumpDistribution::uniform_others(2);
  for (int i = 0; i < 100; ++i) {
    const Vec theta = toy->posterior_mean(0) + 0.3 * standard_normal(1, rng);
    const Vec u = standard_normal(2, rng);
    const ChainState s = make_state(*toy, 0, theta);
    const Candidate up = move.propose_given(*toy, s, 1, j, u);
    const Candidate down = move.propose_given(*toy, up.state, 0, j, Vec());
    CHECK(std::abs(down.state.theta[0] - theta[0]) < 1e-10);
    // the descending move recovers u as the dropped reference coordinates
    const Vec z = maps[1]->forward(up.state.theta).value;
    CHECK((z.tail(2) - u).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(std::abs(up.record.log_ratio() + down.record.log_ratio()) < 1e-8);
  }
}

TEST_CASE("transport domain errors reject with a flagged record") {
  const auto toy = gaussian_toy(1);
  Rng rng(5);
  std::vector<MapPtr> maps{std::make_shared<SplineFlowMap>(random_flow_params(1, rng)),
                           std::make_shared<SplineFlowMap>(random_flow_params(2, rng))};
  const TrjMove move(maps);
  const auto j = JumpDistribution::uniform_others(2);
  ChainState s = make_state(*toy, 0, Vec::Constant(1, 1e4));
  const Candidate c = move.propose(*toy, s, 1, j, rng);
  CHECK(c.record.domain_error);
  CHECK(c.record.alpha == 0.0);
  const RandomWalkKernel rw = RandomWalkKernel::isotropic(*toy, 0.0);
  const auto rec = rj_step(*toy, s, move, j, rw, rng);
  CHECK_FALSE(rec.accepted);
  CHECK(s.theta[0] == 1e4);
}

TEST_CASE("conditional transport moves") {
  const auto toy = gaussian_toy(1);
  const Reference nu(1.0);
  const auto j = JumpDistribution::uniform_others(2);
  Rng rng(6);

  SUBCASE("identity maps give the saturated-space ratio") {
    const CtrjMove move(std::make_shared<IdentityConditionalMap>(2, 2), nu);
    const Vec theta = Vec::Constant(1, 0.8);
    const Vec u = Vec::Constant(1, -0.3);
    const auto c = move.propose(*toy, make_state(*toy, 0, theta, u), 1, j, rng);
    const Vec theta2 = (Vec(2) << 0.8, -0.3).finished();
    const double by_hand = toy->log_density(1, theta2) - (toy->log_density(0, theta) + nu.log_pdf(-0.3));
    CHECK(c.state.theta == theta2);
    CHECK(c.state.aux.size() == 0);
    CHECK(c.record.alpha == doctest::Approx(std::min(1.0, std::exp(by_hand))).epsilon(1e-13));
  }
  SUBCASE("exact conditional maps reproduce the reduced acceptance") {
    const auto cmap = std::make_shared<StackedConditionalMap>(toy->exact_maps(), layouts_of(*toy), nu);
    const CtrjMove move(cmap, nu);
    for (int i = 0; i < 100; ++i) {
      const TransPoint x = toy->sample(rng);
      const ChainState s = make_state(*toy, x.k, x.theta, move.draw_aux(*toy, x.k, rng));
      const auto c = move.propose(*toy, s, 1 - x.k, j, rng);
      CHECK(std::abs(c.record.alpha - acceptance_reduced(*toy, x.k, 1 - x.k, j)) < 1e-8);
      const auto back = move.propose(*toy, c.state, x.k, j, rng);
      CHECK(std::abs(back.record.log_ratio() + c.record.log_ratio()) < 1e-10);
      CHECK((back.state.theta - x.theta).cwiseAbs().maxCoeff() < 1e-12);
    }
  }
  SUBCASE("same-model draw keeps the auxiliary block") {
    const CtrjMove move(std::make_shared<IdentityConditionalMap>(2, 2), nu);
    const auto stay = JumpDistribution((Mat(2, 2) << 1.0, 0.0, 0.0, 1.0).finished());
    ChainState s = make_state(*toy, 0, Vec::Constant(1, 0.5), Vec::Constant(1, 0.7));
    const auto rw = RandomWalkKernel::isotropic(*toy, 0.5);
    for (int i = 0; i < 20; ++i) {
      const auto rec = rj_step(*toy, s, move, stay, rw, rng);
      CHECK(rec.type == MoveType::Within);
      CHECK(s.aux[0] == 0.7);
    }
  }
}

TEST_CASE("random walk kernel") {
  const NormalTarget n0(0.0), n3(3.0);
  Rng rng(7);
  ChainState s = make_state(n0, 0, Vec::Constant(1, 0.4));
  CHECK(random_walk_step(n0, s, Mat::Zero(1, 1), {}, rng));
  CHECK(s.theta[0] == 0.4);

  std::size_t acc = 0;
  for (int i = 0; i < 100000; ++i) acc += random_walk_step(n0, s, Mat::Constant(1, 1, 2.4), {}, rng) ? 1 : 0;
  CHECK(acc / 1e5 > 0.3);
  CHECK(acc / 1e5 < 0.6);

  ChainState t = make_state(n3, 0, Vec::Constant(1, 3.0));
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    random_walk_step(n3, t, Mat::Constant(1, 1, 2.4), {}, rng);
    sum += t.theta[0];
  }
  CHECK(std::abs(sum / 1e5 - 3.0) < 0.05);

  SUBCASE("log-scale walk on a positive coordinate") {
    // IG prior of the factor model on Lambda with no data: log-walk keeps
    // the iterates positive and matches the prior mean of log Lambda.
    const FaTarget fa(Mat::Zero(0, 1), {1});
    ChainState f = make_state(fa, 0, (Vec(2) << 0.5, 0.5).finished());
    const Mat fac = tune_random_walk(fa, f, fa.positive_mask(0), 2000, 3, rng);
    const auto run = sample_within_model(fa, f, fac, fa.positive_mask(0), 20000, 1000, 5, rng);
    CHECK((run.samples.array() > 0.0).all());
    // E[log Lambda] under IG(a, b) is log b - digamma(a)
    const double expect = std::log(0.05) - boost::math::digamma(1.1);
    CHECK(std::abs(run.samples.col(1).array().log().mean() - expect) < 0.1);
  }
}

TEST_CASE("independence proposals") {
  const auto toy = gaussian_toy(1);
  std::vector<Vec> means{toy->posterior_mean(0), toy->posterior_mean(1)};
  std::vector<Mat> chols{toy->posterior_chol(0), toy->posterior_chol(1)};
  const auto j = JumpDistribution::uniform_others(2);
  Rng rng(8);
  SUBCASE("perfect proposals give the reduced acceptance") {
    const IndependenceMove move(std::make_shared<GaussianIndependence>(means, chols));
    for (int i = 0; i < 100; ++i) {
      const TransPoint x = toy->sample(rng);
      const auto c = move.propose(*toy, make_state(*toy, x.k, x.theta), 1 - x.k, j, rng);
      CHECK(std::abs(c.record.alpha - acceptance_reduced(*toy, x.k, 1 - x.k, j)) < 1e-8);
    }
  }
  SUBCASE("alpha matches a direct evaluation") {
    chols[0] *= 1.7;
    chols[1] *= 0.8;
    const auto q = std::make_shared<GaussianIndependence>(means, chols);
    const IndependenceMove move(q);
    for (int i = 0; i < 20; ++i) {
      const TransPoint x = toy->sample(rng);
      Rng r1(100 + i), r2(100 + i);
      const auto c = move.propose(*toy, make_state(*toy, x.k, x.theta), 1 - x.k, j, r1);
      const std::size_t k2 = 1 - x.k;
      const Vec th2 = means[k2] + chols[k2] * standard_normal(static_cast<std::size_t>(means[k2].size()), r2);
      auto lq = [&](std::size_t k, const Vec& t) {
        const Mat cov = chols[k] * chols[k].transpose();
        const Vec d = t - means[k];
        return -0.5 * d.dot(cov.inverse() * d) - 0.5 * std::log((2.0 * M_PI * cov).determinant());
      };
      const double naive = std::min(1.0, std::exp(toy->log_density(k2, th2) + lq(x.k, x.theta) -
                                                  toy->log_density(x.k, x.theta) - lq(k2, th2)));
      CHECK(c.record.alpha == doctest::Approx(naive).epsilon(1e-12));
    }
  }
}

TEST_CASE("lopes proposal fit and density") {
  Mat b(3, 1);
  b << 0.8, 0.5, -0.4;
  const Vec l = Vec::Constant(3, 0.3);
  const FaTarget fa(simulate_fa_data(b, l, 50, 3).y, {1});
  Rng rng(9);
  // lognormal Lambda draws with known mode exp(m - s^2)
  Mat s(20000, 6);
  std::normal_distribution<double> ln(std::log(0.3), 0.2);
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    s.row(r).head(3) = (b + 0.05 * standard_normal(3, rng)).transpose();
    for (Eigen::Index i = 3; i < 6; ++i) s(r, i) = std::exp(ln(rng));
  }
  const auto q = LopesProposal::fit(fa, {s});
  CHECK(q->upsilon2(0)[0] == doctest::Approx(0.3 * std::exp(-0.04)).epsilon(0.01));
  const Vec th = q->sample(0, rng);
  CHECK((th.tail(3).array() > 0.0).all());
  boost::math::inverse_gamma_distribution<double> ig(18.0, 18.0 * q->upsilon2(0)[1]);
  Vec probe = s.row(0).transpose();
  Vec probe2 = probe;
  probe2[4] *= 1.3;
  // only the Lambda_22 term differs between the two probes
  CHECK(q->log_density(0, probe2) - q->log_density(0, probe) ==
        doctest::Approx(std::log(boost::math::pdf(ig, probe2[4]) / boost::math::pdf(ig, probe[4]))).epsilon(1e-10));
  probe2[3] = -1.0;
  CHECK(q->log_density(0, probe2) == kNegInf);
}

TEST_CASE("run_chain basics") {
  const auto sas = sas_target();
  const TrjMove move(sas->exact_maps());
  const auto j = JumpDistribution::from_marginals(*sas->true_marginals());
  const auto rw = RandomWalkKernel::isotropic(*sas, 0.8);
  Rng rng(10);
  ChainConfig one;
  one.steps = 1;
  const ChainState init = make_state(*sas, 1, sas->sample_model(1, rng));
  CHECK(run_chain(*sas, init, move, j, rw, one, rng).trajectory.size() == 1);

  ChainConfig cfg;
  cfg.steps = 100000;
  Rng a(11), b(11);
  const auto out = run_chain(*sas, init, move, j, rw, cfg, a);
  CHECK(run_chain(*sas, init, move, j, rw, cfg, b).trajectory == out.trajectory);
  CHECK(out.across_rejections() == 0);
  CHECK(std::abs(occupancy(out.trajectory, 2)[1] - 0.75) < 0.01);
  CHECK(running_occupancy(out.trajectory, 1).back() == occupancy(out.trajectory, 2)[1]);

  std::ostringstream csv;
  ChainConfig few;
  few.steps = 3;
  run_chain(*sas, init, move, j, rw, few, rng).write_csv(csv);
  CHECK(csv.str().rfind("step,k,accepted,alpha,move_type\n1,", 0) == 0);
  CHECK_THROWS(run_chain(*sas, make_state(*sas, 0, Vec::Zero(1), Vec::Zero(1)), move, j, rw, few, rng));
}

TEST_CASE("occupancy matches the analytic model probabilities") {
  const auto toy = gaussian_toy(1);
  const double pi2 = (*toy->true_marginals())[1];
  const auto j = JumpDistribution::uniform_others(2);
  const auto rw = RandomWalkKernel::isotropic(*toy, 0.3);
  ChainConfig cfg;
  cfg.steps = 200000;
  auto check = [&](const AcrossMove& move, std::uint64_t seed) {
    Rng rng = make_stream(seed, 0);
    ChainState init = make_state(*toy, 0, toy->posterior_mean(0), move.draw_aux(*toy, 0, rng));
    const auto out = run_chain(*toy, init, move, j, rw, cfg, rng);
    const double occ = occupancy(out.trajectory, 2)[1];
    const double se = occupancy_se(out.trajectory, 1);
    INFO(move.kind(), " occupancy ", occ, " se ", se, " truth ", pi2);
    CHECK(std::abs(occ - pi2) < 3.0 * se);
  };
  check(TrjMove(perturbed_maps(*toy, 1.6, 0.1)), 1);
  check(CtrjMove(std::make_shared<IdentityConditionalMap>(2, 2), Reference(0.5)), 2);
  std::vector<Vec> means{toy->posterior_mean(0), toy->posterior_mean(1)};
  std::vector<Mat> chols{1.5 * toy->posterior_chol(0), 1.5 * toy->posterior_chol(1)};
  check(IndependenceMove(std::make_shared<GaussianIndependence>(means, chols)), 3);
}

TEST_CASE("power ladder") {
  const auto b = power_ladder(5);
  REQUIRE(b.size() == 5);
  CHECK(b.front() == 0.0);
  CHECK(b.back() == 1.0);
  CHECK(b[2] == doctest::Approx(std::pow(0.5, 4)));
  CHECK_THROWS(power_ladder(1));
}

TEST_CASE("stepping-stone evidence on the conjugate toy") {
  const auto toy = gaussian_toy(3);
  TemperingConfig tc;
  tc.betas = power_ladder(16);
  tc.samples = 4000;
  tc.burn_in = 1000;
  tc.thin = 2;
  for (std::size_t k = 0; k < 2; ++k) {
    std::vector<double> est;
    for (std::uint64_t r = 0; r < 4; ++r) {
      Rng rng = make_stream(11, 10 * k + r);
      const auto run = parallel_tempering(*toy, k, tc, rng);
      CHECK(run.samples.rows() == 4000);
      for (double s : run.swap_rate) CHECK(s > 0.1);
      est.push_back(stepping_stone_log_evidence(tc.betas, run.log_lik));
    }
    double mean = 0.0;
    for (double v : est) mean += v / 4.0;
    const double se = std::sqrt(sample_variance(est) / 4.0);
    INFO("k ", k, " ss ", mean, " se ", se, " exact ", toy->log_evidence(k));
    CHECK(std::abs(mean - toy->log_evidence(k)) < 3.0 * se + 0.02);
  }
}

TEST_CASE("tempering rejects a bad ladder") {
  const auto toy = gaussian_toy(3);
  TemperingConfig tc;
  Rng rng(1);
  tc.betas = {0.0, 0.5, 0.4, 1.0};
  CHECK_THROWS(parallel_tempering(*toy, 0, tc, rng));
  tc.betas = {0.1, 1.0};
  CHECK_THROWS(parallel_tempering(*toy, 0, tc, rng));
  CHECK_THROWS(parallel_tempering(*sas_target(), 0, TemperingConfig{power_ladder(4)}, rng));
}
