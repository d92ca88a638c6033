#include "trj/samplers.hpp"

#include <cmath>
#include <ostream>

namespace trj {

namespace {

double alpha_from_log(double log_ratio) {
  if (std::isnan(log_ratio) || log_ratio == kNegInf) return 0.0;
  return log_ratio >= 0.0 ? 1.0 : std::exp(log_ratio);
}

bool accept(double log_ratio, Rng& rng) {
  if (std::isnan(log_ratio)) return false;
  return std::log(uniform01(rng)) < log_ratio;
}

double log_ig(double x, double shape, double scale) {
  if (!(x > 0.0)) return kNegInf;
  return shape * std::log(scale) - std::lgamma(shape) - (shape + 1.0) * std::log(x) - scale / x;
}

double log_mvn_chol(const Vec& x, const Vec& mean, const Mat& chol) {
  const Vec w = chol.triangularView<Eigen::Lower>().solve(x - mean);
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < chol.rows(); ++i) logdet += std::log(chol(i, i));
  return -0.5 * w.squaredNorm() - logdet - 0.5 * static_cast<double>(x.size()) * kLog2Pi;
}

void finish(ProposalRecord& rec) { rec.alpha = alpha_from_log(rec.log_ratio()); }

/// Walked coordinates: log on positive entries.
Vec to_walk(const Vec& theta, const std::vector<bool>& positive) {
  Vec phi = theta;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) phi[static_cast<Eigen::Index>(i)] = std::log(theta[static_cast<Eigen::Index>(i)]);
  }
  return phi;
}

/// Returns alpha; updates `state` if accepted.
double rw_step(const TransdimensionalTarget& target, ChainState& state, const Mat& factor,
               const std::vector<bool>& positive, Rng& rng, bool& accepted) {
  const Eigen::Index n = state.theta.size();
  if (factor.rows() != n || factor.cols() != n) throw DimensionError("random_walk_step: factor shape");
  const Vec step = factor * standard_normal(static_cast<std::size_t>(n), rng);
  Vec prop = state.theta;
  double log_jac = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (static_cast<std::size_t>(i) < positive.size() && positive[static_cast<std::size_t>(i)]) {
      prop[i] = state.theta[i] * std::exp(step[i]);
      log_jac += step[i];
    } else {
      prop[i] += step[i];
    }
  }
  const double lt = target.log_density(state.k, prop);
  const double log_ratio = lt == kNegInf ? kNegInf : lt - state.log_density + log_jac;
  accepted = accept(log_ratio, rng);
  if (accepted) {
    state.theta = std::move(prop);
    state.log_density = lt;
  }
  return alpha_from_log(log_ratio);
}

}  // namespace

// ------------------------------------------------------------- jumps

JumpDistribution::JumpDistribution(Mat probs) : p_(std::move(probs)) {
  if (p_.rows() == 0 || p_.rows() != p_.cols()) throw DimensionError("JumpDistribution: matrix must be square");
  for (Eigen::Index r = 0; r < p_.rows(); ++r) {
    if ((p_.row(r).array() < 0.0).any() || !p_.row(r).allFinite()) {
      throw std::invalid_argument("JumpDistribution: row " + std::to_string(r) + " has invalid entries");
    }
    if (std::abs(p_.row(r).sum() - 1.0) > 1e-12) {
      throw std::invalid_argument("JumpDistribution: row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

JumpDistribution JumpDistribution::uniform_others(std::size_t num_models) {
  const auto n = static_cast<Eigen::Index>(num_models);
  if (n == 1) return JumpDistribution(Mat::Ones(1, 1));
  Mat p = Mat::Constant(n, n, 1.0 / static_cast<double>(n - 1));
  p.diagonal().setZero();
  return JumpDistribution(p);
}

JumpDistribution JumpDistribution::from_marginals(const Vec& pi) {
  Mat p(pi.size(), pi.size());
  for (Eigen::Index r = 0; r < p.rows(); ++r) p.row(r) = pi.transpose() / pi.sum();
  return JumpDistribution(p);
}

double JumpDistribution::log_prob(std::size_t k, std::size_t to) const { return std::log(prob(k, to)); }

std::size_t JumpDistribution::draw(std::size_t k, Rng& rng) const {
  if (k >= size()) throw std::out_of_range("JumpDistribution::draw: model index");
  double u = uniform01(rng);
  const auto r = static_cast<Eigen::Index>(k);
  for (Eigen::Index c = 0; c < p_.cols(); ++c) {
    u -= p_(r, c);
    if (u < 0.0 && p_(r, c) > 0.0) return static_cast<std::size_t>(c);
  }
  // Rounding left u marginally non-negative: take the last reachable model.
  for (Eigen::Index c = p_.cols() - 1; c >= 0; --c) {
    if (p_(r, c) > 0.0) return static_cast<std::size_t>(c);
  }
  return k;
}

std::string_view to_string(MoveType t) { return t == MoveType::Within ? "within" : "across"; }

ChainState make_state(const TransdimensionalTarget& target, std::size_t k, Vec theta, Vec aux) {
  ChainState s;
  s.k = k;
  s.log_density = target.log_density(k, theta);
  s.theta = std::move(theta);
  s.aux = std::move(aux);
  return s;
}

// ------------------------------------------------------- across moves

Candidate AcrossMove::propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                              const JumpDistribution& j, Rng& rng) const {
  if (to >= target.num_models() || j.size() != target.num_models()) {
    throw std::out_of_range(kind() + ": destination model out of range");
  }
  if (to == state.k) throw std::invalid_argument(kind() + ": across-model move to the same model");
  try {
    return do_propose(target, state, to, j, rng);
  } catch (const DomainError&) {
    Candidate c{state, {}};
    c.record.from = state.k;
    c.record.to = to;
    c.record.domain_error = true;
    c.record.log_target = kNegInf;
    c.record.alpha = 0.0;
    return c;
  }
}

Vec AcrossMove::draw_aux(const TransdimensionalTarget& target, std::size_t k, Rng&) const {
  require_dim(aux_dim(target, k), 0, "AcrossMove::draw_aux");
  return Vec();
}

TrjMove::TrjMove(std::vector<MapPtr> maps, Reference nu) : maps_(std::move(maps)), nu_(nu) {
  if (maps_.empty()) throw std::invalid_argument("TrjMove: no maps");
  for (const auto& m : maps_) {
    if (!m) throw std::invalid_argument("TrjMove: null map");
  }
}

Candidate TrjMove::propose_given(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                                 const JumpDistribution& j, const Vec& u) const {
  const std::size_t k = state.k;
  if (maps_.size() != target.num_models()) throw DimensionError("TrjMove: one map per model required");
  const std::size_t nk = target.dim(k), nt = target.dim(to);
  require_dim(maps_[k]->dim(), nk, "TrjMove: map dimension");
  require_dim(maps_[to]->dim(), nt, "TrjMove: map dimension");

  Candidate c;
  ProposalRecord& rec = c.record;
  rec.from = k;
  rec.to = to;
  const MapResult f = maps_[k]->forward(state.theta);
  Vec z(static_cast<Eigen::Index>(nt));
  if (nt > nk) {
    require_dim(static_cast<std::size_t>(u.size()), nt - nk, "TrjMove: auxiliary draw");
    z << f.value, u;
    rec.log_aux = -nu_.log_pdf(u);
  } else if (nt < nk) {
    z = f.value.head(static_cast<Eigen::Index>(nt));
    rec.log_aux = nu_.log_pdf(Vec(f.value.tail(static_cast<Eigen::Index>(nk - nt))));
  } else {
    z = f.value;
  }
  const MapResult b = maps_[to]->inverse(z);
  const double lt = target.log_density(to, b.value);
  rec.log_target = lt - state.log_density;
  rec.log_jump = j.log_prob(to, k) - j.log_prob(k, to);
  rec.log_jacobian = f.logdet + b.logdet;
  finish(rec);
  c.state = ChainState{to, b.value, Vec(), lt};
  return c;
}

Candidate TrjMove::do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                              const JumpDistribution& j, Rng& rng) const {
  const std::size_t nk = target.dim(state.k), nt = target.dim(to);
  const Vec u = nt > nk ? nu_.sample(nt - nk, rng) : Vec();
  return propose_given(target, state, to, j, u);
}

CtrjMove::CtrjMove(ConditionalMapPtr map, Reference nu) : map_(std::move(map)), nu_(nu) {
  if (!map_) throw std::invalid_argument("CtrjMove: null map");
}

Vec CtrjMove::draw_aux(const TransdimensionalTarget& target, std::size_t k, Rng& rng) const {
  return nu_.sample(aux_dim(target, k), rng);
}

Candidate CtrjMove::do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                               const JumpDistribution& j, Rng&) const {
  const std::size_t k = state.k;
  require_dim(map_->dim(), target.max_dim(), "CtrjMove: map dimension");
  if (map_->contexts() != target.num_models()) throw DimensionError("CtrjMove: map contexts must equal model count");
  require_dim(static_cast<std::size_t>(state.aux.size()), aux_dim(target, k), "CtrjMove: auxiliary block");

  const Vec xi = target.layout(k).embed(state.theta, state.aux);
  const MapResult f = map_->forward(xi, k);
  const MapResult b = map_->inverse(f.value, to);
  Candidate c;
  target.layout(to).split(b.value, c.state.theta, c.state.aux);
  c.state.k = to;
  c.state.log_density = target.log_density(to, c.state.theta);

  ProposalRecord& rec = c.record;
  rec.from = k;
  rec.to = to;
  rec.log_target = c.state.log_density - state.log_density;
  rec.log_aux = nu_.log_pdf(c.state.aux) - nu_.log_pdf(state.aux);
  rec.log_jump = j.log_prob(to, k) - j.log_prob(k, to);
  rec.log_jacobian = f.logdet + b.logdet;
  finish(rec);
  return c;
}

// -------------------------------------------------- independence moves

GaussianIndependence::GaussianIndependence(std::vector<Vec> means, std::vector<Mat> chols)
    : means_(std::move(means)), chols_(std::move(chols)) {
  if (means_.size() != chols_.size() || means_.empty()) throw DimensionError("GaussianIndependence: size mismatch");
  for (std::size_t k = 0; k < means_.size(); ++k) {
    if (chols_[k].rows() != means_[k].size() || chols_[k].cols() != means_[k].size()) {
      throw DimensionError("GaussianIndependence: factor shape");
    }
  }
}

double GaussianIndependence::log_density(std::size_t k, const Vec& theta) const {
  return log_mvn_chol(theta, means_.at(k), chols_.at(k));
}

Vec GaussianIndependence::sample(std::size_t k, Rng& rng) const {
  return means_.at(k) + chols_.at(k) * standard_normal(static_cast<std::size_t>(means_.at(k).size()), rng);
}

LopesProposal::LopesProposal(std::vector<std::size_t> num_loadings, std::vector<Vec> beta_mean,
                             std::vector<Mat> beta_chol, std::vector<Vec> upsilon2, double shape)
    : nb_(std::move(num_loadings)),
      mean_(std::move(beta_mean)),
      chol_(std::move(beta_chol)),
      ups2_(std::move(upsilon2)),
      shape_(shape) {
  if (nb_.size() != mean_.size() || mean_.size() != chol_.size() || chol_.size() != ups2_.size()) {
    throw DimensionError("LopesProposal: size mismatch");
  }
  if (!(shape > 0.0)) throw std::invalid_argument("LopesProposal: shape must be positive");
}

std::shared_ptr<LopesProposal> LopesProposal::fit(const FaTarget& target, const std::vector<Mat>& samples,
                                                  double shape, double cov_scale) {
  require_dim(samples.size(), target.num_models(), "LopesProposal::fit: sample sets");
  std::vector<std::size_t> nb;
  std::vector<Vec> mean, ups;
  std::vector<Mat> chol;
  const auto d = static_cast<Eigen::Index>(target.data_dim());
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const Mat& s = samples[k];
    require_dim(static_cast<std::size_t>(s.cols()), target.dim(k), "LopesProposal::fit: sample width");
    const auto p = static_cast<Eigen::Index>(target.num_loadings(k));
    if (s.rows() < p + 2) throw std::invalid_argument("LopesProposal::fit: too few samples");
    const Mat b = s.leftCols(p);
    const Vec mu = b.colwise().mean().transpose();
    const Mat c = b.rowwise() - mu.transpose();
    const Mat cov = cov_scale * (c.transpose() * c) / static_cast<double>(s.rows() - 1);
    nb.push_back(static_cast<std::size_t>(p));
    mean.push_back(mu);
    chol.push_back(cholesky_lower(cov, "LopesProposal::fit: loading covariance"));
    const Mat logl = s.rightCols(d).array().log().matrix();
    const Vec m = logl.colwise().mean().transpose();
    const Vec v = ((logl.rowwise() - m.transpose()).array().square().colwise().sum() /
                   static_cast<double>(s.rows() - 1))
                      .transpose();
    ups.push_back((m - v).array().exp().matrix());
  }
  return std::make_shared<LopesProposal>(nb, mean, chol, ups, shape);
}

double LopesProposal::log_density(std::size_t k, const Vec& theta) const {
  const auto p = static_cast<Eigen::Index>(nb_.at(k));
  const Vec& u2 = ups2_[k];
  require_dim(static_cast<std::size_t>(theta.size()), static_cast<std::size_t>(p + u2.size()), "LopesProposal");
  double lq = log_mvn_chol(theta.head(p), mean_[k], chol_[k]);
  for (Eigen::Index i = 0; i < u2.size(); ++i) lq += log_ig(theta[p + i], shape_, shape_ * u2[i]);
  return lq;
}

Vec LopesProposal::sample(std::size_t k, Rng& rng) const {
  const auto p = static_cast<Eigen::Index>(nb_.at(k));
  const Vec& u2 = ups2_[k];
  Vec theta(p + u2.size());
  theta.head(p) = mean_[k] + chol_[k] * standard_normal(static_cast<std::size_t>(p), rng);
  std::gamma_distribution<double> g(shape_, 1.0);
  for (Eigen::Index i = 0; i < u2.size(); ++i) theta[p + i] = shape_ * u2[i] / g(rng);
  return theta;
}

Candidate IndependenceMove::do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                                       const JumpDistribution& j, Rng& rng) const {
  if (q_->num_models() != target.num_models()) throw DimensionError("IndependenceMove: one proposal per model");
  Candidate c;
  c.state.k = to;
  c.state.theta = q_->sample(to, rng);
  c.state.log_density = target.log_density(to, c.state.theta);
  ProposalRecord& rec = c.record;
  rec.from = state.k;
  rec.to = to;
  rec.log_target = c.state.log_density - state.log_density;
  rec.log_jump = j.log_prob(to, state.k) - j.log_prob(state.k, to);
  rec.log_aux = q_->log_density(state.k, state.theta) - q_->log_density(to, c.state.theta);
  finish(rec);
  return c;
}

double acceptance_reduced(const TransdimensionalTarget& target, std::size_t k, std::size_t to,
                          const JumpDistribution& j) {
  const auto pi = target.true_marginals();
  if (!pi) throw std::logic_error("acceptance_reduced: model probabilities unknown for " + target.name());
  if (k == to) return 1.0;
  const double r = ((*pi)[static_cast<Eigen::Index>(to)] * j.prob(to, k)) /
                   ((*pi)[static_cast<Eigen::Index>(k)] * j.prob(k, to));
  return std::min(1.0, r);
}

// ------------------------------------------------------- within model

RandomWalkKernel::RandomWalkKernel(std::vector<Mat> factors, std::vector<std::vector<bool>> positive)
    : factors_(std::move(factors)), positive_(std::move(positive)) {
  if (positive_.empty()) positive_.resize(factors_.size());
  if (positive_.size() != factors_.size()) throw DimensionError("RandomWalkKernel: size mismatch");
}

RandomWalkKernel RandomWalkKernel::isotropic(const TransdimensionalTarget& target, double scale) {
  if (!(scale >= 0.0)) throw std::invalid_argument("RandomWalkKernel: scale must be non-negative");
  std::vector<Mat> f;
  std::vector<std::vector<bool>> pos;
  for (std::size_t k = 0; k < target.num_models(); ++k) {
    const auto n = static_cast<Eigen::Index>(target.dim(k));
    f.push_back(scale * Mat::Identity(n, n));
    pos.push_back(target.positive_mask(k));
  }
  return RandomWalkKernel(f, pos);
}

bool RandomWalkKernel::step(const TransdimensionalTarget& target, ChainState& state, Rng& rng) const {
  return random_walk_step(target, state, factors_.at(state.k), positive_.at(state.k), rng);
}

bool random_walk_step(const TransdimensionalTarget& target, ChainState& state, const Mat& factor,
                      const std::vector<bool>& positive, Rng& rng) {
  bool accepted = false;
  rw_step(target, state, factor, positive, rng, accepted);
  return accepted;
}

Mat tune_random_walk(const TransdimensionalTarget& target, ChainState& state, const std::vector<bool>& positive,
                     std::size_t pilot_steps, std::size_t rounds, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(state.theta.size());
  if (pilot_steps < 10) throw std::invalid_argument("tune_random_walk: need at least 10 pilot steps");
  Mat factor = 0.1 * Mat::Identity(n, n);
  for (std::size_t r = 0; r < rounds; ++r) {
    Mat walk(static_cast<Eigen::Index>(pilot_steps), n);
    std::size_t acc = 0;
    for (std::size_t s = 0; s < pilot_steps; ++s) {
      acc += random_walk_step(target, state, factor, positive, rng) ? 1 : 0;
      walk.row(static_cast<Eigen::Index>(s)) = to_walk(state.theta, positive).transpose();
    }
    if (acc < pilot_steps / 50) {
      factor *= 0.3;
      continue;
    }
    const Vec mu = walk.colwise().mean().transpose();
    const Mat c = walk.rowwise() - mu.transpose();
    Mat cov = c.transpose() * c / static_cast<double>(pilot_steps - 1);
    cov.diagonal().array() += 1e-12 + 1e-9 * cov.diagonal().array();
    factor = 2.38 / std::sqrt(static_cast<double>(n)) * cholesky_lower(cov, "tune_random_walk: pilot covariance");
  }
  return factor;
}

WithinModelRun sample_within_model(const TransdimensionalTarget& target, ChainState state, const Mat& factor,
                                   const std::vector<bool>& positive, std::size_t n_samples, std::size_t burn_in,
                                   std::size_t thin, Rng& rng) {
  if (thin == 0) throw std::invalid_argument("sample_within_model: thin must be positive");
  if (state.log_density == kNegInf) throw std::invalid_argument("sample_within_model: start outside the support");
  for (std::size_t s = 0; s < burn_in; ++s) random_walk_step(target, state, factor, positive, rng);
  WithinModelRun out;
  out.samples.resize(static_cast<Eigen::Index>(n_samples), state.theta.size());
  std::size_t acc = 0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (std::size_t t = 0; t < thin; ++t) acc += random_walk_step(target, state, factor, positive, rng) ? 1 : 0;
    out.samples.row(static_cast<Eigen::Index>(i)) = state.theta.transpose();
  }
  out.acceptance_rate = n_samples ? static_cast<double>(acc) / static_cast<double>(n_samples * thin) : 0.0;
  return out;
}

// --------------------------------------------------------- tempering

std::vector<double> power_ladder(std::size_t n, double power) {
  if (n < 2) throw std::invalid_argument("power_ladder: need at least two rungs");
  if (!(power > 0.0)) throw std::invalid_argument("power_ladder: power must be positive");
  std::vector<double> b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = std::pow(static_cast<double>(i) / static_cast<double>(n - 1), power);
  return b;
}

namespace {

struct Rung {
  Vec phi;                 // walked coordinates
  double log_prior = 0.0;  // includes the walked-coordinate Jacobian
  double log_lik = 0.0;
  Mat factor;
  double log_scale = 0.0;
  std::size_t accepted = 0, proposed = 0;
  Vec mean;
  Mat m2;
  std::size_t count = 0;
};

/// Prior and likelihood at walked point phi; false outside the support.
bool evaluate_split(const TransdimensionalTarget& target, std::size_t k, const std::vector<bool>& positive,
                    const Vec& phi, double& lp, double& ll) {
  Vec theta = phi;
  double jac = 0.0;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) {
      const auto j = static_cast<Eigen::Index>(i);
      theta[j] = std::exp(phi[j]);
      jac += phi[j];
    }
  }
  if (!theta.allFinite()) return false;
  lp = target.log_prior(k, theta);
  if (!std::isfinite(lp)) return false;
  lp += jac;
  ll = target.log_likelihood(k, theta);
  return std::isfinite(ll);
}

Vec from_walk(const Vec& phi, const std::vector<bool>& positive) {
  Vec theta = phi;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) theta[static_cast<Eigen::Index>(i)] = std::exp(phi[static_cast<Eigen::Index>(i)]);
  }
  return theta;
}

void draw_from_prior(const TransdimensionalTarget& target, std::size_t k, const std::vector<bool>& positive, Rung& r,
                     Rng& rng) {
  for (int attempt = 0; attempt < 1000; ++attempt) {
    r.phi = to_walk(target.sample_prior(k, rng), positive);
    if (evaluate_split(target, k, positive, r.phi, r.log_prior, r.log_lik)) return;
  }
  throw std::runtime_error("parallel_tempering: prior draws have zero likelihood");
}

}  // namespace

TemperedRun parallel_tempering(const TransdimensionalTarget& target, std::size_t k, const TemperingConfig& config,
                               Rng& rng) {
  if (!target.has_prior_split()) throw std::logic_error("parallel_tempering: " + target.name() + " has no prior split");
  const auto& b = config.betas;
  if (b.size() < 2 || b.front() != 0.0 || b.back() != 1.0) {
    throw std::invalid_argument("parallel_tempering: betas must run from 0 to 1");
  }
  for (std::size_t i = 1; i < b.size(); ++i) {
    if (!(b[i] > b[i - 1])) throw std::invalid_argument("parallel_tempering: betas must increase strictly");
  }
  if (config.thin == 0) throw std::invalid_argument("parallel_tempering: thin must be positive");
  const std::size_t T = b.size();
  const auto pos = target.positive_mask(k);
  const auto n = static_cast<Eigen::Index>(target.dim(k));
  const double base = 2.38 / std::sqrt(static_cast<double>(n));

  std::vector<Rung> rungs(T);
  for (auto& r : rungs) {
    draw_from_prior(target, k, pos, r, rng);
    r.factor = base * Mat::Identity(n, n);
    r.log_scale = std::log(0.1);
    r.mean = Vec::Zero(n);
    r.m2 = Mat::Zero(n, n);
  }
  TemperedRun out;
  out.samples.resize(static_cast<Eigen::Index>(config.samples), n);
  out.log_lik.assign(T, {});
  std::vector<std::size_t> swap_acc(T - 1, 0), swap_try(T - 1, 0);
  const std::size_t sweeps = config.burn_in + config.samples * config.thin;

  for (std::size_t s = 0; s < sweeps; ++s) {
    const bool adapting = s < config.burn_in;
    draw_from_prior(target, k, pos, rungs[0], rng);
    for (std::size_t t = 1; t < T; ++t) {
      Rung& r = rungs[t];
      const Vec prop = r.phi + std::exp(r.log_scale) * (r.factor * standard_normal(static_cast<std::size_t>(n), rng));
      double lp = 0.0, ll = 0.0;
      double log_ratio = kNegInf;
      if (evaluate_split(target, k, pos, prop, lp, ll)) log_ratio = (lp - r.log_prior) + b[t] * (ll - r.log_lik);
      const bool ok = accept(log_ratio, rng);
      if (ok) {
        r.phi = prop;
        r.log_prior = lp;
        r.log_lik = ll;
      }
      if (adapting) {
        r.log_scale += (alpha_from_log(log_ratio) - 0.234) * std::pow(static_cast<double>(s) + 1.0, -0.6);
        ++r.count;
        const Vec d = r.phi - r.mean;
        r.mean += d / static_cast<double>(r.count);
        r.m2 += d * (r.phi - r.mean).transpose();
        if (s >= 200 && s % 100 == 0) {
          Mat cov = r.m2 / static_cast<double>(r.count - 1);
          cov.diagonal().array() += 1e-10 + 1e-8 * cov.diagonal().array();
          const Eigen::LLT<Mat> llt(cov);
          if (llt.info() == Eigen::Success) r.factor = base * Mat(llt.matrixL());
        }
      } else {
        ++r.proposed;
        r.accepted += ok ? 1 : 0;
      }
    }
    // Adjacent swaps, alternating even and odd pairs.
    for (std::size_t t = s % 2; t + 1 < T; t += 2) {
      ++swap_try[t];
      const double log_a = (b[t + 1] - b[t]) * (rungs[t].log_lik - rungs[t + 1].log_lik);
      if (accept(log_a, rng)) {
        ++swap_acc[t];
        std::swap(rungs[t].phi, rungs[t + 1].phi);
        std::swap(rungs[t].log_prior, rungs[t + 1].log_prior);
        std::swap(rungs[t].log_lik, rungs[t + 1].log_lik);
      }
    }
    if (!adapting && (s - config.burn_in + 1) % config.thin == 0) {
      const auto row = static_cast<Eigen::Index>((s - config.burn_in) / config.thin);
      out.samples.row(row) = from_walk(rungs[T - 1].phi, pos).transpose();
      for (std::size_t t = 0; t < T; ++t) out.log_lik[t].push_back(rungs[t].log_lik);
    }
  }
  for (std::size_t t = 0; t < T; ++t) {
    out.acceptance_rate.push_back(t == 0 ? 1.0
                                         : rungs[t].proposed ? static_cast<double>(rungs[t].accepted) /
                                                                   static_cast<double>(rungs[t].proposed)
                                                             : std::nan(""));
  }
  for (std::size_t t = 0; t + 1 < T; ++t) {
    out.swap_rate.push_back(swap_try[t] ? static_cast<double>(swap_acc[t]) / static_cast<double>(swap_try[t]) : std::nan(""));
  }
  return out;
}

double stepping_stone_log_evidence(const std::vector<double>& betas, const std::vector<std::vector<double>>& log_lik) {
  if (log_lik.size() != betas.size()) throw DimensionError("stepping_stone_log_evidence: one series per rung");
  double total = 0.0;
  for (std::size_t i = 0; i + 1 < betas.size(); ++i) {
    const auto& ll = log_lik[i];
    if (ll.empty()) throw std::invalid_argument("stepping_stone_log_evidence: empty rung");
    const double db = betas[i + 1] - betas[i];
    const double m = *std::max_element(ll.begin(), ll.end());
    double sum = 0.0;
    for (double v : ll) sum += std::exp(db * (v - m));
    total += db * m + std::log(sum / static_cast<double>(ll.size()));
  }
  return total;
}

// ------------------------------------------------------------- chains

ProposalRecord rj_step(const TransdimensionalTarget& target, ChainState& state, const AcrossMove& move,
                       const JumpDistribution& j, const RandomWalkKernel& within, Rng& rng) {
  const std::size_t to = j.draw(state.k, rng);
  if (to == state.k) {
    ProposalRecord rec;
    rec.from = rec.to = state.k;
    rec.type = MoveType::Within;
    rec.alpha = rw_step(target, state, within.factor(state.k), within.positive(state.k), rng, rec.accepted);
    return rec;
  }
  Candidate c = move.propose(target, state, to, j, rng);
  c.record.accepted = !c.record.domain_error && c.record.alpha > 0.0 && accept(c.record.log_ratio(), rng);
  if (c.record.accepted) state = std::move(c.state);
  return c.record;
}

std::size_t ChainOutput::across_proposals() const {
  std::size_t n = 0;
  for (const auto& r : records) n += r.type == MoveType::Across ? 1 : 0;
  return n;
}

std::size_t ChainOutput::across_rejections() const {
  std::size_t n = 0;
  for (const auto& r : records) n += (r.type == MoveType::Across && !r.accepted) ? 1 : 0;
  return n;
}

void ChainOutput::write_csv(std::ostream& out) const {
  out << "step,k,accepted,alpha,move_type\n";
  out.precision(17);
  for (std::size_t s = 0; s < records.size(); ++s) {
    out << s + 1 << ',' << trajectory[s] + 1 << ',' << (records[s].accepted ? 1 : 0) << ',' << records[s].alpha << ','
        << to_string(records[s].type) << '\n';
  }
}

ChainOutput run_chain(const TransdimensionalTarget& target, ChainState init, const AcrossMove& move,
                      const JumpDistribution& j, const RandomWalkKernel& within, const ChainConfig& config,
                      Rng& rng) {
  if (config.steps == 0) throw std::invalid_argument("run_chain: steps must be at least 1");
  if (config.across_period == 0) throw std::invalid_argument("run_chain: across_period must be at least 1");
  if (within.num_models() != target.num_models()) throw DimensionError("run_chain: kernel/target model count");
  init.log_density = target.log_density(init.k, init.theta);
  if (init.log_density == kNegInf) throw std::invalid_argument("run_chain: initial state outside the support");
  require_dim(static_cast<std::size_t>(init.aux.size()), move.aux_dim(target, init.k), "run_chain: auxiliary block");

  ChainOutput out;
  out.trajectory.reserve(config.steps);
  out.records.reserve(config.steps);
  ChainState state = std::move(init);
  for (std::size_t s = 0; s < config.steps; ++s) {
    if (s % config.across_period == 0) {
      out.records.push_back(rj_step(target, state, move, j, within, rng));
    } else {
      ProposalRecord rec;
      rec.from = rec.to = state.k;
      rec.type = MoveType::Within;
      rec.alpha = rw_step(target, state, within.factor(state.k), within.positive(state.k), rng, rec.accepted);
      out.records.push_back(rec);
    }
    out.trajectory.push_back(state.k);
    if (config.record_theta) out.thetas.push_back(state.theta);
  }
  return out;
}

}  // namespace trj
