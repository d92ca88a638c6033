#include "trj/targets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace trj {

namespace {

double log_cosh(double a) {
  const double x = std::abs(a);
  return x + std::log1p(std::exp(-2.0 * x)) - std::log(2.0);
}

double log_normal(double x, double sd) {
  const double z = x / sd;
  return -0.5 * z * z - 0.5 * kLog2Pi - std::log(sd);
}

double log_sum_exp(double a, double b) {
  const double m = std::max(a, b);
  if (m == kNegInf) return kNegInf;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace

// ------------------------------------------------------------ base class

double TransdimensionalTarget::log_density(std::size_t k, const Vec& theta) const {
  check_model(k);
  require_dim(static_cast<std::size_t>(theta.size()), dim(k), "log_density");
  if (!theta.allFinite()) return kNegInf;
  const double v = do_log_density(k, theta);
  return std::isnan(v) ? kNegInf : v;
}

void TransdimensionalTarget::check_model(std::size_t k) const {
  if (k >= num_models()) {
    throw std::out_of_range(name() + ": model index " + std::to_string(k) + " out of range");
  }
}

std::size_t TransdimensionalTarget::max_dim() const {
  std::size_t m = 0;
  for (std::size_t k = 0; k < num_models(); ++k) m = std::max(m, dim(k));
  return m;
}

Vec TransdimensionalTarget::sample_model(std::size_t, Rng&) const {
  throw std::logic_error(name() + ": no exact sampler");
}

double TransdimensionalTarget::log_prior(std::size_t, const Vec&) const {
  throw std::logic_error(name() + ": no prior/likelihood split");
}

double TransdimensionalTarget::log_likelihood(std::size_t, const Vec&) const {
  throw std::logic_error(name() + ": no prior/likelihood split");
}

Vec TransdimensionalTarget::sample_prior(std::size_t, Rng&) const {
  throw std::logic_error(name() + ": no prior sampler");
}

TransPoint TransdimensionalTarget::sample(Rng& rng) const {
  const auto pi = true_marginals();
  if (!pi) throw std::logic_error(name() + ": model probabilities unknown");
  std::discrete_distribution<std::size_t> pick(pi->data(), pi->data() + pi->size());
  const std::size_t k = pick(rng);
  return {k, sample_model(k, rng)};
}

void Dataset::validate() const {
  if (!y.allFinite() || !x.allFinite()) throw std::invalid_argument("Dataset: non-finite entries");
  if (x.size() > 0 && x.rows() != y.rows()) throw std::invalid_argument("Dataset: row counts differ");
}

Mat read_csv_matrix(const std::string& path, std::size_t expected_cols) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  std::vector<std::vector<double>> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      while (used < cell.size() && std::isspace(static_cast<unsigned char>(cell[used]))) ++used;
      if (used == 0 || used != cell.size()) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": not a number: '" + cell + "'");
      }
      row.push_back(v);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": ragged row");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": no data rows");
  if (expected_cols != 0 && rows.front().size() != expected_cols) {
    throw std::runtime_error(path + ": expected " + std::to_string(expected_cols) + " columns, got " +
                             std::to_string(rows.front().size()));
  }
  Mat m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
  }
  return m;
}

// ------------------------------------------------------------------ SAS

double sas_log_pdf(const SasParams& p, const Vec& theta) {
  const Eigen::Index n = theta.size();
  Vec v(n);
  double logjac = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double a = p.delta[i] * std::asinh(theta[i]) - p.epsilon[i];
    v[i] = std::sinh(a);
    logjac += std::log(p.delta[i]) + log_cosh(a) - 0.5 * std::log1p(theta[i] * theta[i]);
  }
  const Vec w = p.chol.triangularView<Eigen::Lower>().solve(v);
  double logdet_l = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) logdet_l += std::log(p.chol(i, i));
  return -0.5 * w.squaredNorm() - 0.5 * static_cast<double>(n) * kLog2Pi - logdet_l + logjac;
}

SasTarget::SasTarget() {
  SasParams one{Vec::Constant(1, -2.0), Vec::Constant(1, 1.0), Mat::Identity(1, 1)};
  Mat cov(2, 2);
  cov << 1.0, 0.99, 0.99, 1.0;
  SasParams two{(Vec(2) << 1.5, -2.0).finished(), (Vec(2) << 1.0, 1.5).finished(), cov.llt().matrixL()};
  comps_ = {{0.25, one}, {0.75, two}};
}

SasTarget::SasTarget(std::vector<SasComponent> components) : comps_(std::move(components)) {
  if (comps_.empty()) throw std::invalid_argument("SasTarget: no components");
  double total = 0.0;
  for (const auto& c : comps_) {
    if (!(c.weight > 0.0)) throw std::invalid_argument("SasTarget: weights must be positive");
    total += c.weight;
    make_sas_map(c.params.epsilon, c.params.delta, c.params.chol);  // validates
  }
  for (auto& c : comps_) c.weight /= total;
}

std::size_t SasTarget::dim(std::size_t k) const {
  check_model(k);
  return static_cast<std::size_t>(comps_[k].params.epsilon.size());
}

std::optional<Vec> SasTarget::true_marginals() const {
  Vec w(static_cast<Eigen::Index>(comps_.size()));
  for (std::size_t k = 0; k < comps_.size(); ++k) w[static_cast<Eigen::Index>(k)] = comps_[k].weight;
  return w;
}

Vec SasTarget::sample_model(std::size_t k, Rng& rng) const {
  check_model(k);
  const SasParams& p = comps_[k].params;
  const Vec v = p.chol * standard_normal(dim(k), rng);
  Vec theta(v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    theta[i] = std::sinh((std::asinh(v[i]) + p.epsilon[i]) / p.delta[i]);
  }
  return theta;
}

std::vector<MapPtr> SasTarget::exact_maps() const {
  std::vector<MapPtr> maps;
  for (const auto& c : comps_) maps.push_back(make_sas_map(c.params.epsilon, c.params.delta, c.params.chol));
  return maps;
}

double SasTarget::do_log_density(std::size_t k, const Vec& theta) const {
  return std::log(comps_[k].weight) + sas_log_pdf(comps_[k].params, theta);
}

std::shared_ptr<const SasTarget> sas_target() { return std::make_shared<SasTarget>(); }

// ------------------------------------------------------------------ toy

GaussianToyTarget::GaussianToyTarget(Mat x, Vec y, std::vector<std::size_t> dims, double noise_sd, double prior_sd)
    : x_(std::move(x)), y_(std::move(y)), dims_(std::move(dims)), noise_sd_(noise_sd), prior_sd_(prior_sd) {
  if (dims_.empty()) throw std::invalid_argument("GaussianToyTarget: no models");
  if (x_.rows() != y_.size()) throw DimensionError("GaussianToyTarget: X and y row counts differ");
  if (!(noise_sd > 0.0) || !(prior_sd > 0.0)) throw std::invalid_argument("GaussianToyTarget: sds must be positive");
  const double s2 = noise_sd * noise_sd, t2 = prior_sd * prior_sd;
  log_evidence_.resize(static_cast<Eigen::Index>(dims_.size()));
  for (std::size_t k = 0; k < dims_.size(); ++k) {
    const Eigen::Index p = static_cast<Eigen::Index>(dims_[k]);
    if (p == 0 || p > x_.cols()) throw std::invalid_argument("GaussianToyTarget: bad model dimension");
    const Mat xk = x_.leftCols(p);
    const Mat prec = xk.transpose() * xk / s2 + Mat::Identity(p, p) / t2;
    const Mat cov = prec.inverse();
    post_mean_.push_back(cov * xk.transpose() * y_ / s2);
    post_chol_.push_back(cholesky_lower(cov, "GaussianToyTarget: posterior covariance"));
    // y ~ N(0, s2 I + t2 X_k X_k^T)
    const Mat marg = s2 * Mat::Identity(y_.size(), y_.size()) + t2 * xk * xk.transpose();
    const Eigen::LLT<Mat> llt(marg);
    const Vec w = llt.matrixL().solve(y_);
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < marg.rows(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    log_evidence_[static_cast<Eigen::Index>(k)] =
        -0.5 * w.squaredNorm() - 0.5 * logdet - 0.5 * static_cast<double>(y_.size()) * kLog2Pi;
  }
}

std::size_t GaussianToyTarget::dim(std::size_t k) const {
  check_model(k);
  return dims_[k];
}

double GaussianToyTarget::log_evidence(std::size_t k) const {
  check_model(k);
  return log_evidence_[static_cast<Eigen::Index>(k)];
}

std::optional<Vec> GaussianToyTarget::true_marginals() const {
  const Vec e = (log_evidence_.array() - log_evidence_.maxCoeff()).exp();
  return Vec(e / e.sum());
}

Vec GaussianToyTarget::sample_model(std::size_t k, Rng& rng) const {
  check_model(k);
  return post_mean_[k] + post_chol_[k] * standard_normal(dims_[k], rng);
}

std::vector<MapPtr> GaussianToyTarget::exact_maps() const {
  std::vector<MapPtr> maps;
  for (std::size_t k = 0; k < dims_.size(); ++k) maps.push_back(std::make_shared<AffineMap>(post_mean_[k], post_chol_[k]));
  return maps;
}

double GaussianToyTarget::log_prior(std::size_t k, const Vec& theta) const {
  check_model(k);
  require_dim(static_cast<std::size_t>(theta.size()), dims_[k], "GaussianToyTarget::log_prior");
  double lp = 0.0;
  for (Eigen::Index i = 0; i < theta.size(); ++i) lp += log_normal(theta[i], prior_sd_);
  return lp;
}

double GaussianToyTarget::log_likelihood(std::size_t k, const Vec& theta) const {
  check_model(k);
  require_dim(static_cast<std::size_t>(theta.size()), dims_[k], "GaussianToyTarget::log_likelihood");
  const Vec r = y_ - x_.leftCols(theta.size()) * theta;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) ll += log_normal(r[i], noise_sd_);
  return ll;
}

Vec GaussianToyTarget::sample_prior(std::size_t k, Rng& rng) const {
  check_model(k);
  return prior_sd_ * standard_normal(dims_[k], rng);
}

double GaussianToyTarget::do_log_density(std::size_t k, const Vec& theta) const {
  return log_prior(k, theta) + log_likelihood(k, theta) - std::log(static_cast<double>(dims_.size()));
}

std::shared_ptr<const GaussianToyTarget> gaussian_toy(std::uint64_t seed, std::size_t n_obs,
                                                      std::vector<std::size_t> dims, Vec beta, double noise_sd,
                                                      double prior_sd) {
  std::size_t pmax = 0;
  for (auto d : dims) pmax = std::max(pmax, d);
  if (beta.size() == 0) {
    beta = Vec::Zero(static_cast<Eigen::Index>(pmax));
    beta[0] = 1.0;
    if (pmax > 1) beta[1] = 0.3;
  }
  require_dim(static_cast<std::size_t>(beta.size()), pmax, "gaussian_toy: beta");
  Rng rng = make_stream(seed, 0);
  Mat x(static_cast<Eigen::Index>(n_obs), static_cast<Eigen::Index>(pmax));
  for (Eigen::Index r = 0; r < x.rows(); ++r) x.row(r) = standard_normal(pmax, rng).transpose();
  const Vec y = x * beta + noise_sd * standard_normal(n_obs, rng);
  return std::make_shared<GaussianToyTarget>(x, y, std::move(dims), noise_sd, prior_sd);
}

// ------------------------------------------------------- factor analysis

FaTarget::FaTarget(Mat y, std::vector<std::size_t> factor_counts, double ig_shape, double ig_scale)
    : d_(static_cast<std::size_t>(y.cols())),
      n_obs_(static_cast<std::size_t>(y.rows())),
      factors_(std::move(factor_counts)),
      ig_shape_(ig_shape),
      ig_scale_(ig_scale) {
  if (d_ == 0) throw DimensionError("FaTarget: data must have at least one column");
  if (!y.allFinite()) throw std::invalid_argument("FaTarget: non-finite data");
  if (factors_.empty()) throw std::invalid_argument("FaTarget: no models");
  for (auto k : factors_) {
    if (k == 0 || k > d_) throw std::invalid_argument("FaTarget: factor count must be in [1, d]");
  }
  if (!(ig_shape > 0.0) || !(ig_scale > 0.0)) throw std::invalid_argument("FaTarget: bad inverse-gamma prior");
  scatter_ = y.transpose() * y;
}

std::size_t FaTarget::num_loadings(std::size_t k) const {
  check_model(k);
  const std::size_t f = factors_[k];
  return d_ * f - f * (f - 1) / 2;
}

std::size_t FaTarget::dim(std::size_t k) const { return num_loadings(k) + d_; }

std::vector<bool> FaTarget::positive_mask(std::size_t k) const {
  std::vector<bool> m(dim(k), false);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < d_; ++i) {
    for (std::size_t j = 0; j <= std::min(i, factors_[k] - 1); ++j, ++idx) m[idx] = (i == j);
  }
  for (std::size_t i = 0; i < d_; ++i) m[idx + i] = true;
  return m;
}

void FaTarget::unpack(std::size_t k, const Vec& theta, Mat& beta, Vec& lambda) const {
  require_dim(static_cast<std::size_t>(theta.size()), dim(k), "FaTarget::unpack");
  const auto d = static_cast<Eigen::Index>(d_);
  const auto f = static_cast<Eigen::Index>(factors_[k]);
  beta = Mat::Zero(d, f);
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j <= std::min(i, f - 1); ++j) beta(i, j) = theta[idx++];
  }
  lambda = theta.tail(d);
}

Vec FaTarget::pack(std::size_t k, const Mat& beta, const Vec& lambda) const {
  const auto d = static_cast<Eigen::Index>(d_);
  const auto f = static_cast<Eigen::Index>(factors(k));
  if (beta.rows() != d || beta.cols() != f || lambda.size() != d) throw DimensionError("FaTarget::pack: bad shapes");
  Vec theta(static_cast<Eigen::Index>(dim(k)));
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < d; ++i) {
    for (Eigen::Index j = 0; j <= std::min(i, f - 1); ++j) theta[idx++] = beta(i, j);
  }
  theta.tail(d) = lambda;
  return theta;
}

double FaTarget::log_prior(std::size_t k, const Vec& theta) const {
  Mat beta;
  Vec lambda;
  unpack(k, theta, beta, lambda);
  double lp = 0.0;
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    for (Eigen::Index j = 0; j <= std::min(i, beta.cols() - 1); ++j) {
      if (i == j) {
        if (!(beta(i, j) > 0.0)) return kNegInf;
        lp += std::log(2.0);
      }
      lp += log_normal(beta(i, j), 1.0);
    }
  }
  const double a = ig_shape_, b = ig_scale_;
  for (Eigen::Index i = 0; i < lambda.size(); ++i) {
    if (!(lambda[i] > 0.0)) return kNegInf;
    lp += a * std::log(b) - std::lgamma(a) - (a + 1.0) * std::log(lambda[i]) - b / lambda[i];
  }
  return lp;
}

Vec FaTarget::sample_prior(std::size_t k, Rng& rng) const {
  check_model(k);
  std::normal_distribution<double> z;
  std::gamma_distribution<double> g(ig_shape_, 1.0 / ig_scale_);
  Mat beta = Mat::Zero(static_cast<Eigen::Index>(d_), static_cast<Eigen::Index>(factors_[k]));
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    for (Eigen::Index j = 0; j <= std::min(i, beta.cols() - 1); ++j) beta(i, j) = i == j ? std::abs(z(rng)) : z(rng);
  }
  Vec lambda(static_cast<Eigen::Index>(d_));
  for (Eigen::Index i = 0; i < lambda.size(); ++i) lambda[i] = 1.0 / g(rng);
  return pack(k, beta, lambda);
}

double FaTarget::log_likelihood(std::size_t k, const Vec& theta) const {
  Mat beta;
  Vec lambda;
  unpack(k, theta, beta, lambda);
  if (n_obs_ == 0) return 0.0;
  Mat sigma = beta * beta.transpose();
  sigma.diagonal() += lambda;
  const Eigen::LLT<Mat> llt(sigma);
  if (llt.info() != Eigen::Success) return kNegInf;
  double logdet = 0.0;
  for (Eigen::Index i = 0; i < sigma.rows(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
  const double quad = llt.solve(scatter_).trace();
  const double n = static_cast<double>(n_obs_);
  return -0.5 * n * static_cast<double>(d_) * kLog2Pi - 0.5 * n * logdet - 0.5 * quad;
}

double FaTarget::do_log_density(std::size_t k, const Vec& theta) const {
  const double lp = log_prior(k, theta);
  if (lp == kNegInf) return kNegInf;
  return lp + log_likelihood(k, theta) - std::log(static_cast<double>(factors_.size()));
}

Dataset simulate_fa_data(const Mat& beta, const Vec& lambda, std::size_t n, std::uint64_t seed) {
  if (beta.rows() != lambda.size()) throw DimensionError("simulate_fa_data: beta rows must equal length of lambda");
  for (Eigen::Index i = 0; i < beta.rows(); ++i) {
    for (Eigen::Index j = i + 1; j < beta.cols(); ++j) {
      if (beta(i, j) != 0.0) throw std::invalid_argument("simulate_fa_data: beta must be lower triangular");
    }
  }
  for (Eigen::Index j = 0; j < std::min(beta.rows(), beta.cols()); ++j) {
    if (!(beta(j, j) >= 0.0)) throw std::invalid_argument("simulate_fa_data: beta diagonal must be non-negative");
  }
  if (!(lambda.array() > 0.0).all()) throw std::invalid_argument("simulate_fa_data: lambda must be positive");
  Mat sigma = beta * beta.transpose();
  sigma.diagonal() += lambda;
  const Mat l = cholesky_lower(sigma, "simulate_fa_data");
  Rng rng = make_stream(seed, 0);
  Dataset ds;
  ds.y.resize(static_cast<Eigen::Index>(n), beta.rows());
  for (Eigen::Index r = 0; r < ds.y.rows(); ++r) {
    ds.y.row(r) = (l * standard_normal(static_cast<std::size_t>(beta.rows()), rng)).transpose();
  }
  ds.seed = seed;
  return ds;
}

// ------------------------------------------------------ variable selection

VsTarget::VsTarget(Mat x, Vec y, VsConfig config) : x_(std::move(x)), y_(std::move(y)), cfg_(config) {
  require_dim(static_cast<std::size_t>(x_.cols()), 3, "VsTarget: covariates");
  if (x_.rows() != y_.size()) throw DimensionError("VsTarget: X and y row counts differ");
  if (!(cfg_.mix_weight > 0.0 && cfg_.mix_weight <= 1.0)) throw std::invalid_argument("VsTarget: mix_weight in (0,1]");
  if (!(cfg_.wide_sd > 0.0) || !(cfg_.prior_sd > 0.0)) throw std::invalid_argument("VsTarget: sds must be positive");
  active_ = {{0}, {0, 1}, {0, 2, 3}, {0, 1, 2, 3}};
}

std::size_t VsTarget::dim(std::size_t k) const {
  check_model(k);
  return active_[k].size();
}

std::string VsTarget::model_label(std::size_t k) const {
  check_model(k);
  std::string s = "(1";
  for (std::size_t i = 1; i < 4; ++i) {
    const bool on = std::find(active_[k].begin(), active_[k].end(), i) != active_[k].end();
    s += on ? ",1" : ",0";
  }
  return s + ")";
}

SlotLayout VsTarget::layout(std::size_t k) const { return SlotLayout::from_slots(active(k), 4); }

double VsTarget::do_log_density(std::size_t k, const Vec& theta) const {
  const auto& act = active_[k];
  Vec mean = Vec::Constant(y_.size(), theta[0]);
  double lp = -std::log(4.0);
  for (std::size_t i = 0; i < act.size(); ++i) {
    lp += log_normal(theta[static_cast<Eigen::Index>(i)], cfg_.prior_sd);
    if (act[i] > 0) mean += theta[static_cast<Eigen::Index>(i)] * x_.col(static_cast<Eigen::Index>(act[i] - 1));
  }
  const double lw = std::log(cfg_.mix_weight);
  const double lw2 = cfg_.mix_weight < 1.0 ? std::log1p(-cfg_.mix_weight) : kNegInf;
  for (Eigen::Index i = 0; i < y_.size(); ++i) {
    const double r = y_[i] - mean[i];
    lp += log_sum_exp(lw + log_normal(r, 1.0), lw2 + log_normal(r, cfg_.wide_sd));
  }
  return lp;
}

Dataset simulate_vs_data(std::uint64_t seed, std::size_t n) {
  Rng rng = make_stream(seed, 0);
  Dataset ds;
  ds.x.resize(static_cast<Eigen::Index>(n), 3);
  ds.y.resize(static_cast<Eigen::Index>(n), 1);
  std::normal_distribution<double> z;
  for (Eigen::Index r = 0; r < ds.x.rows(); ++r) {
    for (Eigen::Index c = 0; c < 3; ++c) ds.x(r, c) = z(rng);
    const double b0 = (static_cast<std::size_t>(r) < n / 2) ? 1.0 : 6.0;
    ds.y(r, 0) = b0 + ds.x(r, 0) + 5.0 * z(rng);
  }
  ds.seed = seed;
  return ds;
}

// ------------------------------------------------------- saturated target

AugmentedTarget::AugmentedTarget(TargetPtr base, Reference nu) : base_(std::move(base)), nu_(nu) {
  if (!base_) throw std::invalid_argument("AugmentedTarget: null base");
  n_max_ = base_->max_dim();
}

double AugmentedTarget::log_density(std::size_t k, const Vec& theta, const Vec& aux) const {
  require_dim(static_cast<std::size_t>(aux.size()), aux_dim(k), "AugmentedTarget: auxiliary block");
  const double base = base_->log_density(k, theta);
  if (base == kNegInf) return kNegInf;
  return base + nu_.log_pdf(aux);
}

}  // namespace trj
