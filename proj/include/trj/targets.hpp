#pragma once

#include "trj/core.hpp"
#include "trj/reference.hpp"
#include "trj/transport.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace trj {

/// A point (k, theta_k) of the union space. Models are indexed 0..K-1.
struct TransPoint {
  std::size_t k = 0;
  Vec theta;
};

/// Unnormalized density over the union of model parameter spaces.
/// log_density returns -inf outside the support and throws only on a
/// dimension mismatch or an unknown model index.
class TransdimensionalTarget {
 public:
  virtual ~TransdimensionalTarget() = default;

  virtual std::string name() const = 0;
  virtual std::size_t num_models() const = 0;
  virtual std::size_t dim(std::size_t k) const = 0;
  virtual std::string model_label(std::size_t k) const { return std::to_string(k + 1); }

  double log_density(std::size_t k, const Vec& theta) const;
  double log_density(const TransPoint& x) const { return log_density(x.k, x.theta); }

  /// Posterior model probabilities if known in closed form.
  virtual std::optional<Vec> true_marginals() const { return std::nullopt; }

  /// Exact draws from pi(theta | k); throws std::logic_error if unavailable.
  virtual bool has_exact_sampler() const { return false; }
  virtual Vec sample_model(std::size_t k, Rng& rng) const;
  /// Draws k from the true marginals and theta from the conditional.
  TransPoint sample(Rng& rng) const;

  /// Coordinates constrained to be positive (empty vector = none).
  virtual std::vector<bool> positive_mask(std::size_t k) const { return std::vector<bool>(dim(k), false); }

  /// Where theta_k sits in the saturated vector. Default: concatenation.
  virtual SlotLayout layout(std::size_t k) const { return SlotLayout::concatenated(dim(k), max_dim()); }

  /// Optional split log_density = log_prior + log_likelihood - log K with a
  /// normalized, directly sampleable prior (used by tempered samplers). The
  /// defaults throw std::logic_error.
  virtual bool has_prior_split() const { return false; }
  virtual double log_prior(std::size_t k, const Vec& theta) const;
  virtual double log_likelihood(std::size_t k, const Vec& theta) const;
  virtual Vec sample_prior(std::size_t k, Rng& rng) const;

  std::size_t max_dim() const;

 protected:
  virtual double do_log_density(std::size_t k, const Vec& theta) const = 0;
  void check_model(std::size_t k) const;
};

using TargetPtr = std::shared_ptr<const TransdimensionalTarget>;

/// Observations (rows) with optional covariates.
struct Dataset {
  Mat y;
  Mat x;
  std::string source = "synthetic";
  std::uint64_t seed = 0;

  void validate() const;
};

/// CSV with a header row; all columns numeric. Throws on ragged rows or
/// a column count other than `expected_cols` (0 = any).
Mat read_csv_matrix(const std::string& path, std::size_t expected_cols = 0);

// ---------------------------------------------------------------- SAS

struct SasComponent {
  double weight;
  SasParams params;
};

/// Two-model sinh-arcsinh mixture target with known exact transports.
class SasTarget final : public TransdimensionalTarget {
 public:
  SasTarget();
  explicit SasTarget(std::vector<SasComponent> components);

  std::string name() const override { return "sas"; }
  std::size_t num_models() const override { return comps_.size(); }
  std::size_t dim(std::size_t k) const override;
  std::optional<Vec> true_marginals() const override;
  bool has_exact_sampler() const override { return true; }
  Vec sample_model(std::size_t k, Rng& rng) const override;

  const std::vector<SasComponent>& components() const { return comps_; }
  /// Exact target -> reference maps, one per model.
  std::vector<MapPtr> exact_maps() const;

 protected:
  double do_log_density(std::size_t k, const Vec& theta) const override;

 private:
  std::vector<SasComponent> comps_;
};

/// Density of S_{eps,delta}(L z), z ~ N(0, I), evaluated directly.
double sas_log_pdf(const SasParams& p, const Vec& theta);

std::shared_ptr<const SasTarget> sas_target();

// ------------------------------------------------- conjugate Gaussian toy

/// Nested linear regressions y = X_k beta + e, e ~ N(0, sigma^2), beta ~
/// N(0, tau^2 I), where model k uses the first dims[k] columns of X.
/// Marginal likelihoods, posteriors and whitening maps are all closed form.
class GaussianToyTarget final : public TransdimensionalTarget {
 public:
  GaussianToyTarget(Mat x, Vec y, std::vector<std::size_t> dims, double noise_sd, double prior_sd);

  std::string name() const override { return "toy"; }
  std::size_t num_models() const override { return dims_.size(); }
  std::size_t dim(std::size_t k) const override;
  std::optional<Vec> true_marginals() const override;
  bool has_exact_sampler() const override { return true; }
  Vec sample_model(std::size_t k, Rng& rng) const override;

  bool has_prior_split() const override { return true; }
  double log_prior(std::size_t k, const Vec& theta) const override;
  double log_likelihood(std::size_t k, const Vec& theta) const override;
  Vec sample_prior(std::size_t k, Rng& rng) const override;

  /// log of int prior * likelihood (without the 1/K model prior).
  double log_evidence(std::size_t k) const;
  const Vec& posterior_mean(std::size_t k) const { return post_mean_.at(k); }
  const Mat& posterior_chol(std::size_t k) const { return post_chol_.at(k); }
  /// Exact whitening maps theta -> L_k^{-1}(theta - m_k).
  std::vector<MapPtr> exact_maps() const;

 protected:
  double do_log_density(std::size_t k, const Vec& theta) const override;

 private:
  Mat x_;
  Vec y_;
  std::vector<std::size_t> dims_;
  double noise_sd_, prior_sd_;
  std::vector<Vec> post_mean_;
  std::vector<Mat> post_chol_;
  Vec log_evidence_;
};

/// Synthetic data for the toy: n_obs rows, covariates N(0,1), true
/// coefficients `beta` (length = max dim).
std::shared_ptr<const GaussianToyTarget> gaussian_toy(std::uint64_t seed, std::size_t n_obs = 30,
                                                      std::vector<std::size_t> dims = {1, 2},
                                                      Vec beta = Vec(), double noise_sd = 1.0,
                                                      double prior_sd = 1.0);

// ----------------------------------------------------------- factor analysis

/// Bayesian factor analysis: y_i ~ N(0, beta beta^T + Lambda) with beta a
/// d x k lower-triangular loading matrix. theta_k packs the loadings row by
/// row (beta_ij for j <= min(i, k-1)) followed by diag(Lambda).
class FaTarget final : public TransdimensionalTarget {
 public:
  FaTarget(Mat y, std::vector<std::size_t> factor_counts, double ig_shape = 1.1, double ig_scale = 0.05);

  std::string name() const override { return "fa"; }
  std::size_t num_models() const override { return factors_.size(); }
  std::size_t dim(std::size_t k) const override;
  std::string model_label(std::size_t k) const override { return std::to_string(factors_.at(k)); }
  std::vector<bool> positive_mask(std::size_t k) const override;

  std::size_t data_dim() const { return d_; }
  std::size_t factors(std::size_t k) const { return factors_.at(k); }
  std::size_t num_loadings(std::size_t k) const;
  double ig_shape() const { return ig_shape_; }
  double ig_scale() const { return ig_scale_; }

  void unpack(std::size_t k, const Vec& theta, Mat& beta, Vec& lambda) const;
  Vec pack(std::size_t k, const Mat& beta, const Vec& lambda) const;

  bool has_prior_split() const override { return true; }
  double log_prior(std::size_t k, const Vec& theta) const override;
  /// Gaussian log-likelihood through the Cholesky factor of beta beta^T + Lambda.
  double log_likelihood(std::size_t k, const Vec& theta) const override;
  Vec sample_prior(std::size_t k, Rng& rng) const override;

 protected:
  double do_log_density(std::size_t k, const Vec& theta) const override;

 private:
  std::size_t d_;
  std::size_t n_obs_;
  Mat scatter_;  // Y^T Y
  std::vector<std::size_t> factors_;
  double ig_shape_, ig_scale_;
};

/// Number of free parameters of a k-factor model in d dimensions.
inline std::size_t fa_dim(std::size_t d, std::size_t k) { return d * (k + 1) - k * (k - 1) / 2; }

/// N draws of N(0, beta beta^T + Lambda).
Dataset simulate_fa_data(const Mat& beta, const Vec& lambda, std::size_t n, std::uint64_t seed);

// -------------------------------------------------------- variable selection

struct VsConfig {
  double mix_weight = 0.9;    // weight of the N(0,1) residual component
  double wide_sd = 5.0;       // sd of the wide component
  double prior_sd = 10.0;     // beta_i ~ N(0, prior_sd^2)
};

/// Block variable selection y = b0 + b1 x1 + b2 x2 + b3 x3 + e with the
/// groups {b1} and {b2, b3} switched on and off together. Model order:
/// (1,0,0,0), (1,1,0,0), (1,0,1,1), (1,1,1,1). Coefficient i always sits in
/// saturated slot i.
class VsTarget final : public TransdimensionalTarget {
 public:
  VsTarget(Mat x, Vec y, VsConfig config = {});

  std::string name() const override { return "vs"; }
  std::size_t num_models() const override { return 4; }
  std::size_t dim(std::size_t k) const override;
  std::string model_label(std::size_t k) const override;
  SlotLayout layout(std::size_t k) const override;

  const std::vector<std::size_t>& active(std::size_t k) const { return active_.at(k); }
  const VsConfig& config() const { return cfg_; }
  const Mat& x() const { return x_; }
  const Vec& y() const { return y_; }

 protected:
  double do_log_density(std::size_t k, const Vec& theta) const override;

 private:
  Mat x_;
  Vec y_;
  VsConfig cfg_;
  std::vector<std::vector<std::size_t>> active_;
};

/// 80 rows: covariates N(0,1); y = b0 + x1 + e, e ~ N(0,25), with b0 = 1 on
/// the first half and b0 = 6 on the second.
Dataset simulate_vs_data(std::uint64_t seed, std::size_t n = 80);

// ------------------------------------------------------- saturated target

/// pi(k, theta) times the reference density of the n_max - n_k auxiliaries.
class AugmentedTarget {
 public:
  AugmentedTarget(TargetPtr base, Reference nu);

  const TransdimensionalTarget& base() const { return *base_; }
  TargetPtr base_ptr() const { return base_; }
  const Reference& nu() const { return nu_; }
  std::size_t n_max() const { return n_max_; }
  std::size_t aux_dim(std::size_t k) const { return n_max_ - base_->dim(k); }

  double log_density(std::size_t k, const Vec& theta, const Vec& aux) const;

 private:
  TargetPtr base_;
  Reference nu_;
  std::size_t n_max_;
};

inline AugmentedTarget augment(TargetPtr base, Reference nu) { return AugmentedTarget(std::move(base), nu); }

}  // namespace trj
