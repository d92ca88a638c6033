#pragma once

#include "trj/targets.hpp"
#include "trj/transport.hpp"

#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

namespace trj {

/// Model-jump proposal probabilities j_k(k'); rows sum to one.
class JumpDistribution {
 public:
  explicit JumpDistribution(Mat probs);

  /// Uniform over K \ {k} (K = 1 gives the trivial self-jump).
  static JumpDistribution uniform_others(std::size_t num_models);
  /// j_k(k') = pi(k') for every k.
  static JumpDistribution from_marginals(const Vec& pi);

  std::size_t size() const { return static_cast<std::size_t>(p_.rows()); }
  double prob(std::size_t k, std::size_t to) const { return p_(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(to)); }
  double log_prob(std::size_t k, std::size_t to) const;
  std::size_t draw(std::size_t k, Rng& rng) const;
  const Mat& matrix() const { return p_; }

 private:
  Mat p_;
};

enum class MoveType { Within, Across };

std::string_view to_string(MoveType t);

/// One attempted move. For across-model moves the log acceptance ratio is
/// broken into target, jump, auxiliary-density and Jacobian terms.
struct ProposalRecord {
  std::size_t from = 0;
  std::size_t to = 0;
  MoveType type = MoveType::Across;
  double alpha = 0.0;
  bool accepted = false;
  bool domain_error = false;
  double log_target = 0.0;
  double log_jump = 0.0;
  double log_aux = 0.0;
  double log_jacobian = 0.0;

  double log_ratio() const { return log_target + log_jump + log_aux + log_jacobian; }
};

/// Current point plus, for saturated-space moves, the auxiliary block.
/// `log_density` caches log pi(k, theta) of the base target.
struct ChainState {
  std::size_t k = 0;
  Vec theta;
  Vec aux;
  double log_density = kNegInf;
};

ChainState make_state(const TransdimensionalTarget& target, std::size_t k, Vec theta, Vec aux = Vec());

/// Candidate produced by an across-model move, before the accept decision.
struct Candidate {
  ChainState state;
  ProposalRecord record;
};

/// An across-model proposal mechanism.
class AcrossMove {
 public:
  virtual ~AcrossMove() = default;
  virtual std::string kind() const = 0;

  /// Proposes a jump from `state` to model `to` (to != state.k). Domain
  /// errors in the transports come back as a flagged record with alpha = 0.
  Candidate propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                    const JumpDistribution& j, Rng& rng) const;

  /// Length of the auxiliary block kept in the chain state (saturated moves).
  virtual std::size_t aux_dim(const TransdimensionalTarget&, std::size_t) const { return 0; }
  virtual Vec draw_aux(const TransdimensionalTarget& target, std::size_t k, Rng& rng) const;

 protected:
  virtual Candidate do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                               const JumpDistribution& j, Rng& rng) const = 0;
};

/// Transport reversible jump: z = T_k(theta), pad with u ~ nu or truncate,
/// theta' = T_{k'}^{-1}(z'). Auxiliaries are appended after z_k.
class TrjMove final : public AcrossMove {
 public:
  TrjMove(std::vector<MapPtr> maps, Reference nu = Reference(1.0));
  std::string kind() const override { return "trj"; }
  const std::vector<MapPtr>& maps() const { return maps_; }

  /// Deterministic core: `u` is used only when the move goes up in dimension
  /// and must then have length n_{k'} - n_k.
  Candidate propose_given(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                          const JumpDistribution& j, const Vec& u) const;

 protected:
  Candidate do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                       const JumpDistribution& j, Rng& rng) const override;

 private:
  std::vector<MapPtr> maps_;
  Reference nu_;
};

/// Conditional transport reversible jump on the saturated space: the state
/// carries n_max - n_k auxiliaries distributed as nu under the target.
class CtrjMove final : public AcrossMove {
 public:
  CtrjMove(ConditionalMapPtr map, Reference nu);
  std::string kind() const override { return "ctrj"; }
  std::size_t aux_dim(const TransdimensionalTarget& target, std::size_t k) const override {
    return target.max_dim() - target.dim(k);
  }
  Vec draw_aux(const TransdimensionalTarget& target, std::size_t k, Rng& rng) const override;
  const Reference& nu() const { return nu_; }

 protected:
  Candidate do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                       const JumpDistribution& j, Rng& rng) const override;

 private:
  ConditionalMapPtr map_;
  Reference nu_;
};

/// Per-model proposal densities q_k for independence jumps.
class IndependenceProposal {
 public:
  virtual ~IndependenceProposal() = default;
  virtual std::size_t num_models() const = 0;
  virtual double log_density(std::size_t k, const Vec& theta) const = 0;
  virtual Vec sample(std::size_t k, Rng& rng) const = 0;
};

class GaussianIndependence final : public IndependenceProposal {
 public:
  GaussianIndependence(std::vector<Vec> means, std::vector<Mat> chols);
  std::size_t num_models() const override { return means_.size(); }
  double log_density(std::size_t k, const Vec& theta) const override;
  Vec sample(std::size_t k, Rng& rng) const override;

 private:
  std::vector<Vec> means_;
  std::vector<Mat> chols_;
};

/// Factor-analysis independence proposal: loadings ~ N(mu_k, 2 B_k) and
/// Lambda_ii ~ IG(shape, shape * upsilon_{k,i}^2).
class LopesProposal final : public IndependenceProposal {
 public:
  LopesProposal(std::vector<std::size_t> num_loadings, std::vector<Vec> beta_mean, std::vector<Mat> beta_chol,
                std::vector<Vec> upsilon2, double shape = 18.0);

  /// Fits mu_k, B_k from per-model samples; upsilon^2 is the mode of a
  /// log-normal fitted to each Lambda_ii sample.
  static std::shared_ptr<LopesProposal> fit(const FaTarget& target, const std::vector<Mat>& samples,
                                            double shape = 18.0, double cov_scale = 2.0);

  std::size_t num_models() const override { return mean_.size(); }
  double log_density(std::size_t k, const Vec& theta) const override;
  Vec sample(std::size_t k, Rng& rng) const override;
  const Vec& upsilon2(std::size_t k) const { return ups2_.at(k); }

 private:
  std::vector<std::size_t> nb_;
  std::vector<Vec> mean_;
  std::vector<Mat> chol_;
  std::vector<Vec> ups2_;
  double shape_;
};

class IndependenceMove final : public AcrossMove {
 public:
  explicit IndependenceMove(std::shared_ptr<const IndependenceProposal> q) : q_(std::move(q)) {}
  std::string kind() const override { return "independence"; }
  const IndependenceProposal& proposal() const { return *q_; }

 protected:
  Candidate do_propose(const TransdimensionalTarget& target, const ChainState& state, std::size_t to,
                       const JumpDistribution& j, Rng& rng) const override;

 private:
  std::shared_ptr<const IndependenceProposal> q_;
};

/// 1 ^ (pi(k') j_{k'}(k)) / (pi(k) j_k(k')) from known model probabilities.
double acceptance_reduced(const TransdimensionalTarget& target, std::size_t k, std::size_t to,
                          const JumpDistribution& j);

/// Within-model Gaussian random walk theta' = theta + L eps. Coordinates
/// flagged positive are walked on the log scale (with the Jacobian term).
class RandomWalkKernel {
 public:
  RandomWalkKernel() = default;
  RandomWalkKernel(std::vector<Mat> factors, std::vector<std::vector<bool>> positive);
  /// Same isotropic scale for every coordinate of every model.
  static RandomWalkKernel isotropic(const TransdimensionalTarget& target, double scale);

  bool step(const TransdimensionalTarget& target, ChainState& state, Rng& rng) const;
  const Mat& factor(std::size_t k) const { return factors_.at(k); }
  const std::vector<bool>& positive(std::size_t k) const { return positive_.at(k); }
  std::size_t num_models() const { return factors_.size(); }

 private:
  std::vector<Mat> factors_;
  std::vector<std::vector<bool>> positive_;
};

bool random_walk_step(const TransdimensionalTarget& target, ChainState& state, const Mat& factor,
                      const std::vector<bool>& positive, Rng& rng);

/// Repeated pilot runs that set L to 2.38 / sqrt(n) times the Cholesky
/// factor of the pilot covariance (in the walked coordinates). Returns the
/// factor; `state` ends at the last pilot point.
Mat tune_random_walk(const TransdimensionalTarget& target, ChainState& state, const std::vector<bool>& positive,
                     std::size_t pilot_steps, std::size_t rounds, Rng& rng);

struct WithinModelRun {
  Mat samples;  // rows are kept draws
  double acceptance_rate = 0.0;
};

/// Random-walk samples of pi(theta | k) after burn-in, keeping every
/// `thin`-th state.
WithinModelRun sample_within_model(const TransdimensionalTarget& target, ChainState state, const Mat& factor,
                                   const std::vector<bool>& positive, std::size_t n_samples, std::size_t burn_in,
                                   std::size_t thin, Rng& rng);

/// Likelihood-tempered random walks pi_b(theta | k) ~ prior * likelihood^b
/// with adjacent swaps. Needs target.has_prior_split(); the b = 0 rung draws
/// exactly from the prior. Proposal covariances and scales adapt during
/// burn-in only.
struct TemperingConfig {
  std::vector<double> betas;  // strictly increasing, first 0, last 1
  std::size_t samples = 1000;  // kept sweeps
  std::size_t burn_in = 2000;  // sweeps
  std::size_t thin = 5;
};

/// betas_i = (i / (n - 1))^power, i = 0..n-1.
std::vector<double> power_ladder(std::size_t n, double power = 4.0);

struct TemperedRun {
  Mat samples;                               // b = 1 draws
  std::vector<std::vector<double>> log_lik;  // [rung][kept sweep]
  std::vector<double> acceptance_rate;       // per rung (random walk)
  std::vector<double> swap_rate;             // per adjacent pair
};

TemperedRun parallel_tempering(const TransdimensionalTarget& target, std::size_t k, const TemperingConfig& config,
                               Rng& rng);

/// Stepping-stone estimate of log int prior * likelihood from the rung
/// log-likelihoods of a tempered run.
double stepping_stone_log_evidence(const std::vector<double>& betas, const std::vector<std::vector<double>>& log_lik);

/// One step of the RJ algorithm: draw k' ~ j_k; k' == k runs the within-model
/// kernel, otherwise the across-model move with a Metropolis accept.
ProposalRecord rj_step(const TransdimensionalTarget& target, ChainState& state, const AcrossMove& move,
                       const JumpDistribution& j, const RandomWalkKernel& within, Rng& rng);

struct ChainConfig {
  std::size_t steps = 1000;
  /// Every `across_period`-th step (starting with the first) is an RJ step;
  /// the rest are within-model steps. 2 alternates 1:1.
  std::size_t across_period = 2;
  bool record_theta = false;
};

struct ChainOutput {
  std::vector<std::size_t> trajectory;  // model index after each step
  std::vector<ProposalRecord> records;  // one per step
  std::vector<Vec> thetas;              // when requested

  std::size_t across_proposals() const;
  std::size_t across_rejections() const;
  /// step,k,accepted,alpha,move_type (k written 1-based)
  void write_csv(std::ostream& out) const;
};

ChainOutput run_chain(const TransdimensionalTarget& target, ChainState init, const AcrossMove& move,
                      const JumpDistribution& j, const RandomWalkKernel& within, const ChainConfig& config,
                      Rng& rng);

}  // namespace trj
