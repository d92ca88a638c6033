#pragma once

#include "trj/samplers.hpp"

#include <string>
#include <vector>

namespace trj {

/// Acceptance probabilities of proposed across-model moves, by ordered pair.
class AlphaLedger {
 public:
  explicit AlphaLedger(std::size_t num_models);

  static AlphaLedger from_records(const std::vector<ProposalRecord>& records, std::size_t num_models);

  void add(std::size_t from, std::size_t to, double alpha);
  std::size_t num_models() const { return k_; }
  std::size_t count(std::size_t from, std::size_t to) const { return cell(from, to).size(); }
  double mean(std::size_t from, std::size_t to) const;
  const std::vector<double>& alphas(std::size_t from, std::size_t to) const { return cell(from, to); }

 private:
  const std::vector<double>& cell(std::size_t from, std::size_t to) const;
  std::size_t k_;
  std::vector<std::vector<double>> cells_;
};

/// A ratio estimate that may be undefined (empty pair or zero acceptance).
struct RatioEstimate {
  double value = 0.0;
  bool valid = false;
  std::string flag;
};

/// B_{k,k'} = mean alpha(k' -> k) / mean alpha(k -> k'). With a symmetric
/// jump distribution this estimates m_k / m_{k'}.
RatioEstimate bartolucci_bf(const AlphaLedger& ledger, std::size_t k, std::size_t k2);

struct ModelProbEstimate {
  Vec pi;
  bool valid = false;
  std::string flags;
  std::string provenance;
};

/// Model probabilities from pairwise evidence ratios bf(a, b) = m_a / m_b
/// under a uniform model prior, pivoting on model `pivot`. Throws on a
/// missing (non-finite) or non-positive ratio involving the pivot.
ModelProbEstimate model_probs(const Mat& bf, std::size_t pivot = 0);

/// Evidence ratios m_a / m_b from a ledger: the Bartolucci ratio times the
/// jump ratio j_b(a) / j_a(b). Undefined pairs are NaN.
Mat evidence_ratios(const AlphaLedger& ledger, const JumpDistribution& j, std::vector<std::string>* flags = nullptr);

/// Sample-based estimator: one proposal (k' ~ j_k) per stored sample of each
/// model; same-model draws are discarded. No chain is run.
ModelProbEstimate mbe_from_samples(const TransdimensionalTarget& target, const std::vector<Mat>& samples,
                                   const AcrossMove& move, const JumpDistribution& j, Rng& rng,
                                   std::size_t pivot = 0, AlphaLedger* ledger_out = nullptr);

/// Element t is the fraction of the first t+1 states equal to k.
std::vector<double> running_occupancy(const std::vector<std::size_t>& trajectory, std::size_t k);

/// Occupancy fractions of each model over a trajectory.
Vec occupancy(const std::vector<std::size_t>& trajectory, std::size_t num_models);

/// Batch-means standard error of the occupancy of model k.
double occupancy_se(const std::vector<std::size_t>& trajectory, std::size_t k, std::size_t batches = 50);

/// Sample variance (n - 1 denominator).
double sample_variance(const std::vector<double>& v);
double median(std::vector<double> v);

/// One-sided F test of H1: var(b) > var(a) at the given level. A zero
/// variance in `a` with positive variance in `b` passes.
struct VarianceTest {
  double var_a = 0.0;
  double var_b = 0.0;
  double p_value = 1.0;
  bool reject_equal = false;
};
VarianceTest variance_greater_test(const std::vector<double>& a, const std::vector<double>& b, double level = 0.05);

}  // namespace trj
