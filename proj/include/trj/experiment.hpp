#pragma once

#include "trj/estimators.hpp"
#include "trj/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace trj {

/// Experiment description, read from a JSON object. Unknown keys are errors at
/// every level. See README for the schema.
struct ExperimentConfig {
  std::string experiment = "sas";  // sas | toy | vs | fa
  std::vector<std::string> proposals{"exact"};
  std::uint64_t seed = 1;
  std::uint64_t data_seed = 1;
  std::string data_path;  // CSV ingestion (vs: y,x1,x2,x3; fa: d columns)
  std::size_t n_obs = 0;  // synthetic data size; 0 = experiment default

  std::size_t n_train = 2000;  // per model
  std::size_t n_test = 2000;   // per model and replicate
  std::size_t replicates = 0;  // MBE replicates
  std::size_t chains = 0;
  std::size_t chain_steps = 10000;
  std::size_t across_period = 2;
  std::size_t occupancy_stride = 100;
  std::string jump = "uniform";  // uniform | marginal

  TrainConfig train;
  VsConfig vs;
  std::vector<std::size_t> fa_factors{1, 2};
  Mat fa_beta;    // loadings used to simulate FA data
  Vec fa_lambda;  // idiosyncratic variances

  /// Within-model sampling for targets without an exact sampler: a tuned
  /// random walk, or likelihood tempering when the target has a prior split
  /// (burn_in and thin then count sweeps).
  std::string within_sampler = "auto";  // auto | random-walk | tempering
  std::size_t rungs = 24;
  std::size_t pilot_steps = 2000;
  std::size_t pilot_rounds = 4;
  std::size_t burn_in = 2000;
  std::size_t thin = 5;

  double aux_scale = 1.0;       // reference nu for TRJ/CTRJ auxiliaries
  double saturated_aux_sd = 0;  // nu of the standard saturated proposal; 0 = prior sd (vs) or 1
  std::size_t independence_shape = 18;

  std::string gt_method = "auto";  // auto | analytic | quadrature | tempering | importance
  std::size_t gt_budget = 1000000;

  std::filesystem::path out_dir = "out";
  std::filesystem::path cache_dir;  // fitted maps are reused from here when present

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
  /// Cross-field checks (proposal kinds known and available for the target,
  /// sizes positive, data path present).
  void validate() const;
  /// SHA-256 of the canonical JSON dump.
  std::string hash() const;
};

struct ArtifactRecord {
  std::string path;  // relative to the output directory
  std::string sha256;
  std::uintmax_t bytes = 0;
};

struct RunManifest {
  std::string config_hash;
  std::string code_version;
  std::vector<ArtifactRecord> artifacts;
  std::vector<std::pair<std::string, double>> stage_seconds;
  std::string failed_stage;
  bool dry_run = false;

  nlohmann::json to_json() const;
};

/// Raised when a pipeline stage fails; the manifest of completed artifacts has
/// already been written.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("stage " + stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

std::string sha256_hex(const std::string& bytes);
std::string file_sha256(const std::filesystem::path& path);

/// Target named by the config (synthetic data unless data_path is set).
TargetPtr make_target(const ExperimentConfig& config);

struct GroundTruth {
  Vec pi;
  Vec se;
  std::string method;
  std::size_t evaluations = 0;
};

struct GroundTruthOptions {
  std::string method = "auto";
  std::size_t pilot_steps = 2000;
  std::size_t pilot_rounds = 4;
  std::size_t max_quadrature_dim = 4;
  std::size_t rungs = 24;
  std::size_t runs = 4;  // independent tempered runs per model
};

/// Model probabilities with Monte Carlo (or grid-refinement) standard errors.
/// "auto" picks, in order: analytic marginals; a trapezoid grid when every
/// model has dimension <= 4; stepping-stone over likelihood-tempered runs
/// when the target has a prior split; importance sampling with a Student-t
/// fitted to a pilot random walk. `budget` (>= 1e5) bounds the density
/// evaluations outside the pilot runs.
GroundTruth ground_truth(const TransdimensionalTarget& target, std::size_t budget, std::uint64_t seed,
                         const GroundTruthOptions& options = {});

/// Geyer initial-monotone-sequence effective sample size of a series.
double effective_sample_size(const std::vector<double>& x);

/// Starting point with finite density: zeros, positive coordinates at 1.
Vec default_start(const TransdimensionalTarget& target, std::size_t k);

/// Random-walk factor 2.38 / sqrt(n) chol(cov) in walked coordinates.
Mat rw_factor_from_samples(const Mat& samples, const std::vector<bool>& positive);

struct SampleSets {
  std::vector<Mat> train;                // per model
  std::vector<std::vector<Mat>> test;    // [replicate][model]
  std::vector<double> acceptance_rate;   // per model, random walk only
  std::vector<double> min_ess;           // per model, random walk only
  std::vector<double> min_swap_rate;     // per model, tempering only
  std::vector<std::string> source;       // exact | random-walk | tempering
};

/// Training and test samples from independent runs per model.
SampleSets draw_sample_sets(const TransdimensionalTarget& target, const ExperimentConfig& config);

/// Proposal of the given kind built from the training samples. `reports`
/// receives one training report per fitted flow.
std::shared_ptr<const AcrossMove> build_proposal(const std::string& kind, const TargetPtr& target,
                                                 const std::vector<Mat>& train, const ExperimentConfig& config,
                                                 std::vector<std::pair<std::string, TrainReport>>* reports = nullptr);

struct ExperimentResult {
  RunManifest manifest;
  /// [kind][replicate] estimates.
  std::map<std::string, std::vector<ModelProbEstimate>> mbe;
  /// [kind][chain] final occupancy and its batch-means standard errors.
  std::map<std::string, std::vector<Vec>> chain_occupancy;
  std::map<std::string, std::vector<Vec>> chain_se;
};

/// Full pipeline: data, per-model samples, map fitting, chains and MBE
/// replicates, CSV output and manifest. `threads` bounds replicate/chain
/// parallelism; outputs do not depend on it.
ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t threads = 1, bool dry_run = false);

/// Ground truth for the configured target, written as ground_truth.csv.
GroundTruth run_ground_truth(const ExperimentConfig& config, bool dry_run = false);

}  // namespace trj
