#include "trj/experiment.hpp"

#include "trj/serialize.hpp"

#include <openssl/evp.h>

#include <boost/math/special_functions/gamma.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#ifndef TRJ_VERSION
#define TRJ_VERSION "unknown"
#endif

namespace trj {

namespace fs = std::filesystem;
using nlohmann::json;

// ------------------------------------------------------------------ config

namespace {

const std::set<std::string> kExperiments{"sas", "toy", "vs", "fa"};
const std::set<std::string> kProposals{"exact",       "affine",      "flow", "conditional-flow",
                                       "independence", "standard-saturated"};

/// Reads the keys of one JSON object and rejects any it was not asked for.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw std::invalid_argument(where_ + ": unknown key '" + key + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

Mat matrix_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw std::invalid_argument(std::string(what) + ": expected a list of rows");
  const auto rows = static_cast<Eigen::Index>(j.size());
  const auto cols = static_cast<Eigen::Index>(j.front().size());
  Mat m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const auto& row = j.at(static_cast<std::size_t>(r));
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols) {
      throw std::invalid_argument(std::string(what) + ": ragged rows");
    }
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
  }
  return m;
}

json matrix_to_json(const Mat& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& j) {
  ExperimentConfig c;
  StrictObject top(j, "config");
  top.get("experiment", c.experiment);
  top.get("proposals", c.proposals);
  top.get("seed", c.seed);
  top.get("data_seed", c.data_seed);
  top.get("data_path", c.data_path);
  top.get("n_obs", c.n_obs);
  top.get("n_train", c.n_train);
  top.get("n_test", c.n_test);
  top.get("replicates", c.replicates);
  top.get("jump", c.jump);
  top.get("aux_scale", c.aux_scale);
  top.get("saturated_aux_sd", c.saturated_aux_sd);
  top.get("independence_shape", c.independence_shape);
  std::string out_dir = c.out_dir.string(), cache_dir;
  top.get("out_dir", out_dir);
  top.get("cache_dir", cache_dir);
  c.out_dir = out_dir;
  c.cache_dir = cache_dir;

  if (const json* ch = top.child("chains")) {
    StrictObject o(*ch, "chains");
    o.get("count", c.chains);
    o.get("steps", c.chain_steps);
    o.get("across_period", c.across_period);
    o.get("occupancy_stride", c.occupancy_stride);
    o.finish();
  }
  if (const json* tr = top.child("train")) {
    StrictObject o(*tr, "train");
    o.get("epochs", c.train.epochs);
    o.get("batch_size", c.train.batch_size);
    o.get("learning_rate", c.train.learning_rate);
    o.get("cosine_decay", c.train.cosine_decay);
    o.get("validation_fraction", c.train.validation_fraction);
    o.get("patience", c.train.patience);
    o.get("grad_clip", c.train.grad_clip);
    o.get("seed", c.train.seed);
    o.get("layers", c.train.flow.layers);
    o.get("bins", c.train.flow.bins);
    o.get("hidden", c.train.flow.hidden);
    o.finish();
  }
  if (const json* vs = top.child("vs")) {
    StrictObject o(*vs, "vs");
    o.get("mix_weight", c.vs.mix_weight);
    o.get("wide_sd", c.vs.wide_sd);
    o.get("prior_sd", c.vs.prior_sd);
    o.finish();
  }
  if (const json* fa = top.child("fa")) {
    StrictObject o(*fa, "fa");
    o.get("factors", c.fa_factors);
    if (const json* b = o.child("beta")) c.fa_beta = matrix_from_json(*b, "fa.beta");
    std::vector<double> lambda;
    o.get("lambda", lambda);
    if (!lambda.empty()) c.fa_lambda = Eigen::Map<const Vec>(lambda.data(), static_cast<Eigen::Index>(lambda.size()));
    o.finish();
  }
  if (const json* w = top.child("within")) {
    StrictObject o(*w, "within");
    o.get("sampler", c.within_sampler);
    o.get("rungs", c.rungs);
    o.get("pilot_steps", c.pilot_steps);
    o.get("pilot_rounds", c.pilot_rounds);
    o.get("burn_in", c.burn_in);
    o.get("thin", c.thin);
    o.finish();
  }
  if (const json* g = top.child("ground_truth")) {
    StrictObject o(*g, "ground_truth");
    o.get("method", c.gt_method);
    o.get("budget", c.gt_budget);
    o.finish();
  }
  top.finish();
  return c;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return from_json(j);
}

json ExperimentConfig::to_json() const {
  json j;
  j["experiment"] = experiment;
  j["proposals"] = proposals;
  j["seed"] = seed;
  j["data_seed"] = data_seed;
  j["data_path"] = data_path;
  j["n_obs"] = n_obs;
  j["n_train"] = n_train;
  j["n_test"] = n_test;
  j["replicates"] = replicates;
  j["jump"] = jump;
  j["aux_scale"] = aux_scale;
  j["saturated_aux_sd"] = saturated_aux_sd;
  j["independence_shape"] = independence_shape;
  j["out_dir"] = out_dir.string();
  j["cache_dir"] = cache_dir.string();
  j["chains"] = {{"count", chains}, {"steps", chain_steps}, {"across_period", across_period},
                 {"occupancy_stride", occupancy_stride}};
  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"cosine_decay", train.cosine_decay},
                {"validation_fraction", train.validation_fraction},
                {"patience", train.patience},
                {"grad_clip", train.grad_clip},
                {"seed", train.seed},
                {"layers", train.flow.layers},
                {"bins", train.flow.bins},
                {"hidden", train.flow.hidden}};
  j["vs"] = {{"mix_weight", vs.mix_weight}, {"wide_sd", vs.wide_sd}, {"prior_sd", vs.prior_sd}};
  json fa = {{"factors", fa_factors}};
  if (fa_beta.size() > 0) fa["beta"] = matrix_to_json(fa_beta);
  if (fa_lambda.size() > 0) fa["lambda"] = std::vector<double>(fa_lambda.data(), fa_lambda.data() + fa_lambda.size());
  j["fa"] = fa;
  j["within"] = {{"sampler", within_sampler}, {"rungs", rungs}, {"pilot_steps", pilot_steps}, {"pilot_rounds", pilot_rounds}, {"burn_in", burn_in}, {"thin", thin}};
  j["ground_truth"] = {{"method", gt_method}, {"budget", gt_budget}};
  return j;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (!kExperiments.count(experiment)) fail("experiment must be one of sas, toy, vs, fa");
  if (proposals.empty() && (replicates > 0 || chains > 0)) fail("no proposals to run");
  std::set<std::string> seen;
  for (const auto& p : proposals) {
    if (!kProposals.count(p)) fail("unknown proposal kind '" + p + "'");
    if (!seen.insert(p).second) fail("proposal kind '" + p + "' listed twice");
    if (p == "exact" && experiment != "sas" && experiment != "toy") fail("exact maps exist only for sas and toy");
    if (p == "conditional-flow" && experiment == "fa") fail("conditional-flow needs unconstrained parameters (not fa)");
  }
  if (n_train < 2) fail("n_train must be at least 2");
  if (replicates > 0 && n_test < 1) fail("n_test must be positive");
  if (chains > 0 && chain_steps < 1) fail("chains.steps must be positive");
  if (across_period < 1) fail("chains.across_period must be positive");
  if (occupancy_stride < 1) fail("chains.occupancy_stride must be positive");
  if (jump != "uniform" && jump != "marginal") fail("jump must be uniform or marginal");
  if (jump == "marginal" && experiment != "sas" && experiment != "toy") fail("marginal jumps need known model probabilities");
  if (!(aux_scale > 0.0)) fail("aux_scale must be positive");
  if (saturated_aux_sd < 0.0) fail("saturated_aux_sd must be non-negative");
  if (independence_shape < 1) fail("independence_shape must be positive");
  if (thin < 1 || pilot_rounds < 1 || pilot_steps < 10) fail("within: thin, pilot_rounds >= 1 and pilot_steps >= 10");
  if (gt_method != "auto" && gt_method != "analytic" && gt_method != "quadrature" && gt_method != "tempering" &&
      gt_method != "importance") {
    fail("ground_truth.method must be auto, analytic, quadrature, tempering or importance");
  }
  if (within_sampler != "auto" && within_sampler != "random-walk" && within_sampler != "tempering") {
    fail("within.sampler must be auto, random-walk or tempering");
  }
  if (within_sampler == "tempering" && experiment != "fa" && experiment != "toy") fail("tempering needs a prior split (fa, toy)");
  if (rungs < 2) fail("within.rungs must be at least 2");
  if (gt_budget < 100000) fail("ground_truth.budget must be at least 1e5");
  if (!data_path.empty()) {
    if (experiment == "sas" || experiment == "toy") fail("data_path applies to vs and fa only");
    if (!fs::exists(data_path)) fail("data_path does not exist: " + data_path);
  }
  if (experiment == "fa") {
    if (fa_factors.empty()) fail("fa.factors is empty");
    for (auto f : fa_factors) {
      if (f == 0) fail("fa.factors entries must be positive");
    }
    if (fa_beta.size() > 0 && fa_lambda.size() != fa_beta.rows()) fail("fa.lambda must have one entry per row of fa.beta");
  }
  if (train.flow.layers < 1 || train.flow.bins < 2) fail("train.layers >= 1 and train.bins >= 2");
}

std::string ExperimentConfig::hash() const { return sha256_hex(to_json().dump()); }

json RunManifest::to_json() const {
  json j;
  j["config_hash"] = config_hash;
  j["code_version"] = code_version;
  j["dry_run"] = dry_run;
  json arts = json::array();
  for (const auto& a : artifacts) arts.push_back({{"path", a.path}, {"sha256", a.sha256}, {"bytes", a.bytes}});
  j["artifacts"] = arts;
  json stages = json::array();
  for (const auto& [name, sec] : stage_seconds) stages.push_back({{"stage", name}, {"seconds", sec}});
  j["stages"] = stages;
  if (!failed_stage.empty()) j["failed_stage"] = failed_stage;
  return j;
}

// ---------------------------------------------------------------- hashing

namespace {

std::string to_hex(const unsigned char* d, unsigned n) {
  std::ostringstream os;
  for (unsigned i = 0; i < n; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return os.str();
}

struct Sha256 {
  Sha256() : ctx(EVP_MD_CTX_new()) {
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 init failed");
  }
  ~Sha256() { EVP_MD_CTX_free(ctx); }
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;
  void update(const char* p, std::size_t n) { EVP_DigestUpdate(ctx, p, n); }
  std::string hex() {
    unsigned char d[EVP_MAX_MD_SIZE];
    unsigned n = 0;
    EVP_DigestFinal_ex(ctx, d, &n);
    return to_hex(d, n);
  }
  EVP_MD_CTX* ctx;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
  Sha256 h;
  h.update(bytes.data(), bytes.size());
  return h.hex();
}

std::string file_sha256(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  Sha256 h;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
  return h.hex();
}

// ------------------------------------------------------------------ target

TargetPtr make_target(const ExperimentConfig& config) {
  const auto& e = config.experiment;
  if (e == "sas") return sas_target();
  if (e == "toy") return gaussian_toy(config.data_seed, config.n_obs ? config.n_obs : 30);
  if (e == "vs") {
    Mat x;
    Vec y;
    if (!config.data_path.empty()) {
      const Mat m = read_csv_matrix(config.data_path, 4);
      y = m.col(0);
      x = m.rightCols(3);
    } else {
      const Dataset d = simulate_vs_data(config.data_seed, config.n_obs ? config.n_obs : 80);
      y = d.y.col(0);
      x = d.x;
    }
    return std::make_shared<VsTarget>(std::move(x), std::move(y), config.vs);
  }
  if (e == "fa") {
    Mat y;
    if (!config.data_path.empty()) {
      y = read_csv_matrix(config.data_path);
    } else {
      Mat beta = config.fa_beta;
      Vec lambda = config.fa_lambda;
      if (beta.size() == 0) {
        beta = (Mat(4, 1) << 0.9, 0.8, 0.7, 0.5).finished();
        lambda = (Vec(4) << 0.3, 0.4, 0.5, 0.6).finished();
      }
      y = simulate_fa_data(beta, lambda, config.n_obs ? config.n_obs : 200, config.data_seed).y;
    }
    return std::make_shared<FaTarget>(std::move(y), config.fa_factors);
  }
  throw std::invalid_argument("make_target: unknown experiment " + e);
}

// ---------------------------------------------------------- within-model

Vec default_start(const TransdimensionalTarget& target, std::size_t k) {
  const auto pos = target.positive_mask(k);
  Vec v = Vec::Zero(static_cast<Eigen::Index>(pos.size()));
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (pos[i]) v[static_cast<Eigen::Index>(i)] = 1.0;
  }
  return v;
}

namespace {

Mat walked(const Mat& samples, const std::vector<bool>& positive) {
  Mat w = samples;
  for (std::size_t i = 0; i < positive.size(); ++i) {
    if (positive[i]) w.col(static_cast<Eigen::Index>(i)) = samples.col(static_cast<Eigen::Index>(i)).array().log();
  }
  return w;
}

void mean_cov(const Mat& x, Vec& mean, Mat& cov) {
  mean = x.colwise().mean().transpose();
  const Mat c = x.rowwise() - mean.transpose();
  cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
}

}  // namespace

Mat rw_factor_from_samples(const Mat& samples, const std::vector<bool>& positive) {
  if (samples.rows() < 2) throw std::invalid_argument("rw_factor_from_samples: need two samples");
  Vec m;
  Mat cov;
  mean_cov(walked(samples, positive), m, cov);
  return 2.38 / std::sqrt(static_cast<double>(cov.rows())) * cholesky_lower(cov, "rw_factor_from_samples");
}

double effective_sample_size(const std::vector<double>& x) {
  const std::size_t n = x.size();
  if (n < 4) return static_cast<double>(n);
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(n);
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < n; ++t) s += (x[t] - mean) * (x[t + lag] - mean);
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0)) return static_cast<double>(n);
  // Sum of adjacent-pair autocorrelations, truncated at the first non-positive
  // pair and forced monotone.
  double sum = 0.0, prev = std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; 2 * m + 1 < n; ++m) {
    double g = (autocov(2 * m) + autocov(2 * m + 1)) / c0;
    if (g <= 0.0) break;
    g = std::min(g, prev);
    prev = g;
    sum += g;
  }
  const double tau = std::max(2.0 * sum - 1.0, 1.0 / static_cast<double>(n));
  return static_cast<double>(n) / tau;
}

namespace {

double min_ess(const Mat& s) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < s.cols(); ++c) {
    const std::vector<double> col(s.col(c).data(), s.col(c).data() + s.rows());
    best = std::min(best, effective_sample_size(col));
  }
  return best;
}

Mat exact_draws(const TransdimensionalTarget& target, std::size_t k, std::size_t n, Rng& rng) {
  Mat s(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(target.dim(k)));
  for (Eigen::Index r = 0; r < s.rows(); ++r) s.row(r) = target.sample_model(k, rng).transpose();
  return s;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers; the first
/// exception is rethrown after all workers stop.
template <class Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace

SampleSets draw_sample_sets(const TransdimensionalTarget& target, const ExperimentConfig& config) {
  const std::size_t K = target.num_models();
  const std::size_t reps = config.replicates;
  SampleSets out;
  out.train.resize(K);
  out.test.assign(reps, std::vector<Mat>(K));
  out.acceptance_rate.assign(K, std::nan(""));
  out.min_ess.assign(K, std::nan(""));
  out.source.assign(K, "exact");
  out.min_swap_rate.assign(K, std::nan(""));
  const bool tempered = config.within_sampler == "tempering" ||
                        (config.within_sampler == "auto" && target.has_prior_split());
  for (std::size_t k = 0; k < K; ++k) {
    Mat test_all;
    const std::size_t n_test = config.n_test * reps;
    if (target.has_exact_sampler()) {
      Rng train_rng = make_stream(config.seed, 100 + k);
      out.train[k] = exact_draws(target, k, config.n_train, train_rng);
      Rng test_rng = make_stream(config.seed, 200 + k);
      test_all = exact_draws(target, k, n_test, test_rng);
    } else if (tempered) {
      out.source[k] = "tempering";
      TemperingConfig tc;
      tc.betas = power_ladder(config.rungs);
      tc.burn_in = config.burn_in;
      tc.thin = config.thin;
      tc.samples = config.n_train;
      Rng rng = make_stream(config.seed, 100 + k);
      const TemperedRun train = parallel_tempering(target, k, tc, rng);
      out.train[k] = train.samples;
      out.acceptance_rate[k] = train.acceptance_rate.back();
      out.min_ess[k] = min_ess(train.samples);
      out.min_swap_rate[k] = *std::min_element(train.swap_rate.begin(), train.swap_rate.end());
      if (n_test > 0) {
        tc.samples = n_test;
        Rng test_rng = make_stream(config.seed, 200 + k);
        test_all = parallel_tempering(target, k, tc, test_rng).samples;
      }
    } else {
      out.source[k] = "random-walk";
      const auto pos = target.positive_mask(k);
      Rng rng = make_stream(config.seed, 100 + k);
      ChainState s = make_state(target, k, default_start(target, k));
      if (s.log_density == kNegInf) throw std::runtime_error("sampling: start point of model " + target.model_label(k) + " has zero density");
      const Mat factor = tune_random_walk(target, s, pos, config.pilot_steps, config.pilot_rounds, rng);
      const auto train = sample_within_model(target, s, factor, pos, config.n_train, config.burn_in, config.thin, rng);
      out.train[k] = train.samples;
      out.acceptance_rate[k] = train.acceptance_rate;
      out.min_ess[k] = min_ess(train.samples);
      if (n_test > 0) {
        Rng test_rng = make_stream(config.seed, 200 + k);
        const ChainState s0 = make_state(target, k, train.samples.row(0).transpose());
        test_all = sample_within_model(target, s0, factor, pos, n_test, config.burn_in, config.thin, test_rng).samples;
      }
    }
    for (std::size_t r = 0; r < reps; ++r) {
      out.test[r][k] = test_all.middleRows(static_cast<Eigen::Index>(r * config.n_test),
                                           static_cast<Eigen::Index>(config.n_test));
    }
  }
  return out;
}

// --------------------------------------------------------------- proposals

namespace {

bool any_positive(const std::vector<bool>& p) { return std::find(p.begin(), p.end(), true) != p.end(); }

/// Fits `fit` to samples in walked coordinates and prepends the log map when
/// the model has positive coordinates.
template <class Fit>
MapPtr fit_walked(const Mat& samples, const std::vector<bool>& positive, Fit&& fit) {
  if (!any_positive(positive)) return fit(samples);
  auto log_map = std::make_shared<LogPositiveMap>(positive);
  return std::make_shared<CompositionMap>(std::vector<MapPtr>{log_map, fit(walked(samples, positive))});
}

std::string cache_key(const ExperimentConfig& c) {
  json j = c.to_json();
  for (const char* k : {"proposals", "replicates", "n_test", "chains", "jump", "out_dir", "cache_dir", "ground_truth",
                        "saturated_aux_sd", "independence_shape"}) {
    j.erase(k);
  }
  return sha256_hex(j.dump()).substr(0, 16);
}

}  // namespace

std::shared_ptr<const AcrossMove> build_proposal(const std::string& kind, const TargetPtr& target,
                                                 const std::vector<Mat>& train, const ExperimentConfig& config,
                                                 std::vector<std::pair<std::string, TrainReport>>* reports) {
  const std::size_t K = target->num_models();
  require_dim(train.size(), K, "build_proposal: training sets");
  const Reference nu(config.aux_scale);
  fs::path cache;
  if (!config.cache_dir.empty()) {
    cache = config.cache_dir / cache_key(config);
    fs::create_directories(cache);
  }

  if (kind == "exact") {
    if (auto s = std::dynamic_pointer_cast<const SasTarget>(target)) return std::make_shared<TrjMove>(s->exact_maps(), nu);
    if (auto t = std::dynamic_pointer_cast<const GaussianToyTarget>(target)) {
      return std::make_shared<TrjMove>(t->exact_maps(), nu);
    }
    throw std::invalid_argument("build_proposal: no exact maps for target " + target->name());
  }
  if (kind == "affine" || kind == "flow") {
    std::vector<MapPtr> maps(K);
    for (std::size_t k = 0; k < K; ++k) {
      const fs::path file = cache.empty() ? fs::path() : cache / (kind + "_k" + std::to_string(k + 1) + ".json");
      if (!file.empty() && fs::exists(file)) {
        maps[k] = load_map(file);
        continue;
      }
      const auto pos = target->positive_mask(k);
      if (kind == "affine") {
        maps[k] = fit_walked(train[k], pos, [](const Mat& s) -> MapPtr { return fit_affine(s); });
      } else {
        TrainConfig tc = config.train;
        tc.seed = config.train.seed + 7919 * k;
        maps[k] = fit_walked(train[k], pos, [&](const Mat& s) -> MapPtr {
          FitResult r = fit_flow(s, tc);
          if (reports) reports->emplace_back("k" + std::to_string(k + 1), std::move(r.report));
          return r.map;
        });
      }
      if (!file.empty()) save_map(*maps[k], file);
    }
    return std::make_shared<TrjMove>(std::move(maps), nu);
  }
  if (kind == "conditional-flow") {
    const fs::path file = cache.empty() ? fs::path() : cache / "conditional-flow.json";
    std::vector<SlotLayout> layouts;
    for (std::size_t k = 0; k < K; ++k) layouts.push_back(target->layout(k));
    if (!file.empty() && fs::exists(file)) return std::make_shared<CtrjMove>(load_conditional_map(file), nu);
    for (std::size_t k = 0; k < K; ++k) {
      if (any_positive(target->positive_mask(k))) {
        throw std::invalid_argument("build_proposal: conditional-flow needs unconstrained parameters");
      }
    }
    const auto n_max = static_cast<Eigen::Index>(target->max_dim());
    Eigen::Index rows = 0;
    for (const auto& t : train) rows += t.rows();
    Mat xi(rows, n_max);
    std::vector<std::size_t> ctx;
    Rng rng = make_stream(config.seed, 700);
    Eigen::Index r = 0;
    for (std::size_t k = 0; k < K; ++k) {
      const std::size_t w = target->max_dim() - target->dim(k);
      for (Eigen::Index i = 0; i < train[k].rows(); ++i, ++r) {
        xi.row(r) = layouts[k].embed(train[k].row(i).transpose(), nu.sample(w, rng)).transpose();
        ctx.push_back(k);
      }
    }
    ConditionalFitResult fit = fit_conditional_flow(xi, ctx, layouts, nu, config.train);
    if (reports) reports->emplace_back("all", std::move(fit.report));
    if (!file.empty()) save_conditional_map(*fit.map, file);
    return std::make_shared<CtrjMove>(fit.map, nu);
  }
  if (kind == "standard-saturated") {
    double sd = config.saturated_aux_sd;
    if (sd == 0.0) {
      auto vs = std::dynamic_pointer_cast<const VsTarget>(target);
      sd = vs ? vs->config().prior_sd : 1.0;
    }
    return std::make_shared<CtrjMove>(std::make_shared<IdentityConditionalMap>(target->max_dim(), K), Reference(sd));
  }
  if (kind == "independence") {
    if (auto fa = std::dynamic_pointer_cast<const FaTarget>(target)) {
      return std::make_shared<IndependenceMove>(
          LopesProposal::fit(*fa, train, static_cast<double>(config.independence_shape)));
    }
    std::vector<Vec> means(K);
    std::vector<Mat> chols(K);
    for (std::size_t k = 0; k < K; ++k) {
      if (any_positive(target->positive_mask(k))) {
        throw std::invalid_argument("build_proposal: Gaussian independence proposal needs unconstrained parameters");
      }
      Mat cov;
      mean_cov(train[k], means[k], cov);
      chols[k] = cholesky_lower(cov, "build_proposal: independence covariance");
    }
    return std::make_shared<IndependenceMove>(std::make_shared<GaussianIndependence>(std::move(means), std::move(chols)));
  }
  throw std::invalid_argument("build_proposal: unknown proposal kind " + kind);
}

// ------------------------------------------------------------ ground truth

namespace {

double log_sum_exp(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Density in walked coordinates psi (log on positive coordinates).
double walked_log_density(const TransdimensionalTarget& t, std::size_t k, const std::vector<bool>& pos, const Vec& psi) {
  Vec theta = psi;
  double logj = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    if (pos[i]) {
      theta[static_cast<Eigen::Index>(i)] = std::exp(psi[static_cast<Eigen::Index>(i)]);
      logj += psi[static_cast<Eigen::Index>(i)];
    }
  }
  const double l = t.log_density(k, theta);
  return l == kNegInf ? kNegInf : l + logj;
}

/// Trapezoid rule over the box [lo, hi] with m points per coordinate, in logs.
double grid_log_integral(const TransdimensionalTarget& t, std::size_t k, const std::vector<bool>& pos, const Vec& lo,
                         const Vec& hi, std::size_t m, std::size_t& evals) {
  const auto n = lo.size();
  const Vec h = (hi - lo) / static_cast<double>(m - 1);
  std::vector<std::size_t> idx(static_cast<std::size_t>(n), 0);
  std::vector<double> terms;
  Vec psi(n);
  for (;;) {
    double logw = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto j = idx[static_cast<std::size_t>(i)];
      psi[i] = lo[i] + h[i] * static_cast<double>(j);
      logw += std::log(h[i]) + ((j == 0 || j == m - 1) ? std::log(0.5) : 0.0);
    }
    terms.push_back(walked_log_density(t, k, pos, psi) + logw);
    ++evals;
    Eigen::Index i = 0;
    while (i < n && ++idx[static_cast<std::size_t>(i)] == m) idx[static_cast<std::size_t>(i++)] = 0;
    if (i == n) break;
  }
  return log_sum_exp(terms);
}

struct StudentT {
  Vec mean;
  Mat chol;
  double df;
  double log_norm;

  StudentT(Vec m, const Mat& cov, double nu) : mean(std::move(m)), chol(cholesky_lower(cov, "ground_truth: proposal")), df(nu) {
    const double n = static_cast<double>(mean.size());
    log_norm = std::lgamma(0.5 * (df + n)) - std::lgamma(0.5 * df) - 0.5 * n * std::log(df * M_PI) -
               chol.diagonal().array().log().sum();
  }
  Vec draw(Rng& rng) const {
    const Vec z = standard_normal(static_cast<std::size_t>(mean.size()), rng);
    const double g = std::chi_squared_distribution<double>(df)(rng) / df;
    return mean + chol * z / std::sqrt(g);
  }
  double log_pdf(const Vec& x) const {
    const Vec w = chol.triangularView<Eigen::Lower>().solve(x - mean);
    return log_norm - 0.5 * (df + static_cast<double>(mean.size())) * std::log1p(w.squaredNorm() / df);
  }
};

}  // namespace

GroundTruth ground_truth(const TransdimensionalTarget& target, std::size_t budget, std::uint64_t seed,
                         const GroundTruthOptions& options) {
  if (budget < 100000) throw std::invalid_argument("ground_truth: budget must be at least 1e5 evaluations");
  const std::size_t K = target.num_models();
  GroundTruth g;
  std::string method = options.method;
  if (method == "auto") {
    if (target.true_marginals()) {
      method = "analytic";
    } else {
      std::size_t maxd = 0;
      for (std::size_t k = 0; k < K; ++k) maxd = std::max(maxd, target.dim(k));
      method = maxd <= options.max_quadrature_dim ? "quadrature"
               : target.has_prior_split()         ? "tempering"
                                                  : "importance";
    }
  }
  g.method = method;
  if (method == "analytic") {
    const auto m = target.true_marginals();
    if (!m) throw std::invalid_argument("ground_truth: target has no analytic model probabilities");
    g.pi = *m;
    g.se = Vec::Zero(static_cast<Eigen::Index>(K));
    return g;
  }
  if (method != "quadrature" && method != "importance" && method != "tempering") throw std::invalid_argument("ground_truth: unknown method " + method);

  Vec log_z(static_cast<Eigen::Index>(K));
  Vec var_log_z(static_cast<Eigen::Index>(K));
  const std::size_t per_model = budget / K;
  for (std::size_t k = 0; k < K; ++k) {
    const auto ki = static_cast<Eigen::Index>(k);
    if (method == "tempering") {
      if (options.runs < 2) throw std::invalid_argument("ground_truth: tempering needs at least two runs");
      TemperingConfig tc;
      tc.betas = power_ladder(options.rungs);
      const std::size_t sweeps = std::max<std::size_t>(100, per_model / (options.runs * options.rungs));
      tc.burn_in = sweeps / 5;
      tc.samples = sweeps - tc.burn_in;
      tc.thin = 1;
      std::vector<double> est;
      for (std::size_t r = 0; r < options.runs; ++r) {
        Rng rng = make_stream(seed, 1000 * k + r);
        est.push_back(stepping_stone_log_evidence(tc.betas, parallel_tempering(target, k, tc, rng).log_lik));
        g.evaluations += sweeps * options.rungs;
      }
      double mean = 0.0;
      for (double v : est) mean += v / static_cast<double>(est.size());
      log_z[ki] = mean;
      var_log_z[ki] = sample_variance(est) / static_cast<double>(est.size());
      continue;
    }
    const auto pos = target.positive_mask(k);
    const auto n = static_cast<Eigen::Index>(target.dim(k));
    Rng rng = make_stream(seed, k);
    ChainState s = make_state(target, k, default_start(target, k));
    const Mat factor = tune_random_walk(target, s, pos, options.pilot_steps, options.pilot_rounds, rng);
    const Mat pilot = walked(sample_within_model(target, s, factor, pos, 5000, 1000, 2, rng).samples, pos);
    Vec mean;
    Mat cov;
    mean_cov(pilot, mean, cov);
    if (method == "quadrature") {
      const auto m = static_cast<std::size_t>(
          std::clamp(std::floor(std::pow(static_cast<double>(per_model) / 2.0, 1.0 / static_cast<double>(n))), 8.0, 401.0));
      const Vec sd = cov.diagonal().cwiseSqrt();
      const Vec lo = mean - 8.0 * sd, hi = mean + 8.0 * sd;
      const double fine = grid_log_integral(target, k, pos, lo, hi, m, g.evaluations);
      const double coarse = grid_log_integral(target, k, pos, lo, hi, std::max<std::size_t>(6, (3 * m) / 4), g.evaluations);
      log_z[ki] = fine;
      var_log_z[ki] = (fine - coarse) * (fine - coarse);
    } else {
      const StudentT q(mean, 1.5 * cov, 5.0);
      std::vector<double> logw(per_model);
      for (auto& w : logw) {
        const Vec psi = q.draw(rng);
        w = walked_log_density(target, k, pos, psi) - q.log_pdf(psi);
        ++g.evaluations;
      }
      const double lse = log_sum_exp(logw);
      const double nd = static_cast<double>(per_model);
      double s2 = 0.0;  // sum of normalized squared weights
      for (double w : logw) s2 += std::exp(2.0 * (w - lse));
      log_z[ki] = lse - std::log(nd);
      var_log_z[ki] = std::max(0.0, (nd * s2 - 1.0) / nd);
    }
  }
  g.pi = (log_z.array() - log_z.maxCoeff()).exp();
  g.pi /= g.pi.sum();
  g.se.resize(static_cast<Eigen::Index>(K));
  for (Eigen::Index a = 0; a < g.pi.size(); ++a) {
    double v = 0.0;
    for (Eigen::Index b = 0; b < g.pi.size(); ++b) {
      const double d = g.pi[a] * ((a == b ? 1.0 : 0.0) - g.pi[b]);
      v += d * d * var_log_z[b];
    }
    g.se[a] = std::sqrt(v);
  }
  return g;
}

// ---------------------------------------------------------------- pipeline

namespace {

/// Tracks written artifacts and stage timings for one output directory.
class ArtifactWriter {
 public:
  ArtifactWriter(fs::path dir, RunManifest& manifest) : dir_(std::move(dir)), m_(manifest) {}

  template <class Fn>
  void write(const std::string& rel, Fn&& body) {
    const fs::path p = dir_ / rel;
    {
      std::ofstream out(p, std::ios::binary);
      if (!out) throw std::runtime_error("cannot write " + p.string());
      out << std::setprecision(17);
      body(out);
      if (!out) throw std::runtime_error("write failed: " + p.string());
    }
    m_.artifacts.push_back({rel, file_sha256(p), fs::file_size(p)});
  }

  template <class Fn>
  void stage(const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      fn();
    } catch (const std::exception& e) {
      m_.failed_stage = name;
      write_manifest();
      throw StageError(name, e.what());
    }
    m_.stage_seconds.emplace_back(name, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }

  void write_manifest() const {
    std::ofstream out(dir_ / "manifest.json");
    out << m_.to_json().dump(2) << "\n";
  }

 private:
  fs::path dir_;
  RunManifest& m_;
};

JumpDistribution make_jump(const ExperimentConfig& c, const TransdimensionalTarget& t) {
  if (c.jump == "marginal") return JumpDistribution::from_marginals(*t.true_marginals());
  return JumpDistribution::uniform_others(t.num_models());
}

RunManifest base_manifest(const ExperimentConfig& c, bool dry_run) {
  RunManifest m;
  m.config_hash = c.hash();
  m.code_version = TRJ_VERSION;
  m.dry_run = dry_run;
  return m;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, std::size_t threads, bool dry_run) {
  ExperimentResult res;
  RunManifest& m = res.manifest;
  m = base_manifest(config, dry_run);
  config.validate();
  fs::create_directories(config.out_dir);
  ArtifactWriter out(config.out_dir, m);
  if (dry_run) {
    out.write_manifest();
    return res;
  }

  TargetPtr target;
  SampleSets sets;
  std::map<std::string, std::shared_ptr<const AcrossMove>> moves;
  out.stage("data", [&] { target = make_target(config); });
  const std::size_t K = target->num_models();
  const JumpDistribution j = make_jump(config, *target);

  out.stage("sampling", [&] {
    sets = draw_sample_sets(*target, config);
    out.write("within_model.csv", [&](std::ostream& os) {
      os << "k,label,source,n_train,acceptance_rate,min_ess,min_swap_rate\n";
      for (std::size_t k = 0; k < K; ++k) {
        os << k + 1 << ",\"" << target->model_label(k) << "\"," << sets.source[k] << "," << sets.train[k].rows() << ","
           << sets.acceptance_rate[k] << "," << sets.min_ess[k] << "," << sets.min_swap_rate[k] << "\n";
      }
    });
  });

  out.stage("fitting", [&] {
    for (const auto& kind : config.proposals) {
      std::vector<std::pair<std::string, TrainReport>> reports;
      moves[kind] = build_proposal(kind, target, sets.train, config, &reports);
      for (const auto& [tag, rep] : reports) {
        out.write("train_" + kind + "_" + tag + ".csv", [&](std::ostream& os) { rep.write_csv(os); });
      }
    }
  });

  if (config.chains > 0) {
    out.stage("chains", [&] {
      std::vector<Mat> factors(K);
      std::vector<std::vector<bool>> positive(K);
      for (std::size_t k = 0; k < K; ++k) {
        positive[k] = target->positive_mask(k);
        factors[k] = rw_factor_from_samples(sets.train[k], positive[k]);
      }
      const RandomWalkKernel within(factors, positive);
      ChainConfig cc;
      cc.steps = config.chain_steps;
      cc.across_period = config.across_period;
      for (std::size_t p = 0; p < config.proposals.size(); ++p) {
        const auto& kind = config.proposals[p];
        const AcrossMove& move = *moves.at(kind);
        std::vector<std::vector<std::size_t>> trajs(config.chains);
        parallel_for(config.chains, threads, [&](std::size_t c) {
          Rng rng = make_stream(config.seed, 20000 + 1000 * p + c);
          const std::size_t k0 = c % K;
          const ChainState init =
              make_state(*target, k0, sets.train[k0].row(static_cast<Eigen::Index>(c % sets.train[k0].rows())).transpose(),
                         move.draw_aux(*target, k0, rng));
          trajs[c] = run_chain(*target, init, move, j, within, cc, rng).trajectory;
        });
        for (std::size_t c = 0; c < config.chains; ++c) {
          const auto& tr = trajs[c];
          out.write("occupancy_" + kind + "_" + std::to_string(c + 1) + ".csv", [&](std::ostream& os) {
            os << "step";
            for (std::size_t k = 0; k < K; ++k) os << ",pi_" << k + 1;
            os << "\n";
            std::vector<std::size_t> hits(K, 0);
            for (std::size_t t = 0; t < tr.size(); ++t) {
              ++hits[tr[t]];
              if ((t + 1) % config.occupancy_stride == 0 || t + 1 == tr.size()) {
                os << t + 1;
                for (std::size_t k = 0; k < K; ++k) os << "," << static_cast<double>(hits[k]) / static_cast<double>(t + 1);
                os << "\n";
              }
            }
          });
          res.chain_occupancy[kind].push_back(occupancy(tr, K));
          Vec se(static_cast<Eigen::Index>(K));
          for (std::size_t k = 0; k < K; ++k) {
            se[static_cast<Eigen::Index>(k)] = tr.size() >= 100 ? occupancy_se(tr, k) : std::nan("");
          }
          res.chain_se[kind].push_back(se);
        }
      }
    });
  }

  if (config.replicates > 0) {
    out.stage("mbe", [&] {
      for (const auto& kind : config.proposals) {
        const AcrossMove& move = *moves.at(kind);
        std::vector<ModelProbEstimate> est(config.replicates);
        parallel_for(config.replicates, threads, [&](std::size_t r) {
          Rng rng = make_stream(config.seed, 10000 + r);
          est[r] = mbe_from_samples(*target, sets.test[r], move, j, rng);
        });
        res.mbe[kind] = std::move(est);
      }
      out.write("mbe_replicates.csv", [&](std::ostream& os) {
        os << "replicate,proposal_kind,k,pi_hat,n_train,flags\n";
        for (const auto& kind : config.proposals) {
          const auto& est = res.mbe.at(kind);
          for (std::size_t r = 0; r < est.size(); ++r) {
            for (std::size_t k = 0; k < K; ++k) {
              os << r + 1 << "," << kind << ",\"" << target->model_label(k) << "\"," << est[r].pi[static_cast<Eigen::Index>(k)]
                 << "," << config.n_train << "," << est[r].flags << "\n";
            }
          }
        }
      });
      out.write("mbe_summary.csv", [&](std::ostream& os) {
        os << "proposal_kind,k,n_valid,n_flagged,mean,variance,median\n";
        for (const auto& kind : config.proposals) {
          const auto& est = res.mbe.at(kind);
          for (std::size_t k = 0; k < K; ++k) {
            std::vector<double> v;
            for (const auto& e : est) {
              if (e.valid) v.push_back(e.pi[static_cast<Eigen::Index>(k)]);
            }
            double mean = std::nan("");
            if (!v.empty()) {
              mean = 0.0;
              for (double x : v) mean += x / static_cast<double>(v.size());
            }
            os << kind << ",\"" << target->model_label(k) << "\"," << v.size() << "," << est.size() - v.size() << ","
               << mean << "," << sample_variance(v) << "," << median(v) << "\n";
          }
        }
      });
    });
  }
  out.write_manifest();
  return res;
}

GroundTruth run_ground_truth(const ExperimentConfig& config, bool dry_run) {
  RunManifest m = base_manifest(config, dry_run);
  config.validate();
  fs::create_directories(config.out_dir);
  ArtifactWriter out(config.out_dir, m);
  GroundTruth g;
  if (dry_run) {
    out.write_manifest();
    return g;
  }
  TargetPtr target;
  out.stage("data", [&] { target = make_target(config); });
  out.stage("ground_truth", [&] {
    GroundTruthOptions opt;
    opt.method = config.gt_method;
    opt.pilot_steps = config.pilot_steps;
    opt.pilot_rounds = config.pilot_rounds;
    opt.rungs = config.rungs;
    g = ground_truth(*target, config.gt_budget, config.seed, opt);
    out.write("ground_truth.csv", [&](std::ostream& os) {
      os << "k,label,pi,se,method\n";
      for (std::size_t k = 0; k < target->num_models(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        os << k + 1 << ",\"" << target->model_label(k) << "\"," << g.pi[i] << "," << g.se[i] << "," << g.method << "\n";
      }
    });
  });
  out.write_manifest();
  return g;
}

}  // namespace trj
