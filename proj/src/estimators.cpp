#include "trj/estimators.hpp"

#include <boost/math/distributions/fisher_f.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace trj {

AlphaLedger::AlphaLedger(std::size_t num_models) : k_(num_models), cells_(num_models * num_models) {
  if (num_models == 0) throw std::invalid_argument("AlphaLedger: no models");
}

AlphaLedger AlphaLedger::from_records(const std::vector<ProposalRecord>& records, std::size_t num_models) {
  AlphaLedger l(num_models);
  for (const auto& r : records) {
    if (r.type == MoveType::Across) l.add(r.from, r.to, r.alpha);
  }
  return l;
}

const std::vector<double>& AlphaLedger::cell(std::size_t from, std::size_t to) const {
  if (from >= k_ || to >= k_) throw std::out_of_range("AlphaLedger: model index");
  return cells_[from * k_ + to];
}

void AlphaLedger::add(std::size_t from, std::size_t to, double alpha) {
  if (from == to) throw std::invalid_argument("AlphaLedger: same-model proposal");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw std::invalid_argument("AlphaLedger: alpha outside [0,1]");
  cell(from, to);
  cells_[from * k_ + to].push_back(alpha);
}

double AlphaLedger::mean(std::size_t from, std::size_t to) const {
  const auto& c = cell(from, to);
  if (c.empty()) return std::nan("");
  return std::accumulate(c.begin(), c.end(), 0.0) / static_cast<double>(c.size());
}

RatioEstimate bartolucci_bf(const AlphaLedger& ledger, std::size_t k, std::size_t k2) {
  RatioEstimate r;
  if (ledger.count(k, k2) == 0 || ledger.count(k2, k) == 0) {
    r.value = std::nan("");
    r.flag = "missing-pair " + std::to_string(k + 1) + "," + std::to_string(k2 + 1);
    return r;
  }
  const double fwd = ledger.mean(k, k2);
  const double rev = ledger.mean(k2, k);
  if (fwd == 0.0 || rev == 0.0) {
    r.value = fwd == 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
    r.flag = "zero-acceptance " + std::to_string(k + 1) + "," + std::to_string(k2 + 1);
    return r;
  }
  r.value = rev / fwd;
  r.valid = true;
  return r;
}

Mat evidence_ratios(const AlphaLedger& ledger, const JumpDistribution& j, std::vector<std::string>* flags) {
  const auto K = static_cast<Eigen::Index>(ledger.num_models());
  if (j.size() != ledger.num_models()) throw DimensionError("evidence_ratios: jump distribution size");
  Mat bf = Mat::Constant(K, K, std::nan(""));
  for (Eigen::Index a = 0; a < K; ++a) {
    bf(a, a) = 1.0;
    for (Eigen::Index b = 0; b < K; ++b) {
      if (a == b) continue;
      const auto ua = static_cast<std::size_t>(a), ub = static_cast<std::size_t>(b);
      const RatioEstimate r = bartolucci_bf(ledger, ua, ub);
      if (r.valid) {
        bf(a, b) = r.value * j.prob(ub, ua) / j.prob(ua, ub);
      } else if (flags && a < b) {
        flags->push_back(r.flag);
      }
    }
  }
  return bf;
}

ModelProbEstimate model_probs(const Mat& bf, std::size_t pivot) {
  const Eigen::Index K = bf.rows();
  if (bf.cols() != K || K == 0) throw DimensionError("model_probs: ratio matrix must be square");
  const auto p = static_cast<Eigen::Index>(pivot);
  if (p >= K) throw std::out_of_range("model_probs: pivot");
  auto need = [&](Eigen::Index a, Eigen::Index b) {
    const double v = a == b ? 1.0 : bf(a, b);
    if (!std::isfinite(v) || !(v > 0.0)) {
      throw std::invalid_argument("model_probs: ratio (" + std::to_string(a + 1) + "," + std::to_string(b + 1) +
                                  ") missing or non-positive");
    }
    return v;
  };
  double denom = 1.0;
  for (Eigen::Index i = 0; i < K; ++i) {
    if (i != p) denom += need(i, p);
  }
  ModelProbEstimate e;
  e.pi.resize(K);
  for (Eigen::Index k = 0; k < K; ++k) e.pi[k] = 1.0 / (need(p, k) * denom);
  e.valid = true;
  return e;
}

ModelProbEstimate mbe_from_samples(const TransdimensionalTarget& target, const std::vector<Mat>& samples,
                                   const AcrossMove& move, const JumpDistribution& j, Rng& rng, std::size_t pivot,
                                   AlphaLedger* ledger_out) {
  const std::size_t K = target.num_models();
  require_dim(samples.size(), K, "mbe_from_samples: sample sets");
  AlphaLedger ledger(K);
  for (std::size_t k = 0; k < K; ++k) {
    if (samples[k].rows() == 0) throw std::invalid_argument("mbe_from_samples: model " + std::to_string(k + 1) + " has no samples");
    require_dim(static_cast<std::size_t>(samples[k].cols()), target.dim(k), "mbe_from_samples: sample width");
    for (Eigen::Index r = 0; r < samples[k].rows(); ++r) {
      const std::size_t to = j.draw(k, rng);
      if (to == k) continue;
      const ChainState s = make_state(target, k, samples[k].row(r).transpose(), move.draw_aux(target, k, rng));
      ledger.add(k, to, move.propose(target, s, to, j, rng).record.alpha);
    }
  }
  std::vector<std::string> flags;
  const Mat bf = evidence_ratios(ledger, j, &flags);
  ModelProbEstimate e;
  try {
    e = model_probs(bf, pivot);
  } catch (const std::invalid_argument&) {
    e.pi = Vec::Constant(static_cast<Eigen::Index>(K), std::nan(""));
    e.valid = false;
  }
  for (const auto& f : flags) e.flags += (e.flags.empty() ? "" : ";") + f;
  e.provenance = "sample-based:" + move.kind();
  if (ledger_out) *ledger_out = std::move(ledger);
  return e;
}

std::vector<double> running_occupancy(const std::vector<std::size_t>& trajectory, std::size_t k) {
  std::vector<double> out(trajectory.size());
  std::size_t hits = 0;
  for (std::size_t t = 0; t < trajectory.size(); ++t) {
    hits += trajectory[t] == k ? 1 : 0;
    out[t] = static_cast<double>(hits) / static_cast<double>(t + 1);
  }
  return out;
}

Vec occupancy(const std::vector<std::size_t>& trajectory, std::size_t num_models) {
  Vec v = Vec::Zero(static_cast<Eigen::Index>(num_models));
  for (auto k : trajectory) v[static_cast<Eigen::Index>(k)] += 1.0;
  if (!trajectory.empty()) v /= static_cast<double>(trajectory.size());
  return v;
}

double occupancy_se(const std::vector<std::size_t>& trajectory, std::size_t k, std::size_t batches) {
  if (batches < 2 || trajectory.size() < batches) throw std::invalid_argument("occupancy_se: too few states");
  const std::size_t len = trajectory.size() / batches;
  std::vector<double> means(batches);
  for (std::size_t b = 0; b < batches; ++b) {
    std::size_t hits = 0;
    for (std::size_t t = b * len; t < (b + 1) * len; ++t) hits += trajectory[t] == k ? 1 : 0;
    means[b] = static_cast<double>(hits) / static_cast<double>(len);
  }
  return std::sqrt(sample_variance(means) / static_cast<double>(batches));
}

double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) return std::nan("");
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

double median(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

VarianceTest variance_greater_test(const std::vector<double>& a, const std::vector<double>& b, double level) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("variance_greater_test: need two values per group");
  VarianceTest t;
  t.var_a = sample_variance(a);
  t.var_b = sample_variance(b);
  if (t.var_b <= 0.0) {
    t.p_value = 1.0;
  } else if (t.var_a == 0.0) {
    t.p_value = 0.0;
  } else {
    const boost::math::fisher_f dist(static_cast<double>(b.size() - 1), static_cast<double>(a.size() - 1));
    t.p_value = boost::math::cdf(boost::math::complement(dist, t.var_b / t.var_a));
  }
  t.reject_equal = t.p_value < level;
  return t;
}

}  // namespace trj
