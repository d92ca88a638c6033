#include "trj/transport.hpp"

#include <cmath>
#include <sstream>

namespace trj {

std::string_view to_string(MapKind kind) {
  switch (kind) {
    case MapKind::Identity: return "identity";
    case MapKind::ExactSas: return "exact-sas";
    case MapKind::Affine: return "affine";
    case MapKind::LogPositive: return "log-positive";
    case MapKind::SplineFlow: return "spline-flow";
    case MapKind::Composition: return "composition";
  }
  return "unknown";
}

MapResult TransportMap::forward(const Vec& theta) const {
  require_dim(static_cast<std::size_t>(theta.size()), dim(), "TransportMap::forward");
  require_finite(theta, "TransportMap::forward");
  return do_forward(theta);
}

MapResult TransportMap::inverse(const Vec& z) const {
  require_dim(static_cast<std::size_t>(z.size()), dim(), "TransportMap::inverse");
  require_finite(z, "TransportMap::inverse");
  return do_inverse(z);
}

double flow_log_density(const TransportMap& map, const Vec& theta) {
  try {
    const MapResult r = map.forward(theta);
    return log_std_normal(r.value) + r.logdet;
  } catch (const DomainError&) {
    return kNegInf;
  }
}

Mat cholesky_lower(const Mat& a, const char* what) {
  const Eigen::Index n = a.rows();
  if (a.cols() != n) throw DimensionError(std::string(what) + ": matrix not square");
  Mat l = Mat::Zero(n, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    double d = a(j, j) - l.row(j).head(j).squaredNorm();
    // Relative floor so rounding noise in a rank-deficient matrix still fails.
    if (!(d > 1e-12 * std::abs(a(j, j))) || !std::isfinite(d)) {
      std::ostringstream msg;
      msg << what << ": matrix not positive definite (pivot " << j << " = " << d << ")";
      throw std::domain_error(msg.str());
    }
    l(j, j) = std::sqrt(d);
    for (Eigen::Index i = j + 1; i < n; ++i) {
      l(i, j) = (a(i, j) - l.row(i).head(j).dot(l.row(j).head(j))) / l(j, j);
    }
  }
  return l;
}

namespace {

double log_det_lower(const Mat& l, const char* what) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < l.rows(); ++i) {
    if (!(l(i, i) > 0.0)) throw std::invalid_argument(std::string(what) + ": diagonal must be positive");
    s += std::log(l(i, i));
  }
  return s;
}

void require_lower(const Mat& l, Eigen::Index n, const char* what) {
  if (l.rows() != n || l.cols() != n) throw DimensionError(std::string(what) + ": factor must be n x n");
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      if (l(i, j) != 0.0) throw std::invalid_argument(std::string(what) + ": factor must be lower triangular");
    }
  }
}

}  // namespace

SasMap::SasMap(SasParams params) : p_(std::move(params)) {
  const Eigen::Index n = p_.epsilon.size();
  if (n == 0 || p_.delta.size() != n) throw DimensionError("SasMap: epsilon/delta length mismatch");
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(p_.delta[i] > 0.0)) throw std::invalid_argument("SasMap: delta must be positive");
  }
  require_lower(p_.chol, n, "SasMap");
  log_det_chol_ = log_det_lower(p_.chol, "SasMap");
}

MapResult SasMap::do_forward(const Vec& theta) const {
  const Eigen::Index n = theta.size();
  Vec v(n);
  double logdet = -log_det_chol_;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double arg = p_.delta[i] * std::asinh(theta[i]) - p_.epsilon[i];
    v[i] = std::sinh(arg);
    logdet += std::log(p_.delta[i] * std::cosh(arg)) - 0.5 * std::log1p(theta[i] * theta[i]);
  }
  Vec z = p_.chol.triangularView<Eigen::Lower>().solve(v);
  if (!z.allFinite() || !std::isfinite(logdet)) throw DomainError("SasMap::forward: overflow");
  return {std::move(z), logdet};
}

MapResult SasMap::do_inverse(const Vec& z) const {
  const Vec v = p_.chol.triangularView<Eigen::Lower>() * z;
  const Eigen::Index n = v.size();
  Vec theta(n);
  double logdet = log_det_chol_;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double arg = (std::asinh(v[i]) + p_.epsilon[i]) / p_.delta[i];
    theta[i] = std::sinh(arg);
    logdet += std::log(std::cosh(arg) / p_.delta[i]) - 0.5 * std::log1p(v[i] * v[i]);
  }
  if (!theta.allFinite() || !std::isfinite(logdet)) throw DomainError("SasMap::inverse: overflow");
  return {std::move(theta), logdet};
}

MapPtr make_sas_map(const Vec& epsilon, const Vec& delta, const Mat& chol) {
  return std::make_shared<SasMap>(SasParams{epsilon, delta, chol});
}

AffineMap::AffineMap(Vec center, Mat chol) : center_(std::move(center)), chol_(std::move(chol)) {
  if (center_.size() == 0) throw DimensionError("AffineMap: empty center");
  require_lower(chol_, center_.size(), "AffineMap");
  log_det_chol_ = log_det_lower(chol_, "AffineMap");
}

MapResult AffineMap::do_forward(const Vec& theta) const {
  return {chol_.triangularView<Eigen::Lower>().solve(theta - center_), -log_det_chol_};
}

MapResult AffineMap::do_inverse(const Vec& z) const {
  return {center_ + chol_.triangularView<Eigen::Lower>() * z, log_det_chol_};
}

std::shared_ptr<const AffineMap> fit_affine(const Mat& samples) {
  const Eigen::Index n_rows = samples.rows();
  const Eigen::Index n = samples.cols();
  if (n == 0 || n_rows < n + 1) {
    throw std::invalid_argument("fit_affine: need at least n + 1 samples");
  }
  if (!samples.allFinite()) throw std::invalid_argument("fit_affine: non-finite samples");
  const Vec mean = samples.colwise().mean().transpose();
  const Mat centered = samples.rowwise() - mean.transpose();
  const Mat cov = (centered.transpose() * centered) / static_cast<double>(n_rows - 1);
  return std::make_shared<AffineMap>(mean, cholesky_lower(cov, "fit_affine: sample covariance"));
}

LogPositiveMap::LogPositiveMap(std::vector<bool> positive) : positive_(std::move(positive)) {
  if (positive_.empty()) throw DimensionError("LogPositiveMap: empty mask");
}

MapResult LogPositiveMap::do_forward(const Vec& theta) const {
  Vec z = theta;
  double logdet = 0.0;
  for (std::size_t i = 0; i < positive_.size(); ++i) {
    if (!positive_[i]) continue;
    const auto ii = static_cast<Eigen::Index>(i);
    if (!(theta[ii] > 0.0)) throw DomainError("LogPositiveMap::forward: non-positive constrained coordinate");
    z[ii] = std::log(theta[ii]);
    logdet -= z[ii];
  }
  return {std::move(z), logdet};
}

MapResult LogPositiveMap::do_inverse(const Vec& z) const {
  Vec theta = z;
  double logdet = 0.0;
  for (std::size_t i = 0; i < positive_.size(); ++i) {
    if (!positive_[i]) continue;
    const auto ii = static_cast<Eigen::Index>(i);
    theta[ii] = std::exp(z[ii]);
    if (!(theta[ii] > 0.0) || !std::isfinite(theta[ii])) throw DomainError("LogPositiveMap::inverse: exp out of range");
    logdet += z[ii];
  }
  return {std::move(theta), logdet};
}

CompositionMap::CompositionMap(std::vector<MapPtr> stages) : stages_(std::move(stages)) {
  if (stages_.empty()) throw std::invalid_argument("CompositionMap: no stages");
  for (const auto& s : stages_) {
    if (!s || s->dim() != stages_.front()->dim()) throw DimensionError("CompositionMap: stage dimension mismatch");
  }
}

MapResult CompositionMap::do_forward(const Vec& theta) const {
  MapResult acc{theta, 0.0};
  for (const auto& s : stages_) {
    MapResult r = s->forward(acc.value);
    acc.value = std::move(r.value);
    acc.logdet += r.logdet;
  }
  return acc;
}

MapResult CompositionMap::do_inverse(const Vec& z) const {
  MapResult acc{z, 0.0};
  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
    MapResult r = (*it)->inverse(acc.value);
    acc.value = std::move(r.value);
    acc.logdet += r.logdet;
  }
  return acc;
}

SlotLayout SlotLayout::concatenated(std::size_t n_k, std::size_t n_max) {
  std::vector<std::size_t> slots(n_k);
  for (std::size_t i = 0; i < n_k; ++i) slots[i] = i;
  return from_slots(std::move(slots), n_max);
}

SlotLayout SlotLayout::from_slots(std::vector<std::size_t> param_slots, std::size_t n_max) {
  SlotLayout l;
  l.is_aux.assign(n_max, true);
  for (std::size_t s : param_slots) {
    if (s >= n_max || !l.is_aux[s]) throw std::invalid_argument("SlotLayout: invalid or repeated slot");
    l.is_aux[s] = false;
  }
  for (std::size_t s = 0; s < n_max; ++s) {
    if (l.is_aux[s]) l.aux_slots.push_back(s);
  }
  l.param_slots = std::move(param_slots);
  return l;
}

Vec SlotLayout::embed(const Vec& theta, const Vec& aux) const {
  require_dim(static_cast<std::size_t>(theta.size()), param_slots.size(), "SlotLayout::embed theta");
  require_dim(static_cast<std::size_t>(aux.size()), aux_slots.size(), "SlotLayout::embed aux");
  Vec xi(static_cast<Eigen::Index>(n_max()));
  for (std::size_t i = 0; i < param_slots.size(); ++i) xi[static_cast<Eigen::Index>(param_slots[i])] = theta[static_cast<Eigen::Index>(i)];
  for (std::size_t i = 0; i < aux_slots.size(); ++i) xi[static_cast<Eigen::Index>(aux_slots[i])] = aux[static_cast<Eigen::Index>(i)];
  return xi;
}

void SlotLayout::split(const Vec& xi, Vec& theta, Vec& aux) const {
  require_dim(static_cast<std::size_t>(xi.size()), n_max(), "SlotLayout::split");
  theta.resize(static_cast<Eigen::Index>(param_slots.size()));
  aux.resize(static_cast<Eigen::Index>(aux_slots.size()));
  for (std::size_t i = 0; i < param_slots.size(); ++i) theta[static_cast<Eigen::Index>(i)] = xi[static_cast<Eigen::Index>(param_slots[i])];
  for (std::size_t i = 0; i < aux_slots.size(); ++i) aux[static_cast<Eigen::Index>(i)] = xi[static_cast<Eigen::Index>(aux_slots[i])];
}

MapResult ConditionalMap::forward(const Vec& xi, std::size_t k) const {
  require_dim(static_cast<std::size_t>(xi.size()), dim(), "ConditionalMap::forward");
  if (k >= contexts()) throw std::out_of_range("ConditionalMap::forward: unknown context");
  require_finite(xi, "ConditionalMap::forward");
  return do_forward(xi, k);
}

MapResult ConditionalMap::inverse(const Vec& z, std::size_t k) const {
  require_dim(static_cast<std::size_t>(z.size()), dim(), "ConditionalMap::inverse");
  if (k >= contexts()) throw std::out_of_range("ConditionalMap::inverse: unknown context");
  require_finite(z, "ConditionalMap::inverse");
  return do_inverse(z, k);
}

double conditional_log_density(const ConditionalMap& map, const Vec& xi, std::size_t k) {
  try {
    const MapResult r = map.forward(xi, k);
    return log_std_normal(r.value) + r.logdet;
  } catch (const DomainError&) {
    return kNegInf;
  }
}

StackedConditionalMap::StackedConditionalMap(std::vector<MapPtr> maps, std::vector<SlotLayout> layouts,
                                             Reference nu)
    : maps_(std::move(maps)), layouts_(std::move(layouts)), nu_(nu) {
  if (maps_.empty() || maps_.size() != layouts_.size()) {
    throw std::invalid_argument("StackedConditionalMap: one map and layout per model required");
  }
  for (std::size_t k = 0; k < maps_.size(); ++k) {
    if (layouts_[k].n_max() != layouts_.front().n_max() || maps_[k]->dim() != layouts_[k].param_slots.size()) {
      throw DimensionError("StackedConditionalMap: layout/map dimension mismatch");
    }
  }
}

MapResult StackedConditionalMap::do_forward(const Vec& xi, std::size_t k) const {
  const SlotLayout& lay = layouts_[k];
  Vec theta, aux;
  lay.split(xi, theta, aux);
  MapResult r = maps_[k]->forward(theta);
  Vec za(aux.size());
  for (Eigen::Index i = 0; i < aux.size(); ++i) za[i] = nu_.gaussianize(aux[i]);
  const double logdet = r.logdet + static_cast<double>(aux.size()) * nu_.gaussianize_logderiv();
  return {lay.embed(r.value, za), logdet};
}

MapResult StackedConditionalMap::do_inverse(const Vec& z, std::size_t k) const {
  const SlotLayout& lay = layouts_[k];
  Vec zt, za;
  lay.split(z, zt, za);
  MapResult r = maps_[k]->inverse(zt);
  Vec aux(za.size());
  for (Eigen::Index i = 0; i < za.size(); ++i) aux[i] = nu_.degaussianize(za[i]);
  const double logdet = r.logdet - static_cast<double>(za.size()) * nu_.gaussianize_logderiv();
  return {lay.embed(r.value, aux), logdet};
}

}  // namespace trj
