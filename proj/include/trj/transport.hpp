#pragma once

#include "trj/core.hpp"
#include "trj/reference.hpp"

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace trj {

enum class MapKind { Identity, ExactSas, Affine, LogPositive, SplineFlow, Composition };

std::string_view to_string(MapKind kind);

struct MapResult {
  Vec value;
  double logdet = 0.0;
};

/// Diffeomorphism R^n -> R^n. `forward` is always the target -> reference
/// direction; `inverse` goes reference -> target. Both report log|det J| of the
/// direction evaluated. Implementations are immutable after construction.
class TransportMap {
 public:
  virtual ~TransportMap() = default;

  virtual MapKind kind() const = 0;
  virtual std::size_t dim() const = 0;

  MapResult forward(const Vec& theta) const;
  MapResult inverse(const Vec& z) const;

 protected:
  virtual MapResult do_forward(const Vec& theta) const = 0;
  virtual MapResult do_inverse(const Vec& z) const = 0;
};

using MapPtr = std::shared_ptr<const TransportMap>;

/// log density of the pushforward of a standard-normal base through the
/// inverse map, evaluated at theta: log phi(T(theta)) + log|J_T(theta)|.
double flow_log_density(const TransportMap& map, const Vec& theta);

class IdentityMap final : public TransportMap {
 public:
  explicit IdentityMap(std::size_t n) : n_(n) {}
  MapKind kind() const override { return MapKind::Identity; }
  std::size_t dim() const override { return n_; }

 protected:
  MapResult do_forward(const Vec& theta) const override { return {theta, 0.0}; }
  MapResult do_inverse(const Vec& z) const override { return {z, 0.0}; }

 private:
  std::size_t n_;
};

struct SasParams {
  Vec epsilon;
  Vec delta;
  Mat chol;  // lower triangular, positive diagonal
};

/// Exact sinh-arcsinh transport: forward theta -> L^{-1} S^{-1}(theta) with
/// S^{-1}(x) = sinh(delta * asinh(x) - epsilon); inverse z -> S(L z) with
/// S(v) = sinh((asinh(v) + epsilon) / delta).
class SasMap final : public TransportMap {
 public:
  explicit SasMap(SasParams params);
  MapKind kind() const override { return MapKind::ExactSas; }
  std::size_t dim() const override { return static_cast<std::size_t>(p_.epsilon.size()); }
  const SasParams& params() const { return p_; }

 protected:
  MapResult do_forward(const Vec& theta) const override;
  MapResult do_inverse(const Vec& z) const override;

 private:
  SasParams p_;
  double log_det_chol_;
};

MapPtr make_sas_map(const Vec& epsilon, const Vec& delta, const Mat& chol);

/// Affine whitening theta -> L^{-1}(theta - a).
class AffineMap final : public TransportMap {
 public:
  AffineMap(Vec center, Mat chol);
  MapKind kind() const override { return MapKind::Affine; }
  std::size_t dim() const override { return static_cast<std::size_t>(center_.size()); }
  const Vec& center() const { return center_; }
  const Mat& chol() const { return chol_; }

 protected:
  MapResult do_forward(const Vec& theta) const override;
  MapResult do_inverse(const Vec& z) const override;

 private:
  Vec center_;
  Mat chol_;
  double log_det_chol_;
};

/// Sample mean and unbiased covariance Cholesky of an N x n sample matrix.
std::shared_ptr<const AffineMap> fit_affine(const Mat& samples);

/// Lower Cholesky factor; throws std::domain_error naming the failing pivot.
Mat cholesky_lower(const Mat& a, const char* what);

/// Elementwise log on the flagged (positive) coordinates, identity elsewhere.
class LogPositiveMap final : public TransportMap {
 public:
  explicit LogPositiveMap(std::vector<bool> positive);
  MapKind kind() const override { return MapKind::LogPositive; }
  std::size_t dim() const override { return positive_.size(); }
  const std::vector<bool>& positive() const { return positive_; }

 protected:
  MapResult do_forward(const Vec& theta) const override;
  MapResult do_inverse(const Vec& z) const override;

 private:
  std::vector<bool> positive_;
};

/// Applies `stages` in order in the forward direction.
class CompositionMap final : public TransportMap {
 public:
  explicit CompositionMap(std::vector<MapPtr> stages);
  MapKind kind() const override { return MapKind::Composition; }
  std::size_t dim() const override { return stages_.front()->dim(); }
  const std::vector<MapPtr>& stages() const { return stages_; }

 protected:
  MapResult do_forward(const Vec& theta) const override;
  MapResult do_inverse(const Vec& z) const override;

 private:
  std::vector<MapPtr> stages_;
};

/// Placement of a model's parameters inside the saturated vector of length
/// n_max: `param_slots[i]` is the slot of theta_i; the remaining slots (in
/// increasing order) hold auxiliary variables.
struct SlotLayout {
  std::vector<std::size_t> param_slots;
  std::vector<std::size_t> aux_slots;
  std::vector<bool> is_aux;  // length n_max

  static SlotLayout concatenated(std::size_t n_k, std::size_t n_max);
  static SlotLayout from_slots(std::vector<std::size_t> param_slots, std::size_t n_max);

  std::size_t n_max() const { return is_aux.size(); }
  Vec embed(const Vec& theta, const Vec& aux) const;
  void split(const Vec& xi, Vec& theta, Vec& aux) const;
};

/// Family of maps on R^{n_max} indexed by model k (conditional transport).
class ConditionalMap {
 public:
  virtual ~ConditionalMap() = default;
  virtual std::size_t dim() const = 0;
  virtual std::size_t contexts() const = 0;

  MapResult forward(const Vec& xi, std::size_t k) const;
  MapResult inverse(const Vec& z, std::size_t k) const;

 protected:
  virtual MapResult do_forward(const Vec& xi, std::size_t k) const = 0;
  virtual MapResult do_inverse(const Vec& z, std::size_t k) const = 0;
};

using ConditionalMapPtr = std::shared_ptr<const ConditionalMap>;

double conditional_log_density(const ConditionalMap& map, const Vec& xi, std::size_t k);

/// Identity for every k (the standard saturated-space proposal).
class IdentityConditionalMap final : public ConditionalMap {
 public:
  IdentityConditionalMap(std::size_t n_max, std::size_t contexts) : n_(n_max), k_(contexts) {}
  std::size_t dim() const override { return n_; }
  std::size_t contexts() const override { return k_; }

 protected:
  MapResult do_forward(const Vec& xi, std::size_t) const override { return {xi, 0.0}; }
  MapResult do_inverse(const Vec& z, std::size_t) const override { return {z, 0.0}; }

 private:
  std::size_t n_;
  std::size_t k_;
};

/// Conditional map assembled from per-model maps: parameter slots go through
/// T_k, auxiliary slots through the reference Gaussianization Phi^{-1} o F_nu.
class StackedConditionalMap final : public ConditionalMap {
 public:
  StackedConditionalMap(std::vector<MapPtr> maps, std::vector<SlotLayout> layouts, Reference nu);
  std::size_t dim() const override { return layouts_.front().n_max(); }
  std::size_t contexts() const override { return maps_.size(); }

 protected:
  MapResult do_forward(const Vec& xi, std::size_t k) const override;
  MapResult do_inverse(const Vec& z, std::size_t k) const override;

 private:
  std::vector<MapPtr> maps_;
  std::vector<SlotLayout> layouts_;
  Reference nu_;
};

}  // namespace trj
