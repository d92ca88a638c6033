#pragma once

#include "trj/core.hpp"
#include "trj/reference.hpp"
#include "trj/rq_spline.hpp"
#include "trj/transport.hpp"

#include <vector>

namespace trj {

struct FlowConfig {
  std::size_t layers = 3;
  std::size_t bins = 10;
  /// Width of each of the two hidden layers; 0 means 32 * n.
  std::size_t hidden = 0;
};

/// Sigmoid outputs are clamped to [kSigmoidClamp, 1 - kSigmoidClamp]; inputs
/// that hit the clamp are outside the flow's numerical domain.
inline constexpr double kSigmoidClamp = 1e-7;

/// One masked autoregressive spline transform. `order[i]` is the coordinate
/// processed at position i; the conditioner for position i only sees
/// positions < i (plus the context one-hot, if any).
struct MadeLayer {
  std::vector<std::size_t> order;
  Mat w1, w2, w3;
  Vec b1, b2, b3;
  Mat m1, m2, m3;
};

/// Parameters of T = logit o F o sigmoid o s (optionally followed by a
/// per-context affine that folds a diagonal Gaussian base into the map).
struct FlowParams {
  std::size_t n = 0;
  std::size_t contexts = 1;
  bool conditional = false;
  std::size_t bins = 10;
  std::vector<MadeLayer> layers;
  Mat shift;  // n x contexts, a
  Mat scale;  // n x contexts, b > 0
  /// aux_mask[k][i] = coordinate i is auxiliary under context k (conditional only).
  std::vector<std::vector<bool>> aux_mask;
  Reference nu{1.0};
  Mat base_mean;       // n x contexts
  Mat base_log_scale;  // n x contexts

  std::size_t input_dim() const { return n + (conditional ? contexts : 0); }
  std::size_t raw_per_coord() const { return 3 * bins + 1; }
  std::size_t hidden() const { return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().w1.rows()); }
  bool is_aux(std::size_t k, std::size_t i) const { return conditional && aux_mask[k][i]; }

  /// Trainable parameters in a fixed order; masked-out weights are excluded.
  std::size_t num_trainable() const;
  Vec flatten() const;
  void unflatten(const Vec& flat);
};

/// Builds MADE masks for a layer with the given order/hidden width.
void build_made_masks(MadeLayer& layer, std::size_t n, std::size_t contexts, bool conditional,
                      std::size_t hidden, std::size_t raw_per_coord);

/// Random conditioner weights, zero output layer (so every spline starts at
/// the identity and the flow equals its standardization).
FlowParams init_flow_params(std::size_t n, std::size_t contexts, bool conditional, const FlowConfig& config,
                            Mat shift, Mat scale, std::vector<std::vector<bool>> aux_mask, Reference nu,
                            Rng& rng);

/// Spline parameters of every coordinate (in position order) of one layer.
std::vector<RQSpline> layer_splines(const FlowParams& p, const MadeLayer& layer, const Vec& ordered_input,
                                    std::size_t k);

/// Raw conditioner outputs (n * (3B+1)) for a position-ordered input.
Vec made_raw(const FlowParams& p, const MadeLayer& layer, const Vec& ordered_input, std::size_t k);

/// Fixed pre-transform s(.|k): b_k * (theta - a_k) on parameter coordinates,
/// Phi^{-1} o F_nu on auxiliary ones. Adds its log-Jacobian to `logdet`.
Vec flow_standardize(const FlowParams& p, const Vec& theta, std::size_t k, double& logdet);

MapResult flow_forward(const FlowParams& p, const Vec& theta, std::size_t k);
MapResult flow_inverse(const FlowParams& p, const Vec& z, std::size_t k);

/// Layer-by-layer output of the spline stack F for a point already inside
/// (0,1)^n; used by tests of the autoregressive structure.
Vec layer_forward(const FlowParams& p, const MadeLayer& layer, const Vec& x, std::size_t k, double& logdet);

class SplineFlowMap final : public TransportMap {
 public:
  explicit SplineFlowMap(FlowParams params);
  MapKind kind() const override { return MapKind::SplineFlow; }
  std::size_t dim() const override { return p_.n; }
  const FlowParams& params() const { return p_; }

 protected:
  MapResult do_forward(const Vec& theta) const override { return flow_forward(p_, theta, 0); }
  MapResult do_inverse(const Vec& z) const override { return flow_inverse(p_, z, 0); }

 private:
  FlowParams p_;
};

class ConditionalFlowMap final : public ConditionalMap {
 public:
  explicit ConditionalFlowMap(FlowParams params);
  std::size_t dim() const override { return p_.n; }
  std::size_t contexts() const override { return p_.contexts; }
  const FlowParams& params() const { return p_; }

 protected:
  MapResult do_forward(const Vec& xi, std::size_t k) const override { return flow_forward(p_, xi, k); }
  MapResult do_inverse(const Vec& z, std::size_t k) const override { return flow_inverse(p_, z, k); }

 private:
  FlowParams p_;
};

}  // namespace trj
