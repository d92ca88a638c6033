#include "trj/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>

namespace trj {

namespace {

double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }

std::vector<std::size_t> hidden_degrees(std::size_t hidden, std::size_t n, bool conditional) {
  const std::size_t lo = (conditional || n == 1) ? 0 : 1;
  const std::size_t span = n - lo;  // degrees lo..n-1
  std::vector<std::size_t> deg(hidden);
  for (std::size_t h = 0; h < hidden; ++h) deg[h] = lo + (span == 0 ? 0 : h % span);
  return deg;
}

template <typename F>
void for_each_masked(const Mat& w, const Mat& m, F&& f) {
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      if (m(r, c) != 0.0) f(r, c);
    }
  }
}

Vec layer_input(const FlowParams& p, const Vec& ordered, std::size_t k) {
  if (!p.conditional) return ordered;
  Vec in = Vec::Zero(static_cast<Eigen::Index>(p.input_dim()));
  in.head(static_cast<Eigen::Index>(p.n)) = ordered;
  in[static_cast<Eigen::Index>(p.n + k)] = 1.0;
  return in;
}

RQSpline spline_at(const FlowParams& p, const Vec& raw, std::size_t pos) {
  const std::size_t b = p.bins;
  const double* base = raw.data() + pos * p.raw_per_coord();
  return RQSpline::from_raw(std::span<const double>(base, b), std::span<const double>(base + b, b),
                            std::span<const double>(base + 2 * b, b + 1));
}

/// sigmoid with the domain clamp; adds log sigmoid'(v) to logdet.
double clamped_sigmoid(double v, double& logdet, const char* where) {
  const double x = 1.0 / (1.0 + std::exp(-v));
  if (!(x >= kSigmoidClamp && x <= 1.0 - kSigmoidClamp)) {
    throw DomainError(std::string(where) + ": sigmoid saturated (input " + std::to_string(v) + ")");
  }
  logdet += -softplus(-v) - softplus(v);
  return x;
}

double checked_logit(double x, double& logdet, const char* where) {
  if (!(x > 0.0 && x < 1.0)) throw DomainError(std::string(where) + ": logit argument outside (0,1)");
  logdet += -std::log(x) - std::log1p(-x);
  return std::log(x) - std::log1p(-x);
}

}  // namespace

std::size_t FlowParams::num_trainable() const {
  std::size_t count = 0;
  for (const auto& l : layers) {
    count += static_cast<std::size_t>(l.m1.sum() + l.m2.sum() + l.m3.sum());
    count += static_cast<std::size_t>(l.b1.size() + l.b2.size() + l.b3.size());
  }
  if (conditional) count += 2 * n * contexts;
  return count;
}

Vec FlowParams::flatten() const {
  Vec flat(static_cast<Eigen::Index>(num_trainable()));
  Eigen::Index at = 0;
  auto put_masked = [&](const Mat& w, const Mat& m) { for_each_masked(w, m, [&](auto r, auto c) { flat[at++] = w(r, c); }); };
  auto put = [&](const auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) flat[at++] = v.data()[i];
  };
  for (const auto& l : layers) {
    put_masked(l.w1, l.m1);
    put(l.b1);
    put_masked(l.w2, l.m2);
    put(l.b2);
    put_masked(l.w3, l.m3);
    put(l.b3);
  }
  if (conditional) {
    put(base_mean);
    put(base_log_scale);
  }
  return flat;
}

void FlowParams::unflatten(const Vec& flat) {
  require_dim(static_cast<std::size_t>(flat.size()), num_trainable(), "FlowParams::unflatten");
  Eigen::Index at = 0;
  auto get_masked = [&](Mat& w, const Mat& m) { for_each_masked(w, m, [&](auto r, auto c) { w(r, c) = flat[at++]; }); };
  auto get = [&](auto& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = flat[at++];
  };
  for (auto& l : layers) {
    get_masked(l.w1, l.m1);
    get(l.b1);
    get_masked(l.w2, l.m2);
    get(l.b2);
    get_masked(l.w3, l.m3);
    get(l.b3);
  }
  if (conditional) {
    get(base_mean);
    get(base_log_scale);
  }
}

void build_made_masks(MadeLayer& layer, std::size_t n, std::size_t contexts, bool conditional,
                      std::size_t hidden, std::size_t raw_per_coord) {
  const std::size_t in_dim = n + (conditional ? contexts : 0);
  const auto deg = hidden_degrees(hidden, n, conditional);
  const auto H = static_cast<Eigen::Index>(hidden);
  layer.m1 = Mat::Zero(H, static_cast<Eigen::Index>(in_dim));
  layer.m2 = Mat::Zero(H, H);
  layer.m3 = Mat::Zero(static_cast<Eigen::Index>(n * raw_per_coord), H);
  for (Eigen::Index h = 0; h < H; ++h) {
    for (std::size_t j = 0; j < in_dim; ++j) {
      const std::size_t in_deg = j < n ? j + 1 : 0;  // context inputs have degree 0
      if (deg[static_cast<std::size_t>(h)] >= in_deg) layer.m1(h, static_cast<Eigen::Index>(j)) = 1.0;
    }
    for (Eigen::Index g = 0; g < H; ++g) {
      if (deg[static_cast<std::size_t>(h)] >= deg[static_cast<std::size_t>(g)]) layer.m2(h, g) = 1.0;
    }
  }
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t r = 0; r < raw_per_coord; ++r) {
      for (Eigen::Index h = 0; h < H; ++h) {
        if (deg[static_cast<std::size_t>(h)] < pos + 1) {
          layer.m3(static_cast<Eigen::Index>(pos * raw_per_coord + r), h) = 1.0;
        }
      }
    }
  }
}

FlowParams init_flow_params(std::size_t n, std::size_t contexts, bool conditional, const FlowConfig& config,
                            Mat shift, Mat scale, std::vector<std::vector<bool>> aux_mask, Reference nu,
                            Rng& rng) {
  if (n == 0 || config.layers == 0 || config.bins == 0) throw std::invalid_argument("init_flow_params: empty flow");
  if (shift.rows() != static_cast<Eigen::Index>(n) || shift.cols() != static_cast<Eigen::Index>(contexts) ||
      scale.rows() != shift.rows() || scale.cols() != shift.cols()) {
    throw DimensionError("init_flow_params: standardization must be n x contexts");
  }
  if ((scale.array() <= 0.0).any() || !scale.allFinite() || !shift.allFinite()) {
    throw std::invalid_argument("init_flow_params: standardization scale must be positive and finite");
  }
  if (conditional && aux_mask.size() != contexts) throw DimensionError("init_flow_params: aux mask per context");

  FlowParams p;
  p.n = n;
  p.contexts = contexts;
  p.conditional = conditional;
  p.bins = config.bins;
  p.shift = std::move(shift);
  p.scale = std::move(scale);
  p.aux_mask = std::move(aux_mask);
  p.nu = nu;
  p.base_mean = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(contexts));
  p.base_log_scale = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(contexts));

  const std::size_t hidden = config.hidden == 0 ? 32 * n : config.hidden;
  const std::size_t in_dim = p.input_dim();
  auto uniform_fill = [&rng](Mat& w, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = u(rng);
  };
  for (std::size_t l = 0; l < config.layers; ++l) {
    MadeLayer layer;
    layer.order.resize(n);
    std::iota(layer.order.begin(), layer.order.end(), std::size_t{0});
    if (l % 2 == 1) std::reverse(layer.order.begin(), layer.order.end());
    build_made_masks(layer, n, contexts, conditional, hidden, p.raw_per_coord());

    const auto H = static_cast<Eigen::Index>(hidden);
    layer.w1.resize(H, static_cast<Eigen::Index>(in_dim));
    layer.w2.resize(H, H);
    Mat b1(H, 1), b2(H, 1);
    uniform_fill(layer.w1, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    uniform_fill(b1, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    uniform_fill(layer.w2, 1.0 / std::sqrt(static_cast<double>(hidden)));
    uniform_fill(b2, 1.0 / std::sqrt(static_cast<double>(hidden)));
    layer.w1 = layer.w1.cwiseProduct(layer.m1);
    layer.w2 = layer.w2.cwiseProduct(layer.m2);
    layer.b1 = b1.col(0);
    layer.b2 = b2.col(0);
    layer.w3 = Mat::Zero(layer.m3.rows(), H);
    layer.b3 = Vec::Zero(layer.m3.rows());
    p.layers.push_back(std::move(layer));
  }
  return p;
}

Vec made_raw(const FlowParams& p, const MadeLayer& layer, const Vec& ordered_input, std::size_t k) {
  const Vec in = layer_input(p, ordered_input, k);
  const Vec h1 = (layer.w1 * in + layer.b1).array().tanh().matrix();
  const Vec h2 = (layer.w2 * h1 + layer.b2).array().tanh().matrix();
  return layer.w3 * h2 + layer.b3;
}

std::vector<RQSpline> layer_splines(const FlowParams& p, const MadeLayer& layer, const Vec& ordered_input,
                                    std::size_t k) {
  const Vec raw = made_raw(p, layer, ordered_input, k);
  std::vector<RQSpline> out;
  out.reserve(p.n);
  for (std::size_t pos = 0; pos < p.n; ++pos) out.push_back(spline_at(p, raw, pos));
  return out;
}

Vec layer_forward(const FlowParams& p, const MadeLayer& layer, const Vec& x, std::size_t k, double& logdet) {
  const auto n = static_cast<Eigen::Index>(p.n);
  Vec xp(n);
  for (Eigen::Index i = 0; i < n; ++i) xp[i] = x[static_cast<Eigen::Index>(layer.order[static_cast<std::size_t>(i)])];
  const Vec raw = made_raw(p, layer, xp, k);
  Vec y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const RQSpline s = spline_at(p, raw, static_cast<std::size_t>(i));
    const SplineValue v = rq_spline_eval(s, xp[i], Direction::Forward);
    y[static_cast<Eigen::Index>(layer.order[static_cast<std::size_t>(i)])] = v.y;
    logdet += v.logderiv;
  }
  return y;
}

namespace {

Vec layer_inverse(const FlowParams& p, const MadeLayer& layer, const Vec& y, std::size_t k, double& logdet) {
  const auto n = static_cast<Eigen::Index>(p.n);
  Vec xp = Vec::Constant(n, 0.5);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec raw = made_raw(p, layer, xp, k);
    const RQSpline s = spline_at(p, raw, static_cast<std::size_t>(i));
    const SplineValue v =
        rq_spline_eval(s, y[static_cast<Eigen::Index>(layer.order[static_cast<std::size_t>(i)])], Direction::Inverse);
    xp[i] = v.y;
    logdet += v.logderiv;
  }
  Vec x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[static_cast<Eigen::Index>(layer.order[static_cast<std::size_t>(i)])] = xp[i];
  return x;
}

}  // namespace

Vec flow_standardize(const FlowParams& p, const Vec& theta, std::size_t k, double& logdet) {
  const auto kk = static_cast<Eigen::Index>(k);
  Vec v(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    if (p.is_aux(k, static_cast<std::size_t>(i))) {
      v[i] = p.nu.gaussianize(theta[i]);
      logdet += p.nu.gaussianize_logderiv();
    } else {
      v[i] = p.scale(i, kk) * (theta[i] - p.shift(i, kk));
      logdet += std::log(p.scale(i, kk));
    }
  }
  return v;
}

MapResult flow_forward(const FlowParams& p, const Vec& theta, std::size_t k) {
  const auto n = static_cast<Eigen::Index>(p.n);
  const auto kk = static_cast<Eigen::Index>(k);
  double logdet = 0.0;
  const Vec v = flow_standardize(p, theta, k, logdet);
  Vec x(n);
  for (Eigen::Index i = 0; i < n; ++i) x[i] = clamped_sigmoid(v[i], logdet, "flow forward");
  for (const auto& layer : p.layers) x = layer_forward(p, layer, x, k, logdet);
  Vec z(n);
  for (Eigen::Index i = 0; i < n; ++i) z[i] = checked_logit(x[i], logdet, "flow forward");
  if (p.conditional) {
    z = ((z - p.base_mean.col(kk)).array() * (-p.base_log_scale.col(kk)).array().exp()).matrix();
    logdet -= p.base_log_scale.col(kk).sum();
  }
  return {std::move(z), logdet};
}

MapResult flow_inverse(const FlowParams& p, const Vec& z_in, std::size_t k) {
  const auto n = static_cast<Eigen::Index>(p.n);
  const auto kk = static_cast<Eigen::Index>(k);
  double logdet = 0.0;
  Vec z = z_in;
  if (p.conditional) {
    z = p.base_mean.col(kk) + (z.array() * p.base_log_scale.col(kk).array().exp()).matrix();
    logdet += p.base_log_scale.col(kk).sum();
  }
  Vec x(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-z[i]));
    if (!(s > 0.0 && s < 1.0)) throw DomainError("flow inverse: sigmoid saturated");
    logdet += -softplus(-z[i]) - softplus(z[i]);
    x[i] = s;
  }
  for (auto it = p.layers.rbegin(); it != p.layers.rend(); ++it) x = layer_inverse(p, *it, x, k, logdet);
  Vec theta(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(x[i] >= kSigmoidClamp && x[i] <= 1.0 - kSigmoidClamp)) {
      throw DomainError("flow inverse: point outside the clamped sigmoid range");
    }
    const double v = checked_logit(x[i], logdet, "flow inverse");
    if (p.is_aux(k, static_cast<std::size_t>(i))) {
      theta[i] = p.nu.degaussianize(v);
      logdet -= p.nu.gaussianize_logderiv();
    } else {
      theta[i] = p.shift(i, kk) + v / p.scale(i, kk);
      logdet -= std::log(p.scale(i, kk));
    }
  }
  return {std::move(theta), logdet};
}

SplineFlowMap::SplineFlowMap(FlowParams params) : p_(std::move(params)) {
  if (p_.conditional || p_.contexts != 1) throw std::invalid_argument("SplineFlowMap: expects unconditional params");
}

ConditionalFlowMap::ConditionalFlowMap(FlowParams params) : p_(std::move(params)) {
  if (!p_.conditional) throw std::invalid_argument("ConditionalFlowMap: expects conditional params");
}

}  // namespace trj
