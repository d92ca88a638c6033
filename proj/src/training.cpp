#include "trj/training.hpp"

#include "trj/dual.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <ostream>
#include <sstream>

namespace trj {

void TrainConfig::validate(std::size_t n_samples) const {
  if (!(validation_fraction > 0.0 && validation_fraction <= 0.5)) {
    throw std::invalid_argument("TrainConfig: validation_fraction must lie in (0, 0.5]");
  }
  const auto n_val = static_cast<std::size_t>(std::ceil(validation_fraction * static_cast<double>(n_samples)));
  if (batch_size == 0 || batch_size > n_samples - n_val) {
    throw std::invalid_argument("TrainConfig: batch_size must be in [1, training-set size]");
  }
  if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
}

void TrainReport::write_csv(std::ostream& out) const {
  out << "epoch,train_nll,val_nll\n";
  out.precision(17);
  for (std::size_t e = 0; e < val_nll.size(); ++e) out << e + 1 << ',' << train_nll[e] << ',' << val_nll[e] << '\n';
}

namespace {

using D7 = Dual<7>;

double softplus(double v) { return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v)); }
double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct LayerCache {
  Mat in;  // input_dim x m, position-ordered coordinates then context one-hot
  Mat h1, h2, raw;
  std::vector<std::array<double, 7>> dy, dld;  // (pos * m + s)
  std::vector<std::size_t> bin;
};

/// Softmax probabilities and prefix sums for one raw width/height block.
void softmax_block(const double* raw, std::size_t b, std::vector<double>& prob, std::vector<double>& prefix) {
  const double mx = *std::max_element(raw, raw + b);
  prob.resize(b);
  double total = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    prob[i] = std::exp(raw[i] - mx);
    total += prob[i];
  }
  prefix.assign(b + 1, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    prob[i] /= total;
    prefix[i + 1] = prefix[i] + prob[i];
  }
}

/// Adds dL/draw for knots m in {j, j+1} given dL/dknot.
void knot_backward(const double* raw, std::size_t b, std::size_t j, double g_lo, double g_hi, double* g_raw,
                   std::vector<double>& prob, std::vector<double>& prefix) {
  softmax_block(raw, b, prob, prefix);
  const double spread = 1.0 - kMinBinSize * static_cast<double>(b);
  const std::array<std::pair<std::size_t, double>, 2> knots{{{j, g_lo}, {j + 1, g_hi}}};
  for (const auto& [m, g] : knots) {
    if (m == 0 || m == b || g == 0.0) continue;  // end knots are fixed
    for (std::size_t q = 0; q < b; ++q) {
      g_raw[q] += g * spread * prob[q] * ((q < m ? 1.0 : 0.0) - prefix[m]);
    }
  }
}

void check_batch(const FlowParams& p, const Mat& batch, const std::vector<std::size_t>& contexts) {
  if (batch.rows() == 0) throw std::invalid_argument("loss_and_grad: empty batch");
  require_dim(static_cast<std::size_t>(batch.cols()), p.n, "loss_and_grad");
  if (p.conditional) {
    if (contexts.size() != static_cast<std::size_t>(batch.rows())) {
      throw DimensionError("loss_and_grad: one context per row required");
    }
    for (std::size_t k : contexts) {
      if (k >= p.contexts) throw std::out_of_range("loss_and_grad: context out of range");
    }
  } else if (!contexts.empty()) {
    throw std::invalid_argument("loss_and_grad: contexts given for an unconditional flow");
  }
}

}  // namespace

double loss_and_grad(const FlowParams& p, const Mat& batch, const std::vector<std::size_t>& contexts, Vec* grad) {
  check_batch(p, batch, contexts);
  const auto m = batch.rows();
  const auto n = static_cast<Eigen::Index>(p.n);
  const std::size_t B = p.bins;
  const std::size_t R = p.raw_per_coord();
  const double inv_m = 1.0 / static_cast<double>(m);
  auto ctx = [&](Eigen::Index s) -> std::size_t { return p.conditional ? contexts[static_cast<std::size_t>(s)] : 0; };

  Vec logdet = Vec::Zero(m);
  Mat x(n, m);
  for (Eigen::Index s = 0; s < m; ++s) {
    const auto k = static_cast<Eigen::Index>(ctx(s));
    for (Eigen::Index i = 0; i < n; ++i) {
      double v;
      if (p.is_aux(static_cast<std::size_t>(k), static_cast<std::size_t>(i))) {
        v = p.nu.gaussianize(batch(s, i));
        logdet[s] += p.nu.gaussianize_logderiv();
      } else {
        v = p.scale(i, k) * (batch(s, i) - p.shift(i, k));
        logdet[s] += std::log(p.scale(i, k));
      }
      const double xs = sigmoid(v);
      if (!(xs >= kSigmoidClamp && xs <= 1.0 - kSigmoidClamp)) {
        std::ostringstream msg;
        msg << "loss_and_grad: row " << s << " saturates the sigmoid at coordinate " << i;
        throw DomainError(msg.str());
      }
      logdet[s] += -softplus(-v) - softplus(v);
      x(i, s) = xs;
    }
  }

  const bool want_grad = grad != nullptr;
  std::vector<LayerCache> caches(p.layers.size());
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const MadeLayer& L = p.layers[l];
    LayerCache& c = caches[l];
    c.in = Mat::Zero(static_cast<Eigen::Index>(p.input_dim()), m);
    for (Eigen::Index s = 0; s < m; ++s) {
      for (Eigen::Index pos = 0; pos < n; ++pos) c.in(pos, s) = x(static_cast<Eigen::Index>(L.order[static_cast<std::size_t>(pos)]), s);
      if (p.conditional) c.in(n + static_cast<Eigen::Index>(ctx(s)), s) = 1.0;
    }
    c.h1 = ((L.w1 * c.in).colwise() + L.b1).array().tanh().matrix();
    c.h2 = ((L.w2 * c.h1).colwise() + L.b2).array().tanh().matrix();
    c.raw = (L.w3 * c.h2).colwise() + L.b3;
    if (want_grad) {
      c.dy.resize(static_cast<std::size_t>(n * m));
      c.dld.resize(c.dy.size());
      c.bin.resize(c.dy.size());
    }
    Mat y(n, m);
    for (Eigen::Index s = 0; s < m; ++s) {
      for (Eigen::Index pos = 0; pos < n; ++pos) {
        const double* seg = c.raw.col(s).data() + static_cast<std::size_t>(pos) * R;
        const RQSpline sp = RQSpline::from_raw(std::span<const double>(seg, B), std::span<const double>(seg + B, B),
                                               std::span<const double>(seg + 2 * B, B + 1));
        const double xin = c.in(pos, s);
        const std::size_t j = search_bin(sp.knot_x, xin);
        double yv, ld;
        if (want_grad) {
          const auto out = rq_bin_forward<D7>(D7::variable(xin, 0), D7::variable(sp.knot_x[j], 1),
                                              D7::variable(sp.knot_x[j + 1], 2), D7::variable(sp.knot_y[j], 3),
                                              D7::variable(sp.knot_y[j + 1], 4), D7::variable(sp.deriv[j], 5),
                                              D7::variable(sp.deriv[j + 1], 6));
          const auto idx = static_cast<std::size_t>(pos * m + s);
          c.dy[idx] = out.y.d;
          c.dld[idx] = out.logderiv.d;
          c.bin[idx] = j;
          yv = out.y.v;
          ld = out.logderiv.v;
        } else {
          const auto out = rq_bin_forward<double>(xin, sp.knot_x[j], sp.knot_x[j + 1], sp.knot_y[j],
                                                  sp.knot_y[j + 1], sp.deriv[j], sp.deriv[j + 1]);
          yv = out.y;
          ld = out.logderiv;
        }
        y(static_cast<Eigen::Index>(L.order[static_cast<std::size_t>(pos)]), s) = yv;
        logdet[s] += ld;
      }
    }
    x = std::move(y);
  }

  Mat z(n, m);
  for (Eigen::Index s = 0; s < m; ++s) {
    const auto k = static_cast<Eigen::Index>(ctx(s));
    for (Eigen::Index i = 0; i < n; ++i) {
      const double xv = x(i, s);
      if (!(xv > 0.0 && xv < 1.0)) throw DomainError("loss_and_grad: spline output left (0,1)");
      double zv = std::log(xv) - std::log1p(-xv);
      logdet[s] += -std::log(xv) - std::log1p(-xv);
      if (p.conditional) {
        zv = (zv - p.base_mean(i, k)) * std::exp(-p.base_log_scale(i, k));
        logdet[s] -= p.base_log_scale(i, k);
      }
      z(i, s) = zv;
    }
  }
  const double loss = (0.5 * z.colwise().squaredNorm().transpose().array() + 0.5 * static_cast<double>(n) * kLog2Pi -
                       logdet.array())
                          .mean();
  if (!want_grad) return loss;

  // Reverse pass.
  FlowParams g = p;  // same shapes and masks; values overwritten with gradients
  g.base_mean.setZero();
  g.base_log_scale.setZero();
  Mat gx(n, m);
  for (Eigen::Index s = 0; s < m; ++s) {
    const auto k = static_cast<Eigen::Index>(ctx(s));
    for (Eigen::Index i = 0; i < n; ++i) {
      double gz = z(i, s) * inv_m;
      if (p.conditional) {
        const double e = std::exp(-p.base_log_scale(i, k));
        g.base_mean(i, k) -= gz * e;
        g.base_log_scale(i, k) += -gz * z(i, s) + inv_m;
        gz *= e;
      }
      const double xv = x(i, s);
      gx(i, s) = gz / (xv * (1.0 - xv)) + inv_m * (1.0 / xv - 1.0 / (1.0 - xv));
    }
  }

  std::vector<double> prob, prefix;
  for (std::size_t l = p.layers.size(); l-- > 0;) {
    const MadeLayer& L = p.layers[l];
    const LayerCache& c = caches[l];
    MadeLayer& G = g.layers[l];
    Mat g_raw = Mat::Zero(c.raw.rows(), m);
    Mat g_xp = Mat::Zero(n, m);
    const double offset = std::log(std::expm1(1.0 - kMinDerivative));
    for (Eigen::Index s = 0; s < m; ++s) {
      for (Eigen::Index pos = 0; pos < n; ++pos) {
        const auto idx = static_cast<std::size_t>(pos * m + s);
        const double gy = gx(static_cast<Eigen::Index>(L.order[static_cast<std::size_t>(pos)]), s);
        std::array<double, 7> gl{};
        for (int q = 0; q < 7; ++q) gl[static_cast<std::size_t>(q)] = gy * c.dy[idx][static_cast<std::size_t>(q)] - inv_m * c.dld[idx][static_cast<std::size_t>(q)];
        g_xp(pos, s) += gl[0];
        const std::size_t j = c.bin[idx];
        const double* seg = c.raw.col(s).data() + static_cast<std::size_t>(pos) * R;
        double* gseg = g_raw.col(s).data() + static_cast<std::size_t>(pos) * R;
        knot_backward(seg, B, j, gl[1], gl[2], gseg, prob, prefix);
        knot_backward(seg + B, B, j, gl[3], gl[4], gseg + B, prob, prefix);
        gseg[2 * B + j] += gl[5] * sigmoid(seg[2 * B + j] + offset);
        gseg[2 * B + j + 1] += gl[6] * sigmoid(seg[2 * B + j + 1] + offset);
      }
    }
    G.w3 = (g_raw * c.h2.transpose()).cwiseProduct(L.m3);
    G.b3 = g_raw.rowwise().sum();
    const Mat g_a2 = (L.w3.transpose() * g_raw).cwiseProduct((1.0 - c.h2.array().square()).matrix());
    G.w2 = (g_a2 * c.h1.transpose()).cwiseProduct(L.m2);
    G.b2 = g_a2.rowwise().sum();
    const Mat g_a1 = (L.w2.transpose() * g_a2).cwiseProduct((1.0 - c.h1.array().square()).matrix());
    G.w1 = (g_a1 * c.in.transpose()).cwiseProduct(L.m1);
    G.b1 = g_a1.rowwise().sum();
    g_xp += (L.w1.transpose() * g_a1).topRows(n);

    Mat g_prev(n, m);
    for (Eigen::Index pos = 0; pos < n; ++pos) g_prev.row(static_cast<Eigen::Index>(L.order[static_cast<std::size_t>(pos)])) = g_xp.row(pos);
    gx = std::move(g_prev);
  }
  *grad = g.flatten();
  return loss;
}

void moment_standardization(const Mat& samples, Vec& shift, Vec& scale) {
  if (samples.rows() < 2) throw std::invalid_argument("moment_standardization: need at least two samples");
  shift = samples.colwise().mean().transpose();
  scale.resize(samples.cols());
  for (Eigen::Index i = 0; i < samples.cols(); ++i) {
    const double var = (samples.col(i).array() - shift[i]).square().sum() / static_cast<double>(samples.rows() - 1);
    if (!(var > 0.0) || !std::isfinite(var)) {
      throw std::invalid_argument("moment_standardization: coordinate " + std::to_string(i) + " has zero variance");
    }
    scale[i] = 1.0 / std::sqrt(var);
  }
}

namespace {

struct Split {
  Mat train, val;
  std::vector<std::size_t> ctx_train, ctx_val;
};

Split split_samples(const Mat& samples, const std::vector<std::size_t>& contexts, double fraction, Rng& rng) {
  const auto N = static_cast<std::size_t>(samples.rows());
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(N)));
  Split s;
  s.val.resize(static_cast<Eigen::Index>(n_val), samples.cols());
  s.train.resize(static_cast<Eigen::Index>(N - n_val), samples.cols());
  for (std::size_t r = 0; r < N; ++r) {
    const bool val = r < n_val;
    const auto row = static_cast<Eigen::Index>(val ? r : r - n_val);
    (val ? s.val : s.train).row(row) = samples.row(static_cast<Eigen::Index>(idx[r]));
    if (!contexts.empty()) (val ? s.ctx_val : s.ctx_train).push_back(contexts[idx[r]]);
  }
  return s;
}

TrainReport optimize(FlowParams& p, const Split& data, const TrainConfig& cfg, Rng& rng) {
  TrainReport report;
  Vec params = p.flatten();
  Vec best = params;
  double best_val = batch_nll(p, data.val, data.ctx_val);
  report.initial_val_nll = best_val;

  const auto n_train = static_cast<std::size_t>(data.train.rows());
  Vec m1 = Vec::Zero(params.size());
  Vec m2 = Vec::Zero(params.size());
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t step = 0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(n_train);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Vec grad;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr =
        cfg.cosine_decay
            ? cfg.learning_rate * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(epoch) / static_cast<double>(cfg.epochs)))
            : cfg.learning_rate;
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start + cfg.batch_size <= n_train; start += cfg.batch_size) {
      Mat batch(static_cast<Eigen::Index>(cfg.batch_size), data.train.cols());
      std::vector<std::size_t> ctx;
      for (std::size_t r = 0; r < cfg.batch_size; ++r) {
        batch.row(static_cast<Eigen::Index>(r)) = data.train.row(static_cast<Eigen::Index>(order[start + r]));
        if (!data.ctx_train.empty()) ctx.push_back(data.ctx_train[order[start + r]]);
      }
      const double loss = loss_and_grad(p, batch, ctx, &grad);
      if (!std::isfinite(loss) || !grad.allFinite()) {
        std::ostringstream msg;
        msg << "fit_flow: non-finite loss/gradient at epoch " << epoch + 1 << ", batch " << batches + 1
            << " (loss = " << loss << ")";
        throw std::runtime_error(msg.str());
      }
      if (cfg.grad_clip > 0.0) {
        const double norm = grad.norm();
        if (norm > cfg.grad_clip) grad *= cfg.grad_clip / norm;
      }
      ++step;
      m1 = beta1 * m1 + (1.0 - beta1) * grad;
      m2 = beta2 * m2 + (1.0 - beta2) * grad.cwiseProduct(grad);
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      params -= (lr / c1) * (m1.array() / ((m2.array() / c2).sqrt() + eps)).matrix();
      p.unflatten(params);
      epoch_loss += loss;
      ++batches;
    }
    const double val = batch_nll(p, data.val, data.ctx_val);
    if (!std::isfinite(val)) {
      throw std::runtime_error("fit_flow: non-finite validation loss at epoch " + std::to_string(epoch + 1));
    }
    report.train_nll.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(batches, 1)));
    report.val_nll.push_back(val);
    report.epochs_run = epoch + 1;
    if (val < best_val) {
      best_val = val;
      best = params;
      report.best_epoch = epoch + 1;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  p.unflatten(best);
  report.final_params = best;
  return report;
}

void require_samples(const Mat& samples) {
  if (samples.rows() < 50) throw std::invalid_argument("fit_flow: need at least 50 samples");
  if (!samples.allFinite()) throw std::invalid_argument("fit_flow: non-finite samples");
}

}  // namespace

FitResult fit_flow(const Mat& samples, const TrainConfig& config) {
  require_samples(samples);
  config.validate(static_cast<std::size_t>(samples.rows()));
  Vec shift, scale;
  moment_standardization(samples, shift, scale);
  Rng rng(config.seed);
  FlowParams p = init_flow_params(static_cast<std::size_t>(samples.cols()), 1, false, config.flow, shift, scale, {},
                                  Reference(1.0), rng);
  const Split data = split_samples(samples, {}, config.validation_fraction, rng);
  TrainReport report = optimize(p, data, config, rng);
  return {std::make_shared<SplineFlowMap>(std::move(p)), std::move(report)};
}

ConditionalFitResult fit_conditional_flow(const Mat& samples, const std::vector<std::size_t>& contexts,
                                          const std::vector<SlotLayout>& layouts, Reference nu,
                                          const TrainConfig& config) {
  require_samples(samples);
  config.validate(static_cast<std::size_t>(samples.rows()));
  const std::size_t K = layouts.size();
  const auto n = static_cast<Eigen::Index>(samples.cols());
  if (contexts.size() != static_cast<std::size_t>(samples.rows())) {
    throw DimensionError("fit_conditional_flow: one context per row required");
  }
  std::vector<std::vector<bool>> mask(K);
  Mat shift = Mat::Zero(n, static_cast<Eigen::Index>(K));
  Mat scale = Mat::Ones(n, static_cast<Eigen::Index>(K));
  for (std::size_t k = 0; k < K; ++k) {
    if (layouts[k].n_max() != static_cast<std::size_t>(n)) throw DimensionError("fit_conditional_flow: layout size");
    mask[k] = layouts[k].is_aux;
    std::vector<Eigen::Index> rows;
    for (std::size_t r = 0; r < contexts.size(); ++r) {
      if (contexts[r] == k) rows.push_back(static_cast<Eigen::Index>(r));
    }
    if (rows.size() < 2) throw std::invalid_argument("fit_conditional_flow: model " + std::to_string(k) + " has no samples");
    Mat sub(static_cast<Eigen::Index>(rows.size()), n);
    for (std::size_t r = 0; r < rows.size(); ++r) sub.row(static_cast<Eigen::Index>(r)) = samples.row(rows[r]);
    for (std::size_t slot : layouts[k].param_slots) {
      Vec sh, sc;
      moment_standardization(sub.col(static_cast<Eigen::Index>(slot)), sh, sc);
      shift(static_cast<Eigen::Index>(slot), static_cast<Eigen::Index>(k)) = sh[0];
      scale(static_cast<Eigen::Index>(slot), static_cast<Eigen::Index>(k)) = sc[0];
    }
  }
  Rng rng(config.seed);
  FlowParams p = init_flow_params(static_cast<std::size_t>(n), K, true, config.flow, shift, scale, mask, nu, rng);
  const Split data = split_samples(samples, contexts, config.validation_fraction, rng);
  TrainReport report = optimize(p, data, config, rng);
  return {std::make_shared<ConditionalFlowMap>(std::move(p)), std::move(report)};
}

}  // namespace trj
