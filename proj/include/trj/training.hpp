#pragma once

#include "trj/flow.hpp"

#include <iosfwd>
#include <memory>
#include <optional>
#include <vector>

namespace trj {

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  double learning_rate = 1e-3;
  bool cosine_decay = true;
  double validation_fraction = 0.1;
  std::size_t patience = 20;
  double grad_clip = 5.0;  // global L2 norm; <= 0 disables
  std::uint64_t seed = 1;
  FlowConfig flow;

  void validate(std::size_t n_samples) const;
};

struct TrainReport {
  std::vector<double> train_nll;  // per epoch, mean over the epoch's batches
  std::vector<double> val_nll;    // per epoch, full validation set
  double initial_val_nll = 0.0;
  std::size_t best_epoch = 0;  // 0 = initialized flow
  std::size_t epochs_run = 0;
  Vec final_params;

  void write_csv(std::ostream& out) const;
};

struct FitResult {
  std::shared_ptr<const SplineFlowMap> map;
  TrainReport report;
};

struct ConditionalFitResult {
  std::shared_ptr<const ConditionalFlowMap> map;
  TrainReport report;
};

/// Mean negative log-likelihood over the rows of `batch` (N x n) and its
/// gradient with respect to FlowParams::flatten(). `contexts` gives a model
/// index per row for conditional flows (empty otherwise).
double loss_and_grad(const FlowParams& params, const Mat& batch, const std::vector<std::size_t>& contexts,
                     Vec* grad);

inline double batch_nll(const FlowParams& params, const Mat& batch, const std::vector<std::size_t>& contexts = {}) {
  return loss_and_grad(params, batch, contexts, nullptr);
}

/// Maximum-likelihood fit of a spline flow; standardization is frozen from the
/// sample moments before optimization.
FitResult fit_flow(const Mat& samples, const TrainConfig& config);

/// Conditional flow over saturated vectors (rows of `samples`, length n_max)
/// with per-row context and auxiliary masks from the slot layouts.
ConditionalFitResult fit_conditional_flow(const Mat& samples, const std::vector<std::size_t>& contexts,
                                          const std::vector<SlotLayout>& layouts, Reference nu,
                                          const TrainConfig& config);

/// Standardization from sample moments: shift = mean, scale = 1 / sd.
/// Throws if any coordinate has zero variance.
void moment_standardization(const Mat& samples, Vec& shift, Vec& scale);

}  // namespace trj
