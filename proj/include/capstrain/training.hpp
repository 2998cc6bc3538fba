#ifndef CAPSTRAIN_TRAINING_HPP
#define CAPSTRAIN_TRAINING_HPP

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capstrain/capsnet.hpp"
#include "capstrain/dataset.hpp"
#include "capstrain/schedulers.hpp"

namespace capstrain {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
struct AdamState {
  std::vector<Tensor<Scalar>> m, v;
  std::int64_t step = 0;
};

/// One bias-corrected Adam update using each weight's grad(); the scheduled
/// lr is the step size. Weights without a gradient are left unchanged.
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>* const> weights, AdamState<Scalar>& state, double lr,
               const AdamConfig& cfg = {}) {
  if (state.m.empty()) {
    for (const Tensor<Scalar>* w : weights) {
      state.m.emplace_back(w->shape());
      state.v.emplace_back(w->shape());
    }
  }
  if (state.m.size() != weights.size()) throw DimensionError("Adam state does not match the weight list");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar step_size = static_cast<Scalar>(lr / c1);
  const Scalar root_c2 = static_cast<Scalar>(std::sqrt(c2));
  const Scalar eps = static_cast<Scalar>(cfg.epsilon);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    Tensor<Scalar>& w = *weights[k];
    if (!w.has_grad()) continue;
    const auto& g = w.grad();
    if (g.size() != w.size() || state.m[k].size() != w.size()) throw DimensionError("gradient shape mismatch");
    auto m = state.m[k].data().array();
    auto v = state.v[k].data().array();
    m = b1 * m + (Scalar(1) - b1) * g.array();
    v = b2 * v + (Scalar(1) - b2) * g.array().square();
    // w -= lr * m_hat / (sqrt(v_hat) + eps), with the corrections folded in
    w.data().array() -= step_size * m / (v.sqrt() / root_c2 + eps);
  }
}

struct RunConfig {
  std::string label = "fixed";
  CapsNetConfig model = CapsNetConfig::desk();
  LrPolicy lr{};
  BatchPolicy batch{};
  int epochs = 30;
  std::uint64_t seed = 1;
  int runs = 5;
  DatasetKind dataset = DatasetKind::Mnist;
  LossConfig loss{};
  AdamConfig adam{};
  bool mask_by_max_always = false;
  Index eval_chunk = 100;
  /// Written at every new best test accuracy when set.
  std::optional<std::filesystem::path> checkpoint_path;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double test_accuracy = 0.0;
  double train_loss = 0.0;  // sample-weighted mean of the batch losses
  Index batch_size = 0;
  double lr_end = 0.0;
  std::int64_t steps = 0;
  double elapsed_s = 0.0;
};

struct StepRecord {
  int epoch = 0;
  std::int64_t step = 0;  // global, 0-based
  double lr = 0.0;
  Index batch_size = 0;
  double loss = 0.0;
};

struct RunMetrics {
  std::string label;
  int run_id = 0;
  bool weight_sharing = false;
  bool reduced_decoder = false;
  std::vector<EpochRecord> epochs;
  std::vector<StepRecord> steps;
  double max_accuracy = 0.0;
  int epoch_of_max = 0;
  std::optional<int> epochs_to_baseline;
  std::int64_t parameters = 0;
  std::optional<std::string> divergence;

  bool diverged() const { return divergence.has_value(); }
  /// Mean wall-clock seconds per completed epoch.
  double seconds_per_epoch() const;
  /// Recomputes max_accuracy / epoch_of_max from the epoch records.
  void summarize();
};

using EpochCallback = std::function<void(const RunMetrics&, const EpochRecord&)>;

/// One training run with seed config.seed + run_index. A non-finite loss stops
/// the run and is recorded in RunMetrics::divergence.
RunMetrics train(const RunConfig& config, const DatasetSplit& train_split, const DatasetSplit& test_split,
                 int run_index = 0, const EpochCallback& on_epoch = {});

/// Same, starting from the given model (mutated in place).
RunMetrics train_model(CapsNetModel<float>& model, const RunConfig& config, const DatasetSplit& train_split,
                       const DatasetSplit& test_split, int run_index = 0, const EpochCallback& on_epoch = {});

/// Fraction of samples whose predicted class equals the label, in split order.
double evaluate(CapsNetModel<float>& model, const DatasetSplit& split, Index chunk = 100);
double evaluate(const std::function<std::vector<Index>(const Tensor<float>&)>& predictor, const DatasetSplit& split,
                Index chunk = 100);

/// First epoch (1-based) whose accuracy is at least threshold.
std::optional<int> epochs_to_reach(const RunMetrics& metrics, double threshold);

struct AveragedMetrics {
  RunMetrics mean;                      // per-epoch means, summary recomputed from them
  std::vector<double> accuracy_stddev;  // sample standard deviation per epoch
  std::vector<double> loss_stddev;
  int runs = 0;
};

/// Element-wise mean and sample standard deviation over runs of equal length.
AveragedMetrics average_runs(const std::vector<RunMetrics>& runs);

/// run_id,policy,weight_sharing,reduced_decoder,epoch,step_count,lr_end,batch_size,train_loss,test_accuracy,elapsed_s
void write_metrics_csv(std::ostream& os, const std::vector<RunMetrics>& runs);

}  // namespace capstrain

#endif  // CAPSTRAIN_TRAINING_HPP
