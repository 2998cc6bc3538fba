#include "capstrain/training.hpp"

#include <algorithm>
#include <chrono>
#include <fmt/format.h>
#include <ostream>

#include "capstrain/checkpoint.hpp"
#include "capstrain/errors.hpp"
#include "capstrain/random.hpp"

namespace capstrain {
namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ull;
constexpr std::uint64_t kShuffleStream = 0x53485546ull;

std::vector<Tensor<float>*> weight_list(CapsNetModel<float>& model) {
  std::vector<Tensor<float>*> out;
  for (auto& p : model.parameters()) out.push_back(p.tensor);
  return out;
}

}  // namespace

void RunConfig::validate() const {
  if (epochs < 1) throw RangeError("epochs must be at least 1");
  if (runs < 1) throw RangeError("runs must be at least 1");
  if (eval_chunk < 1) throw RangeError("evaluation chunk must be at least 1");
  model.validate();
  lr.validate();
}

double RunMetrics::seconds_per_epoch() const {
  if (epochs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& e : epochs) total += e.elapsed_s;
  return total / static_cast<double>(epochs.size());
}

void RunMetrics::summarize() {
  max_accuracy = 0.0;
  epoch_of_max = 0;
  for (const auto& e : epochs) {
    if (epoch_of_max == 0 || e.test_accuracy > max_accuracy) {
      max_accuracy = e.test_accuracy;
      epoch_of_max = e.epoch;
    }
  }
}

double evaluate(const std::function<std::vector<Index>(const Tensor<float>&)>& predictor, const DatasetSplit& split,
                Index chunk) {
  if (chunk < 1) throw RangeError("evaluation chunk must be at least 1");
  if (split.size() == 0) return 0.0;
  Index correct = 0;
  for (const auto& batch : shuffled_batches(split.size(), chunk, 0, 0, false)) {
    const auto predicted = predictor(gather_images<float>(split, batch));
    if (predicted.size() != batch.size()) throw DimensionError("predictor returned the wrong number of classes");
    for (std::size_t k = 0; k < batch.size(); ++k) {
      correct += predicted[k] == split.labels[static_cast<std::size_t>(batch[k])];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

double evaluate(CapsNetModel<float>& model, const DatasetSplit& split, Index chunk) {
  return evaluate(
      [&model](const Tensor<float>& images) {
        Tape<float> tape;
        const auto m = bind(tape, model, false);
        return predict(forward_encoder(m, tape.constant(images)).value());
      },
      split, chunk);
}

RunMetrics train(const RunConfig& config, const DatasetSplit& train_split, const DatasetSplit& test_split,
                 int run_index, const EpochCallback& on_epoch) {
  config.validate();
  const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(run_index);
  auto model = CapsNetModel<float>::initialized(config.model, derive_seed(seed, kInitStream));
  return train_model(model, config, train_split, test_split, run_index, on_epoch);
}

RunMetrics train_model(CapsNetModel<float>& model, const RunConfig& config, const DatasetSplit& train_split,
                       const DatasetSplit& test_split, int run_index, const EpochCallback& on_epoch) {
  config.validate();
  if (train_split.size() == 0) throw RangeError("training split is empty");
  if (!(model.config() == config.model)) throw DimensionError("model does not match the run configuration");
  using Clock = std::chrono::steady_clock;
  const std::uint64_t seed = config.seed + static_cast<std::uint64_t>(run_index);
  const std::uint64_t shuffle_seed = derive_seed(seed, kShuffleStream);

  RunMetrics metrics;
  metrics.label = config.label;
  metrics.run_id = run_index;
  metrics.weight_sharing = config.model.weight_sharing;
  metrics.reduced_decoder = config.model.reduced_decoder;
  metrics.parameters = model.parameter_count();

  Scheduler scheduler(config.lr, config.batch, config.epochs, train_split.size());
  metrics.steps.reserve(static_cast<std::size_t>(scheduler.total_steps()));
  AdamState<float> adam;
  const std::vector<Tensor<float>*> weights = weight_list(model);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto start = Clock::now();
    const Index batch_size = static_cast<Index>(scheduler.begin_epoch(epoch));
    EpochRecord record;
    record.epoch = epoch;
    record.batch_size = batch_size;
    double loss_sum = 0.0;
    for (const auto& batch : shuffled_batches(train_split.size(), batch_size, shuffle_seed, epoch)) {
      const std::int64_t step = scheduler.global_step();
      const double lr = scheduler.next_lr();
      const auto labels = gather_labels(train_split, batch);
      Tape<float> tape;
      const auto m = bind(tape, model, true);
      const auto pass = forward_loss(m, tape.constant(gather_images<float>(train_split, batch)), labels, config.loss,
                                     config.mask_by_max_always);
      const double loss = pass.loss.value().item();
      metrics.steps.push_back({epoch, step, lr, static_cast<Index>(batch.size()), loss});
      if (!std::isfinite(loss)) {
        metrics.divergence = fmt::format("non-finite loss {} at epoch {}, step {} (lr {})", loss, epoch, step, lr);
        metrics.summarize();
        return metrics;
      }
      tape.backward(pass.loss);
      adam_step<float>(weights, adam, lr, config.adam);
      loss_sum += loss * static_cast<double>(batch.size());
      record.lr_end = lr;
      ++record.steps;
    }
    record.train_loss = loss_sum / static_cast<double>(train_split.size());
    record.test_accuracy = evaluate(model, test_split, config.eval_chunk);
    record.elapsed_s = std::chrono::duration<double>(Clock::now() - start).count();
    const bool best = metrics.epochs.empty() || record.test_accuracy > metrics.max_accuracy;
    metrics.epochs.push_back(record);
    metrics.summarize();
    if (best && config.checkpoint_path) save_checkpoint(*config.checkpoint_path, model);
    if (on_epoch) on_epoch(metrics, record);
  }
  return metrics;
}

std::optional<int> epochs_to_reach(const RunMetrics& metrics, double threshold) {
  for (const auto& e : metrics.epochs) {
    if (e.test_accuracy >= threshold) return e.epoch;
  }
  return std::nullopt;
}

AveragedMetrics average_runs(const std::vector<RunMetrics>& runs) {
  if (runs.empty()) throw RangeError("no runs to average");
  const std::size_t n_epochs = runs.front().epochs.size();
  for (const auto& r : runs) {
    if (r.epochs.size() != n_epochs) {
      throw DimensionError(fmt::format("runs have {} and {} epochs", n_epochs, r.epochs.size()));
    }
  }
  AveragedMetrics out;
  out.runs = static_cast<int>(runs.size());
  out.mean.label = runs.front().label;
  out.mean.weight_sharing = runs.front().weight_sharing;
  out.mean.reduced_decoder = runs.front().reduced_decoder;
  out.mean.parameters = runs.front().parameters;
  const double count = static_cast<double>(runs.size());
  for (std::size_t e = 0; e < n_epochs; ++e) {
    EpochRecord mean = runs.front().epochs[e];
    mean.test_accuracy = mean.train_loss = mean.lr_end = mean.elapsed_s = 0.0;
    for (const auto& r : runs) {
      mean.test_accuracy += r.epochs[e].test_accuracy / count;
      mean.train_loss += r.epochs[e].train_loss / count;
      mean.lr_end += r.epochs[e].lr_end / count;
      mean.elapsed_s += r.epochs[e].elapsed_s / count;
    }
    double acc_ss = 0.0, loss_ss = 0.0;
    for (const auto& r : runs) {
      acc_ss += std::pow(r.epochs[e].test_accuracy - mean.test_accuracy, 2);
      loss_ss += std::pow(r.epochs[e].train_loss - mean.train_loss, 2);
    }
    const double dof = std::max(1.0, count - 1.0);
    out.accuracy_stddev.push_back(runs.size() > 1 ? std::sqrt(acc_ss / dof) : 0.0);
    out.loss_stddev.push_back(runs.size() > 1 ? std::sqrt(loss_ss / dof) : 0.0);
    out.mean.epochs.push_back(mean);
  }
  out.mean.summarize();
  return out;
}

void write_metrics_csv(std::ostream& os, const std::vector<RunMetrics>& runs) {
  os << "run_id,policy,weight_sharing,reduced_decoder,epoch,step_count,lr_end,batch_size,train_loss,test_accuracy,"
        "elapsed_s\n";
  for (const auto& r : runs) {
    for (const auto& e : r.epochs) {
      os << fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", r.run_id, r.label, r.weight_sharing ? 1 : 0,
                        r.reduced_decoder ? 1 : 0, e.epoch, e.steps, e.lr_end, e.batch_size, e.train_loss,
                        e.test_accuracy, e.elapsed_s);
    }
  }
}

}  // namespace capstrain
