#include "capstrain/schedulers.hpp"

#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <numbers>
#include <ostream>

#include "capstrain/errors.hpp"

namespace capstrain {

void LrPolicy::validate() const {
  if (!(lr_min > 0.0) || !(lr_min <= lr_max)) {
    throw RangeError(fmt::format("learning-rate bounds must satisfy 0 < lr_min <= lr_max (got {}, {})", lr_min, lr_max));
  }
  if (variant == LrVariant::ExpDecay && !(decay_steps > 0.0 && decay_rate > 0.0)) {
    throw RangeError("exponential decay needs positive decay_steps and decay_rate");
  }
  if (total_steps < 0 || cycle_length < 0) throw RangeError("step counts must be non-negative");
  if (variant == LrVariant::WarmAdaBatch && wab_batch < 1) throw RangeError("WarmAdaBatch batch must be positive");
}

double lr_fixed(const LrPolicy& policy) { return policy.lr_max; }

double lr_exp_decay(double lr0, double decay_rate, double decay_steps, double step) {
  if (step < 0.0) throw RangeError("exponential decay step must be non-negative");
  return lr0 * std::pow(decay_rate, step / decay_steps);
}

double lr_one_cycle(double lr_min, double lr_max, double total_steps, double ts) {
  if (!(total_steps > 0.0)) throw RangeError("one-cycle policy needs TS > 0");
  if (!(ts >= 0.0 && ts <= total_steps)) {
    throw RangeError(fmt::format("one-cycle step {} outside [0, {}]", ts, total_steps));
  }
  const double rise = 0.45 * total_steps;
  const double top = 0.9 * total_steps;
  if (ts <= rise) return lr_min + ts * (lr_max - lr_min) / rise;
  if (ts <= top) return lr_min + (ts - top) * (lr_min - lr_max) / rise;
  return lr_min - 9.0 * lr_min / total_steps * (ts - top);
}

WarmRestartStep lr_warm_restarts(double lr_min, double lr_max, ScheduleState state, std::int64_t cycle_length) {
  if (cycle_length <= 0) throw RangeError("warm-restart cycle length must be positive");
  if (state.t_curr < 0 || state.t_curr > cycle_length) {
    throw RangeError(fmt::format("T_curr {} outside [0, {}]", state.t_curr, cycle_length));
  }
  const double phase = static_cast<double>(state.t_curr) / static_cast<double>(cycle_length);
  const double lr = lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * phase));
  state.t_curr = state.t_curr == cycle_length ? 0 : state.t_curr + 1;
  ++state.global_step;
  return {lr, state};
}

std::int64_t batch_adabatch(int exponent, int epoch) {
  if (epoch < 1) throw RangeError("epochs are 1-based");
  if (exponent < 0 || exponent > 60) throw RangeError("AdaBatch exponent out of range");
  if (epoch <= 3) return 1;
  if (epoch <= 8) return std::int64_t{1} << exponent;
  if (epoch <= 13) return std::int64_t{1} << (exponent + 1);
  return std::int64_t{1} << (exponent + 2);
}

WarmAdaBatchStep warm_adabatch(double lr_min, double lr_max, int epoch, ScheduleState state, std::int64_t train_size,
                               std::int64_t wab_batch, int total_epochs) {
  if (epoch < 1) throw RangeError("epochs are 1-based");
  if (train_size <= 0) throw RangeError("training set must be non-empty");
  if (wab_batch < 1) throw RangeError("WarmAdaBatch batch must be positive");
  const bool first_cycle = epoch <= kWarmAdaBatchFirstEpochs;
  if (!first_cycle && state.epoch <= kWarmAdaBatchFirstEpochs) state.t_curr = 0;
  const std::int64_t batch = first_cycle ? 1 : wab_batch;
  const std::int64_t cycle =
      first_cycle ? kWarmAdaBatchFirstEpochs * train_size
                  : std::max(1, total_epochs - kWarmAdaBatchFirstEpochs) * ceil_div(train_size, wab_batch);
  WarmRestartStep step = lr_warm_restarts(lr_min, lr_max, state, cycle);
  step.state.epoch = epoch;
  return {step.lr, batch, cycle, step.state};
}

std::int64_t batch_for_epoch(const LrPolicy& lr, const BatchPolicy& batch, int epoch) {
  if (epoch < 1) throw RangeError("epochs are 1-based");
  if (lr.variant == LrVariant::WarmAdaBatch) return epoch <= kWarmAdaBatchFirstEpochs ? 1 : lr.wab_batch;
  if (batch.variant == BatchVariant::AdaBatch) return batch_adabatch(batch.exponent, epoch);
  if (batch.base_batch < 1) throw RangeError("batch size must be positive");
  return batch.base_batch;
}

Scheduler::Scheduler(LrPolicy lr, BatchPolicy batch, int epochs, std::int64_t train_size)
    : lr_(lr), batch_(batch), epochs_(epochs), train_size_(train_size), total_steps_(0) {
  lr_.validate();
  if (epochs < 1) throw RangeError("at least one epoch is required");
  if (train_size < 1) throw RangeError("training set must be non-empty");
  for (int e = 1; e <= epochs; ++e) total_steps_ += steps_in_epoch(e);
  if (lr_.variant == LrVariant::OneCycle && lr_.total_steps == 0) lr_.total_steps = total_steps_;
}

std::int64_t Scheduler::steps_in_epoch(int epoch) const {
  return ceil_div(train_size_, batch_for_epoch(lr_, batch_, epoch));
}

std::int64_t Scheduler::begin_epoch(int epoch) {
  if (epoch != epoch_ + 1 || epoch > epochs_) throw RangeError(fmt::format("epoch {} out of sequence", epoch));
  epoch_ = epoch;
  const std::int64_t batch = batch_for_epoch(lr_, batch_, epoch);
  epoch_steps_ = ceil_div(train_size_, batch);
  if (lr_.variant == LrVariant::WarmRestarts && lr_.cycle_length == 0) state_.t_curr = 0;
  return batch;
}

double Scheduler::next_lr() {
  if (epoch_ == 0) throw RangeError("next_lr() before begin_epoch()");
  const std::int64_t step = state_.global_step;
  double lr = 0.0;
  switch (lr_.variant) {
    case LrVariant::Fixed:
      lr = lr_fixed(lr_);
      break;
    case LrVariant::ExpDecay:
      lr = lr_exp_decay(lr_.lr_max, lr_.decay_rate, lr_.decay_steps, static_cast<double>(step));
      break;
    case LrVariant::OneCycle:
      lr = lr_one_cycle(lr_.lr_min, lr_.lr_max, static_cast<double>(lr_.total_steps), static_cast<double>(step));
      break;
    case LrVariant::WarmRestarts: {
      const std::int64_t cycle = lr_.cycle_length > 0 ? lr_.cycle_length : epoch_steps_;
      const WarmRestartStep r = lr_warm_restarts(lr_.lr_min, lr_.lr_max, state_, cycle);
      lr = r.lr;
      state_ = r.state;
      break;
    }
    case LrVariant::WarmAdaBatch: {
      const WarmAdaBatchStep r =
          warm_adabatch(lr_.lr_min, lr_.lr_max, epoch_, state_, train_size_, lr_.wab_batch, epochs_);
      lr = r.lr;
      state_ = r.state;
      break;
    }
  }
  state_.epoch = epoch_;
  state_.global_step = step + 1;
  return lr;
}

std::vector<TracePoint> schedule_trace(const LrPolicy& lr, const BatchPolicy& batch, int epochs,
                                       std::int64_t train_size) {
  Scheduler scheduler(lr, batch, epochs, train_size);
  std::vector<TracePoint> trace;
  trace.reserve(static_cast<std::size_t>(scheduler.total_steps()));
  for (int e = 1; e <= epochs; ++e) {
    const std::int64_t b = scheduler.begin_epoch(e);
    const std::int64_t steps = scheduler.steps_in_epoch(e);
    for (std::int64_t s = 0; s < steps; ++s) {
      const std::int64_t global = scheduler.global_step();
      trace.push_back({e, global, scheduler.next_lr(), b});
    }
  }
  return trace;
}

void write_schedule_csv(std::ostream& os, const std::vector<TracePoint>& trace) {
  os << "epoch,step,lr,batch_size\n";
  for (const TracePoint& p : trace) os << fmt::format("{},{},{},{}\n", p.epoch, p.step, p.lr, p.batch);
}

std::string_view to_string(LrVariant v) {
  switch (v) {
    case LrVariant::Fixed: return "fixed";
    case LrVariant::ExpDecay: return "expdecay";
    case LrVariant::OneCycle: return "ocp";
    case LrVariant::WarmRestarts: return "warmrestarts";
    case LrVariant::WarmAdaBatch: return "wab";
  }
  return "unknown";
}

std::string_view to_string(BatchVariant v) { return v == BatchVariant::AdaBatch ? "adabatch" : "constant"; }

}  // namespace capstrain
