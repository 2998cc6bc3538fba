#ifndef CAPSTRAIN_SCHEDULERS_HPP
#define CAPSTRAIN_SCHEDULERS_HPP

#include <cstdint>
#include <iosfwd>
#include <string_view>
#include <vector>

namespace capstrain {

enum class LrVariant { Fixed, ExpDecay, OneCycle, WarmRestarts, WarmAdaBatch };
enum class BatchVariant { Constant, AdaBatch };

/// Learning-rate schedule configuration. Rates are per optimizer step.
struct LrPolicy {
  LrVariant variant = LrVariant::Fixed;
  double lr_min = 1e-4;
  double lr_max = 1e-3;
  double decay_rate = 0.96;
  double decay_steps = 2000.0;
  /// One-cycle length TS in steps; 0 derives it from the epoch-wise batch plan.
  std::int64_t total_steps = 0;
  /// Warm-restart cycle T_i in steps; 0 restarts at every epoch boundary with T_i = steps in that epoch.
  std::int64_t cycle_length = 0;
  /// Batch size after the first WarmAdaBatch cycle.
  std::int64_t wab_batch = 16;

  /// Throws RangeError unless 0 < lr_min <= lr_max and the step counts are usable.
  void validate() const;
};

struct BatchPolicy {
  BatchVariant variant = BatchVariant::Constant;
  std::int64_t base_batch = 16;
  /// AdaBatch exponent P.
  int exponent = 4;
};

/// Position inside a warm-restart schedule.
struct ScheduleState {
  std::int64_t t_curr = 0;  // steps elapsed in the current cycle
  int epoch = 0;            // 1-based epoch of the last query; 0 before the first
  std::int64_t global_step = 0;
};

/// Epochs covered by the first WarmAdaBatch cycle (batch size 1).
inline constexpr int kWarmAdaBatchFirstEpochs = 3;

double lr_fixed(const LrPolicy& policy);

/// lr_0 * decay_rate^(step / decay_steps) with a real-valued exponent.
double lr_exp_decay(double lr0, double decay_rate, double decay_steps, double step);

/// Three-phase one-cycle rate at step ts of TS: linear rise to lr_max at
/// 0.45 TS, symmetric fall back to lr_min at 0.9 TS, then a linear anneal of
/// slope -9 lr_min / TS that ends at 0.1 lr_min. RangeError outside [0, TS].
double lr_one_cycle(double lr_min, double lr_max, double total_steps, double ts);

struct WarmRestartStep {
  double lr;
  ScheduleState state;
};

/// Cosine-annealed rate at state.t_curr; the returned state has t_curr
/// advanced by one, or wrapped to 0 when it had reached cycle_length.
WarmRestartStep lr_warm_restarts(double lr_min, double lr_max, ScheduleState state, std::int64_t cycle_length);

/// Batch size of epoch (1-based): 1 for epochs 1-3, then 2^P, 2^(P+1), 2^(P+2)
/// in blocks of five epochs.
std::int64_t batch_adabatch(int exponent, int epoch);

struct WarmAdaBatchStep {
  double lr;
  std::int64_t batch;
  std::int64_t cycle_length;
  ScheduleState state;
};

/// One step of WarmAdaBatch: batch 1 with a cosine cycle spanning the first
/// three epochs, then batch `wab_batch` with a second cycle spanning the
/// remaining epochs. The cycle restarts on the first step of epoch 4.
WarmAdaBatchStep warm_adabatch(double lr_min, double lr_max, int epoch, ScheduleState state, std::int64_t train_size,
                               std::int64_t wab_batch = 16, int total_epochs = 30);

/// Batch size used in `epoch` by the combined lr/batch configuration.
std::int64_t batch_for_epoch(const LrPolicy& lr, const BatchPolicy& batch, int epoch);

inline std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

/// Sequential evaluation of a schedule, one call per optimizer step.
class Scheduler {
 public:
  Scheduler(LrPolicy lr, BatchPolicy batch, int epochs, std::int64_t train_size);

  /// Starts `epoch` (1-based, consecutive) and returns its batch size.
  std::int64_t begin_epoch(int epoch);
  /// Learning rate for the next optimizer step of the current epoch.
  double next_lr();

  std::int64_t steps_in_epoch(int epoch) const;
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t global_step() const { return state_.global_step; }
  const LrPolicy& lr_policy() const { return lr_; }

 private:
  LrPolicy lr_;
  BatchPolicy batch_;
  int epochs_;
  std::int64_t train_size_;
  std::int64_t total_steps_;
  int epoch_ = 0;
  std::int64_t epoch_steps_ = 0;
  ScheduleState state_;
};

struct TracePoint {
  int epoch;
  std::int64_t step;  // global, 0-based
  double lr;
  std::int64_t batch;
};

/// Full per-step trace of a schedule over `epochs` epochs of `train_size` samples.
std::vector<TracePoint> schedule_trace(const LrPolicy& lr, const BatchPolicy& batch, int epochs,
                                       std::int64_t train_size);

/// CSV with header epoch,step,lr,batch_size; rates printed round-trip exact.
void write_schedule_csv(std::ostream& os, const std::vector<TracePoint>& trace);

std::string_view to_string(LrVariant v);
std::string_view to_string(BatchVariant v);

}  // namespace capstrain

#endif  // CAPSTRAIN_SCHEDULERS_HPP
