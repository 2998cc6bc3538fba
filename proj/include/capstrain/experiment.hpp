#ifndef CAPSTRAIN_EXPERIMENT_HPP
#define CAPSTRAIN_EXPERIMENT_HPP

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "capstrain/pareto.hpp"
#include "capstrain/training.hpp"

namespace capstrain {

/// Named learning-rate/batch-size combination selectable from the command line.
struct PolicySpec {
  std::string name;
  LrPolicy lr;
  BatchPolicy batch;
};

/// fixed, expdecay, ocp, warmrestarts, adabatch, wab.
const std::vector<std::string>& policy_names();
/// Throws RangeError naming the valid policies for an unknown name.
PolicySpec policy_by_name(std::string_view name, Index base_batch = 16);

struct SweepEntry {
  std::string label;
  std::string policy;
  bool weight_sharing = false;
  bool reduced_decoder = false;
};

SweepEntry make_entry(std::string policy, bool weight_sharing, bool reduced_decoder);
/// Every policy with weight sharing off and on; "on" includes the reduced decoder.
std::vector<SweepEntry> default_sweep();

/// base with the entry's policy and model variant applied.
RunConfig configure(const RunConfig& base, const SweepEntry& entry);

struct ExperimentResult {
  SweepEntry entry;
  std::vector<RunMetrics> runs;
  std::optional<AveragedMetrics> averaged;  // over runs that did not diverge
  std::optional<std::string> divergence;
};

using RunCallback = std::function<void(const SweepEntry&, const RunMetrics&)>;

/// Trains base.runs seeds per entry, one after another. A set
/// base.checkpoint_path names a directory receiving "<label>-run<r>.ftcp".
std::vector<ExperimentResult> run_experiments(const std::vector<SweepEntry>& entries, const RunConfig& base,
                                              const DatasetSplit& train_split, const DatasetSplit& test_split,
                                              const RunCallback& on_run = {}, const EpochCallback& on_epoch = {});

struct SummaryRow {
  std::string label;
  bool baseline = false;
  double max_accuracy = 0.0;
  int epochs_to_max = 0;
  std::optional<int> epochs_to_baseline_max;
  std::int64_t parameters = 0;
  double seconds_per_epoch = 0.0;
  double training_time = 0.0;  // epochs_to_max * seconds_per_epoch
  bool diverged = false;
};

/// Rows from the seed-averaged curves. The baseline is the fixed policy
/// without weight sharing or reduced decoder, when present.
std::vector<SummaryRow> summarize(const std::vector<ExperimentResult>& results);
std::string summary_table(const std::vector<SummaryRow>& rows);
/// Points of the non-diverged rows with positive coordinates.
std::vector<ExperimentPoint> experiment_points(const std::vector<SummaryRow>& rows);

/// Writes the lr/batch trace of a policy as CSV, or as SVG when the path ends in ".svg".
void emit_schedule_plot(const PolicySpec& policy, int epochs, Index train_size, const std::filesystem::path& path);
void write_schedule_svg(std::ostream& os, const std::vector<TracePoint>& trace, std::string_view title);

}  // namespace capstrain

#endif  // CAPSTRAIN_EXPERIMENT_HPP
