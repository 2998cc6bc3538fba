#include "capstrain/experiment.hpp"

#include <algorithm>
#include <fmt/format.h>
#include <fstream>
#include <ostream>

#include "capstrain/errors.hpp"

namespace capstrain {

const std::vector<std::string>& policy_names() {
  static const std::vector<std::string> names{"fixed", "expdecay", "ocp", "warmrestarts", "adabatch", "wab"};
  return names;
}

PolicySpec policy_by_name(std::string_view name, Index base_batch) {
  PolicySpec p;
  p.name = std::string(name);
  p.batch.base_batch = base_batch;
  p.lr.wab_batch = base_batch;
  if (name == "fixed") {
    p.lr.variant = LrVariant::Fixed;
  } else if (name == "expdecay") {
    p.lr.variant = LrVariant::ExpDecay;
  } else if (name == "ocp") {
    p.lr.variant = LrVariant::OneCycle;
  } else if (name == "warmrestarts") {
    p.lr.variant = LrVariant::WarmRestarts;
  } else if (name == "adabatch") {
    p.lr.variant = LrVariant::Fixed;
    p.batch.variant = BatchVariant::AdaBatch;
  } else if (name == "wab") {
    p.lr.variant = LrVariant::WarmAdaBatch;
  } else {
    throw RangeError(fmt::format("unknown policy '{}' (valid: {})", name, fmt::join(policy_names(), ", ")));
  }
  return p;
}

SweepEntry make_entry(std::string policy, bool weight_sharing, bool reduced_decoder) {
  std::string label = policy;
  if (weight_sharing) label += "+ws";
  if (reduced_decoder) label += "+rd";
  return {label, std::move(policy), weight_sharing, reduced_decoder};
}

std::vector<SweepEntry> default_sweep() {
  std::vector<SweepEntry> out;
  for (bool ws : {false, true}) {
    for (const auto& name : policy_names()) out.push_back(make_entry(name, ws, ws));
  }
  return out;
}

RunConfig configure(const RunConfig& base, const SweepEntry& entry) {
  RunConfig cfg = base;
  const PolicySpec policy = policy_by_name(entry.policy, base.batch.base_batch);
  cfg.label = entry.label;
  cfg.lr.variant = policy.lr.variant;
  cfg.lr.wab_batch = policy.lr.wab_batch;
  cfg.batch.variant = policy.batch.variant;
  cfg.model.weight_sharing = entry.weight_sharing;
  cfg.model.reduced_decoder = entry.reduced_decoder;
  return cfg;
}

std::vector<ExperimentResult> run_experiments(const std::vector<SweepEntry>& entries, const RunConfig& base,
                                              const DatasetSplit& train_split, const DatasetSplit& test_split,
                                              const RunCallback& on_run, const EpochCallback& on_epoch) {
  std::vector<ExperimentResult> results;
  for (const SweepEntry& entry : entries) {
    const RunConfig cfg = configure(base, entry);
    ExperimentResult result;
    result.entry = entry;
    std::vector<RunMetrics> finished;
    for (int r = 0; r < cfg.runs; ++r) {
      RunConfig run_cfg = cfg;
      if (cfg.checkpoint_path) {
        run_cfg.checkpoint_path = *cfg.checkpoint_path / fmt::format("{}-run{}.ftcp", entry.label, r);
      }
      RunMetrics m = train(run_cfg, train_split, test_split, r, on_epoch);
      if (on_run) on_run(entry, m);
      if (m.diverged()) {
        result.divergence = fmt::format("{} run {}: {}", entry.label, r, *m.divergence);
      } else {
        finished.push_back(m);
      }
      result.runs.push_back(std::move(m));
    }
    if (!finished.empty()) result.averaged = average_runs(finished);
    results.push_back(std::move(result));
  }
  return results;
}

std::vector<SummaryRow> summarize(const std::vector<ExperimentResult>& results) {
  const ExperimentResult* baseline = nullptr;
  for (const auto& r : results) {
    if (r.entry.policy == "fixed" && !r.entry.weight_sharing && !r.entry.reduced_decoder && r.averaged) {
      baseline = &r;
      break;
    }
  }
  std::vector<SummaryRow> rows;
  for (const auto& r : results) {
    SummaryRow row;
    row.label = r.entry.label;
    row.baseline = &r == baseline;
    row.diverged = r.divergence.has_value();
    if (r.averaged) {
      const RunMetrics& mean = r.averaged->mean;
      row.max_accuracy = mean.max_accuracy;
      row.epochs_to_max = mean.epoch_of_max;
      row.parameters = mean.parameters;
      row.seconds_per_epoch = mean.seconds_per_epoch();
      row.training_time = row.epochs_to_max * row.seconds_per_epoch;
      if (baseline) row.epochs_to_baseline_max = epochs_to_reach(mean, baseline->averaged->mean.max_accuracy);
    } else if (!r.runs.empty()) {
      row.parameters = r.runs.front().parameters;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string summary_table(const std::vector<SummaryRow>& rows) {
  std::string out = fmt::format("{:<18} {:>9} {:>13} {:>21} {:>11} {:>10} {:>10}\n", "policy", "max acc",
                                "epochs-to-max", "epochs-to-baseline-max", "parameters", "s/epoch", "time (s)");
  for (const auto& r : rows) {
    const std::string label = r.baseline ? r.label + " (baseline)" : r.label;
    if (r.diverged && r.epochs_to_max == 0) {
      out += fmt::format("{:<18} {:>9} {:>13} {:>21} {:>11} {:>10} {:>10}\n", label, "diverged", "-", "-",
                         r.parameters, "-", "-");
      continue;
    }
    const std::string to_base = r.epochs_to_baseline_max ? std::to_string(*r.epochs_to_baseline_max) : "-";
    out += fmt::format("{:<18} {:>8.2f}% {:>13} {:>21} {:>11} {:>10.2f} {:>10.2f}{}\n", label, 100.0 * r.max_accuracy,
                       r.epochs_to_max, to_base, r.parameters, r.seconds_per_epoch, r.training_time,
                       r.diverged ? "  (some runs diverged)" : "");
  }
  return out;
}

std::vector<ExperimentPoint> experiment_points(const std::vector<SummaryRow>& rows) {
  std::vector<ExperimentPoint> out;
  for (const auto& r : rows) {
    ExperimentPoint p{r.label, r.max_accuracy, r.training_time, static_cast<double>(r.parameters)};
    if (p.accuracy > 0.0 && p.training_time > 0.0 && p.parameters > 0.0) out.push_back(p);
  }
  return out;
}

void emit_schedule_plot(const PolicySpec& policy, int epochs, Index train_size, const std::filesystem::path& path) {
  const auto trace = schedule_trace(policy.lr, policy.batch, epochs, train_size);
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  if (path.extension() == ".svg") {
    write_schedule_svg(os, trace, fmt::format("{}: {} epochs, N = {}", policy.name, epochs, train_size));
  } else {
    write_schedule_csv(os, trace);
  }
  if (!os) throw FormatError("failed writing " + path.string());
}

void write_schedule_svg(std::ostream& os, const std::vector<TracePoint>& trace, std::string_view title) {
  constexpr double width = 800, panel = 220, margin = 50, gap = 40;
  const double height = 2 * panel + gap + 2 * margin;
  double lr_max = 0, batch_max = 1;
  for (const auto& p : trace) {
    lr_max = std::max(lr_max, p.lr);
    batch_max = std::max(batch_max, static_cast<double>(p.batch));
  }
  const double steps = std::max<double>(1.0, static_cast<double>(trace.size()) - 1.0);
  // thin the polyline to at most ~4000 vertices
  const std::size_t stride = std::max<std::size_t>(1, trace.size() / 4000);
  auto polyline = [&](double top, auto value, double vmax) {
    std::string pts;
    for (std::size_t i = 0; i < trace.size(); i += stride) {
      const double x = margin + (width - 2 * margin) * static_cast<double>(i) / steps;
      const double y = top + panel - panel * value(trace[i]) / vmax;
      pts += fmt::format("{:.1f},{:.1f} ", x, y);
    }
    return pts;
  };
  os << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="12">)",
                    width, height)
     << '\n';
  os << fmt::format(R"(<text x="{}" y="20">{}</text>)", margin, title) << '\n';
  const double tops[2] = {margin, margin + panel + gap};
  const char* names[2] = {"learning rate", "batch size"};
  const double maxima[2] = {lr_max > 0 ? lr_max : 1.0, batch_max};
  for (int k = 0; k < 2; ++k) {
    os << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#999"/>)", margin, tops[k],
                      width - 2 * margin, panel)
       << '\n';
    os << fmt::format(R"(<text x="{}" y="{}">{} (max {})</text>)", margin + 4, tops[k] + 14, names[k], maxima[k]) << '\n';
  }
  os << fmt::format(R"(<polyline fill="none" stroke="#1f77b4" points="{}"/>)",
                    polyline(tops[0], [](const TracePoint& p) { return p.lr; }, maxima[0]))
     << '\n';
  os << fmt::format(R"(<polyline fill="none" stroke="#d62728" points="{}"/>)",
                    polyline(tops[1], [](const TracePoint& p) { return static_cast<double>(p.batch); }, maxima[1]))
     << '\n';
  os << fmt::format(R"(<text x="{}" y="{}">step</text>)", width / 2, height - 15) << '\n';
  os << "</svg>\n";
}

}  // namespace capstrain
