#include "capstrain/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fstream>
#include <iostream>

#include "capstrain/errors.hpp"
#include "capstrain/experiment.hpp"

namespace capstrain {
namespace {

struct Options {
  std::string dataset = "mnist";
  std::string data_dir = "data/mnist";
  std::string policy = "fixed";
  bool weight_sharing = false;
  bool reduced_decoder = false;
  bool mask_by_max_always = false;
  int epochs = 30;
  int runs = 5;
  std::uint64_t seed = 1;
  std::string scale = "paper";
  Index subset = 0;
  Index test_subset = 0;
  Index batch = 16;
  std::string sweep;
  std::string out;
  std::string plot;
  bool plot_only = false;
  Index train_size = 60000;
  std::string points;
  std::string checkpoint_dir;
  bool quiet = false;
};

void build_app(CLI::App& app, Options& o) {
  app.set_config("--config", "", "Flat key=value file; command-line flags take precedence");
  app.add_option("--dataset", o.dataset, "Dataset")->check(CLI::IsMember({"mnist", "fashion-mnist"}))->capture_default_str();
  app.add_option("--data-dir", o.data_dir, "Directory holding the four IDX files")->capture_default_str();
  app.add_option("--policy", o.policy, "Training policy")->check(CLI::IsMember(policy_names()))->capture_default_str();
  app.add_flag("--weight-sharing", o.weight_sharing, "Share DigitCaps transforms across grid positions");
  app.add_flag("--reduced-decoder", o.reduced_decoder, "Feed only the selected 16-D capsule to the decoder");
  app.add_flag("--mask-by-max-always", o.mask_by_max_always, "Mask by the longest capsule during training too");
  app.add_option("--epochs", o.epochs, "Epochs per run")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--runs", o.runs, "Seeds averaged per experiment")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--seed", o.seed, "Base seed; run r uses seed + r")->capture_default_str();
  app.add_option("--scale", o.scale, "Model size preset")->check(CLI::IsMember({"paper", "desk"}))->capture_default_str();
  app.add_option("--subset", o.subset, "Stratified training subset size (0 = all)")->check(CLI::NonNegativeNumber);
  app.add_option("--test-subset", o.test_subset, "Stratified test subset size (0 = all)")->check(CLI::NonNegativeNumber);
  app.add_option("--batch", o.batch, "Base batch size")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_option("--sweep", o.sweep, "Run a policy grid instead of one policy")->check(CLI::IsMember({"default"}));
  app.add_option("--out", o.out, "Metrics CSV path");
  app.add_option("--points", o.points, "Experiment points CSV path (accuracy, time, parameters)");
  app.add_option("--checkpoint-dir", o.checkpoint_dir, "Write best-accuracy checkpoints here");
  app.add_option("--plot", o.plot, "Schedule trace path (.csv, or .svg for a drawing)");
  app.add_flag("--plot-only", o.plot_only, "Write the schedule plot and exit without training");
  app.add_option("--train-size", o.train_size, "Training-set size used by --plot-only")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--quiet", o.quiet, "Suppress per-epoch progress");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Capsule-network training with learning-rate and batch-size policies", "capstrain"};
  Options o;
  build_app(app, o);
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    if (std::string(e.what()).find("--policy") != std::string::npos) {
      err << "valid policies: " << fmt::format("{}", fmt::join(policy_names(), ", ")) << '\n';
    }
    return kExitBadFlags;
  }

  if (!o.sweep.empty() && app.get_option("--policy")->count() > 0) {
    err << "error: --sweep and --policy are mutually exclusive\n";
    return kExitBadFlags;
  }
  if (o.plot_only && o.plot.empty()) {
    err << "error: --plot-only needs --plot PATH\n";
    return kExitBadFlags;
  }

  try {
    const PolicySpec policy = policy_by_name(o.policy, o.batch);
    if (o.plot_only) {
      emit_schedule_plot(policy, o.epochs, o.train_size, o.plot);
      out << "wrote " << o.plot << '\n';
      return kExitOk;
    }

    const DatasetKind kind = parse_dataset_kind(o.dataset);
    DatasetSplit train_split = load_split(o.data_dir, kind, SplitKind::Train);
    DatasetSplit test_split = load_split(o.data_dir, kind, SplitKind::Test);
    if (o.subset > 0) train_split = subset(train_split, o.subset, o.seed);
    if (o.test_subset > 0) test_split = subset(test_split, o.test_subset, o.seed);
    if (!o.plot.empty()) {
      emit_schedule_plot(policy, o.epochs, train_split.size(), o.plot);
      out << "wrote " << o.plot << '\n';
    }

    RunConfig base;
    base.model = o.scale == "desk" ? CapsNetConfig::desk() : CapsNetConfig::paper();
    base.epochs = o.epochs;
    base.runs = o.runs;
    base.seed = o.seed;
    base.dataset = kind;
    base.batch.base_batch = o.batch;
    base.mask_by_max_always = o.mask_by_max_always;
    if (!o.checkpoint_dir.empty()) {
      std::filesystem::create_directories(o.checkpoint_dir);
      base.checkpoint_path = o.checkpoint_dir;
    }

    const std::vector<SweepEntry> entries =
        o.sweep.empty() ? std::vector<SweepEntry>{make_entry(o.policy, o.weight_sharing, o.reduced_decoder)}
                        : default_sweep();
    out << fmt::format("{}: {} train / {} test samples, {} scale, {} epochs x {} runs per experiment\n", o.dataset,
                       train_split.size(), test_split.size(), o.scale, o.epochs, o.runs);

    const auto on_epoch = [&](const RunMetrics& m, const EpochRecord& e) {
      if (!o.quiet) {
        out << fmt::format("  {} run {} epoch {:>2}: loss {:.4f}  acc {:.4f}  batch {}  lr {:.3g}  {:.1f}s\n", m.label,
                           m.run_id, e.epoch, e.train_loss, e.test_accuracy, e.batch_size, e.lr_end, e.elapsed_s);
        out.flush();
      }
    };
    const auto results = run_experiments(entries, base, train_split, test_split, {}, on_epoch);

    std::vector<RunMetrics> all_runs;
    for (const auto& r : results) all_runs.insert(all_runs.end(), r.runs.begin(), r.runs.end());
    if (!o.out.empty()) {
      std::ofstream csv(o.out);
      if (!csv) throw FormatError("cannot write " + o.out);
      write_metrics_csv(csv, all_runs);
    }

    const auto rows = summarize(results);
    out << '\n' << summary_table(rows);
    const auto points = experiment_points(rows);
    if (!o.points.empty()) {
      std::ofstream csv(o.points);
      if (!csv) throw FormatError("cannot write " + o.points);
      write_points_csv(csv, points);
    }
    if (!points.empty()) {
      out << "\nPareto front (accuracy, training time, parameters):\n";
      for (const auto& p : pareto_front(points)) {
        out << fmt::format("  {:<16} {:.4f}  {:.2f}s  {}\n", p.label, p.accuracy, p.training_time, p.parameters);
      }
    }

    bool diverged = false;
    for (const auto& r : results) {
      if (r.divergence) {
        err << "diverged: " << *r.divergence << '\n';
        diverged = true;
      }
    }
    return diverged ? kExitDiverged : kExitOk;
  } catch (const MissingDataError& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissingData;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitMissingData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitBadFlags;
  }
}

}  // namespace capstrain
