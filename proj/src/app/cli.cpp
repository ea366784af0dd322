#include <iostream>

#include <CLI11.hpp>

#include "commands.hpp"
#include "pillar/app.hpp"
#include "pillar/error.hpp"
#include "pillar/parallel.hpp"

namespace pillar::app {

int run(const std::vector<std::string> &args, std::ostream &out,
        std::ostream &err) {
  CLI::App app{"Distributed Gaussian process classification with "
               "product-of-experts fusion",
               "pillar"};
  app.set_version_flag("--version", PILLAR_VERSION);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string tree_path;
  std::size_t jobs = default_jobs();
  std::optional<std::uint64_t> seed;

  const auto add_common = [&](CLI::App *cmd) {
    cmd->add_option("--config", config_path, "JSON run configuration")
        ->required();
    cmd->add_option("--out", out_dir,
                    "Output directory (overrides config data_dir for synth, "
                    "output_dir otherwise)");
    cmd->add_option("--jobs", jobs, "Maximum worker threads")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--seed", seed, "Override the config seed");
  };

  auto *synth = app.add_subcommand("synth", "Write synthetic feature streams");
  add_common(synth);
  auto *train = app.add_subcommand(
      "train", "Fit hyperparameters and train experts for every stream");
  add_common(train);
  auto *predict = app.add_subcommand(
      "predict", "Fuse expert predictions over a tree and report accuracy");
  add_common(predict);
  predict->add_option("--tree", tree_path, "JSON fusion tree");

  auto *evaluate_cmd = app.add_subcommand(
      "evaluate", "Score predicted labels or posteriors against labels");
  std::string predictions_path;
  std::string labels_path;
  std::optional<int> num_classes;
  evaluate_cmd->add_option("predictions", predictions_path,
                           "Predicted labels or posterior CSV")
      ->required();
  evaluate_cmd->add_option("labels", labels_path, "True labels CSV")
      ->required();
  evaluate_cmd->add_option("--num-classes", num_classes, "Class count")
      ->check(CLI::Range(2, std::numeric_limits<int>::max()));
  evaluate_cmd->add_option("--out", out_dir,
                           "Directory for evaluation.json (default: stdout)");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp &e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp &e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion &e) {
    out << PILLAR_VERSION << "\n";
    return kExitOk;
  } catch (const CLI::ParseError &e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (evaluate_cmd->parsed()) {
      std::optional<std::filesystem::path> out_path;
      if (!out_dir.empty()) {
        out_path = out_dir;
      }
      cmd_evaluate(predictions_path, labels_path, num_classes, out_path, out);
      return kExitOk;
    }

    const RunConfig cfg = load_config(config_path, seed);
    RunOptions opts;
    if (!out_dir.empty()) {
      opts.out_dir = out_dir;
    } else {
      opts.out_dir = synth->parsed() ? cfg.data_dir : cfg.output_dir;
    }
    opts.jobs = jobs;
    if (!tree_path.empty()) {
      opts.tree = tree_path;
    }
    if (synth->parsed()) {
      cmd_synth(cfg, opts, out);
    } else if (train->parsed()) {
      cmd_train(cfg, opts, out);
    } else if (predict->parsed()) {
      cmd_predict(cfg, opts, out);
    }
    return kExitOk;
  } catch (const ConfigError &e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception &e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

int run(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

} // namespace pillar::app
