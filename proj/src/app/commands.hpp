#pragma once

#include <filesystem>
#include <optional>
#include <ostream>

#include "config.hpp"

namespace pillar::app {

struct RunOptions {
  std::filesystem::path out_dir;
  std::size_t jobs = 1;
  std::optional<std::filesystem::path> tree;
};

// Writes <name>_train.pnf, <name>_test.pnf per stream plus train_labels.csv
// and test_labels.csv; prints a JSON manifest.
void cmd_synth(const RunConfig &cfg, const RunOptions &opts, std::ostream &out);

// Writes models/<stream>/expert_<k>.pgpm, models/<stream>/stream.json,
// train_report.json and train_timings.json.
void cmd_train(const RunConfig &cfg, const RunOptions &opts, std::ostream &out);

// Writes report.json, posterior.csv and predict_timings.json.
void cmd_predict(const RunConfig &cfg, const RunOptions &opts,
                 std::ostream &out);

// Prints the accuracy and writes (or prints) the confusion matrix.
void cmd_evaluate(const std::filesystem::path &predictions,
                  const std::filesystem::path &labels,
                  std::optional<int> num_classes,
                  const std::optional<std::filesystem::path> &out_dir,
                  std::ostream &out);

} // namespace pillar::app
