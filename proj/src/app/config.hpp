#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pillar/dataset.hpp"
#include "pillar/laplace.hpp"

namespace pillar::app {

struct StreamFiles {
  std::string name;
  std::filesystem::path train_features;
  std::filesystem::path train_labels;
  std::filesystem::path test_features;
  std::filesystem::path test_labels;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<int> num_classes;
  std::optional<SynthConfig> synth;
  std::vector<StreamFiles> streams;
  // Where synth writes and where stream files default to.
  std::filesystem::path data_dir = ".";
  std::size_t num_subsets = 7;
  std::size_t per_class = 10;
  HyperGrid grid = HyperGrid::defaults();
  int num_samples = kDefaultPredictiveSamples;
  std::optional<std::filesystem::path> fusion_tree;
  std::filesystem::path output_dir = ".";
  // Hex FNV-1a of the effective configuration document.
  std::string hash;

  std::uint64_t synth_seed() const;
  std::uint64_t partition_seed() const;
  std::uint64_t predictive_seed() const;
};

// Relative paths are resolved against the config file's directory.
RunConfig load_config(const std::filesystem::path &path,
                      std::optional<std::uint64_t> seed_override);

RunConfig parse_config(const nlohmann::json &doc,
                       const std::filesystem::path &base_dir,
                       std::optional<std::uint64_t> seed_override);

std::string fnv1a_hex(std::string_view bytes);

} // namespace pillar::app
