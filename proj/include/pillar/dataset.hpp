#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace pillar {

// One sample per row.
using FeatureMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct LabelVector {
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return labels.size(); }
  int operator[](std::size_t i) const { return labels[i]; }
};

// Throws FormatError unless every label lies in [0, num_classes) and
// num_classes >= 2.
void validate_labels(const LabelVector &y);

// Throws DimensionError if the label count differs from the row count.
void check_paired(const FeatureMatrix &x, const LabelVector &y);

enum class FeatureFormat { pnf1, csv };

// ".csv" selects CSV; anything else is read as PNF1.
FeatureFormat format_from_path(const std::filesystem::path &path);

// PNF1 layout: "PNF1", u32 LE rows, u32 LE cols, rows*cols f32 LE, row-major.
std::string encode_pnf1(const FeatureMatrix &x);
FeatureMatrix decode_pnf1(std::string_view bytes, std::string_view source);
FeatureMatrix parse_features_csv(std::string_view text, std::string_view source);

FeatureMatrix load_features(const std::filesystem::path &path,
                            FeatureFormat format);
inline FeatureMatrix load_features(const std::filesystem::path &path) {
  return load_features(path, format_from_path(path));
}
void save_features(const std::filesystem::path &path, const FeatureMatrix &x,
                   FeatureFormat format = FeatureFormat::pnf1);

/// Parses one integer label per line. A first line containing letters is
/// treated as a header. Without `num_classes` the class count is inferred as
/// one more than the largest label.
LabelVector parse_labels_csv(std::string_view text,
                             std::optional<int> num_classes,
                             std::string_view source);
LabelVector load_labels(const std::filesystem::path &path,
                        std::optional<int> num_classes = std::nullopt);
void save_labels(const std::filesystem::path &path, const LabelVector &y);

// Rounds every entry to the nearest float32. Features that pass through this
// survive PNF1 encoding bit-exactly.
FeatureMatrix quantize_float32(const FeatureMatrix &x);
bool is_float32_exact(const FeatureMatrix &x);

struct NormalizationStats {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
};

// Columns with stddev below this are centered but not scaled.
inline constexpr double kMinScaleStddev = 1e-12;

NormalizationStats fit_normalization(const FeatureMatrix &x);
FeatureMatrix apply_normalization(const FeatureMatrix &x,
                                  const NormalizationStats &stats);

struct Partition {
  std::vector<std::vector<std::size_t>> subsets;
  std::uint64_t seed = 0;
};

/// Draws `num_subsets` disjoint subsets, each holding exactly `per_class`
/// samples of every class, without replacement. Samples beyond
/// num_subsets * per_class in a class are left unassigned. Subset indices are
/// returned in ascending order.
Partition partition_dataset(const LabelVector &y, std::size_t num_subsets,
                            std::size_t per_class, std::uint64_t seed);

FeatureMatrix select_rows(const FeatureMatrix &x,
                          std::span<const std::size_t> rows);
LabelVector select_labels(const LabelVector &y,
                          std::span<const std::size_t> rows);

struct SynthStreamSpec {
  std::string name;
  int dims = 0;
  double noise = 0.0;
};

struct SynthConfig {
  int num_classes = 0;
  int per_class_train = 0;
  int per_class_test = 0;
  int latent_dim = 8;
  // Norm of each class center in latent space. Centers are mutually
  // orthogonal when num_classes <= latent_dim, otherwise random directions.
  // Samples scatter around their center with standard deviation
  // `latent_spread` per coordinate.
  double separation = 3.0;
  double latent_spread = 1.0;
  // Every stream reuses the first stream's projection when set.
  bool shared_projection = false;
  std::vector<SynthStreamSpec> streams;
  std::uint64_t seed = 0;
};

struct SynthStream {
  std::string name;
  FeatureMatrix train;
  FeatureMatrix test;
};

struct SynthData {
  LabelVector train_labels;
  LabelVector test_labels;
  std::vector<SynthStream> streams;
};

// Throws ConfigError on invalid counts or noise levels.
void validate_synth_config(const SynthConfig &config);

/// Draws shared latent class centers and latent samples, then emits every
/// stream as its own random linear projection of the latent samples plus
/// stream-specific Gaussian noise. Labels cycle through the classes
/// (sample i has class i % C) and are shared by all streams.
SynthData synth_streams(const SynthConfig &config);

} // namespace pillar
