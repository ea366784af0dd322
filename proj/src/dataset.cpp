#include "pillar/dataset.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include "pillar/error.hpp"
#include "pillar/random.hpp"

namespace pillar {

namespace {

std::string read_file(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::filesystem::path &path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw Error("failed writing " + path.string());
  }
}

std::uint32_t read_u32_le(std::string_view bytes, std::size_t offset) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) {
    v = (v << 8) | static_cast<unsigned char>(bytes[offset + i]);
  }
  return v;
}

void append_u32_le(std::string &out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) {
    out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
  }
}

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\r' || c == '\n';
  };
  while (!s.empty() && is_space(s.front())) {
    s.remove_prefix(1);
  }
  while (!s.empty() && is_space(s.back())) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    if (end == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  while (!lines.empty() && trim(lines.back()).empty()) {
    lines.pop_back();
  }
  return lines;
}

std::string location(std::string_view source) {
  return source.empty() ? std::string("<memory>") : std::string(source);
}

} // namespace

void validate_labels(const LabelVector &y) {
  if (y.num_classes < 2) {
    throw FormatError("label set needs at least 2 classes, got " +
                      std::to_string(y.num_classes));
  }
  for (std::size_t i = 0; i < y.labels.size(); ++i) {
    if (y.labels[i] < 0 || y.labels[i] >= y.num_classes) {
      throw FormatError("label " + std::to_string(y.labels[i]) + " at index " +
                        std::to_string(i) + " outside [0, " +
                        std::to_string(y.num_classes) + ")");
    }
  }
}

void check_paired(const FeatureMatrix &x, const LabelVector &y) {
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DimensionError("feature rows (" + std::to_string(x.rows()) +
                         ") and labels (" + std::to_string(y.size()) +
                         ") differ in length");
  }
}

FeatureFormat format_from_path(const std::filesystem::path &path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return ext == ".csv" ? FeatureFormat::csv : FeatureFormat::pnf1;
}

std::string encode_pnf1(const FeatureMatrix &x) {
  if (x.rows() < 1 || x.cols() < 1) {
    throw DimensionError("cannot encode an empty feature matrix");
  }
  std::string out;
  out.reserve(12 + 4 * static_cast<std::size_t>(x.size()));
  out.append("PNF1");
  append_u32_le(out, static_cast<std::uint32_t>(x.rows()));
  append_u32_le(out, static_cast<std::uint32_t>(x.cols()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      append_u32_le(out,
                    std::bit_cast<std::uint32_t>(static_cast<float>(x(r, c))));
    }
  }
  return out;
}

FeatureMatrix decode_pnf1(std::string_view bytes, std::string_view source) {
  const auto where = location(source);
  if (bytes.size() < 12) {
    throw FormatError(where + ": truncated PNF1 header at byte offset " +
                      std::to_string(bytes.size()));
  }
  if (bytes.substr(0, 4) != "PNF1") {
    throw FormatError(where + ": bad magic at byte offset 0 (expected PNF1)");
  }
  const std::uint64_t rows = read_u32_le(bytes, 4);
  const std::uint64_t cols = read_u32_le(bytes, 8);
  if (rows == 0) {
    throw FormatError(where + ": zero rows in header at byte offset 4");
  }
  if (cols == 0) {
    throw FormatError(where + ": zero columns in header at byte offset 8");
  }
  const std::uint64_t expected = 12 + 4 * rows * cols;
  if (bytes.size() != expected) {
    throw FormatError(where + ": dimension mismatch, header declares " +
                      std::to_string(rows) + "x" + std::to_string(cols) +
                      " needing " + std::to_string(expected) +
                      " bytes but data ends at byte offset " +
                      std::to_string(bytes.size()));
  }
  FeatureMatrix x(rows, cols);
  std::size_t offset = 12;
  for (std::uint64_t r = 0; r < rows; ++r) {
    for (std::uint64_t c = 0; c < cols; ++c, offset += 4) {
      const float v = std::bit_cast<float>(read_u32_le(bytes, offset));
      if (!std::isfinite(v)) {
        throw FormatError(where + ": non-finite value at (row " +
                          std::to_string(r) + ", col " + std::to_string(c) +
                          "), byte offset " + std::to_string(offset));
      }
      x(r, c) = v;
    }
  }
  return x;
}

FeatureMatrix parse_features_csv(std::string_view text,
                                 std::string_view source) {
  const auto where = location(source);
  const auto lines = split_lines(text);
  if (lines.empty()) {
    throw FormatError(where + ": no feature rows");
  }
  std::vector<std::vector<double>> rows;
  rows.reserve(lines.size());
  for (std::size_t r = 0; r < lines.size(); ++r) {
    std::vector<double> row;
    std::string_view line = lines[r];
    std::size_t col = 0;
    while (true) {
      const auto comma = line.find(',');
      const auto token = trim(line.substr(0, comma));
      double v = 0.0;
      const auto *first = token.data();
      const auto *last = token.data() + token.size();
      if (!token.empty() && *first == '+') {
        ++first;
      }
      const auto [ptr, ec] = std::from_chars(first, last, v);
      if (token.empty() || ec != std::errc() || ptr != last) {
        throw FormatError(where + ": unparseable value '" + std::string(token) +
                          "' at (row " + std::to_string(r) + ", col " +
                          std::to_string(col) + ")");
      }
      if (!std::isfinite(v)) {
        throw FormatError(where + ": non-finite value at (row " +
                          std::to_string(r) + ", col " + std::to_string(col) +
                          ")");
      }
      row.push_back(v);
      ++col;
      if (comma == std::string_view::npos) {
        break;
      }
      line.remove_prefix(comma + 1);
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw FormatError(where + ": dimension mismatch at row " +
                        std::to_string(r) + ", expected " +
                        std::to_string(rows.front().size()) + " columns, got " +
                        std::to_string(row.size()));
    }
    rows.push_back(std::move(row));
  }
  FeatureMatrix x(static_cast<Eigen::Index>(rows.size()),
                  static_cast<Eigen::Index>(rows.front().size()));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t c = 0; c < rows[r].size(); ++c) {
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          rows[r][c];
    }
  }
  return x;
}

FeatureMatrix load_features(const std::filesystem::path &path,
                            FeatureFormat format) {
  const auto bytes = read_file(path);
  return format == FeatureFormat::csv ? parse_features_csv(bytes, path.string())
                                      : decode_pnf1(bytes, path.string());
}

void save_features(const std::filesystem::path &path, const FeatureMatrix &x,
                   FeatureFormat format) {
  if (format == FeatureFormat::pnf1) {
    write_file(path, encode_pnf1(x));
    return;
  }
  std::ostringstream out;
  out.precision(17);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      out << (c ? "," : "") << x(r, c);
    }
    out << '\n';
  }
  write_file(path, out.str());
}

LabelVector parse_labels_csv(std::string_view text,
                             std::optional<int> num_classes,
                             std::string_view source) {
  const auto where = location(source);
  auto lines = split_lines(text);
  std::size_t first = 0;
  if (!lines.empty() &&
      std::any_of(lines[0].begin(), lines[0].end(),
                  [](unsigned char c) { return std::isalpha(c); })) {
    first = 1;
  }
  LabelVector y;
  for (std::size_t i = first; i < lines.size(); ++i) {
    const auto token = trim(lines[i]);
    long long v = 0;
    const auto [ptr, ec] =
        std::from_chars(token.data(), token.data() + token.size(), v);
    if (token.empty() || ec != std::errc() ||
        ptr != token.data() + token.size()) {
      throw FormatError(where + ": non-integer label '" + std::string(token) +
                        "' on line " + std::to_string(i + 1));
    }
    if (v < 0) {
      throw FormatError(where + ": negative label " + std::to_string(v) +
                        " on line " + std::to_string(i + 1));
    }
    if (v > std::numeric_limits<int>::max() - 1) {
      throw FormatError(where + ": label out of range on line " +
                        std::to_string(i + 1));
    }
    y.labels.push_back(static_cast<int>(v));
  }
  if (y.labels.empty()) {
    throw FormatError(where + ": no labels");
  }
  y.num_classes =
      num_classes ? *num_classes
                  : 1 + *std::max_element(y.labels.begin(), y.labels.end());
  try {
    validate_labels(y);
  } catch (const FormatError &e) {
    throw FormatError(where + ": " + e.what());
  }
  return y;
}

LabelVector load_labels(const std::filesystem::path &path,
                        std::optional<int> num_classes) {
  return parse_labels_csv(read_file(path), num_classes, path.string());
}

void save_labels(const std::filesystem::path &path, const LabelVector &y) {
  std::string out;
  for (int label : y.labels) {
    out += std::to_string(label);
    out += '\n';
  }
  write_file(path, out);
}

FeatureMatrix quantize_float32(const FeatureMatrix &x) {
  return x.cast<float>().cast<double>();
}

bool is_float32_exact(const FeatureMatrix &x) {
  return (x.array() == x.cast<float>().cast<double>().array()).all();
}

NormalizationStats fit_normalization(const FeatureMatrix &x) {
  if (x.rows() < 1 || x.cols() < 1) {
    throw DimensionError("cannot fit normalization on an empty matrix");
  }
  NormalizationStats stats;
  stats.mean = x.colwise().mean().transpose();
  stats.stddev =
      ((x.rowwise() - stats.mean.transpose()).array().square().colwise().sum() /
       static_cast<double>(x.rows()))
          .sqrt()
          .transpose();
  return stats;
}

FeatureMatrix apply_normalization(const FeatureMatrix &x,
                                  const NormalizationStats &stats) {
  if (stats.mean.size() != x.cols() || stats.stddev.size() != x.cols()) {
    throw DimensionError("normalization stats have " +
                         std::to_string(stats.mean.size()) +
                         " dims but features have " + std::to_string(x.cols()));
  }
  FeatureMatrix out = x.rowwise() - stats.mean.transpose();
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    if (stats.stddev(c) >= kMinScaleStddev) {
      out.col(c) /= stats.stddev(c);
    }
  }
  return out;
}

Partition partition_dataset(const LabelVector &y, std::size_t num_subsets,
                            std::size_t per_class, std::uint64_t seed) {
  validate_labels(y);
  if (num_subsets < 1 || per_class < 1) {
    throw ConfigError("partition needs at least one subset and one sample "
                      "per class");
  }
  std::vector<std::vector<std::size_t>> by_class(y.num_classes);
  for (std::size_t i = 0; i < y.size(); ++i) {
    by_class[y[i]].push_back(i);
  }
  const std::size_t needed = num_subsets * per_class;
  for (int c = 0; c < y.num_classes; ++c) {
    if (by_class[c].size() < needed) {
      throw ConfigError("class " + std::to_string(c) + " has " +
                        std::to_string(by_class[c].size()) +
                        " samples, needs " + std::to_string(needed) +
                        " (short by " +
                        std::to_string(needed - by_class[c].size()) + ")");
    }
  }

  Partition partition;
  partition.seed = seed;
  partition.subsets.resize(num_subsets);
  for (int c = 0; c < y.num_classes; ++c) {
    auto rng = make_rng(seed, static_cast<std::uint64_t>(c));
    auto &pool = by_class[c];
    // Partial Fisher-Yates; only the first `needed` slots are drawn.
    for (std::size_t i = 0; i < needed; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    for (std::size_t k = 0; k < num_subsets; ++k) {
      auto &subset = partition.subsets[k];
      subset.insert(subset.end(), pool.begin() + k * per_class,
                    pool.begin() + (k + 1) * per_class);
    }
  }
  for (auto &subset : partition.subsets) {
    std::sort(subset.begin(), subset.end());
  }
  return partition;
}

FeatureMatrix select_rows(const FeatureMatrix &x,
                          std::span<const std::size_t> rows) {
  FeatureMatrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= static_cast<std::size_t>(x.rows())) {
      throw DimensionError("row index " + std::to_string(rows[i]) +
                           " out of range");
    }
    out.row(static_cast<Eigen::Index>(i)) =
        x.row(static_cast<Eigen::Index>(rows[i]));
  }
  return out;
}

LabelVector select_labels(const LabelVector &y,
                          std::span<const std::size_t> rows) {
  LabelVector out;
  out.num_classes = y.num_classes;
  out.labels.reserve(rows.size());
  for (auto r : rows) {
    if (r >= y.size()) {
      throw DimensionError("label index " + std::to_string(r) +
                           " out of range");
    }
    out.labels.push_back(y[r]);
  }
  return out;
}

void validate_synth_config(const SynthConfig &config) {
  if (config.num_classes < 2) {
    throw ConfigError("synth: num_classes must be at least 2");
  }
  if (config.per_class_train < 1 || config.per_class_test < 1) {
    throw ConfigError("synth: per_class_train and per_class_test must be at "
                      "least 1");
  }
  if (config.latent_dim < 1) {
    throw ConfigError("synth: latent_dim must be at least 1");
  }
  if (!(config.separation >= 0.0) || !(config.latent_spread >= 0.0)) {
    throw ConfigError("synth: separation and latent_spread must be >= 0");
  }
  if (config.streams.empty()) {
    throw ConfigError("synth: at least one stream is required");
  }
  for (const auto &s : config.streams) {
    if (s.dims < 1) {
      throw ConfigError("synth: stream '" + s.name + "' needs dims >= 1");
    }
    if (!(s.noise >= 0.0) || !std::isfinite(s.noise)) {
      throw ConfigError("synth: stream '" + s.name + "' needs noise >= 0");
    }
    if (config.shared_projection && s.dims != config.streams.front().dims) {
      throw ConfigError("synth: shared_projection requires equal stream dims");
    }
  }
}

SynthData synth_streams(const SynthConfig &config) {
  validate_synth_config(config);
  const int num_classes = config.num_classes;
  const int latent_dim = config.latent_dim;
  const int n_train = num_classes * config.per_class_train;
  const int n_test = num_classes * config.per_class_test;

  using Normal = std::normal_distribution<double>;

  auto center_rng = make_rng(config.seed, 0);
  Normal normal;
  Eigen::MatrixXd centers(num_classes, latent_dim);
  for (int c = 0; c < num_classes; ++c) {
    for (int j = 0; j < latent_dim; ++j) {
      centers(c, j) = normal(center_rng);
    }
  }
  if (num_classes <= latent_dim) {
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(centers.transpose());
    const Eigen::MatrixXd q = qr.householderQ() *
                              Eigen::MatrixXd::Identity(latent_dim, num_classes);
    centers = q.transpose();
  }
  centers.rowwise().normalize();
  centers *= config.separation;

  const auto draw_latent = [&](int n, std::uint64_t stream_id) {
    auto rng = make_rng(config.seed, stream_id);
    Normal normal;
    Eigen::MatrixXd z(n, latent_dim);
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < latent_dim; ++j) {
        z(i, j) = centers(i % num_classes, j) + config.latent_spread * normal(rng);
      }
    }
    return z;
  };
  const Eigen::MatrixXd z_train = draw_latent(n_train, 1);
  const Eigen::MatrixXd z_test = draw_latent(n_test, 2);

  SynthData data;
  data.train_labels.num_classes = num_classes;
  data.test_labels.num_classes = num_classes;
  for (int i = 0; i < n_train; ++i) {
    data.train_labels.labels.push_back(i % num_classes);
  }
  for (int i = 0; i < n_test; ++i) {
    data.test_labels.labels.push_back(i % num_classes);
  }

  const double projection_scale = 1.0 / std::sqrt(static_cast<double>(latent_dim));
  for (std::size_t s = 0; s < config.streams.size(); ++s) {
    const auto &spec = config.streams[s];
    const std::size_t projection_id = config.shared_projection ? 0 : s;
    auto proj_rng = make_rng(config.seed, 1000 + projection_id);
    Normal normal;
    Eigen::MatrixXd projection(latent_dim, spec.dims);
    for (int j = 0; j < latent_dim; ++j) {
      for (int k = 0; k < spec.dims; ++k) {
        projection(j, k) = projection_scale * normal(proj_rng);
      }
    }
    auto noise_rng = make_rng(config.seed, 2000 + s);
    Normal noise_normal;
    const auto emit = [&](const Eigen::MatrixXd &z) {
      FeatureMatrix x = z * projection;
      for (Eigen::Index i = 0; i < x.rows(); ++i) {
        for (Eigen::Index k = 0; k < x.cols(); ++k) {
          x(i, k) += spec.noise * noise_normal(noise_rng);
        }
      }
      return x;
    };
    SynthStream stream;
    stream.name = spec.name;
    stream.train = emit(z_train);
    stream.test = emit(z_test);
    data.streams.push_back(std::move(stream));
  }
  return data;
}

} // namespace pillar
