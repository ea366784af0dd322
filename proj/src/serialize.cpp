#include "pillar/serialize.hpp"

#include <algorithm>
#include <bit>
#include <fstream>
#include <map>
#include <sstream>

namespace pillar {

namespace {

class Writer {
public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
    }
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view b) { out_.append(b); }

  void section(std::string_view tag, const Writer &payload) {
    bytes(tag);
    u64(payload.out_.size());
    bytes(payload.out_);
  }

  std::string take() { return std::move(out_); }

private:
  std::string out_;
};

class Reader {
public:
  Reader(std::string_view data, std::string where, std::size_t base)
      : data_(data), where_(std::move(where)), base_(base) {}

  std::uint64_t uint(int width) {
    need(static_cast<std::size_t>(width));
    std::uint64_t v = 0;
    for (int i = width - 1; i >= 0; --i) {
      v = (v << 8) | static_cast<unsigned char>(data_[pos_ + i]);
    }
    pos_ += static_cast<std::size_t>(width);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  std::uint64_t u64() { return uint(8); }
  double f64() { return std::bit_cast<double>(u64()); }
  // Reads a count of items that each take `item_bytes`, rejecting counts
  // larger than the remaining payload could hold.
  std::size_t count(int width, std::size_t item_bytes) {
    const std::size_t at = base_ + pos_;
    const std::uint64_t n = uint(width);
    if (n > (data_.size() - pos_) / item_bytes) {
      throw FormatError(where_ + ": count " + std::to_string(n) +
                        " at byte offset " + std::to_string(at) +
                        " exceeds the section size");
    }
    return static_cast<std::size_t>(n);
  }
  std::string_view rest() {
    auto r = data_.substr(pos_);
    pos_ = data_.size();
    return r;
  }
  void expect_end() const {
    if (pos_ != data_.size()) {
      throw FormatError(where_ + ": trailing bytes at byte offset " +
                        std::to_string(base_ + pos_));
    }
  }

private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) {
      throw FormatError(where_ + ": truncated at byte offset " +
                        std::to_string(base_ + pos_));
    }
  }

  std::string_view data_;
  std::string where_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

Writer encode_latent(const Matrix<double> &m) {
  Writer w;
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      w.f64(m(i, c));
    }
  }
  return w;
}

Matrix<double> decode_latent(Reader r) {
  const std::uint64_t rows = r.u32();
  const std::uint64_t cols = r.count(4, 8 * std::max<std::uint64_t>(rows, 1));
  Matrix<double> m(rows, cols);
  for (std::uint64_t i = 0; i < rows; ++i) {
    for (std::uint64_t c = 0; c < cols; ++c) {
      m(i, c) = r.f64();
    }
  }
  r.expect_end();
  return m;
}

} // namespace

std::string encode_expert(const ExpertModel<double> &model) {
  const FeatureMatrix features = model.features;
  if (!is_float32_exact(features)) {
    throw FormatError("encode_expert: training features are not float32 "
                      "representable (quantize them before training)");
  }
  Writer out;
  out.bytes("PGPM");
  out.u8(kModelFormatVersion);

  Writer kspec;
  kspec.f64(model.spec.signal_variance);
  kspec.f64(model.spec.length_scale);
  kspec.f64(model.spec.jitter);
  out.section("KSPC", kspec);

  Writer idx;
  idx.u64(model.indices.size());
  for (auto i : model.indices) {
    idx.u64(i);
  }
  out.section("INDX", idx);

  Writer xsub;
  xsub.bytes(encode_pnf1(features));
  out.section("XSUB", xsub);

  Writer ysub;
  ysub.u32(static_cast<std::uint32_t>(model.labels.num_classes));
  ysub.u32(static_cast<std::uint32_t>(model.labels.size()));
  for (int label : model.labels.labels) {
    ysub.u32(static_cast<std::uint32_t>(label));
  }
  out.section("YSUB", ysub);

  out.section("MODE", encode_latent(model.mode));
  out.section("GRAD", encode_latent(model.grad_at_mode));

  Writer lml;
  lml.f64(model.log_marginal);
  out.section("LMLV", lml);
  return out.take();
}

ExpertModel<double> decode_expert(std::string_view bytes,
                                  std::string_view source) {
  const std::string where = source.empty() ? "<memory>" : std::string(source);
  if (bytes.size() < 5 || bytes.substr(0, 4) != "PGPM") {
    throw FormatError(where + ": bad magic at byte offset 0 (expected PGPM)");
  }
  const auto version = static_cast<std::uint8_t>(bytes[4]);
  if (version != kModelFormatVersion) {
    throw FormatError(where + ": unsupported model version " +
                      std::to_string(version) + " at byte offset 4");
  }

  struct Section {
    std::string_view payload;
    std::size_t offset;
  };
  std::map<std::string, Section, std::less<>> sections;
  std::size_t pos = 5;
  while (pos < bytes.size()) {
    if (bytes.size() - pos < 12) {
      throw FormatError(where + ": truncated section header at byte offset " +
                        std::to_string(pos));
    }
    const std::string tag(bytes.substr(pos, 4));
    Reader header(bytes.substr(pos + 4, 8), where, pos + 4);
    const std::uint64_t length = header.u64();
    const std::size_t payload_at = pos + 12;
    if (length > bytes.size() - payload_at) {
      throw FormatError(where + ": section " + tag + " at byte offset " +
                        std::to_string(pos) + " overruns the data");
    }
    if (sections.count(tag)) {
      throw FormatError(where + ": duplicate section " + tag +
                        " at byte offset " + std::to_string(pos));
    }
    sections[tag] = {bytes.substr(payload_at, length), payload_at};
    pos = payload_at + length;
  }

  const auto reader = [&](std::string_view tag) {
    const auto it = sections.find(tag);
    if (it == sections.end()) {
      throw FormatError(where + ": missing section " + std::string(tag));
    }
    return Reader(it->second.payload, where, it->second.offset);
  };

  Reader kspec = reader("KSPC");
  KernelSpec<double> spec;
  spec.signal_variance = kspec.f64();
  spec.length_scale = kspec.f64();
  spec.jitter = kspec.f64();
  kspec.expect_end();
  try {
    validate(spec);
  } catch (const ConfigError &e) {
    throw FormatError(where + ": " + e.what());
  }

  Reader idx = reader("INDX");
  std::vector<std::size_t> indices(idx.count(8, 8));
  for (auto &i : indices) {
    i = idx.u64();
  }
  idx.expect_end();

  Reader xsub = reader("XSUB");
  const FeatureMatrix features =
      decode_pnf1(xsub.rest(), where + " (XSUB section)");

  Reader ysub = reader("YSUB");
  LabelVector labels;
  labels.num_classes = static_cast<int>(ysub.u32());
  labels.labels.resize(ysub.count(4, 4));
  for (auto &label : labels.labels) {
    label = static_cast<int>(ysub.u32());
  }
  ysub.expect_end();
  try {
    validate_labels(labels);
  } catch (const FormatError &e) {
    throw FormatError(where + ": " + e.what());
  }

  Matrix<double> mode = decode_latent(reader("MODE"));
  Matrix<double> grad = decode_latent(reader("GRAD"));
  Reader lml = reader("LMLV");
  const double log_marginal = lml.f64();
  lml.expect_end();

  return restore_expert<double>(std::move(indices), features, std::move(labels),
                                spec, std::move(mode), std::move(grad),
                                log_marginal);
}

void save_expert(const std::filesystem::path &path,
                 const ExpertModel<double> &model) {
  const auto bytes = encode_expert(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) {
    throw Error("failed writing " + path.string());
  }
}

ExpertModel<double> load_expert(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open " + path.string());
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_expert(buffer.str(), path.string());
}

} // namespace pillar
