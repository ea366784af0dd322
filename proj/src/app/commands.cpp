#include "commands.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pillar/error.hpp"
#include "pillar/poe.hpp"
#include "pillar/serialize.hpp"

namespace pillar::app {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

class Stopwatch {
public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         start_)
        .count();
  }

private:
  std::chrono::steady_clock::time_point start_ =
      std::chrono::steady_clock::now();
};

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error("cannot open " + path.string() + " for writing");
  }
  out << text;
  if (!out) {
    throw Error("failed writing " + path.string());
  }
}

json read_json(const fs::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw Error("cannot open " + path.string());
  }
  try {
    return json::parse(in);
  } catch (const json::exception &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

[[noreturn]] void rethrow_with_context(const std::string &context) {
  try {
    throw;
  } catch (const ConfigError &e) {
    throw ConfigError(context + ": " + e.what());
  } catch (const std::exception &e) {
    throw Error(context + ": " + e.what());
  }
}

json confusion_json(const Eigen::MatrixXi &m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      row.push_back(m(i, j));
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_accuracy(double accuracy) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << accuracy;
  return s.str();
}

json kernel_json(const KernelSpec<double> &spec) {
  return json{{"signal_variance", spec.signal_variance},
              {"length_scale", spec.length_scale},
              {"jitter", spec.jitter}};
}

fs::path models_dir(const fs::path &out_dir) { return out_dir / "models"; }

fs::path stream_dir(const fs::path &out_dir, const std::string &stream) {
  return models_dir(out_dir) / stream;
}

fs::path expert_path(const fs::path &out_dir, const std::string &stream,
                     std::size_t k) {
  return stream_dir(out_dir, stream) / ("expert_" + std::to_string(k) + ".pgpm");
}

Eigen::VectorXd vector_from_json(const json &j) {
  const auto values = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(values.data(),
                                           static_cast<Eigen::Index>(values.size()));
}

std::vector<double> vector_to_std(const Eigen::VectorXd &v) {
  return {v.data(), v.data() + v.size()};
}

struct StreamManifest {
  std::string name;
  int num_classes = 0;
  std::size_t num_experts = 0;
  Eigen::Index dims = 0;
  NormalizationStats normalization;
  json summary;
};

StreamManifest load_manifest(const fs::path &out_dir, const std::string &name) {
  const auto path = stream_dir(out_dir, name) / "stream.json";
  if (!fs::exists(path)) {
    throw Error("no trained models for stream '" + name + "' (missing " +
                path.string() + ")");
  }
  const json j = read_json(path);
  try {
    StreamManifest m;
    m.name = j.at("stream").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.num_experts = j.at("num_experts").get<std::size_t>();
    m.dims = j.at("dims").get<Eigen::Index>();
    m.normalization.mean = vector_from_json(j.at("normalization").at("mean"));
    m.normalization.stddev =
        vector_from_json(j.at("normalization").at("stddev"));
    m.summary = json{{"stream", m.name},
                     {"kernel", j.at("kernel")},
                     {"objective", j.at("objective")}};
    return m;
  } catch (const json::exception &e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const StreamFiles &find_stream(const RunConfig &cfg, const std::string &name) {
  for (const auto &s : cfg.streams) {
    if (s.name == name) {
      return s;
    }
  }
  throw ConfigError("stream '" + name + "' is not listed in the config");
}

void write_posterior_csv(const fs::path &path, const Matrix<double> &p) {
  std::string text = "index";
  for (Eigen::Index c = 0; c < p.cols(); ++c) {
    text += ",p" + std::to_string(c);
  }
  text += '\n';
  char buf[64];
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    text += std::to_string(i);
    for (Eigen::Index c = 0; c < p.cols(); ++c) {
      std::snprintf(buf, sizeof(buf), ",%.17g", p(i, c));
      text += buf;
    }
    text += '\n';
  }
  write_text(path, text);
}

std::size_t count_leaves(const FusionNode &node) {
  if (node.is_leaf()) {
    return 1;
  }
  std::size_t n = 0;
  for (const auto &child : node.children) {
    n += count_leaves(child);
  }
  return n;
}

} // namespace

void cmd_synth(const RunConfig &cfg, const RunOptions &opts, std::ostream &out) {
  if (!cfg.synth) {
    throw ConfigError("config has no \"synth\" section");
  }
  const SynthData data = synth_streams(*cfg.synth);
  fs::create_directories(opts.out_dir);

  json files = json::array();
  for (const auto &stream : data.streams) {
    const auto train = stream.name + "_train.pnf";
    const auto test = stream.name + "_test.pnf";
    save_features(opts.out_dir / train, stream.train);
    save_features(opts.out_dir / test, stream.test);
    files.push_back(json{{"stream", stream.name},
                         {"train_features", train},
                         {"test_features", test},
                         {"dims", stream.train.cols()}});
  }
  save_labels(opts.out_dir / "train_labels.csv", data.train_labels);
  save_labels(opts.out_dir / "test_labels.csv", data.test_labels);

  const json manifest{{"num_classes", cfg.synth->num_classes},
                      {"num_train", data.train_labels.size()},
                      {"num_test", data.test_labels.size()},
                      {"train_labels", "train_labels.csv"},
                      {"test_labels", "test_labels.csv"},
                      {"streams", files}};
  out << manifest.dump(2) << '\n';
}

void cmd_train(const RunConfig &cfg, const RunOptions &opts, std::ostream &out) {
  if (cfg.streams.empty()) {
    throw ConfigError("config lists no streams to train");
  }
  const Stopwatch total;
  const auto models = models_dir(opts.out_dir);
  fs::create_directories(opts.out_dir);
  fs::remove_all(models);
  fs::remove(opts.out_dir / "train_report.json");

  json report{{"library_version", PILLAR_VERSION},
              {"config_hash", cfg.hash},
              {"partition",
               {{"num_subsets", cfg.num_subsets}, {"per_class", cfg.per_class}}},
              {"streams", json::array()}};
  json timings{{"streams", json::array()}};

  try {
    for (const auto &stream : cfg.streams) {
      const Stopwatch clock;
      try {
        const FeatureMatrix x = load_features(stream.train_features);
        const LabelVector y = load_labels(stream.train_labels, cfg.num_classes);
        check_paired(x, y);
        const NormalizationStats stats = fit_normalization(x);
        const FeatureMatrix xn = quantize_float32(apply_normalization(x, stats));
        const Partition partition = partition_dataset(
            y, cfg.num_subsets, cfg.per_class, cfg.partition_seed());

        const auto search = fit_hyperparameters(
            xn, y, std::span<const std::vector<std::size_t>>(partition.subsets),
            cfg.grid, opts.jobs);
        const double search_seconds = clock.seconds();
        const auto collection =
            train_collection(xn, y, partition, search.best, stream.name, opts.jobs);

        fs::create_directories(stream_dir(opts.out_dir, stream.name));
        json experts = json::array();
        for (std::size_t k = 0; k < collection.experts.size(); ++k) {
          const auto &expert = collection.experts[k];
          save_expert(expert_path(opts.out_dir, stream.name, k), expert);
          experts.push_back(json{{"expert", k},
                                 {"num_train", expert.num_train()},
                                 {"jitter", expert.spec.jitter},
                                 {"log_marginal", expert.log_marginal}});
        }
        const json manifest{
            {"stream", stream.name},
            {"num_classes", y.num_classes},
            {"num_experts", collection.experts.size()},
            {"dims", x.cols()},
            {"kernel", kernel_json(search.best)},
            {"objective", search.objective},
            {"normalization",
             {{"mean", vector_to_std(stats.mean)},
              {"stddev", vector_to_std(stats.stddev)}}}};
        write_text(stream_dir(opts.out_dir, stream.name) / "stream.json",
                   manifest.dump(2) + "\n");
        report["streams"].push_back(json{{"stream", stream.name},
                                         {"num_classes", y.num_classes},
                                         {"kernel", kernel_json(search.best)},
                                         {"objective", search.objective},
                                         {"experts", experts}});
        timings["streams"].push_back(json{{"stream", stream.name},
                                          {"grid_search_seconds", search_seconds},
                                          {"total_seconds", clock.seconds()}});
        out << "trained " << collection.experts.size() << " experts for stream "
            << stream.name << " (length_scale " << search.best.length_scale
            << ", signal_variance " << search.best.signal_variance << ")\n";
      } catch (...) {
        rethrow_with_context("stream '" + stream.name + "'");
      }
    }
    write_text(opts.out_dir / "train_report.json", report.dump(2) + "\n");
    timings["total_seconds"] = total.seconds();
    write_text(opts.out_dir / "train_timings.json", timings.dump(2) + "\n");
  } catch (...) {
    std::error_code ec;
    fs::remove_all(models, ec);
    fs::remove(opts.out_dir / "train_report.json", ec);
    throw;
  }
}

void cmd_predict(const RunConfig &cfg, const RunOptions &opts,
                 std::ostream &out) {
  const Stopwatch total;

  FusionTree tree;
  if (opts.tree) {
    tree = load_fusion_tree(*opts.tree);
  } else if (cfg.fusion_tree) {
    tree = load_fusion_tree(*cfg.fusion_tree);
  } else {
    if (cfg.streams.empty()) {
      throw ConfigError("no fusion tree given and config lists no streams");
    }
    std::vector<std::string> names;
    std::size_t experts = 0;
    for (const auto &s : cfg.streams) {
      names.push_back(s.name);
      experts = load_manifest(opts.out_dir, s.name).num_experts;
    }
    tree = flat_stream_tree(names, experts);
  }
  validate(tree);
  const auto tree_leaves = leaves(tree);

  std::vector<std::string> streams;
  for (const auto &leaf : tree_leaves) {
    if (std::find(streams.begin(), streams.end(), leaf.stream) == streams.end()) {
      streams.push_back(leaf.stream);
    }
  }

  std::map<std::string, StreamManifest> manifests;
  std::map<std::string, std::size_t> expert_counts;
  for (const auto &name : streams) {
    find_stream(cfg, name);
    auto m = load_manifest(opts.out_dir, name);
    expert_counts[name] = m.num_experts;
    manifests.emplace(name, std::move(m));
  }
  check_resolvable(tree, expert_counts);

  // Test features per stream, normalized with the training statistics.
  std::map<std::string, FeatureMatrix> test_features;
  std::optional<LabelVector> truth;
  for (const auto &name : streams) {
    const auto &files = find_stream(cfg, name);
    const auto &manifest = manifests.at(name);
    const FeatureMatrix x = load_features(files.test_features);
    LabelVector y = load_labels(files.test_labels,
                                cfg.num_classes.value_or(manifest.num_classes));
    check_paired(x, y);
    if (x.cols() != manifest.dims) {
      throw DimensionError("stream '" + name + "': test features have " +
                           std::to_string(x.cols()) + " dims, models expect " +
                           std::to_string(manifest.dims));
    }
    if (truth) {
      if (y.num_classes != truth->num_classes) {
        throw Error("inconsistent number of classes across streams");
      }
      if (y.labels != truth->labels) {
        throw Error("stream '" + name + "' has different test labels");
      }
    } else {
      truth = std::move(y);
    }
    if (manifest.num_classes != truth->num_classes) {
      throw Error("stream '" + name + "' was trained with " +
                  std::to_string(manifest.num_classes) + " classes, test set has " +
                  std::to_string(truth->num_classes));
    }
    test_features.emplace(
        name, quantize_float32(apply_normalization(x, manifest.normalization)));
  }

  const std::uint64_t seed = cfg.predictive_seed();
  const int samples = cfg.num_samples;

  // Leaf predictions, one slot per leaf.
  const Stopwatch leaf_clock;
  std::vector<LatentPrediction<double>> leaf_preds(tree_leaves.size());
  std::vector<Classification<double>> leaf_classes(tree_leaves.size());
  std::vector<std::size_t> leaf_train(tree_leaves.size());
  parallel_for(tree_leaves.size(), opts.jobs, [&](std::size_t i) {
    const auto &leaf = tree_leaves[i];
    const auto model =
        load_expert(expert_path(opts.out_dir, leaf.stream, leaf.expert));
    if (model.num_classes() != truth->num_classes) {
      throw Error("expert " + to_string(leaf) + " has inconsistent class count");
    }
    leaf_train[i] = static_cast<std::size_t>(model.num_train());
    leaf_preds[i] = latent_predict(model, test_features.at(leaf.stream));
    leaf_classes[i] = classify(leaf_preds[i], samples, seed);
  });
  const double leaf_seconds = leaf_clock.seconds();

  json report{{"library_version", PILLAR_VERSION},
              {"config_hash", cfg.hash},
              {"num_classes", truth->num_classes},
              {"num_test_points", truth->size()},
              {"predictive", {{"num_samples", samples}}},
              {"hyperparameters", json::array()},
              {"experts", json::array()},
              {"nodes", json::array()}};
  for (const auto &name : streams) {
    report["hyperparameters"].push_back(manifests.at(name).summary);
  }

  LeafPredictions<double> leaf_map;
  for (std::size_t i = 0; i < tree_leaves.size(); ++i) {
    const auto eval = evaluate(leaf_classes[i].labels, *truth);
    report["experts"].push_back(json{{"stream", tree_leaves[i].stream},
                                     {"expert", tree_leaves[i].expert},
                                     {"num_train", leaf_train[i]},
                                     {"accuracy", eval.accuracy},
                                     {"confusion", confusion_json(eval.confusion)}});
    leaf_map.emplace(tree_leaves[i], leaf_preds[i]);
  }

  const Stopwatch fuse_clock;
  struct NodeResult {
    std::string label;
    std::size_t num_leaves;
    FusedPrediction<double> fused;
  };
  std::vector<NodeResult> node_results;
  hierarchical_fuse<double>(
      tree, leaf_map,
      [&](const FusionNode &node, const FusedPrediction<double> &fused) {
        node_results.push_back({node.label, count_leaves(node), fused});
      });
  std::vector<Classification<double>> node_classes(node_results.size());
  parallel_for(node_results.size(), opts.jobs, [&](std::size_t i) {
    node_classes[i] = classify(node_results[i].fused, samples, seed);
  });
  for (std::size_t i = 0; i < node_results.size(); ++i) {
    const auto eval = evaluate(node_classes[i].labels, *truth);
    report["nodes"].push_back(json{{"label", node_results[i].label},
                                   {"num_leaves", node_results[i].num_leaves},
                                   {"accuracy", eval.accuracy},
                                   {"confusion", confusion_json(eval.confusion)}});
    out << node_results[i].label << ": accuracy "
        << format_accuracy(eval.accuracy) << "\n";
  }
  const double fuse_seconds = fuse_clock.seconds();

  // Post-order visiting puts the root last.
  const bool root_is_leaf = tree.root.is_leaf();
  const Classification<double> &root_class =
      root_is_leaf ? leaf_classes.front() : node_classes.back();
  const std::string root_label =
      root_is_leaf ? to_string(*tree.root.leaf) : tree.root.label;
  const auto root_eval = evaluate(root_class.labels, *truth);
  report["root"] = json{{"label", root_label},
                        {"accuracy", root_eval.accuracy},
                        {"confusion", confusion_json(root_eval.confusion)}};
  out << "root " << root_label << ": accuracy "
      << format_accuracy(root_eval.accuracy) << "\n";

  fs::create_directories(opts.out_dir);
  write_text(opts.out_dir / "report.json", report.dump(2) + "\n");
  write_posterior_csv(opts.out_dir / "posterior.csv", root_class.posterior);
  const json timings{{"leaf_prediction_seconds", leaf_seconds},
                     {"fusion_seconds", fuse_seconds},
                     {"total_seconds", total.seconds()}};
  write_text(opts.out_dir / "predict_timings.json", timings.dump(2) + "\n");
}

void cmd_evaluate(const fs::path &predictions, const fs::path &labels,
                  std::optional<int> num_classes,
                  const std::optional<fs::path> &out_dir, std::ostream &out) {
  std::ifstream in(predictions);
  if (!in) {
    throw Error("cannot open " + predictions.string());
  }
  std::vector<int> predicted;
  std::string line;
  std::size_t line_no = 0;
  bool posterior_format = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (line.find_first_not_of(" \t") == std::string::npos) {
      continue;
    }
    if (line_no == 1 && line.rfind("index", 0) == 0) {
      posterior_format = true;
      continue;
    }
    std::istringstream fields(line);
    std::string token;
    std::vector<std::string> tokens;
    while (std::getline(fields, token, ',')) {
      tokens.push_back(token);
    }
    try {
      std::size_t used = 0;
      if (posterior_format) {
        if (tokens.size() < 2) {
          throw std::invalid_argument("no probability columns");
        }
        int best = 0;
        double best_p = -1.0;
        for (std::size_t c = 1; c < tokens.size(); ++c) {
          const double p = std::stod(tokens[c], &used);
          if (used != tokens[c].size()) {
            throw std::invalid_argument("trailing characters");
          }
          if (p > best_p) {
            best_p = p;
            best = static_cast<int>(c - 1);
          }
        }
        predicted.push_back(best);
      } else {
        if (tokens.size() != 1) {
          throw std::invalid_argument("expected one label per line");
        }
        const int v = std::stoi(tokens[0], &used);
        if (used != tokens[0].size() || v < 0) {
          throw std::invalid_argument("not a non-negative integer");
        }
        predicted.push_back(v);
      }
    } catch (const std::exception &) {
      throw FormatError(predictions.string() + ": unparseable row on line " +
                        std::to_string(line_no));
    }
  }
  if (predicted.empty()) {
    throw FormatError(predictions.string() + ": no predictions");
  }

  LabelVector truth = load_labels(labels, num_classes);
  if (!num_classes) {
    const int max_pred = *std::max_element(predicted.begin(), predicted.end());
    truth.num_classes = std::max(truth.num_classes, max_pred + 1);
  }
  if (predicted.size() != truth.size()) {
    throw Error("length mismatch: " + std::to_string(predicted.size()) +
                " predictions vs " + std::to_string(truth.size()) + " labels");
  }
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] >= truth.num_classes) {
      throw FormatError(predictions.string() + ": predicted class " +
                        std::to_string(predicted[i]) + " out of range");
    }
  }
  const auto eval = evaluate(predicted, truth);
  out << "accuracy: " << format_accuracy(eval.accuracy) << "\n";
  const json result{{"accuracy", eval.accuracy},
                    {"num_samples", truth.size()},
                    {"confusion", confusion_json(eval.confusion)}};
  if (out_dir) {
    fs::create_directories(*out_dir);
    write_text(*out_dir / "evaluation.json", result.dump(2) + "\n");
  } else {
    out << result.dump(2) << "\n";
  }
}

} // namespace pillar::app
