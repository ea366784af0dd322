#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "pillar/error.hpp"
#include "pillar/random.hpp"

namespace pillar::app {

namespace {

using nlohmann::json;

void check_keys(const json &obj, const std::string &where,
                const std::set<std::string> &allowed) {
  if (!obj.is_object()) {
    throw ConfigError(where + " must be a JSON object");
  }
  for (const auto &item : obj.items()) {
    if (!allowed.count(item.key())) {
      throw ConfigError(where + ": unknown key \"" + item.key() + "\"");
    }
  }
}

template <typename T>
T get(const json &obj, const std::string &key, const std::string &where) {
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception &e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

template <typename T>
T get_or(const json &obj, const std::string &key, const std::string &where,
         T fallback) {
  return obj.contains(key) ? get<T>(obj, key, where) : fallback;
}

long long get_int(const json &obj, const std::string &key,
                  const std::string &where, long long min_value) {
  if (!obj.at(key).is_number_integer()) {
    throw ConfigError(where + "." + key + " must be an integer");
  }
  const auto v = obj.at(key).get<long long>();
  if (v < min_value) {
    throw ConfigError(where + "." + key + " must be at least " +
                      std::to_string(min_value) + ", got " + std::to_string(v));
  }
  return v;
}

std::filesystem::path resolve(const std::filesystem::path &base,
                              const std::string &p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

SynthConfig parse_synth(const json &j) {
  const std::string where = "synth";
  check_keys(j, where,
             {"num_classes", "per_class_train", "per_class_test", "latent_dim",
              "separation", "latent_spread", "shared_projection", "streams"});
  SynthConfig s;
  s.num_classes = static_cast<int>(get_int(j, "num_classes", where, 2));
  s.per_class_train = static_cast<int>(get_int(j, "per_class_train", where, 1));
  s.per_class_test = static_cast<int>(get_int(j, "per_class_test", where, 1));
  if (j.contains("latent_dim")) {
    s.latent_dim = static_cast<int>(get_int(j, "latent_dim", where, 1));
  }
  s.separation = get_or<double>(j, "separation", where, s.separation);
  s.latent_spread = get_or<double>(j, "latent_spread", where, s.latent_spread);
  s.shared_projection =
      get_or<bool>(j, "shared_projection", where, s.shared_projection);
  if (!j.contains("streams") || !j["streams"].is_array()) {
    throw ConfigError("synth.streams must be an array");
  }
  for (std::size_t i = 0; i < j["streams"].size(); ++i) {
    const auto &sj = j["streams"][i];
    const std::string sw = "synth.streams[" + std::to_string(i) + "]";
    check_keys(sj, sw, {"name", "dims", "noise"});
    SynthStreamSpec spec;
    spec.name = get<std::string>(sj, "name", sw);
    spec.dims = static_cast<int>(get_int(sj, "dims", sw, 1));
    spec.noise = get<double>(sj, "noise", sw);
    s.streams.push_back(std::move(spec));
  }
  validate_synth_config(s);
  return s;
}

} // namespace

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

std::uint64_t RunConfig::synth_seed() const { return derive_seed(seed, 1); }
std::uint64_t RunConfig::partition_seed() const { return derive_seed(seed, 2); }
std::uint64_t RunConfig::predictive_seed() const { return derive_seed(seed, 3); }

RunConfig parse_config(const json &input, const std::filesystem::path &base_dir,
                       std::optional<std::uint64_t> seed_override) {
  json doc = input;
  check_keys(doc, "config",
             {"seed", "num_classes", "data_dir", "synth", "streams",
              "partition", "kernel_grid", "predictive", "fusion_tree",
              "output_dir"});
  if (seed_override) {
    doc["seed"] = *seed_override;
  }

  RunConfig cfg;
  if (doc.contains("seed")) {
    if (!doc["seed"].is_number_unsigned()) {
      throw ConfigError("config.seed must be a non-negative integer");
    }
    cfg.seed = doc["seed"].get<std::uint64_t>();
  }
  if (doc.contains("num_classes")) {
    cfg.num_classes = static_cast<int>(get_int(doc, "num_classes", "config", 2));
  }
  if (doc.contains("synth")) {
    cfg.synth = parse_synth(doc["synth"]);
    cfg.synth->seed = cfg.synth_seed();
  }

  cfg.data_dir =
      resolve(base_dir, get_or<std::string>(doc, "data_dir", "config", "."));
  const auto &data_dir = cfg.data_dir;
  const auto default_stream = [&](const std::string &name) {
    return StreamFiles{name, data_dir / (name + "_train.pnf"),
                       data_dir / "train_labels.csv",
                       data_dir / (name + "_test.pnf"),
                       data_dir / "test_labels.csv"};
  };
  if (doc.contains("streams")) {
    if (!doc["streams"].is_array() || doc["streams"].empty()) {
      throw ConfigError("config.streams must be a non-empty array");
    }
    std::set<std::string> names;
    for (std::size_t i = 0; i < doc["streams"].size(); ++i) {
      const auto &sj = doc["streams"][i];
      const std::string sw = "config.streams[" + std::to_string(i) + "]";
      check_keys(sj, sw,
                 {"name", "train_features", "train_labels", "test_features",
                  "test_labels"});
      auto files = default_stream(get<std::string>(sj, "name", sw));
      if (files.name.empty() || !names.insert(files.name).second) {
        throw ConfigError(sw + ": stream names must be non-empty and unique");
      }
      const auto path_or = [&](const char *key, std::filesystem::path p) {
        return sj.contains(key) ? resolve(base_dir, get<std::string>(sj, key, sw))
                                : p;
      };
      files.train_features = path_or("train_features", files.train_features);
      files.train_labels = path_or("train_labels", files.train_labels);
      files.test_features = path_or("test_features", files.test_features);
      files.test_labels = path_or("test_labels", files.test_labels);
      if (files.train_features == files.test_features) {
        throw ConfigError(sw + ": train and test features must differ");
      }
      cfg.streams.push_back(std::move(files));
    }
  } else if (cfg.synth) {
    for (const auto &s : cfg.synth->streams) {
      cfg.streams.push_back(default_stream(s.name));
    }
  }

  if (doc.contains("partition")) {
    const auto &pj = doc["partition"];
    check_keys(pj, "partition", {"num_subsets", "per_class"});
    if (pj.contains("num_subsets")) {
      cfg.num_subsets =
          static_cast<std::size_t>(get_int(pj, "num_subsets", "partition", 1));
    }
    if (pj.contains("per_class")) {
      cfg.per_class =
          static_cast<std::size_t>(get_int(pj, "per_class", "partition", 1));
    }
  }
  if (doc.contains("kernel_grid")) {
    const auto &gj = doc["kernel_grid"];
    check_keys(gj, "kernel_grid", {"log2_length_scale", "log2_signal_variance"});
    if (gj.contains("log2_length_scale")) {
      cfg.grid.log2_length_scale =
          get<std::vector<double>>(gj, "log2_length_scale", "kernel_grid");
    }
    if (gj.contains("log2_signal_variance")) {
      cfg.grid.log2_signal_variance =
          get<std::vector<double>>(gj, "log2_signal_variance", "kernel_grid");
    }
    if (cfg.grid.log2_length_scale.empty() ||
        cfg.grid.log2_signal_variance.empty()) {
      throw ConfigError("kernel_grid: grid axes must be non-empty");
    }
  }
  if (doc.contains("predictive")) {
    const auto &pj = doc["predictive"];
    check_keys(pj, "predictive", {"num_samples"});
    if (pj.contains("num_samples")) {
      cfg.num_samples =
          static_cast<int>(get_int(pj, "num_samples", "predictive", 1));
    }
  }
  if (doc.contains("fusion_tree")) {
    cfg.fusion_tree =
        resolve(base_dir, get<std::string>(doc, "fusion_tree", "config"));
  }
  if (doc.contains("output_dir")) {
    cfg.output_dir =
        resolve(base_dir, get<std::string>(doc, "output_dir", "config"));
  } else {
    cfg.output_dir = base_dir;
  }
  cfg.hash = fnv1a_hex(doc.dump());
  return cfg;
}

RunConfig load_config(const std::filesystem::path &path,
                      std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config " + path.string());
  }
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error &e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  auto base = path.parent_path();
  if (base.empty()) {
    base = ".";
  }
  try {
    return parse_config(doc, base, seed_override);
  } catch (const ConfigError &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

} // namespace pillar::app
