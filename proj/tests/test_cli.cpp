#include <doctest.h>

#include <json.hpp>
#include <sstream>

#include "app/config.hpp"
#include "pillar/app.hpp"
#include "pillar/poe.hpp"
#include "pillar/serialize.hpp"
#include "test_util.hpp"

using namespace pillar;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = app::run(args, out, err);
  return {code, out.str(), err.str()};
}

json small_config(int streams, int num_subsets, int per_class) {
  json s = json::array();
  const std::vector<std::string> names{"Inception-RGB", "Inception-Flow",
                                       "ResNet-RGB", "ResNet-Flow"};
  for (int i = 0; i < streams; ++i) {
    s.push_back({{"name", names[static_cast<std::size_t>(i)]},
                 {"dims", 4 + i},
                 {"noise", 0.3 + 0.1 * i}});
  }
  return {{"seed", 11},
          {"synth",
           {{"num_classes", 3},
            {"per_class_train", num_subsets * per_class},
            {"per_class_test", 4},
            {"latent_dim", 3},
            {"separation", 3.0},
            {"streams", s}}},
          {"partition", {{"num_subsets", num_subsets}, {"per_class", per_class}}},
          {"kernel_grid",
           {{"log2_length_scale", {0.0, 1.0}}, {"log2_signal_variance", {0.0}}}},
          {"predictive", {{"num_samples", 100}}},
          {"output_dir", "out"}};
}

fs::path write_config(const fs::path &dir, const json &cfg) {
  const auto path = dir / "config.json";
  write_text(path, cfg.dump(2));
  return path;
}

std::size_t count_files(const fs::path &dir, const std::string &ext) {
  std::size_t n = 0;
  for (const auto &e : fs::recursive_directory_iterator(dir)) {
    n += e.path().extension() == ext ? 1 : 0;
  }
  return n;
}

std::vector<std::vector<double>> read_posterior(const fs::path &path) {
  std::istringstream in(read_bytes(path));
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::istringstream fields(line);
    std::string tok;
    std::getline(fields, tok, ',');
    std::vector<double> row;
    while (std::getline(fields, tok, ',')) {
      row.push_back(std::stod(tok));
    }
    rows.push_back(row);
  }
  return rows;
}

} // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(cli({}).code == app::kExitUsage);
  CHECK(cli({"frobnicate"}).code == app::kExitUsage);
  CHECK(cli({"train"}).code == app::kExitUsage);
  CHECK(cli({"train", "--config", "/nonexistent/config.json"}).code ==
        app::kExitUsage);
  CHECK(cli({"--help"}).code == app::kExitOk);

  TempDir dir;
  const auto cfg = write_config(dir.path(), json{{"seed", 1}, {"bogus", 2}});
  const auto r = cli({"synth", "--config", cfg.string()});
  CHECK(r.code == app::kExitUsage);
  CHECK(r.err.find("bogus") != std::string::npos);
}

TEST_CASE("synth writes every stream and is reproducible") {
  TempDir dir;
  json cfg = small_config(4, 1, 3);
  cfg["synth"]["num_classes"] = 5;
  const auto path = write_config(dir.path(), cfg);
  const fs::path a = dir.path() / "a";
  const fs::path b = dir.path() / "b";
  const fs::path c = dir.path() / "c";
  REQUIRE(cli({"synth", "--config", path.string(), "--out", a.string()}).code == 0);
  REQUIRE(cli({"synth", "--config", path.string(), "--out", b.string()}).code == 0);
  CHECK(count_files(a, ".pnf") == 8);
  CHECK(count_files(a, ".csv") == 2);
  for (const auto &e : fs::directory_iterator(a)) {
    CHECK(read_bytes(e.path()) == read_bytes(b / e.path().filename()));
  }
  REQUIRE(cli({"synth", "--config", path.string(), "--out", c.string(), "--seed",
               "12"})
              .code == 0);
  CHECK(read_bytes(a / "ResNet-RGB_train.pnf") !=
        read_bytes(c / "ResNet-RGB_train.pnf"));

  cfg["synth"]["per_class_train"] = 0;
  const auto bad = write_config(dir.path(), cfg);
  CHECK(cli({"synth", "--config", bad.string()}).code == app::kExitUsage);
}

TEST_CASE("train produces 28 models for 4 streams of 7 experts") {
  TempDir dir;
  const auto path = write_config(dir.path(), small_config(4, 7, 2));
  REQUIRE(cli({"synth", "--config", path.string()}).code == 0);
  const auto r = cli({"train", "--config", path.string(), "--jobs", "2"});
  REQUIRE(r.code == 0);
  CHECK(count_files(dir.path() / "out" / "models", ".pgpm") == 28);
  CHECK(fs::exists(dir.path() / "out" / "train_report.json"));
  CHECK(fs::exists(dir.path() / "out" / "train_timings.json"));
  for (const auto &e : fs::recursive_directory_iterator(dir.path() / "out")) {
    if (e.path().extension() == ".pgpm") {
      CHECK(load_expert(e.path()).num_train() == 6);
    }
  }

  // Fusion-1 per stream, Fusion-2 per backbone, Fusion-all.
  const auto tree = grouped_stream_tree(
      {{"Fusion-2/RGB", {"Inception-RGB", "ResNet-RGB"}},
       {"Fusion-2/Flow", {"Inception-Flow", "ResNet-Flow"}}},
      7);
  write_text(dir.path() / "tree.json", fusion_tree_to_json(tree));
  const auto p = cli({"predict", "--config", path.string(), "--tree",
                      (dir.path() / "tree.json").string()});
  REQUIRE(p.code == 0);
  const auto report = json::parse(read_bytes(dir.path() / "out" / "report.json"));
  int fusion1 = 0;
  int fusion2 = 0;
  int all = 0;
  for (const auto &node : report["nodes"]) {
    const auto label = node["label"].get<std::string>();
    fusion1 += label.rfind("Fusion-1/", 0) == 0 ? 1 : 0;
    fusion2 += label.rfind("Fusion-2/", 0) == 0 ? 1 : 0;
    all += label == "Fusion-all" ? 1 : 0;
  }
  CHECK(report["nodes"].size() == 7);
  CHECK(fusion1 == 4);
  CHECK(fusion2 == 2);
  CHECK(all == 1);
  CHECK(report["experts"].size() == 28);

  const auto rows = read_posterior(dir.path() / "out" / "posterior.csv");
  CHECK(rows.size() == 12);
  for (const auto &row : rows) {
    REQUIRE(row.size() == 3);
    double sum = 0.0;
    for (double v : row) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      sum += v;
    }
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }

  write_text(dir.path() / "bad_tree.json",
             R"({"label": "x", "children": [{"stream": "ResNet-RGB", "expert": 7}]})");
  const auto unknown = cli({"predict", "--config", path.string(), "--tree",
                            (dir.path() / "bad_tree.json").string()});
  CHECK(unknown.code == app::kExitUsage);
  CHECK(unknown.err.find("unknown expert") != std::string::npos);
}

TEST_CASE("single-leaf tree reports that expert's own evaluation") {
  TempDir dir;
  const auto path = write_config(dir.path(), small_config(2, 3, 2));
  REQUIRE(cli({"synth", "--config", path.string()}).code == 0);
  REQUIRE(cli({"train", "--config", path.string()}).code == 0);
  write_text(dir.path() / "leaf.json", R"({"stream": "Inception-Flow", "expert": 2})");
  REQUIRE(cli({"predict", "--config", path.string(), "--tree",
               (dir.path() / "leaf.json").string()})
              .code == 0);
  const auto report = json::parse(read_bytes(dir.path() / "out" / "report.json"));
  REQUIRE(report["experts"].size() == 1);
  CHECK(report["nodes"].empty());
  CHECK(report["root"]["accuracy"] == report["experts"][0]["accuracy"]);
  CHECK(report["root"]["confusion"] == report["experts"][0]["confusion"]);
}

TEST_CASE("single expert prediction equals the direct library call") {
  TempDir dir;
  const auto path = write_config(dir.path(), small_config(1, 1, 5));
  REQUIRE(cli({"synth", "--config", path.string()}).code == 0);
  REQUIRE(cli({"train", "--config", path.string()}).code == 0);
  REQUIRE(cli({"predict", "--config", path.string()}).code == 0);

  const auto cfg = app::load_config(path, std::nullopt);
  const auto &files = cfg.streams.front();
  const FeatureMatrix train_raw = load_features(files.train_features);
  const LabelVector train_y = load_labels(files.train_labels, std::nullopt);
  const auto stats = fit_normalization(train_raw);
  const FeatureMatrix train = quantize_float32(apply_normalization(train_raw, stats));
  const FeatureMatrix test = quantize_float32(
      apply_normalization(load_features(files.test_features), stats));
  const auto part = partition_dataset(train_y, 1, 5, cfg.partition_seed());
  const auto search = fit_hyperparameters(
      train, train_y, std::span<const std::vector<std::size_t>>(part.subsets),
      cfg.grid);
  const auto model = train_expert(select_rows(train, part.subsets[0]),
                                  select_labels(train_y, part.subsets[0]),
                                  search.best, part.subsets[0]);
  const auto direct = classify(latent_predict(model, test), cfg.num_samples,
                               cfg.predictive_seed());

  const auto rows = read_posterior(dir.path() / "out" / "posterior.csv");
  REQUIRE(static_cast<Eigen::Index>(rows.size()) == direct.posterior.rows());
  for (Eigen::Index i = 0; i < direct.posterior.rows(); ++i) {
    for (Eigen::Index c = 0; c < direct.posterior.cols(); ++c) {
      CHECK(rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] ==
            direct.posterior(i, c));
    }
  }
  const auto stored =
      load_expert(dir.path() / "out" / "models" / "Inception-RGB" / "expert_0.pgpm");
  CHECK(encode_expert(stored) == encode_expert(model));
}

TEST_CASE("corrupt feature files name the file and byte offset") {
  TempDir dir;
  const auto path = write_config(dir.path(), small_config(2, 2, 2));
  REQUIRE(cli({"synth", "--config", path.string()}).code == 0);
  const auto victim = dir.path() / "Inception-Flow_train.pnf";
  const auto bytes = read_bytes(victim);
  write_text(victim, bytes.substr(0, 30));
  const auto r = cli({"train", "--config", path.string()});
  CHECK(r.code == app::kExitFailure);
  CHECK(r.err.find("Inception-Flow_train.pnf") != std::string::npos);
  CHECK(r.err.find("byte offset") != std::string::npos);
  CHECK_FALSE(fs::exists(dir.path() / "out" / "models"));
  CHECK_FALSE(fs::exists(dir.path() / "out" / "train_report.json"));
}

TEST_CASE("evaluate prints accuracy to four decimals") {
  TempDir dir;
  std::string truth;
  std::string perfect;
  std::string noisy;
  for (int i = 0; i < 100; ++i) {
    const int y = i % 4;
    truth += std::to_string(y) + "\n";
    perfect += std::to_string(y) + "\n";
    noisy += std::to_string(i % 10 == 0 ? (y + 1) % 4 : y) + "\n";
  }
  write_text(dir.path() / "truth.csv", truth);
  write_text(dir.path() / "perfect.csv", perfect);
  write_text(dir.path() / "noisy.csv", noisy);

  const auto ok = cli({"evaluate", (dir.path() / "perfect.csv").string(),
                       (dir.path() / "truth.csv").string()});
  CHECK(ok.code == 0);
  CHECK(ok.out.find("accuracy: 1.0000") != std::string::npos);

  const auto r = cli({"evaluate", (dir.path() / "noisy.csv").string(),
                      (dir.path() / "truth.csv").string(), "--out",
                      (dir.path() / "eval").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("accuracy: 0.9000") != std::string::npos);
  const auto result = json::parse(read_bytes(dir.path() / "eval" / "evaluation.json"));
  // Independent tally: rows 0, 10, ..., 90 are wrong; their true classes
  // alternate 0, 2, 0, 2, ... and each is shifted to the next class.
  int diag = 0;
  for (int c = 0; c < 4; ++c) {
    diag += result["confusion"][c][c].get<int>();
  }
  CHECK(diag == 90);
  CHECK(result["confusion"][0][1] == 5);
  CHECK(result["confusion"][2][3] == 5);

  write_text(dir.path() / "short.csv", "0\n1\n");
  CHECK(cli({"evaluate", (dir.path() / "short.csv").string(),
             (dir.path() / "truth.csv").string()})
            .code == app::kExitFailure);
  write_text(dir.path() / "junk.csv", "0\nabc\n");
  CHECK(cli({"evaluate", (dir.path() / "junk.csv").string(),
             (dir.path() / "truth.csv").string()})
            .code == app::kExitFailure);
}

TEST_CASE("outputs do not depend on --jobs") {
  std::vector<std::unique_ptr<TempDir>> dirs;
  for (const char *jobs : {"1", "3"}) {
    dirs.push_back(std::make_unique<TempDir>());
    const auto path = write_config(dirs.back()->path(), small_config(2, 3, 2));
    REQUIRE(cli({"synth", "--config", path.string(), "--jobs", jobs}).code == 0);
    REQUIRE(cli({"train", "--config", path.string(), "--jobs", jobs}).code == 0);
    REQUIRE(cli({"predict", "--config", path.string(), "--jobs", jobs}).code == 0);
  }
  const auto a = dirs[0]->path() / "out";
  const auto b = dirs[1]->path() / "out";
  for (const char *name : {"report.json", "posterior.csv", "train_report.json"}) {
    CHECK(read_bytes(a / name) == read_bytes(b / name));
  }
  for (const auto &e : fs::recursive_directory_iterator(a / "models")) {
    if (e.is_regular_file()) {
      CHECK(read_bytes(e.path()) ==
            read_bytes(b / fs::relative(e.path(), a)));
    }
  }
}
