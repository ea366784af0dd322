#include <doctest.h>

#include <algorithm>
#include <random>

#include "pillar/poe.hpp"
#include "pillar/serialize.hpp"
#include "oracles.hpp"

using namespace pillar;

namespace {

using Eigen::MatrixXd;
using Moments = LatentMoments<double>;

const std::vector<std::string> kStreams{"Inception-RGB", "Inception-Flow",
                                        "ResNet-RGB", "ResNet-Flow"};

LeafPredictions<double> random_leaves(std::mt19937_64 &rng,
                                      const std::vector<std::string> &streams,
                                      std::size_t experts, int points,
                                      int classes) {
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> var(0.05, 3.0);
  LeafPredictions<double> out;
  for (const auto &s : streams) {
    for (std::size_t k = 0; k < experts; ++k) {
      LatentPredictiond p;
      p.mean.resize(points, classes);
      p.variance.resize(points, classes);
      for (Eigen::Index i = 0; i < p.mean.size(); ++i) {
        p.mean.data()[i] = normal(rng);
        p.variance.data()[i] = var(rng);
      }
      out[{s, k}] = std::move(p);
    }
  }
  return out;
}

// Flat oracle: precision sum over every leaf, computed directly.
LatentPredictiond flat_oracle(const LeafPredictions<double> &leaves) {
  const auto &first = leaves.begin()->second;
  MatrixXd precision = MatrixXd::Zero(first.size(), first.num_classes());
  MatrixXd weighted = precision;
  for (const auto &[ref, p] : leaves) {
    precision.array() += p.variance.array().inverse();
    weighted.array() += p.mean.array() / p.variance.array();
  }
  LatentPredictiond out;
  out.variance = precision.array().inverse();
  out.mean = weighted.array() / precision.array();
  return out;
}

bool close_rel(const MatrixXd &a, const MatrixXd &b, double tol) {
  return ((a - b).array().abs() <=
          tol * a.array().abs().max(b.array().abs()).max(1e-300))
      .all();
}

} // namespace

TEST_CASE("fuse_poe examples") {
  const auto single = fuse_poe({Moments{0.3, 0.7}});
  CHECK(single.mean == 0.3);
  CHECK(single.variance == 0.7);

  const auto twins = fuse_poe({Moments{1.5, 0.8}, Moments{1.5, 0.8}});
  CHECK(twins.mean == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(twins.variance == doctest::Approx(0.4).epsilon(1e-15));

  const auto pair = fuse_poe({Moments{1.0, 1.0}, Moments{3.0, 0.5}});
  CHECK(std::abs(1.0 / pair.variance - 3.0) < 1e-15);
  CHECK(std::abs(pair.mean - 7.0 / 3.0) < 1e-15);
  CHECK(std::abs(pair.variance - 1.0 / 3.0) < 1e-15);
}

TEST_CASE("fuse_poe rejects bad input") {
  CHECK_THROWS(fuse_poe(std::span<const Moments>{}));
  CHECK_THROWS(fuse_poe({Moments{0.0, 0.0}}));
  CHECK_THROWS(fuse_poe({Moments{0.0, 1.0}, Moments{0.0, -1.0}}));
}

TEST_CASE("fusing N identical experts divides the variance by N") {
  for (double v : {0.25, 0.5, 2.0, 8.0}) {
    for (int n = 1; n <= 12; ++n) {
      const std::vector<Moments> children(static_cast<std::size_t>(n),
                                          Moments{0.0, v});
      CHECK(fuse_poe(std::span<const Moments>(children)).variance == v / n);
    }
  }
}

TEST_CASE("property: fusion is permutation invariant and contracts") {
  std::mt19937_64 rng(60);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> var(0.01, 5.0);
  std::uniform_int_distribution<int> count(2, 30);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Moments> children(static_cast<std::size_t>(count(rng)));
    for (auto &c : children) {
      c = {normal(rng), var(rng)};
    }
    const auto fused = fuse_poe(std::span<const Moments>(children));
    double precision = 0.0;
    for (const auto &c : children) {
      precision += 1.0 / c.variance;
      CHECK(fused.variance < c.variance);
    }
    CHECK(std::abs(1.0 / fused.variance - precision) <= 1e-12 * precision);
    std::shuffle(children.begin(), children.end(), rng);
    const auto again = fuse_poe(std::span<const Moments>(children));
    CHECK(std::abs(again.mean - fused.mean) <=
          1e-12 * std::max(1.0, std::abs(fused.mean)));
    CHECK(std::abs(again.variance - fused.variance) <= 1e-12 * fused.variance);
  }
}

TEST_CASE("flat tree over one stream equals direct fusion") {
  std::mt19937_64 rng(61);
  const auto leaves = random_leaves(rng, {"s"}, 7, 5, 3);
  const FusionTree tree{stream_node("Fusion-1/s", "s", 7)};
  const auto fused = hierarchical_fuse(tree, leaves);
  for (Eigen::Index i = 0; i < 5; ++i) {
    for (Eigen::Index c = 0; c < 3; ++c) {
      std::vector<Moments> children;
      for (std::size_t k = 0; k < 7; ++k) {
        const auto &p = leaves.at({"s", k});
        children.push_back({p.mean(i, c), p.variance(i, c)});
      }
      const auto direct = fuse_poe(std::span<const Moments>(children));
      CHECK(fused.mean(i, c) == direct.mean);
      CHECK(fused.variance(i, c) == direct.variance);
    }
  }
}

TEST_CASE("nested four-stream topology equals flat fusion over 28 leaves") {
  std::mt19937_64 rng(62);
  const auto leaves = random_leaves(rng, kStreams, 7, 6, 4);
  const auto tree = grouped_stream_tree(
      {{"Fusion-2/RGB", {"Inception-RGB", "ResNet-RGB"}},
       {"Fusion-2/Flow", {"Inception-Flow", "ResNet-Flow"}}},
      7);
  std::vector<std::string> visited;
  const auto nested = hierarchical_fuse<double>(
      tree, leaves,
      [&](const FusionNode &node, const FusedPrediction<double> &) {
        visited.push_back(node.label);
      });
  const auto oracle = flat_oracle(leaves);
  CHECK(close_rel(nested.variance, oracle.variance, 1e-12));
  CHECK(close_rel(nested.mean, oracle.mean, 1e-12));

  const auto flat = hierarchical_fuse(flat_stream_tree(kStreams, 7), leaves);
  CHECK(close_rel(nested.mean, flat.mean, 1e-12));

  REQUIRE(visited.size() == 7);
  CHECK(std::count_if(visited.begin(), visited.end(), [](const auto &s) {
          return s.rfind("Fusion-1/", 0) == 0;
        }) == 4);
  CHECK(std::count_if(visited.begin(), visited.end(), [](const auto &s) {
          return s.rfind("Fusion-2/", 0) == 0;
        }) == 2);
  CHECK(visited.back() == "Fusion-all");
}

TEST_CASE("hierarchical_fuse reports missing and inconsistent leaves") {
  std::mt19937_64 rng(63);
  auto leaves = random_leaves(rng, {"a"}, 2, 3, 2);
  const FusionTree tree{stream_node("Fusion-1/a", "a", 3)};
  CHECK_THROWS_AS(hierarchical_fuse(tree, leaves), ConfigError);

  auto bad = random_leaves(rng, {"a"}, 3, 3, 2);
  bad.at({"a", 2}).mean = MatrixXd::Zero(4, 2);
  bad.at({"a", 2}).variance = MatrixXd::Ones(4, 2);
  CHECK_THROWS_AS(hierarchical_fuse(tree, bad), DimensionError);
}

TEST_CASE("tiny leaf variances are floored before inversion") {
  LeafPredictions<double> leaves;
  LatentPredictiond p;
  p.mean = MatrixXd::Constant(1, 2, 1.0);
  p.variance = MatrixXd::Zero(1, 2);
  leaves[{"a", 0}] = p;
  leaves[{"a", 1}] = p;
  const auto fused =
      hierarchical_fuse(FusionTree{stream_node("n", "a", 2)}, leaves);
  CHECK((fused.variance.array() == kMinLeafVariance / 2).all());
  CHECK((fused.mean.array() == 1.0).all());
}

TEST_CASE("fusion tree JSON round-trips and validates") {
  const auto tree = flat_stream_tree({"a", "b"}, 2);
  const auto text = fusion_tree_to_json(tree);
  const auto back = parse_fusion_tree(text);
  CHECK(fusion_tree_to_json(back) == text);
  CHECK(leaves(back).size() == 4);

  CHECK_THROWS_AS(parse_fusion_tree("{"), ConfigError);
  CHECK_THROWS_AS(parse_fusion_tree(R"({"label": "x", "children": []})"),
                  ConfigError);
  CHECK_THROWS_AS(
      parse_fusion_tree(
          R"({"label": "x", "children": [{"stream": "a", "expert": 0},
                                         {"stream": "a", "expert": 0}]})"),
      ConfigError);
  CHECK_THROWS_AS(parse_fusion_tree(R"({"stream": "a", "expert": -1})"),
                  ConfigError);

  const auto single = parse_fusion_tree(R"({"stream": "a", "expert": 1})");
  CHECK(single.root.is_leaf());
  CHECK_NOTHROW(check_resolvable(single, {{"a", 2}}));
  CHECK_THROWS_AS(check_resolvable(single, {{"a", 1}}), ConfigError);
  CHECK_THROWS_AS(check_resolvable(single, {{"b", 5}}), ConfigError);
}

TEST_CASE("classify picks the dominant class") {
  FusedPrediction<double> fused;
  fused.mean = MatrixXd(1, 3);
  fused.mean << 0.0, 0.0, 12.0;
  fused.variance = MatrixXd::Constant(1, 3, 0.1);
  const auto out = classify(fused, 500, 1);
  CHECK(out.labels[0] == 2);
  CHECK(out.posterior(0, 2) > 0.99);
}

TEST_CASE("exact ties go to the lowest class") {
  FusedPrediction<double> fused;
  fused.mean = MatrixXd::Constant(2, 2, 0.7);
  fused.variance = MatrixXd::Zero(2, 2);
  const auto out = classify(fused, 10, 0);
  CHECK(out.labels == std::vector<int>{0, 0});
  MatrixXd p(1, 4);
  p << 0.1, 0.4, 0.4, 0.1;
  CHECK(argmax_rows(p) == std::vector<int>{1});
}

TEST_CASE("classify agrees with a quadrature oracle") {
  std::mt19937_64 rng(64);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> var(0.1, 2.0);
  FusedPrediction<double> fused;
  fused.mean.resize(20, 3);
  fused.variance.resize(20, 3);
  for (Eigen::Index i = 0; i < fused.mean.size(); ++i) {
    fused.mean.data()[i] = 2.0 * normal(rng);
    fused.variance.data()[i] = var(rng);
  }
  const auto out = classify(fused, 4000, 2);
  const auto q = oracle::gauss_hermite(24);
  const Eigen::VectorXd &nodes = q.nodes;
  const Eigen::VectorXd &weights = q.weights;
  for (Eigen::Index i = 0; i < 20; ++i) {
    Eigen::Vector3d p = Eigen::Vector3d::Zero();
    for (int a = 0; a < 24; ++a) {
      for (int b = 0; b < 24; ++b) {
        for (int c = 0; c < 24; ++c) {
          Eigen::Vector3d f;
          f(0) = fused.mean(i, 0) + std::sqrt(fused.variance(i, 0)) * nodes(a);
          f(1) = fused.mean(i, 1) + std::sqrt(fused.variance(i, 1)) * nodes(b);
          f(2) = fused.mean(i, 2) + std::sqrt(fused.variance(i, 2)) * nodes(c);
          const Eigen::Vector3d e = (f.array() - f.maxCoeff()).exp();
          p += weights(a) * weights(b) * weights(c) * e / e.sum();
        }
      }
    }
    Eigen::Index arg = 0;
    p.maxCoeff(&arg);
    // Skip near-ties that Monte Carlo cannot resolve at this sample size.
    std::array<double, 3> sorted{p(0), p(1), p(2)};
    std::sort(sorted.begin(), sorted.end());
    if (sorted[2] - sorted[1] > 0.05) {
      CHECK(out.labels[static_cast<std::size_t>(i)] == arg);
    }
    CHECK((out.posterior.row(i).transpose() - p).cwiseAbs().maxCoeff() < 0.03);
  }
  const auto again = classify(fused, 4000, 2);
  CHECK((again.posterior.array() == out.posterior.array()).all());
}

TEST_CASE("evaluate examples") {
  const LabelVector truth{{0, 1, 2, 0, 1, 2}, 3};
  const auto perfect = evaluate(truth.labels, truth);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.confusion == Eigen::MatrixXi(Eigen::Vector3i(2, 2, 2).asDiagonal()));

  const std::vector<int> zeros(6, 0);
  const auto flat = evaluate(zeros, truth);
  CHECK(flat.accuracy == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(flat.confusion.col(0).sum() == 6);

  CHECK_THROWS_AS(evaluate(std::vector<int>{0, 1}, truth), DimensionError);
}

TEST_CASE("evaluate matches an independent recount") {
  std::mt19937_64 rng(65);
  std::uniform_int_distribution<int> pick(0, 4);
  LabelVector truth{{}, 5};
  std::vector<int> predicted;
  for (int i = 0; i < 50; ++i) {
    truth.labels.push_back(pick(rng));
    predicted.push_back(pick(rng));
  }
  const auto result = evaluate(predicted, truth);
  int correct = 0;
  std::vector<int> row_counts(5, 0);
  for (int i = 0; i < 50; ++i) {
    correct += predicted[i] == truth.labels[i] ? 1 : 0;
    ++row_counts[truth.labels[i]];
  }
  CHECK(result.accuracy == correct / 50.0);
  for (int c = 0; c < 5; ++c) {
    CHECK(result.confusion.row(c).sum() == row_counts[c]);
  }
  CHECK(result.confusion.trace() == correct);
}

TEST_CASE("train_collection gives one expert per subset") {
  SynthConfig cfg;
  cfg.num_classes = 3;
  cfg.per_class_train = 14;
  cfg.per_class_test = 1;
  cfg.latent_dim = 4;
  cfg.seed = 9;
  cfg.streams = {{"a", 5, 0.2}};
  const auto d = synth_streams(cfg);
  const FeatureMatrix x = quantize_float32(d.streams[0].train);
  const auto spec = KernelSpecd::with_default_jitter(1.0, 2.0);

  const auto part = partition_dataset(d.train_labels, 7, 2, 4);
  const auto seq = train_collection(x, d.train_labels, part, spec, "a", 1);
  const auto par = train_collection(x, d.train_labels, part, spec, "a", 4);
  REQUIRE(seq.experts.size() == 7);
  for (std::size_t k = 0; k < 7; ++k) {
    CHECK(seq.experts[k].features.rows() == 6);
    CHECK(seq.experts[k].indices == part.subsets[k]);
    CHECK(encode_expert(seq.experts[k]) == encode_expert(par.experts[k]));
  }

  Partition whole;
  whole.subsets.emplace_back(x.rows());
  std::iota(whole.subsets[0].begin(), whole.subsets[0].end(), std::size_t{0});
  const auto one = train_collection(x, d.train_labels, whole, spec);
  const auto direct = train_expert(x, d.train_labels, spec);
  CHECK(encode_expert(one.experts[0]) == encode_expert(direct));
}

TEST_CASE("train_collection tags failures with the expert index") {
  FeatureMatrix x = FeatureMatrix::Zero(4, 2);
  const LabelVector y{{0, 1, 0, 1}, 2};
  Partition p;
  p.subsets = {{0, 1}, {2, 9}};
  try {
    train_collection(x, y, p, KernelSpecd::with_default_jitter(1.0, 1.0));
    FAIL("expected an error");
  } catch (const DimensionError &e) {
    CHECK(std::string(e.what()).find("expert 1") != std::string::npos);
  }
}
