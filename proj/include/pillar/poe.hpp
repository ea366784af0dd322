#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pillar/dataset.hpp"
#include "pillar/error.hpp"
#include "pillar/kernel.hpp"
#include "pillar/laplace.hpp"
#include "pillar/parallel.hpp"

namespace pillar {

template <typename Scalar> struct LatentMoments {
  Scalar mean{0};
  Scalar variance{1};
};

/// Product of Gaussian experts: precisions add and the fused mean is the
/// precision-weighted mean of the children. Children are reduced in the
/// order given. A single child is returned unchanged.
template <typename Scalar>
LatentMoments<Scalar> fuse_poe(std::span<const LatentMoments<Scalar>> children) {
  if (children.empty()) {
    throw DimensionError("fuse_poe: no children");
  }
  for (const auto &child : children) {
    if (!(child.variance > Scalar(0))) {
      throw DimensionError("fuse_poe: child variance must be positive");
    }
  }
  if (children.size() == 1) {
    return children.front();
  }
  Scalar precision{0};
  Scalar weighted{0};
  for (const auto &child : children) {
    const Scalar p = Scalar(1) / child.variance;
    precision += p;
    weighted += p * child.mean;
  }
  return {weighted / precision, Scalar(1) / precision};
}

template <typename Scalar>
LatentMoments<Scalar>
fuse_poe(std::initializer_list<LatentMoments<Scalar>> children) {
  return fuse_poe(std::span<const LatentMoments<Scalar>>(children.begin(),
                                                         children.size()));
}

template <typename Scalar> struct ExpertCollection {
  std::string stream;
  std::vector<ExpertModel<Scalar>> experts;
};

/// One expert per partition subset, each trained only on its own rows.
/// Experts train independently on up to `jobs` threads; the result does not
/// depend on `jobs`.
template <typename Derived>
ExpertCollection<typename Derived::Scalar>
train_collection(const Eigen::MatrixBase<Derived> &x, const LabelVector &y,
                 const Partition &partition,
                 const KernelSpec<typename Derived::Scalar> &spec,
                 std::string stream = {}, std::size_t jobs = 1) {
  using Scalar = typename Derived::Scalar;
  if (static_cast<std::size_t>(x.rows()) != y.size()) {
    throw DimensionError("train_collection: features and labels differ in "
                         "length");
  }
  ExpertCollection<Scalar> collection;
  collection.stream = std::move(stream);
  collection.experts.resize(partition.subsets.size());
  parallel_for(partition.subsets.size(), jobs, [&](std::size_t k) {
    const auto &subset = partition.subsets[k];
    RowMatrix<Scalar> xs(static_cast<Eigen::Index>(subset.size()), x.cols());
    for (std::size_t i = 0; i < subset.size(); ++i) {
      if (subset[i] >= y.size()) {
        throw DimensionError("train_collection: expert " + std::to_string(k) +
                             " references row " + std::to_string(subset[i]));
      }
      xs.row(static_cast<Eigen::Index>(i)) =
          x.row(static_cast<Eigen::Index>(subset[i]));
    }
    try {
      collection.experts[k] =
          train_expert(xs, select_labels(y, subset), spec, subset);
    } catch (const FactorizationError &e) {
      throw FactorizationError("expert " + std::to_string(k) + ": " + e.what(),
                               e.last_jitter());
    } catch (const ConvergenceError &e) {
      throw ConvergenceError("expert " + std::to_string(k) + ": " + e.what(),
                             e.last_delta());
    } catch (const Error &e) {
      throw Error("expert " + std::to_string(k) + ": " + e.what());
    }
  });
  return collection;
}

struct LeafRef {
  std::string stream;
  std::size_t expert = 0;

  auto operator<=>(const LeafRef &) const = default;
};

std::string to_string(const LeafRef &leaf);

struct FusionNode {
  std::string label;
  // Set for leaves; internal nodes have children instead.
  std::optional<LeafRef> leaf;
  std::vector<FusionNode> children;

  bool is_leaf() const { return leaf.has_value(); }

  static FusionNode make_leaf(std::string stream, std::size_t expert) {
    FusionNode node;
    node.leaf = LeafRef{std::move(stream), expert};
    return node;
  }
  static FusionNode make_internal(std::string label,
                                  std::vector<FusionNode> children) {
    FusionNode node;
    node.label = std::move(label);
    node.children = std::move(children);
    return node;
  }
};

struct FusionTree {
  FusionNode root;
};

// Leaves in depth-first, left-to-right order.
std::vector<LeafRef> leaves(const FusionTree &tree);

// Throws ConfigError on internal nodes without children or repeated leaves.
void validate(const FusionTree &tree);

// Throws ConfigError if a leaf names a stream not in `expert_counts` or an
// expert index beyond that stream's count.
void check_resolvable(const FusionTree &tree,
                      const std::map<std::string, std::size_t> &expert_counts);

FusionTree parse_fusion_tree(std::string_view json_text);
FusionTree load_fusion_tree(const std::filesystem::path &path);
std::string fusion_tree_to_json(const FusionTree &tree);

/// Node fusing `num_experts` experts of one stream ("Fusion-1").
FusionNode stream_node(const std::string &label, const std::string &stream,
                       std::size_t num_experts);

/// Two-level tree: one Fusion-1 node per stream under a single root.
FusionTree flat_stream_tree(const std::vector<std::string> &streams,
                            std::size_t num_experts,
                            const std::string &root_label = "Fusion-all");

/// Three-level tree: Fusion-1 per stream, Fusion-2 per group, Fusion-all at
/// the root. Each group is (label, streams).
FusionTree grouped_stream_tree(
    const std::vector<std::pair<std::string, std::vector<std::string>>> &groups,
    std::size_t num_experts, const std::string &root_label = "Fusion-all");

// Leaf variances below this are raised to it before inversion.
inline constexpr double kMinLeafVariance = 1e-12;

template <typename Scalar>
using LeafPredictions = std::map<LeafRef, LatentPrediction<Scalar>>;

template <typename Scalar> using FusedPrediction = LatentPrediction<Scalar>;

namespace detail {

template <typename Scalar>
FusedPrediction<Scalar> fuse_node(
    const FusionNode &node, const LeafPredictions<Scalar> &leaf_predictions,
    Eigen::Index num_points, Eigen::Index num_classes,
    const std::function<void(const FusionNode &, const FusedPrediction<Scalar> &)>
        &visit) {
  if (node.is_leaf()) {
    const auto it = leaf_predictions.find(*node.leaf);
    if (it == leaf_predictions.end()) {
      throw ConfigError("fusion: missing prediction for leaf " +
                        to_string(*node.leaf));
    }
    const auto &pred = it->second;
    if (pred.size() != num_points || pred.num_classes() != num_classes) {
      throw DimensionError("fusion: leaf " + to_string(*node.leaf) + " has " +
                           std::to_string(pred.size()) + " points x " +
                           std::to_string(pred.num_classes()) +
                           " classes, expected " + std::to_string(num_points) +
                           " x " + std::to_string(num_classes));
    }
    FusedPrediction<Scalar> out = pred;
    out.variance =
        out.variance.cwiseMax(static_cast<Scalar>(kMinLeafVariance));
    return out;
  }

  std::vector<FusedPrediction<Scalar>> parts;
  parts.reserve(node.children.size());
  for (const auto &child : node.children) {
    parts.push_back(
        fuse_node(child, leaf_predictions, num_points, num_classes, visit));
  }
  FusedPrediction<Scalar> fused;
  fused.mean.resize(num_points, num_classes);
  fused.variance.resize(num_points, num_classes);
  std::vector<LatentMoments<Scalar>> children(parts.size());
  for (Eigen::Index i = 0; i < num_points; ++i) {
    for (Eigen::Index c = 0; c < num_classes; ++c) {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        children[k] = {parts[k].mean(i, c), parts[k].variance(i, c)};
      }
      const auto moments = fuse_poe(std::span<const LatentMoments<Scalar>>(children));
      fused.mean(i, c) = moments.mean;
      fused.variance(i, c) = moments.variance;
    }
  }
  if (visit) {
    visit(node, fused);
  }
  return fused;
}

} // namespace detail

/// Bottom-up product-of-experts fusion over the tree, applied independently
/// per test point and per class. `visit`, when given, is called for every
/// internal node in post-order with that node's fused prediction.
template <typename Scalar>
FusedPrediction<Scalar> hierarchical_fuse(
    const FusionTree &tree, const LeafPredictions<Scalar> &leaf_predictions,
    const std::function<void(const FusionNode &, const FusedPrediction<Scalar> &)>
        &visit = {}) {
  validate(tree);
  const auto all_leaves = leaves(tree);
  const auto first = leaf_predictions.find(all_leaves.front());
  if (first == leaf_predictions.end()) {
    throw ConfigError("fusion: missing prediction for leaf " +
                      to_string(all_leaves.front()));
  }
  return detail::fuse_node(tree.root, leaf_predictions, first->second.size(),
                           first->second.num_classes(), visit);
}

template <typename Scalar> struct Classification {
  std::vector<int> labels;
  ClassPosterior<Scalar> posterior;
};

// Lowest index wins exact ties.
template <typename Derived>
std::vector<int> argmax_rows(const Eigen::MatrixBase<Derived> &p) {
  std::vector<int> labels(static_cast<std::size_t>(p.rows()));
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < p.cols(); ++c) {
      if (p(i, c) > p(i, best)) {
        best = c;
      }
    }
    labels[static_cast<std::size_t>(i)] = static_cast<int>(best);
  }
  return labels;
}

template <typename Scalar>
Classification<Scalar> classify(const FusedPrediction<Scalar> &fused,
                                int num_samples, std::uint64_t seed) {
  Classification<Scalar> out;
  out.posterior = predictive_density(fused, num_samples, seed);
  out.labels = argmax_rows(out.posterior);
  return out;
}

struct Evaluation {
  double accuracy = 0.0;
  // confusion(i, j): samples of true class i predicted as j.
  Eigen::MatrixXi confusion;
};

Evaluation evaluate(std::span<const int> predicted, const LabelVector &truth);

} // namespace pillar
