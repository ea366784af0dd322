#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pillar/poe.hpp"

namespace pillar {

namespace {

using nlohmann::json;

void collect_leaves(const FusionNode &node, std::vector<LeafRef> &out) {
  if (node.is_leaf()) {
    out.push_back(*node.leaf);
    return;
  }
  for (const auto &child : node.children) {
    collect_leaves(child, out);
  }
}

void check_node(const FusionNode &node, std::set<LeafRef> &seen,
                const std::string &path) {
  if (node.is_leaf()) {
    if (!node.children.empty()) {
      throw ConfigError("fusion tree: leaf at " + path + " has children");
    }
    if (!seen.insert(*node.leaf).second) {
      throw ConfigError("fusion tree: leaf " + to_string(*node.leaf) +
                        " appears more than once");
    }
    return;
  }
  if (node.children.empty()) {
    throw ConfigError("fusion tree: internal node '" + node.label + "' at " +
                      path + " has no children");
  }
  for (std::size_t i = 0; i < node.children.size(); ++i) {
    check_node(node.children[i], seen, path + "/" + std::to_string(i));
  }
}

FusionNode node_from_json(const json &j, const std::string &path) {
  if (!j.is_object()) {
    throw ConfigError("fusion tree: node at " + path + " is not an object");
  }
  const bool has_stream = j.contains("stream");
  const bool has_children = j.contains("children");
  if (has_stream == has_children) {
    throw ConfigError("fusion tree: node at " + path +
                      " needs exactly one of \"stream\" or \"children\"");
  }
  if (has_stream) {
    if (!j["stream"].is_string() || !j.contains("expert") ||
        !j["expert"].is_number_integer() || j["expert"].get<long long>() < 0) {
      throw ConfigError("fusion tree: leaf at " + path +
                        " needs a string \"stream\" and a non-negative "
                        "integer \"expert\"");
    }
    return FusionNode::make_leaf(j["stream"].get<std::string>(),
                                 j["expert"].get<std::size_t>());
  }
  if (!j["children"].is_array()) {
    throw ConfigError("fusion tree: \"children\" at " + path +
                      " is not an array");
  }
  std::string label;
  if (j.contains("label")) {
    if (!j["label"].is_string()) {
      throw ConfigError("fusion tree: \"label\" at " + path +
                        " is not a string");
    }
    label = j["label"].get<std::string>();
  }
  std::vector<FusionNode> children;
  const auto &arr = j["children"];
  for (std::size_t i = 0; i < arr.size(); ++i) {
    children.push_back(node_from_json(arr[i], path + "/" + std::to_string(i)));
  }
  return FusionNode::make_internal(std::move(label), std::move(children));
}

json node_to_json(const FusionNode &node) {
  if (node.is_leaf()) {
    return json{{"stream", node.leaf->stream}, {"expert", node.leaf->expert}};
  }
  json children = json::array();
  for (const auto &child : node.children) {
    children.push_back(node_to_json(child));
  }
  return json{{"label", node.label}, {"children", std::move(children)}};
}

} // namespace

std::string to_string(const LeafRef &leaf) {
  return leaf.stream + "[" + std::to_string(leaf.expert) + "]";
}

std::vector<LeafRef> leaves(const FusionTree &tree) {
  std::vector<LeafRef> out;
  collect_leaves(tree.root, out);
  return out;
}

void validate(const FusionTree &tree) {
  std::set<LeafRef> seen;
  check_node(tree.root, seen, "root");
}

void check_resolvable(const FusionTree &tree,
                      const std::map<std::string, std::size_t> &expert_counts) {
  for (const auto &leaf : leaves(tree)) {
    const auto it = expert_counts.find(leaf.stream);
    if (it == expert_counts.end()) {
      throw ConfigError("fusion tree references unknown stream '" +
                        leaf.stream + "'");
    }
    if (leaf.expert >= it->second) {
      throw ConfigError("fusion tree references unknown expert " +
                        to_string(leaf) + " (stream has " +
                        std::to_string(it->second) + " experts)");
    }
  }
}

FusionTree parse_fusion_tree(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error &e) {
    throw ConfigError(std::string("fusion tree: invalid JSON: ") + e.what());
  }
  FusionTree tree{node_from_json(j, "root")};
  validate(tree);
  return tree;
}

FusionTree load_fusion_tree(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open fusion tree " + path.string());
  }
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_fusion_tree(text.str());
  } catch (const ConfigError &e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string fusion_tree_to_json(const FusionTree &tree) {
  return node_to_json(tree.root).dump(2);
}

FusionNode stream_node(const std::string &label, const std::string &stream,
                       std::size_t num_experts) {
  std::vector<FusionNode> children;
  for (std::size_t k = 0; k < num_experts; ++k) {
    children.push_back(FusionNode::make_leaf(stream, k));
  }
  return FusionNode::make_internal(label, std::move(children));
}

FusionTree flat_stream_tree(const std::vector<std::string> &streams,
                            std::size_t num_experts,
                            const std::string &root_label) {
  std::vector<FusionNode> children;
  for (const auto &s : streams) {
    children.push_back(stream_node("Fusion-1/" + s, s, num_experts));
  }
  return {FusionNode::make_internal(root_label, std::move(children))};
}

FusionTree grouped_stream_tree(
    const std::vector<std::pair<std::string, std::vector<std::string>>> &groups,
    std::size_t num_experts, const std::string &root_label) {
  std::vector<FusionNode> group_nodes;
  for (const auto &[label, streams] : groups) {
    std::vector<FusionNode> children;
    for (const auto &s : streams) {
      children.push_back(stream_node("Fusion-1/" + s, s, num_experts));
    }
    group_nodes.push_back(FusionNode::make_internal(label, std::move(children)));
  }
  return {FusionNode::make_internal(root_label, std::move(group_nodes))};
}

Evaluation evaluate(std::span<const int> predicted, const LabelVector &truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("evaluate: " + std::to_string(predicted.size()) +
                         " predictions but " + std::to_string(truth.size()) +
                         " labels");
  }
  if (truth.size() == 0) {
    throw DimensionError("evaluate: no samples");
  }
  Evaluation eval;
  eval.confusion = Eigen::MatrixXi::Zero(truth.num_classes, truth.num_classes);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const int p = predicted[i];
    const int t = truth[i];
    if (p < 0 || p >= truth.num_classes || t < 0 || t >= truth.num_classes) {
      throw DimensionError("evaluate: label out of range at index " +
                           std::to_string(i));
    }
    ++eval.confusion(t, p);
    correct += (p == t) ? 1 : 0;
  }
  eval.accuracy =
      static_cast<double>(correct) / static_cast<double>(truth.size());
  return eval;
}

} // namespace pillar
