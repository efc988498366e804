#include "trialemu/policy_tree.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <memory>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace trialemu {

void PolicyTreeConfig::Validate() const {
  if (max_depth < 0) throw Error(ErrorKind::kConfig, "policy tree max_depth must be >= 0");
  if (min_leaf < 1) throw Error(ErrorKind::kConfig, "policy tree min_leaf must be >= 1");
  if (passes < 0) throw Error(ErrorKind::kConfig, "policy tree passes must be >= 0");
}

int PolicyTree::Depth() const {
  int d = 0;
  for (const auto& n : nodes) d = std::max(d, n.depth);
  return d;
}

std::size_t PolicyTree::LeafCount() const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [](const PolicyNode& n) { return n.is_leaf(); }));
}

void ValidateRewards(const Matrix& rewards) {
  if (rewards.cols() != 2) throw Error(ErrorKind::kInvalidRewards, "reward matrix must have 2 columns");
  for (Eigen::Index i = 0; i < rewards.rows(); ++i) {
    for (Eigen::Index a = 0; a < 2; ++a) {
      const double r = rewards(i, a);
      if (!(r >= 0.0 && r <= 1.0)) {
        throw Error(ErrorKind::kInvalidRewards, "reward at row " + std::to_string(i + 1) +
                                                    " arm " + std::to_string(a) + " is " +
                                                    FormatDouble(r) + ", outside [0,1]");
      }
    }
  }
}

namespace {

struct Node {
  std::vector<std::size_t> rows;
  int depth = 0;
  int feature = -1;
  double threshold = 0.0;
  std::unique_ptr<Node> left;
  std::unique_ptr<Node> right;
};

struct Split {
  int feature = -1;
  double threshold = 0.0;
  double score = 0.0;
};

class Grower {
 public:
  Grower(const Matrix& x, const Matrix& r, const PolicyTreeConfig& config)
      : x_(x), r_(r), config_(config), min_gain_(1e-12 * static_cast<double>(x.rows())) {}

  double LeafValue(const std::vector<std::size_t>& rows) const {
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t i : rows) {
      s0 += r_(static_cast<Eigen::Index>(i), 0);
      s1 += r_(static_cast<Eigen::Index>(i), 1);
    }
    return std::max(s0, s1);
  }

  double Value(const Node& node) const {
    if (node.feature < 0) return LeafValue(node.rows);
    return Value(*node.left) + Value(*node.right);
  }

  // Every admissible split of `rows` with its one-step score, in (feature,
  // threshold) order.
  std::vector<Split> Candidates(const std::vector<std::size_t>& rows) const {
    std::vector<Split> out;
    const std::size_t n = rows.size();
    const auto min_leaf = static_cast<std::size_t>(config_.min_leaf);
    if (n < 2 * min_leaf) return out;
    double t0 = 0.0, t1 = 0.0;
    for (std::size_t i : rows) {
      t0 += r_(static_cast<Eigen::Index>(i), 0);
      t1 += r_(static_cast<Eigen::Index>(i), 1);
    }
    std::vector<std::size_t> order(rows);
    for (Eigen::Index f = 0; f < x_.cols(); ++f) {
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double va = x_(static_cast<Eigen::Index>(a), f), vb = x_(static_cast<Eigen::Index>(b), f);
        return va < vb || (va == vb && a < b);
      });
      double l0 = 0.0, l1 = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        const auto row = static_cast<Eigen::Index>(order[k]);
        l0 += r_(row, 0);
        l1 += r_(row, 1);
        const double v = x_(row, f);
        const double next = x_(static_cast<Eigen::Index>(order[k + 1]), f);
        if (v == next || k + 1 < min_leaf || n - k - 1 < min_leaf) continue;
        out.push_back({static_cast<int>(f), 0.5 * (v + next),
                       std::max(l0, l1) + std::max(t0 - l0, t1 - l1)});
      }
    }
    return out;
  }

  void Apply(Node& node, int feature, double threshold) const {
    node.feature = feature;
    node.threshold = threshold;
    node.left = std::make_unique<Node>();
    node.right = std::make_unique<Node>();
    node.left->depth = node.right->depth = node.depth + 1;
    for (std::size_t i : node.rows) {
      (x_(static_cast<Eigen::Index>(i), feature) < threshold ? node.left : node.right)->rows.push_back(i);
    }
  }

  void MakeLeaf(Node& node) const {
    node.feature = -1;
    node.left.reset();
    node.right.reset();
  }

  void GrowGreedy(Node& node) const {
    MakeLeaf(node);
    if (node.depth >= config_.max_depth) return;
    const double parent = LeafValue(node.rows);
    std::optional<Split> best;
    for (const Split& s : Candidates(node.rows)) {
      if (s.score - parent < min_gain_) continue;
      if (!best || s.score > best->score) best = s;
    }
    if (!best) return;
    Apply(node, best->feature, best->threshold);
    GrowGreedy(*node.left);
    GrowGreedy(*node.right);
  }

  // Tries every split at `node` with greedily regrown children, and the leaf.
  bool Improve(Node& node) const {
    const double current = Value(node);
    double best_value = current;
    std::optional<Split> best;
    bool best_is_leaf = false;
    if (LeafValue(node.rows) - best_value >= min_gain_) {
      best_value = LeafValue(node.rows);
      best_is_leaf = true;
    }
    for (const Split& s : Candidates(node.rows)) {
      Node trial;
      trial.rows = node.rows;
      trial.depth = node.depth;
      Apply(trial, s.feature, s.threshold);
      GrowGreedy(*trial.left);
      GrowGreedy(*trial.right);
      const double v = Value(trial);
      if (v - best_value >= min_gain_) {
        best_value = v;
        best = s;
        best_is_leaf = false;
      }
    }
    if (best) {
      Apply(node, best->feature, best->threshold);
      GrowGreedy(*node.left);
      GrowGreedy(*node.right);
      return true;
    }
    if (best_is_leaf) {
      MakeLeaf(node);
      return true;
    }
    return false;
  }

 private:
  const Matrix& x_;
  const Matrix& r_;
  const PolicyTreeConfig& config_;
  double min_gain_;
};

std::vector<Node*> BreadthFirst(Node& root) {
  std::vector<Node*> out{&root};
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (out[k]->feature >= 0) {
      out.push_back(out[k]->left.get());
      out.push_back(out[k]->right.get());
    }
  }
  return out;
}

PolicyTree Flatten(const Node& root, const Matrix& rewards, std::size_t n_features) {
  PolicyTree tree;
  tree.n_features = n_features;
  std::vector<const Node*> order{&root};
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (order[k]->feature >= 0) {
      order.push_back(order[k]->left.get());
      order.push_back(order[k]->right.get());
    }
  }
  int next_child = 2;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const Node& src = *order[k];
    PolicyNode n;
    n.id = static_cast<int>(k) + 1;
    n.depth = src.depth;
    n.n = src.rows.size();
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t i : src.rows) {
      s0 += rewards(static_cast<Eigen::Index>(i), 0);
      s1 += rewards(static_cast<Eigen::Index>(i), 1);
    }
    if (n.n > 0) {
      n.mean_control = s0 / static_cast<double>(n.n);
      n.mean_treatment = s1 / static_cast<double>(n.n);
    }
    n.treatment = s1 > s0 ? 1 : 0;
    if (src.feature >= 0) {
      n.feature = src.feature;
      n.threshold = src.threshold;
      n.left = next_child++;
      n.right = next_child++;
    }
    tree.nodes.push_back(n);
  }
  return tree;
}

}  // namespace

PolicyTree FitPolicyTree(const Matrix& features, const Matrix& rewards,
                         const PolicyTreeConfig& config) {
  config.Validate();
  if (features.rows() != rewards.rows()) {
    throw Error(ErrorKind::kSchema, "policy tree: feature and reward row counts differ");
  }
  ValidateRewards(rewards);
  Grower grower(features, rewards, config);
  Node root;
  root.rows.resize(static_cast<std::size_t>(features.rows()));
  std::iota(root.rows.begin(), root.rows.end(), std::size_t{0});
  grower.GrowGreedy(root);
  for (int pass = 0; pass < config.passes; ++pass) {
    bool changed = false;
    std::vector<Node*> order = BreadthFirst(root);
    for (std::size_t k = 0; k < order.size(); ++k) {
      if (order[k]->depth >= config.max_depth) continue;
      if (grower.Improve(*order[k])) {
        changed = true;
        order = BreadthFirst(root);
      }
    }
    if (!changed) break;
  }
  return Flatten(root, rewards, static_cast<std::size_t>(features.cols()));
}

TreeAssignment Assign(const PolicyTree& tree, const Matrix& features) {
  if (static_cast<std::size_t>(features.cols()) != tree.n_features) {
    throw Error(ErrorKind::kSchema, "policy tree expects " + std::to_string(tree.n_features) +
                                        " features, got " + std::to_string(features.cols()));
  }
  TreeAssignment out;
  out.treatment.resize(features.rows());
  out.leaf.resize(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const PolicyNode* n = &tree.node(1);
    while (!n->is_leaf()) n = &tree.node(features(i, n->feature) < n->threshold ? n->left : n->right);
    out.treatment(i) = n->treatment;
    out.leaf[static_cast<std::size_t>(i)] = n->id;
  }
  return out;
}

double PolicyValue(const PolicyTree& tree, const Matrix& features, const Matrix& rewards) {
  const TreeAssignment a = Assign(tree, features);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < rewards.rows(); ++i) sum += rewards(i, a.treatment(i));
  return rewards.rows() ? sum / static_cast<double>(rewards.rows()) : 0.0;
}

double Concordance(const PolicyTree& tree, const Matrix& rewards, const Matrix& features) {
  if (rewards.rows() == 0) throw Error(ErrorKind::kUndefined, "concordance of an empty cohort");
  const TreeAssignment a = Assign(tree, features);
  double agree = 0.0;
  for (Eigen::Index i = 0; i < rewards.rows(); ++i) {
    const double r0 = rewards(i, 0), r1 = rewards(i, 1);
    if (r0 == r1 || (r1 > r0) == (a.treatment(i) == 1)) agree += 1.0;
  }
  return agree / static_cast<double>(rewards.rows());
}

double AssignmentOverlap(const IntVector& a, const IntVector& b) {
  if (a.size() != b.size()) throw Error(ErrorKind::kSchema, "overlap: length mismatch");
  const double denom = (a.array() == 1).count();
  if (denom == 0.0) throw Error(ErrorKind::kUndefined, "overlap: reference group is empty");
  return static_cast<double>(((a.array() == 1) && (b.array() == 1)).count()) / denom;
}

std::size_t SelectTree(const std::vector<TreeCandidate>& candidates, const Matrix& rewards,
                       const Matrix& features) {
  if (candidates.empty()) throw Error(ErrorKind::kConfig, "select_tree: no candidates");
  std::optional<std::size_t> best;
  double best_c = 0.0;
  for (std::size_t k = 0; k < candidates.size(); ++k) {
    const auto& c = candidates[k];
    const bool valid = std::all_of(c.tree.nodes.begin(), c.tree.nodes.end(), [&](const PolicyNode& n) {
      return !n.is_leaf() || n.n >= static_cast<std::size_t>(c.config.min_leaf) ||
             c.tree.nodes.size() == 1;
    });
    if (!valid) continue;
    const double conc = Concordance(c.tree, rewards, features);
    if (!best) {
      best = k;
      best_c = conc;
      continue;
    }
    const auto& b = candidates[*best];
    const bool better =
        conc > best_c ||
        (conc == best_c && (c.tree.LeafCount() < b.tree.LeafCount() ||
                            (c.tree.LeafCount() == b.tree.LeafCount() &&
                             c.config.max_depth < b.config.max_depth)));
    if (better) {
      best = k;
      best_c = conc;
    }
  }
  if (!best) throw Error(ErrorKind::kConfig, "select_tree: every candidate violates min_leaf");
  return *best;
}

std::vector<LeafReport> SubgroupReport(const PolicyTree& tree, const Matrix& features,
                                       const IntVector& received, const Matrix& rewards,
                                       double min_effect) {
  const TreeAssignment a = Assign(tree, features);
  std::vector<LeafReport> out;
  for (const auto& n : tree.nodes) {
    if (!n.is_leaf()) continue;
    LeafReport row;
    row.leaf = n.id;
    row.treatment = n.treatment;
    double s0 = 0.0, s1 = 0.0;
    for (std::size_t i = 0; i < a.leaf.size(); ++i) {
      if (a.leaf[i] != n.id) continue;
      const auto r = static_cast<Eigen::Index>(i);
      ++row.n;
      ++(received(r) == 1 ? row.n_treated : row.n_control);
      s0 += rewards(r, 0);
      s1 += rewards(r, 1);
    }
    if (row.n > 0) {
      row.mean_control = s0 / static_cast<double>(row.n);
      row.mean_treatment = s1 / static_cast<double>(row.n);
    }
    row.effect = row.mean_treatment - row.mean_control;
    row.flagged = row.treatment == 1 && row.effect < min_effect;
    row.recommended = row.treatment == 1 && !row.flagged;
    out.push_back(row);
  }
  return out;
}

std::string PolicyTreeToJson(const PolicyTree& tree, const std::vector<std::string>& feature_names) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : tree.nodes) {
    json item = {{"id", n.id},
                 {"depth", n.depth},
                 {"n", n.n},
                 {"mean_reward_control", n.mean_control},
                 {"mean_reward_treatment", n.mean_treatment}};
    if (n.is_leaf()) {
      item["treatment"] = n.treatment;
      item["effect"] = n.effect();
    } else {
      item["feature"] = n.feature;
      if (static_cast<std::size_t>(n.feature) < feature_names.size()) {
        item["feature_name"] = feature_names[static_cast<std::size_t>(n.feature)];
      }
      item["threshold"] = n.threshold;
      item["left"] = n.left;
      item["right"] = n.right;
    }
    nodes.push_back(item);
  }
  json doc = {{"n_features", tree.n_features}, {"nodes", nodes}};
  return doc.dump(2) + "\n";
}

PolicyTree PolicyTreeFromJson(const std::string& text) {
  using nlohmann::json;
  try {
    const json doc = json::parse(text);
    PolicyTree tree;
    tree.n_features = doc.at("n_features").get<std::size_t>();
    for (const auto& item : doc.at("nodes")) {
      PolicyNode n;
      n.id = item.at("id").get<int>();
      n.depth = item.at("depth").get<int>();
      n.n = item.at("n").get<std::size_t>();
      n.mean_control = item.at("mean_reward_control").get<double>();
      n.mean_treatment = item.at("mean_reward_treatment").get<double>();
      if (item.contains("feature")) {
        n.feature = item.at("feature").get<int>();
        n.threshold = item.at("threshold").get<double>();
        n.left = item.at("left").get<int>();
        n.right = item.at("right").get<int>();
      } else {
        n.treatment = item.at("treatment").get<int>();
      }
      if (n.id != static_cast<int>(tree.nodes.size()) + 1) {
        throw Error(ErrorKind::kParse, "policy tree JSON: node ids must run 1..n in order");
      }
      tree.nodes.push_back(n);
    }
    if (tree.nodes.empty()) throw Error(ErrorKind::kParse, "policy tree JSON: no nodes");
    for (const auto& n : tree.nodes) {
      if (n.is_leaf()) continue;
      const int count = static_cast<int>(tree.nodes.size());
      if (n.left < 1 || n.left > count || n.right < 1 || n.right > count ||
          static_cast<std::size_t>(n.feature) >= tree.n_features) {
        throw Error(ErrorKind::kParse, "policy tree JSON: node " + std::to_string(n.id) + " is malformed");
      }
    }
    return tree;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("policy tree JSON: ") + e.what());
  }
}

std::string RenderPolicyTree(const PolicyTree& tree, const std::vector<std::string>& feature_names) {
  std::ostringstream out;
  auto name = [&](int f) {
    return static_cast<std::size_t>(f) < feature_names.size() ? feature_names[static_cast<std::size_t>(f)]
                                                              : "x" + std::to_string(f);
  };
  auto visit = [&](auto&& self, int id) -> void {
    const PolicyNode& n = tree.node(id);
    out << std::string(static_cast<std::size_t>(2 * n.depth), ' ') << "node " << n.id << ": ";
    if (n.is_leaf()) {
      out << (n.treatment ? "treat" : "control") << " (n=" << n.n
          << ", control=" << Format4(n.mean_control) << ", treatment=" << Format4(n.mean_treatment)
          << ", effect=" << Format4(n.effect()) << ")\n";
      return;
    }
    out << name(n.feature) << " < " << FormatDouble(n.threshold) << " (n=" << n.n << ")\n";
    self(self, n.left);
    self(self, n.right);
  };
  visit(visit, 1);
  return out.str();
}

}  // namespace trialemu
