#include "trialemu/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "trialemu/survival_stats.hpp"

namespace trialemu {

void LearnerConfig::Validate() const {
  if (n_trees < 1) throw Error(ErrorKind::kConfig, "n_trees must be >= 1");
  if (max_depth < 1) throw Error(ErrorKind::kConfig, "max_depth must be >= 1");
  if (min_leaf < 1) throw Error(ErrorKind::kConfig, "min_leaf must be >= 1");
  if (!(feature_subsample > 0.0 && feature_subsample <= 1.0)) {
    throw Error(ErrorKind::kConfig, "feature_subsample must lie in (0,1]");
  }
}

int DecisionTree::Depth() const {
  std::vector<int> depth(nodes.size(), 0);
  int deepest = 0;
  for (std::size_t k = 0; k < nodes.size(); ++k) {
    const TreeNode& n = nodes[k];
    deepest = std::max(deepest, depth[k]);
    if (!n.is_leaf()) {
      depth[static_cast<std::size_t>(n.left)] = depth[k] + 1;
      depth[static_cast<std::size_t>(n.right)] = depth[k] + 1;
    }
  }
  return deepest;
}

namespace {

class TreeBuilder {
 public:
  TreeBuilder(const Matrix& x, const IntVector& y, std::vector<double> sample_weight,
              const LearnerConfig& config, Rng& rng)
      : x_(x), y_(y), w_(std::move(sample_weight)), config_(config), rng_(rng) {
    const auto l = static_cast<std::size_t>(x.cols());
    mtry_ = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::ceil(config.feature_subsample * static_cast<double>(l))));
    mtry_ = std::min(mtry_, l);
    features_.resize(l);
    std::iota(features_.begin(), features_.end(), 0);
  }

  DecisionTree Build() {
    std::vector<int> rows;
    for (std::size_t i = 0; i < w_.size(); ++i) {
      if (w_[i] > 0.0) rows.push_back(static_cast<int>(i));
    }
    tree_.nodes.clear();
    Grow(rows, 0);
    return std::move(tree_);
  }

 private:
  struct Split {
    int feature = -1;
    double threshold = 0.0;
    double score = 0.0;
  };

  int Grow(std::vector<int>& rows, int depth) {
    double total = 0.0, positive = 0.0;
    for (int i : rows) {
      total += w_[static_cast<std::size_t>(i)];
      if (y_(i) == 1) positive += w_[static_cast<std::size_t>(i)];
    }
    const int id = static_cast<int>(tree_.nodes.size());
    tree_.nodes.push_back(TreeNode{});
    tree_.nodes.back().value = total > 0.0 ? positive / total : 0.0;

    const double negative = total - positive;
    const bool pure = positive <= 0.0 || negative <= 0.0;
    if (depth >= config_.max_depth || pure || total < 2.0 * config_.min_leaf) return id;

    const Split split = BestSplit(rows, positive * negative / total);
    if (split.feature < 0) return id;

    std::vector<int> left, right;
    for (int i : rows) {
      (x_(i, split.feature) < split.threshold ? left : right).push_back(i);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = Grow(left, depth + 1);
    const int r = Grow(right, depth + 1);
    TreeNode& node = tree_.nodes[static_cast<std::size_t>(id)];
    node.feature = split.feature;
    node.threshold = split.threshold;
    node.left = l;
    node.right = r;
    return id;
  }

  // Minimizes posL*negL/WL + posR*negR/WR, i.e. half the weighted Gini
  // impurity of the children. Ties keep the lowest feature, then the lowest
  // threshold.
  Split BestSplit(const std::vector<int>& rows, double parent_score) {
    // Partial Fisher-Yates picks the candidate features for this node.
    for (std::size_t k = 0; k < mtry_; ++k) {
      std::swap(features_[k], features_[k + rng_.Index(features_.size() - k)]);
    }
    std::vector<int> candidates(features_.begin(), features_.begin() + static_cast<long>(mtry_));
    std::sort(candidates.begin(), candidates.end());

    double total = 0.0, positive = 0.0;
    for (int i : rows) {
      total += w_[static_cast<std::size_t>(i)];
      if (y_(i) == 1) positive += w_[static_cast<std::size_t>(i)];
    }
    Split best;
    best.score = parent_score - 1e-12 * total;
    std::vector<int> order = rows;
    for (int f : candidates) {
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        const double va = x_(a, f), vb = x_(b, f);
        return va < vb || (va == vb && a < b);
      });
      double wl = 0.0, pl = 0.0;
      for (std::size_t k = 0; k + 1 < order.size(); ++k) {
        const int i = order[k];
        wl += w_[static_cast<std::size_t>(i)];
        if (y_(i) == 1) pl += w_[static_cast<std::size_t>(i)];
        const double lo = x_(i, f), hi = x_(order[k + 1], f);
        if (!(lo < hi)) continue;
        const double wr = total - wl;
        if (wl < config_.min_leaf || wr < config_.min_leaf) continue;
        const double pr = positive - pl;
        const double score = pl * (wl - pl) / wl + pr * (wr - pr) / wr;
        if (score < best.score) {
          double mid = lo + (hi - lo) / 2.0;
          if (!(lo < mid)) mid = hi;
          best = Split{f, mid, score};
        }
      }
    }
    return best;
  }

  const Matrix& x_;
  const IntVector& y_;
  std::vector<double> w_;
  const LearnerConfig& config_;
  Rng& rng_;
  std::size_t mtry_ = 1;
  std::vector<int> features_;
  DecisionTree tree_;
};

// Counts of n draws with probability proportional to weight (inverse CDF).
std::vector<double> WeightedBootstrap(const Vector& weights, Rng& rng) {
  const auto n = static_cast<std::size_t>(weights.size());
  std::vector<double> cumulative(n);
  double running = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    running += weights(static_cast<Eigen::Index>(i));
    cumulative[i] = running;
  }
  std::vector<double> counts(n, 0.0);
  for (std::size_t draw = 0; draw < n; ++draw) {
    const double u = rng.Uniform() * running;
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
    if (it == cumulative.end()) --it;
    counts[static_cast<std::size_t>(it - cumulative.begin())] += 1.0;
  }
  return counts;
}

}  // namespace

FittedEnsemble Fit(const Matrix& features, const IntVector& labels, const Vector& weights,
                   const LearnerConfig& config, DegeneratePolicy degenerate) {
  config.Validate();
  const Eigen::Index n = features.rows();
  if (labels.size() != n || weights.size() != n) {
    throw Error(ErrorKind::kSchema, "fit: features, labels and weights differ in length");
  }
  if (n < 2 || n < config.min_leaf) {
    throw Error(ErrorKind::kInsufficientData,
                "fit: " + std::to_string(n) + " rows, need at least max(2, min_leaf=" +
                    std::to_string(config.min_leaf) + ")");
  }
  bool has_pos = false, has_neg = false;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(weights(i) > 0.0) || !std::isfinite(weights(i))) {
      throw Error(ErrorKind::kConfig, "fit: weights must be positive and finite");
    }
    if (labels(i) != 0 && labels(i) != 1) {
      throw Error(ErrorKind::kSchema, "fit: labels must be 0 or 1");
    }
    (labels(i) == 1 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) {
    if (degenerate == DegeneratePolicy::kConstant) {
      FittedEnsemble model = ConstantEnsemble(has_pos ? 1.0 : 0.0,
                                              static_cast<std::size_t>(features.cols()));
      model.weight_digest = DigestOf(std::span<const double>(weights.data(), weights.size()));
      return model;
    }
    throw Error(ErrorKind::kDegenerateModel, "fit: training labels contain a single class");
  }

  FittedEnsemble model;
  model.n_features = static_cast<std::size_t>(features.cols());
  model.weight_digest = DigestOf(std::span<const double>(weights.data(), weights.size()));
  model.trees.reserve(static_cast<std::size_t>(config.n_trees));
  for (int t = 0; t < config.n_trees; ++t) {
    Rng rng = Rng::Derive(config.seed, static_cast<std::uint64_t>(t));
    std::vector<double> sample_weight;
    if (config.bootstrap) {
      sample_weight = WeightedBootstrap(weights, rng);
    } else {
      sample_weight.assign(weights.data(), weights.data() + n);
    }
    TreeBuilder builder(features, labels, std::move(sample_weight), config, rng);
    model.trees.push_back(builder.Build());
  }
  return model;
}

FittedEnsemble ConstantEnsemble(double value, std::size_t n_features) {
  FittedEnsemble model;
  model.n_features = n_features;
  DecisionTree tree;
  TreeNode leaf;
  leaf.value = value;
  tree.nodes.push_back(leaf);
  model.trees.push_back(std::move(tree));
  return model;
}

Vector PredictProb(const FittedEnsemble& model, const Matrix& features) {
  if (static_cast<std::size_t>(features.cols()) != model.n_features) {
    throw Error(ErrorKind::kSchema, "predict: model expects " + std::to_string(model.n_features) +
                                        " features, got " + std::to_string(features.cols()));
  }
  Vector out = Vector::Zero(features.rows());
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    const auto row = features.row(i);
    double sum = 0.0;
    for (const DecisionTree& tree : model.trees) sum += tree.Predict(row);
    out(i) = sum / static_cast<double>(model.trees.size());
  }
  return out;
}

namespace {

using nlohmann::json;

json NodeToJson(const DecisionTree& tree, int k) {
  const TreeNode& n = tree.nodes[static_cast<std::size_t>(k)];
  if (n.is_leaf()) return json{{"value", n.value}};
  return json{{"feature", n.feature},
              {"threshold", n.threshold},
              {"left", NodeToJson(tree, n.left)},
              {"right", NodeToJson(tree, n.right)}};
}

int NodeFromJson(const json& node, DecisionTree& tree, std::size_t n_features) {
  const int id = static_cast<int>(tree.nodes.size());
  tree.nodes.emplace_back();
  if (node.contains("value")) {
    const double v = node.at("value").get<double>();
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::kParse, "model: leaf value outside [0,1]");
    tree.nodes[static_cast<std::size_t>(id)].value = v;
    return id;
  }
  const int feature = node.at("feature").get<int>();
  if (feature < 0 || static_cast<std::size_t>(feature) >= n_features) {
    throw Error(ErrorKind::kParse, "model: feature index out of range");
  }
  const double threshold = node.at("threshold").get<double>();
  const int l = NodeFromJson(node.at("left"), tree, n_features);
  const int r = NodeFromJson(node.at("right"), tree, n_features);
  TreeNode& n = tree.nodes[static_cast<std::size_t>(id)];
  n.feature = feature;
  n.threshold = threshold;
  n.left = l;
  n.right = r;
  return id;
}

}  // namespace

std::string EnsembleToJson(const FittedEnsemble& model) {
  json doc;
  doc["n_features"] = model.n_features;
  doc["weight_digest"] = model.weight_digest;
  json trees = json::array();
  for (const auto& tree : model.trees) trees.push_back(NodeToJson(tree, 0));
  doc["trees"] = std::move(trees);
  return doc.dump();
}

FittedEnsemble EnsembleFromJson(const std::string& text) {
  try {
    const json doc = json::parse(text);
    FittedEnsemble model;
    model.n_features = doc.at("n_features").get<std::size_t>();
    model.weight_digest = doc.value("weight_digest", "");
    for (const auto& node : doc.at("trees")) {
      DecisionTree tree;
      NodeFromJson(node, tree, model.n_features);
      model.trees.push_back(std::move(tree));
    }
    if (model.trees.empty()) throw Error(ErrorKind::kParse, "model: no trees");
    return model;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("model: ") + e.what());
  }
}

CrossValidationResult CrossValidatedCIndex(const Matrix& features, const IntVector& labels,
                                           const Vector& times, const LearnerConfig& config,
                                           int folds) {
  if (folds < 2) throw Error(ErrorKind::kConfig, "folds must be >= 2");
  const Eigen::Index n = features.rows();
  if (labels.size() != n || times.size() != n) {
    throw Error(ErrorKind::kSchema, "cross-validation: input lengths differ");
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = Rng::Derive(config.seed, 0xc0ffeeULL);
  rng.Shuffle(order);
  std::vector<int> fold_of(static_cast<std::size_t>(n));
  for (std::size_t k = 0; k < order.size(); ++k) {
    fold_of[order[k]] = static_cast<int>(k % static_cast<std::size_t>(folds));
  }

  CrossValidationResult result;
  for (int f = 0; f < folds; ++f) {
    std::vector<Eigen::Index> train, test;
    for (Eigen::Index i = 0; i < n; ++i) {
      (fold_of[static_cast<std::size_t>(i)] == f ? test : train).push_back(i);
    }
    const Matrix xtr = features(train, Eigen::all);
    const IntVector ytr = labels(train);
    if (ytr.sum() == 0 || ytr.sum() == ytr.size() || test.empty()) {
      result.warnings.push_back("fold " + std::to_string(f) +
                                " skipped: single-class training data");
      continue;
    }
    FittedEnsemble model;
    try {
      model = Fit(xtr, ytr, Vector::Ones(ytr.size()), config);
    } catch (const Error& e) {
      result.warnings.push_back("fold " + std::to_string(f) + " skipped: " + e.what());
      continue;
    }
    const Vector scores = PredictProb(model, features(test, Eigen::all));
    try {
      const IntVector events = labels(test);
      result.fold_cindex.push_back(HarrellC(scores, times(test), events));
    } catch (const Error& e) {
      result.warnings.push_back("fold " + std::to_string(f) + " skipped: " + e.what());
    }
  }
  if (result.fold_cindex.empty()) {
    throw Error(ErrorKind::kInsufficientData, "cross-validation: every fold was skipped");
  }
  result.mean_cindex = std::accumulate(result.fold_cindex.begin(), result.fold_cindex.end(), 0.0) /
                       static_cast<double>(result.fold_cindex.size());
  return result;
}

}  // namespace trialemu
