#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trialemu/core.hpp"

namespace trialemu {

struct LearnerConfig {
  int n_trees = 200;
  int max_depth = 8;
  // Minimum total sample weight per leaf. With unit weights this is a count.
  int min_leaf = 5;
  double feature_subsample = 0.7;  // fraction of features tried at each node
  bool bootstrap = true;
  std::uint64_t seed = 0;

  void Validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double value = 0.0;  // weighted positive-class fraction

  bool is_leaf() const { return feature < 0; }
};

// Axis-aligned binary tree; a row goes left when x[feature] < threshold.
struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  template <typename Row>
  double Predict(const Row& x) const {
    int k = 0;
    while (!nodes[static_cast<std::size_t>(k)].is_leaf()) {
      const TreeNode& n = nodes[static_cast<std::size_t>(k)];
      k = x(n.feature) < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(k)].value;
  }
  int Depth() const;
};

struct FittedEnsemble {
  std::vector<DecisionTree> trees;
  std::size_t n_features = 0;
  std::string weight_digest;
};

enum class DegeneratePolicy { kThrow, kConstant };

// Random forest of weighted-Gini trees. With bootstrap on, each tree draws n
// rows with probability proportional to weight and treats the draw counts as
// its sample weights; with bootstrap off every tree sees all rows at their
// given weights. Tree t draws from the stream (seed, t), so the result does
// not depend on the order in which trees are built.
FittedEnsemble Fit(const Matrix& features, const IntVector& labels, const Vector& weights,
                   const LearnerConfig& config,
                   DegeneratePolicy degenerate = DegeneratePolicy::kThrow);

FittedEnsemble ConstantEnsemble(double value, std::size_t n_features);

// Mean leaf value across trees, one probability per row.
Vector PredictProb(const FittedEnsemble& model, const Matrix& features);

std::string EnsembleToJson(const FittedEnsemble& model);
FittedEnsemble EnsembleFromJson(const std::string& text);

struct CrossValidationResult {
  double mean_cindex = 0.0;
  std::vector<double> fold_cindex;  // skipped folds are absent
  std::vector<std::string> warnings;
};

// Harrell's C of out-of-fold event probabilities against (times, labels).
// Label 1 marks an event; label 0 rows are treated as censored at their time.
CrossValidationResult CrossValidatedCIndex(const Matrix& features, const IntVector& labels,
                                           const Vector& times, const LearnerConfig& config,
                                           int folds);

}  // namespace trialemu
