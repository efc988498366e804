#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "trialemu/core.hpp"

namespace trialemu {

struct PolicyTreeConfig {
  int max_depth = 3;
  int min_leaf = 20;
  int passes = 2;  // local-search passes after greedy growth
  std::uint64_t seed = 0;

  void Validate() const;
};

// Node ids run breadth-first from 1; nodes[k].id == k + 1. Child links are ids.
struct PolicyNode {
  int id = 1;
  int depth = 0;
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = 0;
  int right = 0;
  std::size_t n = 0;
  double mean_control = 0.0;
  double mean_treatment = 0.0;
  int treatment = 0;  // leaves only: argmax of the two means, ties to control

  bool is_leaf() const { return feature < 0; }
  double effect() const { return mean_treatment - mean_control; }
};

struct PolicyTree {
  std::vector<PolicyNode> nodes;
  std::size_t n_features = 0;

  const PolicyNode& node(int id) const { return nodes[static_cast<std::size_t>(id - 1)]; }
  int Depth() const;
  std::size_t LeafCount() const;
};

// Throws kInvalidRewards unless every entry is finite and in [0,1].
void ValidateRewards(const Matrix& rewards);

// Greedy partitioning on the summed best-arm reward, then local search: each
// node above max_depth is re-split on every (feature, threshold), its subtree
// regrown greedily, and kept on a strict gain in policy value.
PolicyTree FitPolicyTree(const Matrix& features, const Matrix& rewards,
                         const PolicyTreeConfig& config);

struct TreeAssignment {
  IntVector treatment;
  std::vector<int> leaf;
};

TreeAssignment Assign(const PolicyTree& tree, const Matrix& features);

// Mean reward of the arm the tree assigns.
double PolicyValue(const PolicyTree& tree, const Matrix& features, const Matrix& rewards);

// Share of rows whose assignment equals their reward argmax; tied rows agree
// with either arm.
double Concordance(const PolicyTree& tree, const Matrix& rewards, const Matrix& features);

// |{a = 1 and b = 1}| / |{a = 1}|.
double AssignmentOverlap(const IntVector& a, const IntVector& b);

struct TreeCandidate {
  PolicyTreeConfig config;
  PolicyTree tree;
};

// Index of the selected candidate: highest concordance, then fewer leaves,
// then lower configured max_depth, then list order. Candidates with a leaf
// below their min_leaf are skipped.
std::size_t SelectTree(const std::vector<TreeCandidate>& candidates, const Matrix& rewards,
                       const Matrix& features);

struct LeafReport {
  int leaf = 0;
  int treatment = 0;
  std::size_t n = 0;
  std::size_t n_control = 0;  // by received treatment
  std::size_t n_treated = 0;
  double mean_control = 0.0;
  double mean_treatment = 0.0;
  double effect = 0.0;
  bool flagged = false;      // recommends treatment with effect < min_effect
  bool recommended = false;  // recommends treatment with effect >= min_effect
};

std::vector<LeafReport> SubgroupReport(const PolicyTree& tree, const Matrix& features,
                                       const IntVector& received, const Matrix& rewards,
                                       double min_effect);

std::string PolicyTreeToJson(const PolicyTree& tree, const std::vector<std::string>& feature_names);
PolicyTree PolicyTreeFromJson(const std::string& text);
std::string RenderPolicyTree(const PolicyTree& tree, const std::vector<std::string>& feature_names);

}  // namespace trialemu
