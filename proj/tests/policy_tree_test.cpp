#include "trialemu/policy_tree.hpp"

#include <gtest/gtest.h>

#include "oracles/tree_oracle.hpp"

using namespace trialemu;

namespace {

PolicyTreeConfig Small(int depth, int min_leaf = 1) {
  PolicyTreeConfig c;
  c.max_depth = depth;
  c.min_leaf = min_leaf;
  return c;
}

}  // namespace

TEST(FitPolicyTree, IdenticalRewardsRootOnly) {
  Matrix x(6, 1);
  x << 1, 2, 3, 4, 5, 6;
  Matrix r(6, 2);
  r.col(0).setConstant(0.4);
  r.col(1).setConstant(0.6);
  const PolicyTree t = FitPolicyTree(x, r, Small(3));
  ASSERT_EQ(t.nodes.size(), 1u);
  EXPECT_EQ(t.nodes[0].treatment, 1);
}

TEST(FitPolicyTree, BinarySplit) {
  Matrix x(4, 1);
  x << 0, 0, 1, 1;
  Matrix r(4, 2);
  r << 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9;
  const PolicyTree t = FitPolicyTree(x, r, Small(1));
  ASSERT_EQ(t.nodes.size(), 3u);
  EXPECT_EQ(t.node(1).feature, 0);
  EXPECT_EQ(t.node(1).threshold, 0.5);
  EXPECT_EQ(t.node(2).treatment, 0);
  EXPECT_EQ(t.node(3).treatment, 1);
  EXPECT_NEAR(PolicyValue(t, x, r), 0.9, 1e-15);
}

TEST(FitPolicyTree, XorNeedsLocalSearch) {
  // No single split helps, but the depth-2 tree is perfect.
  Matrix x(4, 2);
  x << 0, 0, 0, 1, 1, 0, 1, 1;
  Matrix r(4, 2);
  r << 1, 0, 0, 1, 0, 1, 1, 0;
  PolicyTreeConfig cfg = Small(2);
  cfg.passes = 0;
  EXPECT_NEAR(PolicyValue(FitPolicyTree(x, r, cfg), x, r), 0.5, 1e-15);
  cfg.passes = 2;
  EXPECT_NEAR(PolicyValue(FitPolicyTree(x, r, cfg), x, r), 1.0, 1e-15);
}

TEST(FitPolicyTree, FourRowsMatchExhaustiveSearch) {
  Matrix x(4, 2);
  x << 1, 5, 2, 3, 3, 4, 4, 1;
  Matrix r(4, 2);
  r << 0.2, 0.7, 0.8, 0.1, 0.3, 0.9, 0.6, 0.5;
  EXPECT_NEAR(PolicyValue(FitPolicyTree(x, r, Small(2)), x, r),
              oracle::BestTreeValue(x, r, 2, 1), 1e-12);
}

TEST(FitPolicyTree, OracleEquivalenceSmall) {
  Rng rng(31);
  for (int rep = 0; rep < 100; ++rep) {
    auto [x, r] = oracle::RandomTreeInstance(rng);
    const int depth = 1 + static_cast<int>(rng.Index(2));
    const PolicyTree t = FitPolicyTree(x, r, Small(depth));
    EXPECT_NEAR(PolicyValue(t, x, r), oracle::BestTreeValue(x, r, depth, 1), 1e-12) << rep;
  }
}

TEST(FitPolicyTree, StructuralInvariants) {
  Rng rng(8);
  const int n = 200;
  Matrix x(n, 3), r(n, 2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < 3; ++j) x(i, j) = rng.Uniform() * 10;
    r(i, 0) = 0.5;
    r(i, 1) = x(i, 0) < 4 ? 0.8 : 0.3 + 0.1 * rng.Uniform();
  }
  const PolicyTreeConfig cfg = Small(3, 15);
  const PolicyTree t = FitPolicyTree(x, r, cfg);
  EXPECT_LE(t.Depth(), 3);
  for (const auto& node : t.nodes) {
    if (!node.is_leaf()) continue;
    EXPECT_GE(node.n, 15u);
    EXPECT_EQ(node.treatment, node.mean_treatment > node.mean_control ? 1 : 0);
  }
  const double root_only = std::max(r.col(0).mean(), r.col(1).mean());
  EXPECT_GE(PolicyValue(t, x, r), root_only);
  PolicyTreeConfig greedy = cfg;
  greedy.passes = 0;
  EXPECT_GE(PolicyValue(t, x, r), PolicyValue(FitPolicyTree(x, r, greedy), x, r));
}

TEST(FitPolicyTree, TooFewRowsGiveRootOnly) {
  Matrix x = Matrix::Random(5, 2);
  Matrix r(5, 2);
  r << 0.1, 0.9, 0.9, 0.1, 0.2, 0.8, 0.7, 0.3, 0.5, 0.5;
  EXPECT_EQ(FitPolicyTree(x, r, Small(3, 3)).nodes.size(), 1u);
}

TEST(FitPolicyTree, InvalidRewards) {
  Matrix x = Matrix::Zero(2, 1);
  Matrix r(2, 2);
  r << 0.1, 1.2, 0.3, 0.4;
  try {
    FitPolicyTree(x, r, Small(1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidRewards);
  }
}

TEST(FitPolicyTree, TiedLeafGoesToControl) {
  Matrix x = Matrix::Zero(3, 1);
  Matrix r(3, 2);
  r << 0.5, 0.5, 0.2, 0.2, 0.7, 0.7;
  EXPECT_EQ(FitPolicyTree(x, r, Small(2)).node(1).treatment, 0);
}

TEST(Assign, Routing) {
  PolicyTree t;
  t.n_features = 1;
  PolicyNode root;
  root.feature = 0;
  root.threshold = 12.5;
  root.left = 2;
  root.right = 3;
  PolicyNode l, r;
  l.id = 2;
  l.depth = 1;
  l.treatment = 1;
  r.id = 3;
  r.depth = 1;
  t.nodes = {root, l, r};
  Matrix x(2, 1);
  x << 10, 12.5;
  const TreeAssignment a = Assign(t, x);
  EXPECT_EQ(a.leaf, (std::vector<int>{2, 3}));
  EXPECT_EQ(a.treatment(0), 1);
  EXPECT_EQ(a.treatment(1), 0);
  EXPECT_THROW(Assign(t, Matrix::Zero(1, 2)), Error);
}

TEST(Assign, RootOnlyTreatsEveryone) {
  PolicyTree t;
  t.n_features = 2;
  PolicyNode leaf;
  leaf.treatment = 1;
  t.nodes = {leaf};
  EXPECT_TRUE((Assign(t, Matrix::Random(7, 2)).treatment.array() == 1).all());
}

TEST(Concordance, Examples) {
  Matrix x(4, 1);
  x << 0, 0, 1, 1;
  Matrix r(4, 2);
  r << 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9;
  EXPECT_EQ(Concordance(FitPolicyTree(x, r, Small(1)), r, x), 1.0);
  EXPECT_EQ(Concordance(FitPolicyTree(x, r, Small(0)), r, x), 0.5);
  r(0, 1) = 0.9;  // tie agrees with any assignment
  EXPECT_EQ(Concordance(FitPolicyTree(x, r, Small(0)), r, x), 0.75);
}

TEST(Concordance, OverlapArithmetic) {
  IntVector preferred = IntVector::Zero(216), assigned = IntVector::Zero(216);
  preferred.head(186).setOnes();
  assigned.head(177).setOnes();
  EXPECT_NEAR(AssignmentOverlap(preferred, assigned), 177.0 / 186.0, 1e-15);
  EXPECT_NEAR(AssignmentOverlap(preferred, assigned), 0.952, 5e-4);
}

TEST(SelectTree, Rules) {
  Matrix x(4, 1);
  x << 0, 0, 1, 1;
  Matrix r(4, 2);
  r << 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9;
  const TreeCandidate split{Small(1), FitPolicyTree(x, r, Small(1))};
  const TreeCandidate deep{Small(3), FitPolicyTree(x, r, Small(3))};
  const TreeCandidate root{Small(0), FitPolicyTree(x, r, Small(0))};
  EXPECT_EQ(SelectTree({root}, r, x), 0u);
  EXPECT_EQ(SelectTree({split, root}, r, x), 0u);
  EXPECT_EQ(SelectTree({root, split}, r, x), 1u);
  EXPECT_EQ(SelectTree({deep, split}, r, x), 1u);  // same tree, lower max_depth
  EXPECT_THROW(SelectTree({}, r, x), Error);
  TreeCandidate bad = split;
  bad.config.min_leaf = 3;
  EXPECT_EQ(SelectTree({bad, root}, r, x), 1u);
}

TEST(SelectTree, FewerLeavesWinTies) {
  Matrix x(6, 1);
  x << 0, 1, 2, 3, 4, 5;
  Matrix r(6, 2);
  r << 0.9, 0.1, 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9, 0.1, 0.9;
  PolicyTree three = FitPolicyTree(x, r, Small(1));
  // Same assignment split once more on the right.
  PolicyTree five = three;
  five.nodes[2].feature = 0;
  five.nodes[2].threshold = 4.5;
  five.nodes[2].left = 4;
  five.nodes[2].right = 5;
  PolicyNode a = three.nodes[2], b = three.nodes[2];
  a.id = 4;
  b.id = 5;
  a.depth = b.depth = 2;
  five.nodes.push_back(a);
  five.nodes.push_back(b);
  EXPECT_EQ(SelectTree({{Small(2), five}, {Small(2), three}}, r, x), 1u);
}

TEST(SubgroupReport, EffectsAndFlags) {
  Matrix x(4, 1);
  x << 0, 0, 1, 1;
  Matrix r(4, 2);
  r << 0.34, 0.49, 0.34, 0.49, 0.40, 0.42, 0.40, 0.42;
  PolicyTree t;
  t.n_features = 1;
  t.nodes.resize(3);
  t.nodes[0].feature = 0;
  t.nodes[0].threshold = 0.5;
  t.nodes[0].left = 2;
  t.nodes[0].right = 3;
  for (int k : {1, 2}) {
    t.nodes[static_cast<std::size_t>(k)].id = k + 1;
    t.nodes[static_cast<std::size_t>(k)].treatment = 1;
  }
  IntVector received(4);
  received << 1, 1, 0, 1;
  const auto rep = SubgroupReport(t, x, received, r, 0.05);
  ASSERT_EQ(rep.size(), 2u);
  EXPECT_NEAR(rep[0].effect, 0.15, 1e-12);
  EXPECT_FALSE(rep[0].flagged);
  EXPECT_TRUE(rep[0].recommended);
  EXPECT_EQ(rep[0].n_control, 0u);
  EXPECT_EQ(rep[0].n_treated, 2u);
  EXPECT_NEAR(rep[1].effect, 0.02, 1e-12);
  EXPECT_TRUE(rep[1].flagged);
}

TEST(Export, JsonRoundTripAndText) {
  Matrix x(4, 1);
  x << 0, 0, 1, 1;
  Matrix r(4, 2);
  r << 0.9, 0.1, 0.9, 0.1, 0.1, 0.9, 0.1, 0.9;
  const PolicyTree t = FitPolicyTree(x, r, Small(1));
  const std::string json = PolicyTreeToJson(t, {"dfi_months"});
  const PolicyTree back = PolicyTreeFromJson(json);
  EXPECT_EQ(PolicyTreeToJson(back, {"dfi_months"}), json);
  EXPECT_EQ(RenderPolicyTree(t, {"dfi_months"}),
            "node 1: dfi_months < 0.5 (n=4)\n"
            "  node 2: control (n=2, control=0.9000, treatment=0.1000, effect=-0.8000)\n"
            "  node 3: treat (n=2, control=0.1000, treatment=0.9000, effect=0.8000)\n");
}
