#include "trialemu/stratify_match.hpp"

#include <gtest/gtest.h>

#include <sstream>

#include "oracles/match_oracle.hpp"

using namespace trialemu;

namespace {

// One covariate column; rows listed as (treated, bucket, risk, x).
MatchProblem Make(const std::vector<std::tuple<int, int, double, double>>& rows,
                  std::vector<int> quotas, double target_risk) {
  MatchProblem p;
  const auto n = static_cast<Eigen::Index>(rows.size());
  p.treatment.resize(n);
  p.risk.resize(n);
  p.covariates.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& [t, k, w, x] = rows[static_cast<std::size_t>(i)];
    p.ids.push_back("p" + std::to_string(i));
    p.treatment(i) = t;
    p.bucket.push_back(k);
    p.risk(i) = w;
    p.covariates(i, 0) = x;
  }
  p.quotas = std::move(quotas);
  p.target_risk = target_risk;
  p.Prepare();
  return p;
}

}  // namespace

TEST(AssignBuckets, HalfOpenWithClosedTop) {
  Vector w(4);
  w << 0.15, 0.2, 1.0, 0.0;
  const auto b = AssignBuckets(w, {0.0, 0.2, 0.4, 1.0});
  EXPECT_EQ(b, (std::vector<int>{0, 1, 2, 0}));
}

TEST(AssignBuckets, RejectsBadBoundaries) {
  Vector w = Vector::Constant(1, 0.5);
  EXPECT_THROW(AssignBuckets(w, {0.0, 0.5, 0.5, 1.0}), Error);
  EXPECT_THROW(AssignBuckets(w, {0.1, 1.0}), Error);
}

TEST(DefaultQuotas, MinRule) {
  // Bucket 0: 5 treated, 4 untreated; bucket 1: 3 treated, 9 untreated.
  std::vector<int> buckets;
  IntVector t(21);
  int r = 0;
  auto add = [&](int arm, int k, int count) {
    for (int c = 0; c < count; ++c) {
      t(r++) = arm;
      buckets.push_back(k);
    }
  };
  add(1, 0, 5);
  add(0, 0, 4);
  add(1, 1, 3);
  add(0, 1, 9);
  const Vector w = Vector::Constant(21, 0.4);
  const QuotaReport q = DefaultQuotas(w, t, buckets, 2, 0.4, 0.02);
  EXPECT_EQ(q.quotas, (std::vector<int>{4, 3}));
  EXPECT_EQ(q.alpha, 1.0);
}

TEST(DefaultQuotas, EmptySideGivesZero) {
  IntVector t(3);
  t << 1, 0, 1;
  const auto q = DefaultQuotas(Vector::Constant(3, 0.5), t, {0, 0, 1}, 2, 0.5, 0.02);
  EXPECT_EQ(q.quotas, (std::vector<int>{1, 0}));
}

TEST(DefaultQuotas, ScalesDownUntilReachable) {
  // Twenty pairs per arm; only 5 low-risk patients each. Full quota forces
  // mean risk 0.75; target 0.5 needs the low-risk rows to carry weight.
  IntVector t(40);
  Vector w(40);
  for (int i = 0; i < 40; ++i) {
    t(i) = i < 20;
    w(i) = (i % 20) < 5 ? 0.2 : 0.9;
  }
  const std::vector<int> buckets(40, 0);
  const auto q = DefaultQuotas(w, t, buckets, 1, 0.5, 0.02);
  // 5 rows at 0.2 plus m at 0.9 has mean <= 0.52 when m <= 4, so q = 9,
  // first reached at alpha = 0.49 on the 0.01 grid.
  EXPECT_EQ(q.quotas[0], 9);
  EXPECT_NEAR(q.alpha, 0.49, 1e-12);
  EXPECT_THROW(DefaultQuotas(w, t, buckets, 1, 0.05, 0.02), Error);
}

TEST(Objective, ZeroWhenEverythingOnTarget) {
  MatchProblem p = Make({{1, 0, 0.6, 0.5}, {0, 0, 0.6, 0.5}}, {1}, 0.6);
  p.covariate_targets.push_back({0, "x", 0.5, 0.5});
  const auto b = EvaluateObjective(p, {{0, 1, 0}});
  EXPECT_EQ(b.total, 0.0);
}

TEST(Objective, OutcomeDeviation) {
  MatchProblem p = Make({{1, 0, 0.7, 0.5}, {0, 0, 0.6, 0.5}}, {1}, 0.6);
  p.weights.outcome = 2.0;
  const auto b = EvaluateObjective(p, {{0, 1, 0}});
  EXPECT_NEAR(b.outcome_treated, 0.1, 1e-15);
  EXPECT_NEAR(b.total, 0.2, 1e-15);
}

TEST(Objective, TwoPairHandValue) {
  MatchProblem p = Make({{1, 0, 0.2, 1.0}, {1, 0, 0.5, 0.0}, {0, 0, 0.4, 1.0}, {0, 0, 0.1, 0.0}},
                        {2}, 0.3);
  p.covariate_targets.push_back({0, "x", 0.25, 0.75});
  p.distance_columns = {0};
  p.Prepare();
  const auto b = EvaluateObjective(p, {{0, 3, 0}, {1, 2, 0}});
  // Means: w_T 0.35, w_U 0.25, x_T 0.5, x_U 0.5. Variance of x is 1/3, so
  // each mismatched pair contributes 3; two pairs over (2 pairs * 1 col).
  const double hand = 0.05 + 0.05 + 0.25 + 0.25 + 6.0 / 2.0;
  EXPECT_NEAR(b.total, hand, 1e-12);
  EXPECT_NEAR(b.distance_sum, 6.0, 1e-12);
}

TEST(Objective, EmptySelectionScoresZero) {
  MatchProblem p = Make({{1, 0, 0.2, 1.0}, {0, 1, 0.4, 1.0}}, {0, 0}, 0.3);
  EXPECT_EQ(EvaluateObjective(p, {}).total, 0.0);
}

TEST(Validate, NamesViolatedConstraint) {
  MatchProblem p = Make({{1, 0, 0.2, 1}, {0, 0, 0.4, 1}, {1, 1, 0.3, 1}, {0, 1, 0.3, 1}},
                        {1, 1}, 0.3);
  auto message = [&](const std::vector<MatchPair>& pairs) {
    try {
      ValidateSolution(p, pairs);
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kInvalidSolution);
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message({{0, 3, 0}, {2, 1, 1}}).find("same-bucket"), std::string::npos);
  EXPECT_NE(message({{0, 1, 0}}).find("quota"), std::string::npos);
  EXPECT_NE(message({{0, 1, 0}, {0, 1, 0}}).find("at-most-one"), std::string::npos);
  EXPECT_NO_THROW(ValidateSolution(p, {{0, 1, 0}, {2, 3, 1}}));
}

TEST(Prepare, QuotaAboveCapacityIsInfeasible) {
  try {
    Make({{1, 0, 0.2, 1}, {0, 0, 0.4, 1}}, {2}, 0.3);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInfeasibleTarget);
  }
}

TEST(Solve, SinglePossiblePair) {
  const MatchProblem p = Make({{1, 0, 0.2, 1}, {0, 0, 0.4, 1}}, {1}, 0.3);
  for (SolveMode mode : {SolveMode::kHeuristic, SolveMode::kExact}) {
    const auto s = Solve(p, {mode});
    ASSERT_EQ(s.pairs.size(), 1u);
    EXPECT_EQ(s.pairs[0], (MatchPair{0, 1, 0}));
  }
}

TEST(Solve, CrossBucketForbidden) {
  const MatchProblem p = Make({{1, 0, 0.2, 1}, {0, 1, 0.4, 1}}, {0, 0}, 0.3);
  EXPECT_TRUE(Solve(p, {SolveMode::kHeuristic}).pairs.empty());
  EXPECT_TRUE(Solve(p, {SolveMode::kExact}).pairs.empty());
}

TEST(Solve, FourByFourHeuristicFindsOptimum) {
  MatchProblem p = Make({{1, 0, 0.1, 0.0}, {1, 0, 0.5, 1.0}, {1, 0, 0.7, 2.0}, {1, 0, 0.9, 0.5},
                         {0, 0, 0.3, 1.5}, {0, 0, 0.6, 0.2}, {0, 0, 0.8, 1.9}, {0, 0, 0.2, 0.9}},
                        {2}, 0.45);
  p.covariate_targets.push_back({0, "x", 1.0, 0.8});
  p.distance_columns = {0};
  p.Prepare();
  const double best = oracle::BruteForceOptimum(p);
  EXPECT_NEAR(Solve(p, {SolveMode::kHeuristic}).objective(), best, 1e-12);
  EXPECT_NEAR(Solve(p, {SolveMode::kExact}).objective(), best, 1e-12);
  EXPECT_DOUBLE_EQ(CountFeasibleMatchings(p), 6.0 * 6.0 * 2.0);
}

TEST(Solve, ExactMatchesBruteForceOnRandomInstances) {
  Rng rng(2024);
  for (int rep = 0; rep < 40; ++rep) {
    const MatchProblem p = oracle::RandomInstance(rng);
    const auto exact = Solve(p, {SolveMode::kExact});
    EXPECT_NEAR(exact.objective(), oracle::BruteForceOptimum(p), 1e-9) << rep;
  }
}

TEST(Solve, HeuristicInvariants) {
  Rng rng(77);
  for (int rep = 0; rep < 30; ++rep) {
    const MatchProblem p = oracle::RandomInstance(rng);
    SolveStats stats;
    SolveOptions opt;
    opt.seed = static_cast<std::uint64_t>(rep);
    const auto s = Solve(p, opt, &stats);
    EXPECT_NO_THROW(ValidateSolution(p, s.pairs));
    EXPECT_LE(s.objective(), stats.greedy_objective + 1e-12);
    for (std::size_t k = 1; k < stats.trajectory.size(); ++k) {
      EXPECT_LT(stats.trajectory[k], stats.trajectory[k - 1]);
    }
    const auto again = Solve(p, opt);
    EXPECT_EQ(again.pairs, s.pairs);
  }
}

TEST(Solve, ExactRefusesLargeInstances) {
  std::vector<std::tuple<int, int, double, double>> rows;
  for (int i = 0; i < 30; ++i) rows.push_back({i < 15, 0, 0.3, double(i)});
  const MatchProblem p = Make(rows, {7}, 0.3);
  try {
    Solve(p, {SolveMode::kExact});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInstanceTooLarge);
  }
}

TEST(Solve, PlantedTargetsAttained) {
  // Half of each arm sits exactly on target; the rest is far off.
  Rng rng(5);
  std::vector<std::tuple<int, int, double, double>> rows;
  for (int arm = 0; arm < 2; ++arm) {
    for (int i = 0; i < 40; ++i) {
      const bool good = i < 20;
      const double w = good ? (i % 2 ? 0.35 : 0.45) : 0.8 + 0.1 * rng.Uniform();
      const double x = good ? (i % 4 < 2 ? 1.0 : 0.0) : 1.0;
      rows.push_back({arm, 0, w, x});
    }
  }
  MatchProblem p = Make(rows, {20}, 0.4);
  p.covariate_targets.push_back({0, "x", 0.5, 0.5});
  p.weights.distance = 0.0;
  p.Prepare();
  const auto s = Solve(p, {});
  EXPECT_LE(s.breakdown.outcome_treated, 0.02);
  EXPECT_LE(s.breakdown.outcome_untreated, 0.02);
  EXPECT_LE(s.breakdown.covariate_treated[0], 0.03);
  EXPECT_LE(s.breakdown.covariate_untreated[0], 0.03);
}

TEST(Export, CsvAndReport) {
  const MatchProblem p = Make({{1, 0, 0.2, 1}, {0, 0, 0.4, 1}}, {1}, 0.7);
  const auto s = Solve(p, {});
  std::ostringstream csv;
  WriteMatchCsv(csv, p, s);
  EXPECT_EQ(csv.str(), "treated_id,untreated_id,bucket\np0,p1,0\n");
  TrialTarget target;
  target.mu0 = 0.3;
  const std::string json = MatchReportJson(p, s, target);
  EXPECT_NE(json.find("achieved_vs_target"), std::string::npos);
  EXPECT_NE(json.find("baseline_event_free"), std::string::npos);
}
