#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "trialemu/cohort.hpp"
#include "trialemu/core.hpp"

namespace trialemu {

// Risk buckets [b_k, b_{k+1}); the last bucket is closed at the top.
struct BucketSpec {
  std::vector<double> boundaries{0.0, 1.0};
  std::vector<int> quotas;  // pairs to select per bucket

  std::size_t size() const { return boundaries.empty() ? 0 : boundaries.size() - 1; }
  void Validate() const;
};

std::vector<int> AssignBuckets(const Vector& risks, const std::vector<double>& boundaries);

struct QuotaReport {
  std::vector<int> quotas;
  double alpha = 1.0;
  std::vector<int> treated_per_bucket;
  std::vector<int> untreated_per_bucket;
};

// Largest alpha in (0, alpha_max] on a 0.01 grid such that, with quotas
// floor(alpha * min(|S1^k|, |S0^k|)), each arm's selectable mean risk range
// reaches within `tolerance` of `target_risk`.
QuotaReport DefaultQuotas(const Vector& risks, const IntVector& treatment,
                          const std::vector<int>& buckets, std::size_t n_buckets,
                          double target_risk, double tolerance, double alpha_max = 1.0);

struct ObjectiveWeights {
  double outcome = 1.0;
  double covariate = 1.0;
  double distance = 1.0;
};

struct CovariateTarget {
  std::size_t column = 0;
  std::string name;
  std::optional<double> arm0;
  std::optional<double> arm1;
};

// Candidate patients for matching. Rows index every array below.
struct MatchProblem {
  std::vector<std::string> ids;
  IntVector treatment;
  Vector risk;  // baseline event risk w
  Matrix covariates;
  std::vector<int> bucket;
  std::vector<int> quotas;
  // Event risk the selected arms should average: 1 - mu0, because mu0 is an
  // event-free rate while w is an event probability.
  double target_risk = 0.0;
  std::vector<CovariateTarget> covariate_targets;
  std::vector<std::size_t> distance_columns;
  ObjectiveWeights weights;

  // Distance covariates scaled to unit variance over all rows.
  Matrix distance_features;

  std::size_t size() const { return ids.size(); }
  std::size_t n_buckets() const { return quotas.size(); }
  int total_pairs() const;
  // Squared Euclidean distance on the standardized distance covariates.
  double PairDistance(std::size_t treated, std::size_t untreated) const;
  // Computes distance_features and checks structural invariants.
  void Prepare();
};

MatchProblem BuildMatchProblem(const Cohort& cohort, const Vector& risks,
                               const std::vector<int>& buckets, const std::vector<int>& quotas,
                               const TrialTarget& target,
                               const std::vector<std::string>& distance_covariates,
                               const ObjectiveWeights& weights);

struct MatchPair {
  std::size_t treated = 0;    // problem row
  std::size_t untreated = 0;  // problem row
  int bucket = 0;

  auto operator<=>(const MatchPair&) const = default;
};

struct ObjectiveBreakdown {
  std::size_t n_pairs = 0;
  double outcome_treated = 0.0;    // |target_risk - mean w over selected treated|
  double outcome_untreated = 0.0;  // |target_risk - mean w over selected untreated|
  std::vector<double> covariate_treated;    // per covariate target, 0 when absent
  std::vector<double> covariate_untreated;
  double distance_sum = 0.0;  // raw sum of squared pair distances
  double total = 0.0;         // weighted objective

  double mean_risk_treated = 0.0;
  double mean_risk_untreated = 0.0;
  std::vector<double> mean_covariate_treated;
  std::vector<double> mean_covariate_untreated;
};

struct MatchSolution {
  std::vector<MatchPair> pairs;  // sorted by (treated, untreated)
  ObjectiveBreakdown breakdown;
  double objective() const { return breakdown.total; }
};

// Throws kInvalidSolution naming the first violated constraint.
void ValidateSolution(const MatchProblem& problem, const std::vector<MatchPair>& pairs);
// Validates, then evaluates every objective group. An empty selection scores 0.
ObjectiveBreakdown EvaluateObjective(const MatchProblem& problem,
                                     const std::vector<MatchPair>& pairs);

enum class SolveMode { kHeuristic, kExact };

struct SolveOptions {
  SolveMode mode = SolveMode::kHeuristic;
  std::uint64_t seed = 0;
  std::int64_t move_budget = 1'000'000;  // local-search move evaluations per restart
  int restarts = 4;                      // restart 0 is greedy, the rest random
  double exact_size_cap = 1e7;
};

struct SolveStats {
  std::int64_t moves_evaluated = 0;
  std::int64_t moves_accepted = 0;
  std::int64_t nodes_expanded = 0;
  double greedy_objective = 0.0;
  // Objective after every accepted move of the winning restart.
  std::vector<double> trajectory;
};

// Number of distinct feasible matchings, the exact-mode size measure.
double CountFeasibleMatchings(const MatchProblem& problem);

MatchSolution Solve(const MatchProblem& problem, const SolveOptions& options,
                    SolveStats* stats = nullptr);

void WriteMatchCsv(std::ostream& out, const MatchProblem& problem, const MatchSolution& solution);
std::string MatchReportJson(const MatchProblem& problem, const MatchSolution& solution,
                            const TrialTarget& target);

}  // namespace trialemu
