#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trialemu/cohort.hpp"
#include "trialemu/counterfactual.hpp"
#include "trialemu/learner.hpp"
#include "trialemu/policy_tree.hpp"
#include "trialemu/stratify_match.hpp"
#include "trialemu/survival_stats.hpp"

namespace trialemu {

// Covariate columns feeding the clinical risk scores of the balance audit.
struct RiskScoreFields {
  std::string node_positive;
  std::string dfi_months;
  std::string n_tumors;
  std::string max_size_cm;
  std::string cea_ng_ml;
  std::string kras_mutated;
};

struct PipelineConfig {
  std::string cohort_path;
  std::string trial_path;
  std::string validation_cohort_path;  // optional held-out cohort, e.g. a simulated trial
  std::optional<CovariateSchema> schema;
  std::vector<EligibilityRule> extra_eligibility;
  std::uint64_t seed = 0;

  LearnerConfig xray;
  // Untreated training rows get out-of-fold risks from this many folds; 0 or 1
  // scores them in-sample.
  int xray_folds = 5;
  std::vector<double> bucket_boundaries{0.0, 1.0};
  std::optional<std::vector<int>> quotas;  // nullopt = automatic
  double alpha_max = 1.0;

  SolveOptions matching;
  std::vector<std::string> distance_covariates;
  ObjectiveWeights weights;

  LearnerConfig counterfactual;
  std::vector<int> tune_arms{0, 1};
  TuneOptions tuning;

  std::optional<double> constraint_factor;
  ConstraintDirection constraint_direction = ConstraintDirection::kFavorTreatment;

  std::vector<PolicyTreeConfig> tree_grid{PolicyTreeConfig{}};
  std::vector<std::string> tree_features;  // empty = every covariate
  double min_effect = 0.05;

  std::optional<RiskScoreFields> risk_scores;

  void Validate() const;
};

// Relative paths inside the config resolve against `base_dir`.
PipelineConfig ParsePipelineConfig(const std::string& json_text, const std::string& base_dir = ".");
PipelineConfig LoadPipelineConfig(const std::string& path);

// Stage names in execution order.
const std::vector<std::string>& StageOrder();

CovariateSchema ParseSchemaJson(const std::string& json_text);
std::string SchemaToJson(const CovariateSchema& schema);

struct GroupComparison {
  std::string cohort;  // "matched" or "validation"
  std::string group;   // "recommended" or "advised_against"
  std::size_t n_control = 0;
  std::size_t n_treated = 0;
  std::optional<double> event_free_control;  // KM at the horizon
  std::optional<double> event_free_treated;
  std::optional<LogRankResult> logrank;
};

struct PipelineState {
  CovariateSchema schema;
  TrialConfig trial;
  Cohort eligible;
  std::vector<std::size_t> excluded_per_rule;

  FittedEnsemble xray;
  Vector risks;  // per eligible row
  std::vector<int> buckets;
  QuotaReport quotas;

  MatchProblem problem;
  MatchSolution solution;
  SolveStats solve_stats;
  Cohort matched;

  std::vector<TuneResult> tuning;
  RewardPair rewards_models;
  RewardMatrix rewards;
  RewardMatrix constrained;

  std::vector<TreeCandidate> candidates;
  std::size_t selected = 0;
  PolicyTree tree;

  std::vector<LeafReport> subgroups;
  std::vector<GroupComparison> comparisons;
  std::vector<std::string> warnings;
};

// Runs every stage up to and including `until` (all stages when empty),
// writing artifacts and manifest.json into `out_dir`.
PipelineState RunPipeline(const PipelineConfig& config, const std::string& out_dir,
                          const std::string& until = "");

// Runs one stage from the upstream artifacts in `out_dir`, after checking
// their hashes against the manifest.
void RunStage(const PipelineConfig& config, const std::string& out_dir, const std::string& stage);

// Writes the 4-decimal report bundle into out_dir/report.
void WriteReport(const std::string& out_dir);

// Exit status for an error category.
int ExitCode(ErrorKind kind);

}  // namespace trialemu
