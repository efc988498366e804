#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "trialemu/cohort.hpp"
#include "trialemu/core.hpp"
#include "trialemu/learner.hpp"

namespace trialemu {

// Per-arm outcome models on the matched cohort. Both predict the event-free
// probability at the horizon; rho_a multiplies the weight of event-free
// training patients of arm a.
struct RewardPair {
  FittedEnsemble model0;
  FittedEnsemble model1;
  double rho0 = 1.0;
  double rho1 = 1.0;
  double hbar0 = 0.0;  // mean model0 prediction over every matched patient
  double hbar1 = 0.0;
  std::vector<std::string> warnings;
};

// Fits the model of one arm. A single-class arm falls back to a constant
// model and appends a warning.
FittedEnsemble FitArmModel(const Cohort& matched, int arm, double horizon_months,
                           const LearnerConfig& config, double rho,
                           std::vector<std::string>* warnings = nullptr);

// Mean predicted event-free probability over all rows of `cohort`.
double MeanReward(const FittedEnsemble& model, const Cohort& cohort);

RewardPair FitCounterfactuals(const Cohort& matched, double horizon_months,
                              const LearnerConfig& config, double rho0 = 1.0, double rho1 = 1.0);

struct TuneOptions {
  double tol = 0.005;
  double rho_max = 5.0;
  int max_refits = 15;  // bisection budget, counting the rho = 1 and rho_max fits
  double grid_step = 0.05;

  void Validate() const;
};

enum class TuneStatus {
  kWithinTolerance,
  kOvershoot,     // hbar(1) already exceeds target + tol; rho stays 1
  kGridFallback,  // bisection failed, result from the grid scan
};

const char* ToString(TuneStatus status);

struct TuneStep {
  double rho = 1.0;
  double hbar = 0.0;
  std::string phase;  // "initial", "upper", "bisect" or "grid"
};

struct TuneResult {
  int arm = 1;
  double target = 0.0;
  double rho = 1.0;
  double hbar = 0.0;
  TuneStatus status = TuneStatus::kWithinTolerance;
  int refits = 0;
  std::vector<TuneStep> trace;
  std::vector<std::string> warnings;
  FittedEnsemble model;
};

// Smallest explored rho in [1, rho_max] whose arm mean reward lies within tol
// of `target`. Throws kUnreachableTarget with the residual gap when rho_max
// still falls short.
TuneResult TuneWeight(const Cohort& matched, int arm, double target, double horizon_months,
                      const LearnerConfig& config, const TuneOptions& options = {});

std::string TuneTraceJson(const std::vector<TuneResult>& results);

// Rewards per matched patient: column 0 control, column 1 treatment.
struct RewardMatrix {
  std::vector<std::string> ids;
  Matrix rewards;
  double horizon_months = 60.0;
  std::string model0_digest;
  std::string model1_digest;

  std::size_t size() const { return ids.size(); }
};

RewardMatrix BuildRewardMatrix(const RewardPair& pair, const Cohort& matched,
                               double horizon_months);

enum class ConstraintDirection { kFavorTreatment, kFavorControl };

ConstraintDirection ParseConstraintDirection(std::string_view text);
std::string ToString(ConstraintDirection direction);

// favor-treatment: rows with r0 > r1 get r0 = c * r1. favor-control mirrors it.
RewardMatrix ConstrainRewards(const RewardMatrix& matrix, double factor,
                              ConstraintDirection direction);

void WriteRewardCsv(std::ostream& out, const RewardMatrix& matrix);
RewardMatrix ReadRewardCsv(std::istream& in, const std::string& source = "rewards");

}  // namespace trialemu
