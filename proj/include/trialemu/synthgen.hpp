#pragma once

#include <cstdint>
#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "trialemu/cohort.hpp"
#include "trialemu/core.hpp"

namespace trialemu {

enum class Distribution { kBernoulli, kNormal, kLogNormal, kPoissonPlusOne };

struct CovariateSpec {
  std::string name;
  std::string unit;
  Distribution distribution = Distribution::kNormal;
  double p = 0.5;       // Bernoulli probability
  double mean = 0.0;    // normal mean, log-scale mean for lognormal, Poisson mean
  double sd = 1.0;
  double lower = -std::numeric_limits<double>::infinity();
  double upper = std::numeric_limits<double>::infinity();
  double risk_coef = 0.0;  // log-hazard per unit above `center`
  double center = 0.0;
};

struct SubgroupRule {
  std::string covariate;
  double threshold = 0.0;
  bool below = true;          // members satisfy x < threshold, else x >= threshold
  double multiplier = 1.0;    // treated hazard multiplier inside the subgroup
};

struct DGPConfig {
  int n_obs = 2000;
  int n_rct = 10000;
  std::vector<CovariateSpec> covariates;
  double gamma_u = 0.0;  // unobserved confounder on treatment log-odds and log-hazard
  double gamma_x = 0.0;  // observed risk score on treatment log-odds
  double treatment_intercept = 0.0;
  double base_hazard = 0.01;           // events per month at zero risk score
  double treatment_multiplier = 1.0;   // treated hazard multiplier outside the subgroup
  std::optional<SubgroupRule> subgroup;
  double censoring_rate = 0.0;  // per month
  double max_follow_up = 120.0;
  double horizon_months = 60.0;
  // Covariates whose RCT arm means become matching targets; empty means every
  // binary covariate.
  std::vector<std::string> targeted_covariates;
  std::uint64_t seed = 1;

  void Validate() const;
  CovariateSchema Schema() const;
  double RiskScore(const double* x) const;
  bool InSubgroup(const double* x) const;
  // Hazard multiplier a treated patient with covariates x receives.
  double EffectMultiplier(const double* x) const;
};

DGPConfig ParseDGPConfig(const std::string& json_text);
DGPConfig LoadDGPConfig(const std::string& path);
std::string DGPConfigToJson(const DGPConfig& config);

// Unobserved quantities kept out of every Cohort export.
struct GroundTruth {
  std::vector<std::string> ids;
  std::vector<double> u;
  std::vector<double> effect_multiplier;
};

struct SyntheticCohort {
  Cohort cohort;
  GroundTruth truth;
};

// Confounded cohort: treatment ~ logistic(intercept + gamma_x*risk + gamma_u*u).
SyntheticCohort GenerateObservational(const DGPConfig& config);

struct SyntheticTrial {
  TrialTarget target;
  Cohort cohort;
  GroundTruth truth;
};

// Randomized 1:1 cohort from the same DGP. mu0/mu1 are KM event-free rates at
// the horizon; covariate targets are per-arm means.
SyntheticTrial GenerateRctTarget(const DGPConfig& config);

void WriteGroundTruthCsv(std::ostream& out, const GroundTruth& truth);

// Mean true event-free probability at the horizon per arm, averaged over a
// fixed sample of n draws of (x, u).
std::pair<double, double> TrueEventFreeRates(const DGPConfig& config, int n = 200000);

// Sets base_hazard, then treatment_multiplier, so TrueEventFreeRates hits
// (mu0, mu1).
void CalibrateHazards(DGPConfig& config, double mu0, double mu1, int n = 200000);

}  // namespace trialemu
