#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "trialemu/core.hpp"

namespace trialemu {

enum class CovariateKind { kBinary, kContinuous };

struct CovariateSchema {
  std::vector<std::string> names;
  std::vector<CovariateKind> kinds;
  std::vector<std::string> units;

  std::size_t size() const { return names.size(); }
  std::optional<std::size_t> IndexOf(std::string_view name) const;
  // Throws kSchema on a required name that is absent.
  std::size_t Require(std::string_view name) const;
  // Names unique, field lengths consistent.
  void Validate() const;

  static CovariateSchema Continuous(std::vector<std::string> names);
};

struct Patient {
  std::string id;
  std::vector<double> covariates;
  int treatment = 0;
  int event = 0;
  double time = 0.0;
};

// Column store for n patients over an L-covariate schema. Immutable once
// constructed; every constructor validates the Patient invariants.
class Cohort {
 public:
  Cohort() = default;
  Cohort(CovariateSchema schema, const std::vector<Patient>& patients);
  Cohort(CovariateSchema schema, std::vector<std::string> ids, Matrix covariates,
         IntVector treatment, IntVector event, Vector time);

  std::size_t size() const { return ids_.size(); }
  bool empty() const { return ids_.empty(); }
  const CovariateSchema& schema() const { return schema_; }
  const std::vector<std::string>& ids() const { return ids_; }
  const Matrix& covariates() const { return covariates_; }
  const IntVector& treatment() const { return treatment_; }
  const IntVector& event() const { return event_; }
  const Vector& time() const { return time_; }

  Patient patient(std::size_t row) const;
  Cohort Subset(const std::vector<std::size_t>& rows) const;
  // Row indices of patients with the given treatment flag, ascending.
  std::vector<std::size_t> Arm(int treatment) const;
  // Row index of an id, throws kSchema if absent.
  std::size_t RowOf(const std::string& id) const;

 private:
  void Validate();

  CovariateSchema schema_;
  std::vector<std::string> ids_;
  Matrix covariates_;
  IntVector treatment_;
  IntVector event_;
  Vector time_;
  std::map<std::string, std::size_t> row_of_;
};

// Reserved CSV columns, in canonical order.
inline constexpr const char* kReservedColumns[] = {"id", "treatment", "event", "time"};

Cohort ReadCohort(std::istream& in, const CovariateSchema& schema,
                  const std::string& source = "cohort");
Cohort LoadCohort(const std::string& path, const CovariateSchema& schema);
void WriteCohort(std::ostream& out, const Cohort& cohort);
void SaveCohort(const std::string& path, const Cohort& cohort);
// Schema from a CSV header: covariates whose every value is 0/1 are binary.
CovariateSchema InferSchema(const std::string& path);

struct ArmTargets {
  std::optional<double> arm0;
  std::optional<double> arm1;
};

struct TrialTarget {
  double horizon_months = 60.0;
  double mu0 = 0.0;  // control-arm event-free rate at horizon
  double mu1 = 0.0;  // treated-arm event-free rate at horizon
  std::map<std::string, ArmTargets> covariate_targets;
  double tolerance_outcome = 0.02;
  double tolerance_covariate = 0.03;

  void Validate(const CovariateSchema& schema) const;
};

enum class Comparator { kLess, kLessEqual, kEqual, kGreaterEqual, kGreater, kInSet };

Comparator ParseComparator(std::string_view text);
std::string ToString(Comparator op);

struct EligibilityRule {
  std::string field;  // schema column or the reserved field "time"
  Comparator op = Comparator::kLessEqual;
  std::vector<double> values;  // one threshold, or the set for kInSet

  bool Admits(double value) const;
};

struct EligibilityResult {
  Cohort cohort;
  // Sequential attrition: patients removed by rule k that passed rules < k.
  std::vector<std::size_t> excluded_per_rule;
};

EligibilityResult ApplyEligibility(const Cohort& cohort, const std::vector<EligibilityRule>& rules);

struct LabeledSet {
  std::vector<std::size_t> rows;  // cohort rows with a label, ascending
  IntVector labels;               // 1 = event at or before horizon
  std::size_t excluded_censored = 0;
};

// Event-by-horizon labels. Patients censored at or before the horizon carry no
// label and are only counted.
LabeledSet BinarizeAtHorizon(const Cohort& cohort, double horizon_months);

struct TrialConfig {
  TrialTarget target;
  std::vector<EligibilityRule> eligibility;
};

TrialConfig ParseTrialConfig(const std::string& json_text);
TrialConfig LoadTrialConfig(const std::string& path);
std::string TrialConfigToJson(const TrialConfig& config);

}  // namespace trialemu
