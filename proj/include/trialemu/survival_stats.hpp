#pragma once

#include <iosfwd>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "trialemu/core.hpp"

namespace trialemu {

// Product-limit curve evaluated at the distinct event times. Survival is 1
// before the first entry.
struct KMCurve {
  std::vector<double> times;
  std::vector<double> survival;  // S just after times[k]
  std::vector<int> at_risk;
  std::vector<int> events;
  std::size_t n = 0;

  // Right-continuous step value S(t).
  double SurvivalAt(double t) const;
};

// Events are processed before censorings at tied times.
KMCurve KaplanMeier(const Vector& times, const IntVector& events);

// Smallest event time with S <= 0.5; nullopt when the curve never gets there.
std::optional<double> MedianSurvival(const KMCurve& curve);

void WriteKmCsv(std::ostream& out, const KMCurve& curve);

struct LogRankResult {
  double statistic = 0.0;  // chi-square, 1 df
  double p_value = 1.0;
  double observed1 = 0.0;  // events in group 1
  double expected1 = 0.0;
  double variance = 0.0;
};

LogRankResult LogRank(const Vector& times0, const IntVector& events0, const Vector& times1,
                      const IntVector& events1);

// Upper tail of the chi-square distribution with one degree of freedom.
double ChiSquare1Sf(double x);

// Risk orientation: a higher score should go with a shorter time. Pair (i, j)
// is comparable when t_i < t_j and i had an event; score ties count 1/2.
double HarrellC(const Vector& scores, const Vector& times, const IntVector& events);

struct RiskScoreInput {
  bool node_positive = false;
  double dfi_months = 0.0;
  double n_tumors = 0.0;
  double max_size_cm = 0.0;
  double cea_ng_ml = 0.0;
  bool kras_mutated = false;
};

// Tumor Burden Score: sqrt(largest diameter^2 + lesion count^2).
double TumorBurdenScore(const RiskScoreInput& input);
// MSK Clinical Risk Score, 0-5.
int CrsScore(const RiskScoreInput& input);
// JHH GAME score, 0-5.
int GameScore(const RiskScoreInput& input);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

// Two-sided Welch t-test; nullopt when either sample has fewer than 2 values.
std::optional<WelchResult> WelchTTest(const std::vector<double>& a, const std::vector<double>& b);

// Two-sided Student-t tail probability P(|T| >= |t|).
double StudentTTwoSidedP(double t, double df);
double RegularizedIncompleteBeta(double a, double b, double x);

struct LeafBalance {
  int leaf = 0;
  std::size_t n0 = 0;
  std::size_t n1 = 0;
  double mean0 = std::numeric_limits<double>::quiet_NaN();
  double mean1 = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> p_value;
};

inline constexpr const char* kBalanceTestName = "welch_t";

// Per-leaf comparison of a score between received-treatment arms, leaves in
// ascending id order.
std::vector<LeafBalance> NodeBalanceAudit(const std::vector<int>& leaves,
                                          const IntVector& treatment, const Vector& scores);

}  // namespace trialemu
