#include "trialemu/counterfactual.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace trialemu {

namespace {

LearnerConfig ArmConfig(const LearnerConfig& config, int arm) {
  LearnerConfig c = config;
  c.seed = SplitMix64(config.seed ^ (0xa5a5a5a5ULL + static_cast<std::uint64_t>(arm)));
  return c;
}

std::string ArmName(int arm) { return arm == 1 ? "treated" : "untreated"; }

}  // namespace

FittedEnsemble FitArmModel(const Cohort& matched, int arm, double horizon_months,
                           const LearnerConfig& config, double rho,
                           std::vector<std::string>* warnings) {
  if (!(rho >= 1.0)) throw Error(ErrorKind::kConfig, "rho must be >= 1, got " + FormatDouble(rho));
  const Cohort arm_cohort = matched.Subset(matched.Arm(arm));
  const LabeledSet labeled = BinarizeAtHorizon(arm_cohort, horizon_months);
  if (labeled.rows.empty()) {
    throw Error(ErrorKind::kInsufficientData,
                "matched " + ArmName(arm) + " arm has no patients with a horizon label");
  }
  const auto n = static_cast<Eigen::Index>(labeled.rows.size());
  Matrix x(n, static_cast<Eigen::Index>(matched.schema().size()));
  IntVector event_free(n);
  Vector weights(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(labeled.rows[static_cast<std::size_t>(i)]);
    x.row(i) = arm_cohort.covariates().row(row);
    event_free(i) = 1 - labeled.labels(i);
    weights(i) = event_free(i) == 1 ? rho : 1.0;
  }
  const bool single_class = (event_free.array() == event_free(0)).all();
  if (single_class && warnings) {
    warnings->push_back("matched " + ArmName(arm) + " arm is single-class (event-free = " +
                        std::to_string(event_free(0)) + "); using a constant model");
  }
  return Fit(x, event_free, weights, ArmConfig(config, arm), DegeneratePolicy::kConstant);
}

double MeanReward(const FittedEnsemble& model, const Cohort& cohort) {
  return PredictProb(model, cohort.covariates()).mean();
}

RewardPair FitCounterfactuals(const Cohort& matched, double horizon_months,
                              const LearnerConfig& config, double rho0, double rho1) {
  RewardPair pair;
  pair.rho0 = rho0;
  pair.rho1 = rho1;
  pair.model0 = FitArmModel(matched, 0, horizon_months, config, rho0, &pair.warnings);
  pair.model1 = FitArmModel(matched, 1, horizon_months, config, rho1, &pair.warnings);
  pair.hbar0 = MeanReward(pair.model0, matched);
  pair.hbar1 = MeanReward(pair.model1, matched);
  return pair;
}

void TuneOptions::Validate() const {
  if (!(tol > 0.0)) throw Error(ErrorKind::kConfig, "tuning tol must be > 0");
  if (!(rho_max > 1.0)) throw Error(ErrorKind::kConfig, "rho_max must be > 1");
  if (max_refits < 2) throw Error(ErrorKind::kConfig, "max_refits must be >= 2");
  if (!(grid_step > 0.0)) throw Error(ErrorKind::kConfig, "grid_step must be > 0");
}

const char* ToString(TuneStatus status) {
  switch (status) {
    case TuneStatus::kWithinTolerance: return "within_tolerance";
    case TuneStatus::kOvershoot: return "overshoot";
    case TuneStatus::kGridFallback: return "grid_fallback";
  }
  return "unknown";
}

TuneResult TuneWeight(const Cohort& matched, int arm, double target, double horizon_months,
                      const LearnerConfig& config, const TuneOptions& options) {
  options.Validate();
  if (!(target >= 0.0 && target <= 1.0)) {
    throw Error(ErrorKind::kConfig, "tuning target must lie in [0,1]");
  }
  TuneResult result;
  result.arm = arm;
  result.target = target;

  struct Eval {
    double rho;
    double hbar;
    FittedEnsemble model;
  };
  std::vector<Eval> evaluated;
  auto evaluate = [&](double rho, const char* phase) -> const Eval& {
    FittedEnsemble model = FitArmModel(matched, arm, horizon_months, config, rho,
                                       evaluated.empty() ? &result.warnings : nullptr);
    const double hbar = MeanReward(model, matched);
    ++result.refits;
    result.trace.push_back({rho, hbar, phase});
    evaluated.push_back({rho, hbar, std::move(model)});
    return evaluated.back();
  };
  auto finish = [&](const Eval& e, TuneStatus status) {
    result.rho = e.rho;
    result.hbar = e.hbar;
    result.status = status;
    result.model = e.model;
    return result;
  };
  auto within = [&](double hbar) { return std::abs(hbar - target) <= options.tol; };
  auto monotone = [&] {
    std::vector<std::pair<double, double>> points;
    for (const auto& e : evaluated) points.emplace_back(e.rho, e.hbar);
    std::sort(points.begin(), points.end());
    for (std::size_t k = 1; k < points.size(); ++k) {
      if (points[k].second < points[k - 1].second) return false;
    }
    return true;
  };

  const double base = evaluate(1.0, "initial").hbar;
  if (base >= target - options.tol) {
    if (base > target + options.tol) {
      result.warnings.push_back("untuned mean " + FormatDouble(base) + " exceeds target " +
                                FormatDouble(target) + " by more than tol; weights below 1 are not used");
      return finish(evaluated.front(), TuneStatus::kOvershoot);
    }
    return finish(evaluated.front(), TuneStatus::kWithinTolerance);
  }
  const double top = evaluate(options.rho_max, "upper").hbar;
  if (top < target - options.tol) {
    throw Error(ErrorKind::kUnreachableTarget,
                ArmName(arm) + " arm: mean reward " + FormatDouble(top) + " at rho_max " +
                    FormatDouble(options.rho_max) + " stays below target " + FormatDouble(target) +
                    " (residual gap " + FormatDouble(target - top) + ")");
  }

  bool fallback = !monotone();
  double lo = 1.0, hi = options.rho_max;
  std::size_t hit = within(top) ? 1 : evaluated.size();
  while (!fallback && result.refits < options.max_refits) {
    const double mid = 0.5 * (lo + hi);
    const double hbar = evaluate(mid, "bisect").hbar;
    if (!monotone()) {
      fallback = true;
      break;
    }
    if (within(hbar)) {
      hit = evaluated.size() - 1;
      break;
    }
    (hbar < target ? lo : hi) = mid;
  }
  if (!fallback && hit < evaluated.size()) {
    // Smallest explored rho within tolerance.
    std::size_t best = hit;
    for (std::size_t k = 0; k < evaluated.size(); ++k) {
      if (within(evaluated[k].hbar) && evaluated[k].rho < evaluated[best].rho) best = k;
    }
    return finish(evaluated[best], TuneStatus::kWithinTolerance);
  }

  result.warnings.push_back(fallback ? "non-monotone response to rho; using grid search"
                                     : "bisection budget exhausted; using grid search");
  std::optional<std::size_t> best;
  const int steps = static_cast<int>(std::floor((options.rho_max - 1.0) / options.grid_step + 1e-9));
  for (int s = 0; s <= steps; ++s) {
    const double rho = 1.0 + s * options.grid_step;
    evaluate(rho, "grid");
    const std::size_t k = evaluated.size() - 1;
    if (!best || std::abs(evaluated[k].hbar - target) < std::abs(evaluated[*best].hbar - target)) {
      best = k;
    }
  }
  if (!within(evaluated[*best].hbar)) {
    throw Error(ErrorKind::kUnreachableTarget,
                ArmName(arm) + " arm: closest grid point rho " + FormatDouble(evaluated[*best].rho) +
                    " leaves residual gap " + FormatDouble(target - evaluated[*best].hbar));
  }
  return finish(evaluated[*best], TuneStatus::kGridFallback);
}

std::string TuneTraceJson(const std::vector<TuneResult>& results) {
  using nlohmann::json;
  json doc = json::array();
  for (const auto& r : results) {
    json steps = json::array();
    for (const auto& s : r.trace) {
      steps.push_back({{"rho", s.rho}, {"hbar", s.hbar}, {"residual", r.target - s.hbar},
                       {"phase", s.phase}});
    }
    doc.push_back({{"arm", r.arm},
                   {"target", r.target},
                   {"rho", r.rho},
                   {"hbar", r.hbar},
                   {"status", ToString(r.status)},
                   {"refits", r.refits},
                   {"trace", steps},
                   {"warnings", r.warnings}});
  }
  return doc.dump(2) + "\n";
}

RewardMatrix BuildRewardMatrix(const RewardPair& pair, const Cohort& matched,
                               double horizon_months) {
  RewardMatrix m;
  m.ids = matched.ids();
  m.horizon_months = horizon_months;
  m.rewards.resize(static_cast<Eigen::Index>(matched.size()), 2);
  m.rewards.col(0) = PredictProb(pair.model0, matched.covariates());
  m.rewards.col(1) = PredictProb(pair.model1, matched.covariates());
  m.model0_digest = HexDigest(Fnv1a(EnsembleToJson(pair.model0)));
  m.model1_digest = HexDigest(Fnv1a(EnsembleToJson(pair.model1)));
  return m;
}

ConstraintDirection ParseConstraintDirection(std::string_view text) {
  if (text == "favor-treatment") return ConstraintDirection::kFavorTreatment;
  if (text == "favor-control") return ConstraintDirection::kFavorControl;
  throw Error(ErrorKind::kConfig, "unknown constraint direction '" + std::string(text) + "'");
}

std::string ToString(ConstraintDirection direction) {
  return direction == ConstraintDirection::kFavorTreatment ? "favor-treatment" : "favor-control";
}

RewardMatrix ConstrainRewards(const RewardMatrix& matrix, double factor,
                              ConstraintDirection direction) {
  if (!(factor > 0.0 && factor <= 1.0)) {
    throw Error(ErrorKind::kConfig, "constraint factor must lie in (0,1]");
  }
  RewardMatrix out = matrix;
  const Eigen::Index low = direction == ConstraintDirection::kFavorTreatment ? 0 : 1;
  const Eigen::Index high = 1 - low;
  for (Eigen::Index i = 0; i < out.rewards.rows(); ++i) {
    if (out.rewards(i, low) > out.rewards(i, high)) {
      out.rewards(i, low) = factor * out.rewards(i, high);
    }
  }
  return out;
}

void WriteRewardCsv(std::ostream& out, const RewardMatrix& matrix) {
  out << "id,reward_control,reward_treatment\n";
  for (std::size_t i = 0; i < matrix.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    out << matrix.ids[i] << ',' << FormatDouble(matrix.rewards(r, 0)) << ','
        << FormatDouble(matrix.rewards(r, 1)) << '\n';
  }
}

RewardMatrix ReadRewardCsv(std::istream& in, const std::string& source) {
  std::string line;
  if (!std::getline(in, line) || line != "id,reward_control,reward_treatment") {
    throw Error(ErrorKind::kSchema, source + ": expected header id,reward_control,reward_treatment");
  }
  RewardMatrix m;
  std::vector<double> values;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++row;
    std::stringstream cells(line);
    std::string id, r0, r1;
    if (!std::getline(cells, id, ',') || !std::getline(cells, r0, ',') ||
        !std::getline(cells, r1, ',')) {
      throw Error(ErrorKind::kParse, source + ": row " + std::to_string(row) + " has too few cells");
    }
    m.ids.push_back(id);
    values.push_back(ParseDouble(r0, source + ": row " + std::to_string(row)));
    values.push_back(ParseDouble(r1, source + ": row " + std::to_string(row)));
  }
  m.rewards = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, 2, Eigen::RowMajor>>(
      values.data(), static_cast<Eigen::Index>(m.ids.size()), 2);
  return m;
}

}  // namespace trialemu
