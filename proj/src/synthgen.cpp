#include "trialemu/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "trialemu/survival_stats.hpp"

namespace trialemu {

namespace {

constexpr std::uint64_t kObservationalStream = 1;
constexpr std::uint64_t kRctStream = 2;
constexpr std::uint64_t kCalibrationStream = 3;

Distribution ParseDistribution(const std::string& text) {
  if (text == "bernoulli") return Distribution::kBernoulli;
  if (text == "normal") return Distribution::kNormal;
  if (text == "lognormal") return Distribution::kLogNormal;
  if (text == "poisson_plus_one") return Distribution::kPoissonPlusOne;
  throw Error(ErrorKind::kConfig, "unknown distribution '" + text + "'");
}

const char* ToString(Distribution d) {
  switch (d) {
    case Distribution::kBernoulli: return "bernoulli";
    case Distribution::kNormal: return "normal";
    case Distribution::kLogNormal: return "lognormal";
    case Distribution::kPoissonPlusOne: return "poisson_plus_one";
  }
  return "normal";
}

double Draw(const CovariateSpec& spec, Rng& rng) {
  double v = 0.0;
  switch (spec.distribution) {
    case Distribution::kBernoulli:
      return rng.Bernoulli(spec.p) ? 1.0 : 0.0;
    case Distribution::kNormal:
      v = spec.mean + spec.sd * rng.Normal();
      break;
    case Distribution::kLogNormal:
      v = std::exp(spec.mean + spec.sd * rng.Normal());
      break;
    case Distribution::kPoissonPlusOne: {
      // Knuth's multiplication method; means here are small.
      const double limit = std::exp(-spec.mean);
      double prod = rng.Uniform();
      int k = 0;
      while (prod > limit) {
        ++k;
        prod *= rng.Uniform();
      }
      v = 1.0 + k;
      break;
    }
  }
  return std::clamp(v, spec.lower, spec.upper);
}

double Logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

std::string PatientId(const char* prefix, int i) {
  std::ostringstream out;
  out << prefix;
  out.width(5);
  out.fill('0');
  out << i + 1;
  return out.str();
}

struct Draws {
  std::vector<std::string> ids;
  Matrix x;
  IntVector treatment;
  IntVector event;
  Vector time;
  GroundTruth truth;
};

// randomized: treatment is a fair coin instead of the confounded model.
Draws Simulate(const DGPConfig& c, int n, std::uint64_t stream, bool randomized,
               const char* prefix) {
  Rng rng = Rng::Derive(c.seed, stream);
  const auto l = static_cast<Eigen::Index>(c.covariates.size());
  Draws d;
  d.x.resize(n, l);
  d.treatment.resize(n);
  d.event.resize(n);
  d.time.resize(n);
  std::vector<double> row(static_cast<std::size_t>(l));
  for (int i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < l; ++j) {
      row[static_cast<std::size_t>(j)] = Draw(c.covariates[static_cast<std::size_t>(j)], rng);
      d.x(i, j) = row[static_cast<std::size_t>(j)];
    }
    const double u = rng.Normal();
    const double risk = c.RiskScore(row.data());
    const bool treated =
        randomized ? rng.Bernoulli(0.5)
                   : rng.Bernoulli(Logistic(c.treatment_intercept + c.gamma_x * risk + c.gamma_u * u));
    const double effect = c.EffectMultiplier(row.data());
    const double hazard = c.base_hazard * std::exp(risk + c.gamma_u * u) * (treated ? effect : 1.0);
    const double t_event = rng.Exponential(hazard);
    double t_censor = c.max_follow_up;
    if (c.censoring_rate > 0.0) t_censor = std::min(t_censor, rng.Exponential(c.censoring_rate));
    d.ids.push_back(PatientId(prefix, i));
    d.treatment(i) = treated ? 1 : 0;
    d.event(i) = t_event <= t_censor ? 1 : 0;
    d.time(i) = std::min(t_event, t_censor);
    d.truth.ids.push_back(d.ids.back());
    d.truth.u.push_back(u);
    d.truth.effect_multiplier.push_back(effect);
  }
  return d;
}

}  // namespace

void DGPConfig::Validate() const {
  if (n_obs < 1 || n_rct < 1) throw Error(ErrorKind::kConfig, "n_obs and n_rct must be >= 1");
  if (covariates.empty()) throw Error(ErrorKind::kConfig, "DGP needs at least one covariate");
  std::set<std::string> names;
  for (const auto& c : covariates) {
    if (!names.insert(c.name).second) throw Error(ErrorKind::kConfig, "duplicate covariate '" + c.name + "'");
    if (c.distribution == Distribution::kBernoulli && !(c.p >= 0.0 && c.p <= 1.0)) {
      throw Error(ErrorKind::kConfig, c.name + ": p must lie in [0,1]");
    }
    if (!(c.sd >= 0.0)) throw Error(ErrorKind::kConfig, c.name + ": sd must be >= 0");
    if (c.distribution == Distribution::kPoissonPlusOne && !(c.mean >= 0.0)) {
      throw Error(ErrorKind::kConfig, c.name + ": Poisson mean must be >= 0");
    }
  }
  if (!(gamma_u >= 0.0)) throw Error(ErrorKind::kConfig, "gamma_u must be >= 0");
  if (!(base_hazard > 0.0)) throw Error(ErrorKind::kConfig, "base_hazard must be > 0");
  if (!(treatment_multiplier > 0.0)) throw Error(ErrorKind::kConfig, "treatment_multiplier must be > 0");
  if (!(censoring_rate >= 0.0)) throw Error(ErrorKind::kConfig, "censoring_rate must be >= 0");
  if (!(max_follow_up > 0.0) || !(horizon_months > 0.0)) {
    throw Error(ErrorKind::kConfig, "max_follow_up and horizon_months must be > 0");
  }
  if (subgroup) {
    if (!names.count(subgroup->covariate)) {
      throw Error(ErrorKind::kConfig, "subgroup covariate '" + subgroup->covariate + "' is not defined");
    }
    if (!(subgroup->multiplier > 0.0)) throw Error(ErrorKind::kConfig, "subgroup multiplier must be > 0");
  }
  for (const auto& t : targeted_covariates) {
    if (!names.count(t)) throw Error(ErrorKind::kConfig, "targeted covariate '" + t + "' is not defined");
  }
}

CovariateSchema DGPConfig::Schema() const {
  CovariateSchema s;
  for (const auto& c : covariates) {
    s.names.push_back(c.name);
    s.kinds.push_back(c.distribution == Distribution::kBernoulli ? CovariateKind::kBinary
                                                                 : CovariateKind::kContinuous);
    s.units.push_back(c.unit);
  }
  return s;
}

double DGPConfig::RiskScore(const double* x) const {
  double r = 0.0;
  for (std::size_t j = 0; j < covariates.size(); ++j) {
    r += covariates[j].risk_coef * (x[j] - covariates[j].center);
  }
  return r;
}

bool DGPConfig::InSubgroup(const double* x) const {
  if (!subgroup) return false;
  std::size_t j = 0;
  while (covariates[j].name != subgroup->covariate) ++j;
  return subgroup->below ? x[j] < subgroup->threshold : x[j] >= subgroup->threshold;
}

double DGPConfig::EffectMultiplier(const double* x) const {
  return InSubgroup(x) ? subgroup->multiplier : treatment_multiplier;
}

DGPConfig ParseDGPConfig(const std::string& json_text) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("DGP config: ") + e.what());
  }
  try {
    DGPConfig c;
    c.n_obs = doc.value("n_obs", c.n_obs);
    c.n_rct = doc.value("n_rct", c.n_rct);
    c.gamma_u = doc.value("gamma_u", c.gamma_u);
    c.gamma_x = doc.value("gamma_x", c.gamma_x);
    c.treatment_intercept = doc.value("treatment_intercept", c.treatment_intercept);
    c.base_hazard = doc.value("base_hazard", c.base_hazard);
    c.treatment_multiplier = doc.value("treatment_multiplier", c.treatment_multiplier);
    c.censoring_rate = doc.value("censoring_rate", c.censoring_rate);
    c.max_follow_up = doc.value("max_follow_up", c.max_follow_up);
    c.horizon_months = doc.value("horizon_months", c.horizon_months);
    c.seed = doc.value("seed", c.seed);
    c.targeted_covariates = doc.value("targeted_covariates", c.targeted_covariates);
    for (const auto& item : doc.at("covariates")) {
      CovariateSpec s;
      s.name = item.at("name").get<std::string>();
      s.unit = item.value("unit", "");
      s.distribution = ParseDistribution(item.at("distribution").get<std::string>());
      s.p = item.value("p", s.p);
      s.mean = item.value("mean", s.mean);
      s.sd = item.value("sd", s.sd);
      if (item.contains("lower")) s.lower = item.at("lower").get<double>();
      if (item.contains("upper")) s.upper = item.at("upper").get<double>();
      s.risk_coef = item.value("risk_coef", s.risk_coef);
      s.center = item.value("center", s.center);
      c.covariates.push_back(s);
    }
    if (doc.contains("subgroup") && !doc.at("subgroup").is_null()) {
      const auto& g = doc.at("subgroup");
      SubgroupRule rule;
      rule.covariate = g.at("covariate").get<std::string>();
      rule.threshold = g.at("threshold").get<double>();
      const std::string side = g.value("side", "below");
      if (side != "below" && side != "above") {
        throw Error(ErrorKind::kConfig, "subgroup side must be 'below' or 'above'");
      }
      rule.below = side == "below";
      rule.multiplier = g.at("multiplier").get<double>();
      c.subgroup = rule;
    }
    c.Validate();
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kConfig, std::string("DGP config: ") + e.what());
  }
}

DGPConfig LoadDGPConfig(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return ParseDGPConfig(buffer.str());
}

std::string DGPConfigToJson(const DGPConfig& c) {
  using nlohmann::json;
  json covs = json::array();
  for (const auto& s : c.covariates) {
    json item = {{"name", s.name}, {"unit", s.unit}, {"distribution", ToString(s.distribution)},
                 {"risk_coef", s.risk_coef}, {"center", s.center}};
    if (s.distribution == Distribution::kBernoulli) {
      item["p"] = s.p;
    } else {
      item["mean"] = s.mean;
      item["sd"] = s.sd;
    }
    if (std::isfinite(s.lower)) item["lower"] = s.lower;
    if (std::isfinite(s.upper)) item["upper"] = s.upper;
    covs.push_back(item);
  }
  json doc = {{"n_obs", c.n_obs},
              {"n_rct", c.n_rct},
              {"covariates", covs},
              {"gamma_u", c.gamma_u},
              {"gamma_x", c.gamma_x},
              {"treatment_intercept", c.treatment_intercept},
              {"base_hazard", c.base_hazard},
              {"treatment_multiplier", c.treatment_multiplier},
              {"censoring_rate", c.censoring_rate},
              {"max_follow_up", c.max_follow_up},
              {"horizon_months", c.horizon_months},
              {"targeted_covariates", c.targeted_covariates},
              {"seed", c.seed}};
  if (c.subgroup) {
    doc["subgroup"] = {{"covariate", c.subgroup->covariate},
                       {"threshold", c.subgroup->threshold},
                       {"side", c.subgroup->below ? "below" : "above"},
                       {"multiplier", c.subgroup->multiplier}};
  }
  return doc.dump(2) + "\n";
}

SyntheticCohort GenerateObservational(const DGPConfig& config) {
  config.Validate();
  Draws d = Simulate(config, config.n_obs, kObservationalStream, false, "p");
  return {Cohort(config.Schema(), d.ids, d.x, d.treatment, d.event, d.time), std::move(d.truth)};
}

SyntheticTrial GenerateRctTarget(const DGPConfig& config) {
  config.Validate();
  Draws d = Simulate(config, config.n_rct, kRctStream, true, "rct");
  SyntheticTrial trial{TrialTarget{}, Cohort(config.Schema(), d.ids, d.x, d.treatment, d.event, d.time),
                       std::move(d.truth)};
  TrialTarget& t = trial.target;
  t.horizon_months = config.horizon_months;
  double* mu[2] = {&t.mu0, &t.mu1};
  for (int arm = 0; arm < 2; ++arm) {
    const std::vector<std::size_t> rows = trial.cohort.Arm(arm);
    if (rows.empty()) throw Error(ErrorKind::kInsufficientData, "simulated trial arm is empty");
    const Cohort part = trial.cohort.Subset(rows);
    *mu[arm] = KaplanMeier(part.time(), part.event()).SurvivalAt(config.horizon_months);
  }
  std::vector<std::string> targeted = config.targeted_covariates;
  if (targeted.empty()) {
    for (const auto& c : config.covariates) {
      if (c.distribution == Distribution::kBernoulli) targeted.push_back(c.name);
    }
  }
  const CovariateSchema schema = config.Schema();
  for (const auto& name : targeted) {
    const auto col = static_cast<Eigen::Index>(schema.Require(name));
    ArmTargets arms;
    for (int arm = 0; arm < 2; ++arm) {
      double sum = 0.0;
      const auto rows = trial.cohort.Arm(arm);
      for (std::size_t r : rows) sum += trial.cohort.covariates()(static_cast<Eigen::Index>(r), col);
      (arm == 0 ? arms.arm0 : arms.arm1) = sum / static_cast<double>(rows.size());
    }
    t.covariate_targets[name] = arms;
  }
  return trial;
}

void WriteGroundTruthCsv(std::ostream& out, const GroundTruth& truth) {
  out << "id,u,true_effect_multiplier\n";
  for (std::size_t i = 0; i < truth.ids.size(); ++i) {
    out << truth.ids[i] << ',' << FormatDouble(truth.u[i]) << ','
        << FormatDouble(truth.effect_multiplier[i]) << '\n';
  }
}

namespace {

struct CalibrationSample {
  std::vector<double> log_hazard;  // risk + gamma_u * u, base excluded
  std::vector<double> subgroup_effect;  // 0 outside the subgroup
};

CalibrationSample SampleForCalibration(const DGPConfig& c, int n) {
  Rng rng = Rng::Derive(c.seed, kCalibrationStream);
  CalibrationSample s;
  std::vector<double> row(c.covariates.size());
  for (int i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = Draw(c.covariates[j], rng);
    const double u = rng.Normal();
    s.log_hazard.push_back(c.RiskScore(row.data()) + c.gamma_u * u);
    s.subgroup_effect.push_back(c.InSubgroup(row.data()) ? c.subgroup->multiplier : 0.0);
  }
  return s;
}

double MeanSurvival(const CalibrationSample& s, double base, double global, double horizon,
                    bool treated) {
  double sum = 0.0;
  for (std::size_t i = 0; i < s.log_hazard.size(); ++i) {
    double m = 1.0;
    if (treated) m = s.subgroup_effect[i] > 0.0 ? s.subgroup_effect[i] : global;
    sum += std::exp(-base * std::exp(s.log_hazard[i]) * m * horizon);
  }
  return sum / static_cast<double>(s.log_hazard.size());
}

// Root of a decreasing function on a log-scale bracket.
template <typename F>
double Bisect(F f, double target, double lo, double hi) {
  for (int it = 0; it < 200; ++it) {
    const double mid = std::sqrt(lo * hi);
    (f(mid) > target ? lo : hi) = mid;
  }
  return std::sqrt(lo * hi);
}

}  // namespace

std::pair<double, double> TrueEventFreeRates(const DGPConfig& config, int n) {
  const CalibrationSample s = SampleForCalibration(config, n);
  const double g = config.treatment_multiplier;
  return {MeanSurvival(s, config.base_hazard, g, config.horizon_months, false),
          MeanSurvival(s, config.base_hazard, g, config.horizon_months, true)};
}

void CalibrateHazards(DGPConfig& config, double mu0, double mu1, int n) {
  config.Validate();
  if (!(mu0 > 0.0 && mu0 < 1.0 && mu1 > 0.0 && mu1 < 1.0)) {
    throw Error(ErrorKind::kConfig, "calibration targets must lie in (0,1)");
  }
  const CalibrationSample s = SampleForCalibration(config, n);
  const double h = config.horizon_months;
  const double g0 = config.treatment_multiplier;
  config.base_hazard = Bisect(
      [&](double base) { return MeanSurvival(s, base, g0, h, false); }, mu0, 1e-8, 10.0);
  config.treatment_multiplier = Bisect(
      [&](double g) { return MeanSurvival(s, config.base_hazard, g, h, true); }, mu1, 1e-6, 100.0);
}

}  // namespace trialemu
