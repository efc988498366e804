#include "trialemu/stratify_match.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <queue>

#include <json.hpp>

namespace trialemu {

void BucketSpec::Validate() const {
  if (boundaries.size() < 2) throw Error(ErrorKind::kConfig, "buckets need at least 2 boundaries");
  if (boundaries.front() != 0.0 || boundaries.back() != 1.0) {
    throw Error(ErrorKind::kConfig, "bucket boundaries must start at 0 and end at 1");
  }
  for (std::size_t k = 1; k < boundaries.size(); ++k) {
    if (!(boundaries[k - 1] < boundaries[k])) {
      throw Error(ErrorKind::kConfig, "bucket boundaries must be strictly ascending");
    }
  }
  if (!quotas.empty() && quotas.size() != size()) {
    throw Error(ErrorKind::kConfig, "quota count does not match bucket count");
  }
  for (int q : quotas) {
    if (q < 0) throw Error(ErrorKind::kConfig, "quotas must be nonnegative");
  }
}

std::vector<int> AssignBuckets(const Vector& risks, const std::vector<double>& boundaries) {
  BucketSpec spec;
  spec.boundaries = boundaries;
  spec.Validate();
  const int last = static_cast<int>(boundaries.size()) - 2;
  std::vector<int> out(static_cast<std::size_t>(risks.size()));
  for (Eigen::Index i = 0; i < risks.size(); ++i) {
    const double w = risks(i);
    if (!(w >= 0.0 && w <= 1.0)) throw Error(ErrorKind::kSchema, "risk outside [0,1]");
    auto it = std::upper_bound(boundaries.begin(), boundaries.end(), w);
    const int k = static_cast<int>(it - boundaries.begin()) - 1;
    out[static_cast<std::size_t>(i)] = std::min(k, last);
  }
  return out;
}

QuotaReport DefaultQuotas(const Vector& risks, const IntVector& treatment,
                          const std::vector<int>& buckets, std::size_t n_buckets,
                          double target_risk, double tolerance, double alpha_max) {
  if (!(alpha_max > 0.0 && alpha_max <= 1.0)) {
    throw Error(ErrorKind::kConfig, "alpha_max must lie in (0,1]");
  }
  // Per arm and bucket, risks sorted ascending.
  std::vector<std::vector<double>> arm_risks[2];
  arm_risks[0].resize(n_buckets);
  arm_risks[1].resize(n_buckets);
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    arm_risks[treatment(r)][static_cast<std::size_t>(buckets[i])].push_back(risks(r));
  }
  QuotaReport report;
  for (std::size_t k = 0; k < n_buckets; ++k) {
    for (auto& arm : arm_risks) std::sort(arm[k].begin(), arm[k].end());
    report.treated_per_bucket.push_back(static_cast<int>(arm_risks[1][k].size()));
    report.untreated_per_bucket.push_back(static_cast<int>(arm_risks[0][k].size()));
  }

  auto reachable = [&](const std::vector<int>& quotas) {
    const int total = std::accumulate(quotas.begin(), quotas.end(), 0);
    if (total == 0) return false;
    for (const auto& arm : arm_risks) {
      double lo = 0.0, hi = 0.0;
      for (std::size_t k = 0; k < n_buckets; ++k) {
        const auto& v = arm[k];
        const auto q = static_cast<std::size_t>(quotas[k]);
        for (std::size_t m = 0; m < q; ++m) {
          lo += v[m];
          hi += v[v.size() - 1 - m];
        }
      }
      lo /= total;
      hi /= total;
      if (target_risk < lo - tolerance || target_risk > hi + tolerance) return false;
    }
    return true;
  };

  const int top = static_cast<int>(std::lround(alpha_max * 100.0));
  for (int step = top; step >= 1; --step) {
    const double alpha = step / 100.0;
    std::vector<int> quotas(n_buckets);
    for (std::size_t k = 0; k < n_buckets; ++k) {
      const int cap = std::min(report.treated_per_bucket[k], report.untreated_per_bucket[k]);
      quotas[k] = step == 100 ? cap : static_cast<int>(std::floor(alpha * cap + 1e-9));
    }
    if (reachable(quotas)) {
      report.quotas = std::move(quotas);
      report.alpha = alpha;
      return report;
    }
  }
  throw Error(ErrorKind::kInfeasibleTarget,
              "no quota scaling lets both arms reach mean risk " + FormatDouble(target_risk) +
                  " within " + FormatDouble(tolerance) + "; redesign the buckets");
}

int MatchProblem::total_pairs() const { return std::accumulate(quotas.begin(), quotas.end(), 0); }

double MatchProblem::PairDistance(std::size_t treated, std::size_t untreated) const {
  if (distance_features.cols() == 0) return 0.0;
  return (distance_features.row(static_cast<Eigen::Index>(treated)) -
          distance_features.row(static_cast<Eigen::Index>(untreated)))
      .squaredNorm();
}

void MatchProblem::Prepare() {
  const auto n = static_cast<Eigen::Index>(ids.size());
  if (treatment.size() != n || risk.size() != n || covariates.rows() != n ||
      static_cast<Eigen::Index>(bucket.size()) != n) {
    throw Error(ErrorKind::kSchema, "match problem: column lengths differ");
  }
  std::vector<int> treated(quotas.size(), 0), untreated(quotas.size(), 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int k = bucket[static_cast<std::size_t>(i)];
    if (k < 0 || static_cast<std::size_t>(k) >= quotas.size()) {
      throw Error(ErrorKind::kSchema, "match problem: bucket index out of range");
    }
    (treatment(i) == 1 ? treated : untreated)[static_cast<std::size_t>(k)] += 1;
  }
  for (std::size_t k = 0; k < quotas.size(); ++k) {
    if (quotas[k] < 0 || quotas[k] > std::min(treated[k], untreated[k])) {
      throw Error(ErrorKind::kInfeasibleTarget,
                  "bucket " + std::to_string(k) + ": quota " + std::to_string(quotas[k]) +
                      " exceeds min(|S1^k|=" + std::to_string(treated[k]) +
                      ", |S0^k|=" + std::to_string(untreated[k]) + ")");
    }
  }
  const auto d = static_cast<Eigen::Index>(distance_columns.size());
  distance_features.resize(n, d);
  for (Eigen::Index c = 0; c < d; ++c) {
    const Vector col = covariates.col(static_cast<Eigen::Index>(distance_columns[static_cast<std::size_t>(c)]));
    double scale = 1.0;
    if (n > 1) {
      const double mean = col.mean();
      const double var = (col.array() - mean).square().sum() / static_cast<double>(n - 1);
      if (var > 0.0) scale = 1.0 / std::sqrt(var);
    }
    distance_features.col(c) = col * scale;
  }
}

MatchProblem BuildMatchProblem(const Cohort& cohort, const Vector& risks,
                               const std::vector<int>& buckets, const std::vector<int>& quotas,
                               const TrialTarget& target,
                               const std::vector<std::string>& distance_covariates,
                               const ObjectiveWeights& weights) {
  target.Validate(cohort.schema());
  MatchProblem p;
  p.ids = cohort.ids();
  p.treatment = cohort.treatment();
  p.risk = risks;
  p.covariates = cohort.covariates();
  p.bucket = buckets;
  p.quotas = quotas;
  p.target_risk = 1.0 - target.mu0;
  for (const auto& [name, arms] : target.covariate_targets) {
    p.covariate_targets.push_back(
        CovariateTarget{cohort.schema().Require(name), name, arms.arm0, arms.arm1});
  }
  for (const auto& name : distance_covariates) {
    p.distance_columns.push_back(cohort.schema().Require(name));
  }
  p.weights = weights;
  p.Prepare();
  return p;
}

namespace {

// Running sums of the selected patients.
struct Sums {
  double risk_treated = 0.0;
  double risk_untreated = 0.0;
  std::vector<double> cov_treated;
  std::vector<double> cov_untreated;
  double distance = 0.0;
};

Sums ZeroSums(const MatchProblem& p) {
  Sums s;
  s.cov_treated.assign(p.covariate_targets.size(), 0.0);
  s.cov_untreated.assign(p.covariate_targets.size(), 0.0);
  return s;
}

double CovariateValue(const MatchProblem& p, std::size_t row, std::size_t target) {
  return p.covariates(static_cast<Eigen::Index>(row),
                      static_cast<Eigen::Index>(p.covariate_targets[target].column));
}

void AddPair(const MatchProblem& p, Sums& s, std::size_t i, std::size_t j, double sign) {
  s.risk_treated += sign * p.risk(static_cast<Eigen::Index>(i));
  s.risk_untreated += sign * p.risk(static_cast<Eigen::Index>(j));
  for (std::size_t c = 0; c < p.covariate_targets.size(); ++c) {
    s.cov_treated[c] += sign * CovariateValue(p, i, c);
    s.cov_untreated[c] += sign * CovariateValue(p, j, c);
  }
  s.distance += sign * p.PairDistance(i, j);
}

double DistanceScale(const MatchProblem& p, int n_pairs) {
  const auto d = p.distance_columns.size();
  if (d == 0 || n_pairs == 0) return 0.0;
  return 1.0 / (static_cast<double>(n_pairs) * static_cast<double>(d));
}

// Objective from sums with the selection size held constant at n_pairs.
double ObjectiveFromSums(const MatchProblem& p, const Sums& s, int n_pairs,
                         ObjectiveBreakdown* out = nullptr) {
  if (n_pairs == 0) {
    if (out) {
      *out = ObjectiveBreakdown{};
      out->covariate_treated.assign(p.covariate_targets.size(), 0.0);
      out->covariate_untreated.assign(p.covariate_targets.size(), 0.0);
      out->mean_covariate_treated.assign(p.covariate_targets.size(), 0.0);
      out->mean_covariate_untreated.assign(p.covariate_targets.size(), 0.0);
    }
    return 0.0;
  }
  const double n = static_cast<double>(n_pairs);
  const double out_t = std::abs(p.target_risk - s.risk_treated / n);
  const double out_u = std::abs(p.target_risk - s.risk_untreated / n);
  double cov = 0.0;
  std::vector<double> cov_t(p.covariate_targets.size(), 0.0), cov_u(p.covariate_targets.size(), 0.0);
  for (std::size_t c = 0; c < p.covariate_targets.size(); ++c) {
    const auto& t = p.covariate_targets[c];
    if (t.arm1) cov_t[c] = std::abs(*t.arm1 - s.cov_treated[c] / n);
    if (t.arm0) cov_u[c] = std::abs(*t.arm0 - s.cov_untreated[c] / n);
    cov += cov_t[c] + cov_u[c];
  }
  const double total = p.weights.outcome * (out_t + out_u) + p.weights.covariate * cov +
                       p.weights.distance * s.distance * DistanceScale(p, n_pairs);
  if (out) {
    out->n_pairs = static_cast<std::size_t>(n_pairs);
    out->outcome_treated = out_t;
    out->outcome_untreated = out_u;
    out->covariate_treated = std::move(cov_t);
    out->covariate_untreated = std::move(cov_u);
    out->distance_sum = s.distance;
    out->total = total;
    out->mean_risk_treated = s.risk_treated / n;
    out->mean_risk_untreated = s.risk_untreated / n;
    out->mean_covariate_treated.resize(p.covariate_targets.size());
    out->mean_covariate_untreated.resize(p.covariate_targets.size());
    for (std::size_t c = 0; c < p.covariate_targets.size(); ++c) {
      out->mean_covariate_treated[c] = s.cov_treated[c] / n;
      out->mean_covariate_untreated[c] = s.cov_untreated[c] / n;
    }
  }
  return total;
}

std::vector<std::vector<std::size_t>> RowsByBucket(const MatchProblem& p, int arm) {
  std::vector<std::vector<std::size_t>> rows(p.n_buckets());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p.treatment(static_cast<Eigen::Index>(i)) == arm) {
      rows[static_cast<std::size_t>(p.bucket[i])].push_back(i);
    }
  }
  return rows;
}

}  // namespace

void ValidateSolution(const MatchProblem& problem, const std::vector<MatchPair>& pairs) {
  std::vector<char> used(problem.size(), 0);
  std::vector<int> per_bucket(problem.n_buckets(), 0);
  for (const MatchPair& pair : pairs) {
    if (pair.treated >= problem.size() || pair.untreated >= problem.size()) {
      throw Error(ErrorKind::kInvalidSolution, "pair references an unknown patient row");
    }
    const auto ti = static_cast<Eigen::Index>(pair.treated);
    const auto ui = static_cast<Eigen::Index>(pair.untreated);
    if (problem.treatment(ti) != 1 || problem.treatment(ui) != 0) {
      throw Error(ErrorKind::kInvalidSolution,
                  "pair (" + problem.ids[pair.treated] + ", " + problem.ids[pair.untreated] +
                      ") does not join a treated to an untreated patient");
    }
    if (used[pair.treated]++ || used[pair.untreated]++) {
      throw Error(ErrorKind::kInvalidSolution,
                  "at-most-one-match violated by pair (" + problem.ids[pair.treated] + ", " +
                      problem.ids[pair.untreated] + ")");
    }
    const int kt = problem.bucket[pair.treated];
    if (kt != problem.bucket[pair.untreated] || kt != pair.bucket) {
      throw Error(ErrorKind::kInvalidSolution,
                  "same-bucket constraint violated by pair (" + problem.ids[pair.treated] + ", " +
                      problem.ids[pair.untreated] + ")");
    }
    ++per_bucket[static_cast<std::size_t>(kt)];
  }
  for (std::size_t k = 0; k < problem.n_buckets(); ++k) {
    if (per_bucket[k] != problem.quotas[k]) {
      throw Error(ErrorKind::kInvalidSolution,
                  "quota constraint violated in bucket " + std::to_string(k) + ": " +
                      std::to_string(per_bucket[k]) + " pairs, quota " +
                      std::to_string(problem.quotas[k]));
    }
  }
}

ObjectiveBreakdown EvaluateObjective(const MatchProblem& problem,
                                     const std::vector<MatchPair>& pairs) {
  ValidateSolution(problem, pairs);
  std::vector<MatchPair> sorted = pairs;
  std::sort(sorted.begin(), sorted.end());
  Sums s = ZeroSums(problem);
  for (const auto& pair : sorted) AddPair(problem, s, pair.treated, pair.untreated, 1.0);
  ObjectiveBreakdown out;
  ObjectiveFromSums(problem, s, static_cast<int>(sorted.size()), &out);
  return out;
}

double CountFeasibleMatchings(const MatchProblem& problem) {
  const auto treated = RowsByBucket(problem, 1);
  const auto untreated = RowsByBucket(problem, 0);
  auto choose = [](double n, double k) {
    return std::exp(std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1));
  };
  double product = 1.0;
  for (std::size_t k = 0; k < problem.n_buckets(); ++k) {
    const double q = problem.quotas[k];
    product *= choose(static_cast<double>(treated[k].size()), q) *
               choose(static_cast<double>(untreated[k].size()), q) * std::tgamma(q + 1.0);
  }
  return std::round(product);
}

namespace {

class LocalSearch {
 public:
  LocalSearch(const MatchProblem& p, std::vector<MatchPair> pairs)
      : p_(p), pairs_(std::move(pairs)), n_pairs_(static_cast<int>(pairs_.size())) {
    selected_.assign(p.size(), 0);
    sums_ = ZeroSums(p);
    for (const auto& pair : pairs_) {
      selected_[pair.treated] = selected_[pair.untreated] = 1;
      AddPair(p, sums_, pair.treated, pair.untreated, 1.0);
    }
    current_ = ObjectiveFromSums(p, sums_, n_pairs_);
    treated_ = RowsByBucket(p, 1);
    untreated_ = RowsByBucket(p, 0);
  }

  double objective() const { return current_; }
  const std::vector<MatchPair>& pairs() const { return pairs_; }

  void Run(Rng& rng, std::int64_t budget, SolveStats& stats, std::vector<double>& trajectory) {
    if (n_pairs_ == 0) return;
    std::int64_t evaluated = 0;
    bool improved = true;
    while (improved && evaluated < budget) {
      improved = false;
      std::vector<Move> moves = EnumerateMoves();
      rng.Shuffle(moves);
      for (const Move& m : moves) {
        if (evaluated >= budget) break;
        ++evaluated;
        if (TryMove(m)) {
          improved = true;
          ++stats.moves_accepted;
          trajectory.push_back(current_);
        }
      }
    }
    stats.moves_evaluated += evaluated;
  }

 private:
  enum class MoveType : std::uint8_t { kSwapTreated, kSwapUntreated, kRepair };
  struct Move {
    MoveType type;
    std::uint32_t a;  // pair index
    std::uint32_t b;  // replacement row, or second pair index
  };

  std::vector<Move> EnumerateMoves() const {
    std::vector<Move> moves;
    for (std::size_t a = 0; a < pairs_.size(); ++a) {
      const auto k = static_cast<std::size_t>(pairs_[a].bucket);
      for (std::size_t row : treated_[k]) {
        if (!selected_[row]) moves.push_back({MoveType::kSwapTreated, static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(row)});
      }
      for (std::size_t row : untreated_[k]) {
        if (!selected_[row]) moves.push_back({MoveType::kSwapUntreated, static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(row)});
      }
      if (p_.weights.distance != 0.0 && !p_.distance_columns.empty()) {
        for (std::size_t b = a + 1; b < pairs_.size(); ++b) {
          if (pairs_[b].bucket == pairs_[a].bucket) {
            moves.push_back({MoveType::kRepair, static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)});
          }
        }
      }
    }
    return moves;
  }

  // Objective after replacing one patient of a pair; the other arm is unchanged.
  double SwapObjective(bool treated_side, std::size_t out_row, std::size_t in_row,
                       double distance_delta) const {
    const double n = static_cast<double>(n_pairs_);
    const auto o = static_cast<Eigen::Index>(out_row), in = static_cast<Eigen::Index>(in_row);
    double rt = sums_.risk_treated, ru = sums_.risk_untreated;
    (treated_side ? rt : ru) += p_.risk(in) - p_.risk(o);
    double total = p_.weights.outcome * (std::abs(p_.target_risk - rt / n) +
                                         std::abs(p_.target_risk - ru / n));
    double cov = 0.0;
    for (std::size_t c = 0; c < p_.covariate_targets.size(); ++c) {
      const auto& t = p_.covariate_targets[c];
      const double delta = CovariateValue(p_, in_row, c) - CovariateValue(p_, out_row, c);
      const double st = sums_.cov_treated[c] + (treated_side ? delta : 0.0);
      const double su = sums_.cov_untreated[c] + (treated_side ? 0.0 : delta);
      if (t.arm1) cov += std::abs(*t.arm1 - st / n);
      if (t.arm0) cov += std::abs(*t.arm0 - su / n);
    }
    total += p_.weights.covariate * cov +
             p_.weights.distance * (sums_.distance + distance_delta) * DistanceScale(p_, n_pairs_);
    return total;
  }

  bool Accept(double candidate) const {
    return candidate < current_ - 1e-13 * std::max(1.0, std::abs(current_));
  }

  bool TryMove(const Move& m) {
    MatchPair& pa = pairs_[m.a];
    switch (m.type) {
      case MoveType::kSwapTreated:
      case MoveType::kSwapUntreated: {
        const bool treated_side = m.type == MoveType::kSwapTreated;
        const std::size_t in = m.b;
        if (selected_[in]) return false;
        const std::size_t out = treated_side ? pa.treated : pa.untreated;
        const double d_old = p_.PairDistance(pa.treated, pa.untreated);
        const double d_new = treated_side ? p_.PairDistance(in, pa.untreated)
                                          : p_.PairDistance(pa.treated, in);
        const double candidate = SwapObjective(treated_side, out, in, d_new - d_old);
        if (!Accept(candidate)) return false;
        AddPair(p_, sums_, pa.treated, pa.untreated, -1.0);
        (treated_side ? pa.treated : pa.untreated) = in;
        AddPair(p_, sums_, pa.treated, pa.untreated, 1.0);
        selected_[out] = 0;
        selected_[in] = 1;
        current_ = ObjectiveFromSums(p_, sums_, n_pairs_);
        return true;
      }
      case MoveType::kRepair: {
        MatchPair& pb = pairs_[m.b];
        const double delta = p_.PairDistance(pa.treated, pb.untreated) +
                             p_.PairDistance(pb.treated, pa.untreated) -
                             p_.PairDistance(pa.treated, pa.untreated) -
                             p_.PairDistance(pb.treated, pb.untreated);
        Sums trial = sums_;
        trial.distance += delta;
        const double candidate = ObjectiveFromSums(p_, trial, n_pairs_);
        if (!Accept(candidate)) return false;
        std::swap(pa.untreated, pb.untreated);
        sums_.distance += delta;
        current_ = candidate;
        return true;
      }
    }
    return false;
  }

  const MatchProblem& p_;
  std::vector<MatchPair> pairs_;
  int n_pairs_;
  std::vector<char> selected_;
  Sums sums_;
  double current_ = 0.0;
  std::vector<std::vector<std::size_t>> treated_;
  std::vector<std::vector<std::size_t>> untreated_;
};

// Per bucket, pairs by ascending distance (ties by row indices) until the quota
// is filled.
std::vector<MatchPair> GreedyPairs(const MatchProblem& p) {
  const auto treated = RowsByBucket(p, 1);
  const auto untreated = RowsByBucket(p, 0);
  std::vector<MatchPair> pairs;
  std::vector<char> used(p.size(), 0);
  for (std::size_t k = 0; k < p.n_buckets(); ++k) {
    struct Candidate {
      double d;
      std::size_t i, j;
    };
    std::vector<Candidate> candidates;
    for (std::size_t i : treated[k]) {
      for (std::size_t j : untreated[k]) candidates.push_back({p.PairDistance(i, j), i, j});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.d != b.d) return a.d < b.d;
      if (a.i != b.i) return a.i < b.i;
      return a.j < b.j;
    });
    int taken = 0;
    for (const auto& c : candidates) {
      if (taken == p.quotas[k]) break;
      if (used[c.i] || used[c.j]) continue;
      used[c.i] = used[c.j] = 1;
      pairs.push_back({c.i, c.j, static_cast<int>(k)});
      ++taken;
    }
  }
  return pairs;
}

std::vector<MatchPair> RandomPairs(const MatchProblem& p, Rng& rng) {
  auto treated = RowsByBucket(p, 1);
  auto untreated = RowsByBucket(p, 0);
  std::vector<MatchPair> pairs;
  for (std::size_t k = 0; k < p.n_buckets(); ++k) {
    rng.Shuffle(treated[k]);
    rng.Shuffle(untreated[k]);
    for (int m = 0; m < p.quotas[k]; ++m) {
      pairs.push_back({treated[k][static_cast<std::size_t>(m)],
                       untreated[k][static_cast<std::size_t>(m)], static_cast<int>(k)});
    }
  }
  return pairs;
}

MatchSolution Finish(const MatchProblem& p, std::vector<MatchPair> pairs) {
  std::sort(pairs.begin(), pairs.end());
  MatchSolution solution;
  solution.breakdown = EvaluateObjective(p, pairs);
  solution.pairs = std::move(pairs);
  return solution;
}

MatchSolution SolveHeuristic(const MatchProblem& p, const SolveOptions& options,
                             SolveStats& stats) {
  std::optional<MatchSolution> best;
  std::vector<double> best_trajectory;
  const int restarts = std::max(1, options.restarts);
  for (int r = 0; r < restarts; ++r) {
    Rng rng = Rng::Derive(options.seed, static_cast<std::uint64_t>(r));
    std::vector<MatchPair> start = r == 0 ? GreedyPairs(p) : RandomPairs(p, rng);
    LocalSearch search(p, std::move(start));
    if (r == 0) stats.greedy_objective = search.objective();
    std::vector<double> trajectory{search.objective()};
    search.Run(rng, options.move_budget, stats, trajectory);
    MatchSolution candidate = Finish(p, search.pairs());
    if (!best || candidate.objective() < best->objective() ||
        (candidate.objective() == best->objective() && candidate.pairs < best->pairs)) {
      best = std::move(candidate);
      best_trajectory = std::move(trajectory);
    }
  }
  stats.trajectory = std::move(best_trajectory);
  return std::move(*best);
}

// Best-first branch and bound. Treated patients are decided in (bucket, row)
// order: either left unmatched or paired with a free untreated patient of the
// same bucket. With the pair count fixed by the quotas every ratio term has a
// constant denominator, so each term is bounded below by the distance from
// its target to the interval of sums still reachable.
class BranchAndBound {
 public:
  explicit BranchAndBound(const MatchProblem& p) : p_(p) {
    treated_ = RowsByBucket(p, 1);
    untreated_ = RowsByBucket(p, 0);
    for (const auto& rows : treated_) order_.insert(order_.end(), rows.begin(), rows.end());
    n_pairs_ = p.total_pairs();
  }

  std::vector<MatchPair> Run(std::vector<MatchPair> incumbent, double incumbent_value,
                             SolveStats& stats) {
    struct Node {
      double bound;
      std::uint64_t seq;
      std::size_t depth;
      std::vector<MatchPair> pairs;
      std::vector<char> used;
      std::vector<int> count;
      Sums sums;
    };
    auto worse = [](const Node& a, const Node& b) {
      return a.bound > b.bound || (a.bound == b.bound && a.seq > b.seq);
    };
    std::priority_queue<Node, std::vector<Node>, decltype(worse)> open(worse);
    std::uint64_t seq = 0;

    Node root{0.0, seq++, 0, {}, std::vector<char>(p_.size(), 0),
              std::vector<int>(p_.n_buckets(), 0), ZeroSums(p_)};
    root.bound = Bound(root.depth, root.used, root.count, root.sums);
    if (root.bound < incumbent_value) open.push(std::move(root));

    while (!open.empty()) {
      Node node = std::move(const_cast<Node&>(open.top()));
      open.pop();
      if (node.bound >= incumbent_value) break;
      ++stats.nodes_expanded;
      if (node.depth == order_.size()) {
        incumbent = node.pairs;
        incumbent_value = node.bound;
        break;
      }
      const std::size_t i = order_[node.depth];
      const auto k = static_cast<std::size_t>(p_.bucket[i]);

      auto push = [&](Node child) {
        child.bound = Bound(child.depth, child.used, child.count, child.sums);
        if (child.bound < incumbent_value) {
          child.seq = seq++;
          open.push(std::move(child));
        }
      };
      // Leave i unmatched.
      push(Node{0.0, 0, node.depth + 1, node.pairs, node.used, node.count, node.sums});
      if (node.count[k] < p_.quotas[k]) {
        for (std::size_t j : untreated_[k]) {
          if (node.used[j]) continue;
          Node child{0.0, 0, node.depth + 1, node.pairs, node.used, node.count, node.sums};
          child.used[j] = 1;
          child.count[k] += 1;
          child.pairs.push_back({i, j, static_cast<int>(k)});
          AddPair(p_, child.sums, i, j, 1.0);
          push(std::move(child));
        }
      }
    }
    return incumbent;
  }

 private:
  // Lower bound on the objective of any completion; +inf if none exists.
  double Bound(std::size_t depth, const std::vector<char>& used, const std::vector<int>& count,
               const Sums& sums) const {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    if (n_pairs_ == 0) return 0.0;
    const double n = n_pairs_;
    // Remaining treated per bucket are order_[depth..] restricted to the bucket.
    std::vector<std::vector<std::size_t>> rem_t(p_.n_buckets()), rem_u(p_.n_buckets());
    for (std::size_t d = depth; d < order_.size(); ++d) {
      rem_t[static_cast<std::size_t>(p_.bucket[order_[d]])].push_back(order_[d]);
    }
    std::vector<std::size_t> need(p_.n_buckets());
    for (std::size_t k = 0; k < p_.n_buckets(); ++k) {
      for (std::size_t j : untreated_[k]) {
        if (!used[j]) rem_u[k].push_back(j);
      }
      const int r = p_.quotas[k] - count[k];
      if (r < 0 || static_cast<std::size_t>(r) > rem_t[k].size() ||
          static_cast<std::size_t>(r) > rem_u[k].size()) {
        return kInf;
      }
      need[k] = static_cast<std::size_t>(r);
    }
    // Range of sum_k (sum of need[k] values chosen from rows[k]).
    auto range = [&](const std::vector<std::vector<std::size_t>>& rows, auto value) {
      double lo = 0.0, hi = 0.0;
      std::vector<double> v;
      for (std::size_t k = 0; k < rows.size(); ++k) {
        if (need[k] == 0) continue;
        v.clear();
        for (std::size_t row : rows[k]) v.push_back(value(row));
        std::sort(v.begin(), v.end());
        for (std::size_t m = 0; m < need[k]; ++m) {
          lo += v[m];
          hi += v[v.size() - 1 - m];
        }
      }
      return std::pair{lo, hi};
    };
    auto gap = [&](double target, double partial, std::pair<double, double> r) {
      const double lo = (partial + r.first) / n, hi = (partial + r.second) / n;
      return std::max({0.0, lo - target, target - hi});
    };
    auto risk = [&](std::size_t row) { return p_.risk(static_cast<Eigen::Index>(row)); };
    double bound = p_.weights.outcome * (gap(p_.target_risk, sums.risk_treated, range(rem_t, risk)) +
                                         gap(p_.target_risk, sums.risk_untreated, range(rem_u, risk)));
    double cov = 0.0;
    for (std::size_t c = 0; c < p_.covariate_targets.size(); ++c) {
      const auto& t = p_.covariate_targets[c];
      auto value = [&](std::size_t row) { return CovariateValue(p_, row, c); };
      if (t.arm1) cov += gap(*t.arm1, sums.cov_treated[c], range(rem_t, value));
      if (t.arm0) cov += gap(*t.arm0, sums.cov_untreated[c], range(rem_u, value));
    }
    bound += p_.weights.covariate * cov;
    const double scale = DistanceScale(p_, n_pairs_);
    if (scale > 0.0 && p_.weights.distance != 0.0) {
      double dist = sums.distance;
      std::vector<double> d;
      for (std::size_t k = 0; k < p_.n_buckets(); ++k) {
        if (need[k] == 0) continue;
        d.clear();
        for (std::size_t i : rem_t[k]) {
          for (std::size_t j : rem_u[k]) d.push_back(p_.PairDistance(i, j));
        }
        std::partial_sort(d.begin(), d.begin() + static_cast<long>(need[k]), d.end());
        for (std::size_t m = 0; m < need[k]; ++m) dist += d[m];
      }
      bound += p_.weights.distance * dist * scale;
    }
    return bound;
  }

  const MatchProblem& p_;
  std::vector<std::vector<std::size_t>> treated_;
  std::vector<std::vector<std::size_t>> untreated_;
  std::vector<std::size_t> order_;
  int n_pairs_ = 0;
};

}  // namespace

MatchSolution Solve(const MatchProblem& problem, const SolveOptions& options, SolveStats* stats) {
  SolveStats local;
  SolveStats& s = stats ? *stats : local;
  {
    // Re-check quota feasibility against the bucket populations.
    MatchProblem copy = problem;
    copy.Prepare();
  }
  if (options.mode == SolveMode::kHeuristic) return SolveHeuristic(problem, options, s);

  const double size = CountFeasibleMatchings(problem);
  if (size > options.exact_size_cap) {
    throw Error(ErrorKind::kInstanceTooLarge,
                "exact mode refused: " + FormatDouble(size) + " candidate matchings exceed cap " +
                    FormatDouble(options.exact_size_cap) + "; use heuristic mode");
  }
  SolveOptions seed_options = options;
  seed_options.restarts = 1;
  MatchSolution start = SolveHeuristic(problem, seed_options, s);
  BranchAndBound bnb(problem);
  std::vector<MatchPair> best = bnb.Run(start.pairs, start.objective(), s);
  return Finish(problem, std::move(best));
}

void WriteMatchCsv(std::ostream& out, const MatchProblem& problem, const MatchSolution& solution) {
  out << "treated_id,untreated_id,bucket\n";
  for (const auto& pair : solution.pairs) {
    out << problem.ids[pair.treated] << ',' << problem.ids[pair.untreated] << ',' << pair.bucket
        << '\n';
  }
}

std::string MatchReportJson(const MatchProblem& problem, const MatchSolution& solution,
                            const TrialTarget& target) {
  using nlohmann::json;
  const ObjectiveBreakdown& b = solution.breakdown;
  json doc;
  doc["n_pairs"] = b.n_pairs;
  doc["quotas"] = problem.quotas;
  doc["objective"] = {
      {"total", b.total},
      {"outcome_treated", b.outcome_treated},
      {"outcome_untreated", b.outcome_untreated},
      {"covariate_treated", b.covariate_treated},
      {"covariate_untreated", b.covariate_untreated},
      {"distance_sum", b.distance_sum},
      {"weights",
       {{"outcome", problem.weights.outcome},
        {"covariate", problem.weights.covariate},
        {"distance", problem.weights.distance}}},
  };
  json rows = json::array();
  rows.push_back({{"quantity", "baseline_event_free"},
                  {"arm", 1},
                  {"target", target.mu0},
                  {"achieved", 1.0 - b.mean_risk_treated},
                  {"tolerance", target.tolerance_outcome}});
  rows.push_back({{"quantity", "baseline_event_free"},
                  {"arm", 0},
                  {"target", target.mu0},
                  {"achieved", 1.0 - b.mean_risk_untreated},
                  {"tolerance", target.tolerance_outcome}});
  for (std::size_t c = 0; c < problem.covariate_targets.size(); ++c) {
    const auto& t = problem.covariate_targets[c];
    if (t.arm1) {
      rows.push_back({{"quantity", t.name},
                      {"arm", 1},
                      {"target", *t.arm1},
                      {"achieved", b.mean_covariate_treated[c]},
                      {"tolerance", target.tolerance_covariate}});
    }
    if (t.arm0) {
      rows.push_back({{"quantity", t.name},
                      {"arm", 0},
                      {"target", *t.arm0},
                      {"achieved", b.mean_covariate_untreated[c]},
                      {"tolerance", target.tolerance_covariate}});
    }
  }
  doc["achieved_vs_target"] = rows;
  return doc.dump(2) + "\n";
}

}  // namespace trialemu
