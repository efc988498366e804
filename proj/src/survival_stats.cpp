#include "trialemu/survival_stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

namespace trialemu {

namespace {

struct TimeTally {
  int events = 0;
  int censored = 0;
};

// Distinct times ascending with event/censor counts.
std::map<double, TimeTally> Tally(const Vector& times, const IntVector& events) {
  std::map<double, TimeTally> tally;
  for (Eigen::Index i = 0; i < times.size(); ++i) {
    if (!(times(i) >= 0.0)) throw Error(ErrorKind::kSchema, "survival times must be >= 0");
    if (events(i) != 0 && events(i) != 1) {
      throw Error(ErrorKind::kSchema, "event flags must be 0 or 1");
    }
    auto& t = tally[times(i)];
    (events(i) == 1 ? t.events : t.censored) += 1;
  }
  return tally;
}

}  // namespace

double KMCurve::SurvivalAt(double t) const {
  auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - times.begin()) - 1];
}

KMCurve KaplanMeier(const Vector& times, const IntVector& events) {
  if (times.size() == 0) throw Error(ErrorKind::kInsufficientData, "km: empty input");
  if (times.size() != events.size()) throw Error(ErrorKind::kSchema, "km: length mismatch");
  KMCurve curve;
  curve.n = static_cast<std::size_t>(times.size());
  int at_risk = static_cast<int>(times.size());
  double s = 1.0;
  for (const auto& [t, tally] : Tally(times, events)) {
    if (tally.events > 0) {
      s *= 1.0 - static_cast<double>(tally.events) / static_cast<double>(at_risk);
      curve.times.push_back(t);
      curve.survival.push_back(s);
      curve.at_risk.push_back(at_risk);
      curve.events.push_back(tally.events);
    }
    at_risk -= tally.events + tally.censored;
  }
  return curve;
}

std::optional<double> MedianSurvival(const KMCurve& curve) {
  for (std::size_t k = 0; k < curve.times.size(); ++k) {
    if (curve.survival[k] <= 0.5) return curve.times[k];
  }
  return std::nullopt;
}

void WriteKmCsv(std::ostream& out, const KMCurve& curve) {
  out << "time,survival,at_risk,events\n";
  for (std::size_t k = 0; k < curve.times.size(); ++k) {
    out << Format4(curve.times[k]) << ',' << Format4(curve.survival[k]) << ','
        << curve.at_risk[k] << ',' << curve.events[k] << '\n';
  }
}

double ChiSquare1Sf(double x) {
  if (!(x > 0.0)) return 1.0;
  return std::erfc(std::sqrt(x / 2.0));
}

LogRankResult LogRank(const Vector& times0, const IntVector& events0, const Vector& times1,
                      const IntVector& events1) {
  if (times0.size() == 0 || times1.size() == 0) {
    throw Error(ErrorKind::kInsufficientData, "logrank: both groups must be nonempty");
  }
  if (times0.size() != events0.size() || times1.size() != events1.size()) {
    throw Error(ErrorKind::kSchema, "logrank: length mismatch");
  }
  const auto tally0 = Tally(times0, events0);
  const auto tally1 = Tally(times1, events1);
  std::vector<double> grid;
  for (const auto& [t, _] : tally0) grid.push_back(t);
  for (const auto& [t, _] : tally1) grid.push_back(t);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  double r0 = static_cast<double>(times0.size());
  double r1 = static_cast<double>(times1.size());
  LogRankResult out;
  double total_events = 0.0;
  for (double t : grid) {
    TimeTally a, b;
    if (auto it = tally0.find(t); it != tally0.end()) a = it->second;
    if (auto it = tally1.find(t); it != tally1.end()) b = it->second;
    const double d = a.events + b.events;
    const double r = r0 + r1;
    if (d > 0.0) {
      total_events += d;
      out.observed1 += b.events;
      out.expected1 += d * r1 / r;
      if (r > 1.0) out.variance += d * (r1 / r) * (1.0 - r1 / r) * (r - d) / (r - 1.0);
    }
    r0 -= a.events + a.censored;
    r1 -= b.events + b.censored;
  }
  if (total_events == 0.0) {
    throw Error(ErrorKind::kUndefined, "logrank: no events in pooled data");
  }
  const double diff = out.observed1 - out.expected1;
  if (out.variance > 0.0) {
    out.statistic = diff * diff / out.variance;
    out.p_value = ChiSquare1Sf(out.statistic);
  } else if (std::abs(diff) > 0.0) {
    throw Error(ErrorKind::kUndefined, "logrank: zero variance with nonzero O-E");
  }
  return out;
}

double HarrellC(const Vector& scores, const Vector& times, const IntVector& events) {
  const Eigen::Index n = scores.size();
  if (times.size() != n || events.size() != n) {
    throw Error(ErrorKind::kSchema, "harrell_c: length mismatch");
  }
  double comparable = 0.0, concordant = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (events(i) != 1) continue;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (!(times(i) < times(j))) continue;
      comparable += 1.0;
      if (scores(i) > scores(j)) {
        concordant += 1.0;
      } else if (scores(i) == scores(j)) {
        concordant += 0.5;
      }
    }
  }
  if (comparable == 0.0) throw Error(ErrorKind::kUndefined, "harrell_c: no comparable pairs");
  return concordant / comparable;
}

double TumorBurdenScore(const RiskScoreInput& input) {
  return std::hypot(input.max_size_cm, input.n_tumors);
}

int CrsScore(const RiskScoreInput& input) {
  int score = 0;
  if (input.node_positive) ++score;
  if (input.dfi_months < 12.0) ++score;
  if (input.n_tumors > 1.0) ++score;
  if (input.max_size_cm > 5.0) ++score;
  if (input.cea_ng_ml >= 200.0) ++score;
  return score;
}

int GameScore(const RiskScoreInput& input) {
  int score = 0;
  if (input.kras_mutated) ++score;
  if (input.cea_ng_ml >= 20.0) ++score;
  if (input.node_positive) ++score;
  const double tbs = TumorBurdenScore(input);
  if (tbs >= 9.0) {
    score += 2;
  } else if (tbs >= 3.0) {
    score += 1;
  }
  return score;
}

double RegularizedIncompleteBeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // Continued fraction (modified Lentz), evaluated on the side where it
  // converges quickly.
  auto continued_fraction = [](double a, double b, double x) {
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 10000; ++m) {
      const double m2 = 2.0 * m;
      double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < kTiny) d = kTiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < kTiny) c = kTiny;
      d = 1.0 / d;
      h *= d * c;
      aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
      d = 1.0 + aa * d;
      if (std::abs(d) < kTiny) d = kTiny;
      c = 1.0 + aa / c;
      if (std::abs(c) < kTiny) c = kTiny;
      d = 1.0 / d;
      const double del = d * c;
      h *= del;
      if (std::abs(del - 1.0) < 1e-16) break;
    }
    return h;
  };
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                           a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * continued_fraction(a, b, x) / a;
  return 1.0 - front * continued_fraction(b, a, 1.0 - x) / b;
}

double StudentTTwoSidedP(double t, double df) {
  if (!std::isfinite(t)) return 0.0;
  return RegularizedIncompleteBeta(df / 2.0, 0.5, df / (df + t * t));
}

std::optional<WelchResult> WelchTTest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) return std::nullopt;
  auto moments = [](const std::vector<double>& v) {
    const double n = static_cast<double>(v.size());
    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  WelchResult r;
  if (sa + sb == 0.0) {
    r.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    r.df = na + nb - 2.0;
    r.p_value = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(sa + sb);
  r.df = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  r.p_value = std::min(1.0, StudentTTwoSidedP(r.t, r.df));
  return r;
}

std::vector<LeafBalance> NodeBalanceAudit(const std::vector<int>& leaves,
                                          const IntVector& treatment, const Vector& scores) {
  if (static_cast<Eigen::Index>(leaves.size()) != treatment.size() ||
      treatment.size() != scores.size()) {
    throw Error(ErrorKind::kSchema, "balance audit: length mismatch");
  }
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> by_leaf;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    auto& arms = by_leaf[leaves[i]];
    const auto r = static_cast<Eigen::Index>(i);
    (treatment(r) == 1 ? arms.second : arms.first).push_back(scores(r));
  }
  std::vector<LeafBalance> out;
  for (const auto& [leaf, arms] : by_leaf) {
    LeafBalance row;
    row.leaf = leaf;
    row.n0 = arms.first.size();
    row.n1 = arms.second.size();
    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? std::numeric_limits<double>::quiet_NaN()
                       : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    row.mean0 = mean(arms.first);
    row.mean1 = mean(arms.second);
    if (auto w = WelchTTest(arms.first, arms.second)) row.p_value = w->p_value;
    out.push_back(row);
  }
  return out;
}

}  // namespace trialemu
