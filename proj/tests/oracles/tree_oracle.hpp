#pragma once

// Exhaustive policy-tree search by recursion over every threshold partition.

#include <algorithm>
#include <set>
#include <vector>

#include "trialemu/core.hpp"

namespace oracle {

inline double BestTreeSum(const trialemu::Matrix& x, const trialemu::Matrix& r,
                          const std::vector<int>& rows, int depth, int min_leaf) {
  double s0 = 0, s1 = 0;
  for (int i : rows) {
    s0 += r(i, 0);
    s1 += r(i, 1);
  }
  double best = std::max(s0, s1);
  if (depth == 0) return best;
  for (int f = 0; f < x.cols(); ++f) {
    std::set<double> values;
    for (int i : rows) values.insert(x(i, f));
    for (double cut : values) {
      std::vector<int> left, right;
      for (int i : rows) (x(i, f) < cut ? left : right).push_back(i);
      if (static_cast<int>(left.size()) < min_leaf || static_cast<int>(right.size()) < min_leaf) continue;
      best = std::max(best, BestTreeSum(x, r, left, depth - 1, min_leaf) +
                                BestTreeSum(x, r, right, depth - 1, min_leaf));
    }
  }
  return best;
}

// Optimal mean policy value over trees of depth <= depth.
inline double BestTreeValue(const trialemu::Matrix& x, const trialemu::Matrix& r, int depth,
                            int min_leaf) {
  std::vector<int> rows(static_cast<std::size_t>(x.rows()));
  for (int i = 0; i < x.rows(); ++i) rows[static_cast<std::size_t>(i)] = i;
  return BestTreeSum(x, r, rows, depth, min_leaf) / static_cast<double>(x.rows());
}

// Up to 12 rows over 1-2 features with few distinct values, rewards in [0,1].
inline std::pair<trialemu::Matrix, trialemu::Matrix> RandomTreeInstance(trialemu::Rng& rng) {
  const int n = 2 + static_cast<int>(rng.Index(11));
  const int l = 1 + static_cast<int>(rng.Index(2));
  trialemu::Matrix x(n, l), r(n, 2);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < l; ++j) x(i, j) = static_cast<double>(rng.Index(5));
    r(i, 0) = std::round(rng.Uniform() * 100) / 100;
    r(i, 1) = std::round(rng.Uniform() * 100) / 100;
  }
  return {x, r};
}

}  // namespace oracle
