#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cstdint>
#include <numeric>
#include <vector>

namespace voxmae::oracle {

using Big = boost::multiprecision::cpp_bin_float_50;

// Pairwise counting: wins + ties/2 over every positive-negative pair.
inline double auroc_bruteforce(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  double wins = 0.0;
  long pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  return wins / static_cast<double>(pairs);
}

// Step integration of the precision-recall curve: sum over cut points of
// (recall_k - recall_{k-1}) * precision_k, ranking by descending score with
// ties broken by ascending index.
inline double auprc_step(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  const double positives = static_cast<double>(std::count(y.begin(), y.end(), 1));
  double area = 0.0, prev_recall = 0.0, tp = 0.0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    tp += y[order[k]];
    const double recall = tp / positives;
    const double precision = tp / static_cast<double>(k + 1);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

struct BigStats {
  Big mean, var;
};

inline BigStats big_stats(const std::vector<double>& v) {
  Big sum = 0;
  for (double x : v) sum += x;
  const Big mean = sum / v.size();
  Big ss = 0;
  for (double x : v) ss += (Big(x) - mean) * (Big(x) - mean);
  return {mean, ss / (v.size() - 1)};
}

struct BigWelch {
  double t, df, p;
};

inline BigWelch welch_reference(const std::vector<double>& a, const std::vector<double>& b) {
  const auto sa = big_stats(a), sb = big_stats(b);
  const Big qa = sa.var / a.size(), qb = sb.var / b.size();
  const Big t = (sa.mean - sb.mean) / boost::multiprecision::sqrt(qa + qb);
  const Big df = (qa + qb) * (qa + qb) / (qa * qa / (a.size() - 1) + qb * qb / (b.size() - 1));
  boost::math::students_t_distribution<Big> dist(df);
  const Big p = 2 * boost::math::cdf(boost::math::complement(dist, boost::multiprecision::abs(t)));
  return {static_cast<double>(t), static_cast<double>(df), static_cast<double>(p)};
}

// Mean, sample std, standard error and 1.96 * SE half-width.
inline std::vector<double> aggregate_reference(const std::vector<double>& v) {
  const auto s = big_stats(v);
  const Big sd = boost::multiprecision::sqrt(s.var);
  const Big se = sd / boost::multiprecision::sqrt(Big(v.size()));
  return {static_cast<double>(s.mean), static_cast<double>(sd), static_cast<double>(se), static_cast<double>(Big("1.96") * se)};
}

}  // namespace voxmae::oracle
