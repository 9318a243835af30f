#pragma once

// Central finite differences against analytic gradients, reported per
// parameter group (the array name up to its last component).

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "voxmae/model.hpp"
#include "voxmae/rng.hpp"

namespace voxmae::oracle {

struct GroupError {
  double max_rel = 0.0;
  std::string worst;  // "name[index]"
  int checked = 0;
};

inline std::string group_of(const std::string& name) {
  const auto dot = name.rfind('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

// Perturbs every entry of arrays with at most `full_limit` entries and a
// seeded sample of `sample` entries of larger ones. Error is |a-n|/max(1,|n|).
inline std::map<std::string, GroupError> finite_difference_check(ParameterSet<double> params, const GradientSet<double>& analytic,
                                                                 const std::function<double(const ParameterSet<double>&)>& loss,
                                                                 double eps = 1e-5, int full_limit = 1 << 30, int sample = 0,
                                                                 std::uint64_t seed = 0) {
  std::map<std::string, GroupError> out;
  Rng rng(seed);
  for (auto& [name, m] : params.arrays) {
    const int n = m.rows() * m.cols();
    std::vector<int> idx;
    if (n <= full_limit) {
      for (int i = 0; i < n; ++i) idx.push_back(i);
    } else {
      idx = random_permutation(n, rng);
      idx.resize(static_cast<std::size_t>(std::min(sample, n)));
    }
    const auto& g = analytic.at(name);
    auto& err = out[group_of(name)];
    for (int i : idx) {
      double& x = m[static_cast<std::size_t>(i)];
      const double saved = x;
      x = saved + eps;
      const double up = loss(params);
      x = saved - eps;
      const double down = loss(params);
      x = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double rel = std::abs(g[static_cast<std::size_t>(i)] - numeric) / std::max(1.0, std::abs(numeric));
      if (rel > err.max_rel || err.worst.empty()) {
        err.max_rel = std::max(err.max_rel, rel);
        if (rel >= err.max_rel) err.worst = name + "[" + std::to_string(i) + "]";
      }
      ++err.checked;
    }
  }
  return out;
}

inline double worst_error(const std::map<std::string, GroupError>& e) {
  double w = 0.0;
  for (const auto& [_, g] : e) w = std::max(w, g.max_rel);
  return w;
}

}  // namespace voxmae::oracle
