#pragma once

// Model of a multihead weighing machine: the hopper setpoints, the set of
// open/shut combinations the built-in selection algorithm may pick from,
// and the joint normal distribution of the resulting combination weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "mwm/errors.hpp"
#include "mwm/linalg.hpp"

namespace mwm {

// Immutable problem statement for one machine setup task.
struct MachineConfig {
  int hopper_count = 0;          // H
  double target = 0.0;           // T, grams: minimum package weight
  double alpha = 0.0;            // per-hopper sd/mean ratio, in (0,1)
  int max_shut = 0;              // cycle policy: at most this many hoppers stay shut
  bool exclude_all_open = false; // drop the all-open combination
  double epsilon = 1e-5;         // tail mass allowed for the all-open chance constraint
  double setpoint_fraction = 1.0;// f: each setpoint must stay below f * target

  void validate() const {
    if (hopper_count < 2) throw ConfigError("config: hopper count must be at least 2");
    if (!(target > 0.0)) throw ConfigError("config: target must be positive");
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("config: alpha must lie in (0,1)");
    if (max_shut < 0 || max_shut >= hopper_count)
      throw ConfigError("config: max_shut must lie in [0, hopper_count-1]");
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("config: epsilon must lie in (0,1)");
    if (!(setpoint_fraction > 0.0 && setpoint_fraction <= 1.0))
      throw ConfigError("config: setpoint fraction f must lie in (0,1]");
  }
};

// Non-fatal advice derived from the configuration.
inline std::vector<std::string> config_warnings(const MachineConfig& config) {
  std::vector<std::string> warnings;
  if (config.hopper_count > 10 && config.max_shut >= 3 && !config.exclude_all_open) {
    warnings.push_back(
        "large hopper count with max_shut >= 3: the combination covariance becomes "
        "severely ill-conditioned; consider exclude_all_open=true");
  }
  return warnings;
}

// Decision vector: mean fill weight per hopper, grams.
struct Setpoints {
  Vector mu;

  void validate() const {
    if (mu.empty()) throw ConfigError("setpoints: empty");
    for (double v : mu)
      if (!(v > 0.0) || !std::isfinite(v)) throw ConfigError("setpoints: every entry must be positive and finite");
  }

  Setpoints sorted_descending() const {
    Setpoints s = *this;
    std::sort(s.mu.begin(), s.mu.end(), std::greater<double>());
    return s;
  }
};

// K x H binary open/shut matrix, one row per admissible combination.
struct OpeningMatrix {
  std::size_t hoppers = 0;
  std::vector<std::vector<std::uint8_t>> rows;  // 1 = hopper opens

  std::size_t count() const { return rows.size(); }

  std::size_t open_count(std::size_t i) const {
    std::size_t c = 0;
    for (auto v : rows[i]) c += v;
    return c;
  }
};

// All combinations with shut count in [0, max_shut], ordered
// lexicographically by the set of shut hopper indices (all-open first).
inline OpeningMatrix enumerate_combinations(const MachineConfig& config) {
  config.validate();
  OpeningMatrix p;
  p.hoppers = static_cast<std::size_t>(config.hopper_count);

  const int h = config.hopper_count;
  std::vector<int> shut;
  auto emit = [&]() {
    if (shut.empty() && config.exclude_all_open) return;
    std::vector<std::uint8_t> row(static_cast<std::size_t>(h), 1);
    for (int j : shut) row[static_cast<std::size_t>(j)] = 0;
    p.rows.push_back(std::move(row));
  };
  // Depth-first over shut sets in lexicographic order: {}, {0}, {0,1}, ...
  auto dfs = [&](auto&& self, int next) -> void {
    emit();
    if (static_cast<int>(shut.size()) == config.max_shut) return;
    for (int j = next; j < h; ++j) {
      shut.push_back(j);
      self(self, j + 1);
      shut.pop_back();
    }
  };
  dfs(dfs, 0);
  return p;
}

// Joint distribution of the combination weights for given setpoints:
// theta = P mu and sigma = P diag(alpha^2 mu^2) P'.
struct CombinationSet {
  OpeningMatrix open;      // P
  Vector theta;            // combination means, grams
  Matrix sigma;            // combination covariance, grams^2
  Vector hopper_variance;  // alpha^2 mu_j^2 per hopper
};

inline CombinationSet combination_distribution(const OpeningMatrix& open, const Setpoints& setpoints,
                                               double alpha) {
  setpoints.validate();
  if (open.hoppers != setpoints.mu.size())
    throw ConfigError("combination_distribution: setpoint count does not match hopper count");
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("combination_distribution: alpha must lie in (0,1)");

  const std::size_t k = open.count();
  const std::size_t h = open.hoppers;
  CombinationSet set;
  set.open = open;
  set.hopper_variance.resize(h);
  for (std::size_t j = 0; j < h; ++j) {
    const double s = alpha * setpoints.mu[j];
    set.hopper_variance[j] = s * s;
  }
  set.theta.assign(k, 0.0);
  set.sigma = Matrix(k, k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double t = 0.0;
    for (std::size_t j = 0; j < h; ++j)
      if (open.rows[i][j]) t += setpoints.mu[j];
    set.theta[i] = t;
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t i2 = i; i2 < k; ++i2) {
      double s = 0.0;
      for (std::size_t j = 0; j < h; ++j)
        if (open.rows[i][j] && open.rows[i2][j]) s += set.hopper_variance[j];
      set.sigma(i, i2) = s;
      set.sigma(i2, i) = s;
    }
  }
  return set;
}

// How many K-dimensional integrals an exact constrained-moment evaluation
// would require when all 2^H - 1 combinations are admissible. Reporting
// aid only; the count exceeds 64-bit integers from six hoppers up, so it
// is carried as a double (exactly representable until it overflows).
struct IntegralCount {
  double count = 0.0;         // 2^(K-1) * K
  long long dimension = 0;    // K = 2^H - 1
  bool exact_integer = true;  // count fits in an unsigned 64-bit integer
};

inline IntegralCount integral_count(int hoppers) {
  if (hoppers < 1 || hoppers > 62) throw ConfigError("integral_count: hopper count must lie in [1, 62]");
  IntegralCount out;
  out.dimension = (1LL << hoppers) - 1;
  out.count = out.dimension <= 1100
                  ? std::ldexp(static_cast<double>(out.dimension), static_cast<int>(out.dimension - 1))
                  : std::numeric_limits<double>::infinity();
  int bits = 0;
  for (long long v = out.dimension; v > 0; v >>= 1) ++bits;
  out.exact_integer = (out.dimension - 1) + bits <= 64;
  return out;
}

}  // namespace mwm
