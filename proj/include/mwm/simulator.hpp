#pragma once

// Cycle-accurate Monte Carlo of the weighing machine. Each cycle observes
// the hopper contents, lets the built-in selection rule pick the lightest
// combination above the target, discharges it and refills exactly the
// opened hoppers. Shut hoppers keep their product, so contents persist
// across cycles (a fresh-draw mode redraws everything for comparison; the
// per-cycle weight distribution is the same either way because draws are
// independent).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "mwm/errors.hpp"
#include "mwm/linalg.hpp"
#include "mwm/machine_model.hpp"
#include "mwm/order_stats.hpp"
#include "mwm/rng.hpp"

namespace mwm {

struct CycleState {
  Vector hopper_contents;  // grams currently sitting in each hopper
  std::size_t cycle_index = 0;
};

struct SimulationResult {
  std::size_t n_cycles = 0;
  std::size_t counted_packages = 0;   // cycles with a feasible combination
  double mean_w = 0.0;                // conditional mean package weight
  double var_w = 0.0;                 // conditional variance
  double mse = 0.0;                   // var_w + (mean_w - target)^2
  double underweight_rate = 0.0;      // fraction of cycles with no feasible combination
  double giveaway_mean = 0.0;         // mean_w - target
  std::uint64_t seed = 0;
  std::size_t resampled_draws = 0;    // negative fill draws redrawn
};

struct SimulationOptions {
  bool fresh_draws = false;  // redraw every hopper each cycle
  // Stream label per hopper; defaults to the hopper index. Lets callers
  // carry the draw streams along when relabeling hoppers.
  std::vector<std::uint64_t> hopper_stream_ids;
  // Optional sink for realized package weights.
  std::vector<double>* package_log = nullptr;
};

// Lightest combination strictly above the target; ties broken by the
// lowest combination index. nullopt when none clears the target.
inline std::optional<std::size_t> knapsack_select(const Vector& weights, double target) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!std::isfinite(weights[i])) throw ConfigError("knapsack_select: nonfinite weight");
    if (weights[i] > target && (!best || weights[i] < weights[*best])) best = i;
  }
  return best;
}

inline SimulationResult run_simulation(const Setpoints& setpoints, const MachineConfig& config,
                                       const OpeningMatrix& open, std::size_t n_cycles, std::uint64_t seed,
                                       const SimulationOptions& options = {}) {
  config.validate();
  setpoints.validate();
  if (open.hoppers != setpoints.mu.size())
    throw ConfigError("run_simulation: setpoint count does not match hopper count");
  if (n_cycles < 1) throw ConfigError("run_simulation: need at least one cycle");
  const std::size_t h = open.hoppers;
  const std::size_t k = open.count();
  if (k == 0) throw ConfigError("run_simulation: empty combination set");
  if (!options.hopper_stream_ids.empty() && options.hopper_stream_ids.size() != h)
    throw ConfigError("run_simulation: stream id count does not match hopper count");

  SimulationResult result;
  result.n_cycles = n_cycles;
  result.seed = seed;

  std::vector<Stream> streams;
  streams.reserve(h);
  for (std::size_t j = 0; j < h; ++j) {
    const std::uint64_t id = options.hopper_stream_ids.empty() ? j : options.hopper_stream_ids[j];
    streams.emplace_back(seed, id);
  }

  Vector sd(h);
  for (std::size_t j = 0; j < h; ++j) sd[j] = config.alpha * setpoints.mu[j];
  auto refill = [&](std::size_t j) {
    double w = streams[j].next_gaussian(setpoints.mu[j], sd[j]);
    while (!(w > 0.0)) {  // never clamp: clamping would bias the moments
      ++result.resampled_draws;
      w = streams[j].next_gaussian(setpoints.mu[j], sd[j]);
    }
    return w;
  };

  CycleState state;
  state.hopper_contents.resize(h);
  for (std::size_t j = 0; j < h; ++j) state.hopper_contents[j] = refill(j);

  Vector x(k);
  double mean = 0.0, m2 = 0.0;
  std::size_t counted = 0, underweight = 0;
  for (state.cycle_index = 0; state.cycle_index < n_cycles; ++state.cycle_index) {
    if (options.fresh_draws && state.cycle_index > 0)
      for (std::size_t j = 0; j < h; ++j) state.hopper_contents[j] = refill(j);

    for (std::size_t i = 0; i < k; ++i) {
      double s = 0.0;
      const auto& row = open.rows[i];
      for (std::size_t j = 0; j < h; ++j)
        if (row[j]) s += state.hopper_contents[j];
      x[i] = s;
    }

    const std::optional<std::size_t> pick = knapsack_select(x, config.target);
    std::size_t discharge;
    if (pick) {
      const double w = x[*pick];
      if (!(w > config.target))
        throw NumericalError("run_simulation: counted package at or below target");  // hot-loop guard
      ++counted;
      const double d = w - mean;
      mean += d / static_cast<double>(counted);
      m2 += d * (w - mean);
      if (options.package_log) options.package_log->push_back(w);
      discharge = *pick;
    } else {
      // No combination clears the target: release the heaviest one so the
      // machine keeps moving; the package does not enter the conditional
      // statistics.
      ++underweight;
      discharge = 0;
      for (std::size_t i = 1; i < k; ++i)
        if (x[i] > x[discharge]) discharge = i;
    }
    const auto& row = open.rows[discharge];
    for (std::size_t j = 0; j < h; ++j)
      if (row[j]) state.hopper_contents[j] = refill(j);
  }

  result.counted_packages = counted;
  result.underweight_rate = static_cast<double>(underweight) / static_cast<double>(n_cycles);
  if (counted >= 1) {
    result.mean_w = mean;
    result.var_w = counted >= 2 ? m2 / static_cast<double>(counted - 1) : 0.0;
    result.giveaway_mean = mean - config.target;
    result.mse = result.var_w + result.giveaway_mean * result.giveaway_mean;
  } else {
    result.mean_w = result.var_w = result.mse = result.giveaway_mean =
        std::numeric_limits<double>::quiet_NaN();
  }
  return result;
}

struct ReplicationSummary {
  std::vector<SimulationResult> runs;
  double mse_mean = 0.0;
  double mse_sd = 0.0;  // standard error of the MSE across replications
};

// Independent replications with seeds derived from (seed, replication).
inline ReplicationSummary simulate_replications(const Setpoints& setpoints, const MachineConfig& config,
                                                const OpeningMatrix& open, std::size_t n_cycles,
                                                std::uint64_t seed, std::size_t reps,
                                                const SimulationOptions& options = {}) {
  if (reps < 1) throw ConfigError("simulate_replications: need at least one replication");
  ReplicationSummary summary;
  summary.runs.reserve(reps);
  for (std::size_t r = 0; r < reps; ++r)
    summary.runs.push_back(
        run_simulation(setpoints, config, open, n_cycles, derive_stream_seed(seed, 0xEE00 + r), options));
  double acc = 0.0;
  for (const auto& run : summary.runs) acc += run.mse;
  summary.mse_mean = acc / static_cast<double>(reps);
  if (reps >= 2) {
    double ss = 0.0;
    for (const auto& run : summary.runs) ss += (run.mse - summary.mse_mean) * (run.mse - summary.mse_mean);
    summary.mse_sd = std::sqrt(ss / static_cast<double>(reps - 1) / static_cast<double>(reps));
  }
  return summary;
}

struct DensityGrid {
  std::size_t points = 512;
};

// Marginal density table for plotting: one column per combination plus
// normal approximations of the two extreme order statistics.
struct DensityTable {
  Vector x;                           // grid, grams
  std::vector<Vector> combination;    // K columns
  Vector min_approx;                  // N(E[min], Var[min])
  Vector max_approx;                  // N(E[max], Var[max])
};

inline DensityTable density_table(const Vector& theta, const Matrix& sigma, const ExtremeMoments& extremes,
                                  const DensityGrid& grid = {}) {
  const std::size_t k = theta.size();
  if (k == 0 || sigma.rows() != k) throw ConfigError("density_table: dimension mismatch");
  if (grid.points < 16) throw ConfigError("density_table: grid too coarse");
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  double sd_max = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    lo = std::min(lo, theta[i]);
    hi = std::max(hi, theta[i]);
    sd_max = std::max(sd_max, std::sqrt(sigma(i, i)));
  }
  lo -= 4.0 * sd_max;
  hi += 4.0 * sd_max;

  DensityTable table;
  table.x.resize(grid.points);
  const double step = (hi - lo) / static_cast<double>(grid.points - 1);
  for (std::size_t g = 0; g < grid.points; ++g) table.x[g] = lo + step * static_cast<double>(g);

  auto normal_column = [&](double mean, double var) {
    Vector col(grid.points);
    const double sd = std::sqrt(var);
    for (std::size_t g = 0; g < grid.points; ++g) col[g] = norm_pdf((table.x[g] - mean) / sd) / sd;
    return col;
  };
  table.combination.reserve(k);
  for (std::size_t i = 0; i < k; ++i) table.combination.push_back(normal_column(theta[i], sigma(i, i)));
  table.min_approx = normal_column(extremes.e_min, extremes.var_min);
  table.max_approx = normal_column(extremes.e_max, extremes.var_max);
  return table;
}

}  // namespace mwm
