#pragma once

// JSON bindings for the configuration and result types. Field names are
// part of the file-format contract; keep them stable.

#include <algorithm>
#include <array>
#include <limits>
#include <string>
#include <vector>

#include <cmath>

#include <json.hpp>

#include "mwm/errors.hpp"
#include "mwm/heuristic.hpp"
#include "mwm/machine_model.hpp"
#include "mwm/order_stats.hpp"
#include "mwm/simulator.hpp"

namespace mwm {

using json = nlohmann::json;

inline json to_json(const MachineConfig& c) {
  return json{{"H", c.hopper_count},
              {"T", c.target},
              {"alpha", c.alpha},
              {"max_shut", c.max_shut},
              {"exclude_all_open", c.exclude_all_open},
              {"epsilon", c.epsilon},
              {"f", c.setpoint_fraction}};
}

inline MachineConfig machine_config_from_json(const json& j) {
  MachineConfig c;
  try {
    c.hopper_count = j.at("H").get<int>();
    c.target = j.at("T").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.max_shut = j.at("max_shut").get<int>();
    c.exclude_all_open = j.value("exclude_all_open", false);
    c.epsilon = j.value("epsilon", 1e-5);
    c.setpoint_fraction = j.value("f", 1.0);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config json: ") + e.what());
  }
  c.validate();
  return c;
}

inline json to_json(const ExtremeMoments& m) {
  return json{{"e_min", m.e_min},     {"var_min", m.var_min}, {"e_max", m.e_max},
              {"var_max", m.var_max}, {"method", to_string(m.method)},
              {"err_mean", m.err_mean}, {"err_var", m.err_var}};
}

inline json to_json(const Diagnostics& d) {
  return json{{"extreme_avg", d.extreme_avg},
              {"theta_bar", d.theta_bar},
              {"neg_log_det_sigma", d.neg_log_det_sigma},
              {"p_value", d.p_value},
              {"c_count", d.c_count},
              {"neg_log_det_m", d.neg_log_det_m}};
}

inline json to_json(const SimulationResult& r) {
  return json{{"n_cycles", r.n_cycles},
              {"counted_packages", r.counted_packages},
              {"mean_w", r.mean_w},
              {"var_w", r.var_w},
              {"mse", r.mse},
              {"underweight_rate", r.underweight_rate},
              {"giveaway_mean", r.giveaway_mean},
              {"seed", r.seed},
              {"resampled_draws", r.resampled_draws}};
}

inline SimulationResult simulation_result_from_json(const json& j) {
  SimulationResult r;
  try {
    r.n_cycles = j.at("n_cycles").get<std::size_t>();
    r.counted_packages = j.at("counted_packages").get<std::size_t>();
    r.mean_w = j.at("mean_w").get<double>();
    r.var_w = j.at("var_w").get<double>();
    r.mse = j.at("mse").get<double>();
    r.underweight_rate = j.at("underweight_rate").get<double>();
    r.giveaway_mean = j.at("giveaway_mean").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.resampled_draws = j.value("resampled_draws", std::size_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("simulation json: ") + e.what());
  }
  return r;
}

inline json to_json(const SolutionReport& r) {
  json starts = json::array();
  for (const auto& s : r.starts) {
    // Starts that never produced an admissible point carry -inf, which
    // JSON cannot represent; serialize those as null.
    json objective;
    if (std::isfinite(s.objective)) objective = s.objective;
    starts.push_back(json{{"index", s.index}, {"objective", objective}, {"feasible", s.feasible}});
  }
  return json{{"mu_star", r.mu_star.mu},
              {"objective_value", r.objective_value},
              {"diagnostics", to_json(r.diagnostics)},
              {"constraint_residuals", r.constraint_residuals},
              {"starts", starts},
              {"wall_time_s", r.wall_time_s},
              {"bound_mode", to_string(r.bound_mode)},
              {"extreme_method", to_string(r.extreme_method)},
              {"seed", r.seed}};
}

inline SolutionReport solution_report_from_json(const json& j) {
  SolutionReport r;
  try {
    r.mu_star.mu = j.at("mu_star").get<Vector>();
    r.objective_value = j.at("objective_value").get<double>();
    const json& d = j.at("diagnostics");
    r.diagnostics.extreme_avg = d.at("extreme_avg").is_null()
                                    ? std::numeric_limits<double>::quiet_NaN()
                                    : d.at("extreme_avg").get<double>();
    r.diagnostics.theta_bar = d.at("theta_bar").get<double>();
    r.diagnostics.neg_log_det_sigma = d.at("neg_log_det_sigma").get<double>();
    r.diagnostics.p_value = d.at("p_value").get<double>();
    r.diagnostics.c_count = d.at("c_count").get<int>();
    r.diagnostics.neg_log_det_m = d.at("neg_log_det_m").get<double>();
    const auto res = j.at("constraint_residuals").get<std::vector<double>>();
    if (res.size() != 4) throw ConfigError("report json: constraint_residuals must have 4 entries");
    std::copy(res.begin(), res.end(), r.constraint_residuals.begin());
    for (const auto& s : j.value("starts", json::array())) {
      const json& objective = s.at("objective");
      r.starts.push_back(StartSummary{s.at("index").get<int>(),
                                      objective.is_null() ? -std::numeric_limits<double>::infinity()
                                                          : objective.get<double>(),
                                      s.at("feasible").get<bool>()});
    }
    r.wall_time_s = j.value("wall_time_s", 0.0);
    r.bound_mode = j.value("bound_mode", std::string("lower_bound")) == "exact" ? BoundMode::exact
                                                                                : BoundMode::lower_bound;
    const std::string method = j.value("extreme_method", std::string("lower_bound"));
    r.extreme_method = method == "exact" ? MomentMethod::exact
                       : method == "monte_carlo" ? MomentMethod::monte_carlo
                                                 : MomentMethod::lower_bound;
    r.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("report json: ") + e.what());
  }
  return r;
}

}  // namespace mwm
