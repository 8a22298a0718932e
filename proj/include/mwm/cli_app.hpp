#pragma once

// Command-line surface. Kept in a header so the dispatcher can be driven
// directly from tests; tools/mwm.cpp is a thin wrapper around run_cli.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure,
// 4 infeasible problem.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mwm/errors.hpp"
#include "mwm/heuristic.hpp"
#include "mwm/json_io.hpp"
#include "mwm/machine_model.hpp"
#include "mwm/order_stats.hpp"
#include "mwm/simulator.hpp"

namespace mwm {
namespace cli {

// One experiment as the CLI assembles it: machine, solver, simulation
// budget and where/how results land.
struct ExperimentSpec {
  MachineConfig config;
  SolverOptions solver;
  std::size_t sim_cycles = 50000;
  std::size_t sim_reps = 1;
  std::string output_dir = ".";
  bool write_json = true;
  bool write_csv = false;

  void validate_for_mse_reporting() const {
    if (sim_cycles < 1000)
      throw ConfigError("at least 1000 cycles are required for MSE reporting");
    if (sim_reps < 1) throw ConfigError("reps must be at least 1");
  }
};

struct BenchmarkSetup {
  std::string name;
  MachineConfig config;
  Vector mu;
};

// Reference setups used by the regression suite and the diagnostics table.
inline const std::vector<BenchmarkSetup>& benchmark_setups() {
  static const std::vector<BenchmarkSetup> setups = {
      {"4a", {4, 500.0, 0.123, 2, false, 1e-5, 0.6}, {294.9, 276.7, 183.7, 66.6}},
      {"4b", {4, 500.0, 0.123, 2, false, 1e-5, 0.6}, {267.4, 259.0, 234.6, 57.7}},
      {"5a", {5, 500.0, 0.123, 2, false, 1e-5, 0.5}, {203.7, 191.0, 178.6, 110.9, 55.7}},
      {"5b", {5, 500.0, 0.123, 2, false, 1e-5, 0.5}, {228.1, 200.3, 161.9, 113.5, 61.0}},
  };
  return setups;
}

namespace detail {

inline Vector parse_mu_list(const std::string& csv) {
  Vector mu;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      mu.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ConfigError("could not parse setpoint list entry '" + item + "'");
    }
  }
  if (mu.empty()) throw ConfigError("empty setpoint list");
  return mu;
}

inline void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path);
  if (!f) throw ConfigError("cannot write " + path.string());
  f << text;
}

inline std::string opening_matrix_csv(const OpeningMatrix& p) {
  std::ostringstream os;
  for (const auto& row : p.rows) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) os << ',';
      os << static_cast<int>(row[j]);
    }
    os << '\n';
  }
  return os.str();
}

inline std::string density_csv(const DensityTable& t) {
  std::ostringstream os;
  os << "x";
  for (std::size_t i = 0; i < t.combination.size(); ++i) os << ",combination_" << (i + 1);
  os << ",min_approx,max_approx\n";
  os.precision(10);
  for (std::size_t g = 0; g < t.x.size(); ++g) {
    os << t.x[g];
    for (const auto& col : t.combination) os << ',' << col[g];
    os << ',' << t.min_approx[g] << ',' << t.max_approx[g] << '\n';
  }
  return os.str();
}

}  // namespace detail

struct CliOutput {
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
};

inline int run_cli(std::vector<std::string> args, CliOutput io = {}) {
  std::ostream& out = *io.out;
  std::ostream& err = *io.err;

  CLI::App app{"Setpoint analysis and optimization for multihead weighing machines"};
  app.require_subcommand(1);

  // Shared configuration handling: --config file with flag overrides.
  std::string config_path;
  MachineConfig flags_config;
  bool has_hoppers = false, has_target = false, has_alpha = false, has_max_shut = false;
  bool has_epsilon = false, has_fraction = false, has_exclude = false;
  bool exclude_all_open_flag = false;
  std::uint64_t seed = 0;
  bool has_seed = false;
  std::string out_dir = ".";

  std::string formats = "json";
  auto add_common = [&](CLI::App* cmd, bool with_config = true) {
    cmd->add_option("--formats", formats, "comma list of output formats: json,csv");
    if (with_config) {
      cmd->add_option("--config", config_path, "machine configuration JSON file");
      cmd->add_option("--hoppers", flags_config.hopper_count, "number of hoppers H")
          ->each([&](const std::string&) { has_hoppers = true; });
      cmd->add_option("--target", flags_config.target, "target package weight T, grams")
          ->each([&](const std::string&) { has_target = true; });
      cmd->add_option("--alpha", flags_config.alpha, "per-hopper sd/mean ratio")
          ->each([&](const std::string&) { has_alpha = true; });
      cmd->add_option("--max-shut", flags_config.max_shut, "max hoppers left shut per cycle")
          ->each([&](const std::string&) { has_max_shut = true; });
      cmd->add_option("--epsilon", flags_config.epsilon, "all-open chance constraint tail mass")
          ->each([&](const std::string&) { has_epsilon = true; });
      cmd->add_option("--fraction", flags_config.setpoint_fraction, "per-hopper upper bound factor f")
          ->each([&](const std::string&) { has_fraction = true; });
      cmd->add_flag("--exclude-all-open", exclude_all_open_flag, "drop the all-open combination")
          ->each([&](const std::string&) { has_exclude = true; });
    }
    cmd->add_option("--seed", seed, "RNG seed (fallback: MWM_SEED environment variable)")
        ->each([&](const std::string&) { has_seed = true; });
    cmd->add_option("--out", out_dir, "output directory");
  };

  auto resolve_seed = [&]() -> std::uint64_t {
    if (has_seed) return seed;
    if (const char* env = std::getenv("MWM_SEED")) {
      try {
        return std::stoull(env);
      } catch (const std::exception&) {
        throw ConfigError("MWM_SEED is not a valid integer");
      }
    }
    return 20250807ULL;
  };

  auto resolve_config = [&]() -> MachineConfig {
    MachineConfig c;
    bool have_file = !config_path.empty();
    if (have_file) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError("cannot open config file " + config_path);
      json j;
      try {
        f >> j;
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config json: ") + e.what());
      }
      c = machine_config_from_json(j);
    } else {
      // Defaults requiring explicit overrides for the core fields.
      c.epsilon = 1e-5;
      c.setpoint_fraction = 0.0;  // force an explicit f unless a file gave one
    }
    if (has_hoppers) c.hopper_count = flags_config.hopper_count;
    if (has_target) c.target = flags_config.target;
    if (has_alpha) c.alpha = flags_config.alpha;
    if (has_max_shut) c.max_shut = flags_config.max_shut;
    if (has_epsilon) c.epsilon = flags_config.epsilon;
    if (has_fraction) c.setpoint_fraction = flags_config.setpoint_fraction;
    if (has_exclude) c.exclude_all_open = exclude_all_open_flag;
    if (!have_file) {
      if (!has_target) c.target = 500.0;
      if (!has_alpha) c.alpha = 0.123;
      if (!has_fraction)
        throw ConfigError("setpoint fraction f is required (flag --fraction or config file)");
    }
    c.validate();
    for (const auto& w : config_warnings(c)) err << "warning: " << w << '\n';
    return c;
  };

  // ---- enumerate ----
  auto* cmd_enum = app.add_subcommand("enumerate", "list admissible hopper combinations");
  std::string matrix_file = "combinations.csv";
  add_common(cmd_enum);
  cmd_enum->add_option("--matrix-file", matrix_file, "file name for the 0/1 matrix CSV");

  // ---- moments ----
  auto* cmd_moments = app.add_subcommand("moments", "extreme order-statistic moments of a setup");
  std::string mu_csv;
  std::string method_name = "exact";
  double moment_tol = 0.05;
  std::size_t mc_samples = 1000000;
  add_common(cmd_moments);
  cmd_moments->add_option("--mu", mu_csv, "setpoints, comma separated grams")->required();
  cmd_moments->add_option("--method", method_name, "exact | lower_bound | monte_carlo");
  cmd_moments->add_option("--tol", moment_tol, "absolute tolerance on the exact means, grams");
  cmd_moments->add_option("--samples", mc_samples, "sample count for monte_carlo");

  // ---- bound ----
  auto* cmd_bound = app.add_subcommand("bound", "closed-form lower bound for the smallest combination mean");
  add_common(cmd_bound);
  cmd_bound->add_option("--mu", mu_csv, "setpoints, comma separated grams")->required();

  // ---- optimize ----
  auto* cmd_opt = app.add_subcommand("optimize", "search setpoints maximizing the setup score");
  SolverOptions solver;
  std::string bound_mode_name = "lower_bound";
  bool chain_simulate = false;
  std::size_t sim_cycles = 50000, sim_reps = 1;
  add_common(cmd_opt);
  cmd_opt->add_option("--starts", solver.n_starts, "number of optimizer starts");
  cmd_opt->add_option("--bound-mode", bound_mode_name, "exact | lower_bound extreme-mean handling");
  cmd_opt->add_option("--inner-evals", solver.max_inner_evals, "simplex evaluations per outer iteration");
  cmd_opt->add_option("--outer-iters", solver.outer_iterations, "augmented-Lagrangian outer iterations");
  cmd_opt->add_option("--penalty-growth", solver.penalty_growth, "penalty growth factor");
  cmd_opt->add_option("--constraint-tol", solver.constraint_tol, "accepted residual slack, grams");
  cmd_opt->add_option("--moment-tol", solver.moment_tol, "exact-mode moment tolerance, grams");
  cmd_opt->add_option("--threads", solver.threads, "worker thread cap (0 = hardware)");
  cmd_opt->add_option("--refine-evals", solver.mse_refine_evals,
                      "simulation-led polish evaluations (-1 auto, 0 off)");
  cmd_opt->add_option("--refine-cycles", solver.mse_refine_cycles,
                      "cycles per polish evaluation (0 = automatic)");
  cmd_opt->add_flag("--simulate", chain_simulate, "follow up with a simulation of the solution");
  cmd_opt->add_option("--cycles", sim_cycles, "cycles per simulation replication");
  cmd_opt->add_option("--reps", sim_reps, "simulation replications");

  // ---- simulate ----
  auto* cmd_sim = app.add_subcommand("simulate", "Monte Carlo machine cycles for fixed setpoints");
  bool fresh_draws = false;
  std::string packages_file;
  add_common(cmd_sim);
  cmd_sim->add_option("--mu", mu_csv, "setpoints, comma separated grams")->required();
  cmd_sim->add_option("--cycles", sim_cycles, "number of cycles (>= 1000)");
  cmd_sim->add_option("--reps", sim_reps, "independent replications");
  cmd_sim->add_flag("--fresh-draws", fresh_draws, "redraw all hoppers every cycle");
  cmd_sim->add_option("--packages", packages_file, "also write realized package weights CSV");

  // ---- densities ----
  auto* cmd_dens = app.add_subcommand("densities", "marginal density table of the combination weights");
  std::size_t grid_points = 512;
  add_common(cmd_dens);
  cmd_dens->add_option("--mu", mu_csv, "setpoints, comma separated grams")->required();
  cmd_dens->add_option("--points", grid_points, "grid resolution");
  cmd_dens->add_option("--method", method_name, "extreme-moment method for the overlay columns");
  cmd_dens->add_option("--tol", moment_tol, "absolute tolerance on the exact means, grams");

  // ---- table ----
  auto* cmd_table = app.add_subcommand("table", "reproduce a benchmark table end-to-end");
  std::string table_name = "counts";
  std::string bench_name;
  std::string scaling_rows = "8:2,8:3,9:2,9:3,12:2,12:3";
  add_common(cmd_table);
  cmd_table->add_option("--name", table_name, "counts | integrals | diagnostics | scaling");
  cmd_table->add_option("--bench", bench_name, "benchmark setup for diagnostics (4a, 4b, 5a, 5b)");
  cmd_table->add_option("--rows", scaling_rows, "H:max_shut pairs for the scaling table");
  cmd_table->add_option("--cycles", sim_cycles, "cycles per simulation replication");
  cmd_table->add_option("--reps", sim_reps, "simulation replications");
  cmd_table->add_option("--starts", solver.n_starts, "optimizer starts for scaling rows");
  cmd_table->add_option("--threads", solver.threads, "worker thread cap (0 = hardware)");

  std::reverse(args.begin(), args.end());
  try {
    app.parse(std::move(args));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::filesystem::path outp(out_dir);
    std::filesystem::create_directories(outp);
    const std::uint64_t run_seed = resolve_seed();
    QmcOptions qmc;
    qmc.seed = run_seed;

    if (*cmd_enum) {
      const MachineConfig config = resolve_config();
      const OpeningMatrix p = enumerate_combinations(config);
      detail::write_file(outp / matrix_file, detail::opening_matrix_csv(p));
      out << "K=" << p.count() << '\n';
      return 0;
    }

    if (*cmd_moments || *cmd_bound || *cmd_sim || *cmd_dens) {
      const MachineConfig config = resolve_config();
      Setpoints sp{detail::parse_mu_list(mu_csv)};
      if (sp.mu.size() != static_cast<std::size_t>(config.hopper_count))
        throw ConfigError("setpoint count does not match hopper count");
      sp.validate();
      const OpeningMatrix p = enumerate_combinations(config);
      const CombinationSet set = combination_distribution(p, sp, config.alpha);

      if (*cmd_bound) {
        if (set.open.count() < 2)
          throw ConfigError("bound: at least two combinations required (K >= 2)");
        Vector diag(set.open.count());
        for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = set.sigma(i, i);
        json j{{"lb_e_min", lb_min_expectation(set.theta, diag)},
               {"K", set.open.count()},
               {"seed", run_seed}};
        detail::write_file(outp / "bound.json", j.dump(2) + "\n");
        out << j.dump(2) << '\n';
        return 0;
      }

      if (*cmd_moments) {
        MomentMethod method = MomentMethod::exact;
        if (method_name == "lower_bound") method = MomentMethod::lower_bound;
        else if (method_name == "monte_carlo") method = MomentMethod::monte_carlo;
        else if (method_name != "exact") throw ConfigError("unknown moment method " + method_name);
        const ExtremeMoments m = extreme_moments(set.theta, set.sigma, moment_tol, method, qmc, mc_samples);
        json j = to_json(m);
        j["K"] = set.open.count();
        j["extreme_avg"] = 0.5 * (m.e_min + m.e_max);
        j["seed"] = run_seed;
        j["tol"] = moment_tol;
        detail::write_file(outp / "moments.json", j.dump(2) + "\n");
        out << j.dump(2) << '\n';
        return 0;
      }

      if (*cmd_sim) {
        ExperimentSpec spec{config, SolverOptions{}, sim_cycles, sim_reps, out_dir,
                            formats.find("json") != std::string::npos,
                            formats.find("csv") != std::string::npos};
        spec.validate_for_mse_reporting();
        SimulationOptions sopt;
        sopt.fresh_draws = fresh_draws;
        std::vector<double> packages;
        if (!packages_file.empty() && sim_reps == 1) sopt.package_log = &packages;
        json j;
        if (sim_reps == 1) {
          const SimulationResult r = run_simulation(sp, config, p, sim_cycles, run_seed, sopt);
          j = to_json(r);
        } else {
          const ReplicationSummary s = simulate_replications(sp, config, p, sim_cycles, run_seed, sim_reps, sopt);
          j["mse_mean"] = s.mse_mean;
          j["mse_sd"] = s.mse_sd;
          j["reps"] = json::array();
          for (const auto& r : s.runs) j["reps"].push_back(to_json(r));
          j["seed"] = run_seed;
        }
        j["n_cycles"] = sim_cycles;
        detail::write_file(outp / "simulation.json", j.dump(2) + "\n");
        if (!packages_file.empty() && sim_reps == 1) {
          std::ostringstream os;
          os.precision(10);
          os << "package_weight\n";
          for (double w : packages) os << w << '\n';
          detail::write_file(outp / packages_file, os.str());
        }
        out << j.dump(2) << '\n';
        return 0;
      }

      // densities
      MomentMethod method = MomentMethod::exact;
      if (method_name == "lower_bound") method = MomentMethod::lower_bound;
      else if (method_name == "monte_carlo") method = MomentMethod::monte_carlo;
      const ExtremeMoments m = extreme_moments(set.theta, set.sigma, std::max(moment_tol, 0.25),
                                               method, qmc);
      const DensityTable t = density_table(set.theta, set.sigma, m, DensityGrid{grid_points});
      detail::write_file(outp / "densities.csv", detail::density_csv(t));
      out << "densities: " << set.open.count() << " combinations, " << grid_points << " grid points\n";
      return 0;
    }

    if (*cmd_opt) {
      if (bound_mode_name == "exact") solver.bound_mode = BoundMode::exact;
      else if (bound_mode_name == "lower_bound") solver.bound_mode = BoundMode::lower_bound;
      else throw ConfigError("unknown bound mode " + bound_mode_name);
      solver.rng_seed = run_seed;
      ExperimentSpec spec{resolve_config(), solver, sim_cycles, sim_reps, out_dir,
                          formats.find("json") != std::string::npos,
                          formats.find("csv") != std::string::npos};
      const OpeningMatrix p = enumerate_combinations(spec.config);
      const SolutionReport report = optimize(spec.config, p, spec.solver);
      json j = to_json(report);
      j["config"] = to_json(spec.config);
      if (chain_simulate) {
        spec.validate_for_mse_reporting();
        const ReplicationSummary s =
            simulate_replications(report.mu_star, spec.config, p, spec.sim_cycles, run_seed, spec.sim_reps);
        json sim;
        sim["mse_mean"] = s.mse_mean;
        sim["mse_sd"] = s.mse_sd;
        sim["cycles"] = spec.sim_cycles;
        sim["reps"] = json::array();
        for (const auto& r : s.runs) sim["reps"].push_back(to_json(r));
        j["simulation"] = sim;
      }
      if (spec.write_json) detail::write_file(outp / "solution.json", j.dump(2) + "\n");
      if (spec.write_csv) {
        std::ostringstream os;
        os.precision(10);
        os << "objective,wall_time_s";
        for (std::size_t i = 0; i < report.mu_star.mu.size(); ++i) os << ",mu_" << (i + 1);
        os << "\n" << report.objective_value << ',' << report.wall_time_s;
        for (double v : report.mu_star.mu) os << ',' << v;
        os << '\n';
        detail::write_file(outp / "solution.csv", os.str());
      }
      out << "objective=" << report.objective_value << " mu_star=";
      for (std::size_t i = 0; i < report.mu_star.mu.size(); ++i)
        out << (i ? "," : "") << report.mu_star.mu[i];
      out << " wall_time_s=" << report.wall_time_s << '\n';
      if (chain_simulate) {
        const json& sim = j["simulation"];
        out << "mse=" << sim["mse_mean"].get<double>() << " sd=" << sim["mse_sd"].get<double>() << '\n';
      }
      return 0;
    }

    if (*cmd_table) {
      std::ostringstream os;
      os.precision(10);
      if (table_name == "counts") {
        os << "H,max_shut,K\n";
        static constexpr int pairs[][2] = {{4, 2}, {4, 3}, {5, 2}, {6, 2}, {7, 2}, {8, 2}, {6, 3},
                                           {9, 2}, {7, 3}, {12, 2}, {8, 3}, {9, 3}, {12, 3}};
        for (const auto& pr : pairs) {
          MachineConfig c{pr[0], 500.0, 0.123, pr[1], false, 1e-5, 0.5};
          os << pr[0] << ',' << pr[1] << ',' << enumerate_combinations(c).count() << '\n';
        }
      } else if (table_name == "integrals") {
        os << "H,integrals,dimension\n";
        for (int hcount = 1; hcount <= 8; ++hcount) {
          const IntegralCount ic = integral_count(hcount);
          os << hcount << ',' << ic.count << ',' << ic.dimension << '\n';
        }
      } else if (table_name == "diagnostics") {
        const auto& setups = benchmark_setups();
        auto it = std::find_if(setups.begin(), setups.end(),
                               [&](const BenchmarkSetup& b) { return b.name == bench_name; });
        if (it == setups.end()) throw ConfigError("unknown benchmark setup '" + bench_name + "'");
        const OpeningMatrix p = enumerate_combinations(it->config);
        Setpoints sp{it->mu};
        const CombinationSet set = combination_distribution(p, sp, it->config.alpha);
        const ExtremeMoments m = extreme_moments(set.theta, set.sigma, 0.02, MomentMethod::exact, qmc);
        const Diagnostics d = diagnostics(set, it->config.target, &m);
        os << "property,value\n";
        os << "extreme_avg," << d.extreme_avg << '\n';
        os << "theta_bar," << d.theta_bar << '\n';
        os << "neg_log_det_sigma," << d.neg_log_det_sigma << '\n';
        os << "p," << d.p_value << '\n';
        os << "c," << d.c_count << '\n';
        os << "neg_log_det_m," << d.neg_log_det_m << '\n';
        if (sim_reps >= 1 && sim_cycles >= 1000) {
          const ReplicationSummary s =
              simulate_replications(sp, it->config, p, sim_cycles, run_seed, sim_reps);
          os << "sim_mean_w," << s.runs[0].mean_w << '\n';
          os << "sim_var_w," << s.runs[0].var_w << '\n';
          os << "sim_mse," << s.mse_mean << '\n';
        }
      } else if (table_name == "scaling") {
        os << "H,max_shut,K,time_s,mse,mse_sd\n";
        std::stringstream rows(scaling_rows);
        std::string rowspec;
        while (std::getline(rows, rowspec, ',')) {
          const auto colon = rowspec.find(':');
          if (colon == std::string::npos) throw ConfigError("scaling rows must look like H:max_shut");
          const int hcount = std::stoi(rowspec.substr(0, colon));
          const int shut = std::stoi(rowspec.substr(colon + 1));
          MachineConfig c{hcount, 500.0, 0.123, shut, false, 1e-5, 0.3};
          const OpeningMatrix p = enumerate_combinations(c);
          SolverOptions sopt = solver;
          sopt.rng_seed = run_seed;
          sopt.bound_mode = BoundMode::lower_bound;
          const SolutionReport report = optimize(c, p, sopt);
          const std::size_t cycles = p.count() >= 50 ? 10000 : 50000;
          const ReplicationSummary s =
              simulate_replications(report.mu_star, c, p, cycles, run_seed, std::max<std::size_t>(sim_reps, 10));
          os << hcount << ',' << shut << ',' << p.count() << ',' << report.wall_time_s << ','
             << s.mse_mean << ',' << s.mse_sd << '\n';
        }
      } else {
        throw ConfigError("unknown table '" + table_name + "'");
      }
      detail::write_file(outp / ("table_" + table_name + ".csv"), os.str());
      out << os.str();
      return 0;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const InfeasibleError& e) {
    err << "error: " << e.what() << '\n';
    return 4;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace cli
}  // namespace mwm
