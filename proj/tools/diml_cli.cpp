// Command-line front end: simulate datasets, fit estimators, evaluate
// recovered mechanisms, run whole experiment presets, and run the gradient
// and theory check suites.
//
// Exit codes: 0 success, 2 config error, 3 infeasibility refusal,
// 4 numeric failure (NaN/domain), 5 failed check.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "diml/checks.hpp"
#include "diml/experiment.hpp"

namespace {

using namespace diml;

int print_check_lines(const std::vector<CheckLine>& lines) {
  bool all_ok = true;
  for (const CheckLine& line : lines) {
    bool ok = line.passed();
    all_ok &= ok;
    std::printf("%s %-32s value=%.3e threshold%s%.3e\n", ok ? "PASS" : "FAIL",
                line.name.c_str(), line.value, line.less_is_pass ? "<=" : ">=",
                line.threshold);
  }
  return all_ok ? 0 : 5;
}

ExperimentPreset preset_for(const std::string& config_path, const std::string& preset_name,
                            bool paper_scale) {
  if (!config_path.empty()) return load_config(config_path);
  if (!preset_name.empty()) return find_preset(preset_name, paper_scale);
  throw config_error("either --config or --preset is required");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mechanism inference from multi-agent learning trajectories"};
  app.require_subcommand(1);
  app.fallthrough();  // allow --workers after the subcommand name

  int workers = 1;
  app.add_option("--workers", workers, "worker thread cap (results are identical for any value)")
      ->check(CLI::PositiveNumber);

  // --- simulate ---
  auto* sim = app.add_subcommand("simulate", "generate a trajectory dataset");
  std::string sim_config, sim_preset, sim_out = "runs/sim";
  bool sim_paper = false;
  sim->add_option("--config", sim_config, "experiment config file (json)");
  sim->add_option("--preset", sim_preset, "builtin preset name (e1..e4)");
  sim->add_flag("--paper-scale", sim_paper, "use the paper-scale preset variant");
  sim->add_option("--out", sim_out, "output directory")->required();

  // --- fit ---
  auto* fit = app.add_subcommand("fit", "fit one estimator on a stored dataset");
  std::string fit_data, fit_estimator, fit_config, fit_preset, fit_out = "runs/fit";
  bool fit_paper = false;
  fit->add_option("--data", fit_data, "dataset directory from `simulate`")->required();
  fit->add_option("--estimator", fit_estimator, "diml | tabular | struct | diml-wrong")
      ->required();
  fit->add_option("--config", fit_config, "experiment config file (json)");
  fit->add_option("--preset", fit_preset, "builtin preset name (e1..e4)");
  fit->add_flag("--paper-scale", fit_paper, "use the paper-scale preset variant");
  fit->add_option("--out", fit_out, "output directory")->required();

  // --- evaluate ---
  auto* ev = app.add_subcommand("evaluate", "score an estimated mechanism against the truth");
  std::string ev_truth, ev_est, ev_data, ev_out = "evaluate.csv";
  ev->add_option("--truth", ev_truth, "ground-truth mechanism file")->required();
  ev->add_option("--est", ev_est, "estimated mechanism file")->required();
  ev->add_option("--data", ev_data, "dataset directory (held-out contexts)")->required();
  ev->add_option("--out", ev_out, "single-row output csv");

  // --- experiment ---
  auto* ex = app.add_subcommand("experiment", "simulate + fit + evaluate a whole preset");
  std::string ex_preset, ex_out = "runs";
  std::uint64_t ex_seed = 0;
  bool ex_paper = false, ex_seed_set = false;
  ex->add_option("--preset", ex_preset, "e1 | e2 | e3 | e4 | all")->required();
  ex->add_flag("--paper-scale", ex_paper, "use paper-scale shapes");
  ex->add_option("--out", ex_out, "output root directory");
  auto* seed_opt = ex->add_option("--seed", ex_seed, "override the preset master seed");

  // --- checks ---
  auto* gc = app.add_subcommand("grad-check", "finite-difference audit of the objective");
  auto* tc = app.add_subcommand("theory-check",
                                "identifiability oracle and MLE consistency trend");

  try {
    app.parse(argc, argv);
    ex_seed_set = seed_opt->count() > 0;

    if (sim->parsed()) {
      ExperimentPreset preset = preset_for(sim_config, sim_preset, sim_paper);
      run_simulate(preset, sim_out, workers);
      std::printf("wrote dataset for preset %s (n=%d, k=%d) to %s\n", preset.name.c_str(),
                  preset.shape.n, preset.shape.k, sim_out.c_str());
      return exit_ok;
    }

    if (fit->parsed()) {
      ExperimentPreset preset = preset_for(fit_config, fit_preset, fit_paper);
      std::size_t index = preset.estimators.size();
      for (std::size_t e = 0; e < preset.estimators.size(); ++e)
        if (preset.estimators[e].name == fit_estimator) index = e;
      if (index == preset.estimators.size())
        throw diml::config_error("estimator '" + fit_estimator + "' is not part of preset " +
                                 preset.name);
      Dataset data = read_dataset(fit_data);
      FitResult result = run_fit(preset, index, data, fit_out, workers);
      std::printf("fit %s: final heldout NLL %.4f, diff_mse %.6g, wrote %s\n",
                  fit_estimator.c_str(), result.metric_history.back().heldout_nll,
                  result.metric_history.back().diff_mse, fit_out.c_str());
      return exit_ok;
    }

    if (ev->parsed()) {
      Mechanism truth = Mechanism::load(ev_truth);
      Mechanism est = Mechanism::load(ev_est);
      Dataset data = read_dataset(ev_data);
      std::uint64_t master = data.manifest.at("master_seed").get<std::uint64_t>();
      MetricSpec spec;  // standalone defaults: 512 contexts, 8 pairs
      EvaluateResult r = run_evaluate(truth, est, data, spec, master, ev_out, workers);
      std::printf("diff_mse      %.6g\n", r.diff_mse);
      std::printf("cfkl exact    %.6g\n", r.cfkl_exact);
      std::printf("cfkl count    %.6g\n", r.cfkl_count);
      std::printf("heldout NLL   %.6g\n", r.heldout_nll);
      std::printf("wrote %s\n", ev_out.c_str());
      return exit_ok;
    }

    if (ex->parsed()) {
      std::vector<std::string> names;
      if (ex_preset == "all")
        names = {"e1", "e2", "e3", "e4"};
      else
        names = {ex_preset};
      for (const std::string& name : names) {
        ExperimentPreset preset = find_preset(name, ex_paper);
        if (ex_seed_set) preset.master_seed = ex_seed;
        std::printf("running preset %s (n=%d, k=%d, M=%d, T=%d)...\n", preset.name.c_str(),
                    preset.shape.n, preset.shape.k, preset.dataset.num_trajectories,
                    preset.dataset.horizon);
        run_experiment(preset, ex_out, workers);
      }
      std::printf("experiment output under %s\n", ex_out.c_str());
      return exit_ok;
    }

    if (gc->parsed()) return print_check_lines(grad_check_suite());
    if (tc->parsed()) return print_check_lines(theory_check_suite(workers));
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp")
      return app.exit(e);
    std::cerr << "error: " << e.what() << "\n";
    return diml::exit_config;
  } catch (const diml::config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return diml::exit_config;
  } catch (const diml::infeasible_error& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return diml::exit_infeasible;
  } catch (const diml::numeric_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return diml::exit_numeric;
  } catch (const std::domain_error& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return diml::exit_numeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_ok;
}
