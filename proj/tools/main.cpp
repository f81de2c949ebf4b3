// phylograd command-line tool: likelihood, gradients, optimization, posterior
// sampling, simulation and scaling benchmarks from one declarative config.

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>

#include "phylograd/cli.hpp"
#include "phylograd/run_config.hpp"

int main(int argc, char** argv) {
  CLI::App app{"phylogenetic likelihood engine with linear-time branch gradients"};
  app.require_subcommand(1);

  std::string config_path;
  std::string mode;
  phylograd::cli::CliOptions options;

  // flag overrides for sweeps; everything else lives in the config file
  std::optional<std::uint64_t> seed_override;
  std::optional<std::string> output_override;
  std::optional<int> workers_override;
  std::optional<long> sites_override;
  std::optional<std::vector<std::string>> kernel_override;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run configuration JSON")->required();
    sub->add_option("--seed", seed_override, "override config seed");
    sub->add_option("--output-dir", output_override, "override config output_dir");
    sub->add_option("--workers", workers_override, "override config workers");
    sub->callback([&mode, sub] { mode = sub->get_name(); });
    return sub;
  };

  auto* loglik = add_common(app.add_subcommand("loglik", "print the log-likelihood"));
  loglik->add_flag("--patterns", options.dump_patterns, "dump site patterns CSV");
  auto* gradient =
      add_common(app.add_subcommand("gradient", "branch gradient CSV (optional Hessian)"));
  gradient->add_flag("--hessian", options.with_hessian, "include Hessian diagonal");
  add_common(app.add_subcommand("optimize", "L-BFGS maximum likelihood / MAP"));
  auto* sample =
      add_common(app.add_subcommand("sample", "posterior sampling (univariate / vHMC / pHMC)"));
  sample->add_option("--kernels", kernel_override, "override inference.kernels");
  auto* simulate = add_common(app.add_subcommand("simulate", "simulate an alignment"));
  simulate->add_option("--sites", sites_override, "override simulate_sites");
  add_common(app.add_subcommand("bench", "linear-vs-quadratic scaling benchmark"));

  CLI11_PARSE(app, argc, argv);

  phylograd::RunConfig config;
  try {
    config = phylograd::load_run_config(config_path);
  } catch (const phylograd::ConfigError& error) {
    nlohmann::json j;
    j["error"] = "configuration";
    j["details"] = error.problems;
    std::cerr << j.dump(2) << "\n";
    return 2;
  }
  if (seed_override) config.seed = *seed_override;
  if (output_override) config.output_dir = *output_override;
  if (workers_override) config.workers = *workers_override;
  if (sites_override) config.simulate_sites = *sites_override;
  if (kernel_override) config.inference.kernels = *kernel_override;

  return phylograd::cli::run_mode(mode, config, options, std::cout, std::cerr);
}
