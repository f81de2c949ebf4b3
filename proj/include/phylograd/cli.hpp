#pragma once

// Subcommand implementations behind the command-line tool: loglik, gradient,
// optimize, sample, simulate and bench, all driven by one RunConfig. Kept in a
// header so the test suites can exercise the runners in-process.
//
// Every artifact embeds the config hash: '#' comment line in CSVs, leading ';'
// comment in FASTA, a top-level field in JSON.

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "phylograd/alignment.hpp"
#include "phylograd/clock.hpp"
#include "phylograd/diagnostics.hpp"
#include "phylograd/engine.hpp"
#include "phylograd/hmc.hpp"
#include "phylograd/lbfgs.hpp"
#include "phylograd/run_config.hpp"
#include "phylograd/substitution.hpp"
#include "phylograd/tree.hpp"
#include "phylograd/validation.hpp"

namespace phylograd::cli {

struct CliOptions {
  bool with_hessian = false;
  bool dump_patterns = false;
};

namespace detail {

inline std::string fmt(double value, const char* spec = "%.17g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, value);
  return buf;
}

inline std::string read_file(const std::string& path, std::vector<std::string>& problems,
                             const char* what) {
  std::ifstream in(path);
  if (!in) {
    problems.push_back(std::string(what) + " file '" + path + "' cannot be opened");
    return {};
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write output file '" + path.string() + "'");
  out << content;
}

// Run `count` jobs on up to `workers` threads; job order is immaterial because
// every job owns its slot in a pre-sized result vector.
inline void run_jobs(int workers, int count, const std::function<void(int)>& job) {
  if (workers <= 1 || count <= 1) {
    for (int i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < std::min(workers, count); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct Instance {
  Tree tree;
  std::optional<SitePatternAlignment> alignment;
  std::optional<SubstitutionModel> model;
  RateCategories categories = RateCategories::single();
};

inline Eigen::MatrixXd parse_matrix_csv(const std::string& text, int size) {
  Eigen::MatrixXd matrix(size, size);
  std::istringstream in(text);
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (row >= size) throw std::invalid_argument("matrix CSV has too many rows");
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream fields(line);
    for (int col = 0; col < size; ++col)
      if (!(fields >> matrix(row, col)))
        throw std::invalid_argument("matrix CSV row " + std::to_string(row + 1) + " is short");
    ++row;
  }
  if (row != size) throw std::invalid_argument("matrix CSV has too few rows");
  return matrix;
}

inline void build_model(const ModelConfig& mc, Instance& instance,
                        std::vector<std::string>& problems) {
  Eigen::Vector4d freqs = Eigen::Vector4d::Constant(0.25);
  if (!mc.frequencies.empty()) {
    if (mc.frequencies.size() != 4) {
      problems.push_back("model.frequencies must have 4 entries");
      return;
    }
    for (int i = 0; i < 4; ++i) freqs[i] = mc.frequencies[i];
  }
  try {
    if (mc.name == "JC69") {
      instance.model = SubstitutionModel::jc69();
    } else if (mc.name == "HKY85") {
      instance.model = SubstitutionModel::hky85(mc.kappa, freqs);
    } else if (mc.name == "GTR") {
      if (mc.exchangeabilities.size() != 6) {
        problems.push_back("model.exchangeabilities must have 6 entries for GTR");
        return;
      }
      Eigen::Matrix<double, 6, 1> exch;
      for (int i = 0; i < 6; ++i) exch[i] = mc.exchangeabilities[i];
      instance.model = SubstitutionModel::gtr(exch, freqs);
    } else {
      problems.push_back("model.name must be one of JC69, HKY85, GTR");
    }
  } catch (const std::exception& err) {
    problems.push_back(std::string("model: ") + err.what());
  }
  for (const auto& [branch_text, csv_path] : mc.branch_generator_files) {
    if (!instance.model) break;
    int branch = 0;
    try {
      branch = std::stoi(branch_text);
    } catch (const std::exception&) {
      problems.push_back("model.branch_generators: bad branch id '" + branch_text + "'");
      continue;
    }
    std::string text = read_file(csv_path, problems, "branch generator");
    if (text.empty()) continue;
    try {
      instance.model->set_branch_generator(branch, parse_matrix_csv(text, 4));
    } catch (const std::exception& err) {
      problems.push_back("model.branch_generators['" + branch_text + "']: " + err.what());
    }
  }
  if (mc.rate_categories < 1) problems.push_back("model.rate_categories must be >= 1");
  if (mc.rate_categories > 1) {
    try {
      instance.categories = discrete_gamma_categories(mc.gamma_shape, mc.rate_categories);
    } catch (const std::exception& err) {
      problems.push_back(std::string("model: ") + err.what());
    }
  }
}

// Load and cross-validate everything a mode needs, reporting every problem.
inline Instance load_instance(const RunConfig& config, bool need_alignment, bool need_times) {
  std::vector<std::string> problems;
  Instance instance;

  if (config.tree_file.empty()) {
    problems.push_back("tree_file is required");
  } else {
    std::string text = read_file(config.tree_file, problems, "tree");
    if (!text.empty()) {
      try {
        instance.tree = parse_newick(text);
      } catch (const std::exception& err) {
        problems.push_back(std::string("tree: ") + err.what());
      }
    }
  }

  build_model(config.model, instance, problems);

  if (need_alignment) {
    if (config.alignment_file.empty()) {
      problems.push_back("alignment_file is required for this mode");
    } else {
      std::string text = read_file(config.alignment_file, problems, "alignment");
      if (!text.empty()) {
        try {
          RawAlignment raw = config.alignment_file.ends_with(".phy")
                                 ? parse_phylip(text)
                                 : parse_fasta(text);
          instance.alignment = SitePatternAlignment::compress(raw);
        } catch (const std::exception& err) {
          problems.push_back(std::string("alignment: ") + err.what());
        }
      }
    }
  }

  if (config.clock.enabled) {
    if (!(config.clock.mu > 0.0)) problems.push_back("clock.mu must be positive");
    if (config.clock.psi < 0.0) problems.push_back("clock.psi must be nonnegative");
    if (config.clock.mu_prior != "flat_log" && config.clock.mu_prior != "lognormal")
      problems.push_back("clock.mu_prior must be flat_log or lognormal");
    if (!(config.clock.psi_prior_rate > 0.0))
      problems.push_back("clock.psi_prior_rate must be positive");
    if (need_times && instance.tree.tip_count >= 2) {
      try {
        assign_times_from_branch_lengths(instance.tree);
      } catch (const std::exception& err) {
        problems.push_back(std::string("clock: ") + err.what());
      }
      const int branches = instance.tree.branch_count();
      if (!config.clock.epsilon.empty() && config.clock.epsilon.size() != 1 &&
          config.clock.epsilon.size() != static_cast<std::size_t>(branches))
        problems.push_back("clock.epsilon must be scalar or one value per branch");
    }
  }

  if (config.workers < 1) problems.push_back("workers must be >= 1");
  if (config.inference.chains < 1) problems.push_back("inference.chains must be >= 1");
  for (const auto& kernel : config.inference.kernels)
    if (kernel != "univariate" && kernel != "vhmc" && kernel != "phmc")
      problems.push_back("inference.kernels: unknown kernel '" + kernel + "'");

  if (need_alignment && problems.empty() && instance.alignment) {
    for (int t = 1; t <= instance.tree.tip_count; ++t)
      if (instance.alignment->taxon_index(instance.tree.labels[t]) < 0)
        problems.push_back("tree tip '" + instance.tree.labels[t] + "' missing from alignment");
  }

  if (!problems.empty()) throw ConfigError(std::move(problems));
  return instance;
}

inline ClockParameterization initial_clock(const RunConfig& config, const Tree& tree) {
  ClockParameterization clock;
  clock.mu = config.clock.mu;
  clock.psi = config.clock.psi;
  const int branches = tree.branch_count();
  if (config.clock.epsilon.empty())
    clock.epsilon = Eigen::VectorXd::Ones(branches);
  else if (config.clock.epsilon.size() == 1)
    clock.epsilon = Eigen::VectorXd::Constant(branches, config.clock.epsilon[0]);
  else {
    clock.epsilon.resize(branches);
    for (int i = 0; i < branches; ++i) clock.epsilon[i] = config.clock.epsilon[i];
  }
  return clock;
}

inline ClockPriors clock_priors(const RunConfig& config) {
  ClockPriors priors;
  priors.mu.kind = config.clock.mu_prior == "lognormal" ? MuPrior::lognormal : MuPrior::flat_log;
  priors.mu.location = config.clock.mu_prior_location;
  priors.mu.scale = config.clock.mu_prior_scale;
  priors.psi_exponential_rate = config.clock.psi_prior_rate;
  return priors;
}

inline nlohmann::json base_metadata(const RunConfig& config, const std::string& mode) {
  nlohmann::json j;
  j["config_hash"] = config.config_hash;
  j["mode"] = mode;
  j["seed"] = config.seed;
  j["workers"] = config.workers;
  if (!config.config_canonical.empty())
    j["config"] = nlohmann::json::parse(config.config_canonical);
  return j;
}

} // namespace detail

inline int run_loglik(const RunConfig& config, const CliOptions& options, std::ostream& out) {
  detail::Instance inst = detail::load_instance(config, true, config.clock.enabled);
  LikelihoodEngine engine(inst.tree, *inst.alignment, *inst.model, inst.categories);
  if (config.clock.enabled)
    engine.set_branch_lengths(
        branch_lengths_from_clock(inst.tree, detail::initial_clock(config, inst.tree)));
  const double ll = engine.log_likelihood();
  out << "log_likelihood " << detail::fmt(ll, "%.18g") << "\n";
  out << "patterns " << inst.alignment->pattern_count() << "\n";
  out << "sites " << inst.alignment->site_count() << "\n";
  out << "config_hash " << config.config_hash << "\n";
  if (options.dump_patterns) {
    std::string csv = "# config_hash=" + config.config_hash + "\npattern,weight\n";
    for (int p = 0; p < inst.alignment->pattern_count(); ++p)
      csv += inst.alignment->pattern_column(p) + "," +
             std::to_string(inst.alignment->weights()[p]) + "\n";
    std::filesystem::create_directories(config.output_dir);
    detail::write_file(std::filesystem::path(config.output_dir) / "patterns.csv", csv);
  }
  return 0;
}

inline int run_gradient(const RunConfig& config, const CliOptions& options, std::ostream& out) {
  detail::Instance inst = detail::load_instance(config, true, config.clock.enabled);
  LikelihoodEngine engine(inst.tree, *inst.alignment, *inst.model, inst.categories);
  if (config.clock.enabled)
    engine.set_branch_lengths(
        branch_lengths_from_clock(inst.tree, detail::initial_clock(config, inst.tree)));
  GradientReport report = engine.branch_gradient(options.with_hessian);

  std::string csv = "# config_hash=" + config.config_hash + "\n";
  csv += options.with_hessian ? "branch,length,gradient,hessian_diagonal\n"
                              : "branch,length,gradient\n";
  for (int i = 0; i < report.branch_gradient.size(); ++i) {
    csv += std::to_string(i + 1) + "," + detail::fmt(engine.branch_lengths()[i]) + "," +
           detail::fmt(report.branch_gradient[i]);
    if (options.with_hessian) csv += "," + detail::fmt(report.hessian_diagonal[i]);
    csv += "\n";
  }
  std::filesystem::create_directories(config.output_dir);
  detail::write_file(std::filesystem::path(config.output_dir) / "gradient.csv", csv);

  out << "log_likelihood " << detail::fmt(report.log_likelihood, "%.18g") << "\n";
  out << "gradient_infinity_norm "
      << detail::fmt(report.branch_gradient.lpNorm<Eigen::Infinity>()) << "\n";
  out << "wrote " << (std::filesystem::path(config.output_dir) / "gradient.csv").string() << "\n";
  return 0;
}

inline int run_optimize(const RunConfig& config, const CliOptions&, std::ostream& out) {
  detail::Instance inst = detail::load_instance(config, true, config.clock.enabled);
  LikelihoodEngine engine(inst.tree, *inst.alignment, *inst.model, inst.categories);

  LbfgsConfig settings;
  settings.memory = config.inference.lbfgs.memory;
  settings.max_iterations = config.inference.lbfgs.max_iterations;
  settings.gradient_tolerance = config.inference.lbfgs.gradient_tolerance;

  nlohmann::json meta = detail::base_metadata(config, "optimize");
  std::filesystem::create_directories(config.output_dir);

  using clock_type = std::chrono::steady_clock;

  if (!config.clock.enabled) {
    // maximum likelihood over log branch lengths
    auto objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
      engine.set_branch_lengths(x.array().exp());
      GradientReport report = engine.branch_gradient();
      grad = -(report.branch_gradient.array() * engine.branch_lengths().array()).matrix();
      return -report.log_likelihood;
    };
    Eigen::VectorXd x0(inst.tree.branch_count());
    for (int i = 1; i <= inst.tree.branch_count(); ++i)
      x0[i - 1] = std::log(std::max(inst.tree.branch_length[i], 1e-3));

    auto start = clock_type::now();
    LbfgsResult result = lbfgs_minimize(objective, x0, settings);
    std::chrono::duration<double> seconds = clock_type::now() - start;

    Eigen::VectorXd mle = result.x.array().exp();
    engine.set_branch_lengths(mle);
    Eigen::VectorXd hessian = engine.hessian_diagonal();

    meta["objective"] = "negative log-likelihood over log branch lengths";
    meta["converged"] = result.converged;
    meta["message"] = result.message;
    meta["iterations"] = result.iterations;
    meta["evaluations"] = result.evaluations;
    meta["log_likelihood"] = -result.objective;
    meta["gradient_infinity_norm"] = result.gradient.lpNorm<Eigen::Infinity>();
    meta["seconds"] = seconds.count();
    meta["seconds_per_iteration"] = seconds.count() / std::max(result.iterations, 1);
    for (int i = 0; i < mle.size(); ++i) {
      meta["branch_lengths"].push_back(mle[i]);
      meta["standard_errors"].push_back(hessian[i] < 0.0 ? 1.0 / std::sqrt(-hessian[i])
                                                         : std::nan(""));
    }

    if (config.inference.lbfgs.compare_numeric) {
      // same optimizer, central-FD gradient: the quadratic-cost baseline
      auto value_only = [&](const Eigen::VectorXd& x) {
        engine.set_branch_lengths(x.array().exp());
        return -engine.log_likelihood();
      };
      auto fd_objective = [&](const Eigen::VectorXd& x, Eigen::VectorXd& grad) {
        grad = finite_difference_gradient(value_only, x, 1e-5);
        return value_only(x);
      };
      auto fd_start = clock_type::now();
      LbfgsResult fd_result = lbfgs_minimize(fd_objective, x0, settings);
      std::chrono::duration<double> fd_seconds = clock_type::now() - fd_start;
      const double per_iter = seconds.count() / std::max(result.iterations, 1);
      const double fd_per_iter = fd_seconds.count() / std::max(fd_result.iterations, 1);
      meta["comparison"] = {{"method", "central_finite_difference"},
                            {"seconds", fd_seconds.count()},
                            {"iterations", fd_result.iterations},
                            {"log_likelihood", -fd_result.objective},
                            {"per_iteration_speedup", fd_per_iter / per_iter},
                            {"total_speedup", fd_seconds.count() / seconds.count()}};
      out << "numeric_comparison per_iteration_speedup "
          << detail::fmt(fd_per_iter / per_iter, "%.4g") << " total_speedup "
          << detail::fmt(fd_seconds.count() / seconds.count(), "%.4g") << "\n";
    }

    Tree fitted = inst.tree;
    for (int i = 1; i <= fitted.branch_count(); ++i) fitted.branch_length[i] = mle[i - 1];
    detail::write_file(std::filesystem::path(config.output_dir) / "mle.nwk",
                       serialize_newick(fitted) + "\n");
    detail::write_file(std::filesystem::path(config.output_dir) / "mle.json", meta.dump(2) + "\n");

    out << "log_likelihood " << detail::fmt(-result.objective, "%.18g") << "\n";
    out << "gradient_infinity_norm " << detail::fmt(result.gradient.lpNorm<Eigen::Infinity>())
        << "\n";
    out << "iterations " << result.iterations << "\n";
    out << "converged " << (result.converged ? "true" : "false") << "\n";
    return result.converged ? 0 : 1;
  }

  // clock enabled: maximum likelihood over the branch-specific rates r_i
  // (b_i = r_i * duration_i); the hierarchical prior plays no role in ML
  Eigen::VectorXd durations(inst.tree.branch_count());
  for (int i = 1; i <= inst.tree.branch_count(); ++i)
    durations[i - 1] = inst.tree.node_time[i] - inst.tree.node_time[inst.tree.parent[i]];

  auto objective = [&](const Eigen::VectorXd& log_rates, Eigen::VectorXd& grad) {
    Eigen::VectorXd lengths = log_rates.array().exp() * durations.array();
    engine.set_branch_lengths(lengths);
    GradientReport report = engine.branch_gradient();
    // d logL / d log r_i = b_i * dlogL/db_i
    grad = -(report.branch_gradient.array() * lengths.array()).matrix();
    return -report.log_likelihood;
  };
  ClockParameterization init = detail::initial_clock(config, inst.tree);
  Eigen::VectorXd x0 = (init.mu * init.epsilon.array()).log();
  auto start = clock_type::now();
  LbfgsResult result = lbfgs_minimize(objective, x0, settings);
  std::chrono::duration<double> seconds = clock_type::now() - start;

  Eigen::VectorXd rates = result.x.array().exp();
  Eigen::VectorXd lengths = rates.array() * durations.array();
  engine.set_branch_lengths(lengths);
  Eigen::VectorXd hessian = engine.hessian_diagonal();

  meta["objective"] = "negative log-likelihood over log branch rates";
  meta["converged"] = result.converged;
  meta["message"] = result.message;
  meta["iterations"] = result.iterations;
  meta["evaluations"] = result.evaluations;
  meta["log_likelihood"] = -result.objective;
  meta["gradient_infinity_norm"] = result.gradient.lpNorm<Eigen::Infinity>();
  meta["seconds"] = seconds.count();
  meta["seconds_per_iteration"] = seconds.count() / std::max(result.iterations, 1);
  for (int i = 0; i < rates.size(); ++i) {
    meta["branch_rates"].push_back(rates[i]);
    meta["branch_lengths"].push_back(lengths[i]);
    // se(r) from the observed information in b mapped through b = r * dt
    meta["standard_errors"].push_back(
        hessian[i] < 0.0 ? 1.0 / (std::sqrt(-hessian[i]) * durations[i]) : std::nan(""));
  }
  detail::write_file(std::filesystem::path(config.output_dir) / "mle.json", meta.dump(2) + "\n");

  out << "log_likelihood " << detail::fmt(-result.objective, "%.18g") << "\n";
  out << "gradient_infinity_norm " << detail::fmt(result.gradient.lpNorm<Eigen::Infinity>())
      << "\n";
  out << "iterations " << result.iterations << "\n";
  out << "converged " << (result.converged ? "true" : "false") << "\n";
  return result.converged ? 0 : 1;
}

namespace detail {

struct ChainOutput {
  Eigen::MatrixXd samples;
  Eigen::VectorXd log_densities;
  std::vector<char> accepted;
  double seconds = 0.0;
  double acceptance = 0.0;
  int divergences = 0;
  double final_step_size = 0.0;
};

struct KernelSummary {
  std::string kernel;
  double seconds = 0.0;
  double min_ess = 0.0, median_ess = 0.0;
  double min_ess_per_second = 0.0, median_ess_per_second = 0.0;
  double acceptance = 0.0;
  int divergences = 0;
};

inline std::string chain_csv(const RunConfig& config, const Tree& tree,
                             const ChainOutput& chain, bool strict_clock) {
  std::string csv = "# config_hash=" + config.config_hash + "\n";
  csv += "iteration,log_posterior,accepted,log_mu";
  if (!strict_clock) {
    csv += ",log_psi";
    for (int i = 1; i <= tree.branch_count(); ++i) csv += ",log_eps_" + std::to_string(i);
  }
  csv += "\n";
  for (int row = 0; row < chain.samples.rows(); ++row) {
    csv += std::to_string(row) + "," + fmt(chain.log_densities[row]) + "," +
           std::to_string(int(chain.accepted[row]));
    for (int col = 0; col < chain.samples.cols(); ++col)
      csv += "," + fmt(chain.samples(row, col));
    csv += "\n";
  }
  return csv;
}

} // namespace detail

inline int run_sample(const RunConfig& config, const CliOptions&, std::ostream& out) {
  if (!config.clock.enabled)
    throw ConfigError({"sample mode requires clock.enabled = true"});
  detail::Instance inst = detail::load_instance(config, true, true);
  const int chains = config.inference.chains;
  const int dim_branches = inst.tree.branch_count();

  std::filesystem::create_directories(config.output_dir);
  nlohmann::json meta = detail::base_metadata(config, "sample");
  meta["kernels"] = config.inference.kernels;
  meta["chains"] = chains;

  std::vector<detail::KernelSummary> table;
  using clock_type = std::chrono::steady_clock;

  for (std::size_t k = 0; k < config.inference.kernels.size(); ++k) {
    const std::string& kernel = config.inference.kernels[k];
    std::vector<detail::ChainOutput> outputs(chains);

    detail::run_jobs(config.workers, chains, [&](int c) {
      // each chain owns an engine: partial caches are exclusive to a chain
      LikelihoodEngine engine(inst.tree, *inst.alignment, *inst.model, inst.categories);
      RelaxedClockPosterior posterior(engine, detail::clock_priors(config), true,
                                      config.clock.strict);
      Eigen::VectorXd x0 = posterior.to_unconstrained(detail::initial_clock(config, inst.tree));
      const std::uint64_t seed = config.seed + 7919ull * c + 104729ull * k;
      detail::ChainOutput& slot = outputs[c];
      auto start = clock_type::now();
      if (kernel == "univariate") {
        UnivariateConfig uc;
        uc.iterations = config.inference.univariate.iterations;
        uc.warmup = config.inference.univariate.warmup;
        uc.initial_scale = config.inference.univariate.initial_scale;
        uc.seed = seed;
        UnivariateResult result = univariate_baseline_sample(
            [&](const Eigen::VectorXd& x) { return posterior.log_posterior(x); }, x0, uc);
        slot.samples = std::move(result.samples);
        slot.log_densities = std::move(result.log_densities);
        slot.accepted = std::move(result.accepted);
        slot.acceptance = result.acceptance_rate;
      } else {
        HmcTarget target;
        target.log_density = [&](const Eigen::VectorXd& x) { return posterior.log_posterior(x); };
        target.gradient = [&](const Eigen::VectorXd& x) { return posterior.gradient(x); };
        target.negative_hessian_diagonal = [&](const Eigen::VectorXd& x) {
          return posterior.negative_hessian_diagonal(x);
        };
        HmcConfig hc;
        hc.step_size = config.inference.hmc.step_size;
        hc.leapfrog_steps = config.inference.hmc.leapfrog_steps;
        hc.iterations = config.inference.hmc.iterations;
        hc.warmup = config.inference.hmc.warmup;
        hc.adaptation_interval = config.inference.hmc.adaptation_interval;
        hc.clamp_min_factor = config.inference.hmc.clamp_min_factor;
        hc.clamp_max_factor = config.inference.hmc.clamp_max_factor;
        hc.target_acceptance = config.inference.hmc.target_acceptance;
        hc.mass_mode = kernel == "phmc" ? MassMode::adaptive_diagonal : MassMode::identity;
        hc.seed = seed;
        HmcResult result = hmc_sample(target, x0, hc);
        slot.samples = std::move(result.samples);
        slot.log_densities = std::move(result.log_densities);
        slot.accepted = std::move(result.accepted);
        slot.acceptance = result.acceptance_rate;
        slot.divergences = result.divergences;
        slot.final_step_size = result.final_step_size;
      }
      std::chrono::duration<double> seconds = clock_type::now() - start;
      slot.seconds = seconds.count();
    });

    for (int c = 0; c < chains; ++c) {
      std::string name = chains == 1 ? "samples_" + kernel + ".csv"
                                     : "samples_" + kernel + "_chain" + std::to_string(c) + ".csv";
      detail::write_file(std::filesystem::path(config.output_dir) / name,
                         detail::chain_csv(config, inst.tree, outputs[c], config.clock.strict));
    }

    // ESS aggregated per chain then summed; ESS/s over summed sampling time
    const int dim = static_cast<int>(outputs[0].samples.cols());
    Eigen::VectorXd total_ess = Eigen::VectorXd::Zero(dim);
    double total_seconds = 0.0, acceptance = 0.0;
    int divergences = 0;
    for (int c = 0; c < chains; ++c) {
      for (int d = 0; d < dim; ++d)
        total_ess[d] += effective_sample_size(outputs[c].samples.col(d)).ess;
      total_seconds += outputs[c].seconds;
      acceptance += outputs[c].acceptance / chains;
      divergences += outputs[c].divergences;
    }
    std::vector<double> sorted(total_ess.data(), total_ess.data() + dim);
    std::sort(sorted.begin(), sorted.end());
    detail::KernelSummary row;
    row.kernel = kernel;
    row.seconds = total_seconds;
    row.min_ess = sorted.front();
    row.median_ess = sorted[sorted.size() / 2];
    row.min_ess_per_second = row.min_ess / total_seconds;
    row.median_ess_per_second = row.median_ess / total_seconds;
    row.acceptance = acceptance;
    row.divergences = divergences;
    table.push_back(row);

    meta["ess_table"].push_back({{"kernel", row.kernel},
                                 {"seconds", row.seconds},
                                 {"min_ess", row.min_ess},
                                 {"median_ess", row.median_ess},
                                 {"min_ess_per_second", row.min_ess_per_second},
                                 {"median_ess_per_second", row.median_ess_per_second},
                                 {"acceptance", row.acceptance},
                                 {"divergences", row.divergences}});
  }

  detail::write_file(std::filesystem::path(config.output_dir) / "metadata.json",
                     meta.dump(2) + "\n");

  out << "kernel,seconds,min_ess,median_ess,min_ess_per_s,median_ess_per_s,acceptance\n";
  for (const auto& row : table)
    out << row.kernel << "," << detail::fmt(row.seconds, "%.4g") << ","
        << detail::fmt(row.min_ess, "%.6g") << "," << detail::fmt(row.median_ess, "%.6g") << ","
        << detail::fmt(row.min_ess_per_second, "%.6g") << ","
        << detail::fmt(row.median_ess_per_second, "%.6g") << ","
        << detail::fmt(row.acceptance, "%.3g") << "\n";
  return 0;
}

inline int run_simulate(const RunConfig& config, const CliOptions&, std::ostream& out) {
  detail::Instance inst = detail::load_instance(config, false, config.clock.enabled);
  if (config.simulate_sites < 1) throw ConfigError({"simulate_sites must be >= 1"});

  Eigen::VectorXd lengths(inst.tree.branch_count());
  if (config.clock.enabled) {
    lengths = branch_lengths_from_clock(inst.tree, detail::initial_clock(config, inst.tree));
  } else {
    for (int i = 1; i <= inst.tree.branch_count(); ++i) lengths[i - 1] = inst.tree.branch_length[i];
  }

  RawAlignment raw = simulate_alignment(inst.tree, *inst.model, inst.categories, lengths,
                                        config.simulate_sites, config.seed);
  std::filesystem::create_directories(config.output_dir);
  detail::write_file(std::filesystem::path(config.output_dir) / "simulated.fasta",
                     "; config_hash=" + config.config_hash + "\n" + write_fasta(raw));

  nlohmann::json meta = detail::base_metadata(config, "simulate");
  meta["sites"] = config.simulate_sites;
  for (int i = 0; i < lengths.size(); ++i) meta["branch_lengths"].push_back(lengths[i]);
  detail::write_file(std::filesystem::path(config.output_dir) / "simulate_metadata.json",
                     meta.dump(2) + "\n");
  out << "wrote " << (std::filesystem::path(config.output_dir) / "simulated.fasta").string()
      << "\n";
  return 0;
}

inline int run_bench(const RunConfig& config, const CliOptions&, std::ostream& out) {
  std::vector<std::string> problems;
  if (config.bench.tip_counts.empty()) problems.push_back("bench.tip_counts must be nonempty");
  for (int n : config.bench.tip_counts)
    if (n < 4) problems.push_back("bench.tip_counts entries must be >= 4");
  if (config.bench.sites < 1) problems.push_back("bench.sites must be >= 1");
  if (config.bench.repetitions < 1) problems.push_back("bench.repetitions must be >= 1");
  detail::Instance inst; // model only; trees are synthetic
  detail::build_model(config.model, inst, problems);
  if (!problems.empty()) throw ConfigError(std::move(problems));

  ScalingSummary summary =
      scaling_benchmark(config.bench.tip_counts, config.bench.sites, *inst.model,
                        inst.categories, config.bench.repetitions, config.seed,
                        config.bench.caterpillar);

  std::string csv = "# config_hash=" + config.config_hash + "\n";
  csv += "tips,method,median_seconds,node_visits,likelihood_evaluations,repetitions,timer_warning\n";
  for (const auto& record : summary.records)
    csv += std::to_string(record.tips) + "," + record.method + "," +
           detail::fmt(record.median_seconds) + "," + std::to_string(record.node_visits) + "," +
           std::to_string(record.likelihood_evaluations) + "," +
           std::to_string(record.repetitions) + "," + (record.timer_warning ? "1" : "0") + "\n";
  std::filesystem::create_directories(config.output_dir);
  detail::write_file(std::filesystem::path(config.output_dir) / "benchmark.csv", csv);

  nlohmann::json meta = detail::base_metadata(config, "bench");
  meta["analytic_exponent"] = summary.analytic_exponent;
  meta["finite_difference_exponent"] = summary.fd_exponent;
  for (std::size_t i = 0; i < summary.speedup.size(); ++i)
    meta["speedup"].push_back(
        {{"tips", summary.tip_counts[i]}, {"ratio", summary.speedup[i]}});
  detail::write_file(std::filesystem::path(config.output_dir) / "benchmark_summary.json",
                     meta.dump(2) + "\n");

  out << "analytic_exponent " << detail::fmt(summary.analytic_exponent, "%.4g") << "\n";
  out << "finite_difference_exponent " << detail::fmt(summary.fd_exponent, "%.4g") << "\n";
  for (std::size_t i = 0; i < summary.speedup.size(); ++i)
    out << "speedup N=" << summary.tip_counts[i] << " "
        << detail::fmt(summary.speedup[i], "%.4g") << "\n";
  return 0;
}

// Dispatch with machine-readable error reporting: on failure a JSON object is
// printed to err and a nonzero code returned.
inline int run_mode(const std::string& mode, const RunConfig& config, const CliOptions& options,
                    std::ostream& out, std::ostream& err) {
  try {
    if (mode == "loglik") return run_loglik(config, options, out);
    if (mode == "gradient") return run_gradient(config, options, out);
    if (mode == "optimize") return run_optimize(config, options, out);
    if (mode == "sample") return run_sample(config, options, out);
    if (mode == "simulate") return run_simulate(config, options, out);
    if (mode == "bench") return run_bench(config, options, out);
    throw ConfigError({"unknown mode '" + mode + "'"});
  } catch (const ConfigError& error) {
    nlohmann::json j;
    j["error"] = "configuration";
    j["details"] = error.problems;
    err << j.dump(2) << "\n";
    return 2;
  } catch (const std::exception& error) {
    nlohmann::json j;
    j["error"] = "runtime";
    j["details"] = {error.what()};
    err << j.dump(2) << "\n";
    return 1;
  }
}

} // namespace phylograd::cli
