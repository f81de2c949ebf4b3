#pragma once

// Declarative run configuration: one JSON file drives every subcommand.
// Loading applies defaults and syntactic checks; semantic validation happens
// per mode and reports every problem at once, not just the first. The hash of
// the canonical config serialization is embedded in every output file so
// mixed-provenance outputs are detectable.

#include <json.hpp>

#include <cstdint>
#include <map>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace phylograd {

struct ConfigError : std::runtime_error {
  explicit ConfigError(std::vector<std::string> problem_list)
      : std::runtime_error(join(problem_list)), problems(std::move(problem_list)) {}
  std::vector<std::string> problems;

 private:
  static std::string join(const std::vector<std::string>& list) {
    std::string all = "configuration invalid:";
    for (const auto& p : list) all += "\n  - " + p;
    return all;
  }
};

struct ModelConfig {
  std::string name = "JC69"; // JC69 | HKY85 | GTR
  double kappa = 2.0;
  std::vector<double> exchangeabilities; // GTR, order AC AG AT CG CT GT
  std::vector<double> frequencies;       // A C G T
  int rate_categories = 1;
  double gamma_shape = 1.0;
  // non-homogeneous mode: branch id -> CSV file holding a raw m x m generator
  std::map<std::string, std::string> branch_generator_files;
};

struct ClockConfig {
  bool enabled = false;
  bool strict = false;
  double mu = 1.0;
  double psi = 0.5;
  std::vector<double> epsilon;           // empty = all ones; 1 value = constant
  std::string mu_prior = "flat_log";     // flat_log | lognormal
  double mu_prior_location = 0.0;
  double mu_prior_scale = 1.0;
  double psi_prior_rate = 3.0;           // Exp prior, mean 1/rate
};

struct LbfgsSettings {
  int memory = 10;
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;
  bool compare_numeric = false; // also run the FD-gradient optimization
};

struct HmcSettings {
  double step_size = 0.1;
  int leapfrog_steps = 20;
  int iterations = 1000;
  int warmup = -1; // default 20% of iterations
  int adaptation_interval = 10;
  double clamp_min_factor = 1e-2;
  double clamp_max_factor = 1e2;
  double target_acceptance = 0.8;
};

struct UnivariateSettings {
  int iterations = 20000;
  int warmup = -1;
  double initial_scale = 0.5;
};

struct InferenceConfig {
  LbfgsSettings lbfgs;
  HmcSettings hmc;
  UnivariateSettings univariate;
  std::vector<std::string> kernels = {"phmc"}; // univariate | vhmc | phmc
  int chains = 1;
};

struct BenchConfig {
  std::vector<int> tip_counts = {64, 128, 256, 512, 1024};
  long sites = 1000;
  int repetitions = 3;
  bool caterpillar = false;
};

struct RunConfig {
  std::uint64_t seed = 1;
  int workers = 1;
  std::string output_dir = "out";
  std::string tree_file;
  std::string alignment_file;
  ModelConfig model;
  ClockConfig clock;
  InferenceConfig inference;
  long simulate_sites = 1000;
  BenchConfig bench;
  std::string config_hash;      // filled at load time
  std::string config_canonical; // canonical serialization, echoed into metadata
};

namespace detail {

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t hash = 1469598103934665603ull;
  for (unsigned char c : text) {
    hash ^= c;
    hash *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

template <class T>
void read_field(const nlohmann::json& j, const char* key, T& value,
                std::vector<std::string>& problems, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    value = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    problems.push_back(scope + "." + key + " has the wrong type");
  }
}

} // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& err) {
    throw ConfigError({std::string("config is not valid JSON: ") + err.what()});
  }
  if (!j.is_object()) throw ConfigError({"config root must be a JSON object"});

  std::vector<std::string> problems;
  RunConfig config;
  detail::read_field(j, "seed", config.seed, problems, "config");
  detail::read_field(j, "workers", config.workers, problems, "config");
  detail::read_field(j, "output_dir", config.output_dir, problems, "config");
  detail::read_field(j, "tree_file", config.tree_file, problems, "config");
  detail::read_field(j, "alignment_file", config.alignment_file, problems, "config");
  detail::read_field(j, "simulate_sites", config.simulate_sites, problems, "config");

  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::read_field(m, "name", config.model.name, problems, "model");
    detail::read_field(m, "kappa", config.model.kappa, problems, "model");
    detail::read_field(m, "exchangeabilities", config.model.exchangeabilities, problems, "model");
    detail::read_field(m, "frequencies", config.model.frequencies, problems, "model");
    detail::read_field(m, "rate_categories", config.model.rate_categories, problems, "model");
    detail::read_field(m, "gamma_shape", config.model.gamma_shape, problems, "model");
    detail::read_field(m, "branch_generators", config.model.branch_generator_files, problems,
                       "model");
  }
  if (j.contains("clock")) {
    const auto& c = j["clock"];
    detail::read_field(c, "enabled", config.clock.enabled, problems, "clock");
    detail::read_field(c, "strict", config.clock.strict, problems, "clock");
    detail::read_field(c, "mu", config.clock.mu, problems, "clock");
    detail::read_field(c, "psi", config.clock.psi, problems, "clock");
    detail::read_field(c, "epsilon", config.clock.epsilon, problems, "clock");
    detail::read_field(c, "mu_prior", config.clock.mu_prior, problems, "clock");
    detail::read_field(c, "mu_prior_location", config.clock.mu_prior_location, problems, "clock");
    detail::read_field(c, "mu_prior_scale", config.clock.mu_prior_scale, problems, "clock");
    detail::read_field(c, "psi_prior_rate", config.clock.psi_prior_rate, problems, "clock");
  }
  if (j.contains("inference")) {
    const auto& inf = j["inference"];
    detail::read_field(inf, "kernels", config.inference.kernels, problems, "inference");
    detail::read_field(inf, "chains", config.inference.chains, problems, "inference");
    if (inf.contains("lbfgs")) {
      const auto& l = inf["lbfgs"];
      detail::read_field(l, "memory", config.inference.lbfgs.memory, problems, "lbfgs");
      detail::read_field(l, "max_iterations", config.inference.lbfgs.max_iterations, problems, "lbfgs");
      detail::read_field(l, "gradient_tolerance", config.inference.lbfgs.gradient_tolerance, problems, "lbfgs");
      detail::read_field(l, "compare_numeric", config.inference.lbfgs.compare_numeric, problems, "lbfgs");
    }
    if (inf.contains("hmc")) {
      const auto& h = inf["hmc"];
      detail::read_field(h, "step_size", config.inference.hmc.step_size, problems, "hmc");
      detail::read_field(h, "leapfrog_steps", config.inference.hmc.leapfrog_steps, problems, "hmc");
      detail::read_field(h, "iterations", config.inference.hmc.iterations, problems, "hmc");
      detail::read_field(h, "warmup", config.inference.hmc.warmup, problems, "hmc");
      detail::read_field(h, "adaptation_interval", config.inference.hmc.adaptation_interval, problems, "hmc");
      detail::read_field(h, "clamp_min_factor", config.inference.hmc.clamp_min_factor, problems, "hmc");
      detail::read_field(h, "clamp_max_factor", config.inference.hmc.clamp_max_factor, problems, "hmc");
      detail::read_field(h, "target_acceptance", config.inference.hmc.target_acceptance, problems, "hmc");
    }
    if (inf.contains("univariate")) {
      const auto& u = inf["univariate"];
      detail::read_field(u, "iterations", config.inference.univariate.iterations, problems, "univariate");
      detail::read_field(u, "warmup", config.inference.univariate.warmup, problems, "univariate");
      detail::read_field(u, "initial_scale", config.inference.univariate.initial_scale, problems, "univariate");
    }
  }
  if (j.contains("bench")) {
    const auto& b = j["bench"];
    detail::read_field(b, "tip_counts", config.bench.tip_counts, problems, "bench");
    detail::read_field(b, "sites", config.bench.sites, problems, "bench");
    detail::read_field(b, "repetitions", config.bench.repetitions, problems, "bench");
    detail::read_field(b, "caterpillar", config.bench.caterpillar, problems, "bench");
  }
  if (!problems.empty()) throw ConfigError(std::move(problems));

  config.config_canonical = j.dump(); // nlohmann keeps keys sorted
  config.config_hash = detail::fnv1a_hex(config.config_canonical);
  return config;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config file '" + path + "'"});
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_run_config(buffer.str());
}

} // namespace phylograd
