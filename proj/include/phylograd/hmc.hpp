#pragma once

// Hamiltonian Monte Carlo with a diagonal mass matrix, optionally adapted
// from running averages of the target's negative Hessian diagonal (updated
// every k iterations, clamped to [m_min, m_max], frozen after warm-up), plus
// the single-coordinate random-walk baseline used for sampler comparisons.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace phylograd {

struct HmcTarget {
  std::function<double(const Eigen::VectorXd&)> log_density;
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> gradient;
  // Required for adaptive_diagonal mass mode; entries may be noisy or
  // nonpositive, clamping keeps the mass matrix positive-definite.
  std::function<Eigen::VectorXd(const Eigen::VectorXd&)> negative_hessian_diagonal;
};

enum class MassMode { identity, adaptive_diagonal };

struct HmcConfig {
  double step_size = 0.1;
  int leapfrog_steps = 20;
  MassMode mass_mode = MassMode::identity;
  int adaptation_interval = 10; // Hessian sampled every k iterations
  double clamp_min_factor = 1e-2;
  double clamp_max_factor = 1e2;
  double target_acceptance = 0.8;
  bool adapt_step_size = true;
  int iterations = 1000; // retained draws
  int warmup = -1;       // default: 20% of retained iterations
  std::uint64_t seed = 1;
};

struct HmcResult {
  Eigen::MatrixXd samples; // retained x dim
  Eigen::VectorXd log_densities;
  std::vector<char> accepted;
  double acceptance_rate = 0.0;
  int divergences = 0;
  double final_step_size = 0.0;
  long gradient_evaluations = 0;
  Eigen::VectorXd mass_diagonal;
  // Mass matrix after each adaptation update, with the iteration index it
  // happened at; lets callers verify vanishing adaptation.
  std::vector<std::pair<int, Eigen::VectorXd>> mass_history;
};

// One leapfrog trajectory; n momentum-position-momentum steps of size eps.
// Returns the number of gradient evaluations (n + 1).
inline long leapfrog(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& gradient,
                     Eigen::VectorXd& position, Eigen::VectorXd& momentum, double step_size,
                     int steps, const Eigen::ArrayXd& inverse_mass) {
  Eigen::VectorXd grad = gradient(position);
  long evaluations = 1;
  momentum += 0.5 * step_size * grad;
  for (int step = 0; step < steps; ++step) {
    position.array() += step_size * inverse_mass * momentum.array();
    grad = gradient(position);
    ++evaluations;
    momentum += (step == steps - 1 ? 0.5 : 1.0) * step_size * grad;
  }
  return evaluations;
}

inline HmcResult hmc_sample(const HmcTarget& target, Eigen::VectorXd x0, const HmcConfig& config) {
  if (!(config.step_size > 0.0) || config.leapfrog_steps < 1)
    throw std::invalid_argument("hmc: step size must be positive and steps >= 1");
  if (config.mass_mode == MassMode::adaptive_diagonal && !target.negative_hessian_diagonal)
    throw std::invalid_argument("hmc: adaptive mass mode needs a Hessian diagonal callable");
  if (!(config.clamp_min_factor > 0.0) || config.clamp_min_factor >= config.clamp_max_factor)
    throw std::invalid_argument("hmc: need 0 < m_min < m_max");

  const int dim = static_cast<int>(x0.size());
  const int warmup = config.warmup >= 0 ? config.warmup : config.iterations / 5;
  const int total = warmup + config.iterations;

  HmcResult result;
  result.samples.resize(config.iterations, dim);
  result.log_densities.resize(config.iterations);
  result.accepted.assign(config.iterations, 0);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  Eigen::VectorXd x = std::move(x0);
  double log_p = target.log_density(x);
  if (!std::isfinite(log_p)) throw std::invalid_argument("hmc: log density not finite at x0");

  Eigen::ArrayXd mass = Eigen::ArrayXd::Ones(dim);
  Eigen::ArrayXd inverse_mass = mass.inverse();
  Eigen::ArrayXd hessian_sum = Eigen::ArrayXd::Zero(dim);
  int hessian_samples = 0;

  // Dual averaging on log step size (target acceptance during warm-up).
  double step_size = config.step_size;
  const double da_mu = std::log(10.0 * config.step_size);
  double da_h = 0.0, da_log_avg = std::log(config.step_size);
  const double da_gamma = 0.05, da_t0 = 10.0, da_kappa = 0.75;

  Eigen::VectorXd momentum(dim), x_prop(dim), momentum_prop(dim);
  int accepted_retained = 0;

  for (int iter = 0; iter < total; ++iter) {
    const bool in_warmup = iter < warmup;

    for (int i = 0; i < dim; ++i) momentum[i] = std::sqrt(mass[i]) * normal(rng);
    const double kinetic = 0.5 * (momentum.array().square() * inverse_mass).sum();
    const double h_current = -log_p + kinetic;

    x_prop = x;
    momentum_prop = momentum;
    double h_proposal = std::numeric_limits<double>::infinity();
    double log_p_prop = 0.0;
    // a target evaluation failure along the trajectory is a divergence
    try {
      result.gradient_evaluations +=
          leapfrog(target.gradient, x_prop, momentum_prop, step_size, config.leapfrog_steps,
                   inverse_mass);
      log_p_prop = target.log_density(x_prop);
      const double kinetic_prop = 0.5 * (momentum_prop.array().square() * inverse_mass).sum();
      h_proposal = -log_p_prop + kinetic_prop;
    } catch (const std::exception&) {
    }

    double accept_prob = 0.0;
    bool accept = false;
    if (std::isfinite(h_proposal)) {
      accept_prob = std::min(1.0, std::exp(h_current - h_proposal));
      accept = unif(rng) < accept_prob;
    } else {
      ++result.divergences;
    }
    if (accept) {
      x = x_prop;
      log_p = log_p_prop;
    }

    if (in_warmup && config.adapt_step_size) {
      const double t = iter + 1;
      da_h = (1.0 - 1.0 / (t + da_t0)) * da_h +
             (config.target_acceptance - accept_prob) / (t + da_t0);
      const double log_eps = da_mu - std::sqrt(t) / da_gamma * da_h;
      const double eta = std::pow(t, -da_kappa);
      da_log_avg = eta * log_eps + (1.0 - eta) * da_log_avg;
      step_size = std::exp(log_eps);
    } else if (iter == warmup && config.adapt_step_size && warmup > 0) {
      step_size = std::exp(da_log_avg); // frozen smoothed value for sampling
    }

    if (in_warmup && config.mass_mode == MassMode::adaptive_diagonal &&
        (iter + 1) % config.adaptation_interval == 0) {
      hessian_sum += target.negative_hessian_diagonal(x).array();
      ++hessian_samples;
      Eigen::ArrayXd average = hessian_sum / hessian_samples;
      std::vector<double> positive;
      for (int i = 0; i < dim; ++i)
        if (average[i] > 0.0) positive.push_back(average[i]);
      if (!positive.empty()) {
        std::nth_element(positive.begin(), positive.begin() + positive.size() / 2,
                         positive.end());
        const double median = positive[positive.size() / 2];
        const double m_min = config.clamp_min_factor * median;
        const double m_max = config.clamp_max_factor * median;
        mass = average.max(m_min).min(m_max);
        inverse_mass = mass.inverse();
        result.mass_history.emplace_back(iter + 1, Eigen::VectorXd(mass));
      }
    }

    if (!in_warmup) {
      const int row = iter - warmup;
      result.samples.row(row) = x;
      result.log_densities[row] = log_p;
      result.accepted[row] = accept ? 1 : 0;
      if (accept) ++accepted_retained;
    }
  }

  result.acceptance_rate =
      config.iterations > 0 ? double(accepted_retained) / config.iterations : 0.0;
  result.final_step_size = step_size;
  result.mass_diagonal = mass;
  return result;
}

struct UnivariateConfig {
  int iterations = 10000; // retained; one coordinate update each
  int warmup = -1;        // default: 20% of retained iterations
  double initial_scale = 0.5;
  double target_acceptance = 0.44;
  std::uint64_t seed = 1;
};

struct UnivariateResult {
  Eigen::MatrixXd samples; // retained x dim
  Eigen::VectorXd log_densities;
  std::vector<char> accepted;
  double acceptance_rate = 0.0;
  Eigen::VectorXd scales;
};

// Random-scan single-coordinate Gaussian random-walk Metropolis with
// Robbins-Monro scale adaptation toward 0.44 acceptance during warm-up.
inline UnivariateResult univariate_baseline_sample(
    const std::function<double(const Eigen::VectorXd&)>& log_density, Eigen::VectorXd x0,
    const UnivariateConfig& config) {
  const int dim = static_cast<int>(x0.size());
  const int warmup = config.warmup >= 0 ? config.warmup : config.iterations / 5;
  const int total = warmup + config.iterations;

  UnivariateResult result;
  result.samples.resize(config.iterations, dim);
  result.log_densities.resize(config.iterations);
  result.accepted.assign(config.iterations, 0);

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::uniform_int_distribution<int> pick(0, dim - 1);

  Eigen::VectorXd x = std::move(x0);
  double log_p = log_density(x);
  if (!std::isfinite(log_p)) throw std::invalid_argument("univariate: log density not finite at x0");

  Eigen::ArrayXd log_scale = Eigen::ArrayXd::Constant(dim, std::log(config.initial_scale));
  Eigen::ArrayXd updates = Eigen::ArrayXd::Zero(dim);
  long accepted_retained = 0;

  for (int iter = 0; iter < total; ++iter) {
    const int j = pick(rng);
    const double saved = x[j];
    x[j] = saved + std::exp(log_scale[j]) * normal(rng);
    double log_p_prop = -std::numeric_limits<double>::infinity();
    try {
      log_p_prop = log_density(x);
    } catch (const std::exception&) {
    }
    const bool accept =
        std::isfinite(log_p_prop) && unif(rng) < std::exp(log_p_prop - log_p);
    if (accept)
      log_p = log_p_prop;
    else
      x[j] = saved;

    if (iter < warmup) {
      updates[j] += 1.0;
      log_scale[j] += ((accept ? 1.0 : 0.0) - config.target_acceptance) /
                      std::sqrt(updates[j]);
    } else {
      const int row = iter - warmup;
      result.samples.row(row) = x;
      result.log_densities[row] = log_p;
      result.accepted[row] = accept ? 1 : 0;
      if (accept) ++accepted_retained;
    }
  }

  result.acceptance_rate =
      config.iterations > 0 ? double(accepted_retained) / config.iterations : 0.0;
  result.scales = log_scale.exp();
  return result;
}

} // namespace phylograd
