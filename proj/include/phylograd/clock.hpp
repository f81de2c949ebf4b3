#pragma once

// Random-effects relaxed clock: branch rate r_i = mu * eps_i with lognormal
// random effects of mean 1 and variance psi^2, mapped to branch lengths
// b_i = r_i (t_i - t_pa(i)). Assembles the log posterior and its gradient in
// the unconstrained space (log mu, log psi, log eps_1..log eps_{2N-2}) by
// chain rule from the engine's branch-length gradient.

#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "phylograd/engine.hpp"
#include "phylograd/tree.hpp"

namespace phylograd {

struct LognormalHyper {
  double location; // of log eps
  double scale;    // sd of log eps
};

// Chosen so the lognormal has mean exactly 1 and variance psi^2:
// scale^2 = log(1 + psi^2), location = -scale^2 / 2.
inline LognormalHyper lognormal_hyperparams(double psi) {
  if (psi < 0.0) throw std::invalid_argument("clock: psi must be nonnegative");
  const double variance_log = std::log1p(psi * psi);
  return {-variance_log / 2.0, std::sqrt(variance_log)};
}

struct ClockParameterization {
  double mu = 1.0;
  double psi = 0.5;
  Eigen::VectorXd epsilon; // entry node-1 for branch node, node = 1..2N-2

  Eigen::VectorXd branch_rates() const { return mu * epsilon; }
};

inline Eigen::VectorXd branch_lengths_from_clock(const Tree& tree,
                                                 const ClockParameterization& clock) {
  if (!tree.has_times())
    throw std::invalid_argument("clock: tree has no node times attached");
  if (clock.epsilon.size() != tree.branch_count())
    throw std::invalid_argument("clock: need one epsilon per branch");
  if (!(clock.mu > 0.0) || (clock.epsilon.array() <= 0.0).any())
    throw std::invalid_argument("clock: rates must be positive");
  Eigen::VectorXd lengths(tree.branch_count());
  for (int i = 1; i <= tree.branch_count(); ++i)
    lengths[i - 1] =
        clock.mu * clock.epsilon[i - 1] * (tree.node_time[i] - tree.node_time[tree.parent[i]]);
  return lengths;
}

struct MuPrior {
  enum Kind { flat_log, lognormal };
  Kind kind = flat_log;
  double location = 0.0; // lognormal only
  double scale = 1.0;
};

struct ClockPriors {
  MuPrior mu;
  double psi_exponential_rate = 3.0; // Exp prior with mean 1/3
  bool flat_testing = false;         // drop every prior and Jacobian term
};

// Log posterior over the unconstrained state x = (log mu, log psi, log eps).
// Densities are expressed in x-space, i.e. they include the log-Jacobian of
// the log transforms. The strict profile freezes eps at 1 (and drops psi),
// leaving x = (log mu) alone.
class RelaxedClockPosterior {
 public:
  RelaxedClockPosterior(LikelihoodEngine& engine, ClockPriors priors,
                        bool include_likelihood = true, bool strict_clock = false)
      : engine_(engine),
        priors_(priors),
        include_likelihood_(include_likelihood),
        strict_(strict_clock) {
    const Tree& tree = engine_.tree();
    if (!tree.has_times()) throw std::invalid_argument("clock posterior: tree has no node times");
    durations_.resize(tree.branch_count());
    for (int i = 1; i <= tree.branch_count(); ++i)
      durations_[i - 1] = tree.node_time[i] - tree.node_time[tree.parent[i]];
  }

  int dimension() const {
    return strict_ ? 1 : 2 + static_cast<int>(durations_.size());
  }

  Eigen::VectorXd to_unconstrained(const ClockParameterization& clock) const {
    Eigen::VectorXd x(dimension());
    x[0] = std::log(clock.mu);
    if (!strict_) {
      x[1] = std::log(clock.psi);
      x.tail(durations_.size()) = clock.epsilon.array().log();
    }
    return x;
  }

  ClockParameterization from_unconstrained(const Eigen::VectorXd& x) const {
    check_dimension(x);
    ClockParameterization clock;
    clock.mu = std::exp(x[0]);
    if (strict_) {
      clock.psi = 0.0;
      clock.epsilon = Eigen::VectorXd::Ones(durations_.size());
    } else {
      clock.psi = std::exp(x[1]);
      clock.epsilon = x.tail(durations_.size()).array().exp();
    }
    return clock;
  }

  // States whose transform overflows the floating range have zero posterior
  // mass; samplers see -inf and reject rather than an exception.
  bool evaluable(const Eigen::VectorXd& x) const {
    return (x.array().abs() < 300.0).all() && branch_lengths(x).allFinite();
  }

  double log_posterior(const Eigen::VectorXd& x) {
    check_dimension(x);
    if (!evaluable(x)) return -std::numeric_limits<double>::infinity();
    double value = 0.0;
    if (include_likelihood_) {
      engine_.set_branch_lengths(branch_lengths(x));
      value += check_term(engine_.log_likelihood(), "likelihood");
    }
    if (priors_.flat_testing) return value;
    value += check_term(mu_prior_term(x[0]), "mu prior");
    if (!strict_) {
      value += check_term(psi_prior_term(x[1]), "psi prior");
      value += check_term(epsilon_prior_term(x), "epsilon prior");
    }
    return value;
  }

  Eigen::VectorXd gradient(const Eigen::VectorXd& x) {
    check_dimension(x);
    if (!evaluable(x))
      throw std::domain_error("clock posterior: state outside the evaluable range");
    Eigen::VectorXd g = Eigen::VectorXd::Zero(dimension());
    if (include_likelihood_) {
      engine_.set_branch_lengths(branch_lengths(x));
      GradientReport report = engine_.branch_gradient();
      // d b_i / d log eps_i = d b_i / d log mu = b_i.
      Eigen::ArrayXd scaled = report.branch_gradient.array() * engine_.branch_lengths().array();
      g[0] = scaled.sum();
      if (!strict_) g.tail(durations_.size()) = scaled;
    }
    if (priors_.flat_testing) return g;
    g[0] += mu_prior_gradient(x[0]);
    if (!strict_) {
      const double psi = std::exp(x[1]);
      const double v = std::log1p(psi * psi);
      const double m = -v / 2.0;
      const Eigen::ArrayXd z = x.tail(durations_.size()).array();
      g.tail(durations_.size()).array() -= (z - m) / v;
      g[1] = psi_prior_gradient_wrt_log(psi, z);
    }
    return g;
  }

  // Negative second derivatives of the log posterior, diagonal only; used as
  // the preconditioning mass. Rate coordinates (the branch effects and the
  // global mean, which scales every branch) use the engine's Hessian diagonal
  // plus prior curvature; the cross-branch terms of the exact log-mu second
  // derivative are dropped, which the mass clamping absorbs. psi has no
  // likelihood term, so its prior curvature is exact.
  Eigen::VectorXd negative_hessian_diagonal(const Eigen::VectorXd& x) {
    check_dimension(x);
    Eigen::VectorXd h = Eigen::VectorXd::Zero(dimension());
    if (include_likelihood_) {
      engine_.set_branch_lengths(branch_lengths(x));
      GradientReport report = engine_.branch_gradient(/*with_hessian_diagonal=*/true);
      const Eigen::ArrayXd b = engine_.branch_lengths().array();
      // d^2/d(log eps)^2 logL = b g + b^2 H on the diagonal.
      Eigen::ArrayXd rate_curvature =
          -(b * report.branch_gradient.array() + b.square() * report.hessian_diagonal.array());
      h[0] = rate_curvature.sum();
      if (!strict_) h.tail(durations_.size()) = rate_curvature;
    }
    if (priors_.flat_testing) return h;
    if (priors_.mu.kind == MuPrior::lognormal) h[0] += 1.0 / (priors_.mu.scale * priors_.mu.scale);
    if (!strict_) {
      const double psi = std::exp(x[1]);
      const double v = std::log1p(psi * psi);
      const Eigen::ArrayXd z = x.tail(durations_.size()).array();
      h.tail(durations_.size()).array() += 1.0 / v;
      h[1] = -psi_prior_curvature_wrt_log(psi, z);
    }
    return h;
  }

  // d logL / d t_k for internal node times (tip times fixed); root has no
  // branch of its own.
  Eigen::VectorXd node_time_gradient(const ClockParameterization& clock) {
    const Tree& tree = engine_.tree();
    engine_.set_branch_lengths(branch_lengths_from_clock(tree, clock));
    GradientReport report = engine_.branch_gradient();
    Eigen::VectorXd rates = clock.branch_rates();
    Eigen::VectorXd g = Eigen::VectorXd::Zero(tree.tip_count - 1);
    for (int node = tree.tip_count + 1; node <= tree.node_count(); ++node) {
      double value = 0.0;
      if (node != tree.root()) value += rates[node - 1] * report.branch_gradient[node - 1];
      for (int child : tree.children[node])
        value -= rates[child - 1] * report.branch_gradient[child - 1];
      g[node - tree.tip_count - 1] = value;
    }
    return g;
  }

  Eigen::VectorXd branch_lengths(const Eigen::VectorXd& x) const {
    check_dimension(x);
    const double mu = std::exp(x[0]);
    if (strict_) return mu * durations_;
    Eigen::VectorXd eps = x.tail(durations_.size()).array().exp();
    return mu * eps.cwiseProduct(durations_);
  }

  const Eigen::VectorXd& durations() const { return durations_; }
  bool strict_clock() const { return strict_; }

 private:
  void check_dimension(const Eigen::VectorXd& x) const {
    if (x.size() != dimension())
      throw std::invalid_argument("clock posterior: state has wrong dimension");
  }

  static double check_term(double value, const char* component) {
    if (!std::isfinite(value))
      throw std::runtime_error(std::string("clock posterior: non-finite ") + component + " term");
    return value;
  }

  double mu_prior_term(double log_mu) const {
    if (priors_.mu.kind == MuPrior::flat_log) return 0.0;
    const double d = log_mu - priors_.mu.location;
    const double s = priors_.mu.scale;
    return -std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi) - d * d / (2.0 * s * s);
  }

  double mu_prior_gradient(double log_mu) const {
    if (priors_.mu.kind == MuPrior::flat_log) return 0.0;
    return -(log_mu - priors_.mu.location) / (priors_.mu.scale * priors_.mu.scale);
  }

  // Exp(psi; rate) density plus the log-Jacobian of psi = exp(log psi).
  double psi_prior_term(double log_psi) const {
    const double psi = std::exp(log_psi);
    return std::log(priors_.psi_exponential_rate) - priors_.psi_exponential_rate * psi + log_psi;
  }

  // i.i.d. lognormal terms in x-space: -log s - log(2 pi)/2 - (z - m)^2/(2 s^2).
  double epsilon_prior_term(const Eigen::VectorXd& x) const {
    const double psi = std::exp(x[1]);
    if (!(psi > 0.0)) throw std::runtime_error("clock posterior: psi underflowed to zero");
    const double v = std::log1p(psi * psi);
    const double m = -v / 2.0;
    const Eigen::ArrayXd z = x.tail(durations_.size()).array();
    const double n = static_cast<double>(durations_.size());
    return -n * 0.5 * std::log(v) - n * 0.5 * std::log(2.0 * std::numbers::pi) -
           ((z - m).square() / (2.0 * v)).sum();
  }

  // d/d(log psi) of all psi-dependent prior terms.
  double psi_prior_gradient_wrt_log(double psi, const Eigen::ArrayXd& z) const {
    const double v = std::log1p(psi * psi);
    const double m = -v / 2.0;
    const double dv = 2.0 * psi / (1.0 + psi * psi);
    const double dm = -dv / 2.0;
    double df = 0.0;
    for (int i = 0; i < z.size(); ++i) {
      const double d = z[i] - m;
      df += -dv / (2.0 * v) + d * dm / v + d * d * dv / (2.0 * v * v);
    }
    df += -priors_.psi_exponential_rate + 1.0 / psi; // Exp prior + Jacobian
    return psi * df;
  }

  // d^2/d(log psi)^2 via d2F/dw2 = psi F' + psi^2 F''.
  double psi_prior_curvature_wrt_log(double psi, const Eigen::ArrayXd& z) const {
    const double q = 1.0 + psi * psi;
    const double v = std::log1p(psi * psi);
    const double m = -v / 2.0;
    const double dv = 2.0 * psi / q;
    const double dm = -dv / 2.0;
    const double d2v = 2.0 * (1.0 - psi * psi) / (q * q);
    const double d2m = -d2v / 2.0;
    double f1 = 0.0, f2 = 0.0;
    for (int i = 0; i < z.size(); ++i) {
      const double d = z[i] - m;
      f1 += -dv / (2.0 * v) + d * dm / v + d * d * dv / (2.0 * v * v);
      f2 += -d2v / (2.0 * v) + dv * dv / (2.0 * v * v) // from -v'/(2v)
            - dm * dm / v + d * d2m / v - d * dm * dv / (v * v) // from (z-m)m'/v
            - d * dm * dv / (v * v) + d * d * d2v / (2.0 * v * v) -
            d * d * dv * dv / (v * v * v); // from (z-m)^2 v'/(2v^2)
    }
    f1 += -priors_.psi_exponential_rate + 1.0 / psi;
    f2 += -1.0 / (psi * psi);
    return psi * f1 + psi * psi * f2;
  }

  LikelihoodEngine& engine_;
  ClockPriors priors_;
  bool include_likelihood_;
  bool strict_;
  Eigen::VectorXd durations_;
};

} // namespace phylograd
