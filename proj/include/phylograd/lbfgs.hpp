#pragma once

// Limited-memory BFGS with strong Wolfe line search (cubic interpolation).
// The inverse-Hessian action is applied through the two-loop recursion over
// the most recent m (s, y) pairs, seeded with the standard scalar initial
// matrix gamma I, gamma = s'y / y'y.

#include <Eigen/Dense>

#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace phylograd {

struct LbfgsConfig {
  int memory = 10;
  int max_iterations = 500;
  double gradient_tolerance = 1e-6; // infinity norm
  double sufficient_decrease = 1e-4;
  double curvature = 0.9;
  int max_line_search_steps = 60;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double objective = 0.0;
  Eigen::VectorXd gradient;
  int iterations = 0;
  bool converged = false;
  std::string message;
  std::vector<double> trace; // objective after each accepted iterate
  long evaluations = 0;
};

// H g via the two-loop recursion; exposed so small-problem cross-checks can
// compare it with the explicitly updated inverse Hessian.
inline Eigen::VectorXd lbfgs_two_loop(const Eigen::VectorXd& gradient,
                                      const std::deque<Eigen::VectorXd>& s_history,
                                      const std::deque<Eigen::VectorXd>& y_history,
                                      double gamma) {
  const int k = static_cast<int>(s_history.size());
  Eigen::VectorXd q = gradient;
  std::vector<double> alpha(k), rho(k);
  for (int i = k - 1; i >= 0; --i) {
    rho[i] = 1.0 / y_history[i].dot(s_history[i]);
    alpha[i] = rho[i] * s_history[i].dot(q);
    q -= alpha[i] * y_history[i];
  }
  q *= gamma;
  for (int i = 0; i < k; ++i) {
    double beta = rho[i] * y_history[i].dot(q);
    q += (alpha[i] - beta) * s_history[i];
  }
  return q;
}

namespace detail {

// Minimizer of the cubic through (a0, f0, g0) and (a1, f1, g1); NaN when the
// interpolant degenerates.
inline double cubic_minimizer(double a0, double f0, double g0, double a1, double f1, double g1) {
  const double d1 = g0 + g1 - 3.0 * (f0 - f1) / (a0 - a1);
  const double radicand = d1 * d1 - g0 * g1;
  if (radicand < 0.0) return std::numeric_limits<double>::quiet_NaN();
  const double d2 = std::copysign(std::sqrt(radicand), a1 - a0);
  return a1 - (a1 - a0) * (g1 + d2 - d1) / (g1 - g0 + 2.0 * d2);
}

} // namespace detail

// objective: f(x, grad_out) -> value.
template <class Objective>
inline LbfgsResult lbfgs_minimize(Objective&& objective, Eigen::VectorXd x0,
                                  const LbfgsConfig& config = {}) {
  if (config.memory < 1) throw std::invalid_argument("lbfgs: memory must be >= 1");
  if (!(config.gradient_tolerance > 0.0)) throw std::invalid_argument("lbfgs: bad tolerance");

  LbfgsResult result;
  const int dim = static_cast<int>(x0.size());
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd grad(dim), grad_new(dim), x_new(dim), direction(dim);
  double f = objective(x, grad);
  ++result.evaluations;
  if (!std::isfinite(f)) throw std::invalid_argument("lbfgs: objective not finite at x0");
  result.trace.push_back(f);

  std::deque<Eigen::VectorXd> s_history, y_history;
  double gamma = 1.0;

  auto finish = [&](bool converged, std::string message) {
    result.x = x;
    result.objective = f;
    result.gradient = grad;
    result.converged = converged;
    result.message = std::move(message);
    return result;
  };

  for (int iter = 0; iter < config.max_iterations; ++iter) {
    if (grad.lpNorm<Eigen::Infinity>() < config.gradient_tolerance)
      return finish(true, "gradient tolerance reached");

    direction = -lbfgs_two_loop(grad, s_history, y_history, gamma);
    double slope = grad.dot(direction);
    if (!(slope < 0.0)) { // fall back to steepest descent
      s_history.clear();
      y_history.clear();
      direction = -grad;
      slope = grad.dot(direction);
    }

    // Strong Wolfe search: bracket then zoom with cubic interpolation. The
    // sufficient-decrease test carries a rounding allowance so steps whose
    // true decrease sits below the objective's noise floor are still
    // acceptable when the curvature condition holds (approximate Wolfe).
    const double f0 = f, slope0 = slope;
    const double f_noise = 1e-14 * (1.0 + std::abs(f0));
    const double c1 = config.sufficient_decrease, c2 = config.curvature;
    double a_prev = 0.0, f_prev = f0, slope_prev = slope0;
    double a = 1.0, a_accepted = -1.0, f_accepted = 0.0;
    Eigen::VectorXd grad_accepted;

    auto eval = [&](double step, double& value, double& dvalue) {
      x_new = x + step * direction;
      value = objective(x_new, grad_new);
      ++result.evaluations;
      dvalue = grad_new.dot(direction);
    };

    auto zoom = [&](double lo, double f_lo, double slope_lo, double hi, double f_hi,
                    double slope_hi) {
      for (int z = 0; z < config.max_line_search_steps; ++z) {
        double trial = detail::cubic_minimizer(lo, f_lo, slope_lo, hi, f_hi, slope_hi);
        const double left = std::min(lo, hi), right = std::max(lo, hi);
        const double margin = 0.1 * (right - left);
        if (!std::isfinite(trial) || trial <= left + margin || trial >= right - margin)
          trial = 0.5 * (lo + hi);
        double ft, st;
        eval(trial, ft, st);
        if (!std::isfinite(ft) || ft > f0 + c1 * trial * slope0 + f_noise || ft >= f_lo + f_noise) {
          hi = trial;
          f_hi = ft;
          slope_hi = st;
        } else {
          if (std::abs(st) <= -c2 * slope0) {
            a_accepted = trial;
            f_accepted = ft;
            grad_accepted = grad_new;
            return;
          }
          if (st * (hi - lo) >= 0.0) {
            hi = lo;
            f_hi = f_lo;
            slope_hi = slope_lo;
          }
          lo = trial;
          f_lo = ft;
          slope_lo = st;
        }
        if (std::abs(hi - lo) < 1e-16 * std::max(1.0, std::abs(lo))) return;
      }
    };

    for (int ls = 0; ls < config.max_line_search_steps; ++ls) {
      double fa, sa;
      eval(a, fa, sa);
      if (!std::isfinite(fa) || fa > f0 + c1 * a * slope0 + f_noise || (ls > 0 && fa >= f_prev)) {
        zoom(a_prev, f_prev, slope_prev, a, fa, sa);
        break;
      }
      if (std::abs(sa) <= -c2 * slope0) {
        a_accepted = a;
        f_accepted = fa;
        grad_accepted = grad_new;
        break;
      }
      if (sa >= 0.0) {
        zoom(a, fa, sa, a_prev, f_prev, slope_prev);
        break;
      }
      a_prev = a;
      f_prev = fa;
      slope_prev = sa;
      a *= 2.0;
      if (a > 1e10) break;
    }

    if (a_accepted < 0.0)
      return finish(false, "line search failed at iteration " + std::to_string(iter));

    Eigen::VectorXd step = a_accepted * direction;
    Eigen::VectorXd grad_diff = grad_accepted - grad;
    x += step;
    f = f_accepted;
    grad = grad_accepted;
    ++result.iterations;
    result.trace.push_back(f);

    const double sy = step.dot(grad_diff);
    if (sy > 1e-12 * step.norm() * grad_diff.norm()) {
      s_history.push_back(std::move(step));
      y_history.push_back(std::move(grad_diff));
      if (static_cast<int>(s_history.size()) > config.memory) {
        s_history.pop_front();
        y_history.pop_front();
      }
      gamma = sy / y_history.back().squaredNorm();
    }
  }

  if (grad.lpNorm<Eigen::Infinity>() < config.gradient_tolerance)
    return finish(true, "gradient tolerance reached");
  return finish(false, "iteration cap reached");
}

} // namespace phylograd
