#pragma once

// Shared helpers for the test suites: random instances, admissible traversal
// orders, and small numerical oracles kept independent of the library paths
// they check.

#include <Eigen/Dense>

#include <cmath>
#include <random>
#include <vector>

#include "phylograd/alignment.hpp"
#include "phylograd/tree.hpp"
#include "phylograd/validation.hpp"

namespace testutil {

// Random topology with uniform branch lengths; no node times attached.
inline phylograd::Tree random_tree(int tips, std::mt19937_64& rng, double min_length,
                                   double max_length) {
  phylograd::Tree tree = phylograd::random_coalescent_tree(tips, rng);
  tree.node_time.clear();
  std::uniform_real_distribution<double> unif(min_length, max_length);
  for (int i = 1; i <= tree.branch_count(); ++i) tree.branch_length[i] = unif(rng);
  return tree;
}

// Any admissible post order: repeatedly emit a random node whose children
// have already been emitted.
inline std::vector<int> random_post_order(const phylograd::Tree& tree, std::mt19937_64& rng) {
  const int n = tree.node_count();
  std::vector<int> pending_children(n + 1, 0);
  std::vector<int> ready;
  for (int i = tree.tip_count + 1; i <= n; ++i) pending_children[i] = 2;
  for (int i = 1; i <= tree.tip_count; ++i) ready.push_back(i);
  std::vector<int> order;
  while (!ready.empty()) {
    std::uniform_int_distribution<std::size_t> pick(0, ready.size() - 1);
    std::size_t at = pick(rng);
    int node = ready[at];
    ready.erase(ready.begin() + at);
    order.push_back(node);
    int parent = tree.parent[node];
    if (parent != 0 && --pending_children[parent] == 0) ready.push_back(parent);
  }
  return order;
}

// Truncated Taylor series oracle for the matrix exponential.
inline Eigen::MatrixXd taylor_expm(const Eigen::MatrixXd& a, int terms = 60) {
  Eigen::MatrixXd sum = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  Eigen::MatrixXd power = sum;
  for (int k = 1; k <= terms; ++k) {
    power = power * a / double(k);
    sum += power;
  }
  return sum;
}

// Regularized lower incomplete gamma P(a, x) by series / continued fraction;
// independent quantile oracle for the discrete-gamma construction.
inline double regularized_gamma_p(double a, double x) {
  if (x <= 0.0) return 0.0;
  const double log_gamma_a = std::lgamma(a);
  if (x < a + 1.0) {
    double term = 1.0 / a, sum = term, ap = a;
    for (int k = 0; k < 500; ++k) {
      ap += 1.0;
      term *= x / ap;
      sum += term;
      if (std::abs(term) < std::abs(sum) * 1e-16) break;
    }
    return sum * std::exp(-x + a * std::log(x) - log_gamma_a);
  }
  // Lentz continued fraction for Q(a, x).
  const double tiny = 1e-300;
  double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
  for (int k = 1; k < 500; ++k) {
    const double an = -k * (k - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return 1.0 - std::exp(-x + a * std::log(x) - log_gamma_a) * h;
}

inline double gamma_quantile_by_bisection(double shape, double rate, double p) {
  double lo = 0.0, hi = 1.0;
  while (regularized_gamma_p(shape, hi * rate) < p) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (regularized_gamma_p(shape, mid * rate) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

// Closed-form Jukes-Cantor transition probabilities (rate-1 normalization).
inline double jc_same(double b) { return 0.25 + 0.75 * std::exp(-4.0 * b / 3.0); }
inline double jc_diff(double b) { return (1.0 - jc_same(b)) / 3.0; }

} // namespace testutil
