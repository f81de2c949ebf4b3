#pragma once

// Chain diagnostics: effective sample size from the initial-positive-sequence
// truncation of the autocorrelation function.

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

namespace phylograd {

struct EssResult {
  double ess = 1.0;
  bool degenerate = false; // constant chain
};

// ESS = n / (1 + 2 sum rho_t), accumulating Geyer pairs rho_{2k} + rho_{2k+1}
// while they stay positive; clipped to [1, n].
inline EssResult effective_sample_size(const Eigen::VectorXd& chain) {
  const long n = chain.size();
  if (n < 100) throw std::invalid_argument("ess: chain must have at least 100 draws");

  const double mean = chain.mean();
  Eigen::ArrayXd centered = chain.array() - mean;
  const double variance = centered.square().sum() / n;
  if (!(variance > 0.0)) return {1.0, true};

  auto autocorrelation = [&](long lag) {
    double acc = 0.0;
    for (long t = 0; t + lag < n; ++t) acc += centered[t] * centered[t + lag];
    return acc / (n * variance);
  };

  double pair_sum = 0.0;
  for (long k = 0;; ++k) {
    const long lag0 = 2 * k, lag1 = 2 * k + 1;
    if (lag1 >= n - 1) break;
    const double pair = autocorrelation(lag0) + autocorrelation(lag1);
    if (pair <= 0.0) break;
    pair_sum += pair;
  }
  const double tau = std::max(2.0 * pair_sum - 1.0, 1e-12);
  const double ess = std::min(std::max(double(n) / tau, 1.0), double(n));
  return {ess, false};
}

} // namespace phylograd
