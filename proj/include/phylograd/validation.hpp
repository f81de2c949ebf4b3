#pragma once

// Independent oracles and instrumentation: brute-force likelihood by latent
// state enumeration, central finite-difference derivatives with evaluation
// counters, random benchmark trees, and the linear-vs-quadratic scaling
// harness.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "phylograd/alignment.hpp"
#include "phylograd/engine.hpp"
#include "phylograd/substitution.hpp"
#include "phylograd/tree.hpp"

namespace phylograd {

// Exact marginal likelihood by summing over every internal-state assignment.
// Cost m^(N-1) per pattern per category; guarded for small trees only.
inline double brute_force_log_likelihood(const Tree& tree, const SitePatternAlignment& alignment,
                                         const SubstitutionModel& model,
                                         const RateCategories& categories,
                                         const Eigen::VectorXd& branch_lengths) {
  const int n_tips = tree.tip_count;
  const int m = model.state_count();
  const int n_internal = n_tips - 1;
  if (n_tips > 6 || std::pow(double(m), n_internal) > 2e6)
    throw std::invalid_argument("brute force: tree too large to enumerate");
  if (branch_lengths.size() != tree.branch_count())
    throw std::invalid_argument("brute force: wrong branch length count");

  std::vector<int> tip_row(n_tips + 1, -1);
  for (int t = 1; t <= n_tips; ++t) {
    tip_row[t] = alignment.taxon_index(tree.labels[t]);
    if (tip_row[t] < 0) throw std::invalid_argument("brute force: unbound tip");
  }

  const int L = categories.count();
  std::vector<std::vector<Eigen::MatrixXd>> transition(tree.node_count() + 1);
  for (int i = 1; i <= tree.branch_count(); ++i)
    for (int l = 0; l < L; ++l)
      transition[i].push_back(model.transition_matrix(i, branch_lengths[i - 1], categories.rates[l]));

  double total = 0.0;
  std::vector<int> assign(n_internal, 0); // states of nodes n_tips+1 .. 2N-1
  for (int p = 0; p < alignment.pattern_count(); ++p) {
    double site = 0.0;
    for (int l = 0; l < L; ++l) {
      double category_sum = 0.0;
      std::fill(assign.begin(), assign.end(), 0);
      while (true) {
        auto state_of = [&](int node) { return assign[node - n_tips - 1]; };
        double term = model.root_distribution()[state_of(tree.root())];
        for (int node = n_tips + 1; node < tree.root() && term != 0.0; ++node)
          term *= transition[node][l](state_of(tree.parent[node]), state_of(node));
        for (int t = 1; t <= n_tips && term != 0.0; ++t) {
          const Eigen::MatrixXd& partials = alignment.tip_partials(tip_row[t]);
          term *= transition[t][l].row(state_of(tree.parent[t])).dot(partials.col(p));
        }
        category_sum += term;
        int d = 0;
        while (d < n_internal && ++assign[d] == m) assign[d++] = 0;
        if (d == n_internal) break;
      }
      site += categories.probs[l] * category_sum;
    }
    if (site <= 0.0) throw std::runtime_error("brute force: zero site likelihood");
    total += static_cast<double>(alignment.weights()[p]) * std::log(site);
  }
  return total;
}

// g_i = (f(x + h e_i) - f(x - h e_i)) / 2h; exactly 2 dim(x) evaluations.
template <class F>
inline Eigen::VectorXd finite_difference_gradient(F&& f, Eigen::VectorXd x, double h,
                                                  long* evaluations = nullptr) {
  Eigen::VectorXd g(x.size());
  long evals = 0;
  for (int i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    evals += 2;
    if (!std::isfinite(up) || !std::isfinite(down))
      throw std::runtime_error("finite difference: non-finite objective");
    g[i] = (up - down) / (2.0 * h);
  }
  if (evaluations) *evaluations += evals;
  return g;
}

template <class F>
inline Eigen::VectorXd finite_difference_hessian_diagonal(F&& f, Eigen::VectorXd x, double h,
                                                          long* evaluations = nullptr) {
  Eigen::VectorXd d(x.size());
  const double center = f(x);
  long evals = 1;
  for (int i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    evals += 2;
    d[i] = (up - 2.0 * center + down) / (h * h);
  }
  if (evaluations) *evaluations += evals;
  return d;
}

// Central-difference branch gradient in log space (the baseline method):
// returns d logL / d b by dividing out the log-transform chain factor.
inline Eigen::VectorXd fd_branch_gradient(LikelihoodEngine& engine, double h,
                                          long* evaluations = nullptr) {
  const Eigen::VectorXd saved = engine.branch_lengths();
  if ((saved.array() <= 0.0).any())
    throw std::invalid_argument("fd gradient: log-space differencing needs positive lengths");
  Eigen::VectorXd log_b = saved.array().log();
  auto objective = [&](const Eigen::VectorXd& x) {
    engine.set_branch_lengths(x.array().exp());
    return engine.log_likelihood();
  };
  Eigen::VectorXd g_log = finite_difference_gradient(objective, log_b, h, evaluations);
  engine.set_branch_lengths(saved);
  return (g_log.array() / saved.array()).matrix();
}

inline Eigen::VectorXd fd_branch_hessian_diagonal(LikelihoodEngine& engine, double h) {
  const Eigen::VectorXd saved = engine.branch_lengths();
  auto objective = [&](const Eigen::VectorXd& b) {
    engine.set_branch_lengths(b);
    return engine.log_likelihood();
  };
  Eigen::VectorXd d = finite_difference_hessian_diagonal(objective, saved, h);
  engine.set_branch_lengths(saved);
  return d;
}

// Random coalescent-shaped topology: contemporaneous tips, exponential
// waiting times between coalescences, total height rescaled to height_scale.
// Branch lengths are chronological durations (node times are attached).
inline Tree random_coalescent_tree(int tips, std::mt19937_64& rng, double height_scale = 0.5) {
  if (tips < 2) throw std::invalid_argument("coalescent tree: need >= 2 tips");
  const int n = 2 * tips - 1;
  Tree tree;
  tree.tip_count = tips;
  tree.labels.assign(n + 1, {});
  tree.parent.assign(n + 1, 0);
  tree.children.assign(n + 1, {0, 0});
  tree.branch_length.assign(n + 1, 0.0);
  for (int t = 1; t <= tips; ++t) tree.labels[t] = "t" + std::to_string(t);

  std::vector<int> active(tips);
  std::vector<double> height(n + 1, 0.0);
  for (int t = 0; t < tips; ++t) active[t] = t + 1;
  double clock = 0.0;
  std::exponential_distribution<double> exp_dist;
  for (int next = tips + 1; next <= n; ++next) {
    const int k = static_cast<int>(active.size());
    clock += exp_dist(rng) / (k * (k - 1) / 2.0);
    std::uniform_int_distribution<int> pick(0, k - 1);
    int a = pick(rng);
    int b = pick(rng);
    while (b == a) b = pick(rng);
    int left = active[a], right = active[b];
    if (a > b) std::swap(a, b);
    active.erase(active.begin() + b);
    active.erase(active.begin() + a);
    active.push_back(next);
    height[next] = clock;
    tree.children[next] = {left, right};
    tree.parent[left] = tree.parent[right] = next;
  }
  const double scale = height_scale / height[n];
  tree.node_time.assign(n + 1, 0.0);
  for (int i = 1; i <= n; ++i) tree.node_time[i] = (height[n] - height[i]) * scale;
  for (int i = 1; i < n; ++i)
    tree.branch_length[i] = tree.node_time[i] - tree.node_time[tree.parent[i]];
  rebuild_traversals(tree);
  validate_tree(tree);
  return tree;
}

// Worst case for depth-dependent methods: a fully unbalanced topology.
inline Tree caterpillar_tree(int tips, double branch) {
  std::string newick = "(t1:" + std::to_string(branch) + ",t2:" + std::to_string(branch) + ")";
  for (int t = 3; t <= tips; ++t)
    newick = "(" + newick + ":" + std::to_string(branch) + ",t" + std::to_string(t) + ":" +
             std::to_string(branch) + ")";
  return parse_newick(newick + ";");
}

struct BenchmarkRecord {
  int tips = 0;
  std::string method; // "analytic" or "finite_difference"
  double median_seconds = 0.0;
  std::uint64_t node_visits = 0; // per gradient evaluation
  long likelihood_evaluations = 0;
  int repetitions = 0;
  bool timer_warning = false; // median below 1 ms
};

struct ScalingSummary {
  std::vector<BenchmarkRecord> records;
  double analytic_exponent = 0.0;
  double fd_exponent = 0.0;
  std::vector<int> tip_counts;
  std::vector<double> speedup; // fd seconds / analytic seconds, per N
};

namespace detail {

template <class F>
inline double median_seconds(F&& run, int repetitions) {
  std::vector<double> times;
  times.reserve(repetitions);
  for (int r = 0; r < repetitions; ++r) {
    auto start = std::chrono::steady_clock::now();
    run();
    std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    times.push_back(elapsed.count());
  }
  std::sort(times.begin(), times.end());
  return times[times.size() / 2];
}

inline double loglog_slope(const std::vector<int>& n, const std::vector<double>& seconds) {
  const int k = static_cast<int>(n.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < k; ++i) {
    double x = std::log(double(n[i])), y = std::log(seconds[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (k * sxy - sx * sy) / (k * sxx - sx * sx);
}

} // namespace detail

// Times a full analytic gradient against the central finite-difference
// baseline on identical simulated workloads and fits log-log wall-time
// exponents.
inline ScalingSummary scaling_benchmark(const std::vector<int>& tip_counts, long sites,
                                        const SubstitutionModel& model,
                                        const RateCategories& categories, int repetitions,
                                        std::uint64_t seed, bool caterpillar = false) {
  ScalingSummary summary;
  summary.tip_counts = tip_counts;
  std::vector<double> analytic_times, fd_times;
  std::mt19937_64 rng(seed);

  for (int tips : tip_counts) {
    Tree tree = caterpillar ? caterpillar_tree(tips, 0.05) : random_coalescent_tree(tips, rng, 0.5);
    Eigen::VectorXd lengths(tree.branch_count());
    std::uniform_real_distribution<double> unif(0.02, 0.3);
    for (int i = 0; i < lengths.size(); ++i) lengths[i] = unif(rng);
    for (int i = 1; i <= tree.branch_count(); ++i) tree.branch_length[i] = lengths[i - 1];

    RawAlignment raw = simulate_alignment(tree, model, categories, lengths, sites, seed + tips);
    SitePatternAlignment alignment = SitePatternAlignment::compress(raw);
    LikelihoodEngine engine(tree, alignment, model, categories);

    BenchmarkRecord analytic;
    analytic.tips = tips;
    analytic.method = "analytic";
    analytic.repetitions = repetitions;
    engine.reset_node_visits();
    analytic.median_seconds = detail::median_seconds(
        [&] {
          engine.invalidate_caches(); // time the full two-traversal recompute
          engine.branch_gradient();
        },
        repetitions);
    analytic.node_visits = engine.node_visits() / repetitions;
    analytic.timer_warning = analytic.median_seconds < 1e-3;
    summary.records.push_back(analytic);

    BenchmarkRecord fd;
    fd.tips = tips;
    fd.method = "finite_difference";
    fd.repetitions = 1;
    long evals = 0;
    engine.reset_node_visits();
    fd.median_seconds = detail::median_seconds(
        [&] {
          evals = 0;
          fd_branch_gradient(engine, 1e-5, &evals);
        },
        1);
    fd.node_visits = engine.node_visits();
    fd.likelihood_evaluations = evals;
    fd.timer_warning = fd.median_seconds < 1e-3;
    summary.records.push_back(fd);

    analytic_times.push_back(analytic.median_seconds);
    fd_times.push_back(fd.median_seconds);
    summary.speedup.push_back(fd.median_seconds / analytic.median_seconds);
  }

  summary.analytic_exponent = detail::loglog_slope(tip_counts, analytic_times);
  summary.fd_exponent = detail::loglog_slope(tip_counts, fd_times);
  return summary;
}

} // namespace phylograd
