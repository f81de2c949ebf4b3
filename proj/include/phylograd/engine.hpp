#pragma once

// Likelihood engine: post-order partial vectors give the observed-data
// likelihood; a complementary pre-order pass yields the gradient with respect
// to every branch length (and the Hessian diagonal) in one traversal, so a
// full gradient costs two traversals total regardless of dimension.
//
// Partials are stored per (node, category) as m x pattern matrices. Underflow
// is controlled by per-node, per-pattern max-rescaling with accumulated log
// scalers, tracked separately for the two passes so their product cancels in
// likelihood ratios.
//
// Threading: one engine belongs to one evaluation context at a time. Distinct
// (pattern, category) blocks never interact within a traversal step, so they
// could be split across workers under a deterministic reduction order; the
// shipped implementation keeps traversals single-threaded and parallelizes
// across chains instead.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "phylograd/alignment.hpp"
#include "phylograd/substitution.hpp"
#include "phylograd/tree.hpp"

namespace phylograd {

struct EngineOptions {
  double rescaling_threshold = 1e-150;
  bool force_rescaling = false;   // rescale at every internal visit
  bool disable_rescaling = false; // never rescale (testing only)
};

struct GradientReport {
  double log_likelihood = 0.0;
  Eigen::VectorXd branch_gradient;  // entry node-1 for branch node, node = 1..2N-2
  Eigen::VectorXd hessian_diagonal; // empty unless requested
  int pattern_count = 0;
  int category_count = 0;
};

class LikelihoodEngine {
 public:
  LikelihoodEngine(const Tree& tree, const SitePatternAlignment& alignment,
                   const SubstitutionModel& model, RateCategories categories,
                   EngineOptions options = {})
      : tree_(tree),
        alignment_(alignment),
        model_(model),
        categories_(std::move(categories)),
        options_(options) {
    const int m = model_.state_count();
    if (alignment_.state_count() != m)
      throw std::invalid_argument("engine: alignment/model state counts differ");

    if (static_cast<int>(alignment_.taxa().size()) != tree_.tip_count)
      throw std::invalid_argument(
          "engine: alignment must carry exactly one record per tree tip");
    tip_partials_.assign(tree_.tip_count + 1, nullptr);
    tip_codes_.resize(tree_.tip_count + 1);
    for (int t = 1; t <= tree_.tip_count; ++t) {
      int row = alignment_.taxon_index(tree_.labels[t]);
      if (row < 0)
        throw std::invalid_argument("engine: tree tip '" + tree_.labels[t] +
                                    "' not found in alignment");
      tip_partials_[t] = &alignment_.tip_partials(row);
      // unit-indicator columns admit a gather instead of a matrix product
      const Eigen::MatrixXd& partials = *tip_partials_[t];
      tip_codes_[t].assign(partials.cols(), -1);
      for (int s = 0; s < partials.cols(); ++s) {
        int index = -1;
        if (partials.col(s).sum() == 1.0 && partials.col(s).maxCoeff(&index) == 1.0)
          tip_codes_[t][s] = index;
      }
    }

    const int nodes = tree_.node_count();
    const int L = categories_.count();
    const int patterns = alignment_.pattern_count();
    auto empty_grid = [&] {
      return std::vector<std::vector<Eigen::MatrixXd>>(nodes + 1,
                                                       std::vector<Eigen::MatrixXd>(L));
    };
    post_ = empty_grid();
    pre_ = empty_grid();
    edge_ = empty_grid();
    trans_ = empty_grid();
    for (int node = 1; node <= nodes; ++node) {
      for (int l = 0; l < L; ++l) {
        if (!tree_.is_tip(node)) post_[node][l].resize(m, patterns);
        pre_[node][l].resize(m, patterns);
        if (node != tree_.root()) edge_[node][l].resize(m, patterns);
      }
    }
    scaler_post_.assign(nodes + 1, Eigen::ArrayXd::Zero(patterns));
    scaler_pre_.assign(nodes + 1, Eigen::ArrayXd::Zero(patterns));
    site_log_likelihood_ = Eigen::ArrayXd::Zero(patterns);
    weights_ = Eigen::ArrayXd(patterns);
    for (int p = 0; p < patterns; ++p) weights_[p] = static_cast<double>(alignment_.weights()[p]);

    branch_lengths_ = Eigen::VectorXd::Zero(tree_.branch_count());
    for (int i = 1; i <= tree_.branch_count(); ++i) branch_lengths_[i - 1] = tree_.branch_length[i];

    shared_q2_ = model_.generator(0) * model_.generator(0);
  }

  const Tree& tree() const { return tree_; }
  const RateCategories& categories() const { return categories_; }
  const Eigen::VectorXd& branch_lengths() const { return branch_lengths_; }

  void set_branch_lengths(const Eigen::VectorXd& lengths) {
    if (lengths.size() != branch_lengths_.size())
      throw std::invalid_argument("engine: branch length vector has wrong size");
    if (!lengths.allFinite() || (lengths.array() < 0.0).any())
      throw std::invalid_argument("engine: branch lengths must be finite and nonnegative");
    if ((lengths.array() == branch_lengths_.array()).all()) return; // caches stay valid
    branch_lengths_ = lengths;
    post_valid_ = pre_valid_ = hessian_valid_ = loglik_valid_ = false;
  }

  std::uint64_t node_visits() const { return node_visits_; }
  void reset_node_visits() { node_visits_ = 0; }

  // Benchmark instrumentation: force the next evaluation to recompute.
  void invalidate_caches() { post_valid_ = pre_valid_ = hessian_valid_ = loglik_valid_ = false; }

  // Read access to the current partial buffers (valid after the respective
  // pass; scaled by exp(scaler) per pattern).
  const Eigen::MatrixXd& post_partial(int node, int category) const {
    return post_matrix(node, category);
  }
  const Eigen::MatrixXd& pre_partial(int node, int category) const {
    return pre_[node][category];
  }
  const Eigen::ArrayXd& post_scaler(int node) const { return scaler_post_[node]; }
  const Eigen::ArrayXd& pre_scaler(int node) const { return scaler_pre_[node]; }

  // Likelihood-only evaluations run over a small reusable buffer pool (cache
  // resident for reasonable traversal orders) rather than the per-node cache;
  // the full post-order cache is built only when a gradient pass needs it.
  double log_likelihood() {
    if (!loglik_valid_) scratch_likelihood_pass();
    return log_likelihood_;
  }

  GradientReport branch_gradient(bool with_hessian_diagonal = false) {
    post_order_pass();
    if (!pre_valid_ || (with_hessian_diagonal && !hessian_valid_))
      pre_order_pass(with_hessian_diagonal);
    GradientReport report;
    report.log_likelihood = log_likelihood_;
    report.branch_gradient = gradient_;
    if (with_hessian_diagonal) report.hessian_diagonal = hessian_diagonal_;
    report.pattern_count = alignment_.pattern_count();
    report.category_count = categories_.count();
    return report;
  }

  Eigen::VectorXd hessian_diagonal() { return branch_gradient(true).hessian_diagonal; }

  // Likelihood recomputed from the inner product at an arbitrary node; must
  // agree with the root value. Exposed for cross-checks.
  double log_likelihood_at_node(int node) {
    post_order_pass();
    if (!pre_valid_) pre_order_pass(false);
    const int patterns = alignment_.pattern_count();
    double total = 0.0;
    for (int s = 0; s < patterns; ++s) {
      double mix = 0.0;
      for (int l = 0; l < categories_.count(); ++l)
        mix += categories_.probs[l] * post_matrix(node, l).col(s).dot(pre_[node][l].col(s));
      total += weights_[s] * (std::log(mix) + scaler_post_[node][s] + scaler_pre_[node][s]);
    }
    return total;
  }

  void post_order_pass() {
    if (post_valid_) return;
    const int L = categories_.count();
    const Eigen::VectorXd& pi = model_.root_distribution();

    for (int node : tree_.post_order) {
      ++node_visits_;
      if (!tree_.is_tip(node)) {
        const int c0 = tree_.children[node][0], c1 = tree_.children[node][1];
        for (int l = 0; l < L; ++l) post_[node][l] = edge_[c0][l].cwiseProduct(edge_[c1][l]);
        scaler_post_[node] = scaler_post_[c0] + scaler_post_[c1];
        rescale(post_[node], scaler_post_[node]);
      } else {
        scaler_post_[node].setZero();
      }
      if (node != tree_.root()) {
        const double b = branch_lengths_[node - 1];
        for (int l = 0; l < L; ++l) {
          trans_[node][l] = model_.transition_matrix(node, b, categories_.rates[l]);
          compute_edge(node, l);
        }
      }
    }

    const int root = tree_.root();
    log_likelihood_ = 0.0;
    for (int s = 0; s < alignment_.pattern_count(); ++s) {
      double mix = 0.0;
      for (int l = 0; l < L; ++l) mix += categories_.probs[l] * pi.dot(post_[root][l].col(s));
      if (!std::isfinite(mix))
        throw std::runtime_error("engine: non-finite partial at pattern " + std::to_string(s));
      if (mix <= 0.0)
        throw std::runtime_error("engine: site likelihood underflowed to zero at pattern " +
                                 std::to_string(s));
      site_log_likelihood_[s] = std::log(mix) + scaler_post_[root][s];
      log_likelihood_ += weights_[s] * site_log_likelihood_[s];
    }
    post_valid_ = loglik_valid_ = true;
    pre_valid_ = hessian_valid_ = false;
  }

  // Pre-order traversal; gradient accumulation is fused into the same sweep,
  // optionally with the Q^2 pass for the Hessian diagonal.
  void pre_order_pass(bool with_hessian_diagonal = false) {
    if (!post_valid_)
      throw std::logic_error("engine: pre-order pass requires a current post-order pass");
    const int L = categories_.count();
    const int m = model_.state_count();
    const int patterns = alignment_.pattern_count();
    const Eigen::VectorXd& pi = model_.root_distribution();

    gradient_ = Eigen::VectorXd::Zero(tree_.branch_count());
    if (with_hessian_diagonal) hessian_diagonal_ = Eigen::VectorXd::Zero(tree_.branch_count());

    Eigen::MatrixXd buffer(m, patterns), qp(m, patterns);
    Eigen::ArrayXd u1(patterns), u2(patterns), ratio1(patterns);

    for (int node : tree_.pre_order) {
      ++node_visits_;
      if (node == tree_.root()) {
        for (int l = 0; l < L; ++l) pre_[node][l].colwise() = pi;
        scaler_pre_[node].setZero();
        continue;
      }
      const int parent = tree_.parent[node];
      const int sibling = tree_.sibling(node);
      for (int l = 0; l < L; ++l) {
        buffer = pre_[parent][l].cwiseProduct(edge_[sibling][l]);
        pre_[node][l].noalias() = trans_[node][l].transpose() * buffer;
      }
      scaler_pre_[node] = scaler_pre_[parent] + scaler_post_[sibling];
      rescale(pre_[node], scaler_pre_[node]);

      // Eq. sums: u1 = sum_l c_l Pr(c_l) (Q p)'q, u2 likewise with Q^2, c^2.
      u1.setZero();
      if (with_hessian_diagonal) u2.setZero();
      for (int l = 0; l < L; ++l) {
        const double cl = categories_.rates[l], wl = categories_.probs[l];
        qp.noalias() = generator_for(node) * post_matrix(node, l);
        u1 += (cl * wl) * qp.cwiseProduct(pre_[node][l]).colwise().sum().transpose().array();
        if (with_hessian_diagonal) {
          qp.noalias() = q2_for(node) * post_matrix(node, l);
          u2 += (cl * cl * wl) * qp.cwiseProduct(pre_[node][l]).colwise().sum().transpose().array();
        }
      }
      ratio1 = u1 * (scaler_post_[node] + scaler_pre_[node] - site_log_likelihood_).exp();
      gradient_[node - 1] = (weights_ * ratio1).sum();
      if (with_hessian_diagonal) {
        // Second derivative aggregated per site: sum_s w_s (u2/L_s - (u1/L_s)^2).
        Eigen::ArrayXd ratio2 =
            u2 * (scaler_post_[node] + scaler_pre_[node] - site_log_likelihood_).exp();
        hessian_diagonal_[node - 1] = (weights_ * (ratio2 - ratio1.square())).sum();
      }
    }
    pre_valid_ = true;
    hessian_valid_ = with_hessian_diagonal;
  }

 private:
  // Pruning over a slot pool keyed by node: a slot holds the per-category
  // buffers of one computed-but-unconsumed edge message. The same traversal,
  // rescaling policy and arithmetic as the cached pass, so values coincide.
  void scratch_likelihood_pass() {
    const int L = categories_.count();
    const int m = model_.state_count();
    const int patterns = alignment_.pattern_count();
    const Eigen::VectorXd& pi = model_.root_distribution();

    std::vector<int> slot_of(tree_.node_count() + 1, -1);
    std::vector<int> free_slots;
    auto acquire = [&] {
      if (!free_slots.empty()) {
        int slot = free_slots.back();
        free_slots.pop_back();
        return slot;
      }
      scratch_.emplace_back(L, Eigen::MatrixXd(m, patterns));
      scratch_scaler_.emplace_back(patterns);
      return static_cast<int>(scratch_.size()) - 1;
    };

    Eigen::MatrixXd trans(m, m);
    if (scratch_tmp_.rows() != m || scratch_tmp_.cols() != patterns)
      scratch_tmp_.resize(m, patterns);
    int root_slot = -1;

    for (int node : tree_.post_order) {
      ++node_visits_;
      if (tree_.is_tip(node)) {
        const int slot = acquire();
        slot_of[node] = slot;
        scratch_scaler_[slot].setZero();
        const double b = branch_lengths_[node - 1];
        const std::vector<int>& codes = tip_codes_[node];
        const Eigen::MatrixXd& partials = *tip_partials_[node];
        for (int l = 0; l < L; ++l) {
          trans = model_.transition_matrix(node, b, categories_.rates[l]);
          Eigen::MatrixXd& edge = scratch_[slot][l];
          for (int s = 0; s < patterns; ++s) {
            if (codes[s] >= 0)
              edge.col(s) = trans.col(codes[s]);
            else
              edge.col(s).noalias() = trans * partials.col(s);
          }
        }
        continue;
      }
      const int left = slot_of[tree_.children[node][0]];
      const int right = slot_of[tree_.children[node][1]];
      for (int l = 0; l < L; ++l) scratch_[left][l] = scratch_[left][l].cwiseProduct(scratch_[right][l]);
      scratch_scaler_[left] += scratch_scaler_[right];
      free_slots.push_back(right);
      slot_of[node] = left;
      rescale(scratch_[left], scratch_scaler_[left]);
      if (node != tree_.root()) {
        const double b = branch_lengths_[node - 1];
        for (int l = 0; l < L; ++l) {
          trans = model_.transition_matrix(node, b, categories_.rates[l]);
          scratch_tmp_.noalias() = trans * scratch_[left][l];
          scratch_[left][l].swap(scratch_tmp_);
        }
      } else {
        root_slot = left;
      }
    }

    log_likelihood_ = 0.0;
    for (int s = 0; s < patterns; ++s) {
      double mix = 0.0;
      for (int l = 0; l < L; ++l) mix += categories_.probs[l] * pi.dot(scratch_[root_slot][l].col(s));
      if (!std::isfinite(mix))
        throw std::runtime_error("engine: non-finite partial at pattern " + std::to_string(s));
      if (mix <= 0.0)
        throw std::runtime_error("engine: site likelihood underflowed to zero at pattern " +
                                 std::to_string(s));
      site_log_likelihood_[s] = std::log(mix) + scratch_scaler_[root_slot][s];
      log_likelihood_ += weights_[s] * site_log_likelihood_[s];
    }
    loglik_valid_ = true; // the per-node cache is deliberately left stale
  }

  const Eigen::MatrixXd& post_matrix(int node, int category) const {
    return tree_.is_tip(node) ? *tip_partials_[node] : post_[node][category];
  }

  void compute_edge(int node, int category) {
    const Eigen::MatrixXd& trans = trans_[node][category];
    Eigen::MatrixXd& edge = edge_[node][category];
    if (!tree_.is_tip(node)) {
      edge.noalias() = trans * post_[node][category];
      return;
    }
    const std::vector<int>& codes = tip_codes_[node];
    const Eigen::MatrixXd& partials = *tip_partials_[node];
    for (int s = 0; s < edge.cols(); ++s) {
      if (codes[s] >= 0)
        edge.col(s) = trans.col(codes[s]);
      else
        edge.col(s).noalias() = trans * partials.col(s);
    }
  }

  const Eigen::MatrixXd& generator_for(int node) const { return model_.generator(node); }

  const Eigen::MatrixXd& q2_for(int node) {
    if (model_.homogeneous()) return shared_q2_;
    auto it = q2_cache_.find(node);
    if (it == q2_cache_.end()) {
      const Eigen::MatrixXd& q = model_.generator(node);
      it = q2_cache_.emplace(node, q * q).first;
    }
    return it->second;
  }

  void rescale(std::vector<Eigen::MatrixXd>& partials, Eigen::ArrayXd& scaler) {
    if (options_.disable_rescaling) return;
    const int L = static_cast<int>(partials.size());
    const int patterns = static_cast<int>(partials[0].cols());
    peak_buffer_ = partials[0].colwise().maxCoeff().transpose().array();
    for (int l = 1; l < L; ++l)
      peak_buffer_ = peak_buffer_.max(partials[l].colwise().maxCoeff().transpose().array());
    if (!options_.force_rescaling &&
        (peak_buffer_ >= options_.rescaling_threshold || peak_buffer_ <= 0.0).all())
      return; // common case: nothing underflowed
    for (int s = 0; s < patterns; ++s) {
      const double peak = peak_buffer_[s];
      if (peak <= 0.0) continue; // impossible pattern; reported at the root
      if (options_.force_rescaling || peak < options_.rescaling_threshold) {
        for (int l = 0; l < L; ++l) partials[l].col(s) /= peak;
        scaler[s] += std::log(peak);
      }
    }
  }

  const Tree& tree_;
  const SitePatternAlignment& alignment_;
  const SubstitutionModel& model_;
  RateCategories categories_;
  EngineOptions options_;

  std::vector<const Eigen::MatrixXd*> tip_partials_;
  std::vector<std::vector<int>> tip_codes_; // per tip: state index or -1 if ambiguous
  std::vector<std::vector<Eigen::MatrixXd>> post_, pre_, edge_, trans_;
  std::vector<Eigen::ArrayXd> scaler_post_, scaler_pre_;
  Eigen::ArrayXd site_log_likelihood_, weights_, peak_buffer_;
  Eigen::VectorXd branch_lengths_, gradient_, hessian_diagonal_;
  Eigen::MatrixXd shared_q2_;
  std::unordered_map<int, Eigen::MatrixXd> q2_cache_;

  std::vector<std::vector<Eigen::MatrixXd>> scratch_; // slot -> per-category buffers
  std::vector<Eigen::ArrayXd> scratch_scaler_;
  Eigen::MatrixXd scratch_tmp_;

  double log_likelihood_ = 0.0;
  bool post_valid_ = false, pre_valid_ = false, hessian_valid_ = false, loglik_valid_ = false;
  std::uint64_t node_visits_ = 0;
};

} // namespace phylograd
