#pragma once

// CTMC substitution models: infinitesimal generators, root state distribution,
// transition probability matrices e^{Qb}, and discrete-gamma rate mixtures.
//
// No stationarity or reversibility is required of a generator/root-distribution
// pair. Named nucleotide models (JC69, HKY85, GTR) are reversible and are
// normalized so branch lengths measure expected substitutions per site.

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <boost/math/special_functions/gamma.hpp>

#include <cmath>
#include <stdexcept>
#include <unordered_map>
#include <vector>

namespace phylograd {

// Mean-one discrete rate mixture: sum_l probs[l] * rates[l] == 1.
struct RateCategories {
  Eigen::VectorXd rates;
  Eigen::VectorXd probs;

  int count() const { return static_cast<int>(rates.size()); }

  static RateCategories single() {
    RateCategories c;
    c.rates = Eigen::VectorXd::Ones(1);
    c.probs = Eigen::VectorXd::Ones(1);
    return c;
  }

  static RateCategories make(Eigen::VectorXd rates, Eigen::VectorXd probs) {
    if (rates.size() < 1 || rates.size() != probs.size())
      throw std::invalid_argument("rate categories: need L >= 1 matched rates/probs");
    if ((rates.array() <= 0.0).any())
      throw std::invalid_argument("rate categories: rates must be positive");
    if (std::abs(probs.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("rate categories: probabilities must sum to 1");
    double mean = rates.dot(probs);
    if (std::abs(mean - 1.0) > 1e-10)
      throw std::invalid_argument("rate categories: mixture mean must be 1");
    RateCategories c;
    c.rates = std::move(rates);
    c.probs = std::move(probs);
    return c;
  }
};

// L equiprobable categories with rates at the medians of the gamma(alpha,
// alpha) quantile bins, rescaled to mean one. Bin medians, not means.
inline RateCategories discrete_gamma_categories(double alpha, int count) {
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw std::invalid_argument("discrete gamma: alpha must be positive and finite");
  if (count < 1) throw std::invalid_argument("discrete gamma: need at least one category");
  if (count == 1) return RateCategories::single();
  Eigen::VectorXd rates(count);
  for (int l = 0; l < count; ++l) {
    double p = (2.0 * l + 1.0) / (2.0 * count);
    rates[l] = boost::math::gamma_p_inv(alpha, p) / alpha;
  }
  rates *= static_cast<double>(count) / rates.sum();
  return RateCategories::make(std::move(rates),
                              Eigen::VectorXd::Constant(count, 1.0 / count));
}

// Dense matrix exponential (scaling-and-squaring with a Pade approximant).
inline Eigen::MatrixXd matrix_exponential(const Eigen::MatrixXd& a) {
  if (!a.allFinite()) throw std::invalid_argument("matrix exponential: non-finite input");
  if (a.rows() != a.cols()) throw std::invalid_argument("matrix exponential: square input required");
  return a.exp();
}

class SubstitutionModel {
 public:
  // Raw constructor: q rows must sum to zero with nonnegative off-diagonals,
  // pi must be a probability vector. No normalization is applied here.
  SubstitutionModel(Eigen::MatrixXd q, Eigen::VectorXd pi, bool reversible)
      : state_count_(static_cast<int>(q.rows())),
        shared_q_(std::move(q)),
        root_distribution_(std::move(pi)),
        reversible_(reversible) {
    check_generator(shared_q_);
    if (root_distribution_.size() != state_count_)
      throw std::invalid_argument("model: pi length must match state count");
    if ((root_distribution_.array() < -1e-12).any() ||
        std::abs(root_distribution_.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("model: pi must be a probability vector");
    if (reversible_) build_eigen_cache();
  }

  static SubstitutionModel jc69() {
    return hky85(1.0, Eigen::Vector4d::Constant(0.25));
  }

  // kappa: transition/transversion rate ratio. State order A, C, G, T.
  static SubstitutionModel hky85(double kappa, const Eigen::Vector4d& freqs) {
    if (!(kappa > 0.0)) throw std::invalid_argument("hky85: kappa must be positive");
    Eigen::Matrix<double, 6, 1> exch;
    // Exchangeabilities in (AC, AG, AT, CG, CT, GT) order; AG and CT are the
    // transitions.
    exch << 1.0, kappa, 1.0, 1.0, kappa, 1.0;
    return gtr(exch, freqs);
  }

  static SubstitutionModel gtr(const Eigen::Matrix<double, 6, 1>& exchangeabilities,
                               const Eigen::Vector4d& freqs) {
    if ((exchangeabilities.array() <= 0.0).any())
      throw std::invalid_argument("gtr: exchangeabilities must be positive");
    check_frequencies(freqs);
    Eigen::MatrixXd q = Eigen::MatrixXd::Zero(4, 4);
    int e = 0;
    for (int i = 0; i < 4; ++i) {
      for (int j = i + 1; j < 4; ++j, ++e) {
        q(i, j) = exchangeabilities[e] * freqs[j];
        q(j, i) = exchangeabilities[e] * freqs[i];
      }
    }
    finish_generator(q, freqs);
    return SubstitutionModel(std::move(q), freqs, /*reversible=*/true);
  }

  int state_count() const { return state_count_; }
  const Eigen::VectorXd& root_distribution() const { return root_distribution_; }
  bool reversible() const { return reversible_; }
  bool homogeneous() const { return branch_q_.empty(); }

  const Eigen::MatrixXd& generator(int branch) const {
    auto it = branch_q_.find(branch);
    return it == branch_q_.end() ? shared_q_ : it->second;
  }

  // Non-homogeneous mode: attach a raw per-branch generator. The matrix is
  // validated but deliberately not renormalized.
  void set_branch_generator(int branch, Eigen::MatrixXd q) {
    if (q.rows() != state_count_ || q.cols() != state_count_)
      throw std::invalid_argument("branch generator: wrong dimensions");
    check_generator(q);
    branch_q_[branch] = std::move(q);
  }

  // P = e^{Q_branch * b * c}; row-stochastic with tiny negative entries
  // clamped to zero.
  Eigen::MatrixXd transition_matrix(int branch, double branch_len, double category_rate = 1.0) const {
    if (branch_len < 0.0) throw std::invalid_argument("transition matrix: negative branch length");
    if (!(category_rate > 0.0)) throw std::invalid_argument("transition matrix: category rate must be positive");
    const double t = branch_len * category_rate;
    if (t == 0.0) return Eigen::MatrixXd::Identity(state_count_, state_count_);
    Eigen::MatrixXd p;
    if (have_eigen_cache_ && branch_q_.find(branch) == branch_q_.end()) {
      p = eig_u_ * (eig_values_.array() * t).exp().matrix().asDiagonal() * eig_uinv_;
    } else {
      p = matrix_exponential(generator(branch) * t);
    }
    p = p.cwiseMax(0.0);
    return p;
  }

 private:
  static void check_frequencies(const Eigen::Vector4d& freqs) {
    if ((freqs.array() <= 0.0).any() || std::abs(freqs.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("frequencies must be positive and sum to 1");
  }

  static void check_generator(const Eigen::MatrixXd& q) {
    if (!q.allFinite()) throw std::invalid_argument("generator: non-finite entries");
    for (int i = 0; i < q.rows(); ++i) {
      double row = 0.0;
      for (int j = 0; j < q.cols(); ++j) {
        if (i != j && q(i, j) < 0.0)
          throw std::invalid_argument("generator: negative off-diagonal entry");
        row += q(i, j);
      }
      if (std::abs(row) > 1e-12)
        throw std::invalid_argument("generator: rows must sum to zero");
    }
  }

  // Set diagonals and normalize so the expected substitution rate at pi is 1.
  static void finish_generator(Eigen::MatrixXd& q, const Eigen::VectorXd& pi) {
    for (int i = 0; i < q.rows(); ++i) {
      q(i, i) = 0.0;
      q(i, i) = -q.row(i).sum();
    }
    double rate = 0.0;
    for (int i = 0; i < q.rows(); ++i) rate -= pi[i] * q(i, i);
    q /= rate;
  }

  // Reversible path: D^{1/2} Q D^{-1/2} is symmetric for D = diag(pi), so
  // P(t) = U exp(Lambda t) U^{-1} with U = D^{-1/2} V from a self-adjoint
  // eigendecomposition.
  void build_eigen_cache() {
    if ((root_distribution_.array() <= 0.0).any()) return; // fall back to expm
    Eigen::VectorXd sqrt_pi = root_distribution_.array().sqrt();
    Eigen::MatrixXd sym = sqrt_pi.asDiagonal() * shared_q_ *
                          sqrt_pi.cwiseInverse().asDiagonal();
    sym = 0.5 * (sym + sym.transpose()); // symmetrize away rounding
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(sym);
    if (solver.info() != Eigen::Success) return;
    eig_values_ = solver.eigenvalues();
    eig_u_ = sqrt_pi.cwiseInverse().asDiagonal() * solver.eigenvectors();
    eig_uinv_ = solver.eigenvectors().transpose() * sqrt_pi.asDiagonal();
    have_eigen_cache_ = true;
  }

  int state_count_;
  Eigen::MatrixXd shared_q_;
  Eigen::VectorXd root_distribution_;
  bool reversible_ = false;
  std::unordered_map<int, Eigen::MatrixXd> branch_q_;

  bool have_eigen_cache_ = false;
  Eigen::VectorXd eig_values_;
  Eigen::MatrixXd eig_u_, eig_uinv_;
};

} // namespace phylograd
