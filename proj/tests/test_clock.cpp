#include <catch2/catch.hpp>

#include <random>

#include "phylograd/clock.hpp"
#include "phylograd/engine.hpp"
#include "phylograd/validation.hpp"
#include "testutil.hpp"

using namespace phylograd;

namespace {

struct ClockFixture {
  Tree tree;
  SubstitutionModel model = SubstitutionModel::jc69();
  RateCategories cats = RateCategories::single();
  SitePatternAlignment alignment;
  ClockParameterization truth;

  explicit ClockFixture(int tips, std::uint64_t seed, long sites = 80) {
    std::mt19937_64 rng(seed);
    tree = random_coalescent_tree(tips, rng, 0.6);
    truth.mu = 0.8;
    truth.psi = 0.5;
    auto hyper = lognormal_hyperparams(truth.psi);
    std::normal_distribution<double> normal;
    truth.epsilon.resize(tree.branch_count());
    for (int i = 0; i < truth.epsilon.size(); ++i)
      truth.epsilon[i] = std::exp(hyper.location + hyper.scale * normal(rng));
    Eigen::VectorXd lengths = branch_lengths_from_clock(tree, truth);
    alignment = SitePatternAlignment::compress(
        simulate_alignment(tree, model, cats, lengths, sites, seed + 1));
  }
};

} // namespace

TEST_CASE("lognormal hyperparameters give mean one and variance psi^2") {
  auto zero = lognormal_hyperparams(0.0);
  CHECK(zero.location == 0.0);
  CHECK(zero.scale == 0.0);

  auto unit = lognormal_hyperparams(std::sqrt(std::exp(1.0) - 1.0));
  CHECK(unit.scale * unit.scale == Approx(1.0).margin(1e-14));
  CHECK(unit.location == Approx(-0.5).margin(1e-14));

  // Monte Carlo check of the moments
  for (double psi : {0.3, 1.1}) {
    auto hyper = lognormal_hyperparams(psi);
    std::mt19937_64 rng(17);
    std::normal_distribution<double> normal;
    const long draws = 1000000;
    double sum = 0.0, sum2 = 0.0;
    for (long d = 0; d < draws; ++d) {
      double eps = std::exp(hyper.location + hyper.scale * normal(rng));
      sum += eps;
      sum2 += eps * eps;
    }
    const double mean = sum / draws;
    const double var = sum2 / draws - mean * mean;
    // se of the mean is sqrt(var/n); se of the variance is approximated from
    // the fourth moment of the lognormal, loose bound 3x is plenty
    const double se_mean = std::sqrt(var / draws);
    CHECK(std::abs(mean - 1.0) < 3.0 * se_mean);
    const double rel_var_error = std::abs(var - psi * psi) / (psi * psi);
    CHECK(rel_var_error < 0.05);
  }
  CHECK_THROWS_AS(lognormal_hyperparams(-0.1), std::invalid_argument);
}

TEST_CASE("epsilon prior density integrates to one") {
  for (double psi : {0.1, 0.5, 1.3}) {
    auto hyper = lognormal_hyperparams(psi);
    const double s2 = hyper.scale * hyper.scale;
    auto density = [&](double eps) {
      const double z = std::log(eps);
      return std::exp(-(z - hyper.location) * (z - hyper.location) / (2.0 * s2)) /
             (eps * hyper.scale * std::sqrt(2.0 * std::numbers::pi));
    };
    // Simpson on a log grid wide enough to capture all mass
    const double lo = hyper.location - 12.0 * hyper.scale, hi = hyper.location + 12.0 * hyper.scale;
    const int intervals = 20000;
    const double step = (hi - lo) / intervals;
    double integral = 0.0;
    for (int k = 0; k <= intervals; ++k) {
      const double z = lo + k * step;
      const double weight = (k == 0 || k == intervals) ? 1.0 : (k % 2 ? 4.0 : 2.0);
      integral += weight * density(std::exp(z)) * std::exp(z); // du = e^z dz
    }
    integral *= step / 3.0;
    CHECK(integral == Approx(1.0).margin(1e-6));
  }
}

TEST_CASE("branch lengths from the clock") {
  std::mt19937_64 rng(5);
  Tree tree = random_coalescent_tree(6, rng, 0.4);
  ClockParameterization clock;
  clock.mu = 1.0;
  clock.psi = 0.0;
  clock.epsilon = Eigen::VectorXd::Ones(tree.branch_count());

  // strict clock reproduces the chronological durations
  Eigen::VectorXd lengths = branch_lengths_from_clock(tree, clock);
  for (int i = 1; i <= tree.branch_count(); ++i)
    CHECK(lengths[i - 1] == Approx(tree.node_time[i] - tree.node_time[tree.parent[i]]));

  clock.mu = 2.0;
  CHECK(branch_lengths_from_clock(tree, clock).isApprox(2.0 * lengths, 1e-15));

  // plausible magnitude: 5.67e-4 subst/site/year over a 10-year branch
  Tree pair = parse_newick("(A:10,B:10);");
  assign_times_from_branch_lengths(pair);
  ClockParameterization viral;
  viral.mu = 5.67e-4;
  viral.psi = 0.0;
  viral.epsilon = Eigen::VectorXd::Ones(2);
  CHECK(branch_lengths_from_clock(pair, viral)[0] == Approx(5.67e-3).epsilon(1e-12));

  Tree untimed = parse_newick("(A:0.1,B:0.2);");
  CHECK_THROWS_WITH(branch_lengths_from_clock(untimed, viral), Catch::Contains("node times"));
}

TEST_CASE("unconstrained transform round trips") {
  ClockFixture fix(8, 21);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  RelaxedClockPosterior posterior(engine, {});
  Eigen::VectorXd x = posterior.to_unconstrained(fix.truth);
  ClockParameterization back = posterior.from_unconstrained(x);
  CHECK(back.mu == Approx(fix.truth.mu).epsilon(1e-14));
  CHECK(back.psi == Approx(fix.truth.psi).epsilon(1e-14));
  CHECK(back.epsilon.isApprox(fix.truth.epsilon, 1e-14));
  Eigen::VectorXd x2 = posterior.to_unconstrained(back);
  CHECK((x - x2).lpNorm<Eigen::Infinity>() < 1e-14);
}

TEST_CASE("flat-testing profile reduces the posterior to the likelihood") {
  ClockFixture fix(6, 33);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  ClockPriors priors;
  priors.flat_testing = true;
  RelaxedClockPosterior posterior(engine, priors);
  Eigen::VectorXd x = posterior.to_unconstrained(fix.truth);
  const double value = posterior.log_posterior(x);
  engine.set_branch_lengths(branch_lengths_from_clock(fix.tree, fix.truth));
  CHECK(value == Approx(engine.log_likelihood()).epsilon(1e-14));
}

TEST_CASE("strict profile factorizes into likelihood and mu prior") {
  ClockFixture fix(6, 41);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  ClockPriors priors;
  priors.mu.kind = MuPrior::lognormal;
  priors.mu.location = std::log(0.8);
  priors.mu.scale = 0.7;
  RelaxedClockPosterior posterior(engine, priors, true, /*strict_clock=*/true);
  CHECK(posterior.dimension() == 1);

  auto loglik_at = [&](double mu) {
    ClockParameterization clock;
    clock.mu = mu;
    clock.psi = 0.0;
    clock.epsilon = Eigen::VectorXd::Ones(fix.tree.branch_count());
    engine.set_branch_lengths(branch_lengths_from_clock(fix.tree, clock));
    return engine.log_likelihood();
  };
  Eigen::VectorXd xa(1), xb(1);
  xa << std::log(0.6);
  xb << std::log(1.1);
  const double posterior_ratio = posterior.log_posterior(xa) - posterior.log_posterior(xb);
  const double likelihood_ratio = loglik_at(0.6) - loglik_at(1.1);
  auto normal_log = [&](double x) {
    const double d = x - priors.mu.location;
    return -d * d / (2.0 * priors.mu.scale * priors.mu.scale);
  };
  const double prior_ratio = normal_log(xa[0]) - normal_log(xb[0]);
  CHECK(posterior_ratio == Approx(likelihood_ratio + prior_ratio).margin(1e-10));
}

TEST_CASE("mu gradient equals the sum of epsilon gradients for the likelihood part") {
  ClockFixture fix(10, 55);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  ClockPriors priors;
  priors.flat_testing = true; // isolate the likelihood part
  RelaxedClockPosterior posterior(engine, priors);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 10; ++trial) {
    Eigen::VectorXd x(posterior.dimension());
    for (int i = 0; i < x.size(); ++i) x[i] = 0.3 * normal(rng);
    x[0] -= 0.5;
    Eigen::VectorXd g = posterior.gradient(x);
    CHECK(g[0] == Approx(g.tail(fix.tree.branch_count()).sum()).epsilon(1e-12).margin(1e-12));
  }
}

TEST_CASE("unconstrained gradient matches finite differences over random states") {
  ClockFixture fix(7, 70, 60);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  ClockPriors priors; // flat-log mu, Exp(3) psi, hierarchical epsilon
  RelaxedClockPosterior posterior(engine, priors);
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::VectorXd x(posterior.dimension());
    x[0] = -0.4 + 0.4 * normal(rng);
    x[1] = -0.8 + 0.3 * normal(rng);
    for (int i = 2; i < x.size(); ++i) x[i] = 0.4 * normal(rng);
    Eigen::VectorXd analytic = posterior.gradient(x);
    Eigen::VectorXd fd = finite_difference_gradient(
        [&](const Eigen::VectorXd& state) { return posterior.log_posterior(state); }, x, 1e-5);
    for (int i = 0; i < x.size(); ++i) {
      if (std::abs(analytic[i]) < 1e-8)
        CHECK(std::abs(analytic[i] - fd[i]) < 1e-8 + 1e-5 * std::abs(fd[i]));
      else
        CHECK(analytic[i] == Approx(fd[i]).epsilon(1e-5));
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("gradient with lognormal mu prior and non-default priors") {
  ClockFixture fix(5, 81, 40);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  ClockPriors priors;
  priors.mu.kind = MuPrior::lognormal;
  priors.mu.location = -0.2;
  priors.mu.scale = 0.9;
  priors.psi_exponential_rate = 2.0;
  RelaxedClockPosterior posterior(engine, priors);
  Eigen::VectorXd x = posterior.to_unconstrained(fix.truth);
  Eigen::VectorXd analytic = posterior.gradient(x);
  Eigen::VectorXd fd = finite_difference_gradient(
      [&](const Eigen::VectorXd& state) { return posterior.log_posterior(state); }, x, 1e-5);
  for (int i = 0; i < x.size(); ++i)
    CHECK(analytic[i] == Approx(fd[i]).epsilon(1e-5).margin(1e-8));
}

TEST_CASE("negative hessian diagonal matches finite differences away from mu") {
  ClockFixture fix(6, 93, 50);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  RelaxedClockPosterior posterior(engine, {});
  Eigen::VectorXd x = posterior.to_unconstrained(fix.truth);
  Eigen::VectorXd analytic = posterior.negative_hessian_diagonal(x);
  Eigen::VectorXd fd = -finite_difference_hessian_diagonal(
      [&](const Eigen::VectorXd& state) { return posterior.log_posterior(state); }, x, 1e-4);
  // branch-effect coordinates: exact diagonal identity; psi: prior curvature is exact
  for (int i = 1; i < x.size(); ++i)
    CHECK(analytic[i] == Approx(fd[i]).epsilon(1e-3).margin(1e-4));
  // mu is a preconditioner approximation: the per-branch diagonal curvatures
  // summed (cross-branch terms dropped), plus a flat prior contributing zero
  const double v = std::log1p(fix.truth.psi * fix.truth.psi);
  const double rate_likelihood_sum = (analytic.tail(fix.tree.branch_count()).array() - 1.0 / v).sum();
  CHECK(analytic[0] == Approx(rate_likelihood_sum).epsilon(1e-12));
}

TEST_CASE("node time gradient matches finite differences") {
  ClockFixture fix(7, 104, 60);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  RelaxedClockPosterior posterior(engine, {});
  Eigen::VectorXd analytic = posterior.node_time_gradient(fix.truth);

  Tree& tree = fix.tree;
  const int internal_count = tree.tip_count - 1;
  for (int k = 0; k < internal_count; ++k) {
    const int node = tree.tip_count + 1 + k;
    const double h = 1e-6;
    auto eval_at = [&](double shift) {
      Tree perturbed = tree;
      perturbed.node_time[node] += shift;
      LikelihoodEngine local(perturbed, fix.alignment, fix.model, fix.cats);
      local.set_branch_lengths(branch_lengths_from_clock(perturbed, fix.truth));
      return local.log_likelihood();
    };
    const double fd = (eval_at(h) - eval_at(-h)) / (2.0 * h);
    CHECK(analytic[k] == Approx(fd).epsilon(1e-6).margin(1e-6));
  }

  // near-zero rates silence the children terms
  ClockParameterization muted = fix.truth;
  const int root_child = tree.children[tree.root()][0];
  if (root_child > tree.tip_count) {
    for (int child : tree.children[root_child]) muted.epsilon[child - 1] = 1e-12;
    Eigen::VectorXd g = posterior.node_time_gradient(muted);
    // only the node's own branch term survives
    engine.set_branch_lengths(branch_lengths_from_clock(tree, muted));
    auto report = engine.branch_gradient();
    const double own = muted.mu * muted.epsilon[root_child - 1] *
                       report.branch_gradient[root_child - 1];
    CHECK(g[root_child - tree.tip_count - 1] == Approx(own).margin(1e-6));
  }
}

TEST_CASE("posterior rejects unevaluable states and reports bad dimensions") {
  ClockFixture fix(5, 117, 30);
  LikelihoodEngine engine(fix.tree, fix.alignment, fix.model, fix.cats);
  RelaxedClockPosterior posterior(engine, {});
  Eigen::VectorXd x = posterior.to_unconstrained(fix.truth);
  x[1] = -800.0; // exp underflows: zero posterior mass, not an exception
  CHECK(posterior.log_posterior(x) == -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(posterior.gradient(x), std::domain_error);
  Eigen::VectorXd wrong(posterior.dimension() + 1);
  wrong.setZero();
  CHECK_THROWS_AS(posterior.log_posterior(wrong), std::invalid_argument);
}
