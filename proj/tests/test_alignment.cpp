#include <catch2/catch.hpp>

#include <random>

#include "phylograd/alignment.hpp"
#include "phylograd/substitution.hpp"
#include "phylograd/tree.hpp"
#include "testutil.hpp"

using namespace phylograd;

TEST_CASE("fasta parsing") {
  RawAlignment raw = parse_fasta(">A\nACGT\n>B\nacga\n");
  REQUIRE(raw.taxon_count() == 2);
  CHECK(raw.site_count() == 4);
  CHECK(raw.sequences[1] == "ACGA"); // lowercase normalized

  CHECK_THROWS_WITH(parse_fasta(">A\nACGT\n>B\nACG\n"), Catch::Contains("ragged"));
  CHECK_THROWS_WITH(parse_fasta(">A\nACXT\n"), Catch::Contains("unknown character"));
  CHECK_THROWS_WITH(parse_fasta(">A\nAC\n>A\nAC\n"), Catch::Contains("duplicate"));

  // multi-line sequences, ';' comments, descriptions after the name
  RawAlignment spread = parse_fasta("; comment\n>A extra words\nAC\nGT\n>B\nACGA\n");
  CHECK(spread.taxa[0] == "A");
  CHECK(spread.sequences[0] == "ACGT");

  RawAlignment round = parse_fasta(write_fasta(spread));
  CHECK(round.sequences == spread.sequences);
}

TEST_CASE("relaxed phylip parsing") {
  RawAlignment raw = parse_phylip("2 6\ntaxonA ACGTAC\ntaxonB ACG\nTAA\n");
  REQUIRE(raw.taxon_count() == 2);
  CHECK(raw.sequences[1] == "ACGTAA");
  CHECK_THROWS_AS(parse_phylip("2 8\nA ACGT\nB ACGT\n"), std::invalid_argument);
}

TEST_CASE("ambiguity codes become union partials and gaps become ones") {
  RawAlignment raw = parse_fasta(">A\nR-N\n>B\nAAA\n");
  SitePatternAlignment aln = SitePatternAlignment::compress(raw);
  int a = aln.taxon_index("A");
  REQUIRE(a >= 0);
  // IUPAC R = A or G
  CHECK(aln.tip_partials(a).col(0).isApprox(Eigen::Vector4d(1, 0, 1, 0)));
  // gap and N both give the all-ones partial ...
  CHECK(aln.tip_partials(a).col(1).isApprox(Eigen::Vector4d::Ones()));
  CHECK(aln.tip_partials(a).col(2).isApprox(Eigen::Vector4d::Ones()));
  // ... but compress as distinct patterns (keyed on the literal column)
  CHECK(aln.pattern_count() == 3);
}

TEST_CASE("pattern compression counts multiplicities") {
  SitePatternAlignment two = SitePatternAlignment::compress(parse_fasta(">x\nAAC\n>y\nAAG\n"));
  REQUIRE(two.pattern_count() == 2);
  CHECK(two.weights()[0] == 2);
  CHECK(two.weights()[1] == 1);
  CHECK(two.pattern_column(0) == "AA");

  std::string hundred(100, 'A');
  SitePatternAlignment one =
      SitePatternAlignment::compress(parse_fasta(">x\n" + hundred + "\n>y\n" + hundred + "\n"));
  CHECK(one.pattern_count() == 1);
  CHECK(one.weights()[0] == 100);

  SitePatternAlignment all = SitePatternAlignment::compress(parse_fasta(">x\nACGT\n>y\nCAGT\n"));
  CHECK(all.pattern_count() == 4);
  long total = 0;
  for (long w : all.weights()) total += w;
  CHECK(total == all.site_count());
}

TEST_CASE("generic state-count construction") {
  SitePatternAlignment aln = SitePatternAlignment::from_codes(
      {"a", "b"}, {{0, 5, -1}, {1, 5, 2}}, 6);
  CHECK(aln.state_count() == 6);
  CHECK(aln.pattern_count() == 3);
  CHECK(aln.tip_partials(0).col(2).isApprox(Eigen::VectorXd::Ones(6)));
  CHECK(aln.tip_partials(1)(2, 2) == 1.0);
  CHECK_THROWS_AS(SitePatternAlignment::from_codes({"a"}, {{7}}, 4), std::invalid_argument);
}

TEST_CASE("simulation shapes and degenerate branches") {
  Tree tree = parse_newick("(A:0.0,B:0.0);");
  auto model = SubstitutionModel::jc69();
  auto cats = RateCategories::single();
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(2);

  CHECK_THROWS_AS(simulate_alignment(tree, model, cats, zero, 0, 1), std::invalid_argument);

  RawAlignment one = simulate_alignment(tree, model, cats, zero, 1, 1);
  CHECK(one.taxon_count() == 2);
  CHECK(one.site_count() == 1);

  // zero-length branches: every tip equals the root draw
  RawAlignment frozen = simulate_alignment(tree, model, cats, zero, 200, 7);
  CHECK(frozen.sequences[0] == frozen.sequences[1]);

  // determinism under the seed
  RawAlignment again = simulate_alignment(tree, model, cats, zero, 200, 7);
  CHECK(again.sequences == frozen.sequences);
}

TEST_CASE("simulated tip frequencies converge to pi' exp(Qb)") {
  Tree tree = parse_newick("(A:0.0,B:0.4);"); // one informative branch
  auto model = SubstitutionModel::hky85(2.0, Eigen::Vector4d(0.4, 0.3, 0.2, 0.1));
  auto cats = RateCategories::single();
  Eigen::VectorXd lengths(2);
  lengths << 0.0, 0.4;
  const long sites = 1000000;
  RawAlignment raw = simulate_alignment(tree, model, cats, lengths, sites, 42);

  Eigen::Vector4d expected =
      (model.root_distribution().transpose() * model.transition_matrix(2, 0.4)).transpose();
  Eigen::Vector4d counts = Eigen::Vector4d::Zero();
  for (char c : raw.sequences[1]) counts[std::string("ACGT").find(c)] += 1.0;
  for (int j = 0; j < 4; ++j) {
    double p = counts[j] / double(sites);
    double se = std::sqrt(expected[j] * (1.0 - expected[j]) / double(sites));
    CHECK(std::abs(p - expected[j]) < 3.0 * se + 1e-12);
  }
}
