#pragma once

// Sequence alignments: FASTA / relaxed PHYLIP readers, compression to weighted
// unique site patterns, tip partial-likelihood vectors with IUPAC ambiguity
// and missing-data handling, and forward simulation along a tree.

#include <Eigen/Dense>

#include <cstdint>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "phylograd/substitution.hpp"
#include "phylograd/tree.hpp"

namespace phylograd {

struct RawAlignment {
  std::vector<std::string> taxa;
  std::vector<std::string> sequences; // uppercase, equal length, validated

  int taxon_count() const { return static_cast<int>(taxa.size()); }
  long site_count() const { return taxa.empty() ? 0 : static_cast<long>(sequences[0].size()); }
};

namespace detail {

// Bitmask over states A=1, C=2, G=4, T=8; 15 = fully ambiguous.
inline int nucleotide_mask(char c) {
  switch (c) {
    case 'A': return 1;
    case 'C': return 2;
    case 'G': return 4;
    case 'T': return 8;
    case 'R': return 1 | 4;
    case 'Y': return 2 | 8;
    case 'S': return 2 | 4;
    case 'W': return 1 | 8;
    case 'K': return 4 | 8;
    case 'M': return 1 | 2;
    case 'B': return 2 | 4 | 8;
    case 'D': return 1 | 4 | 8;
    case 'H': return 1 | 2 | 8;
    case 'V': return 1 | 2 | 4;
    case 'N': case '-': case '?': return 15;
    default: return 0;
  }
}

inline void check_raw(RawAlignment& raw) {
  if (raw.taxa.empty()) throw std::invalid_argument("alignment: no records");
  for (std::size_t r = 0; r < raw.taxa.size(); ++r) {
    for (std::size_t other = 0; other < r; ++other)
      if (raw.taxa[other] == raw.taxa[r])
        throw std::invalid_argument("alignment: duplicate taxon name '" + raw.taxa[r] + "'");
    auto& seq = raw.sequences[r];
    if (seq.size() != raw.sequences[0].size())
      throw std::invalid_argument("alignment: ragged record '" + raw.taxa[r] + "'");
    for (char& c : seq) {
      c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      if (nucleotide_mask(c) == 0)
        throw std::invalid_argument(std::string("alignment: unknown character '") + c +
                                    "' in record '" + raw.taxa[r] + "'");
    }
  }
  if (raw.sequences[0].empty()) throw std::invalid_argument("alignment: zero-length sequences");
}

} // namespace detail

// Lines starting with ';' are treated as comments.
inline RawAlignment parse_fasta(std::string_view text) {
  RawAlignment raw;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == ';') continue;
    if (line[0] == '>') {
      std::string name = line.substr(1);
      name = name.substr(name.find_first_not_of(" \t"));
      auto cut = name.find_first_of(" \t"); // description after first word dropped
      if (cut != std::string::npos) name.resize(cut);
      if (name.empty()) throw std::invalid_argument("fasta: empty record name");
      raw.taxa.push_back(std::move(name));
      raw.sequences.emplace_back();
    } else {
      if (raw.taxa.empty()) throw std::invalid_argument("fasta: sequence before first header");
      for (char c : line)
        if (!std::isspace(static_cast<unsigned char>(c))) raw.sequences.back() += c;
    }
  }
  detail::check_raw(raw);
  return raw;
}

// Relaxed sequential PHYLIP: header "ntax nchar", then one name + sequence per
// record (sequence may continue on following lines).
inline RawAlignment parse_phylip(std::string_view text) {
  std::istringstream in{std::string(text)};
  int ntax = 0;
  long nchar = 0;
  if (!(in >> ntax >> nchar) || ntax < 1 || nchar < 1)
    throw std::invalid_argument("phylip: bad header");
  RawAlignment raw;
  for (int r = 0; r < ntax; ++r) {
    std::string name;
    if (!(in >> name)) throw std::invalid_argument("phylip: missing record " + std::to_string(r + 1));
    raw.taxa.push_back(name);
    std::string seq;
    std::string chunk;
    while (static_cast<long>(seq.size()) < nchar && in >> chunk) seq += chunk;
    if (static_cast<long>(seq.size()) != nchar)
      throw std::invalid_argument("phylip: record '" + name + "' shorter than header nchar");
    raw.sequences.push_back(std::move(seq));
  }
  detail::check_raw(raw);
  return raw;
}

// Compressed unique site columns with multiplicities. The compression key is
// the literal character column, so distinct ambiguity codes never merge even
// when their partials coincide.
class SitePatternAlignment {
 public:
  int state_count() const { return state_count_; }
  int pattern_count() const { return static_cast<int>(weights_.size()); }
  long site_count() const { return site_count_; }
  const std::vector<std::string>& taxa() const { return taxa_; }
  const std::vector<long>& weights() const { return weights_; }

  // m x pattern_count matrix of tip partials for one taxon.
  const Eigen::MatrixXd& tip_partials(int taxon_index) const { return tip_partials_[taxon_index]; }

  int taxon_index(const std::string& name) const {
    for (std::size_t i = 0; i < taxa_.size(); ++i)
      if (taxa_[i] == name) return static_cast<int>(i);
    return -1;
  }

  // Character column for one pattern (taxa in stored order); empty for
  // programmatically built alignments.
  std::string pattern_column(int pattern) const {
    if (columns_.empty()) return {};
    return columns_[pattern];
  }

  static SitePatternAlignment compress(const RawAlignment& raw) {
    SitePatternAlignment out;
    out.state_count_ = 4;
    out.taxa_ = raw.taxa;
    out.site_count_ = raw.site_count();
    const int ntax = raw.taxon_count();

    std::map<std::string, int> seen;
    for (long s = 0; s < out.site_count_; ++s) {
      std::string column(ntax, ' ');
      for (int r = 0; r < ntax; ++r) column[r] = raw.sequences[r][s];
      auto [it, inserted] = seen.emplace(column, out.pattern_count());
      if (inserted) {
        out.columns_.push_back(column);
        out.weights_.push_back(1);
      } else {
        ++out.weights_[it->second];
      }
    }

    out.tip_partials_.assign(ntax, Eigen::MatrixXd::Zero(4, out.pattern_count()));
    for (int r = 0; r < ntax; ++r) {
      for (int p = 0; p < out.pattern_count(); ++p) {
        int mask = detail::nucleotide_mask(out.columns_[p][r]);
        for (int j = 0; j < 4; ++j)
          out.tip_partials_[r](j, p) = (mask >> j) & 1 ? 1.0 : 0.0;
      }
    }
    return out;
  }

  // Generic-m construction from integer state codes; -1 marks missing data
  // (all-ones partial). Columns are compressed on the code vector.
  static SitePatternAlignment from_codes(std::vector<std::string> taxa,
                                         const std::vector<std::vector<int>>& codes,
                                         int state_count) {
    if (state_count < 2) throw std::invalid_argument("alignment: state count must be >= 2");
    if (codes.size() != taxa.size()) throw std::invalid_argument("alignment: taxa/codes mismatch");
    SitePatternAlignment out;
    out.state_count_ = state_count;
    out.taxa_ = std::move(taxa);
    const int ntax = static_cast<int>(out.taxa_.size());
    if (ntax == 0) throw std::invalid_argument("alignment: no records");
    out.site_count_ = static_cast<long>(codes[0].size());

    std::map<std::vector<int>, int> seen;
    std::vector<std::vector<int>> unique_columns;
    for (long s = 0; s < out.site_count_; ++s) {
      std::vector<int> column(ntax);
      for (int r = 0; r < ntax; ++r) {
        if (codes[r].size() != static_cast<std::size_t>(out.site_count_))
          throw std::invalid_argument("alignment: ragged code rows");
        int c = codes[r][s];
        if (c < -1 || c >= state_count)
          throw std::invalid_argument("alignment: state code out of range");
        column[r] = c;
      }
      auto [it, inserted] = seen.emplace(column, static_cast<int>(unique_columns.size()));
      if (inserted) {
        unique_columns.push_back(column);
        out.weights_.push_back(1);
      } else {
        ++out.weights_[it->second];
      }
    }

    out.tip_partials_.assign(ntax, Eigen::MatrixXd::Zero(state_count, out.pattern_count()));
    for (int r = 0; r < ntax; ++r)
      for (int p = 0; p < out.pattern_count(); ++p) {
        int c = unique_columns[p][r];
        if (c < 0)
          out.tip_partials_[r].col(p).setOnes();
        else
          out.tip_partials_[r](c, p) = 1.0;
      }
    return out;
  }

 private:
  int state_count_ = 4;
  std::vector<std::string> taxa_;
  std::vector<long> weights_;
  long site_count_ = 0;
  std::vector<Eigen::MatrixXd> tip_partials_;
  std::vector<std::string> columns_;
};

// Forward simulation from the generative factorization: root state from pi,
// then per-branch transitions from rows of e^{Q b c_l} with a per-site rate
// category. Returns per-taxon state codes; deterministic under fixed seed.
inline std::vector<std::vector<int>> simulate_states(const Tree& tree,
                                                     const SubstitutionModel& model,
                                                     const RateCategories& categories,
                                                     const Eigen::VectorXd& branch_lengths,
                                                     long site_count, std::uint64_t seed) {
  if (site_count < 1) throw std::invalid_argument("simulate: site_count must be >= 1");
  if (branch_lengths.size() != tree.branch_count())
    throw std::invalid_argument("simulate: need one branch length per non-root node");
  const int m = model.state_count();
  const int L = categories.count();

  std::vector<std::vector<Eigen::MatrixXd>> transition(tree.node_count() + 1);
  for (int i = 1; i <= tree.branch_count(); ++i) {
    transition[i].reserve(L);
    for (int l = 0; l < L; ++l)
      transition[i].push_back(model.transition_matrix(i, branch_lengths[i - 1], categories.rates[l]));
  }

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  auto draw = [&](const auto& weights) {
    double u = unif(rng), acc = 0.0;
    int last = static_cast<int>(weights.size()) - 1;
    for (int j = 0; j < last; ++j) {
      acc += weights[j];
      if (u < acc) return j;
    }
    return last;
  };

  std::vector<std::vector<int>> tip_states(tree.tip_count, std::vector<int>(site_count));
  std::vector<int> state(tree.node_count() + 1);
  for (long s = 0; s < site_count; ++s) {
    int l = draw(categories.probs);
    for (int node : tree.pre_order) {
      if (node == tree.root())
        state[node] = draw(model.root_distribution());
      else
        state[node] = draw(transition[node][l].row(state[tree.parent[node]]));
      if (tree.is_tip(node)) tip_states[node - 1][s] = state[node];
    }
  }
  return tip_states;
}

// Nucleotide convenience wrapper producing sequence text (taxa named from the
// tree tips).
inline RawAlignment simulate_alignment(const Tree& tree, const SubstitutionModel& model,
                                       const RateCategories& categories,
                                       const Eigen::VectorXd& branch_lengths,
                                       long site_count, std::uint64_t seed) {
  if (model.state_count() != 4)
    throw std::invalid_argument("simulate_alignment: sequence output requires m = 4");
  auto states = simulate_states(tree, model, categories, branch_lengths, site_count, seed);
  static constexpr char kAlphabet[] = "ACGT";
  RawAlignment raw;
  for (int t = 1; t <= tree.tip_count; ++t) {
    raw.taxa.push_back(tree.labels[t]);
    std::string seq(site_count, ' ');
    for (long s = 0; s < site_count; ++s) seq[s] = kAlphabet[states[t - 1][s]];
    raw.sequences.push_back(std::move(seq));
  }
  return raw;
}

inline std::string write_fasta(const RawAlignment& raw) {
  std::string out;
  for (std::size_t r = 0; r < raw.taxa.size(); ++r) {
    out += '>';
    out += raw.taxa[r];
    out += '\n';
    out += raw.sequences[r];
    out += '\n';
  }
  return out;
}

} // namespace phylograd
