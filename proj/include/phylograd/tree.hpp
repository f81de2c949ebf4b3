#pragma once

// Rooted binary phylogenies: Newick parsing/serialization, node indexing and
// traversal orders.
//
// Node numbering convention: tips are 1..N in input left-to-right order,
// internal nodes are N+1..2N-1 in post-order completion order, so the root is
// always node 2N-1. A branch is referred to by the child node it subtends.

#include <array>
#include <charconv>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace phylograd {

struct NewickError : std::runtime_error {
  NewickError(const std::string& what, std::size_t pos)
      : std::runtime_error(what + " (at position " + std::to_string(pos) + ")"),
        position(pos) {}
  std::size_t position;
};

struct Tree {
  int tip_count = 0;

  // All per-node vectors are sized node_count()+1; slot 0 is unused so that
  // node ids index directly.
  std::vector<std::string> labels;
  std::vector<int> parent;                  // 0 for the root
  std::vector<std::array<int, 2>> children; // {0,0} for tips
  std::vector<double> branch_length;        // substitutions/site; unused at root
  std::vector<double> node_time;            // empty when no times are attached
  std::vector<int> post_order;              // ends at the root
  std::vector<int> pre_order;               // starts at the root

  int node_count() const { return 2 * tip_count - 1; }
  int root() const { return node_count(); }
  int branch_count() const { return node_count() - 1; }
  bool is_tip(int node) const { return node >= 1 && node <= tip_count; }
  bool has_times() const { return !node_time.empty(); }

  int sibling(int node) const {
    int p = parent[node];
    return children[p][0] == node ? children[p][1] : children[p][0];
  }
};

inline double tree_length(const Tree& tree) {
  double total = 0.0;
  for (int i = 1; i <= tree.branch_count(); ++i) total += tree.branch_length[i];
  return total;
}

// Canonical orders: post_order visits children (left first) before parents;
// pre_order is its reverse, which is always an admissible parent-first order.
inline void rebuild_traversals(Tree& tree) {
  tree.post_order.clear();
  tree.post_order.reserve(tree.node_count());
  // Iterative post-order; second stack entry marks whether children were pushed.
  std::vector<std::pair<int, bool>> stack{{tree.root(), false}};
  while (!stack.empty()) {
    auto [node, expanded] = stack.back();
    stack.pop_back();
    if (expanded || tree.is_tip(node)) {
      tree.post_order.push_back(node);
    } else {
      stack.push_back({node, true});
      stack.push_back({tree.children[node][1], false});
      stack.push_back({tree.children[node][0], false});
    }
  }
  tree.pre_order.assign(tree.post_order.rbegin(), tree.post_order.rend());
}

// Structural invariant checks for programmatically built trees. parse_newick
// output satisfies these by construction.
inline void validate_tree(const Tree& tree) {
  if (tree.tip_count < 2) throw std::invalid_argument("tree needs at least 2 tips");
  const int n = tree.node_count();
  auto sized = [&](std::size_t s) { return s == static_cast<std::size_t>(n) + 1; };
  if (!sized(tree.parent.size()) || !sized(tree.children.size()) ||
      !sized(tree.labels.size()) || !sized(tree.branch_length.size()))
    throw std::invalid_argument("tree vectors not sized node_count()+1");
  if (tree.parent[tree.root()] != 0)
    throw std::invalid_argument("root must have no parent");
  for (int i = 1; i < n; ++i) {
    int p = tree.parent[i];
    if (p <= tree.tip_count || p > n)
      throw std::invalid_argument("node " + std::to_string(i) + " has invalid parent");
    if (tree.children[p][0] != i && tree.children[p][1] != i)
      throw std::invalid_argument("parent/children maps inconsistent at node " +
                                  std::to_string(i));
    if (tree.branch_length[i] < 0.0)
      throw std::invalid_argument("negative branch length at node " + std::to_string(i));
  }
  for (int i = tree.tip_count + 1; i <= n; ++i) {
    for (int c : tree.children[i]) {
      if (c < 1 || c >= n || tree.parent[c] != i)
        throw std::invalid_argument("bad child link at internal node " + std::to_string(i));
    }
  }
  // Acyclic and connected: every node must reach the root.
  for (int i = 1; i < n; ++i) {
    int hops = 0, node = i;
    while (node != tree.root() && hops++ <= n) node = tree.parent[node];
    if (hops > n) throw std::invalid_argument("parent links contain a cycle");
  }
  if (tree.has_times()) {
    if (!sized(tree.node_time.size()))
      throw std::invalid_argument("node_time not sized node_count()+1");
    for (int i = 1; i < n; ++i)
      if (!(tree.node_time[i] > tree.node_time[tree.parent[i]]))
        throw std::invalid_argument("node_time must strictly increase from parent to child");
  }
  if (tree.post_order.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("post_order incomplete");
  std::vector<int> position(n + 1, -1);
  for (int idx = 0; idx < n; ++idx) position[tree.post_order[idx]] = idx;
  for (int i = 1; i < n; ++i)
    if (position[i] < 0 || position[i] >= position[tree.parent[i]])
      throw std::invalid_argument("post_order does not visit children before parents");
}

// Interpret the stored branch lengths as chronological durations and assign
// node times with the root at 0. Used to turn a time-scaled Newick tree into
// the node-time parameterization a clock model needs.
inline void assign_times_from_branch_lengths(Tree& tree) {
  tree.node_time.assign(tree.node_count() + 1, 0.0);
  for (auto it = tree.pre_order.begin(); it != tree.pre_order.end(); ++it) {
    int node = *it;
    if (node == tree.root()) continue;
    if (tree.branch_length[node] <= 0.0)
      throw std::invalid_argument("durations must be positive to assign node times");
    tree.node_time[node] = tree.node_time[tree.parent[node]] + tree.branch_length[node];
  }
}

namespace detail {

struct NewickParser {
  std::string_view text;
  std::size_t pos = 0;

  struct ProtoNode {
    std::string label;
    double length = 0.0;
    int left = -1, right = -1; // indices into proto, -1 for tips
  };
  std::vector<ProtoNode> proto;
  std::vector<int> tip_order;      // proto indices in input order
  std::vector<int> internal_order; // proto indices in completion order

  [[noreturn]] void fail(const std::string& what) const { throw NewickError(what, pos); }

  void skip_ws() {
    while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
  }

  char peek() {
    skip_ws();
    if (pos >= text.size()) fail("unexpected end of input");
    return text[pos];
  }

  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos;
  }

  std::string parse_label() {
    skip_ws();
    std::size_t start = pos;
    while (pos < text.size()) {
      char c = text[pos];
      if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' ||
          std::isspace(static_cast<unsigned char>(c)))
        break;
      ++pos;
    }
    return std::string(text.substr(start, pos - start));
  }

  double parse_length() {
    skip_ws();
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + text.size(), value);
    if (ec != std::errc()) fail("expected a branch length");
    pos = static_cast<std::size_t>(ptr - text.data());
    if (value < 0.0) fail("negative branch length");
    return value;
  }

  int parse_subtree() {
    if (peek() == '(') {
      ++pos;
      std::vector<int> kids;
      kids.push_back(parse_subtree());
      while (peek() == ',') {
        ++pos;
        kids.push_back(parse_subtree());
      }
      expect(')');
      if (kids.size() == 1) fail("unifurcation: internal node with one child");
      if (kids.size() > 2) fail("polytomy: internal node with more than two children");
      int idx = static_cast<int>(proto.size());
      proto.push_back({});
      proto[idx].left = kids[0];
      proto[idx].right = kids[1];
      skip_ws();
      if (pos < text.size() && text[pos] != ':' && text[pos] != ',' &&
          text[pos] != ')' && text[pos] != ';')
        proto[idx].label = parse_label(); // internal label, kept but unused
      skip_ws();
      if (pos < text.size() && text[pos] == ':') {
        ++pos;
        proto[idx].length = parse_length();
      }
      internal_order.push_back(idx);
      return idx;
    }
    std::string label = parse_label();
    if (label.empty()) fail("expected a tip label");
    int idx = static_cast<int>(proto.size());
    proto.push_back({});
    proto[idx].label = std::move(label);
    skip_ws();
    if (pos < text.size() && text[pos] == ':') {
      ++pos;
      proto[idx].length = parse_length();
    }
    tip_order.push_back(idx);
    return idx;
  }

  Tree run() {
    int root_idx = parse_subtree();
    expect(';');
    skip_ws();
    if (pos != text.size()) fail("trailing characters after ';'");
    if (proto[root_idx].left < 0) fail("a tree must have at least two tips");

    const int n_tips = static_cast<int>(tip_order.size());
    Tree tree;
    tree.tip_count = n_tips;
    const int n = tree.node_count();
    tree.labels.assign(n + 1, {});
    tree.parent.assign(n + 1, 0);
    tree.children.assign(n + 1, {0, 0});
    tree.branch_length.assign(n + 1, 0.0);

    std::vector<int> node_id(proto.size(), 0);
    for (int t = 0; t < n_tips; ++t) node_id[tip_order[t]] = t + 1;
    for (std::size_t k = 0; k < internal_order.size(); ++k)
      node_id[internal_order[k]] = n_tips + 1 + static_cast<int>(k);

    for (std::size_t p = 0; p < proto.size(); ++p) {
      int id = node_id[p];
      tree.labels[id] = proto[p].label;
      tree.branch_length[id] = proto[p].length;
      if (proto[p].left >= 0) {
        int l = node_id[proto[p].left], r = node_id[proto[p].right];
        tree.children[id] = {l, r};
        tree.parent[l] = id;
        tree.parent[r] = id;
      }
    }
    tree.labels[tree.root()].clear(); // root label carries no information here
    tree.branch_length[tree.root()] = 0.0;

    for (int a = 1; a <= n_tips; ++a)
      for (int b = a + 1; b <= n_tips; ++b)
        if (tree.labels[a] == tree.labels[b])
          throw NewickError("duplicate tip label '" + tree.labels[a] + "'", 0);

    rebuild_traversals(tree);
    return tree;
  }
};

} // namespace detail

inline Tree parse_newick(std::string_view text) {
  detail::NewickParser parser{text};
  return parser.run();
}

namespace detail {

inline void format_length(std::string& out, double value) {
  char buf[32];
  int len = std::snprintf(buf, sizeof buf, "%.12g", value);
  out.append(buf, static_cast<std::size_t>(len));
}

inline void write_subtree(const Tree& tree, int node, std::string& out) {
  if (tree.is_tip(node)) {
    out += tree.labels[node];
  } else {
    out += '(';
    write_subtree(tree, tree.children[node][0], out);
    out += ',';
    write_subtree(tree, tree.children[node][1], out);
    out += ')';
  }
  if (node != tree.root()) {
    out += ':';
    format_length(out, tree.branch_length[node]);
  }
}

} // namespace detail

// Round-trip stable to 12 significant digits; internal labels are omitted.
inline std::string serialize_newick(const Tree& tree) {
  std::string out;
  detail::write_subtree(tree, tree.root(), out);
  out += ';';
  return out;
}

} // namespace phylograd
