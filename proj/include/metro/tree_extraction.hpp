// SPDX-License-Identifier: Apache-2.0
//
// Minimum synthesis depth by fixpoint relaxation and enumeration of all
// minimum-depth reaction trees by backtracking.

#ifndef METRO_TREE_EXTRACTION_HPP
#define METRO_TREE_EXTRACTION_HPP

#include <algorithm>
#include <climits>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/error.hpp"
#include "metro/reaction_graph.hpp"

namespace metro {

using MoleculeSet = std::set<std::string>;

inline constexpr int kDefaultMaxIters = 50;
inline constexpr int kDefaultTreeCap = 32;

/// Per-molecule minimum synthesis depth; 0 for starting materials.
class DepthTable {
 public:
  static constexpr int kUnreachable = INT_MAX;

  DepthTable() = default;
  DepthTable(std::vector<int> depth, std::vector<bool> starting, int rounds)
      : depth_(std::move(depth)), starting_(std::move(starting)),
        rounds_(rounds) {}

  int operator[](int molecule) const { return depth_.at(molecule); }
  bool reachable(int molecule) const { return depth_.at(molecule) != kUnreachable; }
  bool is_starting(int molecule) const { return starting_.at(molecule); }
  int size() const { return static_cast<int>(depth_.size()); }
  /// Relaxation rounds actually run.
  int rounds() const { return rounds_; }
  const std::vector<int> &values() const { return depth_; }

 private:
  std::vector<int> depth_;
  std::vector<bool> starting_;
  int rounds_ = 0;
};

/// Round-based (Jacobi) relaxation of
///   depth(m) = 0                                  if m is a starting material
///   depth(m) = 1 + min_{r -> m} max_{x in r} depth(x)   otherwise.
/// A value set in round k is final, so molecules whose depth exceeds
/// `max_iters` and molecules on ungrounded cycles stay unreachable.
inline DepthTable compute_depths(const ReactionGraph &graph,
                                 const MoleculeSet &starting,
                                 int max_iters = kDefaultMaxIters) {
  if (max_iters < 1) {
    throw Error(ErrorCode::kInvalidArgument, "max_iters must be >= 1");
  }
  const int n = graph.num_molecules();
  std::vector<bool> is_start(n);
  std::vector<int> depth(n, DepthTable::kUnreachable);
  for (int m = 0; m < n; ++m) {
    is_start[m] = starting.count(graph.smiles(m)) > 0;
    if (is_start[m]) depth[m] = 0;
  }
  int rounds = 0;
  for (; rounds < max_iters; ++rounds) {
    std::vector<int> next = depth;
    for (const auto &rx : graph.reactions()) {
      if (is_start[rx.product]) continue;
      int worst = 0;
      for (int r : rx.reactants) worst = std::max(worst, depth[r]);
      if (worst == DepthTable::kUnreachable) continue;
      next[rx.product] = std::min(next[rx.product], worst + 1);
    }
    if (next == depth) break;
    depth = std::move(next);
  }
  return DepthTable(std::move(depth), std::move(is_start), rounds);
}

/// A reaction tree {T, R, I, tau}. Reactions are sorted; leaves and
/// intermediates are derived from them.
struct ReactionTree {
  std::string target;
  std::vector<ReactionRecord> reactions;
  MoleculeSet leaves;
  MoleculeSet intermediates;
  int depth = 0;

  friend bool operator==(const ReactionTree &a, const ReactionTree &b) {
    return a.target == b.target && a.reactions == b.reactions;
  }
  friend auto operator<=>(const ReactionTree &a, const ReactionTree &b) {
    if (auto c = a.target <=> b.target; c != 0) return c;
    return a.reactions <=> b.reactions;
  }

  const ReactionRecord *producing(const std::string &molecule) const {
    for (const auto &r : reactions) {
      if (r.product == molecule) return &r;
    }
    return nullptr;
  }
};

namespace detail {

/// Longest route length below `m`, or nullopt when the reactions contain a
/// cycle reachable from `m`.
inline std::optional<int> tree_height(
    const std::map<std::string, const ReactionRecord *> &by_product,
    const std::string &m, std::map<std::string, int> &memo,
    std::set<std::string> &on_stack) {
  auto it = by_product.find(m);
  if (it == by_product.end()) return 0;
  if (auto hit = memo.find(m); hit != memo.end()) return hit->second;
  if (!on_stack.insert(m).second) return std::nullopt;
  int best = 0;
  for (const auto &r : it->second->reactants) {
    auto h = tree_height(by_product, r, memo, on_stack);
    if (!h) return std::nullopt;
    best = std::max(best, *h);
  }
  on_stack.erase(m);
  memo[m] = best + 1;
  return best + 1;
}

}  // namespace detail

/// Builds a tree from its reaction set, deriving leaves (reactants with no
/// producing reaction in the set), intermediates and depth.
inline ReactionTree make_tree(std::string target,
                              std::vector<ReactionRecord> reactions) {
  std::sort(reactions.begin(), reactions.end());
  ReactionTree tree;
  tree.target = std::move(target);
  tree.reactions = std::move(reactions);
  std::map<std::string, const ReactionRecord *> by_product;
  for (const auto &r : tree.reactions) by_product.emplace(r.product, &r);
  for (const auto &r : tree.reactions) {
    if (r.product != tree.target) tree.intermediates.insert(r.product);
    for (const auto &x : r.reactants) {
      if (!by_product.count(x)) tree.leaves.insert(x);
    }
  }
  std::map<std::string, int> memo;
  std::set<std::string> stack;
  tree.depth = detail::tree_height(by_product, tree.target, memo, stack)
                   .value_or(-1);
  return tree;
}

struct TreeDiagnostics {
  bool ok = true;
  std::vector<std::string> problems;

  void fail(std::string what) {
    ok = false;
    problems.push_back(std::move(what));
  }
};

/// Checks every ReactionTree invariant from scratch.
inline TreeDiagnostics validate_tree(const ReactionTree &tree,
                                     const MoleculeSet &starting) {
  TreeDiagnostics diag;
  if (starting.count(tree.target)) {
    diag.fail("target " + tree.target + " is a starting material");
  }
  std::map<std::string, const ReactionRecord *> by_product;
  for (const auto &r : tree.reactions) {
    auto [it, fresh] = by_product.emplace(r.product, &r);
    if (!fresh) diag.fail("molecule " + r.product + " expanded more than once");
    if (starting.count(r.product) && r.product != tree.target) {
      diag.fail("intermediate " + r.product + " is a starting material");
    }
    if (std::find(r.reactants.begin(), r.reactants.end(), r.product) !=
        r.reactants.end()) {
      diag.fail("reaction of " + r.product + " consumes its own product");
    }
  }
  if (!by_product.count(tree.target)) {
    diag.fail("no reaction produces target " + tree.target);
    return diag;
  }
  std::map<std::string, int> memo;
  std::set<std::string> stack;
  const auto height =
      detail::tree_height(by_product, tree.target, memo, stack);
  if (!height) {
    diag.fail("reactions contain a cycle");
    return diag;
  }
  // Connectivity and leaves, walking down from the target.
  std::set<std::string> seen;
  MoleculeSet leaves;
  MoleculeSet intermediates;
  std::vector<std::string> todo{tree.target};
  while (!todo.empty()) {
    std::string m = std::move(todo.back());
    todo.pop_back();
    if (!seen.insert(m).second) continue;
    auto it = by_product.find(m);
    if (it == by_product.end()) {
      leaves.insert(m);
      if (!starting.count(m)) diag.fail("leaf " + m + " is not a starting material");
      continue;
    }
    if (m != tree.target) intermediates.insert(m);
    for (const auto &r : it->second->reactants) todo.push_back(r);
  }
  for (const auto &r : tree.reactions) {
    if (!seen.count(r.product)) {
      diag.fail("reaction producing " + r.product + " is not connected to the target");
    }
  }
  if (leaves != tree.leaves) diag.fail("stored leaf set disagrees with reactions");
  if (intermediates != tree.intermediates) {
    diag.fail("stored intermediate set disagrees with reactions");
  }
  if (*height != tree.depth) {
    diag.fail("stored depth " + std::to_string(tree.depth) +
              " but longest route is " + std::to_string(*height));
  }
  return diag;
}

struct TreeEnumeration {
  std::vector<ReactionTree> trees;
  bool truncated = false;
};

namespace detail {

class MinTreeSearch {
 public:
  MinTreeSearch(const ReactionGraph &graph, const DepthTable &depths, int target,
                int cap)
      : graph_(graph), depths_(depths), target_(target), cap_(cap),
        assigned_(graph.num_molecules(), -1),
        budget_(graph.num_molecules(), INT_MAX) {}

  TreeEnumeration run() {
    std::vector<std::pair<int, int>> work{{target_, depths_[target_]}};
    descend(work);
    std::sort(out_.trees.begin(), out_.trees.end());
    return std::move(out_);
  }

 private:
  bool feasible(int reaction, int budget) const {
    for (int r : graph_.reaction(reaction).reactants) {
      if (!depths_.reachable(r) || depths_[r] > budget - 1) return false;
    }
    return true;
  }

  void push_reactants(std::vector<std::pair<int, int>> &work, int reaction,
                      int budget) const {
    const auto &rs = graph_.reaction(reaction).reactants;
    for (auto it = rs.rbegin(); it != rs.rend(); ++it) {
      work.emplace_back(*it, budget - 1);
    }
  }

  // Returns false once the cap has been exceeded.
  bool descend(std::vector<std::pair<int, int>> work) {
    if (work.empty()) return emit();
    const auto [m, budget] = work.back();
    work.pop_back();
    if (depths_.is_starting(m)) return descend(std::move(work));
    if (!depths_.reachable(m) || depths_[m] > budget) return true;
    if (assigned_[m] >= 0) {
      if (budget >= budget_[m]) return descend(std::move(work));
      if (!feasible(assigned_[m], budget)) return true;
      const int saved = budget_[m];
      budget_[m] = budget;
      push_reactants(work, assigned_[m], budget);
      const bool go_on = descend(std::move(work));
      budget_[m] = saved;
      return go_on;
    }
    for (int rx : graph_.producers(m)) {
      if (!feasible(rx, budget)) continue;
      assigned_[m] = rx;
      budget_[m] = budget;
      auto next = work;
      push_reactants(next, rx, budget);
      const bool go_on = descend(std::move(next));
      assigned_[m] = -1;
      budget_[m] = INT_MAX;
      if (!go_on) return false;
    }
    return true;
  }

  bool emit() {
    std::vector<ReactionRecord> reactions;
    for (int m = 0; m < graph_.num_molecules(); ++m) {
      if (assigned_[m] >= 0) reactions.push_back(graph_.record(assigned_[m]));
    }
    ReactionTree tree = make_tree(graph_.smiles(target_), std::move(reactions));
    if (tree.depth != depths_[target_]) return true;
    if (static_cast<int>(out_.trees.size()) == cap_) {
      out_.truncated = true;
      return false;
    }
    out_.trees.push_back(std::move(tree));
    return true;
  }

  const ReactionGraph &graph_;
  const DepthTable &depths_;
  int target_;
  int cap_;
  std::vector<int> assigned_;
  std::vector<int> budget_;
  TreeEnumeration out_;
};

}  // namespace detail

/// Every distinct reaction tree of `target` whose depth equals its minimum
/// depth. A molecule is expanded by one reaction everywhere it occurs in a
/// tree. At most `cap` trees are returned; `truncated` is set when more
/// exist.
inline TreeEnumeration enumerate_min_trees(const ReactionGraph &graph,
                                           int target,
                                           const DepthTable &depths,
                                           int cap = kDefaultTreeCap) {
  if (depths.is_starting(target)) {
    throw Error(ErrorCode::kTargetIsStartingMaterial, graph.smiles(target));
  }
  if (!depths.reachable(target)) {
    throw Error(ErrorCode::kTargetUnreachable, graph.smiles(target));
  }
  return detail::MinTreeSearch(graph, depths, target, cap).run();
}

inline TreeEnumeration enumerate_min_trees(const ReactionGraph &graph,
                                           const std::string &target,
                                           const DepthTable &depths,
                                           int cap = kDefaultTreeCap) {
  auto id = graph.find(target);
  if (!id) throw Error(ErrorCode::kTargetUnreachable, target + " not in graph");
  return enumerate_min_trees(graph, *id, depths, cap);
}

/// A root-to-leaf path: molecules[0] is the target, molecules.back() the
/// leaf, reactions[i] turns molecules[i] into (among others) molecules[i+1].
struct Route {
  std::vector<std::string> molecules;
  std::vector<ReactionRecord> reactions;

  int length() const { return static_cast<int>(reactions.size()); }
  const std::string &leaf() const { return molecules.back(); }
  /// Products along the route, i.e. every molecule except the leaf.
  std::vector<std::string> products() const {
    return {molecules.begin(), molecules.end() - 1};
  }
};

/// One route per root-to-leaf path, ordered by leaf SMILES then path.
inline std::vector<Route> routes_of(const ReactionTree &tree) {
  std::map<std::string, const ReactionRecord *> by_product;
  for (const auto &r : tree.reactions) by_product.emplace(r.product, &r);
  std::vector<Route> out;
  Route current;
  std::function<void(const std::string &)> walk = [&](const std::string &m) {
    current.molecules.push_back(m);
    auto it = by_product.find(m);
    if (it == by_product.end()) {
      out.push_back(current);
    } else {
      current.reactions.push_back(*it->second);
      for (const auto &r : it->second->reactants) {
        if (std::find(current.molecules.begin(), current.molecules.end(), r) ==
            current.molecules.end()) {
          walk(r);
        }
      }
      current.reactions.pop_back();
    }
    current.molecules.pop_back();
  };
  if (by_product.count(tree.target)) walk(tree.target);
  std::sort(out.begin(), out.end(), [](const Route &a, const Route &b) {
    if (a.leaf() != b.leaf()) return a.leaf() < b.leaf();
    return a.molecules < b.molecules;
  });
  return out;
}

// JSON: {"target": ..., "reactions": [{"product": ..., "reactants": [...]}],
//        "depth": ...}

inline nlohmann::json reaction_to_json(const ReactionRecord &r) {
  return {{"product", r.product}, {"reactants", r.reactants}};
}

inline ReactionRecord reaction_from_json(const nlohmann::json &j) {
  return make_reaction(j.at("product").get<std::string>(),
                       j.at("reactants").get<std::vector<std::string>>());
}

inline nlohmann::json tree_to_json(const ReactionTree &tree) {
  nlohmann::json rx = nlohmann::json::array();
  for (const auto &r : tree.reactions) rx.push_back(reaction_to_json(r));
  return {{"target", tree.target}, {"reactions", rx}, {"depth", tree.depth}};
}

inline ReactionTree tree_from_json(const nlohmann::json &j) {
  try {
    std::vector<ReactionRecord> rx;
    for (const auto &r : j.at("reactions")) rx.push_back(reaction_from_json(r));
    ReactionTree tree = make_tree(j.at("target").get<std::string>(), std::move(rx));
    if (tree.depth != j.at("depth").get<int>()) {
      throw Error(ErrorCode::kSchemaMismatch,
                  "tree for " + tree.target + " declares depth " +
                      j.at("depth").dump() + " but has " +
                      std::to_string(tree.depth));
    }
    return tree;
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::kSchemaMismatch, e.what());
  }
}

inline void write_trees(const std::vector<ReactionTree> &trees,
                        const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  for (const auto &t : trees) out << tree_to_json(t).dump() << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

inline std::vector<ReactionTree> read_trees(const std::filesystem::path &path) {
  std::vector<ReactionTree> out;
  for (const auto &line : read_lines(path)) {
    if (trim(line).empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception &e) {
      throw Error(ErrorCode::kSchemaMismatch, path.string() + ": " + e.what());
    }
    out.push_back(tree_from_json(j));
  }
  return out;
}

struct ExtractionStats {
  std::size_t targets = 0;
  std::size_t reachable_targets = 0;
  std::size_t trees = 0;
  std::size_t truncated_targets = 0;
  std::map<int, std::size_t> targets_by_depth;
};

/// Runs depth computation and min-tree enumeration for every target.
inline std::vector<ReactionTree> extract_all_trees(
    const ReactionGraph &graph, const MoleculeSet &starting,
    int cap = kDefaultTreeCap, int max_iters = kDefaultMaxIters,
    ExtractionStats *stats = nullptr,
    TargetSelector selector = TargetSelector::kNeverReactant) {
  const DepthTable depths = compute_depths(graph, starting, max_iters);
  std::vector<ReactionTree> out;
  ExtractionStats local;
  for (int t : find_targets(graph, selector)) {
    ++local.targets;
    if (depths.is_starting(t) || !depths.reachable(t)) continue;
    ++local.reachable_targets;
    auto found = enumerate_min_trees(graph, t, depths, cap);
    if (found.truncated) ++local.truncated_targets;
    ++local.targets_by_depth[depths[t]];
    local.trees += found.trees.size();
    for (auto &tree : found.trees) out.push_back(std::move(tree));
  }
  if (stats) *stats = local;
  return out;
}

}  // namespace metro

#endif  // METRO_TREE_EXTRACTION_HPP
