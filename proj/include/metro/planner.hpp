// SPDX-License-Identifier: Apache-2.0
//
// Multi-step planning by backward chaining over routes: a route whose last
// molecule is not a starting material is sent to a single-step model, and
// each predicted reactant either becomes a leaf or extends a new route.
// Partial trees are expanded best-first by summed log-probability.

#ifndef METRO_PLANNER_HPP
#define METRO_PLANNER_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/chem_text.hpp"
#include "metro/error.hpp"
#include "metro/inference.hpp"
#include "metro/model.hpp"
#include "metro/tree_extraction.hpp"

namespace metro {

struct StepCandidate {
  std::vector<std::string> reactants;  // sorted, unique
  double logprob = 0;
};

/// Proposes reactant sets for the last molecule of a route.
class SingleStepModel {
 public:
  virtual ~SingleStepModel() = default;
  virtual std::vector<StepCandidate> propose(const std::vector<std::string> &route, int k) = 0;
};

/// Beam decoding with a trained model. Candidates that do not parse as a
/// reactant set are discarded.
template <typename T>
class ModelSingleStep : public SingleStepModel {
 public:
  explicit ModelSingleStep(MetroModel<T> &model) : model_(model) {}

  std::vector<StepCandidate> propose(const std::vector<std::string> &route, int k) override {
    std::vector<StepCandidate> out;
    BeamResult beam;
    try {
      beam = beam_decode(model_, route, k);
    } catch (const Error &e) {
      if (e.code() == ErrorCode::kSequenceTooLong) return out;
      throw;
    }
    if (beam.incomplete) return out;
    for (const auto &c : beam.candidates) {
      std::vector<std::string> parts;
      try {
        parts = split_reactants(c.text);
      } catch (const Error &) {
        continue;
      }
      std::sort(parts.begin(), parts.end());
      parts.erase(std::unique(parts.begin(), parts.end()), parts.end());
      out.push_back({std::move(parts), c.logprob});
    }
    return out;
  }

 private:
  MetroModel<T> &model_;
};

/// Ground-truth lookup: the reactant sets recorded for an exact route
/// prefix, each with log-probability log(1/n).
class OracleSingleStep : public SingleStepModel {
 public:
  void add(const std::vector<std::string> &route, std::vector<std::string> reactants) {
    std::sort(reactants.begin(), reactants.end());
    auto &sets = table_[route];
    if (std::find(sets.begin(), sets.end(), reactants) == sets.end()) {
      sets.push_back(std::move(reactants));
    }
  }

  void add_tree(const ReactionTree &tree) {
    for (const auto &route : routes_of(tree)) {
      for (std::size_t i = 0; i < route.reactions.size(); ++i) {
        add({route.molecules.begin(), route.molecules.begin() + i + 1},
            route.reactions[i].reactants);
      }
    }
  }

  std::vector<StepCandidate> propose(const std::vector<std::string> &route, int k) override {
    std::vector<StepCandidate> out;
    auto it = table_.find(route);
    if (it == table_.end()) return out;
    const double lp = -std::log(static_cast<double>(it->second.size()));
    for (const auto &s : it->second) {
      if (static_cast<int>(out.size()) == k) break;
      out.push_back({s, lp});
    }
    return out;
  }

 private:
  std::map<std::vector<std::string>, std::vector<std::vector<std::string>>> table_;
};

/// Seeded random proposals drawn from a molecule pool plus fresh strings,
/// including degenerate outputs (the product itself, route members).
class RandomSingleStep : public SingleStepModel {
 public:
  RandomSingleStep(std::vector<std::string> pool, std::uint64_t seed)
      : pool_(std::move(pool)), rng_(seed) {
    if (pool_.empty()) pool_.push_back("C");
  }

  std::vector<StepCandidate> propose(const std::vector<std::string> &route, int k) override {
    std::vector<StepCandidate> out;
    const int n = std::uniform_int_distribution<int>(0, k)(rng_);
    for (int c = 0; c < n; ++c) {
      std::set<std::string> set;
      const int size = std::uniform_int_distribution<int>(1, 3)(rng_);
      for (int i = 0; i < size; ++i) set.insert(draw(route));
      out.push_back({{set.begin(), set.end()},
                     -std::uniform_real_distribution<double>(0.0, 5.0)(rng_)});
    }
    std::sort(out.begin(), out.end(),
              [](const StepCandidate &a, const StepCandidate &b) { return a.logprob > b.logprob; });
    return out;
  }

 private:
  std::string draw(const std::vector<std::string> &route) {
    const int kind = std::uniform_int_distribution<int>(0, 9)(rng_);
    if (kind == 0) return route.back();
    if (kind == 1) return route[std::uniform_int_distribution<std::size_t>(0, route.size() - 1)(rng_)];
    if (kind == 2) return "X" + std::to_string(fresh_++);
    return pool_[std::uniform_int_distribution<std::size_t>(0, pool_.size() - 1)(rng_)];
  }

  std::vector<std::string> pool_;
  std::mt19937_64 rng_;
  std::uint64_t fresh_ = 0;
};

struct PlanOptions {
  int beam = 5;
  int max_depth = 13;
  /// Number of complete trees to return.
  int top_k = 5;
  /// Budget of single-step model calls; exceeding it stops the search and
  /// marks the results truncated.
  int max_model_calls = 2000;
};

struct PlanResult {
  int rank = 0;
  MoleculeSet leaves;
  ReactionTree tree;
  double logprob = 0;
  bool truncated = false;
};

namespace detail {

struct PartialTree {
  std::map<std::string, ReactionRecord> expansions;
  std::vector<std::vector<std::string>> open;  // routes still to expand
  double logprob = 0;
  std::uint64_t order = 0;  // insertion counter for stable ties
};

struct PartialOrder {
  bool operator()(const PartialTree &a, const PartialTree &b) const {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.order < b.order;
  }
};

}  // namespace detail

/// Checks a plan without trusting the search: the tree invariants, leaves
/// in the starting set, and the recorded leaf set.
inline TreeDiagnostics validate_plan(const PlanResult &result, const MoleculeSet &starting) {
  TreeDiagnostics diag = validate_tree(result.tree, starting);
  const ReactionTree rebuilt = make_tree(result.tree.target, result.tree.reactions);
  if (rebuilt.leaves != result.leaves) diag.fail("plan leaf set disagrees with its reactions");
  for (const auto &leaf : result.leaves) {
    if (!starting.count(leaf)) diag.fail("leaf " + leaf + " is not a starting material");
  }
  return diag;
}

/// Up to options.top_k complete trees for `target`, best first.
inline std::vector<PlanResult> plan(const std::string &target, SingleStepModel &model,
                                    const MoleculeSet &starting, const PlanOptions &options) {
  if (starting.count(target)) {
    throw Error(ErrorCode::kInvalidTarget, target + " is already a starting material");
  }
  if (options.max_depth < 1 || options.beam < 1 || options.top_k < 1) {
    throw Error(ErrorCode::kInvalidArgument, "max_depth, beam and top_k must be >= 1");
  }
  std::map<std::vector<std::string>, std::vector<StepCandidate>> cache;
  int calls = 0;
  bool truncated = false;
  auto propose = [&](const std::vector<std::string> &route) -> const std::vector<StepCandidate> & {
    auto it = cache.find(route);
    if (it != cache.end()) return it->second;
    ++calls;
    return cache.emplace(route, model.propose(route, options.beam)).first->second;
  };

  std::set<detail::PartialTree, detail::PartialOrder> frontier;
  std::uint64_t counter = 0;
  frontier.insert({{}, {{target}}, 0.0, counter++});
  const std::size_t frontier_cap = static_cast<std::size_t>(options.top_k) * options.beam;

  std::vector<PlanResult> results;
  std::set<std::vector<ReactionRecord>> emitted;
  while (!frontier.empty() && static_cast<int>(results.size()) < options.top_k) {
    detail::PartialTree state = *frontier.begin();
    frontier.erase(frontier.begin());
    if (state.open.empty()) {
      std::vector<ReactionRecord> reactions;
      for (auto &[m, r] : state.expansions) reactions.push_back(r);
      PlanResult result;
      result.tree = make_tree(target, reactions);
      result.leaves = result.tree.leaves;
      result.logprob = state.logprob;
      if (result.tree.depth >= 1 && result.tree.depth <= options.max_depth &&
          validate_plan(result, starting).ok && emitted.insert(result.tree.reactions).second) {
        results.push_back(std::move(result));
      }
      continue;
    }
    // Depth-first: continue the most recently opened route.
    std::vector<std::string> route = std::move(state.open.back());
    state.open.pop_back();
    const std::string &product = route.back();
    if (state.expansions.count(product)) {
      frontier.insert(std::move(state));  // reached again through another route
      continue;
    }
    if (static_cast<int>(route.size()) > options.max_depth) continue;  // pruned
    if (calls >= options.max_model_calls && !cache.count(route)) {
      truncated = true;
      break;
    }
    for (const auto &cand : propose(route)) {
      if (cand.reactants.empty()) continue;
      const bool degenerate = std::any_of(cand.reactants.begin(), cand.reactants.end(),
                                          [&](const std::string &r) {
                                            return !is_valid_molecule(r) ||
                                                   std::find(route.begin(), route.end(), r) != route.end();
                                          });
      if (degenerate) continue;
      ReactionRecord reaction;
      try {
        reaction = make_reaction(product, cand.reactants);
      } catch (const Error &) {
        continue;
      }
      detail::PartialTree next = state;
      next.order = counter++;
      next.logprob += cand.logprob;
      next.expansions.emplace(product, reaction);
      bool consistent = true;
      for (auto it = cand.reactants.rbegin(); it != cand.reactants.rend(); ++it) {
        const std::string &r = *it;
        if (starting.count(r)) continue;
        if (r == target) consistent = false;
        auto route_next = route;
        route_next.push_back(r);
        next.open.push_back(std::move(route_next));
      }
      if (!consistent) continue;
      frontier.insert(std::move(next));
      if (frontier.size() > frontier_cap) frontier.erase(std::prev(frontier.end()));
    }
  }
  if (results.empty()) {
    throw Error(ErrorCode::kNoPlanFound,
                "no plan for " + target + (truncated ? " (search budget exhausted)" : ""));
  }
  for (std::size_t i = 0; i < results.size(); ++i) {
    results[i].rank = static_cast<int>(i) + 1;
    results[i].truncated = truncated;
  }
  return results;
}

// JSONL: {"target", "rank", "leaves", "reactions", "logprob", "depth",
//         "truncated"}; a target without any plan is written with rank 0.

inline nlohmann::json plan_to_json(const std::string &target, const PlanResult &p) {
  nlohmann::json reactions = nlohmann::json::array();
  for (const auto &r : p.tree.reactions) reactions.push_back(reaction_to_json(r));
  return {{"target", target},
          {"rank", p.rank},
          {"leaves", std::vector<std::string>(p.leaves.begin(), p.leaves.end())},
          {"reactions", reactions},
          {"logprob", p.logprob},
          {"depth", p.tree.depth},
          {"truncated", p.truncated}};
}

inline nlohmann::json failed_plan_json(const std::string &target, const std::string &reason) {
  return {{"target", target}, {"rank", 0},          {"leaves", nlohmann::json::array()},
          {"reactions", nlohmann::json::array()},  {"logprob", nullptr},
          {"depth", 0},        {"truncated", false}, {"error", reason}};
}

struct PlanRecord {
  std::string target;
  int rank = 0;
  MoleculeSet leaves;
  double logprob = 0;
  int depth = 0;
  bool truncated = false;
};

inline std::vector<PlanRecord> read_plans(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::vector<PlanRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      PlanRecord r;
      r.target = j.at("target").get<std::string>();
      r.rank = j.at("rank").get<int>();
      for (const auto &l : j.at("leaves")) r.leaves.insert(l.get<std::string>());
      r.logprob = j.at("logprob").is_null() ? 0.0 : j.at("logprob").get<double>();
      r.depth = j.at("depth").get<int>();
      r.truncated = j.at("truncated").get<bool>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception &e) {
      throw Error(ErrorCode::kSchemaMismatch,
                  path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace metro

#endif  // METRO_PLANNER_HPP
