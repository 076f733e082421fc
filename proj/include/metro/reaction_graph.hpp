// SPDX-License-Identifier: Apache-2.0
//
// Reaction corpus ingestion and the product -> reactant reaction graph.

#ifndef METRO_REACTION_GRAPH_HPP
#define METRO_REACTION_GRAPH_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metro/chem_text.hpp"
#include "metro/error.hpp"

namespace metro {

/// One retrosynthesis reaction. Reactants are kept sorted and unique, which
/// is also the order used whenever the reaction is printed.
struct ReactionRecord {
  std::string product;
  std::vector<std::string> reactants;
  std::optional<std::string> source_id;

  friend bool operator==(const ReactionRecord &a, const ReactionRecord &b) {
    return a.product == b.product && a.reactants == b.reactants;
  }
  friend auto operator<=>(const ReactionRecord &a, const ReactionRecord &b) {
    if (auto c = a.product <=> b.product; c != 0) return c;
    return a.reactants <=> b.reactants;
  }

  std::string reactant_text() const { return join_reactants(reactants); }
  std::string to_line() const { return reactant_text() + ">>" + product; }
};

/// Normalizes reactants to a sorted set and checks the record invariants.
inline ReactionRecord make_reaction(std::string product,
                                    std::vector<std::string> reactants,
                                    std::optional<std::string> source = {}) {
  if (reactants.empty()) {
    throw Error(ErrorCode::kMalformedLine, "reaction without reactants");
  }
  try {
    validate_molecule(product);
    for (const auto &r : reactants) validate_molecule(r);
  } catch (const Error &e) {
    throw Error(ErrorCode::kMalformedLine, e.what());
  }
  std::sort(reactants.begin(), reactants.end());
  reactants.erase(std::unique(reactants.begin(), reactants.end()),
                  reactants.end());
  if (std::binary_search(reactants.begin(), reactants.end(), product)) {
    throw Error(ErrorCode::kSelfLoop, "product '" + product +
                                          "' is also a reactant");
  }
  return ReactionRecord{std::move(product), std::move(reactants),
                        std::move(source)};
}

/// Parses "r1.r2>>p" with an optional tab-separated source id.
inline ReactionRecord parse_reaction_line(std::string_view line) {
  std::string_view body = line;
  std::optional<std::string> source;
  if (auto tab = body.find('\t'); tab != body.npos) {
    std::string id = trim(body.substr(tab + 1));
    if (!id.empty()) source = std::move(id);
    body = body.substr(0, tab);
  }
  const std::string text = trim(body);
  if (text.empty()) throw Error(ErrorCode::kMalformedLine, "empty line");
  const auto arrow = text.find(">>");
  if (arrow == std::string::npos) {
    throw Error(ErrorCode::kMalformedLine, "no '>>' in '" + text + "'");
  }
  const std::string lhs = text.substr(0, arrow);
  const std::string rhs = text.substr(arrow + 2);
  if (lhs.empty() || rhs.empty()) {
    throw Error(ErrorCode::kMalformedLine, "empty side in '" + text + "'");
  }
  std::vector<std::string> products;
  std::vector<std::string> reactants;
  try {
    products = split_reactants(rhs);
    reactants = split_reactants(lhs);
  } catch (const Error &e) {
    throw Error(ErrorCode::kMalformedLine, e.what());
  }
  if (products.size() > 1) {
    throw Error(ErrorCode::kMultiProduct, "'" + text + "'");
  }
  return make_reaction(std::move(products.front()), std::move(reactants),
                       std::move(source));
}

struct IngestStats {
  std::size_t records = 0;
  std::size_t accepted = 0;
  std::size_t duplicates = 0;
  std::size_t invalid = 0;
  std::map<std::string, std::size_t> invalid_by_reason;
};

/// Directed reaction graph. Molecules are interned in sorted order of their
/// SMILES text; reactions are sorted by (product, reactants). Immutable once
/// built.
class ReactionGraph {
 public:
  struct Reaction {
    int product;
    std::vector<int> reactants;  // ascending molecule ids
  };

  ReactionGraph() = default;

  /// Builds from already-validated, deduplicated records.
  explicit ReactionGraph(std::vector<ReactionRecord> records) {
    std::sort(records.begin(), records.end());
    std::set<std::string> names;
    for (const auto &r : records) {
      names.insert(r.product);
      names.insert(r.reactants.begin(), r.reactants.end());
    }
    molecules_.assign(names.begin(), names.end());
    for (std::size_t i = 0; i < molecules_.size(); ++i) {
      index_.emplace(molecules_[i], static_cast<int>(i));
    }
    producers_.resize(molecules_.size());
    consumers_.resize(molecules_.size());
    for (const auto &r : records) {
      Reaction rx;
      rx.product = index_.at(r.product);
      for (const auto &m : r.reactants) rx.reactants.push_back(index_.at(m));
      const int id = static_cast<int>(reactions_.size());
      producers_[rx.product].push_back(id);
      for (int m : rx.reactants) {
        consumers_[m].push_back(id);
        edges_.emplace(rx.product, m);
      }
      reactions_.push_back(std::move(rx));
    }
  }

  int num_molecules() const { return static_cast<int>(molecules_.size()); }
  int num_reactions() const { return static_cast<int>(reactions_.size()); }
  const std::vector<std::string> &molecules() const { return molecules_; }
  const std::string &smiles(int id) const { return molecules_.at(id); }
  const Reaction &reaction(int id) const { return reactions_.at(id); }
  const std::vector<Reaction> &reactions() const { return reactions_; }

  std::optional<int> find(std::string_view smiles) const {
    auto it = index_.find(std::string(smiles));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  /// Reactions whose product is `molecule`.
  const std::vector<int> &producers(int molecule) const {
    return producers_.at(molecule);
  }
  /// Reactions that use `molecule` as a reactant.
  const std::vector<int> &consumers(int molecule) const {
    return consumers_.at(molecule);
  }

  /// (product, reactant) pairs.
  const std::set<std::pair<int, int>> &edges() const { return edges_; }

  ReactionRecord record(int reaction_id) const {
    const auto &rx = reactions_.at(reaction_id);
    ReactionRecord r;
    r.product = molecules_[rx.product];
    for (int m : rx.reactants) r.reactants.push_back(molecules_[m]);
    return r;
  }

  std::vector<ReactionRecord> records() const {
    std::vector<ReactionRecord> out;
    out.reserve(reactions_.size());
    for (int i = 0; i < num_reactions(); ++i) out.push_back(record(i));
    return out;
  }

  friend bool operator==(const ReactionGraph &a, const ReactionGraph &b) {
    return a.records() == b.records();
  }

 private:
  std::vector<std::string> molecules_;
  std::unordered_map<std::string, int> index_;
  std::vector<Reaction> reactions_;
  std::vector<std::vector<int>> producers_;
  std::vector<std::vector<int>> consumers_;
  std::set<std::pair<int, int>> edges_;
};

struct GraphBuild {
  ReactionGraph graph;
  IngestStats stats;
};

/// Deduplicates on (product, reactant set) and drops records violating the
/// ReactionRecord invariants. The result does not depend on input order.
template <typename Range>
GraphBuild build_graph(const Range &records) {
  GraphBuild out;
  std::set<ReactionRecord> unique;
  for (const ReactionRecord &raw : records) {
    ++out.stats.records;
    ReactionRecord rec;
    try {
      rec = make_reaction(raw.product, raw.reactants);
    } catch (const Error &e) {
      ++out.stats.invalid;
      ++out.stats.invalid_by_reason[std::string(to_string(e.code()))];
      continue;
    }
    if (!unique.insert(std::move(rec)).second) ++out.stats.duplicates;
  }
  out.stats.accepted = unique.size();
  out.graph = ReactionGraph(std::vector<ReactionRecord>(unique.begin(),
                                                        unique.end()));
  return out;
}

/// Parses reaction lines, counting unparseable ones as invalid, then builds
/// the graph. Blank lines and '#' comments are skipped without counting.
template <typename Range>
GraphBuild build_graph_from_lines(const Range &lines) {
  std::vector<ReactionRecord> parsed;
  IngestStats pre;
  for (const auto &line : lines) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    try {
      parsed.push_back(parse_reaction_line(t));
    } catch (const Error &e) {
      ++pre.records;
      ++pre.invalid;
      ++pre.invalid_by_reason[std::string(to_string(e.code()))];
    }
  }
  GraphBuild out = build_graph(parsed);
  out.stats.records += pre.records;
  out.stats.invalid += pre.invalid;
  for (const auto &[k, v] : pre.invalid_by_reason) {
    out.stats.invalid_by_reason[k] += v;
  }
  return out;
}

inline std::vector<std::string> read_lines(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(std::move(line));
  return lines;
}

/// Writes the graph's reactions in corpus format, one per line, sorted.
inline void write_graph(const ReactionGraph &graph,
                        const std::filesystem::path &path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  for (const auto &r : graph.records()) out << r.to_line() << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

inline ReactionGraph read_graph(const std::filesystem::path &path) {
  return build_graph_from_lines(read_lines(path)).graph;
}

enum class TargetSelector {
  kNeverReactant,  // in-degree 0 under product -> reactant edges
  kNeverProduct,   // out-degree 0 under the same orientation
};

/// Candidate target molecules. The default selector returns molecules that
/// are produced by at least one reaction and consumed by none.
inline std::vector<int> find_targets(
    const ReactionGraph &graph,
    TargetSelector selector = TargetSelector::kNeverReactant) {
  std::vector<int> out;
  for (int m = 0; m < graph.num_molecules(); ++m) {
    const bool produced = !graph.producers(m).empty();
    const bool consumed = !graph.consumers(m).empty();
    if (selector == TargetSelector::kNeverReactant ? (produced && !consumed)
                                                   : (!produced)) {
      out.push_back(m);
    }
  }
  return out;
}

}  // namespace metro

#endif  // METRO_REACTION_GRAPH_HPP
