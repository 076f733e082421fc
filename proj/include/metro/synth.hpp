// SPDX-License-Identifier: Apache-2.0
//
// Synthetic string-rewrite "chemistry" with known minimum-depth trees.
//
// A fragment is two characters over {N,O,P,S,n,o,p,s}; a tag is one of a
// few single characters that sort before every fragment character. A target
// is tag + body, the body being m fragments f1..fm, and its tree has depth m:
//
//   t f1..fm        ->  t . f1..fm
//   f1..fj (j >= 2) ->  t fj . f1..f(j-1)
//
// Starting materials are the tags, the bare fragments and every tag +
// fragment pair. Bodies never contain the tag, so the reactants of an
// intermediate depend on the target at the head of its route. Every body is
// used by one tree only, and its fragments are distinct so each leaf ends
// exactly one route.

#ifndef METRO_SYNTH_HPP
#define METRO_SYNTH_HPP

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "metro/error.hpp"
#include "metro/reaction_graph.hpp"
#include "metro/tree_extraction.hpp"

namespace metro {

inline constexpr std::string_view kSynthFragmentChars = "NOPSnops";
inline constexpr std::string_view kSynthTags = "ABCFHI";

struct SynthSpec {
  std::uint64_t seed = 0;
  /// Number of targets per depth (= fragment count).
  std::map<int, int> targets_per_depth{{2, 110}, {3, 110}, {4, 100}};
  /// Exact duplicates of generated reaction lines.
  int duplicate_lines = 12;
  /// Lines whose product also appears among its reactants.
  int self_loop_lines = 6;
};

struct SynthCorpus {
  std::vector<std::string> reaction_lines;
  MoleculeSet starting;
  std::vector<ReactionTree> trees;
};

inline std::vector<std::string> synth_fragments() {
  std::vector<std::string> out;
  for (char a : kSynthFragmentChars)
    for (char b : kSynthFragmentChars) out.push_back(std::string{a, b});
  return out;
}

inline MoleculeSet synth_starting_set() {
  MoleculeSet s;
  const auto frags = synth_fragments();
  for (char t : kSynthTags) {
    s.insert(std::string(1, t));
    for (const auto &f : frags) s.insert(std::string(1, t) + f);
  }
  s.insert(frags.begin(), frags.end());
  return s;
}

/// The tree of target tag + fragments.
inline ReactionTree synth_tree(char tag, const std::vector<std::string> &fragments) {
  if (fragments.size() < 2) throw Error(ErrorCode::kInvalidArgument, "need at least two fragments");
  const std::string t(1, tag);
  std::string body;
  for (const auto &f : fragments) body += f;
  std::vector<ReactionRecord> reactions;
  reactions.push_back(make_reaction(t + body, {t, body}));
  for (std::size_t j = fragments.size(); j >= 2; --j) {
    const std::string product = body.substr(0, 2 * j);
    const std::string rest = body.substr(0, 2 * (j - 1));
    reactions.push_back(make_reaction(product, {t + fragments[j - 1], rest}));
  }
  return make_tree(t + body, std::move(reactions));
}

inline SynthCorpus generate_synthetic(const SynthSpec &spec) {
  std::mt19937_64 rng(spec.seed);
  const auto frags = synth_fragments();
  std::set<std::string> used_bodies;
  SynthCorpus corpus;
  corpus.starting = synth_starting_set();
  std::vector<std::pair<char, std::vector<std::string>>> plan;
  for (const auto &[depth, count] : spec.targets_per_depth) {
    if (depth < 2) throw Error(ErrorCode::kInvalidArgument, "synthetic depth must be >= 2");
    for (int n = 0; n < count; ++n) {
      for (int attempt = 0;; ++attempt) {
        if (attempt > 10000) {
          throw Error(ErrorCode::kInvalidArgument, "cannot draw enough distinct bodies");
        }
        const char tag = kSynthTags[rng() % kSynthTags.size()];
        std::vector<std::string> f;
        while (static_cast<int>(f.size()) < depth) {
          const auto &x = frags[rng() % frags.size()];
          if (std::find(f.begin(), f.end(), x) == f.end()) f.push_back(x);
        }
        std::vector<std::string> prefixes;
        std::string body;
        bool fresh = true;
        for (const auto &x : f) {
          body += x;
          if (body.size() >= 4) {
            prefixes.push_back(body);
            fresh = fresh && !used_bodies.count(body);
          }
        }
        if (!fresh) continue;
        used_bodies.insert(prefixes.begin(), prefixes.end());
        plan.emplace_back(tag, std::move(f));
        break;
      }
    }
  }
  std::vector<std::string> lines;
  for (const auto &[tag, f] : plan) {
    corpus.trees.push_back(synth_tree(tag, f));
    for (const auto &r : corpus.trees.back().reactions) lines.push_back(r.to_line());
  }
  std::sort(corpus.trees.begin(), corpus.trees.end());
  const std::size_t clean = lines.size();
  for (int i = 0; i < spec.duplicate_lines && clean > 0; ++i) lines.push_back(lines[rng() % clean]);
  for (int i = 0; i < spec.self_loop_lines; ++i) {
    const std::string m = frags[rng() % frags.size()] + frags[rng() % frags.size()];
    lines.push_back(m + "." + std::string(1, kSynthTags[0]) + ">>" + m);
  }
  // Deterministic shuffle so noise is interleaved with real reactions.
  for (std::size_t i = lines.size(); i > 1; --i) std::swap(lines[i - 1], lines[rng() % i]);
  corpus.reaction_lines = std::move(lines);
  return corpus;
}

}  // namespace metro

#endif  // METRO_SYNTH_HPP
