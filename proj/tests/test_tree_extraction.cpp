// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "metro/tree_extraction.hpp"
#include "support/oracles.hpp"

using metro::ErrorCode;
using metro::MoleculeSet;
using metro::ReactionGraph;
using metro::ReactionRecord;

namespace {

ReactionRecord rx(const std::string &p, std::vector<std::string> rs) {
  return metro::make_reaction(p, std::move(rs));
}

ReactionGraph graph_of(std::vector<ReactionRecord> records) {
  return metro::build_graph(records).graph;
}

ReactionGraph fig1_graph() {
  return graph_of({rx("A", {"B", "C"}), rx("B", {"D", "F"}), rx("D", {"E"}), rx("C", {"G", "H"})});
}

const MoleculeSet kFig1Start{"E", "F", "G", "H"};

int depth_of(const ReactionGraph &g, const metro::DepthTable &d, const std::string &m) {
  return d[*g.find(m)];
}

}  // namespace

TEST(ComputeDepths, OneStep) {
  const auto g = graph_of({rx("A", {"B", "C"})});
  const auto d = metro::compute_depths(g, {"B", "C"});
  EXPECT_EQ(depth_of(g, d, "A"), 1);
  EXPECT_EQ(depth_of(g, d, "B"), 0);
}

TEST(ComputeDepths, MinimumOverReactions) {
  const auto g = graph_of({rx("A", {"B"}), rx("B", {"C"}), rx("A", {"C"})});
  const auto d = metro::compute_depths(g, {"C"});
  EXPECT_EQ(depth_of(g, d, "A"), 1);
  EXPECT_EQ(depth_of(g, d, "B"), 1);
}

TEST(ComputeDepths, Fig1) {
  const auto g = fig1_graph();
  const auto d = metro::compute_depths(g, kFig1Start);
  EXPECT_EQ(depth_of(g, d, "A"), 3);
  EXPECT_EQ(depth_of(g, d, "B"), 2);
  EXPECT_EQ(depth_of(g, d, "C"), 1);
}

TEST(ComputeDepths, UngroundedCycleAndIterationLimit) {
  const auto g = graph_of({rx("A", {"B"}), rx("B", {"A"})});
  const auto d = metro::compute_depths(g, {});
  EXPECT_FALSE(d.reachable(*g.find("A")));
  const auto chain = graph_of({rx("A", {"B"}), rx("B", {"C"}), rx("C", {"D"})});
  EXPECT_FALSE(metro::compute_depths(chain, {"D"}, 2).reachable(*chain.find("A")));
  EXPECT_EQ(depth_of(chain, metro::compute_depths(chain, {"D"}, 3), "A"), 3);
}

TEST(ComputeDepths, AddingStartingMaterialNeverIncreasesDepth) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    auto rg = oracle::random_graph(rng);
    const auto before = metro::compute_depths(rg.graph, rg.starting);
    auto more = rg.starting;
    more.insert(rg.graph.smiles(static_cast<int>(rng() % rg.graph.num_molecules())));
    const auto after = metro::compute_depths(rg.graph, more);
    for (int m = 0; m < rg.graph.num_molecules(); ++m) EXPECT_LE(after[m], before[m]);
  }
}

TEST(EnumerateMinTrees, DifferentReactionsGiveDifferentTrees) {
  const auto g = graph_of({rx("A", {"B"}), rx("A", {"C"})});
  const auto d = metro::compute_depths(g, {"B", "C"});
  const auto e = metro::enumerate_min_trees(g, "A", d);
  ASSERT_EQ(e.trees.size(), 2u);
  for (const auto &t : e.trees) EXPECT_EQ(t.depth, 1);
  EXPECT_FALSE(e.truncated);
}

TEST(EnumerateMinTrees, Fig1) {
  const auto g = fig1_graph();
  const auto d = metro::compute_depths(g, kFig1Start);
  const auto e = metro::enumerate_min_trees(g, "A", d);
  ASSERT_EQ(e.trees.size(), 1u);
  EXPECT_EQ(e.trees[0].leaves, kFig1Start);
  EXPECT_EQ(e.trees[0].depth, 3);
  EXPECT_EQ(e.trees[0].intermediates, (MoleculeSet{"B", "C", "D"}));
  EXPECT_TRUE(metro::validate_tree(e.trees[0], kFig1Start).ok);
}

TEST(EnumerateMinTrees, Errors) {
  const auto g = graph_of({rx("A", {"B"}), rx("B", {"A"})});
  const auto d = metro::compute_depths(g, {});
  try {
    metro::enumerate_min_trees(g, "A", d);
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kTargetUnreachable);
  }
  const auto g2 = graph_of({rx("A", {"B"})});
  try {
    metro::enumerate_min_trees(g2, "B", metro::compute_depths(g2, {"B"}));
    FAIL();
  } catch (const metro::Error &e) {
    EXPECT_EQ(e.code(), ErrorCode::kTargetIsStartingMaterial);
  }
}

TEST(EnumerateMinTrees, CapTruncates) {
  const auto g = graph_of({rx("A", {"B"}), rx("A", {"C"}), rx("A", {"D"})});
  const auto d = metro::compute_depths(g, {"B", "C", "D"});
  const auto e = metro::enumerate_min_trees(g, "A", d, 2);
  EXPECT_EQ(e.trees.size(), 2u);
  EXPECT_TRUE(e.truncated);
}

TEST(EnumerateMinTrees, AgreesWithBruteForce) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 150; ++trial) {
    auto rg = oracle::random_graph(rng, 9, 7);
    const auto bf = oracle::brute_force_trees(rg.graph, rg.starting);
    const auto d = metro::compute_depths(rg.graph, rg.starting);
    for (int m = 0; m < rg.graph.num_molecules(); ++m) {
      if (d.is_starting(m)) continue;
      const int expected = bf.depth[m];
      ASSERT_EQ(d[m], expected) << rg.graph.smiles(m);
      if (expected == INT_MAX) continue;
      const auto e = metro::enumerate_min_trees(rg.graph, m, d, 100000);
      std::set<std::vector<ReactionRecord>> got;
      for (const auto &t : e.trees) {
        EXPECT_TRUE(metro::validate_tree(t, rg.starting).ok);
        EXPECT_EQ(t.depth, expected);
        got.insert(t.reactions);
      }
      EXPECT_EQ(got.size(), e.trees.size());
      EXPECT_EQ(got, bf.min_trees[m]) << rg.graph.smiles(m);
    }
  }
}

TEST(Routes, Fig1) {
  const auto g = fig1_graph();
  const auto tree = metro::enumerate_min_trees(g, "A", metro::compute_depths(g, kFig1Start)).trees[0];
  const auto routes = metro::routes_of(tree);
  ASSERT_EQ(routes.size(), 4u);
  bool found = false;
  int longest = 0;
  for (const auto &r : routes) {
    found = found || r.molecules == std::vector<std::string>{"A", "B", "D", "E"};
    longest = std::max(longest, r.length());
  }
  EXPECT_TRUE(found);
  EXPECT_EQ(longest, tree.depth);
}

TEST(Routes, DepthOne) {
  const auto tree = metro::make_tree("A", {rx("A", {"B", "C"})});
  const auto routes = metro::routes_of(tree);
  ASSERT_EQ(routes.size(), 2u);
  for (const auto &r : routes) EXPECT_EQ(r.length(), 1);
}

TEST(ValidateTree, DetectsProblems) {
  auto bad_leaf = metro::make_tree("A", {rx("A", {"B", "X"})});
  auto diag = metro::validate_tree(bad_leaf, {"B"});
  EXPECT_FALSE(diag.ok);
  auto tampered = metro::make_tree("A", {rx("A", {"B"})});
  tampered.depth = 2;
  EXPECT_FALSE(metro::validate_tree(tampered, {"B"}).ok);
  auto target_start = metro::make_tree("A", {rx("A", {"B"})});
  EXPECT_FALSE(metro::validate_tree(target_start, {"A", "B"}).ok);
  EXPECT_TRUE(metro::validate_tree(metro::make_tree("A", {rx("A", {"B"})}), {"B"}).ok);
}

TEST(TreeFile, RoundTrip) {
  const auto g = fig1_graph();
  const auto trees = metro::extract_all_trees(g, kFig1Start);
  ASSERT_EQ(trees.size(), 1u);
  const auto path = std::filesystem::temp_directory_path() / "metro_trees_test.jsonl";
  metro::write_trees(trees, path);
  EXPECT_EQ(metro::read_trees(path), trees);
  std::filesystem::remove(path);
}
