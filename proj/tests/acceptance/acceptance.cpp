// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails.
//
// usage: acceptance [work_dir] [criterion...]

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "metro/evaluation.hpp"
#include "metro/inference.hpp"
#include "metro/pipeline.hpp"
#include "metro/synth.hpp"
#include "support/fixtures.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char *f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// 1. Finite-difference check of the full tiny model.
Outcome gradient_check() {
  const auto t0 = std::chrono::steady_clock::now();
  metro::MetroModel<double> model(fixture::tiny_config(1), fixture::tiny_vocab());
  fixture::scramble(model, 11);
  const metro::MetroModel<double>::RouteBatch products{
      {model.encode_text("CNOS"), model.encode_text("cN")}};
  const metro::MetroModel<double>::RouteBatch targets{
      {model.encode_text("C.n"), model.encode_text("S.OO")}};
  auto build = [&](metro::nn::Tape<double> &tape) { return model.loss(tape, products, targets); };
  const double err = oracle::max_relative_gradient_error<double>(build, model.params());
  const double secs = seconds_since(t0);
  return {err < 1e-4 && secs < 60,
          fmt("max relative error %.2e over %zu values, %.1fs", err, model.params().num_values(), secs)};
}

// 2. Later products never influence earlier steps; memory attention is a
// causal stochastic matrix.
Outcome causality() {
  metro::MetroModel<double> model(fixture::tiny_config(2), fixture::tiny_vocab());
  fixture::scramble(model, 12);
  std::mt19937_64 rng(2);
  double worst_logit = 0, worst_row = 0, worst_upper = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + static_cast<int>(rng() % 3);
    const auto route = fixture::random_route(rng, n, 4);
    const auto steps = fixture::random_route(rng, n, 4);
    const int j = 1 + static_cast<int>(rng() % (n - 1));
    auto changed = route;
    auto changed_steps = steps;
    for (int i = j; i < n; ++i) {
      changed[i] = fixture::random_molecule(rng, 4);
      changed_steps[i] = fixture::random_molecule(rng, 4);
    }
    const auto a = metro::forward_route(model, route, steps);
    const auto b = metro::forward_route(model, changed, changed_steps);
    for (int i = 0; i < j; ++i)
      for (std::size_t k = 0; k < a.logits[i].size(); ++k)
        worst_logit = std::max(worst_logit, std::abs(a.logits[i].data[k] - b.logits[i].data[k]));
    for (const auto *f : {&a, &b}) {
      for (const auto &m : f->attention) {
        for (int r = 0; r < m.rows(); ++r) {
          worst_row = std::max(worst_row, std::abs(m.row(r).sum() - 1.0));
          for (int c = r + 1; c < m.cols(); ++c) worst_upper = std::max(worst_upper, std::abs(m(r, c)));
        }
      }
    }
  }
  return {worst_logit <= 1e-12 && worst_row <= 1e-6 && worst_upper == 0.0,
          fmt("max earlier-step logit change %.1e, row-sum error %.1e, max above-diagonal %.1e",
              worst_logit, worst_row, worst_upper)};
}

// 3. Depths and minimum-depth trees against exhaustive enumeration.
Outcome oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(3);
  std::size_t molecules = 0, mismatches = 0, trees = 0;
  for (int g = 0; g < 500; ++g) {
    const auto rg = oracle::random_graph(rng, 12, 8);
    const auto bf = oracle::brute_force_trees(rg.graph, rg.starting);
    const auto depths = metro::compute_depths(rg.graph, rg.starting);
    for (int m = 0; m < rg.graph.num_molecules(); ++m) {
      ++molecules;
      if (depths.is_starting(m)) {
        mismatches += depths[m] != 0;
        continue;
      }
      if (depths[m] != bf.depth[m]) {
        ++mismatches;
        continue;
      }
      if (!depths.reachable(m)) continue;
      const auto e = metro::enumerate_min_trees(rg.graph, m, depths, 1 << 20);
      std::set<std::vector<metro::ReactionRecord>> got;
      for (const auto &t : e.trees) {
        if (!metro::validate_tree(t, rg.starting).ok || t.depth != depths[m]) ++mismatches;
        got.insert(t.reactions);
      }
      trees += got.size();
      if (e.truncated || got.size() != e.trees.size() || got != bf.min_trees[m]) ++mismatches;
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 120,
          fmt("%zu molecules, %zu min trees, %zu mismatches, %.1fs", molecules, trees, mismatches, secs)};
}

// 4. The worked example tree.
Outcome fig1_fixture() {
  using metro::make_reaction;
  const std::vector<metro::ReactionRecord> rx{make_reaction("A", {"B", "C"}),
                                              make_reaction("B", {"D", "F"}),
                                              make_reaction("D", {"E"}),
                                              make_reaction("C", {"G", "H"})};
  const metro::MoleculeSet s{"E", "F", "G", "H"};
  const auto graph = metro::build_graph(rx).graph;
  const auto depths = metro::compute_depths(graph, s);
  const auto found = metro::enumerate_min_trees(graph, "A", depths);
  if (found.trees.size() != 1) return {false, fmt("%zu trees", found.trees.size())};
  const auto &tree = found.trees[0];
  const auto routes = metro::routes_of(tree);
  bool abde = false;
  for (const auto &r : routes) abde = abde || r.molecules == std::vector<std::string>{"A", "B", "D", "E"};
  const bool ok = tree.depth == 3 && routes.size() == 4 && tree.leaves == s && abde &&
                  metro::validate_tree(tree, s).ok;
  return {ok, fmt("depth %d, %zu routes, %zu leaves, A-B-D-E %s", tree.depth, routes.size(),
                  tree.leaves.size(), abde ? "present" : "missing")};
}

// 5. Per-depth 80/10/10 split, overflow to test, no leakage.
Outcome split_law() {
  metro::SynthSpec spec;
  spec.seed = 5;
  spec.targets_per_depth.clear();
  for (int d = 2; d <= 10; ++d) spec.targets_per_depth[d] = 100;
  spec.targets_per_depth[11] = 50;
  spec.targets_per_depth[12] = 50;
  const auto corpus = metro::generate_synthetic(spec);
  const auto built = metro::build_graph_from_lines(corpus.reaction_lines);
  const auto trees = metro::extract_all_trees(built.graph, corpus.starting);
  const auto by_target = metro::group_by_target(trees);
  metro::SplitSpec split_spec;
  split_spec.seed = 5;
  const auto split = metro::split_targets(by_target, split_spec);
  const auto data = metro::materialize_split(by_target, split, split_spec);

  std::map<int, std::array<std::size_t, 3>> counts;
  std::map<std::string, int> owner;
  std::size_t leaks = 0;
  for (int s = 0; s < 3; ++s) {
    for (const auto &t : split.part(s)) {
      ++counts[by_target.at(t).front().depth][s];
      if (!owner.emplace(t, s).second) ++leaks;
    }
  }
  std::set<std::string> train_example_targets;
  for (const auto &ex : data[0].examples) train_example_targets.insert(ex.target);
  for (const auto &t : split.test) leaks += train_example_targets.count(t);
  for (const auto &t : split.val) leaks += train_example_targets.count(t);

  bool ok = owner.size() == 1000 && leaks == 0;
  std::string worst;
  double worst_dev = 0;
  for (const auto &[depth, c] : counts) {
    const double n = static_cast<double>(c[0] + c[1] + c[2]);
    if (depth > 10) {
      ok = ok && c[0] == 0 && c[1] == 0;
      continue;
    }
    const double dev = std::max({std::abs(c[0] - 0.8 * n), std::abs(c[1] - 0.1 * n),
                                 std::abs(c[2] - 0.1 * n)});
    worst_dev = std::max(worst_dev, dev);
    ok = ok && dev <= 1.0 + 1e-9;
  }
  const auto &deep = counts[11];
  return {ok, fmt("%zu targets, max deviation %.2f targets, depth-11 test %zu/%zu, %zu leaks",
                  owner.size(), worst_dev, deep[2], deep[0] + deep[1] + deep[2], leaks)};
}

// 6. Planner termination with a random stub and recovery with an oracle.
Outcome planner_soundness() {
  const auto corpus = metro::generate_synthetic({});
  std::vector<std::string> pool(corpus.starting.begin(), corpus.starting.end());
  for (std::size_t i = 0; i < corpus.trees.size(); i += 7) {
    for (const auto &m : corpus.trees[i].intermediates) pool.push_back(m);
  }
  std::size_t calls = 0, planned = 0, bad_leaves = 0, too_deep = 0, invalid = 0;
  for (int i = 0; i < 1000; ++i) {
    metro::RandomSingleStep model(pool, 1000 + i);
    metro::PlanOptions opt;
    opt.max_depth = 2 + i % 6;
    const auto &target = corpus.trees[i % corpus.trees.size()].target;
    ++calls;
    try {
      for (const auto &r : metro::plan(target, model, corpus.starting, opt)) {
        ++planned;
        for (const auto &leaf : r.leaves) bad_leaves += !corpus.starting.count(leaf);
        too_deep += r.tree.depth > opt.max_depth;
        invalid += !metro::validate_plan(r, corpus.starting).ok;
      }
    } catch (const metro::Error &e) {
      if (e.code() != metro::ErrorCode::kNoPlanFound) ++invalid;
    }
  }
  std::size_t recovered = 0;
  for (const auto &tree : corpus.trees) {
    metro::OracleSingleStep oracle;
    oracle.add_tree(tree);
    try {
      const auto r = metro::plan(tree.target, oracle, corpus.starting, {});
      recovered += r.front().leaves == tree.leaves && r.front().tree.reactions == tree.reactions;
    } catch (const metro::Error &) {
    }
  }
  const bool ok = bad_leaves == 0 && too_deep == 0 && invalid == 0 && recovered == corpus.trees.size();
  return {ok, fmt("%zu random-stub calls terminated (%zu plans, %zu bad leaves, %zu invalid); "
                  "oracle recovered %zu/%zu",
                  calls, planned, bad_leaves, invalid, recovered, corpus.trees.size())};
}

// 8. Scoring semantics and report layout.
Outcome evaluation_semantics() {
  using metro::MoleculeSet;
  bool ok = metro::exact_match({"E", "F", "G", "H"}, {{"E", "F", "G", "H"}}) &&
            !metro::exact_match({"E", "F", "G"}, {{"E", "F", "G", "H"}}) &&
            metro::exact_match({"X"}, {{"Y"}, {"X"}});
  const std::vector<metro::TruthRecord> truth{
      {"T1", 2, {{"a"}}}, {"T2", 3, {{"b"}, {"c"}}}, {"T3", 13, {{"d"}}}, {"T4", 7, {{"e", "f"}}}};
  const std::map<std::string, std::vector<MoleculeSet>> plans{
      {"T1", {{"a"}}}, {"T2", {{"x"}, {"y"}, {"c"}}}, {"T3", {{"q"}}}, {"T4", {{"e"}, {"e", "f"}}}};
  const auto report = metro::score_run(plans, truth);
  const double expect[5] = {0.25, 0.5, 0.75, 0.75, 0.75};
  for (int k = 1; k <= 5; ++k) {
    ok = ok && std::abs(report.accuracy(k) - expect[k - 1]) < 1e-12;
    if (k > 1) ok = ok && report.accuracy(k) >= report.accuracy(k - 1);
  }
  std::istringstream csv(metro::report_csv(report));
  std::string line;
  std::getline(csv, line);
  ok = ok && line == "depth,top1,top2,top3,top4,top5";
  std::vector<int> depths;
  while (std::getline(csv, line)) {
    depths.push_back(std::stoi(line.substr(0, line.find(','))));
    ok = ok && std::count(line.begin(), line.end(), ',') == 5;
  }
  std::vector<int> expected_depths;
  for (int d = 2; d <= 13; ++d) expected_depths.push_back(d);
  ok = ok && depths == expected_depths;
  return {ok, fmt("top-1..5 = %.2f %.2f %.2f %.2f %.2f, %zu depth rows", report.accuracy(1),
                  report.accuracy(2), report.accuracy(3), report.accuracy(4), report.accuracy(5),
                  depths.size())};
}

// 7 and 9 share the synth-demo runs.
struct DemoRuns {
  fs::path first, second;
  metro::SynthDemoResult a, b;
  bool ran = false;
};

metro::SynthDemoResult run_demo(const fs::path &dir) {
  fs::remove_all(dir);
  metro::SynthDemoOptions opt;
  opt.seed = 1;
  opt.out_dir = dir;
  opt.log = [](const std::string &s) { std::printf("    %s\n", s.c_str()); std::fflush(stdout); };
  return metro::run_synth_demo(opt);
}

Outcome end_to_end(DemoRuns &runs) {
  runs.a = run_demo(runs.first);
  runs.ran = true;
  const auto &r = runs.a;
  const bool ok = r.trees >= 200 && r.train_step_top1 >= 0.9 &&
                  r.heldout_top1_memory > r.heldout_top1_no_memory && r.seconds < 1800;
  return {ok, fmt("%zu trees, training-step top-1 %.3f, held-out top-1 %.3f with memory vs %.3f "
                  "without (%zu targets), %.0fs",
                  r.trees, r.train_step_top1, r.heldout_top1_memory, r.heldout_top1_no_memory,
                  r.heldout_targets, r.seconds)};
}

std::string slurp(const fs::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism(DemoRuns &runs) {
  if (!runs.ran) runs.a = run_demo(runs.first);
  runs.b = run_demo(runs.second);
  std::vector<fs::path> files;
  for (const auto &e : fs::recursive_directory_iterator(runs.first)) {
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), runs.first));
  }
  std::sort(files.begin(), files.end());
  std::size_t compared = 0;
  std::vector<std::string> differing;
  bool covers_split = false, covers_manifest = false, covers_report = false;
  for (const auto &f : files) {
    const std::string s = f.generic_string();
    covers_split = covers_split || s.rfind("split/", 0) == 0;
    covers_manifest = covers_manifest || s == "model/manifest.json";
    covers_report = covers_report || s == "report/report.csv";
    ++compared;
    if (!fs::exists(runs.second / f) || slurp(runs.first / f) != slurp(runs.second / f)) {
      differing.push_back(s);
    }
  }
  const bool ok = differing.empty() && covers_split && covers_manifest && covers_report;
  std::string detail = fmt("%zu files compared, %zu differ", compared, differing.size());
  for (std::size_t i = 0; i < differing.size() && i < 5; ++i) detail += " " + differing[i];
  return {ok, detail};
}

}  // namespace

int main(int argc, char **argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "metro_acceptance";
  std::set<int> only;
  for (int i = 2; i < argc; ++i) only.insert(std::atoi(argv[i]));
  DemoRuns runs;
  runs.first = work / "demo_a";
  runs.second = work / "demo_b";

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient check of the full tiny model", gradient_check},
      {"causality and memory attention structure", causality},
      {"depths and min trees match brute force", oracle_equivalence},
      {"worked example tree", fig1_fixture},
      {"depth-stratified split law", split_law},
      {"planner termination and oracle recovery", planner_soundness},
      {"synth-demo end to end", [&] { return end_to_end(runs); }},
      {"evaluation semantics", evaluation_semantics},
      {"determinism of synth-demo", [&] { return determinism(runs); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception &e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %d %s: %s (%s)\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
