// SPDX-License-Identifier: Apache-2.0
//
// File-to-file pipeline stages behind the command-line tool.

#ifndef METRO_PIPELINE_HPP
#define METRO_PIPELINE_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/chem_text.hpp"
#include "metro/config.hpp"
#include "metro/dataset.hpp"
#include "metro/error.hpp"
#include "metro/evaluation.hpp"
#include "metro/inference.hpp"
#include "metro/model.hpp"
#include "metro/planner.hpp"
#include "metro/reaction_graph.hpp"
#include "metro/synth.hpp"
#include "metro/train.hpp"
#include "metro/tree_extraction.hpp"

namespace metro {

using Real = float;

namespace detail {

inline void write_text(const std::filesystem::path &path, const std::string &text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

inline nlohmann::json stats_json(const IngestStats &s) {
  return {{"records", s.records},
          {"accepted", s.accepted},
          {"duplicates", s.duplicates},
          {"invalid", s.invalid},
          {"invalid_by_reason", s.invalid_by_reason}};
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)> &fn) {
  threads = std::max(1, std::min<int>(threads, static_cast<int>(n)));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto &th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace detail

// ----------------------------------------------------------- build-graph

inline IngestStats run_build_graph(const std::filesystem::path &reactions,
                                   const std::filesystem::path &out) {
  auto built = build_graph_from_lines(read_lines(reactions));
  write_graph(built.graph, out);
  nlohmann::json stats = detail::stats_json(built.stats);
  stats["molecules"] = built.graph.num_molecules();
  stats["reactions"] = built.graph.records().size();
  detail::write_text(out.string() + ".stats.json", stats.dump(2) + "\n");
  return built.stats;
}

// --------------------------------------------------------- extract-trees

inline ExtractionStats run_extract_trees(const std::filesystem::path &graph_path,
                                         const std::filesystem::path &starting_path,
                                         const std::filesystem::path &out, int cap,
                                         int max_iters) {
  const ReactionGraph graph = read_graph(graph_path);
  const MoleculeSet starting = read_starting_materials(starting_path);
  ExtractionStats stats;
  auto trees = extract_all_trees(graph, starting, cap, max_iters, &stats);
  write_trees(trees, out);
  nlohmann::json j = {{"targets", stats.targets},
                      {"reachable_targets", stats.reachable_targets},
                      {"trees", stats.trees},
                      {"truncated_targets", stats.truncated_targets}};
  nlohmann::json by_depth = nlohmann::json::object();
  for (const auto &[d, n] : stats.targets_by_depth) by_depth[std::to_string(d)] = n;
  j["targets_by_depth"] = by_depth;
  detail::write_text(out.string() + ".stats.json", j.dump(2) + "\n");
  return stats;
}

// ------------------------------------------------------------------ split

inline SplitResult run_split(const std::filesystem::path &trees_path,
                             const std::filesystem::path &out_dir, const SplitSpec &spec) {
  const auto grouped = group_by_target(read_trees(trees_path));
  auto split = split_targets(grouped, spec);
  write_split(out_dir, materialize_split(grouped, split, spec));
  return split;
}

// ------------------------------------------------------------------ train

/// Vocabulary over every product and reactant set of the given splits.
inline Vocab vocab_from_splits(const std::vector<SplitData> &splits) {
  std::vector<std::string> corpus;
  for (const auto &s : splits) {
    for (const auto &ex : s.examples) {
      corpus.insert(corpus.end(), ex.products.begin(), ex.products.end());
      corpus.insert(corpus.end(), ex.step_targets.begin(), ex.step_targets.end());
    }
    for (const auto &t : s.targets) corpus.push_back(t);
  }
  return build_vocab(corpus);
}

struct TrainSummary {
  std::int64_t steps = 0;
  std::size_t train_routes = 0;
  std::size_t val_routes = 0;
  std::size_t dropped_too_long = 0;
  std::size_t dropped_prefix = 0;
  double final_train_loss = 0;
  double final_val_loss = 0;
};

inline TrainSummary run_train(const std::filesystem::path &data_dir, ModelConfig config,
                              const std::filesystem::path &out_dir,
                              const std::function<void(const TrainLogRow &)> &progress = {}) {
  config.validate();
  std::vector<SplitData> splits;
  for (const char *name : kSplitNames) splits.push_back(read_split(data_dir, name));
  MetroModel<Real> model(config, vocab_from_splits(splits));
  const auto train_set = tokenize_examples(splits[0].examples, model.vocab(), config.max_len,
                                           config.dedupe_prefix_routes);
  const auto val_set = tokenize_examples(splits[1].examples, model.vocab(), config.max_len,
                                         config.dedupe_prefix_routes);
  TrainOptions options;
  options.out_dir = out_dir;
  options.on_epoch = progress;
  const auto result = train(model, train_set, &val_set, options);
  write_train_log(out_dir / "train_log.csv", result.log);
  TrainSummary s;
  s.steps = result.steps;
  s.train_routes = train_set.routes.size();
  s.val_routes = val_set.routes.size();
  s.dropped_too_long = train_set.dropped_too_long + val_set.dropped_too_long;
  s.dropped_prefix = train_set.dropped_prefix + val_set.dropped_prefix;
  if (!result.log.empty()) {
    s.final_train_loss = result.log.back().train_loss;
    s.final_val_loss = result.log.back().val_loss;
  }
  nlohmann::json j = {{"steps", s.steps},
                      {"train_routes", s.train_routes},
                      {"val_routes", s.val_routes},
                      {"dropped_too_long", s.dropped_too_long},
                      {"dropped_prefix", s.dropped_prefix},
                      {"final_train_loss", s.final_train_loss},
                      {"final_val_loss", std::isnan(s.final_val_loss) ? nlohmann::json(nullptr)
                                                                      : nlohmann::json(s.final_val_loss)}};
  detail::write_text(out_dir / "train_summary.json", j.dump(2) + "\n");
  return s;
}

// ------------------------------------------------------------------- plan

struct PlanTarget {
  std::string smiles;
  std::optional<int> depth;
};

/// "smiles[<TAB>depth]" per line; '#' comments and blank lines skipped.
inline std::vector<PlanTarget> read_plan_targets(const std::filesystem::path &path) {
  std::vector<PlanTarget> out;
  for (const auto &line : read_lines(path)) {
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    PlanTarget target;
    const auto tab = t.find_first_of(" \t");
    target.smiles = t.substr(0, tab);
    if (tab != std::string::npos) {
      target.depth = parse_number<int>("depth of " + target.smiles, trim(t.substr(tab + 1)));
    }
    out.push_back(std::move(target));
  }
  return out;
}

struct PlanRunStats {
  std::size_t targets = 0;
  std::size_t planned = 0;
  std::size_t failed = 0;
};

/// Plans every target. max_depth 0 means "the depth column of the targets
/// file, or 13 when absent".
inline PlanRunStats run_plan(MetroModel<Real> &model, const MoleculeSet &starting,
                             const std::vector<PlanTarget> &targets, int beam, int max_depth,
                             int top_k, const std::filesystem::path &out, int threads = 1) {
  std::vector<std::string> lines(targets.size());
  std::vector<int> ok(targets.size(), 0);
  detail::parallel_for(targets.size(), threads, [&](std::size_t i) {
    const auto &t = targets[i];
    PlanOptions options;
    options.beam = beam;
    options.top_k = top_k;
    options.max_depth = max_depth > 0 ? max_depth : t.depth.value_or(13);
    ModelSingleStep<Real> step(model);
    std::string text;
    try {
      for (const auto &r : plan(t.smiles, step, starting, options)) {
        text += plan_to_json(t.smiles, r).dump() + "\n";
      }
      ok[i] = 1;
    } catch (const Error &e) {
      if (e.code() != ErrorCode::kNoPlanFound && e.code() != ErrorCode::kInvalidTarget &&
          e.code() != ErrorCode::kSequenceTooLong) {
        throw;
      }
      text = failed_plan_json(t.smiles, std::string(to_string(e.code()))).dump() + "\n";
    }
    lines[i] = std::move(text);
  });
  std::string all;
  for (const auto &l : lines) all += l;
  detail::write_text(out, all);
  PlanRunStats s;
  s.targets = targets.size();
  for (int v : ok) s.planned += v;
  s.failed = s.targets - s.planned;
  return s;
}

// --------------------------------------------------------------- evaluate

inline EvalReport run_evaluate(const std::filesystem::path &plans_path,
                               const std::filesystem::path &truth_dir,
                               const std::filesystem::path &out_dir,
                               const std::string &split = "test") {
  const auto plans = ranked_leaf_sets(read_plans(plans_path));
  const SplitData data = read_split(truth_dir, split);
  EvalReport report = score_run(plans, data.truth);
  report.config = {{"plans", plans_path.filename().string()}, {"split", split}};
  write_report(out_dir, report);
  return report;
}

// -------------------------------------------------------------- synth-demo

/// Configuration used by synth-demo unless overridden.
inline ModelConfig synth_demo_config() {
  ModelConfig c;
  c.max_len = 24;
  c.d_model = 64;
  c.encoder_layers = 3;
  c.decoder_layers = 3;
  c.memory_layers = 3;
  c.heads = 4;
  c.d_head = 16;
  c.ffn_hidden = 256;
  c.dropout = 0.1;
  c.epochs = 150;
  c.batch = 32;
  c.warmup_steps = 400;
  c.lr_factor = 1.0;
  c.eval_every = 25;
  return c;
}

struct SynthDemoOptions {
  std::uint64_t seed = 0;
  std::filesystem::path out_dir;
  ModelConfig config = synth_demo_config();
  SynthSpec corpus;
  int beam = 5;
  int threads = 1;
  bool generate_only = false;
  std::function<void(const std::string &)> log;
};

struct SynthDemoResult {
  std::size_t trees = 0;
  double train_step_top1 = 0;
  double heldout_top1_memory = 0;
  double heldout_top1_no_memory = 0;
  std::size_t heldout_targets = 0;
  double seconds = 0;
};

/// Generates the synthetic corpus and runs every pipeline stage on it:
/// build-graph, extract-trees, split, train (with and without memory),
/// plan the test targets and evaluate both models.
inline SynthDemoResult run_synth_demo(const SynthDemoOptions &opt) {
  namespace fs = std::filesystem;
  const auto start = std::chrono::steady_clock::now();
  auto say = [&](const std::string &s) {
    if (opt.log) opt.log(s);
  };
  const fs::path dir = opt.out_dir;
  SynthSpec spec = opt.corpus;
  spec.seed = opt.seed;
  const SynthCorpus corpus = generate_synthetic(spec);
  {
    std::string text;
    for (const auto &l : corpus.reaction_lines) text += l + "\n";
    detail::write_text(dir / "reactions.smi", text);
    text.clear();
    for (const auto &s : corpus.starting) text += s + "\n";
    detail::write_text(dir / "starting.smi", text);
  }
  SynthDemoResult result;
  if (opt.generate_only) return result;

  run_build_graph(dir / "reactions.smi", dir / "graph.smi");
  const auto ex = run_extract_trees(dir / "graph.smi", dir / "starting.smi", dir / "trees.jsonl",
                                    kDefaultTreeCap, kDefaultMaxIters);
  result.trees = ex.trees;
  say("extracted " + std::to_string(ex.trees) + " trees");
  SplitSpec split;
  split.seed = opt.seed;
  run_split(dir / "trees.jsonl", dir / "split", split);

  ModelConfig config = opt.config;
  config.seed = opt.seed;
  auto progress = [&](const std::string &tag) {
    return [&, tag](const TrainLogRow &r) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[%s] epoch %d step %lld train %.4f val %.4f", tag.c_str(),
                    r.epoch, static_cast<long long>(r.step), r.train_loss, r.val_loss);
      say(buf);
    };
  };
  run_train(dir / "split", config, dir / "model", progress("memory"));
  ModelConfig plain = config;
  plain.memory_layers = 0;
  run_train(dir / "split", plain, dir / "model_no_memory", progress("no-memory"));

  const MoleculeSet starting = read_starting_materials(dir / "starting.smi");
  const auto targets = read_plan_targets(dir / "split" / "test_targets.txt");
  result.heldout_targets = targets.size();
  nlohmann::json summary = {{"seed", opt.seed}, {"trees", result.trees}};
  for (const bool memory : {true, false}) {
    const std::string name = memory ? "model" : "model_no_memory";
    auto model = load_model<Real>(dir / name);
    if (memory) {
      const SplitData train_split = read_split(dir / "split", "train");
      const auto acc = single_step_accuracy(model, train_split.examples, 1);
      result.train_step_top1 = acc.rate();
      summary["train_steps"] = acc.steps;
      summary["train_step_top1"] = acc.rate();
      say("training-step top-1 " + std::to_string(acc.rate()));
    }
    const fs::path plans = dir / (memory ? "plans.jsonl" : "plans_no_memory.jsonl");
    run_plan(model, starting, targets, opt.beam, 0, kMaxK, plans, opt.threads);
    const auto report = run_evaluate(plans, dir / "split",
                                     dir / (memory ? "report" : "report_no_memory"));
    (memory ? result.heldout_top1_memory : result.heldout_top1_no_memory) = report.accuracy(1);
    summary[memory ? "heldout_top1_memory" : "heldout_top1_no_memory"] = report.accuracy(1);
    say(name + " held-out top-1 " + std::to_string(report.accuracy(1)));
  }
  summary["heldout_targets"] = result.heldout_targets;
  detail::write_text(dir / "summary.json", summary.dump(2) + "\n");
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace metro

#endif  // METRO_PIPELINE_HPP
