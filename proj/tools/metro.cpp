// SPDX-License-Identifier: Apache-2.0
//
// metro: command-line front end for the planning pipeline.
//
// Exit status: 0 on success, 1 on I/O failure, 2 on usage or validation
// errors.

#include <cstdio>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "metro/pipeline.hpp"

namespace {

using metro::Error;
using metro::ErrorCode;

std::map<std::string, std::string> parse_overrides(const std::vector<std::string> &items) {
  std::map<std::string, std::string> kv;
  for (const auto &item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::kInvalidArgument, "--set expects key=value, got '" + item + "'");
    }
    kv[metro::trim(item.substr(0, eq))] = metro::trim(item.substr(eq + 1));
  }
  return kv;
}

std::vector<double> parse_fractions(const std::string &text) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string part = metro::trim(text.substr(pos, comma - pos));
    out.push_back(metro::parse_number<double>("--fractions", part));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  if (out.size() != 3) throw Error(ErrorCode::kInvalidArgument, "--fractions needs three values");
  return out;
}

void print_stats(const metro::IngestStats &s) {
  std::printf("records %zu, accepted %zu, duplicates %zu, invalid %zu\n", s.records, s.accepted,
              s.duplicates, s.invalid);
  for (const auto &[reason, n] : s.invalid_by_reason) std::printf("  %s: %zu\n", reason.c_str(), n);
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Retrosynthetic planning with route memory"};
  app.require_subcommand(1);
  app.fallthrough();
  int threads = 1;
  std::uint64_t seed = 0;
  auto *seed_opt = app.add_option("--seed", seed, "Random seed");
  app.add_option("--threads", threads, "Worker threads for planning")->check(CLI::PositiveNumber);

  // build-graph
  auto *bg = app.add_subcommand("build-graph", "Ingest reaction lines into a deduplicated graph");
  std::string bg_reactions, bg_out;
  bg->add_option("--reactions", bg_reactions, "Reaction file (reactants>>product)")->required();
  bg->add_option("--out", bg_out, "Graph output file")->required();

  // extract-trees
  auto *et = app.add_subcommand("extract-trees", "Minimum-depth reaction trees for every target");
  std::string et_graph, et_starting, et_out;
  int et_cap = metro::kDefaultTreeCap, et_iters = metro::kDefaultMaxIters;
  et->add_option("--graph", et_graph)->required();
  et->add_option("--starting", et_starting, "Starting materials, one per line")->required();
  et->add_option("--out", et_out, "Trees JSONL")->required();
  et->add_option("--cap", et_cap, "Trees kept per target")->check(CLI::PositiveNumber);
  et->add_option("--max-iters", et_iters, "Depth relaxation rounds")->check(CLI::PositiveNumber);

  // split
  auto *sp = app.add_subcommand("split", "Split targets into train/val/test by depth");
  std::string sp_trees, sp_out, sp_fractions = "0.8,0.1,0.1";
  int sp_min_depth = 2, sp_overflow = 10;
  sp->add_option("--trees", sp_trees)->required();
  sp->add_option("--out", sp_out, "Output directory")->required();
  sp->add_option("--fractions", sp_fractions, "train,val,test");
  sp->add_option("--min-depth", sp_min_depth);
  sp->add_option("--overflow-depth", sp_overflow, "Deeper targets go to test");

  // train
  auto *tr = app.add_subcommand("train", "Train a model on a split directory");
  std::string tr_data, tr_config, tr_out;
  std::vector<std::string> tr_set;
  bool tr_no_memory = false;
  tr->add_option("--data", tr_data, "Split directory")->required();
  tr->add_option("--config", tr_config, "key = value configuration file");
  tr->add_option("--out", tr_out, "Checkpoint directory")->required();
  tr->add_option("--set", tr_set, "Override a config key (key=value)");
  tr->add_flag("--no-memory", tr_no_memory, "Disable the memory module");

  // plan
  auto *pl = app.add_subcommand("plan", "Plan reaction trees for target molecules");
  std::string pl_model, pl_starting, pl_targets, pl_out;
  int pl_beam = 5, pl_depth = 0, pl_top_k = metro::kMaxK;
  pl->add_option("--model", pl_model, "Checkpoint directory")->required();
  pl->add_option("--starting", pl_starting)->required();
  pl->add_option("--targets", pl_targets, "smiles[<TAB>depth] per line")->required();
  pl->add_option("--beam", pl_beam)->check(CLI::PositiveNumber);
  pl->add_option("--max-depth", pl_depth,
                 "Route length limit (default: per-target depth column, else 13)")
      ->check(CLI::PositiveNumber);
  pl->add_option("--top-k", pl_top_k, "Trees per target")->check(CLI::PositiveNumber);
  pl->add_option("--out", pl_out, "Plans JSONL")->required();

  // evaluate
  auto *ev = app.add_subcommand("evaluate", "Score plans against ground-truth leaf sets");
  std::string ev_plans, ev_truth, ev_out, ev_split = "test";
  ev->add_option("--plans", ev_plans)->required();
  ev->add_option("--truth", ev_truth, "Split directory")->required();
  ev->add_option("--split", ev_split);
  ev->add_option("--out", ev_out, "Report directory")->required();

  // synth-demo
  auto *sd = app.add_subcommand("synth-demo", "Synthetic grammar experiment, end to end");
  std::string sd_out, sd_config;
  std::vector<std::string> sd_set;
  bool sd_generate_only = false;
  int sd_beam = 5;
  sd->add_option("--out", sd_out, "Output directory")->required();
  sd->add_option("--config", sd_config, "key = value overrides of the demo configuration");
  sd->add_option("--set", sd_set, "Override a config key (key=value)");
  sd->add_option("--beam", sd_beam)->check(CLI::PositiveNumber);
  sd->add_flag("--generate-only", sd_generate_only, "Only write reactions and starting set");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*bg) {
      print_stats(metro::run_build_graph(bg_reactions, bg_out));
    } else if (*et) {
      const auto s = metro::run_extract_trees(et_graph, et_starting, et_out, et_cap, et_iters);
      std::printf("targets %zu, reachable %zu, trees %zu, truncated %zu\n", s.targets,
                  s.reachable_targets, s.trees, s.truncated_targets);
    } else if (*sp) {
      metro::SplitSpec spec;
      const auto fr = parse_fractions(sp_fractions);
      spec.train = fr[0];
      spec.val = fr[1];
      spec.test = fr[2];
      spec.min_depth = sp_min_depth;
      spec.overflow_depth = sp_overflow;
      spec.seed = seed;
      const auto r = metro::run_split(sp_trees, sp_out, spec);
      std::printf("train %zu, val %zu, test %zu, dropped %zu\n", r.train.size(), r.val.size(),
                  r.test.size(), r.dropped_shallow);
    } else if (*tr) {
      metro::ModelConfig config;
      if (!tr_config.empty()) config.apply(metro::read_key_values(tr_config));
      config.apply(parse_overrides(tr_set));
      if (*seed_opt) config.seed = seed;
      if (tr_no_memory) config.memory_layers = 0;
      const auto s = metro::run_train(tr_data, config, tr_out, [](const metro::TrainLogRow &r) {
        std::printf("epoch %d step %lld lr %.3g train %.4f val %.4f\n", r.epoch,
                    static_cast<long long>(r.step), r.lr, r.train_loss, r.val_loss);
        std::fflush(stdout);
      });
      std::printf("trained %lld steps on %zu routes (%zu too long, %zu prefix duplicates)\n",
                  static_cast<long long>(s.steps), s.train_routes, s.dropped_too_long,
                  s.dropped_prefix);
    } else if (*pl) {
      auto model = metro::load_model<metro::Real>(pl_model);
      const auto s = metro::run_plan(model, metro::read_starting_materials(pl_starting),
                                     metro::read_plan_targets(pl_targets), pl_beam, pl_depth,
                                     pl_top_k, pl_out, threads);
      std::printf("planned %zu of %zu targets\n", s.planned, s.targets);
    } else if (*ev) {
      const auto r = metro::run_evaluate(ev_plans, ev_truth, ev_out, ev_split);
      std::fputs(metro::report_csv(r).c_str(), stdout);
      if (!r.missing.empty()) {
        std::fprintf(stderr, "%s: %zu test targets have no plan record\n",
                     std::string(metro::to_string(ErrorCode::kMissingTarget)).c_str(),
                     r.missing.size());
      }
    } else if (*sd) {
      metro::SynthDemoOptions opt;
      opt.seed = seed;
      opt.out_dir = sd_out;
      if (!sd_config.empty()) opt.config.apply(metro::read_key_values(sd_config));
      opt.config.apply(parse_overrides(sd_set));
      opt.config.validate();
      opt.beam = sd_beam;
      opt.threads = threads;
      opt.generate_only = sd_generate_only;
      opt.log = [](const std::string &s) {
        std::printf("%s\n", s.c_str());
        std::fflush(stdout);
      };
      const auto r = metro::run_synth_demo(opt);
      if (!sd_generate_only) {
        std::printf("trees %zu | training-step top-1 %.3f | held-out top-1 memory %.3f, "
                    "no memory %.3f (%zu targets) | %.1fs\n",
                    r.trees, r.train_step_top1, r.heldout_top1_memory, r.heldout_top1_no_memory,
                    r.heldout_targets, r.seconds);
      }
    }
  } catch (const Error &e) {
    std::fprintf(stderr, "metro: %s\n", e.what());
    return e.code() == ErrorCode::kIoFailure ? 1 : 2;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "metro: %s\n", e.what());
    return 1;
  }
  return 0;
}
