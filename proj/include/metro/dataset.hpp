// SPDX-License-Identifier: Apache-2.0
//
// Depth-stratified target split and route-wise training examples.

#ifndef METRO_DATASET_HPP
#define METRO_DATASET_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/error.hpp"
#include "metro/tree_extraction.hpp"

namespace metro {

inline constexpr const char *kSplitFormat = "metro-split-v1";
inline constexpr std::array<const char *, 3> kSplitNames{"train", "val", "test"};

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  int min_depth = 2;
  /// Targets deeper than this go to test only.
  int overflow_depth = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (train < 0 || val < 0 || test < 0 ||
        std::abs(train + val + test - 1.0) > 1e-9) {
      throw Error(ErrorCode::kInvalidArgument, "split fractions must sum to 1");
    }
    if (min_depth < 2) {
      throw Error(ErrorCode::kInvalidArgument, "min_depth must be >= 2");
    }
    if (overflow_depth < min_depth) {
      throw Error(ErrorCode::kInvalidArgument, "overflow_depth < min_depth");
    }
  }
};

struct SplitResult {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::size_t dropped_shallow = 0;

  std::vector<std::string> &part(int i) { return i == 0 ? train : i == 1 ? val : test; }
  const std::vector<std::string> &part(int i) const {
    return i == 0 ? train : i == 1 ? val : test;
  }
};

using TreesByTarget = std::map<std::string, std::vector<ReactionTree>>;

inline TreesByTarget group_by_target(std::vector<ReactionTree> trees) {
  TreesByTarget out;
  for (auto &t : trees) out[t.target].push_back(std::move(t));
  return out;
}

namespace detail {

/// Largest-remainder apportionment of n items over fractions; ties go to the
/// earlier split. Buckets with at least 3 items always populate every split
/// with a positive fraction.
inline std::array<std::size_t, 3> apportion(std::size_t n,
                                            const std::array<double, 3> &frac) {
  std::array<std::size_t, 3> count{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    const double exact = frac[i] * static_cast<double>(n);
    count[i] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[i] = exact - static_cast<double>(count[i]);
    used += count[i];
  }
  while (used < n) {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (rem[i] > rem[best] + 1e-12) best = i;
    }
    ++count[best];
    rem[best] = -1.0;
    ++used;
  }
  if (n >= 3) {
    for (int i = 1; i < 3; ++i) {
      if (count[i] == 0 && frac[i] > 0) {
        const int donor = count[0] > 1 ? 0 : (i == 1 ? 2 : 1);
        if (count[donor] > 1) {
          --count[donor];
          ++count[i];
        }
      }
    }
  }
  return count;
}

template <typename T>
void seeded_shuffle(std::vector<T> &items, std::mt19937_64 &rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace detail

/// Splits targets per depth bucket. Each target lands in exactly one split;
/// depth < min_depth is dropped; depth > overflow_depth goes to test.
inline SplitResult split_targets(const TreesByTarget &trees,
                                 const SplitSpec &spec) {
  spec.validate();
  if (trees.empty()) throw Error(ErrorCode::kEmptyInput, "no trees to split");
  std::map<int, std::vector<std::string>> buckets;
  for (const auto &[target, list] : trees) {
    if (list.empty()) {
      throw Error(ErrorCode::kInvalidArgument, "target " + target + " has no tree");
    }
    const int depth = list.front().depth;
    for (const auto &t : list) {
      if (t.depth != depth) {
        throw Error(ErrorCode::kInvalidArgument,
                    "trees of " + target + " disagree on depth");
      }
    }
    buckets[depth].push_back(target);
  }
  SplitResult out;
  std::mt19937_64 rng(spec.seed);
  for (auto &[depth, targets] : buckets) {
    if (depth < spec.min_depth) {
      out.dropped_shallow += targets.size();
      continue;
    }
    if (depth > spec.overflow_depth) {
      out.test.insert(out.test.end(), targets.begin(), targets.end());
      continue;
    }
    detail::seeded_shuffle(targets, rng);
    const auto count = detail::apportion(targets.size(), {spec.train, spec.val, spec.test});
    std::size_t pos = 0;
    for (int s = 0; s < 3; ++s) {
      auto &dst = out.part(s);
      dst.insert(dst.end(), targets.begin() + pos, targets.begin() + pos + count[s]);
      pos += count[s];
    }
  }
  for (int s = 0; s < 3; ++s) std::sort(out.part(s).begin(), out.part(s).end());
  return out;
}

/// One training sample: a route's product chain and the reactant set each
/// product is made from.
struct RouteExample {
  std::string tree_id;
  std::string target;
  std::vector<std::string> products;
  std::vector<std::string> step_targets;
  int depth = 0;

  friend bool operator==(const RouteExample &, const RouteExample &) = default;
};

inline std::vector<RouteExample> tree_to_examples(const ReactionTree &tree,
                                                  const std::string &tree_id) {
  std::vector<RouteExample> out;
  for (const auto &route : routes_of(tree)) {
    RouteExample ex;
    ex.tree_id = tree_id;
    ex.target = tree.target;
    ex.products = route.products();
    for (const auto &r : route.reactions) ex.step_targets.push_back(r.reactant_text());
    ex.depth = tree.depth;
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<RouteExample> tree_to_examples(const ReactionTree &tree) {
  return tree_to_examples(tree, tree.target);
}

/// Ground truth for one target: every acceptable leaf set.
struct TruthRecord {
  std::string target;
  int depth = 0;
  std::vector<MoleculeSet> ground_truths;

  friend bool operator==(const TruthRecord &, const TruthRecord &) = default;
};

inline nlohmann::json example_to_json(const RouteExample &ex) {
  return {{"tree_id", ex.tree_id},
          {"target", ex.target},
          {"products", ex.products},
          {"step_targets", ex.step_targets},
          {"depth", ex.depth}};
}

inline RouteExample example_from_json(const nlohmann::json &j) {
  RouteExample ex;
  ex.tree_id = j.at("tree_id").get<std::string>();
  ex.target = j.at("target").get<std::string>();
  ex.products = j.at("products").get<std::vector<std::string>>();
  ex.step_targets = j.at("step_targets").get<std::vector<std::string>>();
  ex.depth = j.at("depth").get<int>();
  if (ex.products.size() != ex.step_targets.size() || ex.products.empty()) {
    throw Error(ErrorCode::kSchemaMismatch,
                "example " + ex.tree_id + " has mismatched step counts");
  }
  return ex;
}

inline nlohmann::json truth_to_json(const TruthRecord &t) {
  nlohmann::json sets = nlohmann::json::array();
  for (const auto &s : t.ground_truths) sets.push_back(std::vector<std::string>(s.begin(), s.end()));
  return {{"target", t.target}, {"depth", t.depth}, {"ground_truths", sets}};
}

inline TruthRecord truth_from_json(const nlohmann::json &j) {
  TruthRecord t;
  t.target = j.at("target").get<std::string>();
  t.depth = j.at("depth").get<int>();
  for (const auto &s : j.at("ground_truths")) {
    auto v = s.get<std::vector<std::string>>();
    t.ground_truths.emplace_back(v.begin(), v.end());
  }
  return t;
}

inline nlohmann::json spec_to_json(const SplitSpec &spec) {
  return {{"fractions", {spec.train, spec.val, spec.test}},
          {"min_depth", spec.min_depth},
          {"overflow_depth", spec.overflow_depth},
          {"seed", spec.seed}};
}

/// Contents of one split: header plus examples and per-target truth.
struct SplitData {
  std::string name;
  SplitSpec spec;
  std::vector<std::string> targets;
  std::vector<RouteExample> examples;
  std::vector<TruthRecord> truth;

  friend bool operator==(const SplitData &a, const SplitData &b) {
    return a.name == b.name && a.targets == b.targets &&
           a.examples == b.examples && a.truth == b.truth;
  }
};

inline std::vector<SplitData> materialize_split(const TreesByTarget &trees,
                                                const SplitResult &split,
                                                const SplitSpec &spec) {
  std::vector<SplitData> out;
  for (int s = 0; s < 3; ++s) {
    SplitData data;
    data.name = kSplitNames[s];
    data.spec = spec;
    data.targets = split.part(s);
    for (const auto &target : data.targets) {
      const auto &list = trees.at(target);
      TruthRecord truth{target, list.front().depth, {}};
      for (std::size_t k = 0; k < list.size(); ++k) {
        auto ex = tree_to_examples(list[k], target + "#" + std::to_string(k));
        data.examples.insert(data.examples.end(), ex.begin(), ex.end());
        if (std::find(truth.ground_truths.begin(), truth.ground_truths.end(),
                      list[k].leaves) == truth.ground_truths.end()) {
          truth.ground_truths.push_back(list[k].leaves);
        }
      }
      data.truth.push_back(std::move(truth));
    }
    out.push_back(std::move(data));
  }
  return out;
}

namespace detail {

inline nlohmann::json split_header(const SplitData &data, const std::string &kind) {
  return {{"kind", "header"},
          {"format", kSplitFormat},
          {"content", kind},
          {"split", data.name},
          {"spec", spec_to_json(data.spec)},
          {"seed", data.spec.seed},
          {"counts",
           {{"targets", data.targets.size()},
            {"examples", data.examples.size()}}}};
}

inline void write_jsonl(const std::filesystem::path &path,
                        const nlohmann::json &header,
                        const std::vector<nlohmann::json> &rows) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + path.string());
  out << header.dump() << '\n';
  for (const auto &r : rows) out << r.dump() << '\n';
  if (!out) throw Error(ErrorCode::kIoFailure, "write failed: " + path.string());
}

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoFailure, "cannot open " + path.string());
  std::vector<nlohmann::json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      rows.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception &e) {
      throw Error(ErrorCode::kSchemaMismatch, path.string() + ": " + e.what());
    }
  }
  return rows;
}

inline void check_header(const nlohmann::json &h, const std::string &split,
                         const std::string &kind,
                         const std::filesystem::path &path) {
  const bool ok = h.is_object() && h.value("kind", "") == "header" &&
                  h.value("format", "") == kSplitFormat &&
                  h.value("content", "") == kind &&
                  h.value("split", "") == split && h.contains("counts") &&
                  h.contains("spec");
  if (!ok) throw Error(ErrorCode::kSchemaMismatch, "bad header in " + path.string());
}

}  // namespace detail

/// Writes <dir>/<split>.jsonl (examples), <split>_truth.jsonl and
/// <split>_targets.txt ("smiles<TAB>depth") for each split.
inline void write_split(const std::filesystem::path &dir,
                        const std::vector<SplitData> &splits) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string());
  for (const auto &data : splits) {
    std::vector<nlohmann::json> rows;
    for (const auto &ex : data.examples) rows.push_back(example_to_json(ex));
    detail::write_jsonl(dir / (data.name + ".jsonl"),
                        detail::split_header(data, "examples"), rows);
    rows.clear();
    for (const auto &t : data.truth) rows.push_back(truth_to_json(t));
    detail::write_jsonl(dir / (data.name + "_truth.jsonl"),
                        detail::split_header(data, "truth"), rows);
    std::ofstream targets(dir / (data.name + "_targets.txt"));
    if (!targets) throw Error(ErrorCode::kIoFailure, "cannot write targets list");
    for (const auto &t : data.truth) targets << t.target << '\t' << t.depth << '\n';
  }
}

inline SplitData read_split(const std::filesystem::path &dir,
                            const std::string &name) {
  SplitData data;
  data.name = name;
  const auto ex_path = dir / (name + ".jsonl");
  const auto truth_path = dir / (name + "_truth.jsonl");
  auto rows = detail::read_jsonl(ex_path);
  if (rows.empty()) throw Error(ErrorCode::kSchemaMismatch, "missing header in " + ex_path.string());
  detail::check_header(rows.front(), name, "examples", ex_path);
  try {
    const auto &spec = rows.front().at("spec");
    const auto fr = spec.at("fractions").get<std::vector<double>>();
    if (fr.size() != 3) throw Error(ErrorCode::kSchemaMismatch, "bad fractions");
    data.spec.train = fr[0];
    data.spec.val = fr[1];
    data.spec.test = fr[2];
    data.spec.min_depth = spec.at("min_depth").get<int>();
    data.spec.overflow_depth = spec.at("overflow_depth").get<int>();
    data.spec.seed = spec.at("seed").get<std::uint64_t>();
    for (std::size_t i = 1; i < rows.size(); ++i) {
      data.examples.push_back(example_from_json(rows[i]));
    }
    if (rows.front().at("counts").at("examples").get<std::size_t>() !=
        data.examples.size()) {
      throw Error(ErrorCode::kSchemaMismatch, "example count mismatch in " + ex_path.string());
    }
    auto truth_rows = detail::read_jsonl(truth_path);
    if (truth_rows.empty()) throw Error(ErrorCode::kSchemaMismatch, "missing header in " + truth_path.string());
    detail::check_header(truth_rows.front(), name, "truth", truth_path);
    for (std::size_t i = 1; i < truth_rows.size(); ++i) {
      data.truth.push_back(truth_from_json(truth_rows[i]));
      data.targets.push_back(data.truth.back().target);
    }
    if (truth_rows.front().at("counts").at("targets").get<std::size_t>() !=
        data.truth.size()) {
      throw Error(ErrorCode::kSchemaMismatch, "target count mismatch in " + truth_path.string());
    }
  } catch (const nlohmann::json::exception &e) {
    throw Error(ErrorCode::kSchemaMismatch, e.what());
  }
  return data;
}

}  // namespace metro

#endif  // METRO_DATASET_HPP
