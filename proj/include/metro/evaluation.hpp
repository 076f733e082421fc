// SPDX-License-Identifier: Apache-2.0
//
// Exact-set-match scoring of ranked plans against ground-truth starting
// material sets, with top-k accuracy overall and per tree depth.

#ifndef METRO_EVALUATION_HPP
#define METRO_EVALUATION_HPP

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "metro/dataset.hpp"
#include "metro/error.hpp"
#include "metro/planner.hpp"

namespace metro {

inline constexpr int kMaxK = 5;
inline constexpr int kFirstDepthRow = 2;
inline constexpr int kLastDepthRow = 13;

/// True iff `predicted` equals one of the ground-truth sets.
inline bool exact_match(const MoleculeSet &predicted, const std::vector<MoleculeSet> &ground_truths) {
  return std::find(ground_truths.begin(), ground_truths.end(), predicted) != ground_truths.end();
}

struct DepthRow {
  int depth = 0;
  std::size_t count = 0;
  std::array<std::size_t, kMaxK> hits{};

  double accuracy(int k) const {
    return count ? static_cast<double>(hits[k - 1]) / static_cast<double>(count) : 0.0;
  }
};

struct EvalReport {
  std::size_t targets = 0;
  std::array<std::size_t, kMaxK> hits{};
  /// Every observed depth, plus the fixed rows 2..13.
  std::map<int, DepthRow> by_depth;
  /// Test targets that had no plan record (scored as misses).
  std::vector<std::string> missing;
  nlohmann::json config = nlohmann::json::object();

  double accuracy(int k) const {
    return targets ? static_cast<double>(hits[k - 1]) / static_cast<double>(targets) : 0.0;
  }
};

/// `plans` maps each target to its leaf sets, best rank first.
inline EvalReport score_run(const std::map<std::string, std::vector<MoleculeSet>> &plans,
                            const std::vector<TruthRecord> &truth) {
  EvalReport report;
  for (int d = kFirstDepthRow; d <= kLastDepthRow; ++d) report.by_depth[d].depth = d;
  for (const auto &t : truth) {
    auto &row = report.by_depth[t.depth];
    row.depth = t.depth;
    ++row.count;
    ++report.targets;
    auto it = plans.find(t.target);
    if (it == plans.end()) {
      report.missing.push_back(t.target);
      continue;
    }
    int first_hit = 0;
    for (std::size_t r = 0; r < it->second.size() && r < kMaxK; ++r) {
      if (exact_match(it->second[r], t.ground_truths)) {
        first_hit = static_cast<int>(r) + 1;
        break;
      }
    }
    if (first_hit == 0) continue;
    for (int k = first_hit; k <= kMaxK; ++k) {
      ++row.hits[k - 1];
      ++report.hits[k - 1];
    }
  }
  std::sort(report.missing.begin(), report.missing.end());
  return report;
}

/// Groups plan records by target in rank order. Rank-0 records (failed
/// searches) mark the target as planned but contribute no candidates.
inline std::map<std::string, std::vector<MoleculeSet>> ranked_leaf_sets(
    std::vector<PlanRecord> records) {
  std::stable_sort(records.begin(), records.end(), [](const PlanRecord &a, const PlanRecord &b) {
    if (a.target != b.target) return a.target < b.target;
    return a.rank < b.rank;
  });
  std::map<std::string, std::vector<MoleculeSet>> out;
  for (auto &r : records) {
    auto &list = out[r.target];
    if (r.rank > 0) list.push_back(std::move(r.leaves));
  }
  return out;
}

namespace detail {

inline std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

}  // namespace detail

/// Per-depth table: "depth,top1,...,top5", percentages with one decimal,
/// rows for depths 2..13 (and any other observed depth).
inline std::string report_csv(const EvalReport &report) {
  std::string s = "depth";
  for (int k = 1; k <= kMaxK; ++k) s += ",top" + std::to_string(k);
  s += '\n';
  for (const auto &[depth, row] : report.by_depth) {
    s += std::to_string(depth);
    for (int k = 1; k <= kMaxK; ++k) s += "," + detail::percent(row.accuracy(k));
    s += '\n';
  }
  return s;
}

/// Plot-friendly companion: raw counts and fractions per depth.
inline std::string curves_csv(const EvalReport &report) {
  std::string s = "depth,count";
  for (int k = 1; k <= kMaxK; ++k) s += ",hits" + std::to_string(k);
  for (int k = 1; k <= kMaxK; ++k) s += ",acc" + std::to_string(k);
  s += '\n';
  for (const auto &[depth, row] : report.by_depth) {
    s += std::to_string(depth) + "," + std::to_string(row.count);
    for (int k = 1; k <= kMaxK; ++k) s += "," + std::to_string(row.hits[k - 1]);
    for (int k = 1; k <= kMaxK; ++k) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6f", row.accuracy(k));
      s += ",";
      s += buf;
    }
    s += '\n';
  }
  return s;
}

inline nlohmann::json report_json(const EvalReport &report) {
  nlohmann::json topk = nlohmann::json::object();
  for (int k = 1; k <= kMaxK; ++k) topk["top" + std::to_string(k)] = report.accuracy(k);
  nlohmann::json depths = nlohmann::json::array();
  for (const auto &[depth, row] : report.by_depth) {
    nlohmann::json r = {{"depth", depth}, {"count", row.count}};
    for (int k = 1; k <= kMaxK; ++k) r["top" + std::to_string(k)] = row.accuracy(k);
    depths.push_back(r);
  }
  return {{"targets", report.targets},
          {"accuracy", topk},
          {"by_depth", depths},
          {"missing", report.missing},
          {"config", report.config}};
}

inline void write_report(const std::filesystem::path &dir, const EvalReport &report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoFailure, "cannot create " + dir.string());
  auto put = [&](const std::string &name, const std::string &text) {
    std::ofstream out(dir / name);
    if (!out) throw Error(ErrorCode::kIoFailure, "cannot write " + (dir / name).string());
    out << text;
  };
  put("report.csv", report_csv(report));
  put("curves.csv", curves_csv(report));
  put("summary.json", report_json(report).dump(2) + "\n");
}

}  // namespace metro

#endif  // METRO_EVALUATION_HPP
